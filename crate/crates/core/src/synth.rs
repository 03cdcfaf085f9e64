//! Deterministic synthetic cities with a known crime-generating function,
//! and a brute-force feature oracle to cross-check the features module.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Weekday};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Dirichlet, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{r2, transform_count};
use crate::features::{build_matrix, registry, CategoryOntology, DiversityMode, FeatureConfig, FeatureMatrix, Subset};
use crate::geo::{distance_point_polygon, PlanarPoint, PolygonShape, TractGeometry, SQ_FEET_PER_SQ_MILE};
use crate::ingest::{
    build_dataset, write_census, write_events, write_stations, write_taxi, write_tracts, write_turnstile, write_venues,
    BuildOptions, CensusRow, CensusTable, CrimeType, EventRecord, IncidentType, RawSources, RegionDataset,
    StationRecord, TaxiTrip, TurnstileInterval, VenueRecord,
};
use crate::model::tree_rng;

/// A weighted term of the crime-generating function, applied to `ln(1 + value)`
/// of the named feature after standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalTerm {
    pub feature: String,
    pub weight: f64,
}

fn term(feature: &str, weight: f64) -> SignalTerm {
    SignalTerm { feature: feature.into(), weight }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_tracts: usize,
    /// Nominal grid cell side in feet.
    pub cell_size: f64,
    /// Vertex jitter as a fraction of the cell side.
    pub jitter: f64,
    pub buffer: f64,
    /// First year; the second is `first_year + 1`.
    pub first_year: i32,
    /// Mean venues per tract for each ontology category at average activity.
    pub venue_intensity: Vec<f64>,
    pub uncategorized_intensity: f64,
    /// Share of venues and stations placed exactly on a tract border.
    pub border_share: f64,
    pub mean_checkins: f64,
    pub station_probability: f64,
    pub turnstile_days: usize,
    pub mean_station_entries: f64,
    pub taxi_intensity: f64,
    pub noise_sd: f64,
    pub offset: f64,
    pub scale: f64,
    /// Fraction of the latent variance carried by the mobility terms.
    pub ambient_share: f64,
    pub census_terms: Vec<SignalTerm>,
    pub mobility_terms: Vec<SignalTerm>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_tracts: 400,
            cell_size: 2000.0,
            jitter: 0.15,
            buffer: 50.0,
            first_year: 2014,
            venue_intensity: vec![0.6, 0.2, 0.1, 3.0, 1.0, 0.8, 1.5, 1.2, 2.5, 1.0],
            uncategorized_intensity: 0.3,
            border_share: 0.05,
            mean_checkins: 30.0,
            station_probability: 0.3,
            turnstile_days: 24,
            mean_station_entries: 2000.0,
            taxi_intensity: 25.0,
            noise_sd: 0.25,
            offset: 3.0,
            scale: 1.0,
            ambient_share: 0.6,
            census_terms: vec![term("frac_poverty", 1.0), term("population", 0.7), term("frac_vacant", 0.5)],
            mobility_terms: vec![
                term("checkins_food", 1.0),
                term("taxi_pickups_wd", 0.8),
                term("venues_nightlife_spot", 0.6),
            ],
        }
    }
}

impl SynthConfig {
    pub fn years(&self) -> [i32; 2] {
        [self.first_year, self.first_year + 1]
    }

    pub fn validate(&self, ontology: &CategoryOntology) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.n_tracts < 25 {
            return bad(format!("n_tracts must be at least 25, got {}", self.n_tracts));
        }
        if !(0.0..=1.0).contains(&self.ambient_share) {
            return bad(format!("ambient_share {} outside [0, 1]", self.ambient_share));
        }
        if self.venue_intensity.len() != ontology.len() {
            return bad(format!(
                "venue_intensity has {} entries for {} categories",
                self.venue_intensity.len(),
                ontology.len()
            ));
        }
        if !(0.0..0.3).contains(&self.jitter) || !(self.cell_size > 0.0) {
            return bad("jitter must be in [0, 0.3) and cell_size positive".into());
        }
        // events sit at least 10% of the narrowest cell side inside their tract
        if 0.1 * self.cell_size * (1.0 - 2.0 * self.jitter) <= self.buffer {
            return bad("cells too small for the buffer".into());
        }
        let nonneg = [
            self.uncategorized_intensity,
            self.mean_checkins,
            self.mean_station_entries,
            self.taxi_intensity,
            self.noise_sd,
            self.scale,
        ];
        if nonneg.iter().chain(&self.venue_intensity).any(|v| !(*v >= 0.0))
            || !(0.0..=1.0).contains(&self.border_share)
            || !(0.0..=1.0).contains(&self.station_probability)
        {
            return bad("intensities must be nonnegative and probabilities in [0, 1]".into());
        }
        if self.census_terms.is_empty() || self.mobility_terms.is_empty() {
            return bad("census_terms and mobility_terms must be non-empty".into());
        }
        Ok(())
    }
}

/// Relative frequency of each crime type among generated incidents.
pub const CRIME_SHARES: [(CrimeType, f64); 6] = [
    (CrimeType::GrandLarceny, 0.2),
    (CrimeType::Robbery, 0.1),
    (CrimeType::Burglary, 0.1),
    (CrimeType::Assault, 0.3),
    (CrimeType::VehicleLarceny, 0.1),
    (CrimeType::Other, 0.2),
];

#[derive(Debug, Clone)]
pub struct SynthCity {
    pub config: SynthConfig,
    pub raw: RawSources,
    pub dataset: RegionDataset,
    /// Per-tract mobility activity level (standard normal).
    pub activity: Vec<f64>,
    /// Expected log1p count per tract, before noise.
    pub latent: BTreeMap<i32, BTreeMap<IncidentType, Vec<f64>>>,
}

impl SynthCity {
    /// R² of the noise-free latent against the observed transformed counts.
    pub fn latent_ceiling(&self, year: i32, incident: IncidentType) -> Result<f64> {
        let latent = self
            .latent
            .get(&year)
            .and_then(|m| m.get(&incident))
            .ok_or_else(|| Error::Argument(format!("no latent for {year}")))?;
        let y: Vec<f64> = self.dataset.crime_counts(year, incident)?.into_iter().map(transform_count).collect();
        r2(&y, latent)
    }

    /// Writes every source in the ingest formats.
    pub fn write(&self, dir: &Path) -> Result<SynthFiles> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = SynthFiles::in_dir(dir, &self.config.years());
        write_tracts(&files.tracts, &self.raw.tracts)?;
        for (year, path) in &files.census {
            write_census(path, &self.raw.census[year])?;
        }
        write_events(&files.events, &self.raw.events)?;
        write_venues(&files.venues, &self.raw.venues, &self.dataset.ontology)?;
        write_stations(&files.stations, &self.raw.stations)?;
        write_turnstile(&files.turnstile, &self.raw.turnstile)?;
        write_taxi(&files.taxi, &self.raw.taxi)?;
        Ok(files)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthFiles {
    pub tracts: PathBuf,
    pub census: BTreeMap<i32, PathBuf>,
    pub events: PathBuf,
    pub venues: PathBuf,
    pub stations: PathBuf,
    pub turnstile: PathBuf,
    pub taxi: PathBuf,
}

impl SynthFiles {
    pub fn in_dir(dir: &Path, years: &[i32]) -> Self {
        Self {
            tracts: dir.join("tracts.geojson"),
            census: years.iter().map(|&y| (y, dir.join(format!("census_{y}.csv")))).collect(),
            events: dir.join("events.csv"),
            venues: dir.join("venues.csv"),
            stations: dir.join("stations.csv"),
            turnstile: dir.join("turnstile.csv"),
            taxi: dir.join("taxi.csv"),
        }
    }
}

/// Four corners of a cell, counter-clockwise from the lower left.
type Quad = [PlanarPoint; 4];

fn bilinear(q: &Quad, u: f64, v: f64) -> PlanarPoint {
    let [a, b, c, d] = q;
    PlanarPoint::new(
        (1.0 - u) * (1.0 - v) * a.x + u * (1.0 - v) * b.x + u * v * c.x + (1.0 - u) * v * d.x,
        (1.0 - u) * (1.0 - v) * a.y + u * (1.0 - v) * b.y + u * v * c.y + (1.0 - u) * v * d.y,
    )
}

/// Jittered grid with shared vertices; returns the quads in tract order.
fn grid(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Quad> {
    let cols = (cfg.n_tracts as f64).sqrt().ceil() as usize;
    let rows = cfg.n_tracts.div_ceil(cols);
    let amp = cfg.jitter * cfg.cell_size;
    let mut vertices = vec![vec![PlanarPoint::new(0.0, 0.0); rows + 1]; cols + 1];
    for (i, column) in vertices.iter_mut().enumerate() {
        for (j, v) in column.iter_mut().enumerate() {
            *v = PlanarPoint::new(
                i as f64 * cfg.cell_size + rng.gen_range(-amp..=amp),
                j as f64 * cfg.cell_size + rng.gen_range(-amp..=amp),
            );
        }
    }
    (0..cfg.n_tracts)
        .map(|k| {
            let (i, j) = (k % cols, k / cols);
            [vertices[i][j], vertices[i + 1][j], vertices[i + 1][j + 1], vertices[i][j + 1]]
        })
        .collect()
}

fn tract_id(k: usize) -> String {
    format!("T{k:04}")
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as u64
}

/// Point inside or, with probability `border_share`, exactly on an edge of `q`.
fn place(q: &Quad, border_share: f64, rng: &mut ChaCha8Rng) -> PlanarPoint {
    if rng.gen_bool(border_share) {
        let t = rng.gen_range(0.1..0.9);
        match rng.gen_range(0..4) {
            0 => bilinear(q, t, 0.0),
            1 => bilinear(q, 1.0, t),
            2 => bilinear(q, t, 1.0),
            _ => bilinear(q, 0.0, t),
        }
    } else {
        bilinear(q, rng.gen_range(0.02..0.98), rng.gen_range(0.02..0.98))
    }
}

fn random_time(year: i32, rng: &mut ChaCha8Rng) -> NaiveDateTime {
    let days = if NaiveDate::from_ymd_opt(year, 12, 31).expect("valid").ordinal() == 366 { 366 } else { 365 };
    let date = NaiveDate::from_yo_opt(year, rng.gen_range(1..=days)).expect("valid ordinal");
    date.and_hms_opt(0, 0, 0).expect("midnight") + Duration::seconds(rng.gen_range(0..86_400))
}

/// Integer group counts summing to `total`, distributed by `shares`.
fn split_counts<const N: usize>(total: f64, shares: &[f64]) -> [f64; N] {
    let mut out = [0.0; N];
    let mut left = total;
    for k in 0..N - 1 {
        out[k] = (total * shares[k]).floor().min(left);
        left -= out[k];
    }
    out[N - 1] = left;
    out
}

struct CensusDraw {
    race_shares: Vec<f64>,
    age_shares: Vec<f64>,
    income_shares: Vec<f64>,
    fracs: [f64; 5],
}

fn census_row(pop: f64, d: &CensusDraw, frac_male: f64) -> CensusRow {
    let race_counts: [f64; 5] = split_counts(pop, &d.race_shares);
    let [poverty, vacant, rented, stable, _] = d.fracs;
    CensusRow {
        population: pop,
        frac_male,
        frac_black: if pop > 0.0 { race_counts[1] / pop } else { 0.0 },
        frac_hispanic: if pop > 0.0 { race_counts[2] / pop } else { 0.0 },
        frac_poverty: poverty,
        frac_vacant: vacant,
        frac_rented: rented,
        frac_stable: stable,
        race_counts,
        age_counts: split_counts(pop, &d.age_shares),
        income_counts: split_counts(pop, &d.income_shares),
    }
}

fn census_tables(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> BTreeMap<i32, CensusTable> {
    let race = Dirichlet::new(&[2.0, 1.0, 1.0, 0.5, 0.3]).expect("valid alphas");
    let age = Dirichlet::new(&[2.0, 3.0, 3.0, 1.5]).expect("valid alphas");
    let income = Dirichlet::new(&[2.0, 2.0, 1.0]).expect("valid alphas");
    let pop_dist = Normal::new(3000f64.ln(), 0.5).expect("valid sd");
    let betas = [(2.0, 6.0), (1.5, 15.0), (3.0, 2.0), (2.0, 3.0)].map(|(a, b)| Beta::new(a, b).expect("valid beta"));
    let drift = Normal::new(0.0, 0.03).expect("valid sd");
    let [y0, y1] = cfg.years();
    let mut first = CensusTable::new();
    let mut second = CensusTable::new();
    for k in 0..cfg.n_tracts {
        let pop = (pop_dist.sample(rng).exp() + 50.0).round();
        let mut fracs = [0.0; 5];
        for (f, b) in fracs.iter_mut().zip(&betas) {
            *f = b.sample(rng);
        }
        let draw = CensusDraw {
            race_shares: race.sample(rng),
            age_shares: age.sample(rng),
            income_shares: income.sample(rng),
            fracs,
        };
        let male = rng.gen_range(0.45..0.53);
        first.insert(tract_id(k), census_row(pop, &draw, male));
        let pop2 = (pop * f64::exp(drift.sample(rng))).round();
        let mut draw2 = draw;
        for f in draw2.fracs.iter_mut().take(4) {
            *f = (*f + drift.sample(rng) / 3.0).clamp(0.0, 1.0);
        }
        second.insert(tract_id(k), census_row(pop2, &draw2, male));
    }
    BTreeMap::from([(y0, first), (y1, second)])
}

/// Generates the non-crime sources. Venues and stations are one snapshot;
/// turnstile and taxi data are drawn per year.
fn mobility(cfg: &SynthConfig, quads: &[Quad], activity: &[f64], raw: &mut RawSources, rng: &mut ChaCha8Rng) {
    let n_cat = cfg.venue_intensity.len();
    let mut station_tract = Vec::new();
    for (k, q) in quads.iter().enumerate() {
        let a = activity[k];
        let scale = (0.7 * a).exp();
        let mut categories: Vec<Option<usize>> = Vec::new();
        for c in 0..n_cat {
            let n = poisson(rng, cfg.venue_intensity[c] * scale);
            categories.extend(std::iter::repeat_n(Some(c), n as usize));
        }
        categories.extend(std::iter::repeat_n(None, poisson(rng, cfg.uncategorized_intensity) as usize));
        let checkin_dist = Normal::new(cfg.mean_checkins.max(1.0).ln() + 0.5 * a, 0.8).expect("valid sd");
        for category in categories {
            let id = format!("V{:06}", raw.venues.len());
            let mut popular = [false; 8];
            popular.iter_mut().for_each(|p| *p = rng.gen_bool(0.3));
            raw.venues.push(VenueRecord {
                venue_id: id,
                location: place(q, cfg.border_share, rng),
                category,
                checkins_total: checkin_dist.sample(rng).exp().round() as u64,
                popular,
            });
        }
        let p_station = cfg.station_probability * 2.0 / (1.0 + (-a).exp());
        if rng.gen_bool(p_station.min(1.0)) {
            raw.stations.push(StationRecord {
                station_id: format!("S{:04}", raw.stations.len()),
                location: place(q, cfg.border_share.max(0.2), rng),
            });
            station_tract.push(k);
        }
    }
    let weights: Vec<f64> = activity.iter().map(|a| (0.8 * a).exp()).collect();
    let dropoff_tract = WeightedIndex::new(&weights).expect("positive weights");
    for year in cfg.years() {
        let mut days: Vec<NaiveDateTime> = (0..cfg.turnstile_days).map(|_| random_time(year, rng)).collect();
        days.sort();
        for (s, station) in raw.stations.iter().enumerate() {
            let mean = cfg.mean_station_entries * (0.5 * activity[station_tract[s]]).exp();
            for day in &days {
                let start = day.date().and_hms_opt(8, 0, 0).expect("valid hour");
                raw.turnstile.push(TurnstileInterval {
                    station_id: station.station_id.clone(),
                    interval_start: start,
                    entries: poisson(rng, mean),
                    exits: poisson(rng, 0.9 * mean),
                });
            }
        }
        for (k, q) in quads.iter().enumerate() {
            for _ in 0..poisson(rng, cfg.taxi_intensity * weights[k]) {
                let pickup_time = random_time(year, rng);
                let to = dropoff_tract.sample(rng);
                raw.taxi.push(TaxiTrip {
                    pickup_time,
                    dropoff_time: pickup_time + Duration::seconds(rng.gen_range(300..2400)),
                    pickup: bilinear(q, rng.gen(), rng.gen()),
                    dropoff: bilinear(&quads[to], rng.gen(), rng.gen()),
                    passengers: rng.gen_range(1..=4),
                });
            }
        }
    }
}

/// Combined standardized signal for `terms`, using `reference` moments.
fn signal(m: &FeatureMatrix, terms: &[SignalTerm], moments: &[(f64, f64)]) -> Result<Vec<f64>> {
    let mut s = vec![0.0; m.n_rows()];
    for (t, &(mean, sd)) in terms.iter().zip(moments) {
        let col =
            m.column(&t.feature).ok_or_else(|| Error::Argument(format!("unknown signal feature `{}`", t.feature)))?;
        for (acc, v) in s.iter_mut().zip(col) {
            *acc += t.weight * (v.ln_1p() - mean) / sd;
        }
    }
    Ok(s)
}

fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    (mean, if sd > 0.0 { sd } else { 1.0 })
}

fn term_moments(m: &FeatureMatrix, terms: &[SignalTerm]) -> Result<Vec<(f64, f64)>> {
    terms
        .iter()
        .map(|t| {
            let col = m
                .column(&t.feature)
                .ok_or_else(|| Error::Argument(format!("unknown signal feature `{}`", t.feature)))?;
            Ok(moments(&col.iter().map(|v| v.ln_1p()).collect::<Vec<_>>()))
        })
        .collect()
}

/// Builds a synthetic city. Identical configs give identical cities.
pub fn generate_city(config: &SynthConfig) -> Result<SynthCity> {
    let ontology = CategoryOntology::default();
    config.validate(&ontology)?;
    let cfg = config;
    let mut rng = tree_rng(cfg.seed, 0);
    let quads = grid(cfg, &mut rng);
    let tracts = quads
        .iter()
        .enumerate()
        .map(|(k, q)| {
            let shape = PolygonShape::new(vec![q[0], q[1], q[2], q[3], q[0]], Vec::new())?;
            TractGeometry::new(tract_id(k), vec![shape], None, SQ_FEET_PER_SQ_MILE)
        })
        .collect::<Result<Vec<_>>>()?;
    let std_normal = Normal::new(0.0, 1.0).expect("valid sd");
    let activity: Vec<f64> = (0..cfg.n_tracts).map(|_| std_normal.sample(&mut rng)).collect();

    let mut raw = RawSources { tracts, census: census_tables(cfg, &mut rng), ..Default::default() };
    mobility(cfg, &quads, &activity, &mut raw, &mut rng);

    let options = BuildOptions {
        buffer: cfg.buffer,
        years: cfg.years().to_vec(),
        ontology: ontology.clone(),
        excluded_tracts: Vec::new(),
    };
    let no_crime = build_dataset(raw.clone(), &options)?;
    let fc = FeatureConfig::default();
    let [y0, _] = cfg.years();
    let reference = build_matrix(&no_crime, y0, Subset::Full, &fc)?;
    let census_m = term_moments(&reference, &cfg.census_terms)?;
    let mobility_m = term_moments(&reference, &cfg.mobility_terms)?;
    let census_sd = moments(&signal(&reference, &cfg.census_terms, &census_m)?).1;
    let mobility_sd = moments(&signal(&reference, &cfg.mobility_terms, &mobility_m)?).1;

    let noise = Normal::new(0.0, cfg.noise_sd.max(0.0)).expect("valid sd");
    let crime_weights = WeightedIndex::new(CRIME_SHARES.map(|(_, w)| w)).expect("positive weights");
    let mut latent = BTreeMap::new();
    for year in cfg.years() {
        let m = build_matrix(&no_crime, year, Subset::Full, &fc)?;
        let sc = signal(&m, &cfg.census_terms, &census_m)?;
        let sm = signal(&m, &cfg.mobility_terms, &mobility_m)?;
        let total: Vec<f64> = sc
            .iter()
            .zip(&sm)
            .map(|(c, s)| {
                cfg.offset
                    + cfg.scale
                        * ((1.0 - cfg.ambient_share).sqrt() * c / census_sd
                            + cfg.ambient_share.sqrt() * s / mobility_sd)
            })
            .collect();
        for (k, &l) in total.iter().enumerate() {
            let eps = if cfg.noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            let count = ((l + eps).exp() - 1.0).round().max(0.0) as u64;
            for _ in 0..count {
                let crime_type = CRIME_SHARES[crime_weights.sample(&mut rng)].0;
                raw.events.push(EventRecord {
                    event_id: format!("E{year}{:07}", raw.events.len()),
                    timestamp: random_time(year, &mut rng),
                    location: bilinear(&quads[k], rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)),
                    crime_type,
                });
            }
        }
        let mut per_type = BTreeMap::new();
        for incident in IncidentType::ALL {
            let share: f64 = CRIME_SHARES.iter().filter(|(c, _)| incident.matches(*c)).map(|(_, w)| w).sum();
            per_type.insert(incident, total.iter().map(|&l| (share * l.exp_m1()).ln_1p()).collect());
        }
        latent.insert(year, per_type);
    }
    let dataset = build_dataset(raw.clone(), &options)?;
    Ok(SynthCity { config: cfg.clone(), raw, dataset, activity, latent })
}

/// Tracts within `buffer` of `p`, found by scanning every tract.
fn scan(tracts: &[TractGeometry], p: PlanarPoint, buffer: f64) -> Vec<usize> {
    (0..tracts.len()).filter(|&t| tracts[t].shapes.iter().any(|s| distance_point_polygon(p, s) <= buffer)).collect()
}

fn entropy_index(counts: &[f64], mode: DiversityMode) -> f64 {
    let n: f64 = counts.iter().sum();
    let k = counts.len() as f64;
    let mut h = 0.0;
    for &c in counts {
        let p = match mode {
            DiversityMode::Printed => (c + 1.0) / (n + 1.0),
            DiversityMode::Laplace => (c + 1.0) / (n + k),
        };
        h -= p * p.ln();
    }
    h / k.ln()
}

fn is_weekend(t: &NaiveDateTime) -> bool {
    t.weekday() == Weekday::Sat || t.weekday() == Weekday::Sun
}

/// Recomputes every feature of `year` directly from the raw records with a
/// brute-force tract scan, independently of the spatial index and the
/// features module's aggregation code. Returns the full subset.
pub fn oracle_features(city: &SynthCity, year: i32, config: &FeatureConfig) -> Result<FeatureMatrix> {
    let ds = &city.dataset;
    let raw = &city.raw;
    let tracts = &ds.tracts;
    let buffer = ds.buffer;
    let ontology = &ds.ontology;
    let k = ontology.len();
    let census = ds.census.get(&year).ok_or_else(|| Error::Argument(format!("no census for {year}")))?;
    let mode = config.diversity;

    let mut weekdays = 0.0;
    let mut weekends = 0.0;
    let mut d = NaiveDate::from_ymd_opt(year, 1, 1).expect("valid year");
    while d.year() == year {
        if matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            weekends += 1.0;
        } else {
            weekdays += 1.0;
        }
        d += Duration::days(1);
    }

    let mut city_venues = 0.0;
    let mut city_checkins = 0.0;
    let mut city_cat = vec![0.0; k];
    for v in &raw.venues {
        if let Some(c) = v.category {
            city_venues += 1.0;
            city_cat[c] += 1.0;
            city_checkins += v.checkins_total as f64;
        }
    }
    let city_pop: f64 = census.values().map(|r| r.population).sum();

    let n = tracts.len();
    let mut venues = vec![vec![0.0; k]; n];
    let mut checkins = vec![vec![0.0; k]; n];
    let mut popular = vec![[0.0; 8]; n];
    for v in &raw.venues {
        for t in scan(tracts, v.location, buffer) {
            if let Some(c) = v.category {
                venues[t][c] += 1.0;
                checkins[t][c] += v.checkins_total as f64;
            }
            for (acc, &flag) in popular[t].iter_mut().zip(&v.popular) {
                if flag {
                    *acc += 1.0;
                }
            }
        }
    }
    let mut stations = vec![0.0; n];
    let mut subway = vec![[0.0; 4]; n];
    for s in &raw.stations {
        let hosts = scan(tracts, s.location, buffer);
        for &t in &hosts {
            stations[t] += 1.0;
        }
        for i in raw.turnstile.iter().filter(|i| i.station_id == s.station_id && i.interval_start.year() == year) {
            let w = if is_weekend(&i.interval_start) { 2 } else { 0 };
            for &t in &hosts {
                subway[t][w] += i.entries as f64;
                subway[t][w + 1] += i.exits as f64;
            }
        }
    }
    let mut taxi = vec![[0.0; 4]; n];
    for trip in raw.taxi.iter().filter(|t| t.pickup_time.year() == year) {
        let p = f64::from(trip.passengers);
        let w = if is_weekend(&trip.pickup_time) { 2 } else { 0 };
        for t in scan(tracts, trip.pickup, buffer) {
            taxi[t][w] += p;
        }
        let w = if is_weekend(&trip.dropoff_time) { 2 } else { 0 };
        for t in scan(tracts, trip.dropoff, buffer) {
            taxi[t][w + 1] += p;
        }
    }

    let names = registry(ontology, config);
    let mut rows = Vec::with_capacity(n);
    for t in 0..n {
        let c = census
            .get(&tracts[t].tract_id)
            .ok_or_else(|| Error::Argument(format!("no census row for {}", tracts[t].tract_id)))?;
        let mut values: BTreeMap<String, f64> = BTreeMap::new();
        let mut put = |name: String, v: f64| {
            values.insert(name, v);
        };
        put("area".into(), tracts[t].area_sq_mi);
        put("population".into(), c.population);
        put("frac_male".into(), c.frac_male);
        put("frac_black".into(), c.frac_black);
        put("frac_hispanic".into(), c.frac_hispanic);
        put("frac_poverty".into(), c.frac_poverty);
        put("frac_vacant".into(), c.frac_vacant);
        put("frac_rented".into(), c.frac_rented);
        put("frac_stable".into(), c.frac_stable);
        put("race_diversity".into(), entropy_index(&c.race_counts, mode));
        put("age_diversity".into(), entropy_index(&c.age_counts, mode));
        put("income_diversity".into(), entropy_index(&c.income_counts, mode));

        let v_total: f64 = venues[t].iter().sum();
        let c_total: f64 = checkins[t].iter().sum();
        for cat in 0..k {
            let slug = ontology.slug(cat);
            let v = venues[t][cat];
            put(format!("venues_{slug}"), v);
            put(format!("venue_frac_{slug}"), (v + 1.0) / (v_total + 1.0));
            let adv = if city_cat[cat] > 0.0 { (v + 1.0) / (v_total + 1.0) * city_venues / city_cat[cat] } else { 0.0 };
            put(format!("offering_adv_{slug}"), adv);
            put(format!("checkins_{slug}"), checkins[t][cat]);
            put(format!("checkin_frac_{slug}"), (checkins[t][cat] + 1.0) / (c_total + 1.0));
        }
        put("venue_diversity".into(), entropy_index(&venues[t], mode));
        put("checkin_diversity".into(), entropy_index(&checkins[t], mode));
        put("subway_stations".into(), stations[t]);
        let positive = city_checkins > 0.0 && city_venues > 0.0 && city_pop > 0.0;
        let share = (c_total + 1.0) / city_checkins;
        put("lq_venues".into(), if positive { share * city_venues / (v_total + 1.0) } else { 0.0 });
        put("lq_population".into(), if positive { share * city_pop / (c.population + 1.0) } else { 0.0 });
        for (b, name) in crate::ingest::POPULAR_BUCKETS.iter().enumerate() {
            put(format!("popular_{name}"), popular[t][b]);
        }
        for (prefix, flows, labels) in
            [("subway", subway[t], ["entries", "exits"]), ("taxi", taxi[t], ["pickups", "dropoffs"])]
        {
            put(format!("{prefix}_{}_wd", labels[0]), flows[0] / weekdays);
            put(format!("{prefix}_{}_wd", labels[1]), flows[1] / weekdays);
            put(format!("{prefix}_{}_we", labels[0]), flows[2] / weekends);
            put(format!("{prefix}_{}_we", labels[1]), flows[3] / weekends);
            put(format!("{prefix}_diversity"), entropy_index(&flows, mode));
        }
        let row = names
            .iter()
            .map(|f| values.get(&f.name).copied().ok_or_else(|| Error::Argument(format!("oracle lacks {}", f.name))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(FeatureMatrix {
        year,
        subset: Subset::Full,
        registry: names,
        tract_ids: tracts.iter().map(|t| t.tract_id.clone()).collect(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig { seed, n_tracts: 36, ..SynthConfig::default() }
    }

    #[test]
    fn same_config_same_city() {
        let a = generate_city(&small(3)).unwrap();
        let b = generate_city(&small(3)).unwrap();
        assert_eq!(a.dataset.content_hash().unwrap(), b.dataset.content_hash().unwrap());
        let c = generate_city(&small(4)).unwrap();
        assert_ne!(a.dataset.content_hash().unwrap(), c.dataset.content_hash().unwrap());
    }

    #[test]
    fn events_fall_in_exactly_one_tract() {
        let city = generate_city(&small(1)).unwrap();
        for events in city.dataset.events.values() {
            assert!(!events.is_empty());
            assert!(events.iter().all(|e| e.tracts.len() == 1));
        }
    }

    #[test]
    fn border_records_are_multi_assigned() {
        let city = generate_city(&small(2)).unwrap();
        assert!(city.dataset.venues.iter().any(|v| v.tracts.len() > 1));
    }

    #[test]
    fn oracle_matches_on_small_city() {
        let city = generate_city(&small(5)).unwrap();
        for year in city.config.years() {
            let a = build_matrix(&city.dataset, year, Subset::Full, &FeatureConfig::default()).unwrap();
            let b = oracle_features(&city, year, &FeatureConfig::default()).unwrap();
            assert_eq!(a.names(), b.names());
            for (ra, rb) in a.rows.iter().zip(&b.rows) {
                for (x, y) in ra.iter().zip(rb) {
                    assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()), "{x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn turnstile_covers_every_station_and_year() {
        let city = generate_city(&small(6)).unwrap();
        assert!(!city.raw.stations.is_empty());
        assert!(city.raw.turnstile.len() == city.raw.stations.len() * 2 * city.config.turnstile_days);
    }

    #[test]
    fn census_groups_sum_to_population() {
        let city = generate_city(&small(7)).unwrap();
        for table in city.raw.census.values() {
            for row in table.values() {
                assert_eq!(row.race_counts.iter().sum::<f64>(), row.population);
                assert_eq!(row.age_counts.iter().sum::<f64>(), row.population);
            }
        }
    }

    #[test]
    fn ceiling_is_high_with_low_noise() {
        let city = generate_city(&SynthConfig { noise_sd: 0.0, ..small(8) }).unwrap();
        let c = city.latent_ceiling(2014, IncidentType::Total).unwrap();
        assert!(c > 0.9, "{c}");
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(generate_city(&SynthConfig { n_tracts: 10, ..SynthConfig::default() }).is_err());
        assert!(generate_city(&SynthConfig { ambient_share: 1.5, ..small(0) }).is_err());
    }
}
