//! Per-tract, per-year feature computation.
//!
//! Three tiers: census features (controls, fractions, diversity indices),
//! spatial features (venue counts/fractions/diversity, offering advantage,
//! subway stations) and spatio-temporal features (check-ins, popular hours,
//! local quotients, subway and taxi flows). With the default ten-category
//! ontology the full registry has 85 columns.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{Datelike, NaiveDate, NaiveDateTime, Weekday};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{sha256_hex, CensusRow, RegionDataset, POPULAR_BUCKETS};

pub const DEFAULT_CATEGORIES: [&str; 10] = [
    "Arts and Entertainment",
    "College and University",
    "Event",
    "Food",
    "Nightlife Spot",
    "Outdoors and Recreation",
    "Professional and Other Places",
    "Residence",
    "Shop and Service",
    "Travel and Transport",
];

/// Ordered venue category names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct CategoryOntology {
    names: Vec<String>,
}

impl CategoryOntology {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Argument("category ontology is empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::Argument(format!("duplicate category {n:?}")));
            }
        }
        let mut slugs: Vec<String> = names.iter().map(|n| slug(n)).collect();
        slugs.sort();
        if slugs.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Argument("category names collide after normalization".into()));
        }
        Ok(Self { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .or_else(|| self.names.iter().position(|n| n.eq_ignore_ascii_case(name.trim())))
    }

    pub fn slug(&self, i: usize) -> String {
        slug(&self.names[i])
    }
}

impl Default for CategoryOntology {
    fn default() -> Self {
        Self { names: DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect() }
    }
}

impl TryFrom<Vec<String>> for CategoryOntology {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        Self::new(names)
    }
}

impl From<CategoryOntology> for Vec<String> {
    fn from(o: CategoryOntology) -> Self {
        o.names
    }
}

fn slug(name: &str) -> String {
    let mut out = String::new();
    for c in name.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    out.trim_matches('_').to_string()
}

/// How category shares are smoothed inside the diversity index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityMode {
    /// `(1 + n_c) / (1 + n)`; shares need not sum to one and the index can exceed 1.
    #[default]
    Printed,
    /// `(1 + n_c) / (n + |C|)`, a proper distribution.
    Laplace,
}

/// Normalized Shannon entropy of smoothed category shares, divided by `ln |C|`.
///
/// `|C|` is `counts.len()`. All-zero counts give exactly 0 in the printed mode.
pub fn diversity_index(counts: &[f64], mode: DiversityMode) -> Result<f64> {
    let k = counts.len();
    if k < 2 {
        return Err(Error::Argument(format!("diversity index needs at least 2 categories, got {k}")));
    }
    if counts.iter().any(|c| !c.is_finite() || *c < 0.0) {
        return Err(Error::Argument("diversity index counts must be finite and nonnegative".into()));
    }
    let total: f64 = counts.iter().sum();
    let denom = match mode {
        DiversityMode::Printed => 1.0 + total,
        DiversityMode::Laplace => total + k as f64,
    };
    let entropy: f64 = counts
        .iter()
        .map(|c| {
            let p = (1.0 + c) / denom;
            -p * p.ln()
        })
        .sum();
    Ok(entropy / (k as f64).ln())
}

/// Over-representation of a category in a tract relative to the city.
/// Zero when the category is absent citywide.
pub fn offering_advantage(v_c: f64, v_total: f64, city_total_venues: f64, city_category_total: f64) -> f64 {
    offering_advantage_smoothed(v_c, v_total, city_total_venues, city_category_total, 1.0)
}

pub(crate) fn offering_advantage_smoothed(
    v_c: f64,
    v_total: f64,
    city_total_venues: f64,
    city_category_total: f64,
    smoothing: f64,
) -> f64 {
    if city_category_total == 0.0 {
        return 0.0;
    }
    (smoothing + v_c) / (smoothing + v_total) * (city_total_venues / city_category_total)
}

/// Check-in concentration relative to venues and to resident population:
/// `(q_venues, q_population)`.
pub fn local_quotients(
    checkins: f64,
    venues: f64,
    population: f64,
    city_checkins: f64,
    city_venues: f64,
    city_population: f64,
) -> Result<(f64, f64)> {
    if !(city_checkins > 0.0 && city_venues > 0.0 && city_population > 0.0) {
        return Err(Error::Argument("local quotients need positive city totals".into()));
    }
    let activity = (1.0 + checkins) / city_checkins;
    Ok((activity * city_venues / (1.0 + venues), activity * city_population / (1.0 + population)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Census,
    Spatial,
    Spatiotemporal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Census,
    Foursquare,
    Subway,
    Taxi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureGroup {
    CensusControl,
    CensusFraction,
    CensusDiversity,
    VenueCount,
    VenueFraction,
    VenueDiversity,
    OfferingAdvantage,
    StationCount,
    CheckinCount,
    CheckinFraction,
    CheckinDiversity,
    LocalQuotient,
    PopularHours,
    SubwayFlow,
    TaxiFlow,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub tier: Tier,
    pub source: Source,
    pub group: FeatureGroup,
}

/// Model specifications, each a subset of the registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Census,
    CensusPoi,
    HumanDynamics,
    Full,
    CensusFs,
    CensusSubway,
    CensusTaxi,
}

impl Subset {
    pub const ALL: [Subset; 7] = [
        Subset::Census,
        Subset::CensusPoi,
        Subset::HumanDynamics,
        Subset::Full,
        Subset::CensusFs,
        Subset::CensusSubway,
        Subset::CensusTaxi,
    ];

    /// The four headline specifications.
    pub const MAIN: [Subset; 4] = [Subset::Census, Subset::CensusPoi, Subset::HumanDynamics, Subset::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Census => "census",
            Subset::CensusPoi => "census_poi",
            Subset::HumanDynamics => "human_dynamics",
            Subset::Full => "full",
            Subset::CensusFs => "census_fs",
            Subset::CensusSubway => "census_subway",
            Subset::CensusTaxi => "census_taxi",
        }
    }

    pub fn includes(self, spec: &FeatureSpec) -> bool {
        let census = spec.tier == Tier::Census;
        match self {
            Subset::Census => census,
            Subset::CensusPoi => census || spec.group == FeatureGroup::VenueCount,
            Subset::HumanDynamics => !census,
            Subset::Full => true,
            Subset::CensusFs => census || spec.source == Source::Foursquare,
            Subset::CensusSubway => census || spec.source == Source::Subway,
            Subset::CensusTaxi => census || spec.source == Source::Taxi,
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown feature subset `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub diversity: DiversityMode,
    /// When false, drops the black/hispanic fractions and the racial diversity index.
    pub include_race: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { diversity: DiversityMode::Printed, include_race: true }
    }
}

const RACE_FEATURES: [&str; 3] = ["frac_black", "frac_hispanic", "race_diversity"];

pub const CENSUS_FRACTIONS: [&str; 7] =
    ["frac_male", "frac_black", "frac_hispanic", "frac_poverty", "frac_vacant", "frac_rented", "frac_stable"];

pub const SUBWAY_FLOWS: [&str; 4] = ["subway_entries_wd", "subway_exits_wd", "subway_entries_we", "subway_exits_we"];
pub const TAXI_FLOWS: [&str; 4] = ["taxi_pickups_wd", "taxi_dropoffs_wd", "taxi_pickups_we", "taxi_dropoffs_we"];

/// The complete ordered registry for an ontology, before race filtering.
fn full_registry(ontology: &CategoryOntology) -> Vec<FeatureSpec> {
    use FeatureGroup as G;
    let mut out = Vec::new();
    let mut push = |name: String, tier, source, group| out.push(FeatureSpec { name, tier, source, group });
    let cats: Vec<String> = (0..ontology.len()).map(|i| ontology.slug(i)).collect();

    push("area".into(), Tier::Census, Source::Census, G::CensusControl);
    push("population".into(), Tier::Census, Source::Census, G::CensusControl);
    for f in CENSUS_FRACTIONS {
        push(f.into(), Tier::Census, Source::Census, G::CensusFraction);
    }
    for f in ["race_diversity", "age_diversity", "income_diversity"] {
        push(f.into(), Tier::Census, Source::Census, G::CensusDiversity);
    }

    for c in &cats {
        push(format!("venues_{c}"), Tier::Spatial, Source::Foursquare, G::VenueCount);
    }
    for c in &cats {
        push(format!("venue_frac_{c}"), Tier::Spatial, Source::Foursquare, G::VenueFraction);
    }
    push("venue_diversity".into(), Tier::Spatial, Source::Foursquare, G::VenueDiversity);
    for c in &cats {
        push(format!("offering_adv_{c}"), Tier::Spatial, Source::Foursquare, G::OfferingAdvantage);
    }
    push("subway_stations".into(), Tier::Spatial, Source::Subway, G::StationCount);

    for c in &cats {
        push(format!("checkins_{c}"), Tier::Spatiotemporal, Source::Foursquare, G::CheckinCount);
    }
    for c in &cats {
        push(format!("checkin_frac_{c}"), Tier::Spatiotemporal, Source::Foursquare, G::CheckinFraction);
    }
    push("checkin_diversity".into(), Tier::Spatiotemporal, Source::Foursquare, G::CheckinDiversity);
    push("lq_venues".into(), Tier::Spatiotemporal, Source::Foursquare, G::LocalQuotient);
    push("lq_population".into(), Tier::Spatiotemporal, Source::Foursquare, G::LocalQuotient);
    for b in POPULAR_BUCKETS {
        push(format!("popular_{b}"), Tier::Spatiotemporal, Source::Foursquare, G::PopularHours);
    }
    for f in SUBWAY_FLOWS {
        push(f.into(), Tier::Spatiotemporal, Source::Subway, G::SubwayFlow);
    }
    push("subway_diversity".into(), Tier::Spatiotemporal, Source::Subway, G::SubwayFlow);
    for f in TAXI_FLOWS {
        push(f.into(), Tier::Spatiotemporal, Source::Taxi, G::TaxiFlow);
    }
    push("taxi_diversity".into(), Tier::Spatiotemporal, Source::Taxi, G::TaxiFlow);
    out
}

/// Ordered feature registry honoring `config.include_race`.
pub fn registry(ontology: &CategoryOntology, config: &FeatureConfig) -> Vec<FeatureSpec> {
    full_registry(ontology)
        .into_iter()
        .filter(|f| config.include_race || !RACE_FEATURES.contains(&f.name.as_str()))
        .collect()
}

/// Numbers of Mon-Fri and Sat-Sun days in a calendar year.
pub fn weekday_weekend_days(year: i32) -> (u32, u32) {
    let mut day = NaiveDate::from_ymd_opt(year, 1, 1).expect("valid year");
    let (mut wd, mut we) = (0, 0);
    while day.year() == year {
        if is_weekend(day.weekday()) {
            we += 1;
        } else {
            wd += 1;
        }
        day = day.succ_opt().expect("date in range");
    }
    (wd, we)
}

fn is_weekend(d: Weekday) -> bool {
    matches!(d, Weekday::Sat | Weekday::Sun)
}

fn weekend_slot(t: &NaiveDateTime) -> usize {
    usize::from(is_weekend(t.weekday()))
}

/// Region-wide denominators, computed once from every record in the
/// dataset regardless of tract assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityTotals {
    /// Venues with an assigned category.
    pub venues: f64,
    pub venues_per_category: Vec<f64>,
    /// Check-ins at categorized venues.
    pub checkins: f64,
    pub population: f64,
}

impl CityTotals {
    pub fn of(dataset: &RegionDataset, year: i32) -> Result<Self> {
        let k = dataset.ontology.len();
        let mut per_category = vec![0u64; k];
        let mut checkins = 0u64;
        for v in &dataset.venues {
            if let Some(c) = v.record.category {
                per_category[c] += 1;
                checkins += v.record.checkins_total;
            }
        }
        let census = census_for(dataset, year)?;
        Ok(Self {
            venues: per_category.iter().sum::<u64>() as f64,
            venues_per_category: per_category.into_iter().map(|c| c as f64).collect(),
            checkins: checkins as f64,
            population: census.values().map(|r| r.population).sum(),
        })
    }
}

fn census_for(dataset: &RegionDataset, year: i32) -> Result<&BTreeMap<String, CensusRow>> {
    dataset.census.get(&year).ok_or_else(|| Error::Argument(format!("dataset has no census table for year {year}")))
}

/// Integer tallies for one tract; every feature is a function of these,
/// the census row, and the city totals.
#[derive(Debug, Clone, Default, PartialEq)]
struct TractTallies {
    venues: Vec<u64>,
    checkins: Vec<u64>,
    popular: [u64; 8],
    stations: u64,
    /// entries weekday, exits weekday, entries weekend, exits weekend
    subway: [u64; 4],
    /// pickups weekday, dropoffs weekday, pickups weekend, dropoffs weekend
    taxi: [u64; 4],
}

fn tally(dataset: &RegionDataset, year: i32) -> Vec<TractTallies> {
    let k = dataset.ontology.len();
    let mut tallies =
        vec![TractTallies { venues: vec![0; k], checkins: vec![0; k], ..Default::default() }; dataset.tracts.len()];
    for v in &dataset.venues {
        for &t in &v.tracts {
            let tt = &mut tallies[t as usize];
            if let Some(c) = v.record.category {
                tt.venues[c] += 1;
                tt.checkins[c] += v.record.checkins_total;
            }
            for (slot, &flag) in tt.popular.iter_mut().zip(&v.record.popular) {
                *slot += u64::from(flag);
            }
        }
    }
    let mut station_tracts: BTreeMap<&str, &[u32]> = BTreeMap::new();
    for s in &dataset.stations {
        station_tracts.insert(&s.record.station_id, &s.tracts);
        for &t in &s.tracts {
            tallies[t as usize].stations += 1;
        }
    }
    for interval in dataset.turnstile.get(&year).into_iter().flatten() {
        let Some(tracts) = station_tracts.get(interval.station_id.as_str()) else {
            continue;
        };
        let w = weekend_slot(&interval.interval_start);
        for &t in *tracts {
            let s = &mut tallies[t as usize].subway;
            s[2 * w] += interval.entries;
            s[2 * w + 1] += interval.exits;
        }
    }
    for trip in dataset.taxi.get(&year).into_iter().flatten() {
        let p = u64::from(trip.trip.passengers);
        let wp = weekend_slot(&trip.trip.pickup_time);
        for &t in &trip.pickup_tracts {
            tallies[t as usize].taxi[2 * wp] += p;
        }
        let wd = weekend_slot(&trip.trip.dropoff_time);
        for &t in &trip.dropoff_tracts {
            tallies[t as usize].taxi[2 * wd + 1] += p;
        }
    }
    tallies
}

fn to_f64(xs: &[u64]) -> Vec<f64> {
    xs.iter().map(|&x| x as f64).collect()
}

/// Smoothed share `(1 + part) / (1 + whole)`.
fn smoothed_fraction(part: f64, whole: f64) -> f64 {
    (1.0 + part) / (1.0 + whole)
}

struct TractInputs<'a> {
    area: f64,
    census: &'a CensusRow,
    tallies: &'a TractTallies,
}

/// Every registry value for one tract, in full-registry order.
fn tract_values(
    inputs: &TractInputs<'_>,
    city: &CityTotals,
    days: (u32, u32),
    config: &FeatureConfig,
) -> Result<Vec<f64>> {
    let mode = config.diversity;
    let c = inputs.census;
    let t = inputs.tallies;
    let mut out = Vec::with_capacity(85);

    out.push(inputs.area);
    out.push(c.population);
    out.extend(c.fractions());
    out.push(diversity_index(&c.race_counts, mode)?);
    out.push(diversity_index(&c.age_counts, mode)?);
    out.push(diversity_index(&c.income_counts, mode)?);

    let venues = to_f64(&t.venues);
    let v_total: f64 = venues.iter().sum();
    out.extend(&venues);
    out.extend(venues.iter().map(|&v| smoothed_fraction(v, v_total)));
    out.push(diversity_index(&venues, mode)?);
    out.extend(
        venues
            .iter()
            .zip(&city.venues_per_category)
            .map(|(&v, &cat_total)| offering_advantage(v, v_total, city.venues, cat_total)),
    );
    out.push(t.stations as f64);

    let checkins = to_f64(&t.checkins);
    let c_total: f64 = checkins.iter().sum();
    out.extend(&checkins);
    out.extend(checkins.iter().map(|&x| smoothed_fraction(x, c_total)));
    out.push(diversity_index(&checkins, mode)?);
    let (q_venues, q_population) =
        local_quotients(c_total, v_total, c.population, city.checkins, city.venues, city.population)
            .unwrap_or((0.0, 0.0));
    out.push(q_venues);
    out.push(q_population);
    out.extend(t.popular.iter().map(|&p| p as f64));

    let (wd, we) = (f64::from(days.0), f64::from(days.1));
    for flows in [&t.subway, &t.taxi] {
        out.push(flows[0] as f64 / wd);
        out.push(flows[1] as f64 / wd);
        out.push(flows[2] as f64 / we);
        out.push(flows[3] as f64 / we);
        out.push(diversity_index(&to_f64(flows), mode)?);
    }
    Ok(out)
}

/// A named feature matrix for one year and subset, rows in tract order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub year: i32,
    pub subset: Subset,
    pub registry: Vec<FeatureSpec>,
    pub tract_ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.registry.len()
    }

    pub fn names(&self) -> Vec<&str> {
        self.registry.iter().map(|f| f.name.as_str()).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.registry.iter().position(|f| f.name == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.column_index(name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    /// Columns of `self` that belong to `subset`, order preserved.
    pub fn select(&self, subset: Subset) -> FeatureMatrix {
        let keep: Vec<usize> = (0..self.n_cols()).filter(|&j| subset.includes(&self.registry[j])).collect();
        FeatureMatrix {
            year: self.year,
            subset,
            registry: keep.iter().map(|&j| self.registry[j].clone()).collect(),
            tract_ids: self.tract_ids.clone(),
            rows: self.rows.iter().map(|r| keep.iter().map(|&j| r[j]).collect()).collect(),
        }
    }

    /// Row-major values.
    pub fn flat(&self) -> Vec<f64> {
        self.rows.iter().flatten().copied().collect()
    }
}

/// Computes every feature for `year` and returns the columns in `subset`.
pub fn build_matrix(
    dataset: &RegionDataset,
    year: i32,
    subset: Subset,
    config: &FeatureConfig,
) -> Result<FeatureMatrix> {
    let census = census_for(dataset, year)?;
    let city = CityTotals::of(dataset, year)?;
    let tallies = tally(dataset, year);
    let days = weekday_weekend_days(year);

    let rows: Vec<Vec<f64>> = dataset
        .tracts
        .par_iter()
        .zip(tallies.par_iter())
        .map(|(tract, tallies)| {
            let census = census
                .get(&tract.tract_id)
                .ok_or_else(|| Error::Argument(format!("no census row for tract {}", tract.tract_id)))?;
            let inputs = TractInputs { area: tract.area_sq_mi, census, tallies };
            tract_values(&inputs, &city, days, config)
        })
        .collect::<Result<_>>()?;

    let all = full_registry(&dataset.ontology);
    let keep: Vec<usize> = (0..all.len())
        .filter(|&j| config.include_race || !RACE_FEATURES.contains(&all[j].name.as_str()))
        .filter(|&j| subset.includes(&all[j]))
        .collect();
    Ok(FeatureMatrix {
        year,
        subset,
        registry: keep.iter().map(|&j| all[j].clone()).collect(),
        tract_ids: dataset.tracts.iter().map(|t| t.tract_id.clone()).collect(),
        rows: rows.into_iter().map(|r| keep.iter().map(|&j| r[j]).collect()).collect(),
    })
}

/// Sidecar manifest written next to an exported matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixManifest {
    pub format_version: u32,
    pub year: i32,
    pub subset: Subset,
    pub n_rows: usize,
    pub registry: Vec<FeatureSpec>,
    pub feature_config: FeatureConfig,
    pub data_sha256: String,
    pub provenance: BTreeMap<String, String>,
}

pub fn manifest_path_for(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Writes `tract_id` plus the registry columns as CSV, and a sidecar
/// `<path>.manifest.json`.
pub fn write_matrix_csv(
    path: &Path,
    matrix: &FeatureMatrix,
    config: &FeatureConfig,
    provenance: BTreeMap<String, String>,
) -> Result<MatrixManifest> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["tract_id".to_string()];
    header.extend(matrix.registry.iter().map(|f| f.name.clone()));
    w.write_record(&header)?;
    for (id, row) in matrix.tract_ids.iter().zip(&matrix.rows) {
        let mut rec = vec![id.clone()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let manifest = MatrixManifest {
        format_version: 1,
        year: matrix.year,
        subset: matrix.subset,
        n_rows: matrix.n_rows(),
        registry: matrix.registry.clone(),
        feature_config: *config,
        data_sha256: sha256_hex(&bytes),
        provenance,
    };
    let mpath = manifest_path_for(path);
    fs::write(&mpath, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{PlanarPoint, PolygonShape, TractGeometry};
    use crate::ingest::{
        build_dataset, parse_timestamp, BuildOptions, CensusTable, RawSources, StationRecord, TaxiTrip,
        TurnstileInterval, VenueRecord,
    };
    use proptest::prelude::*;

    const PRINTED: DiversityMode = DiversityMode::Printed;

    #[test]
    fn diversity_examples() {
        assert_eq!(diversity_index(&[0.0; 10], PRINTED).unwrap(), 0.0);
        let mut one = [0.0; 10];
        one[0] = 5.0;
        // nine shares of 1/6 and one of 1: (9/6) ln 6 / ln 10
        let expected = 1.5 * 6f64.ln() / 10f64.ln();
        let got = diversity_index(&one, PRINTED).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 1.16723).abs() < 1e-4);
        let uniform = diversity_index(&[1000.0; 10], PRINTED).unwrap();
        assert!((uniform - 1.0005).abs() < 1e-3, "{uniform}");
    }

    #[test]
    fn diversity_census_example() {
        // one p = 1, four p = 1/101
        let got = diversity_index(&[100.0, 0.0, 0.0, 0.0, 0.0], PRINTED).unwrap();
        let expected = (4.0 / 101.0) * 101f64.ln() / 5f64.ln();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.1136).abs() < 1e-4);
    }

    #[test]
    fn diversity_rejects_bad_input() {
        assert!(diversity_index(&[3.0], PRINTED).is_err());
        assert!(diversity_index(&[1.0, -1.0], PRINTED).is_err());
    }

    #[test]
    fn laplace_mode_is_bounded() {
        let d = diversity_index(&[5.0, 0.0, 0.0, 0.0], DiversityMode::Laplace).unwrap();
        assert!(d > 0.0 && d <= 1.0);
        assert!((diversity_index(&[0.0; 4], DiversityMode::Laplace).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diversity_tends_to_one_for_uniform_counts() {
        let values: Vec<f64> =
            [1.0, 10.0, 100.0, 1000.0].iter().map(|&k| diversity_index(&[k; 10], PRINTED).unwrap()).collect();
        let gaps: Vec<f64> = values.iter().map(|v| (v - 1.0).abs()).collect();
        assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{values:?}");
    }

    #[test]
    fn offering_advantage_examples() {
        assert_eq!(offering_advantage(1.0, 9.0, 100.0, 20.0), 1.0);
        assert_eq!(offering_advantage(0.0, 0.0, 100.0, 25.0), 4.0);
        assert_eq!(offering_advantage(3.0, 5.0, 100.0, 0.0), 0.0);
    }

    #[test]
    fn local_quotient_examples() {
        let (qv, _) = local_quotients(99.0, 9.0, 0.0, 1000.0, 100.0, 1.0).unwrap();
        assert!((qv - 1.0).abs() < 1e-12);
        let (qv, _) = local_quotients(0.0, 0.0, 0.0, 1000.0, 100.0, 1.0).unwrap();
        assert!((qv - 0.1).abs() < 1e-12);
        assert!(local_quotients(1.0, 1.0, 1.0, 0.0, 1.0, 1.0).is_err());
        // city average on both ratios (with the +1 terms folded in) gives 1
        let (qv, qp) = local_quotients(9.0, 4.0, 19.0, 100.0, 50.0, 200.0).unwrap();
        assert!((qv - 1.0).abs() < 1e-12 && (qp - 1.0).abs() < 1e-12);
    }

    #[test]
    fn offering_advantage_scale_invariance_without_smoothing() {
        let before = offering_advantage_smoothed(3.0, 10.0, 200.0, 40.0, 0.0);
        // doubling category c in this tract (and citywide) changes both v_c, v_total and totals
        let after = offering_advantage_smoothed(6.0, 13.0, 240.0, 80.0, 0.0);
        let expected = (6.0 / 13.0) * (240.0 / 80.0);
        assert_eq!(after, expected);
        assert!(before > 0.0);
        // scaling every count by 2 leaves the unsmoothed ratio unchanged exactly
        assert_eq!(
            offering_advantage_smoothed(3.0, 10.0, 200.0, 40.0, 0.0),
            offering_advantage_smoothed(6.0, 20.0, 400.0, 80.0, 0.0)
        );
    }

    proptest! {
        #[test]
        fn diversity_nonnegative_and_permutation_invariant(mut counts in prop::collection::vec(0u32..500, 2..12)) {
            let as_f64: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
            let d = diversity_index(&as_f64, PRINTED).unwrap();
            prop_assert!(d >= 0.0);
            counts.reverse();
            let rev: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
            let d2 = diversity_index(&rev, PRINTED).unwrap();
            prop_assert!((d - d2).abs() < 1e-12);
        }
    }

    #[test]
    fn registry_sizes() {
        let ont = CategoryOntology::default();
        let reg = registry(&ont, &FeatureConfig::default());
        assert_eq!(reg.len(), 85);
        let count = |tier| reg.iter().filter(|f| f.tier == tier).count();
        assert_eq!((count(Tier::Census), count(Tier::Spatial), count(Tier::Spatiotemporal)), (12, 32, 41));
        let size = |s: Subset| reg.iter().filter(|f| s.includes(f)).count();
        assert_eq!(size(Subset::Census), 12);
        assert_eq!(size(Subset::CensusPoi), 22);
        assert_eq!(size(Subset::HumanDynamics), 73);
        assert_eq!(size(Subset::CensusFs), 74);
        assert_eq!(size(Subset::CensusSubway), 18);
        assert_eq!(size(Subset::CensusTaxi), 17);
        let no_race = registry(&ont, &FeatureConfig { include_race: false, ..Default::default() });
        assert_eq!(no_race.len(), 82);
        let mut names: Vec<&str> = reg.iter().map(|f| f.name.as_str()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 85);
    }

    #[test]
    fn unknown_subset_is_argument_error() {
        assert!("census_plus".parse::<Subset>().unwrap_err().is_argument());
        assert_eq!("census_poi".parse::<Subset>().unwrap(), Subset::CensusPoi);
    }

    #[test]
    fn calendar_days() {
        assert_eq!(weekday_weekend_days(2015), (261, 104));
        assert_eq!(weekday_weekend_days(2016), (261, 105));
    }

    fn census_row(population: f64) -> CensusRow {
        CensusRow {
            population,
            frac_male: 0.48,
            frac_black: 0.2,
            frac_hispanic: 0.3,
            frac_poverty: 0.15,
            frac_vacant: 0.05,
            frac_rented: 0.7,
            frac_stable: 0.6,
            race_counts: [10.0, 20.0, 30.0, 5.0, 5.0],
            age_counts: [10.0, 20.0, 30.0, 10.0],
            income_counts: [5.0, 5.0, 5.0],
        }
    }

    fn venue(id: &str, x: f64, y: f64, cat: Option<&str>, checkins: u64, popular: [bool; 8]) -> VenueRecord {
        VenueRecord {
            venue_id: id.into(),
            location: PlanarPoint::new(x, y),
            category: cat.map(|c| CategoryOntology::default().index_of(c).unwrap()),
            checkins_total: checkins,
            popular,
        }
    }

    /// Tract A = [0,100]², B = [100,200]×[0,100], C far away.
    fn fixture() -> RegionDataset {
        let tract = |id: &str, x0: f64, y0: f64| {
            TractGeometry::new(id, vec![PolygonShape::rectangle(x0, y0, x0 + 100.0, y0 + 100.0).unwrap()], None, 1.0)
                .unwrap()
        };
        let census: CensusTable = [
            ("A".to_string(), census_row(100.0)),
            ("B".to_string(), census_row(300.0)),
            ("C".to_string(), census_row(0.0)),
        ]
        .into();
        let mut wd_afternoon = [false; 8];
        wd_afternoon[1] = true;
        let venues = vec![
            venue("f1", 10.0, 10.0, Some("Food"), 5, wd_afternoon),
            venue("f2", 20.0, 10.0, Some("Food"), 0, wd_afternoon),
            venue("f3", 30.0, 10.0, Some("Food"), 10, [true; 8]),
            venue("s1", 40.0, 10.0, Some("Shop and Service"), 1, [false; 8]),
            venue("u1", 50.0, 10.0, None, 100, [false; 8]),
            // on the A|B border
            venue("b1", 100.0, 50.0, Some("Shop and Service"), 4, [false; 8]),
        ];
        let ts = |s: &str| parse_timestamp(s).unwrap();
        let stations = vec![
            StationRecord { station_id: "st1".into(), location: PlanarPoint::new(170.0, 50.0) },
            StationRecord { station_id: "st2".into(), location: PlanarPoint::new(180.0, 50.0) },
        ];
        // 2015-01-05 is a Monday; 2015-01-03 is a Saturday
        let turnstile = vec![
            TurnstileInterval {
                station_id: "st1".into(),
                interval_start: ts("2015-01-05T08:00:00"),
                entries: 261,
                exits: 522,
            },
            TurnstileInterval {
                station_id: "st2".into(),
                interval_start: ts("2015-01-03T08:00:00"),
                entries: 104,
                exits: 0,
            },
        ];
        let taxi = vec![TaxiTrip {
            pickup_time: ts("2015-01-03T10:00:00"),
            dropoff_time: ts("2015-01-03T10:20:00"),
            pickup: PlanarPoint::new(20.0, 50.0),
            dropoff: PlanarPoint::new(30.0, 60.0),
            passengers: 3,
        }];
        let raw = RawSources {
            tracts: vec![tract("A", 0.0, 0.0), tract("B", 100.0, 0.0), tract("C", 1000.0, 1000.0)],
            census: [(2015, census)].into(),
            venues,
            stations,
            turnstile,
            taxi,
            ..Default::default()
        };
        let opts = BuildOptions {
            buffer: 50.0,
            years: vec![2015],
            ontology: CategoryOntology::default(),
            excluded_tracts: vec![],
        };
        build_dataset(raw, &opts).unwrap()
    }

    fn cell(m: &FeatureMatrix, tract: usize, name: &str) -> f64 {
        m.rows[tract][m.column_index(name).unwrap_or_else(|| panic!("no column {name}"))]
    }

    #[test]
    fn venue_and_checkin_features_by_hand() {
        let ds = fixture();
        let m = build_matrix(&ds, 2015, Subset::Full, &FeatureConfig::default()).unwrap();
        assert_eq!(m.n_cols(), 85);
        // A: 3 food, 1 shop + border shop = 2 shop; uncategorized excluded
        assert_eq!(cell(&m, 0, "venues_food"), 3.0);
        assert_eq!(cell(&m, 0, "venues_shop_and_service"), 2.0);
        assert_eq!(cell(&m, 0, "venue_frac_food"), 4.0 / 6.0);
        assert_eq!(cell(&m, 1, "venues_shop_and_service"), 1.0);
        // city: 5 categorized venues, 3 food
        assert_eq!(cell(&m, 0, "offering_adv_food"), (4.0 / 6.0) * (5.0 / 3.0));
        assert_eq!(cell(&m, 0, "offering_adv_event"), 0.0);
        assert_eq!(cell(&m, 0, "checkins_food"), 15.0);
        assert_eq!(cell(&m, 0, "checkins_shop_and_service"), 5.0);
        assert_eq!(cell(&m, 0, "checkin_frac_food"), 16.0 / 21.0);
        // city checkins at categorized venues: 20; city venues 5; city population 400
        let (qv, qp) = local_quotients(20.0, 5.0, 100.0, 20.0, 5.0, 400.0).unwrap();
        assert_eq!(cell(&m, 0, "lq_venues"), qv);
        assert_eq!(cell(&m, 0, "lq_population"), qp);
        // popular hours count every assigned venue
        assert_eq!(cell(&m, 0, "popular_wd_afternoon"), 3.0);
        assert_eq!(cell(&m, 0, "popular_we_night"), 1.0);
        // empty tract
        assert_eq!(cell(&m, 2, "venue_diversity"), 0.0);
        assert_eq!(cell(&m, 2, "venues_food"), 0.0);
    }

    #[test]
    fn flow_features_by_hand() {
        let ds = fixture();
        let m = build_matrix(&ds, 2015, Subset::Full, &FeatureConfig::default()).unwrap();
        assert_eq!(cell(&m, 1, "subway_stations"), 2.0);
        assert_eq!(cell(&m, 0, "subway_stations"), 0.0);
        assert_eq!(cell(&m, 1, "subway_entries_wd"), 1.0);
        assert_eq!(cell(&m, 1, "subway_exits_wd"), 2.0);
        assert_eq!(cell(&m, 1, "subway_entries_we"), 1.0);
        assert_eq!(cell(&m, 1, "subway_exits_we"), 0.0);
        assert_eq!(cell(&m, 1, "subway_diversity"), diversity_index(&[261.0, 522.0, 104.0, 0.0], PRINTED).unwrap());
        assert_eq!(cell(&m, 0, "taxi_pickups_we"), 3.0 / 104.0);
        assert_eq!(cell(&m, 0, "taxi_dropoffs_we"), 3.0 / 104.0);
        assert_eq!(cell(&m, 0, "taxi_pickups_wd"), 0.0);
        assert_eq!(cell(&m, 2, "subway_diversity"), 0.0);
    }

    #[test]
    fn monday_only_station_average() {
        let ds = fixture();
        let mut ds2 = ds.clone();
        let monday = parse_timestamp("2015-01-05T08:00:00").unwrap();
        ds2.turnstile.insert(
            2015,
            (0..52)
                .map(|w| TurnstileInterval {
                    station_id: "st1".into(),
                    interval_start: monday + chrono::Duration::weeks(w),
                    entries: 10,
                    exits: 0,
                })
                .collect(),
        );
        let m = build_matrix(&ds2, 2015, Subset::Full, &FeatureConfig::default()).unwrap();
        let v = cell(&m, 1, "subway_entries_wd");
        assert_eq!(v, 520.0 / 261.0);
        assert!((v - 1.992).abs() < 1e-3);
    }

    #[test]
    fn census_features_pass_through() {
        let ds = fixture();
        let m = build_matrix(&ds, 2015, Subset::Census, &FeatureConfig::default()).unwrap();
        assert_eq!(m.n_cols(), 12);
        assert_eq!(cell(&m, 1, "population"), 300.0);
        assert_eq!(cell(&m, 1, "frac_rented"), 0.7);
        assert_eq!(cell(&m, 0, "area"), 10000.0);
        assert_eq!(cell(&m, 0, "income_diversity"), diversity_index(&[5.0, 5.0, 5.0], PRINTED).unwrap());
    }

    #[test]
    fn subsets_partition_and_select() {
        let ds = fixture();
        let cfg = FeatureConfig::default();
        let full = build_matrix(&ds, 2015, Subset::Full, &cfg).unwrap();
        let hd = build_matrix(&ds, 2015, Subset::HumanDynamics, &cfg).unwrap();
        let census = build_matrix(&ds, 2015, Subset::Census, &cfg).unwrap();
        assert!(hd.names().iter().all(|n| !census.names().contains(n)));
        assert_eq!(hd.n_cols() + census.n_cols(), full.n_cols());
        assert_eq!(full.select(Subset::HumanDynamics), hd);
        let no_race = build_matrix(&ds, 2015, Subset::Census, &FeatureConfig { include_race: false, ..cfg }).unwrap();
        assert_eq!(no_race.n_cols(), 9);
    }

    #[test]
    fn all_cells_finite_and_deterministic() {
        let ds = fixture();
        let cfg = FeatureConfig::default();
        let a = build_matrix(&ds, 2015, Subset::Full, &cfg).unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| build_matrix(&ds, 2015, Subset::Full, &cfg).unwrap());
        assert_eq!(a, b);
        assert!(a.flat().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn matrix_csv_export() {
        let ds = fixture();
        let cfg = FeatureConfig::default();
        let m = build_matrix(&ds, 2015, Subset::Census, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let manifest = write_matrix_csv(&p, &m, &cfg, BTreeMap::new()).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let header = text.lines().next().unwrap();
        assert!(header.starts_with("tract_id,area,population,frac_male"));
        assert_eq!(text.lines().count(), 4);
        assert_eq!(manifest.registry.len(), 12);
        assert!(manifest_path_for(&p).exists());
    }
}
