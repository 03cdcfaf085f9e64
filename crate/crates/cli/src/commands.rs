use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crimecast::eval::{
    bootstrap_importance, grid_search, kfold, nested_cv, prepare, residual_layer, temporal_holdout, to_model_matrix,
    EvalReport, ParamGrid, ResidualLayer,
};
use crimecast::features::{build_matrix, write_matrix_csv, Subset};
use crimecast::ingest::{
    build_dataset, load_census, load_events, load_stations, load_taxi, load_tracts, load_turnstile, load_venues,
    read_cache, write_cache, BuildOptions, IncidentType, Loaded as Records, RawSources, RegionDataset, CACHE_DATA_FILE,
    CACHE_MANIFEST_FILE,
};
use crimecast::model::{partial_dependence, EnsembleModel, HyperParams, Learner, MaxFeatures};
use crimecast::synth::{generate_city, SynthConfig};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::Loaded;
use crate::fail::{CliError, CliResult};
use crate::provenance::{self, Recorder, SUFFIX};

fn mkdir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("output serializes");
    v.push(b'\n');
    v
}

fn note_skips<T>(what: &str, r: &Records<T>) {
    if r.skipped > 0 {
        log::warn!("{what}: skipped {} malformed rows", r.skipped);
    }
    if r.filtered_out > 0 {
        info!("{what}: {} rows outside the configured years", r.filtered_out);
    }
}

pub fn ingest(l: &Loaded) -> CliResult<()> {
    let d = &l.config.data;
    let mode = d.parse_mode;
    let years = d.years.as_slice();
    let ontology = l.ontology()?;
    let mut rec = Recorder::new(l, "ingest");

    rec.config_input(&d.tracts);
    let tracts = load_tracts(&l.resolve(&d.tracts), d.units_per_mile * d.units_per_mile)?;
    let mut census = BTreeMap::new();
    for (year, path) in l.census_paths()? {
        if years.contains(&year) {
            census.insert(year, load_census(&path, mode)?);
            rec.config_input(&d.census[&year.to_string()]);
        }
    }
    if let Some(y) = years.iter().find(|y| !census.contains_key(y)) {
        return Err(CliError::Config(format!("data.census has no table for year {y}")));
    }
    rec.config_input(&d.events);
    let events = load_events(&l.resolve(&d.events), Some(years), mode)?;
    note_skips("events", &events);
    let mut raw = RawSources { tracts, census, events: events.records, ..RawSources::default() };
    if let Some(p) = &d.venues {
        let r = load_venues(&l.resolve(p), &ontology, mode)?;
        note_skips("venues", &r);
        raw.venues = r.records;
        rec.config_input(p);
    }
    if let Some(p) = &d.stations {
        let r = load_stations(&l.resolve(p), mode)?;
        note_skips("stations", &r);
        raw.stations = r.records;
        rec.config_input(p);
    }
    if let Some(p) = &d.turnstile {
        let r = load_turnstile(&l.resolve(p), Some(years), mode)?;
        note_skips("turnstile", &r);
        raw.turnstile = r.records;
        rec.config_input(p);
    }
    if let Some(p) = &d.taxi {
        let r = load_taxi(&l.resolve(p), Some(years), mode)?;
        note_skips("taxi", &r);
        raw.taxi = r.records;
        rec.config_input(p);
    }

    let options =
        BuildOptions { buffer: d.buffer, years: d.years.clone(), ontology, excluded_tracts: d.excluded_tracts.clone() };
    let ds = build_dataset(raw, &options)?;
    for &year in years {
        let r = ds.assignment_report(year)?;
        println!(
            "{year}: {} incidents, {} unassigned, {} extra border assignments, {} tract-level counts",
            r.incidents, r.unassigned, r.extra_assignments, r.tract_total
        );
    }
    let provenance = BTreeMap::from([
        ("config_hash".to_string(), l.hash.clone()),
        ("tool_version".into(), provenance::TOOL_VERSION.into()),
    ]);
    write_cache(&l.cache_dir(), &ds, provenance)?;
    rec.output(&format!("cache/{CACHE_DATA_FILE}")).output(&format!("cache/{CACHE_MANIFEST_FILE}"));
    rec.write(&format!("cache/dataset{SUFFIX}"))?;
    println!("cached {} tracts under {}", ds.tracts.len(), l.cache_dir().display());
    Ok(())
}

fn dataset(l: &Loaded) -> CliResult<RegionDataset> {
    let dir = l.cache_dir();
    if !dir.join(CACHE_MANIFEST_FILE).exists() {
        return Err(CliError::Input(format!(
            "no dataset cache in {}; run `crimecast ingest --config {}` first",
            dir.display(),
            l.path.display()
        )));
    }
    let (ds, manifest) = read_cache(&dir)?;
    if manifest.provenance.get("config_hash") != Some(&l.hash) {
        log::warn!("dataset cache was built from a different config; rerun `crimecast ingest` to refresh it");
    }
    Ok(ds)
}

const CACHE_INPUT: &str = "cache/dataset.json";

fn check_year(ds: &RegionDataset, year: i32) -> CliResult<()> {
    if ds.years.contains(&year) {
        Ok(())
    } else {
        Err(CliError::Config(format!("year {year} is not in the cached dataset ({:?})", ds.years)))
    }
}

pub fn features(l: &Loaded, year: Option<i32>, subset: Subset) -> CliResult<()> {
    let ds = dataset(l)?;
    let year = year.unwrap_or_else(|| l.year());
    check_year(&ds, year)?;
    let m = build_matrix(&ds, year, subset, &l.config.features)?;
    let dir = l.workdir().join("features");
    mkdir(&dir)?;
    let stem = format!("{subset}_{year}");
    let provenance = BTreeMap::from([("config_hash".to_string(), l.hash.clone())]);
    write_matrix_csv(&dir.join(format!("{stem}.csv")), &m, &l.config.features, provenance)?;
    Recorder::new(l, "features")
        .param("year", year)
        .param("subset", subset)
        .work_input(CACHE_INPUT)
        .output(&format!("features/{stem}.csv"))
        .output(&format!("features/{stem}.csv.manifest.json"))
        .write(&format!("features/{stem}{SUFFIX}"))?;
    println!("wrote {} x {} matrix to {}", m.n_rows(), m.n_cols(), dir.join(format!("{stem}.csv")).display());
    Ok(())
}

pub struct TrainOptions {
    pub learner: Learner,
    pub subset: Subset,
    pub year: Option<i32>,
    pub tune: bool,
    pub n_trees: Option<usize>,
    pub max_features: Option<MaxFeatures>,
    pub max_depth: Option<usize>,
    pub learning_rate: Option<f64>,
}

/// Sidecar describing what a saved model was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub learner: Learner,
    pub subset: Subset,
    pub year: i32,
    pub incident: IncidentType,
    pub feature_config: crimecast::features::FeatureConfig,
    pub params: HyperParams,
    /// Mean validation MSE of the chosen cell when tuned.
    pub validation_mse: Option<f64>,
    pub model_sha256: String,
}

fn card_path(model: &Path) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".card.json");
    PathBuf::from(s)
}

pub fn train(l: &Loaded, o: &TrainOptions) -> CliResult<()> {
    let ds = dataset(l)?;
    let year = o.year.unwrap_or_else(|| l.year());
    check_year(&ds, year)?;
    let incident = l.config.experiment.incident;
    let (m, target) = prepare(&ds, year, incident, o.subset, &l.config.features)?;
    let x = to_model_matrix(&m);
    let cv = l.cv_settings();
    let base = HyperParams { seed: cv.seed, min_samples_leaf: cv.min_samples_leaf, ..HyperParams::new(o.learner) };
    let (params, validation_mse) = if o.tune {
        let rows: Vec<usize> = (0..x.n_rows()).collect();
        let folds = kfold(x.n_rows(), cv.temporal_folds, cv.seed)?;
        let sel = grid_search(&x, &target.y, &rows, &folds, &l.grid(o.learner)?, &base)?;
        (sel.params, Some(sel.validation_mse))
    } else {
        let p = HyperParams {
            n_trees: o.n_trees.unwrap_or(base.n_trees),
            max_features: o.max_features.unwrap_or(base.max_features),
            gb_max_depth: o.max_depth.unwrap_or(base.gb_max_depth),
            gb_learning_rate: o.learning_rate.unwrap_or(base.gb_learning_rate),
            ..base
        };
        p.validate()?;
        (p, None)
    };
    let names: Vec<String> = m.names().into_iter().map(String::from).collect();
    let model = crimecast::model::fit(&x, &target.y, &params, names)?;

    let dir = l.workdir().join("models");
    mkdir(&dir)?;
    let stem = format!("{}_{}_{}_{year}", o.learner, o.subset, incident.as_str());
    let path = dir.join(format!("{stem}.json"));
    model.save(&path)?;
    let card = ModelCard {
        learner: o.learner,
        subset: o.subset,
        year,
        incident,
        feature_config: l.config.features,
        params,
        validation_mse,
        model_sha256: model.content_hash(),
    };
    write_file(&card_path(&path), &json_bytes(&card))?;
    Recorder::new(l, "train")
        .param("learner", o.learner)
        .param("subset", o.subset)
        .param("year", year)
        .param("tuned", o.tune)
        .work_input(CACHE_INPUT)
        .output(&format!("models/{stem}.json"))
        .output(&format!("models/{stem}.json.card.json"))
        .write(&format!("models/{stem}{SUFFIX}"))?;
    println!("saved {} model ({} trees) to {}", o.learner, model.trees.len(), path.display());
    Ok(())
}

pub fn evaluate(
    l: &Loaded,
    temporal: bool,
    learners: Option<Vec<Learner>>,
    subsets: Option<Vec<Subset>>,
    shuffle_target: bool,
) -> CliResult<()> {
    let ds = dataset(l)?;
    let e = &l.config.experiment;
    let learners = learners.unwrap_or_else(|| e.learners.clone());
    let subsets = subsets.unwrap_or_else(|| e.subsets.clone());
    let settings = crimecast::eval::CvSettings { shuffle_target, ..l.cv_settings() };
    let fc = &l.config.features;
    let mut entries = Vec::new();
    for &learner in &learners {
        let grid: ParamGrid = l.grid(learner)?;
        for &subset in &subsets {
            let entry = if temporal {
                let (train, test) = l.temporal_years()?;
                check_year(&ds, train)?;
                check_year(&ds, test)?;
                temporal_holdout(&ds, train, test, e.incident, subset, fc, &grid, &settings)?
            } else {
                let year = l.year();
                check_year(&ds, year)?;
                nested_cv(&ds, year, e.incident, subset, fc, &grid, &settings)?
            };
            info!(
                "{learner} {subset}: R2 {:.3} ± {:.3}, MSE {:.3} ({:.1}s)",
                entry.mean_r2, entry.sd_r2, entry.mean_mse, entry.runtime_secs
            );
            entries.push(entry);
        }
    }
    let report = EvalReport::new(entries);
    let dir = l.workdir().join("reports");
    mkdir(&dir)?;
    let stem = format!(
        "eval_{}{}",
        if temporal { "temporal" } else { "geographic" },
        if shuffle_target { "_shuffled" } else { "" }
    );
    let table = report.to_table();
    write_file(&dir.join(format!("{stem}.json")), &json_bytes(&report))?;
    write_file(&dir.join(format!("{stem}.txt")), table.as_bytes())?;
    Recorder::new(l, "evaluate")
        .param("split", if temporal { "temporal" } else { "geographic" })
        .param("learners", learners.iter().map(|l| l.as_str()).collect::<Vec<_>>().join(","))
        .param("subsets", subsets.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(","))
        .param("shuffle_target", shuffle_target)
        .work_input(CACHE_INPUT)
        .output(&format!("reports/{stem}.json"))
        .output(&format!("reports/{stem}.txt"))
        .write(&format!("reports/{stem}{SUFFIX}"))?;
    print!("{table}");
    Ok(())
}

pub fn importance(
    l: &Loaded,
    resamples: Option<usize>,
    frac: Option<f64>,
    subset: Option<Subset>,
    year: Option<i32>,
) -> CliResult<()> {
    let ds = dataset(l)?;
    let cfg = &l.config.importance;
    let resamples = resamples.unwrap_or(cfg.resamples);
    let frac = frac.unwrap_or(cfg.frac);
    let subset = subset.unwrap_or(cfg.subset);
    let year = year.unwrap_or_else(|| l.year());
    check_year(&ds, year)?;
    let (m, target) = prepare(&ds, year, l.config.experiment.incident, subset, &l.config.features)?;
    let names: Vec<String> = m.names().into_iter().map(String::from).collect();
    let params = l.importance_params();
    let table = bootstrap_importance(
        &to_model_matrix(&m),
        &target.y,
        &names,
        &params,
        resamples,
        frac,
        l.config.experiment.seed,
    )?;
    let dir = l.workdir().join("reports");
    mkdir(&dir)?;
    let stem = format!("importance_{subset}_{year}");
    table.write_csv(&dir.join(format!("{stem}.csv")))?;
    write_file(&dir.join(format!("{stem}.json")), &json_bytes(&table))?;
    Recorder::new(l, "importance")
        .param("resamples", resamples)
        .param("frac", frac)
        .param("subset", subset)
        .param("year", year)
        .work_input(CACHE_INPUT)
        .output(&format!("reports/{stem}.csv"))
        .output(&format!("reports/{stem}.json"))
        .write(&format!("reports/{stem}{SUFFIX}"))?;
    println!("{:>4}  {:<28} {:>8} {:>8} {:>8} {:>6}", "rank", "feature", "median", "q1", "q3", "first");
    for r in table.rows.iter().take(15) {
        println!("{:>4}  {:<28} {:>8.4} {:>8.4} {:>8.4} {:>6}", r.rank, r.feature, r.median, r.q1, r.q3, r.times_first);
    }
    Ok(())
}

fn load_model(l: &Loaded, path: &Path) -> CliResult<(EnsembleModel, ModelCard, String)> {
    let full =
        if path.is_absolute() { path.to_path_buf() } else { std::env::current_dir().unwrap_or_default().join(path) };
    if !full.exists() {
        return Err(CliError::Input(format!(
            "model {} not found; run `crimecast train --config {}` first",
            path.display(),
            l.path.display()
        )));
    }
    let model = EnsembleModel::load(&full)?;
    let card_file = card_path(&full);
    let text = fs::read_to_string(&card_file)
        .map_err(|e| CliError::Input(format!("cannot read model card {}: {e}", card_file.display())))?;
    let card: ModelCard =
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", card_file.display())))?;
    if card.model_sha256 != model.content_hash() {
        return Err(CliError::Input(format!("{} does not match its model card", path.display())));
    }
    if card.feature_config != l.config.features {
        return Err(CliError::Config("model was trained under different feature settings".into()));
    }
    let canon = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let rel = canon(&full)
        .strip_prefix(canon(&l.workdir()))
        .map(|p| p.to_string_lossy().into_owned())
        .map_err(|_| CliError::Config(format!("model {} must live under the workdir", path.display())))?;
    Ok((model, card, rel))
}

#[derive(Debug, Serialize)]
struct PdpRow<'a> {
    feature: &'a str,
    grid_value: f64,
    partial_dependence: f64,
}

pub fn pdp(l: &Loaded, model_path: &Path, features: Option<Vec<String>>, top: usize) -> CliResult<()> {
    let ds = dataset(l)?;
    let (model, card, rel) = load_model(l, model_path)?;
    let m = build_matrix(&ds, card.year, card.subset, &card.feature_config)?;
    let x = to_model_matrix(&m);
    let chosen: Vec<usize> = match features {
        Some(names) => names
            .iter()
            .map(|n| {
                model
                    .feature_names
                    .iter()
                    .position(|f| f == n)
                    .ok_or_else(|| CliError::Config(format!("model has no feature `{n}`")))
            })
            .collect::<CliResult<_>>()?,
        None => model.importance().ranking().into_iter().take(top).collect(),
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    for j in &chosen {
        let curve = partial_dependence(&model, &x, *j, None)?;
        for (g, v) in curve.grid.iter().zip(&curve.values) {
            w.serialize(PdpRow { feature: &curve.feature, grid_value: *g, partial_dependence: *v })
                .map_err(|e| CliError::Runtime(e.to_string()))?;
        }
    }
    let bytes = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    let dir = l.workdir().join("reports");
    mkdir(&dir)?;
    let stem = format!("pdp_{}", model_stem(model_path));
    write_file(&dir.join(format!("{stem}.csv")), &bytes)?;
    Recorder::new(l, "pdp")
        .param("features", chosen.iter().map(|&j| model.feature_names[j].as_str()).collect::<Vec<_>>().join(","))
        .work_input(CACHE_INPUT)
        .work_input(&rel)
        .output(&format!("reports/{stem}.csv"))
        .write(&format!("reports/{stem}{SUFFIX}"))?;
    println!("wrote {} partial-dependence curves to {}", chosen.len(), dir.join(format!("{stem}.csv")).display());
    Ok(())
}

fn model_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

#[derive(Debug, Serialize)]
struct ResidualSummary<'a> {
    year: i32,
    n_tracts: usize,
    in_band: usize,
    histogram: &'a BTreeMap<i64, usize>,
    layer: &'a ResidualLayer,
}

pub fn residuals(l: &Loaded, model_path: &Path, year: Option<i32>) -> CliResult<()> {
    let ds = dataset(l)?;
    let (model, card, rel) = load_model(l, model_path)?;
    let year = year.unwrap_or(card.year);
    check_year(&ds, year)?;
    let layer = residual_layer(&model, &ds, year, card.incident, card.subset, &card.feature_config)?;
    let dir = l.workdir().join("reports");
    mkdir(&dir)?;
    let stem = format!("residuals_{}_{year}", model_stem(model_path));
    layer.write_geojson(&ds, &dir.join(format!("{stem}.geojson")))?;
    let summary = ResidualSummary {
        year,
        n_tracts: layer.rows.len(),
        in_band: layer.in_band,
        histogram: &layer.histogram,
        layer: &layer,
    };
    write_file(&dir.join(format!("{stem}.json")), &json_bytes(&summary))?;
    Recorder::new(l, "residuals")
        .param("year", year)
        .work_input(CACHE_INPUT)
        .work_input(&rel)
        .output(&format!("reports/{stem}.geojson"))
        .output(&format!("reports/{stem}.json"))
        .write(&format!("reports/{stem}{SUFFIX}"))?;
    println!("{} of {} tracts within (-0.5, 0.5); rounded errors:", layer.in_band, layer.rows.len());
    for (e, n) in &layer.histogram {
        println!("  {e:>3}: {n}");
    }
    Ok(())
}

/// Latent ceilings and values written next to a synthetic city.
#[derive(Debug, Serialize)]
struct LatentFile<'a> {
    config: &'a SynthConfig,
    ceilings: BTreeMap<i32, BTreeMap<IncidentType, f64>>,
    latent: &'a BTreeMap<i32, BTreeMap<IncidentType, Vec<f64>>>,
}

pub fn synth(
    out: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    n_tracts: Option<usize>,
    ambient_share: Option<f64>,
) -> CliResult<()> {
    let mut cfg = match config {
        Some(p) => {
            let text =
                fs::read_to_string(p).map_err(|e| CliError::Input(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str::<SynthConfig>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => SynthConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = n_tracts {
        cfg.n_tracts = n;
    }
    if let Some(a) = ambient_share {
        cfg.ambient_share = a;
    }
    let city = generate_city(&cfg)?;
    let files = city.write(out)?;
    let mut ceilings = BTreeMap::new();
    for year in cfg.years() {
        let per: BTreeMap<IncidentType, f64> = IncidentType::ALL
            .into_iter()
            .map(|i| Ok((i, city.latent_ceiling(year, i)?)))
            .collect::<crimecast::Result<_>>()?;
        ceilings.insert(year, per);
    }
    write_file(&out.join("latent.json"), &json_bytes(&LatentFile { config: &cfg, ceilings, latent: &city.latent }))?;

    let name = |p: &Path| p.file_name().expect("file name").to_string_lossy().into_owned();
    let [y0, y1] = cfg.years();
    let toml = format!(
        "workdir = \"out\"\n\n[data]\ntracts = \"{}\"\nevents = \"{}\"\nvenues = \"{}\"\nstations = \"{}\"\n\
         turnstile = \"{}\"\ntaxi = \"{}\"\nyears = [{y0}, {y1}]\nbuffer = {:?}\nunits_per_mile = 5280.0\n\n\
         [data.census]\n\"{y0}\" = \"{}\"\n\"{y1}\" = \"{}\"\n\n[experiment]\nseed = {}\n",
        name(&files.tracts),
        name(&files.events),
        name(&files.venues),
        name(&files.stations),
        name(&files.turnstile),
        name(&files.taxi),
        cfg.buffer,
        name(&files.census[&y0]),
        name(&files.census[&y1]),
        cfg.seed,
    );
    write_file(&out.join("crimecast.toml"), toml.as_bytes())?;
    println!(
        "synthetic city: {} tracts, {} incidents, {} venues, {} stations, {} taxi trips; latent R2 ceiling {y0}: {:.3}",
        cfg.n_tracts,
        city.raw.events.len(),
        city.raw.venues.len(),
        city.raw.stations.len(),
        city.raw.taxi.len(),
        city.latent_ceiling(y0, IncidentType::Total)?
    );
    println!("config written to {}", out.join("crimecast.toml").display());
    Ok(())
}

pub fn verify(l: &Loaded) -> CliResult<()> {
    let report = provenance::verify(l)?;
    if report.checked == 0 {
        return Err(CliError::Input(format!(
            "no provenance files under {}; run `crimecast ingest --config {}` first",
            l.workdir().display(),
            l.path.display()
        )));
    }
    if report.problems.is_empty() {
        println!("ok: {} manifests, {} file hashes verified", report.checked, report.files);
        Ok(())
    } else {
        for p in &report.problems {
            println!("MISMATCH {p}");
        }
        Err(CliError::Verify(format!("{} problems in {} manifests", report.problems.len(), report.checked)))
    }
}
