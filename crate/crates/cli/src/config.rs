use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crimecast::eval::{CvSettings, ParamGrid};
use crimecast::features::{CategoryOntology, FeatureConfig, Subset};
use crimecast::ingest::{sha256_hex, IncidentType, ParseMode};
use crimecast::model::{HyperParams, Learner};
use serde::{Deserialize, Serialize};

use crate::fail::{CliError, CliResult};

/// Run configuration. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Where caches, matrices, models and reports are written.
    #[serde(default = "default_workdir")]
    pub workdir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub grids: GridConfig,
    #[serde(default)]
    pub importance: ImportanceConfig,
}

fn default_workdir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub tracts: PathBuf,
    /// Census table per year, keyed by the year as a string.
    pub census: BTreeMap<String, PathBuf>,
    pub events: PathBuf,
    pub venues: Option<PathBuf>,
    pub stations: Option<PathBuf>,
    pub turnstile: Option<PathBuf>,
    pub taxi: Option<PathBuf>,
    pub years: Vec<i32>,
    /// CRS units per mile (5280 for a feet-based projection).
    #[serde(default = "default_units_per_mile")]
    pub units_per_mile: f64,
    /// Tract buffer in CRS units.
    #[serde(default = "default_buffer")]
    pub buffer: f64,
    #[serde(default)]
    pub excluded_tracts: Vec<String>,
    /// Venue category names; defaults to the ten top-level categories.
    pub ontology: Option<Vec<String>>,
    #[serde(default)]
    pub parse_mode: ParseMode,
}

fn default_units_per_mile() -> f64 {
    5280.0
}

fn default_buffer() -> f64 {
    crimecast::geo::DEFAULT_BUFFER
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub incident: IncidentType,
    /// Year for geographic CV, training and interpretation; defaults to the first data year.
    pub year: Option<i32>,
    pub train_year: Option<i32>,
    pub test_year: Option<i32>,
    pub subsets: Vec<Subset>,
    pub learners: Vec<Learner>,
    pub seed: u64,
    pub outer_folds: usize,
    pub inner_folds: usize,
    pub temporal_folds: usize,
    pub min_samples_leaf: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let cv = CvSettings::default();
        Self {
            incident: IncidentType::Total,
            year: None,
            train_year: None,
            test_year: None,
            subsets: Subset::MAIN.to_vec(),
            learners: Learner::ALL.to_vec(),
            seed: 0,
            outer_folds: cv.outer_folds,
            inner_folds: cv.inner_folds,
            temporal_folds: cv.temporal_folds,
            min_samples_leaf: cv.min_samples_leaf,
        }
    }
}

/// Optional grid overrides per learner.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub rf: Option<GridOverride>,
    pub et: Option<GridOverride>,
    pub gb: Option<GridOverride>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridOverride {
    pub n_trees: Option<Vec<usize>>,
    pub max_features: Option<Vec<crimecast::model::MaxFeatures>>,
    pub max_depth: Option<Vec<usize>>,
    pub learning_rate: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImportanceConfig {
    pub resamples: usize,
    pub frac: f64,
    pub learner: Learner,
    pub subset: Subset,
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        let gb = HyperParams::new(Learner::Gb);
        Self {
            resamples: 100,
            frac: 0.8,
            learner: Learner::Gb,
            subset: Subset::Full,
            n_trees: gb.n_trees,
            max_depth: gb.gb_max_depth,
            learning_rate: gb.gb_learning_rate,
        }
    }
}

/// A parsed config plus where it came from.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    pub path: PathBuf,
    pub base: PathBuf,
    /// SHA-256 of the canonical JSON form of the parsed config.
    pub hash: String,
}

impl Loaded {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn workdir(&self) -> PathBuf {
        self.resolve(&self.config.workdir)
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.workdir().join("cache")
    }

    pub fn ontology(&self) -> CliResult<CategoryOntology> {
        match &self.config.data.ontology {
            Some(names) => CategoryOntology::new(names.clone()).map_err(|e| CliError::Config(e.to_string())),
            None => Ok(CategoryOntology::default()),
        }
    }

    pub fn census_paths(&self) -> CliResult<BTreeMap<i32, PathBuf>> {
        self.config
            .data
            .census
            .iter()
            .map(|(k, v)| {
                let year = k.parse().map_err(|_| CliError::Config(format!("census key `{k}` is not a year")))?;
                Ok((year, self.resolve(v)))
            })
            .collect()
    }

    pub fn year(&self) -> i32 {
        self.config.experiment.year.unwrap_or(self.config.data.years[0])
    }

    pub fn temporal_years(&self) -> CliResult<(i32, i32)> {
        let years = &self.config.data.years;
        let train = self.config.experiment.train_year.unwrap_or(years[0]);
        let test = match self.config.experiment.test_year {
            Some(y) => y,
            None => *years
                .get(1)
                .ok_or_else(|| CliError::Config("temporal holdout needs two years or experiment.test_year".into()))?,
        };
        Ok((train, test))
    }

    pub fn cv_settings(&self) -> CvSettings {
        let e = &self.config.experiment;
        CvSettings {
            outer_folds: e.outer_folds,
            inner_folds: e.inner_folds,
            temporal_folds: e.temporal_folds,
            seed: e.seed,
            min_samples_leaf: e.min_samples_leaf,
            ..CvSettings::default()
        }
    }

    pub fn grid(&self, learner: Learner) -> CliResult<ParamGrid> {
        let mut grid = ParamGrid::default_for(learner);
        let o = match learner {
            Learner::Rf => &self.config.grids.rf,
            Learner::Et => &self.config.grids.et,
            Learner::Gb => &self.config.grids.gb,
        };
        if let Some(o) = o {
            if let Some(v) = &o.n_trees {
                grid.n_trees = v.clone();
            }
            if let Some(v) = &o.max_features {
                grid.max_features = v.clone();
            }
            if let Some(v) = &o.max_depth {
                grid.max_depth = v.clone();
            }
            if let Some(v) = &o.learning_rate {
                grid.learning_rate = v.clone();
            }
        }
        grid.validate().map_err(|e| CliError::Config(format!("grids.{learner}: {e}")))?;
        Ok(grid)
    }

    pub fn importance_params(&self) -> HyperParams {
        let i = &self.config.importance;
        HyperParams {
            n_trees: i.n_trees,
            gb_max_depth: i.max_depth,
            gb_learning_rate: i.learning_rate,
            seed: self.config.experiment.seed,
            min_samples_leaf: self.config.experiment.min_samples_leaf,
            ..HyperParams::new(i.learner)
        }
    }
}

fn validate(c: &RunConfig) -> CliResult<()> {
    let bad = |m: &str| Err(CliError::Config(m.to_string()));
    if c.data.years.is_empty() {
        return bad("data.years must list at least one year");
    }
    if !(c.data.buffer >= 0.0) || !(c.data.units_per_mile > 0.0) {
        return bad("data.buffer must be nonnegative and data.units_per_mile positive");
    }
    let e = &c.experiment;
    if e.subsets.is_empty() || e.learners.is_empty() {
        return bad("experiment.subsets and experiment.learners must be non-empty");
    }
    if e.outer_folds < 2 || e.inner_folds < 2 || e.temporal_folds < 2 {
        return bad("fold counts must be at least 2");
    }
    if e.min_samples_leaf == 0 {
        return bad("experiment.min_samples_leaf must be at least 1");
    }
    for y in [e.year, e.train_year, e.test_year].into_iter().flatten() {
        if !c.data.years.contains(&y) {
            return Err(CliError::Config(format!("year {y} is not in data.years")));
        }
    }
    let i = &c.importance;
    if i.resamples == 0 || !(i.frac > 0.0 && i.frac <= 1.0) {
        return bad("importance.resamples must be positive and importance.frac in (0, 1]");
    }
    Ok(())
}

pub fn load(path: &Path) -> CliResult<Loaded> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
    let config: RunConfig = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    validate(&config)?;
    let canonical = serde_json::to_vec(&config).expect("config serializes");
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let loaded = Loaded { hash: sha256_hex(&canonical), path: path.to_path_buf(), base, config };
    loaded.ontology()?;
    loaded.census_paths()?;
    for learner in Learner::ALL {
        loaded.grid(learner)?;
    }
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[data]
tracts = "tracts.geojson"
census = { "2014" = "census_2014.csv" }
events = "events.csv"
years = [2014]
"#;

    fn write(body: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, body).unwrap();
        (dir, path)
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let (_d, path) = write(MINIMAL);
        let l = load(&path).unwrap();
        assert_eq!(l.config.data.buffer, 50.0);
        assert_eq!(l.year(), 2014);
        assert_eq!(l.config.experiment.outer_folds, 5);
        assert_eq!(l.config.importance.resamples, 100);
        assert_eq!(l.grid(Learner::Gb).unwrap(), ParamGrid::default_for(Learner::Gb));
        assert!(l.resolve(Path::new("x")).starts_with(path.parent().unwrap()));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let (_d, path) = write(&format!("{MINIMAL}\n[experiment]\nfolds = 3\n"));
        assert!(matches!(load(&path), Err(CliError::Config(_))));
        let (_d, path) = write(&format!("bogus = 1\n{MINIMAL}"));
        assert!(matches!(load(&path), Err(CliError::Config(_))));
    }

    #[test]
    fn bad_values_are_config_errors() {
        let (_d, path) = write(&format!("{MINIMAL}\n[experiment]\nsubsets = [\"nope\"]\n"));
        assert!(matches!(load(&path), Err(CliError::Config(_))));
        let (_d, path) = write(&format!("{MINIMAL}\n[experiment]\nyear = 1999\n"));
        assert!(matches!(load(&path), Err(CliError::Config(_))));
        let (_d, path) = write(&format!("{MINIMAL}\n[grids.gb]\nmax_depth = [7]\n"));
        assert!(matches!(load(&path), Err(CliError::Config(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let (_d, a) = write(MINIMAL);
        let (_e, b) = write(&format!("{MINIMAL}\n[experiment]\nseed = 1\n"));
        assert_ne!(load(&a).unwrap().hash, load(&b).unwrap().hash);
        assert_eq!(load(&a).unwrap().hash, load(&a).unwrap().hash);
    }
}
