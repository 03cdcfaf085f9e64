//! `crimecast` command-line interface.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod fail;
mod provenance;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use crimecast::features::Subset;
use crimecast::model::{Learner, MaxFeatures};

use crate::fail::CliError;

/// Tract-level crime modelling from census, venue and mobility data.
///
/// Every command except `synth` reads a TOML run config (`--config`). Command
/// flags override config values, which override built-in defaults. Outputs
/// land under the config's `workdir`, each with a `.provenance.json` sidecar
/// recording the config hash, input and output hashes and the tool version.
///
/// Exit codes: 0 success, 2 configuration or usage error, 3 input error or
/// missing prerequisite, 4 runtime error, 5 verification failure.
#[derive(Debug, Parser)]
#[command(name = "crimecast", version, about, long_about)]
struct Cli {
    /// Worker threads for all parallel stages; results do not depend on it.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// Run config file.
    #[arg(long, short, default_value = "crimecast.toml")]
    config: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    /// Nested cross-validation over tracts within one year.
    Geographic,
    /// Train on one year, test on the next.
    Temporal,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load and validate all sources, assign records to buffered tracts and cache the dataset.
    Ingest(ConfigArg),
    /// Export a feature matrix as CSV.
    Features {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        year: Option<i32>,
        /// census, census_poi, human_dynamics, full, census_fs, census_subway or census_taxi.
        #[arg(long, default_value = "full")]
        subset: String,
    },
    /// Fit one model on a year's tracts and save it.
    Train(TrainArgs),
    /// Run the geographic or temporal evaluation protocol over learners and subsets.
    Evaluate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_enum, default_value = "geographic")]
        split: SplitArg,
        /// Comma-separated learners (rf, et, gb); overrides the config.
        #[arg(long, value_delimiter = ',')]
        learners: Option<Vec<Learner>>,
        /// Comma-separated subsets; overrides the config.
        #[arg(long, value_delimiter = ',')]
        subsets: Option<Vec<String>>,
        /// Permutation-null control: shuffle the target before fitting.
        #[arg(long)]
        shuffle_target: bool,
    },
    /// Bootstrap impurity-importance ranking with quartile table.
    Importance {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        resamples: Option<usize>,
        #[arg(long)]
        frac: Option<f64>,
        #[arg(long)]
        subset: Option<String>,
        #[arg(long)]
        year: Option<i32>,
    },
    /// Partial-dependence curves of a trained model over its training year.
    Pdp {
        #[command(flatten)]
        config: ConfigArg,
        /// Model file written by `train`.
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated feature names; defaults to the most important ones.
        #[arg(long, value_delimiter = ',')]
        features: Option<Vec<String>>,
        /// Number of features when `--features` is absent.
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
    /// Per-tract residual layer (GeoJSON) and rounded-error histogram.
    Residuals {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        model: PathBuf,
        /// Year to score; defaults to the model's training year.
        #[arg(long)]
        year: Option<i32>,
    },
    /// Generate a synthetic city in the ingest formats, plus a ready-to-use config.
    Synth(SynthArgs),
    /// Re-check every provenance sidecar under the workdir.
    Verify(ConfigArg),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, default_value = "gb")]
    learner: Learner,
    #[arg(long, default_value = "full")]
    subset: String,
    #[arg(long)]
    year: Option<i32>,
    /// Choose hyperparameters by k-fold grid search instead of the flags below.
    #[arg(long)]
    tune: bool,
    #[arg(long)]
    n_trees: Option<usize>,
    #[arg(long, value_enum)]
    max_features: Option<MaxFeaturesArg>,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MaxFeaturesArg {
    Third,
    Half,
    All,
}

impl From<MaxFeaturesArg> for MaxFeatures {
    fn from(m: MaxFeaturesArg) -> Self {
        match m {
            MaxFeaturesArg::Third => MaxFeatures::Third,
            MaxFeaturesArg::Half => MaxFeatures::Half,
            MaxFeaturesArg::All => MaxFeatures::All,
        }
    }
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory for data files, `crimecast.toml` and `latent.json`.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with generator settings (any subset of the fields).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_tracts: Option<usize>,
    #[arg(long)]
    ambient_share: Option<f64>,
}

fn parse_subset(s: &str) -> Result<Subset, CliError> {
    s.parse().map_err(|e: crimecast::Error| CliError::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    use commands as c;
    match cli.command {
        Command::Ingest(a) => c::ingest(&config::load(&a.config)?),
        Command::Features { config: a, year, subset } => {
            c::features(&config::load(&a.config)?, year, parse_subset(&subset)?)
        }
        Command::Train(t) => {
            let l = config::load(&t.config.config)?;
            let opts = c::TrainOptions {
                learner: t.learner,
                subset: parse_subset(&t.subset)?,
                year: t.year,
                tune: t.tune,
                n_trees: t.n_trees,
                max_features: t.max_features.map(Into::into),
                max_depth: t.max_depth,
                learning_rate: t.learning_rate,
            };
            c::train(&l, &opts)
        }
        Command::Evaluate { config: a, split, learners, subsets, shuffle_target } => {
            let l = config::load(&a.config)?;
            let subsets = subsets.map(|v| v.iter().map(|s| parse_subset(s)).collect()).transpose()?;
            c::evaluate(&l, matches!(split, SplitArg::Temporal), learners, subsets, shuffle_target)
        }
        Command::Importance { config: a, resamples, frac, subset, year } => {
            let l = config::load(&a.config)?;
            c::importance(&l, resamples, frac, subset.as_deref().map(parse_subset).transpose()?, year)
        }
        Command::Pdp { config: a, model, features, top } => c::pdp(&config::load(&a.config)?, &model, features, top),
        Command::Residuals { config: a, model, year } => c::residuals(&config::load(&a.config)?, &model, year),
        Command::Synth(s) => c::synth(&s.out, s.config.as_deref(), s.seed, s.n_tracts, s.ambient_share),
        Command::Verify(a) => c::verify(&config::load(&a.config)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    let result = match cli.jobs {
        Some(0) => Err(CliError::Config("--jobs must be at least 1".into())),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| run(cli)),
            Err(e) => Err(CliError::Runtime(format!("cannot start worker pool: {e}"))),
        },
        None => run(cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
