//! `spice`: cluster precomputed embeddings from the command line.

mod config;
mod report;
mod run;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use spice_core::reliability::ReliableSet;
use spice_core::SpiceError;

use config::{resolve, ConfigError, Settings};
use report::{read_labels, Scores};
use run::Run;

macro_rules! overrides {
    ($($key:ident),* $(,)?) => {
        /// Settings shared by every stage. Each flag overrides the config key of the same name.
        #[derive(Args, Debug, Clone, Default)]
        struct Overrides {
            /// `key = value` config file with [data], [self], [select] and [semi] sections
            #[arg(long, value_name = "FILE")]
            config: Option<PathBuf>,
            $(
                #[arg(long, value_name = "VALUE", hide_short_help = true)]
                $key: Option<String>,
            )*
        }

        impl Overrides {
            fn pairs(&self) -> Vec<(&'static str, &str)> {
                let mut pairs = Vec::new();
                $(
                    if let Some(v) = &self.$key {
                        pairs.push((stringify!($key), v.as_str()));
                    }
                )*
                pairs
            }
        }
    };
}

overrides!(
    seed, out, data, k, d, n_per_cluster, separation, sigma, heads, epochs, r, m, m1, m2, n, loss,
    assignment, entropy_weight, optimizer, weak_noise, strong_noise, dropout, n_s, tau_c,
    semi_epochs, batch, mu, tau, hidden, semi_optimizer, semi_weak_noise, semi_strong_noise,
    semi_dropout,
);

#[derive(Parser, Debug)]
#[command(name = "spice", version, about = "Clustering of precomputed embeddings by semantic pseudo-labeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a Gaussian-mixture embedding file
    Synth {
        #[command(flatten)]
        o: Overrides,
        /// Output file; `.csv` selects the text format
        #[arg(long, value_name = "FILE")]
        file: Option<PathBuf>,
    },
    /// Train classifier heads on prototype pseudo-labels
    TrainSelf {
        #[command(flatten)]
        o: Overrides,
    },
    /// Keep samples whose neighbors agree with their label
    Select {
        #[command(flatten)]
        o: Overrides,
        /// Labels to filter, one per line; defaults to `<out>/self_labels.txt`
        #[arg(long, value_name = "FILE")]
        labels: Option<PathBuf>,
    },
    /// Retrain from the reliable set with consistency training
    TrainSemi {
        #[command(flatten)]
        o: Overrides,
        /// Reliable-set file; defaults to `<out>/reliable.txt`
        #[arg(long, value_name = "FILE")]
        reliable: Option<PathBuf>,
    },
    /// k-means baseline
    Kmeans {
        #[command(flatten)]
        o: Overrides,
    },
    /// Compare two label files
    Eval { pred: PathBuf, truth: PathBuf },
    /// Run every stage in order
    Pipeline {
        #[command(flatten)]
        o: Overrides,
    },
}

fn settings(o: &Overrides) -> anyhow::Result<Settings> {
    let text = match &o.config {
        Some(p) => Some(
            fs::read_to_string(p).map_err(|e| ConfigError(format!("reading {}: {e}", p.display())))?,
        ),
        None => None,
    };
    Ok(resolve(text.as_deref(), o.pairs())?)
}

fn execute(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Synth { o, file } => {
            let mut run = Run::start("synth", settings(&o)?)?;
            let ds = run.dataset()?;
            let path = file.unwrap_or_else(|| run.path("embeddings.bin"));
            run.save_dataset(&ds, &path)?;
            run.finish()?;
        }
        Command::TrainSelf { o } => {
            let mut run = Run::start("train-self", settings(&o)?)?;
            let ds = run.dataset()?;
            run.self_stage(&ds)?;
            run.finish()?;
        }
        Command::Select { o, labels } => {
            let mut run = Run::start("select", settings(&o)?)?;
            let ds = run.dataset()?;
            let path = labels.unwrap_or_else(|| run.path("self_labels.txt"));
            let labels = read_labels(&path)?;
            run.select_stage(&ds, &labels)?;
            run.finish()?;
        }
        Command::TrainSemi { o, reliable } => {
            let mut run = Run::start("train-semi", settings(&o)?)?;
            let ds = run.dataset()?;
            let path = reliable.unwrap_or_else(|| run.path("reliable.txt"));
            let set = ReliableSet::read(&path).with_context(|| format!("reading {}", path.display()))?;
            run.semi_stage(&ds, &set)?;
            run.finish()?;
        }
        Command::Kmeans { o } => {
            let mut run = Run::start("kmeans", settings(&o)?)?;
            let ds = run.dataset()?;
            run.kmeans_stage(&ds)?;
            run.finish()?;
        }
        Command::Eval { pred, truth } => {
            let pred = read_labels(&pred)?;
            let truth = read_labels(&truth)?;
            let scores = Scores::of(&pred, &truth)?;
            println!("{}", serde_json::to_string(&scores)?);
        }
        Command::Pipeline { o } => {
            let mut run = Run::start("pipeline", settings(&o)?)?;
            let ds = run.dataset()?;
            let outcome = run.self_stage(&ds)?;
            let set = run.select_stage(&ds, &outcome.labels)?;
            if let Err(e) = run.semi_stage(&ds, &set) {
                run.report.failure = Some(format!("{e:#}"));
                run.finish()?;
                return Err(e);
            }
            run.finish()?;
        }
    }
    Ok(())
}

/// 2 for bad configuration or input, 3 for failures while running.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<SpiceError>() {
        Some(
            SpiceError::Config(_) | SpiceError::UnknownStrategy { .. } | SpiceError::InvalidArgument(_),
        ) => 2,
        _ => 3,
    }
}

fn init_threads() -> Result<(), ConfigError> {
    let Ok(raw) = std::env::var("SPICE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| ConfigError(format!("SPICE_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| ConfigError(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = init_threads().map_err(anyhow::Error::from).and_then(|()| execute(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
