//! `dpgan`: train the scoring classifier, run or sweep DP-WGAN-GP
//! experiments, and query the privacy accountant.
//!
//! Exit codes: 0 success, 2 configuration error, 3 run failure.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dpgan_core::accountant::epsilon_after;
use dpgan_core::data::DatasetSpec;
use dpgan_core::evaluation::{train_classifier, Classifier, ClassifierConfig, ProbabilisticClassifier};
use dpgan_core::harness::{run_experiment, sweep, ConfigError, HarnessError, RunConfig, SweepGrid, CONFIG_KEYS};

#[derive(Parser)]
#[command(name = "dpgan", version, about = "Differentially private WGAN-GP experiments on MNIST")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the digit classifier used for inception scores.
    TrainClassifier(ClassifierArgs),
    /// Train one DP-WGAN-GP and write its ledger and checkpoints.
    Run(RunArgs),
    /// Run a grid of configs and write a combined CSV.
    Sweep(SweepArgs),
    /// Print (epsilon, delta) after T sampled-Gaussian steps.
    Epsilon(EpsilonArgs),
}

#[derive(Args)]
struct ClassifierArgs {
    #[arg(long, default_value = "data/mnist")]
    data_dir: PathBuf,
    #[arg(long, default_value_t = 28)]
    image_side: usize,
    /// Leading training examples to use; all by default.
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long, default_value_t = ClassifierConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "classifier.ckpt")]
    out: PathBuf,
}

/// Flags override the config file, which overrides the built-in defaults.
#[derive(Args)]
struct Overrides {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<String>,
    #[arg(long)]
    image_side: Option<String>,
    #[arg(long)]
    subset: Option<String>,
    #[arg(long)]
    capacity: Option<String>,
    #[arg(long)]
    clip: Option<String>,
    #[arg(long)]
    noise_multiplier: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    n_critic: Option<String>,
    #[arg(long)]
    lambda_gp: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    delta: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    eval_every: Option<String>,
    #[arg(long)]
    eval_samples: Option<String>,
    /// Classifier checkpoint for inception scores.
    #[arg(long)]
    classifier: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Any other config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    extra: Vec<String>,
}

impl Overrides {
    fn pairs(&self) -> Result<Vec<(String, String)>, ConfigError> {
        let flags = [
            ("data-dir", &self.data_dir),
            ("image-side", &self.image_side),
            ("subset", &self.subset),
            ("capacity", &self.capacity),
            ("clip", &self.clip),
            ("noise-multiplier", &self.noise_multiplier),
            ("batch-size", &self.batch_size),
            ("steps", &self.steps),
            ("n-critic", &self.n_critic),
            ("lambda-gp", &self.lambda_gp),
            ("lr", &self.lr),
            ("delta", &self.delta),
            ("seed", &self.seed),
            ("eval-every", &self.eval_every),
            ("eval-samples", &self.eval_samples),
            ("classifier", &self.classifier),
            ("out", &self.out),
        ];
        let mut pairs: Vec<(String, String)> = flags
            .iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect();
        for kv in &self.extra {
            let (k, v) = kv.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: 0,
                text: kv.clone(),
            })?;
            pairs.push((k.trim().to_string(), v.to_string()));
        }
        Ok(pairs)
    }

    /// The resolved config and the keys left at their defaults.
    fn resolve(&self) -> Result<(RunConfig, Vec<String>), ConfigError> {
        let mut config = RunConfig::default();
        let mut set = BTreeSet::new();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                path: path.clone(),
                source,
            })?;
            set = config.apply_text(&text)?;
        }
        for (k, v) in self.pairs()? {
            config.set(&k, &v)?;
            set.insert(k);
        }
        config.validate()?;
        let defaulted = CONFIG_KEYS.iter().filter(|k| !set.contains(**k)).map(|k| k.to_string()).collect();
        Ok((config, defaulted))
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, value_delimiter = ',', default_value = "1.0")]
    clips: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.6,0.8,1.0")]
    sigmas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "8")]
    capacities: Vec<usize>,
    /// Also run the non-private baseline (sigma 0, no clipping).
    #[arg(long)]
    baseline: bool,
}

#[derive(Args)]
struct EpsilonArgs {
    /// Sampling rate |B| / n.
    #[arg(long)]
    q: f64,
    #[arg(long)]
    sigma: f64,
    #[arg(long)]
    steps: u64,
    #[arg(long, default_value_t = 1e-5)]
    delta: f64,
}

enum Failure {
    Config(String),
    Run(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_config_error() {
            Failure::Config(e.to_string())
        } else {
            Failure::Run(e.to_string())
        }
    }
}

fn load_classifier(config: &RunConfig) -> Result<Option<Classifier>, Failure> {
    config
        .classifier
        .as_deref()
        .map(|p| Classifier::load(p).map_err(|e| Failure::Config(format!("classifier {}: {e}", p.display()))))
        .transpose()
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::TrainClassifier(a) => {
            let mut spec = DatasetSpec::new(&a.data_dir, a.image_side);
            spec.subset = a.subset;
            spec.validate().map_err(|e| Failure::Config(e.to_string()))?;
            let train = spec.load(true).map_err(|e| Failure::Run(e.to_string()))?;
            spec.subset = None;
            let test = spec.load(false).map_err(|e| Failure::Run(e.to_string()))?;
            let config = ClassifierConfig {
                seed: a.seed,
                epochs: a.epochs,
                ..ClassifierConfig::default()
            };
            let c = train_classifier(&train, &test, &config).map_err(|e| Failure::Run(e.to_string()))?;
            c.save(&a.out).map_err(|e| Failure::Run(e.to_string()))?;
            println!("test accuracy {:.4}; saved {}", c.validation_accuracy, a.out.display());
        }
        Command::Run(a) => {
            let (config, defaulted) = a.overrides.resolve()?;
            let classifier = load_classifier(&config)?;
            let outcome = run_experiment(&config, classifier.as_ref().map(|c| c as &dyn ProbabilisticClassifier), &defaulted)?;
            if let Some(last) = outcome.ledger.last() {
                println!("step {} epsilon {} (delta {})", last.step, last.epsilon, last.delta);
                if let Some(is) = last.is_mean {
                    println!("inception score {is:.4}");
                }
            }
            println!("wrote {}", config.out.display());
        }
        Command::Sweep(a) => {
            let (config, defaulted) = a.overrides.resolve()?;
            let classifier = load_classifier(&config)?;
            let grid = SweepGrid {
                clips: a.clips,
                noise_multipliers: a.sigmas,
                capacities: a.capacities,
                baseline: a.baseline,
            };
            let entries = sweep(&config, &grid, classifier.as_ref().map(|c| c as &dyn ProbabilisticClassifier), &defaulted)?;
            let failed: Vec<_> = entries.iter().filter(|e| e.error.is_some()).collect();
            for e in &failed {
                eprintln!("{}: {}", e.out.display(), e.error.as_deref().unwrap_or_default());
            }
            println!("{} runs, {} failed; wrote {}", entries.len(), failed.len(), config.out.join("sweep.csv").display());
            if !failed.is_empty() {
                return Err(Failure::Run(format!("{} sweep runs failed", failed.len())));
            }
        }
        Command::Epsilon(a) => {
            let e = epsilon_after(a.steps, a.q, a.sigma, a.delta).map_err(|e| Failure::Config(e.to_string()))?;
            println!("epsilon {} at alpha {} (rdp {}) for delta {}", e.epsilon, e.alpha_star, e.rdp_epsilon, e.delta);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("run failed: {msg}");
            ExitCode::from(3)
        }
    }
}
