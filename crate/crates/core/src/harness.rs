//! Experiment plumbing: flat key-value run configs, the per-run CSV ledger,
//! single runs, and sweeps over clip, noise multiplier and capacity.
//!
//! Config files hold one `key = value` per line; `#` starts a comment. Keys
//! are the long CLI flag names without the leading dashes:
//!
//! ```text
//! data-dir          directory with the MNIST IDX files
//! image-side        8, 16 or 28
//! subset            leading training examples to use, or `all`
//! capacity          first critic layer filters
//! latent-dim        generator input size
//! clip              per-example L2 clip C, or `inf`
//! noise-multiplier  sigma; 0 disables noise (no finite epsilon)
//! batch-size        expected critic batch size |B|
//! steps             critic steps T
//! n-critic          critic steps per generator step
//! lambda-gp         gradient-penalty weight
//! lr                Adam learning rate for both networks
//! delta             target delta
//! seed              run seed
//! eval-every        critic steps between ledger rows
//! eval-samples      generated images per inception-score evaluation
//! splits            inception-score splits
//! classifier        classifier checkpoint for scoring, or empty
//! sampling          poisson or shuffle
//! objective         maximize-critic or minimize-critic
//! wall-time         record wall-clock seconds in the ledger (true/false)
//! out               run output directory
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accountant::{AccountantError, PrivacyAccountant};
use crate::data::{DataError, DatasetSpec};
use crate::dp_optim::{AdamConfig, AdamState, DpError, GaussianNoise, Optimizer, PrivacyParams};
use crate::evaluation::{EvalError, IsResult, ProbabilisticClassifier};
use crate::gan::{
    build_models, Architecture, BatchSampling, GanError, GanModel, GeneratorObjective, GpConfig, LatentSampler,
    PrivateCritic, Trainer,
};
use crate::grad_engine::Tensor;
use crate::rng::{self, stream};

pub const LEDGER_HEADER: &str = "step,alpha_star,rdp_eps,epsilon,delta,critic_loss,gen_loss,is_mean,is_std,wall_s";
pub const SWEEP_HEADER_PREFIX: &str = "clip,noise_multiplier,capacity";
pub const LEDGER_FILE: &str = "ledger.csv";
pub const RUN_META_FILE: &str = "run.json";
pub const CONFIG_FILE: &str = "config.txt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Gan(#[from] GanError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Accountant(#[from] AccountantError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: u64, what: String },
    #[error("ledger line {line}: {reason}")]
    Ledger { line: usize, reason: String },
}

impl HarnessError {
    /// Configuration problems are the caller's to fix; everything else is a
    /// failure of the run itself.
    pub fn is_config_error(&self) -> bool {
        matches!(self, HarnessError::Config(_))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub image_side: usize,
    pub subset: Option<usize>,
    pub capacity: usize,
    pub latent_dim: usize,
    pub clip: f64,
    pub noise_multiplier: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub n_critic: usize,
    pub lambda_gp: f64,
    pub lr: f64,
    pub delta: f64,
    pub seed: u64,
    pub eval_every: u64,
    pub eval_samples: usize,
    pub splits: usize,
    pub classifier: Option<PathBuf>,
    pub sampling: BatchSampling,
    pub objective: GeneratorObjective,
    pub wall_time: bool,
    pub out: PathBuf,
}

/// Desk-scale defaults: 8x8 images from 4,000 training examples.
impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data/mnist"),
            image_side: 8,
            subset: Some(4000),
            capacity: 8,
            latent_dim: 32,
            clip: 1.0,
            noise_multiplier: 0.8,
            batch_size: 64,
            steps: 2000,
            n_critic: 5,
            lambda_gp: 10.0,
            lr: 1e-3,
            delta: 1e-5,
            seed: 0,
            eval_every: 500,
            eval_samples: 2048,
            splits: 10,
            classifier: None,
            sampling: BatchSampling::Poisson,
            objective: GeneratorObjective::MaximizeCritic,
            wall_time: true,
            out: PathBuf::from("runs/default"),
        }
    }
}

pub const CONFIG_KEYS: [&str; 22] = [
    "data-dir",
    "image-side",
    "subset",
    "capacity",
    "latent-dim",
    "clip",
    "noise-multiplier",
    "batch-size",
    "steps",
    "n-critic",
    "lambda-gp",
    "lr",
    "delta",
    "seed",
    "eval-every",
    "eval-samples",
    "splits",
    "classifier",
    "sampling",
    "objective",
    "wall-time",
    "out",
];

fn bad(key: &str, value: &str, reason: impl ToString) -> ConfigError {
    ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: reason.to_string(),
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| bad(key, value, e))
}

/// `f64` in shortest round-trip form, `inf` for infinity.
fn fmt_f64(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v:?}")
    }
}

impl RunConfig {
    /// Sets one key; values use the same syntax as config files.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key {
            "data-dir" => self.data_dir = value.into(),
            "image-side" => self.image_side = parse(key, value)?,
            "subset" => self.subset = if value == "all" { None } else { Some(parse(key, value)?) },
            "capacity" => self.capacity = parse(key, value)?,
            "latent-dim" => self.latent_dim = parse(key, value)?,
            "clip" => self.clip = parse(key, value)?,
            "noise-multiplier" => self.noise_multiplier = parse(key, value)?,
            "batch-size" => self.batch_size = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "n-critic" => self.n_critic = parse(key, value)?,
            "lambda-gp" => self.lambda_gp = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "delta" => self.delta = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "eval-every" => self.eval_every = parse(key, value)?,
            "eval-samples" => self.eval_samples = parse(key, value)?,
            "splits" => self.splits = parse(key, value)?,
            "classifier" => self.classifier = (!value.is_empty()).then(|| value.into()),
            "sampling" => {
                self.sampling = match value {
                    "poisson" => BatchSampling::Poisson,
                    "shuffle" => BatchSampling::Shuffle,
                    _ => return Err(bad(key, value, "expected poisson or shuffle")),
                }
            }
            "objective" => {
                self.objective = match value {
                    "maximize-critic" => GeneratorObjective::MaximizeCritic,
                    "minimize-critic" => GeneratorObjective::MinimizeCritic,
                    _ => return Err(bad(key, value, "expected maximize-critic or minimize-critic")),
                }
            }
            "wall-time" => self.wall_time = parse(key, value)?,
            "out" => self.out = value.into(),
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let path = |p: &Path| p.display().to_string();
        Some(match key {
            "data-dir" => path(&self.data_dir),
            "image-side" => self.image_side.to_string(),
            "subset" => self.subset.map_or("all".into(), |n| n.to_string()),
            "capacity" => self.capacity.to_string(),
            "latent-dim" => self.latent_dim.to_string(),
            "clip" => fmt_f64(self.clip),
            "noise-multiplier" => fmt_f64(self.noise_multiplier),
            "batch-size" => self.batch_size.to_string(),
            "steps" => self.steps.to_string(),
            "n-critic" => self.n_critic.to_string(),
            "lambda-gp" => fmt_f64(self.lambda_gp),
            "lr" => fmt_f64(self.lr),
            "delta" => fmt_f64(self.delta),
            "seed" => self.seed.to_string(),
            "eval-every" => self.eval_every.to_string(),
            "eval-samples" => self.eval_samples.to_string(),
            "splits" => self.splits.to_string(),
            "classifier" => self.classifier.as_deref().map(path).unwrap_or_default(),
            "sampling" => match self.sampling {
                BatchSampling::Poisson => "poisson".into(),
                BatchSampling::Shuffle => "shuffle".into(),
            },
            "objective" => match self.objective {
                GeneratorObjective::MaximizeCritic => "maximize-critic".into(),
                GeneratorObjective::MinimizeCritic => "minimize-critic".into(),
            },
            "wall-time" => self.wall_time.to_string(),
            "out" => path(&self.out),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`. Returns the keys set.
    pub fn apply_text(&mut self, text: &str) -> Result<BTreeSet<String>, ConfigError> {
        let mut set = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.into(),
            })?;
            self.set(key.trim(), value)?;
            set.insert(key.trim().to_string());
        }
        Ok(set)
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.into(),
            source,
        })?;
        Self::from_text(&text)
    }

    /// Every key, in [`CONFIG_KEYS`] order; [`Self::from_text`] inverts it.
    pub fn to_text(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Invalid(m));
        if !crate::data::TRAINING_SIDES.contains(&self.image_side) {
            return fail(format!("image-side must be one of {:?}", crate::data::TRAINING_SIDES));
        }
        if self.capacity == 0 || self.latent_dim == 0 || self.batch_size == 0 || self.n_critic == 0 {
            return fail("capacity, latent-dim, batch-size and n-critic must be positive".into());
        }
        if !(self.clip > 0.0) || self.clip.is_nan() {
            return fail(format!("clip must be positive, got {}", self.clip));
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return fail(format!("noise-multiplier must be >= 0, got {}", self.noise_multiplier));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return fail(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lambda_gp > 0.0 && self.lambda_gp.is_finite()) {
            return fail("lr and lambda-gp must be positive".into());
        }
        if self.eval_every == 0 || self.splits == 0 {
            return fail("eval-every and splits must be positive".into());
        }
        if self.classifier.is_some() && self.eval_samples < self.splits * crate::data::NUM_CLASSES {
            return fail(format!(
                "eval-samples {} is below splits x classes = {}",
                self.eval_samples,
                self.splits * crate::data::NUM_CLASSES
            ));
        }
        if let Some(0) = self.subset {
            return fail("subset must be positive".into());
        }
        Ok(())
    }

    pub fn dataset(&self) -> DatasetSpec {
        let mut spec = DatasetSpec::new(&self.data_dir, self.image_side);
        spec.subset = self.subset;
        spec
    }

    pub fn architecture(&self) -> Result<Architecture, GanError> {
        Architecture::new(self.capacity, self.latent_dim, self.image_side)
    }
}

/// One ledger line. `None` fields are written as empty cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    /// Critic steps completed.
    pub step: u64,
    pub alpha_star: Option<u32>,
    pub rdp_eps: Option<f64>,
    /// `inf` when no finite guarantee exists.
    pub epsilon: f64,
    pub delta: f64,
    /// Mean critic loss over the steps since the previous row. Computed on
    /// private data without noise: a diagnostic, not a released quantity.
    pub critic_loss: Option<f64>,
    pub gen_loss: Option<f64>,
    pub is_mean: Option<f64>,
    pub is_std: Option<f64>,
    pub wall_s: Option<f64>,
}

/// 17 significant digits, enough to round-trip any `f64`.
fn fmt_cell(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_cell).unwrap_or_default()
}

impl LedgerRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.alpha_star.map(|a| a.to_string()).unwrap_or_default(),
            fmt_opt(self.rdp_eps),
            fmt_cell(self.epsilon),
            fmt_cell(self.delta),
            fmt_opt(self.critic_loss),
            fmt_opt(self.gen_loss),
            fmt_opt(self.is_mean),
            fmt_opt(self.is_std),
            fmt_opt(self.wall_s),
        )
    }

    pub fn from_csv(line: &str, line_no: usize) -> Result<Self, HarnessError> {
        let err = |reason: String| HarnessError::Ledger { line: line_no, reason };
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 10 {
            return Err(err(format!("expected 10 cells, got {}", cells.len())));
        }
        let num = |i: usize| -> Result<Option<f64>, HarnessError> {
            if cells[i].is_empty() {
                return Ok(None);
            }
            cells[i].parse().map(Some).map_err(|e| err(format!("cell {i} {:?}: {e}", cells[i])))
        };
        let req = |i: usize| num(i)?.ok_or_else(|| err(format!("cell {i} is empty")));
        Ok(Self {
            step: cells[0].parse().map_err(|e| err(format!("step {:?}: {e}", cells[0])))?,
            alpha_star: match cells[1] {
                "" => None,
                a => Some(a.parse().map_err(|e| err(format!("alpha_star {a:?}: {e}")))?),
            },
            rdp_eps: num(2)?,
            epsilon: req(3)?,
            delta: req(4)?,
            critic_loss: num(5)?,
            gen_loss: num(6)?,
            is_mean: num(7)?,
            is_std: num(8)?,
            wall_s: num(9)?,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub rows: Vec<LedgerRow>,
}

impl RunLedger {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{LEDGER_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.to_csv());
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, HarnessError> {
        let mut lines = text.lines();
        match lines.next() {
            Some(LEDGER_HEADER) => {}
            other => {
                return Err(HarnessError::Ledger {
                    line: 1,
                    reason: format!("unexpected header {other:?}"),
                })
            }
        }
        let rows = lines
            .enumerate()
            .map(|(i, l)| LedgerRow::from_csv(l, i + 2))
            .collect::<Result<_, _>>()?;
        Ok(Self { rows })
    }

    pub fn read(path: &Path) -> Result<Self, HarnessError> {
        Self::from_csv(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    /// Steps strictly increase and epsilon never decreases.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (i, w) in self.rows.windows(2).enumerate() {
            if w[1].step <= w[0].step {
                return Err(format!("row {}: step {} after {}", i + 1, w[1].step, w[0].step));
            }
            if w[1].epsilon < w[0].epsilon {
                return Err(format!("row {}: epsilon {} after {}", i + 1, w[1].epsilon, w[0].epsilon));
            }
        }
        Ok(())
    }

    pub fn last(&self) -> Option<&LedgerRow> {
        self.rows.last()
    }
}

/// Appends rows to the ledger file, flushing each one.
struct LedgerWriter {
    path: PathBuf,
    file: fs::File,
    ledger: RunLedger,
}

impl LedgerWriter {
    fn create(path: &Path) -> Result<Self, HarnessError> {
        let mut file = fs::File::create(path).map_err(io_err(path))?;
        writeln!(file, "{LEDGER_HEADER}").map_err(io_err(path))?;
        Ok(Self {
            path: path.into(),
            file,
            ledger: RunLedger::default(),
        })
    }

    fn push(&mut self, row: LedgerRow) -> Result<(), HarnessError> {
        writeln!(self.file, "{}", row.to_csv()).map_err(io_err(&self.path))?;
        self.file.flush().map_err(io_err(&self.path))?;
        self.ledger.rows.push(row);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum RunStatus {
    Completed,
    Failed(String),
}

/// Written to `run.json` in the output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub config: RunConfig,
    pub architecture: Architecture,
    pub dataset_size: usize,
    /// Keys left at their desk-scale defaults.
    pub defaulted_keys: Vec<String>,
    pub status: RunStatus,
    pub critic_steps: u64,
    pub generator_steps: u64,
    pub final_epsilon: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub ledger: RunLedger,
    pub model: GanModel,
    pub meta: RunMeta,
}

/// Images per generator forward pass during evaluation.
const EVAL_CHUNK: usize = 256;

/// `n` images from the fixed evaluation latents of `seed`.
pub fn generate_eval_images(model: &GanModel, seed: u64, n: usize) -> Result<Tensor, GanError> {
    let d = model.arch.latent_dim;
    let z = rng::standard_normals(&mut rng::stream_rng(seed, stream::EVAL_LATENT, 0), n * d);
    let side = model.arch.image_side;
    let mut pixels = Vec::with_capacity(n * side * side);
    for start in (0..n).step_by(EVAL_CHUNK) {
        let k = EVAL_CHUNK.min(n - start);
        let chunk = Tensor::new(vec![k, d], z[start * d..(start + k) * d].to_vec())?;
        pixels.extend_from_slice(model.generate(&chunk)?.data());
    }
    Ok(Tensor::new(vec![n, 1, side, side], pixels)?)
}

pub fn evaluate_generator(
    model: &GanModel,
    classifier: &dyn ProbabilisticClassifier,
    seed: u64,
    samples: usize,
    splits: usize,
) -> Result<IsResult, HarnessError> {
    let images = generate_eval_images(model, seed, samples)?;
    Ok(classifier.score_images(&images, splits)?)
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn adam(params: &crate::grad_engine::ParamSet, lr: f64) -> Result<Optimizer, DpError> {
    Ok(Optimizer::Adam(AdamState::new(params, AdamConfig { lr, ..AdamConfig::default() })?))
}

/// Trains one DP-WGAN-GP run and writes `ledger.csv`, `config.txt`,
/// `run.json` and checkpoints under `config.out`. A ledger row is written
/// at step 0 and every `eval_every` critic steps, plus one for the final
/// step. On failure the rows so far stay on disk and `run.json` records the
/// error.
pub fn run_experiment(
    config: &RunConfig,
    classifier: Option<&dyn ProbabilisticClassifier>,
    defaulted_keys: &[String],
) -> Result<RunOutcome, HarnessError> {
    config.validate()?;
    let arch = config.architecture().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let images = config.dataset().load(true)?.images();

    let out = &config.out;
    fs::create_dir_all(out.join("checkpoints")).map_err(io_err(out))?;
    fs::write(out.join(CONFIG_FILE), config.to_text()).map_err(io_err(out))?;
    let mut ledger = LedgerWriter::create(&out.join(LEDGER_FILE))?;

    let model = build_models(arch.capacity, arch.latent_dim, arch.image_side, config.seed)?;
    let privacy = PrivacyParams::new(
        config.clip,
        config.noise_multiplier,
        config.batch_size,
        images.len(),
        config.delta,
    )?;
    let mut trainer = Trainer {
        gp: GpConfig {
            lambda: config.lambda_gp,
            n_critic: config.n_critic,
            lr: config.lr,
            batch_size: config.batch_size,
            objective: config.objective,
        },
        sampler: LatentSampler::new(config.seed, arch.latent_dim),
        sampling: config.sampling,
        seed: config.seed,
        private: PrivateCritic {
            privacy,
            noise: GaussianNoise::new(config.seed),
            optimizer: adam(&model.critic, config.lr)?,
            accountant: PrivacyAccountant::new(),
        },
        generator_optimizer: adam(&model.generator, config.lr)?,
        critic_steps: 0,
        generator_steps: 0,
        model,
    };
    trainer.gp.validate()?;

    let mut meta = RunMeta {
        config: config.clone(),
        architecture: arch,
        dataset_size: images.len(),
        defaulted_keys: defaulted_keys.to_vec(),
        status: RunStatus::Completed,
        critic_steps: 0,
        generator_steps: 0,
        final_epsilon: None,
    };
    let started = Instant::now();
    let result = train_loop(config, classifier, &images, &mut trainer, &mut ledger, started);
    meta.critic_steps = trainer.critic_steps;
    meta.generator_steps = trainer.generator_steps;
    meta.final_epsilon = trainer.accountant_state().epsilon;
    if let Err(e) = &result {
        meta.status = RunStatus::Failed(e.to_string());
    }
    write_json(&out.join(RUN_META_FILE), &meta)?;
    result?;
    trainer
        .model
        .save(&out.join(FINAL_CHECKPOINT), &trainer.checkpoint_meta())?;
    Ok(RunOutcome {
        ledger: ledger.ledger,
        model: trainer.model,
        meta,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value).expect("plain data serializes");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn train_loop(
    config: &RunConfig,
    classifier: Option<&dyn ProbabilisticClassifier>,
    images: &[Tensor],
    trainer: &mut Trainer,
    ledger: &mut LedgerWriter,
    started: Instant,
) -> Result<(), HarnessError> {
    let (mut critic_losses, mut gen_losses) = (Vec::new(), Vec::new());
    let mut record = |trainer: &Trainer, critic: &mut Vec<f64>, gen: &mut Vec<f64>| -> Result<(), HarnessError> {
        let eps = trainer.private.accountant.epsilon(config.delta)?;
        let bounded = eps.is_bounded();
        let is = classifier
            .map(|c| evaluate_generator(&trainer.model, c, config.seed, config.eval_samples, config.splits))
            .transpose()?;
        ledger.push(LedgerRow {
            step: trainer.critic_steps,
            alpha_star: bounded.then_some(eps.alpha_star),
            rdp_eps: bounded.then_some(eps.rdp_epsilon),
            epsilon: eps.epsilon,
            delta: eps.delta,
            critic_loss: mean(critic),
            gen_loss: mean(gen),
            is_mean: is.as_ref().map(|r| r.score),
            is_std: is.as_ref().map(|r| r.std),
            wall_s: config.wall_time.then(|| started.elapsed().as_secs_f64()),
        })?;
        critic.clear();
        gen.clear();
        let step = trainer.critic_steps;
        let path = config.out.join("checkpoints").join(format!("step_{step:08}.ckpt"));
        trainer.model.save(&path, &trainer.checkpoint_meta())?;
        Ok(())
    };

    record(trainer, &mut critic_losses, &mut gen_losses)?;
    while trainer.critic_steps < config.steps {
        let report = match trainer.critic_step(images) {
            Err(GanError::Dp(DpError::NonFinite { index })) => {
                return Err(HarnessError::NonFinite {
                    step: trainer.critic_steps + 1,
                    what: format!("per-example gradient {index}"),
                })
            }
            r => r?,
        };
        let step = trainer.critic_steps;
        if let Some(loss) = report.loss {
            if !loss.is_finite() {
                return Err(HarnessError::NonFinite {
                    step,
                    what: "critic loss".into(),
                });
            }
            critic_losses.push(loss);
        }
        if !trainer.model.critic.flatten().iter().all(|v| v.is_finite()) {
            return Err(HarnessError::NonFinite {
                step,
                what: "critic parameters".into(),
            });
        }
        if step % config.n_critic as u64 == 0 {
            let loss = trainer.generator_step()?;
            if !loss.is_finite() {
                return Err(HarnessError::NonFinite {
                    step,
                    what: "generator loss".into(),
                });
            }
            gen_losses.push(loss);
        }
        if step % config.eval_every == 0 || step == config.steps {
            record(trainer, &mut critic_losses, &mut gen_losses)?;
        }
    }
    Ok(())
}

/// Grid of a sweep. Every (clip, sigma, capacity) combination runs, plus a
/// non-private baseline (sigma 0, unbounded clip) per capacity if asked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub clips: Vec<f64>,
    pub noise_multipliers: Vec<f64>,
    pub capacities: Vec<usize>,
    pub baseline: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub clip: f64,
    pub noise_multiplier: f64,
    pub capacity: usize,
    pub out: PathBuf,
    /// `None` on success.
    pub error: Option<String>,
    pub ledger: RunLedger,
}

impl SweepGrid {
    /// Run configs under `base.out`, one subdirectory each.
    pub fn configs(&self, base: &RunConfig) -> Vec<RunConfig> {
        let mut out = Vec::new();
        let mut push = |clip: f64, sigma: f64, capacity: usize, name: String| {
            let mut c = base.clone();
            c.clip = clip;
            c.noise_multiplier = sigma;
            c.capacity = capacity;
            c.out = base.out.join(name);
            out.push(c);
        };
        for &capacity in &self.capacities {
            for &clip in &self.clips {
                for &sigma in &self.noise_multipliers {
                    push(clip, sigma, capacity, format!("clip{}_sigma{}_cap{capacity}", fmt_f64(clip), fmt_f64(sigma)));
                }
            }
            if self.baseline {
                push(f64::INFINITY, 0.0, capacity, format!("baseline_cap{capacity}"));
            }
        }
        out
    }
}

/// Runs every config of `grid` in turn. A failing config is recorded and
/// the sweep moves on. Writes `sweep.csv` (all ledger rows, keyed by clip,
/// sigma and capacity) and `sweep.json` under `base.out`. Sweeps are not
/// privacy-accounted: the ledgers bound each run alone.
pub fn sweep(
    base: &RunConfig,
    grid: &SweepGrid,
    classifier: Option<&dyn ProbabilisticClassifier>,
    defaulted_keys: &[String],
) -> Result<Vec<SweepEntry>, HarnessError> {
    fs::create_dir_all(&base.out).map_err(io_err(&base.out))?;
    let mut entries = Vec::new();
    for config in grid.configs(base) {
        let (ledger, error) = match run_experiment(&config, classifier, defaulted_keys) {
            Ok(outcome) => (outcome.ledger, None),
            Err(e) => {
                // Keep whatever rows were flushed before the failure.
                let partial = RunLedger::read(&config.out.join(LEDGER_FILE)).unwrap_or_default();
                (partial, Some(e.to_string()))
            }
        };
        entries.push(SweepEntry {
            clip: config.clip,
            noise_multiplier: config.noise_multiplier,
            capacity: config.capacity,
            out: config.out.clone(),
            error,
            ledger,
        });
    }
    let csv = combined_csv(&entries);
    let path = base.out.join("sweep.csv");
    fs::write(&path, csv).map_err(io_err(&path))?;
    write_json(&base.out.join("sweep.json"), &entries)?;
    Ok(entries)
}

pub fn combined_csv(entries: &[SweepEntry]) -> String {
    let mut s = format!("{SWEEP_HEADER_PREFIX},{LEDGER_HEADER}\n");
    for e in entries {
        for row in &e.ledger.rows {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                fmt_cell(e.clip),
                fmt_cell(e.noise_multiplier),
                e.capacity,
                row.to_csv()
            );
        }
    }
    s
}
