//! Inception score of image sets under a small digit classifier.
//!
//! For a split of images with class distributions `P(k|x)` and within-split
//! marginal `P(k)`, the score is `exp(mean_x KL(P(k|x) || P(k)))` with
//! natural logarithms, so it lies in `[1, M]` for `M` classes.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::data::{LabeledImages, NUM_CLASSES};
use crate::dp_optim::{AdamConfig, AdamState, DpError};
use crate::grad_engine::{forward, value_and_grad, GradError, GradScope, Layer, LayerKind, Network, ParamSet, Tensor};
use crate::rng::{self, stream};

pub const DEFAULT_SPLITS: usize = 10;
/// Row-sum tolerance for class distributions.
pub const DISTRIBUTION_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("distributions have different lengths {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("infinite divergence: p[{index}] = {p} but q[{index}] = 0")]
    InfiniteDivergence { index: usize, p: f64 },
    #[error("not a probability distribution: {0}")]
    NotADistribution(String),
    #[error("{images} images are too few for {splits} splits over {classes} classes (need {required})")]
    TooFewImages {
        images: usize,
        splits: usize,
        classes: usize,
        required: usize,
    },
    #[error("class {class} has no training examples")]
    MissingClass { class: usize },
    #[error("invalid classifier configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// `sum_k p_k (ln p_k - ln q_k)` with `0 ln 0 = 0`. Rounding can push the
/// sum a few ulps below zero; such results are returned as 0.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64, EvalError> {
    if p.len() != q.len() {
        return Err(EvalError::LengthMismatch(p.len(), q.len()));
    }
    let mut total = 0.0;
    for (index, (&pk, &qk)) in p.iter().zip(q).enumerate() {
        if !(pk >= 0.0 && qk >= 0.0 && pk.is_finite() && qk.is_finite()) {
            return Err(EvalError::NotADistribution(format!("entry {index} is ({pk}, {qk})")));
        }
        if pk == 0.0 {
            continue;
        }
        if qk == 0.0 {
            return Err(EvalError::InfiniteDivergence { index, p: pk });
        }
        total += pk * (pk.ln() - qk.ln());
    }
    Ok(total.max(0.0))
}

/// Sums in sorted order so that permuting the inputs cannot change a bit.
fn order_free_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

/// Per-example class distributions, one row per image.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassProbabilities {
    pub classes: usize,
    /// Row-major `len() * classes` values.
    pub probs: Vec<f64>,
}

impl ClassProbabilities {
    /// Checks that every row is a distribution within [`DISTRIBUTION_TOL`].
    pub fn new(classes: usize, probs: Vec<f64>) -> Result<Self, EvalError> {
        if classes == 0 || probs.len() % classes != 0 {
            return Err(EvalError::NotADistribution(format!(
                "{} values do not form rows of {classes}",
                probs.len()
            )));
        }
        for (i, row) in probs.chunks(classes).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&v| !(v >= 0.0 && v.is_finite())) || (sum - 1.0).abs() > DISTRIBUTION_TOL {
                return Err(EvalError::NotADistribution(format!("row {i} = {row:?}")));
            }
        }
        Ok(Self { classes, probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len() / self.classes
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.classes..][..self.classes]
    }

    /// Mean of the rows in `start..end`, independent of row order.
    pub fn marginal(&self, start: usize, end: usize) -> Vec<f64> {
        let n = (end - start) as f64;
        (0..self.classes)
            .map(|k| order_free_sum((start..end).map(|i| self.row(i)[k]).collect()) / n)
            .collect()
    }

    pub fn argmax(&self, i: usize) -> usize {
        let row = self.row(i);
        (0..self.classes).fold(0, |best, k| if row[k] > row[best] { k } else { best })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsResult {
    /// Mean score over splits.
    pub score: f64,
    /// Population standard deviation over splits.
    pub std: f64,
    pub splits: usize,
    pub per_split: Vec<f64>,
}

/// Inception score over `splits` equal, consecutive splits. When the image
/// count is not a multiple of `splits`, the trailing remainder is left out.
pub fn inception_score(probs: &ClassProbabilities, splits: usize) -> Result<IsResult, EvalError> {
    let n = probs.len();
    let required = splits * probs.classes;
    if splits == 0 || n < required {
        return Err(EvalError::TooFewImages {
            images: n,
            splits,
            classes: probs.classes,
            required,
        });
    }
    let size = n / splits;
    let per_split = (0..splits)
        .map(|s| {
            let (start, end) = (s * size, (s + 1) * size);
            let marginal = probs.marginal(start, end);
            let kl = (start..end)
                .map(|i| kl_divergence(probs.row(i), &marginal))
                .collect::<Result<Vec<_>, _>>()?;
            Ok((order_free_sum(kl) / size as f64).exp())
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let score = per_split.iter().sum::<f64>() / splits as f64;
    let var = per_split.iter().map(|s| (s - score).powi(2)).sum::<f64>() / splits as f64;
    Ok(IsResult {
        score,
        std: var.sqrt(),
        splits,
        per_split,
    })
}

/// Anything that maps a batch of images to class distributions.
pub trait ProbabilisticClassifier {
    fn num_classes(&self) -> usize;

    /// `images` is `[n, 1, s, s]`.
    fn predict_proba(&self, images: &Tensor) -> Result<ClassProbabilities, EvalError>;

    fn score_images(&self, images: &Tensor, splits: usize) -> Result<IsResult, EvalError> {
        inception_score(&self.predict_proba(images)?, splits)
    }
}

fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / total));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Channels of the two convolutions.
    pub channels: (usize, usize),
    pub hidden: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 3,
            batch_size: 32,
            lr: 2e-3,
            channels: (16, 32),
            hidden: 64,
        }
    }
}

/// Two stride-2 convolutions and a two-layer dense head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub side: usize,
    pub classes: usize,
    pub channels: (usize, usize),
    pub hidden: usize,
}

impl ClassifierArch {
    pub fn network(&self) -> Network {
        let (c1, c2) = self.channels;
        let half = |s: usize| (s + 4 - 5) / 2 + 1;
        let last = half(half(self.side));
        let conv = |name: &str, ci, co| {
            Layer::new(
                name,
                LayerKind::Conv2d {
                    in_channels: ci,
                    out_channels: co,
                    kernel: 5,
                    stride: 2,
                    padding: 2,
                },
            )
        };
        let act = |name: &str| Layer::new(name, LayerKind::LeakyRelu { slope: 0.01 });
        Network::new(
            vec![1, self.side, self.side],
            vec![
                conv("conv1", 1, c1),
                act("act1"),
                conv("conv2", c1, c2),
                act("act2"),
                Layer::new("flatten", LayerKind::Flatten),
                Layer::new(
                    "dense",
                    LayerKind::Dense {
                        inputs: c2 * last * last,
                        outputs: self.hidden,
                    },
                ),
                act("act3"),
                Layer::new(
                    "logits",
                    LayerKind::Dense {
                        inputs: self.hidden,
                        outputs: self.classes,
                    },
                ),
            ],
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMeta {
    pub arch: ClassifierArch,
    pub config: ClassifierConfig,
    pub validation_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub arch: ClassifierArch,
    pub params: ParamSet,
    pub config: ClassifierConfig,
    /// Accuracy on the validation set passed to [`train_classifier`].
    pub validation_accuracy: f64,
}

/// Images per forward pass at inference time.
const INFERENCE_CHUNK: usize = 256;

impl Classifier {
    pub fn logits(&self, images: &Tensor) -> Result<Tensor, EvalError> {
        let net = self.arch.network();
        let n = images.shape()[0];
        let mut out = Vec::with_capacity(n * self.arch.classes);
        for start in (0..n).step_by(INFERENCE_CHUNK) {
            let chunk = images.rows(start, INFERENCE_CHUNK.min(n - start));
            out.extend_from_slice(forward(&self.params, &net, &chunk)?.data());
        }
        Ok(Tensor::new(vec![n, self.arch.classes], out)?)
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>, EvalError> {
        let p = self.predict_proba(images)?;
        Ok((0..p.len()).map(|i| p.argmax(i)).collect())
    }

    pub fn accuracy(&self, data: &LabeledImages) -> Result<f64, EvalError> {
        if data.is_empty() {
            return Err(EvalError::InvalidConfig("accuracy of an empty set".into()));
        }
        let all: Vec<usize> = (0..data.len()).collect();
        let predicted = self.predict(&data.batch(&all))?;
        let correct = predicted.iter().zip(&data.labels).filter(|(p, &l)| **p == l as usize).count();
        Ok(correct as f64 / data.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        checkpoint::save(path, &self.params)?;
        let meta = ClassifierMeta {
            arch: self.arch,
            config: self.config,
            validation_accuracy: self.validation_accuracy,
        };
        checkpoint::save_sidecar(path, &meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let meta: ClassifierMeta = checkpoint::load_sidecar(path)?;
        let params = checkpoint::load(path)?;
        meta.arch.network().check_params(&params)?;
        Ok(Self {
            arch: meta.arch,
            params,
            config: meta.config,
            validation_accuracy: meta.validation_accuracy,
        })
    }
}

impl ProbabilisticClassifier for Classifier {
    fn num_classes(&self) -> usize {
        self.arch.classes
    }

    fn predict_proba(&self, images: &Tensor) -> Result<ClassProbabilities, EvalError> {
        let logits = self.logits(images)?;
        ClassProbabilities::new(self.arch.classes, softmax_rows(logits.data(), self.arch.classes))
    }
}

/// Trains the classifier with Adam on softmax cross-entropy, reshuffling
/// the training set every epoch. Deterministic given `config.seed`.
pub fn train_classifier(
    train: &LabeledImages,
    validation: &LabeledImages,
    config: &ClassifierConfig,
) -> Result<Classifier, EvalError> {
    if config.epochs == 0 || config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(EvalError::InvalidConfig(format!("{config:?}")));
    }
    if train.side != validation.side {
        return Err(EvalError::InvalidConfig(format!(
            "train side {} differs from validation side {}",
            train.side, validation.side
        )));
    }
    let histogram = train.class_histogram();
    if let Some(class) = histogram.iter().position(|&c| c == 0) {
        return Err(EvalError::MissingClass { class });
    }
    let arch = ClassifierArch {
        side: train.side,
        classes: NUM_CLASSES,
        channels: config.channels,
        hidden: config.hidden,
    };
    let net = arch.network();
    let mut params = net.init_params(&mut rng::stream_rng(config.seed, stream::CLASSIFIER, 0));
    let mut adam = AdamState::new(
        &params,
        AdamConfig {
            lr: config.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            bias_correction: true,
        },
    )?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng::stream_rng(config.seed, stream::CLASSIFIER, epoch as u64 + 1));
        for idx in order.chunks(config.batch_size) {
            let x = train.batch(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i] as usize).collect();
            let (_, grad) = value_and_grad(&params, GradScope::BatchMean, |tape, bound| {
                let x = tape.leaf(x);
                let logits = net.apply(tape, bound, x)?;
                Ok(tape.softmax_cross_entropy(logits, &labels))
            })?;
            adam.step(&mut params, &grad)?;
        }
    }
    let mut classifier = Classifier {
        arch,
        params,
        config: *config,
        validation_accuracy: f64::NAN,
    };
    classifier.validation_accuracy = classifier.accuracy(validation)?;
    Ok(classifier)
}
