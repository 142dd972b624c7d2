//! The refinement loop.
//!
//! Per batch: draw pair indices, run both student heads, look up the frozen
//! teacher rows, draw one reference vector per pair from the prior, evaluate
//! the objective, backpropagate into both heads and update them jointly.

mod batches;
pub mod optim;

use std::time::Instant;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{self, BatchFeatures, LossConfig, LossError, Objective};
use crate::model::{HeadGrads, HeadPair, ModelError, TeacherBank};
use crate::priors::{self, PriorError, PriorSpec};
use crate::rng::{self, streams};
use crate::store::PairedDataset;

pub use batches::shuffle_batches;
pub use optim::{adamw_step, plain_step, AdamState, AdamWParams};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("dimension mismatch: heads have d={heads}, dataset has d={data}")]
    DimensionMismatch { heads: usize, data: usize },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Prior(#[from] PriorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[serde(alias = "adam_w")]
    Adamw,
    /// `θ ← θ − (η/2)·∇L` on each head.
    PlainSgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Fixed-order reductions. Every reduction in this crate is sequential, so
    /// runs are bit-reproducible either way; the flag is recorded for provenance.
    pub deterministic: bool,
    pub loss: LossConfig,
    pub prior: PriorSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            lr: 1.0e-6,
            epochs: 1,
            optimizer: OptimizerKind::Adamw,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            deterministic: true,
            loss: LossConfig::default(),
            prior: PriorSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, dim: usize) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(TrainError::InvalidConfig("weight_decay must be >= 0".into()));
        }
        self.loss.validate()?;
        self.prior.validate(dim)?;
        Ok(())
    }

    fn adamw(&self) -> AdamWParams {
        AdamWParams {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Loss terms of one optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub batch_size: usize,
    pub rafa: f64,
    pub hycd: f64,
    pub align: f64,
    pub contrastive: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub wall_time_secs: f64,
    pub image_head_crc32: u32,
    pub text_head_crc32: u32,
    pub seed: u64,
}

impl TrainReport {
    /// One JSON object per step, newline-terminated.
    pub fn steps_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("step records serialize"));
            out.push('\n');
        }
        out
    }
}

/// Objective value and head gradients for one batch.
pub struct BatchEval {
    pub objective: Objective,
    pub image_grads: HeadGrads,
    pub text_grads: HeadGrads,
}

/// Forward both heads on raw rows, evaluate the objective and backpropagate.
pub fn evaluate_batch(
    heads: &HeadPair,
    raw_img: &Array2<f64>,
    raw_txt: &Array2<f64>,
    teacher_img: &Array2<f64>,
    teacher_txt: &Array2<f64>,
    reference: &Array2<f64>,
    cfg: &LossConfig,
) -> Result<BatchEval, TrainError> {
    let ci = heads.image.forward_cached(raw_img.view())?;
    let ct = heads.text.forward_cached(raw_txt.view())?;
    let features = BatchFeatures {
        student_img: ci.out.view(),
        student_txt: ct.out.view(),
        teacher_img: teacher_img.view(),
        teacher_txt: teacher_txt.view(),
        reference: reference.view(),
        prenorm_img: Some(ci.residual.view()),
        prenorm_txt: Some(ct.residual.view()),
    };
    let objective = losses::objective(&features, cfg)?;
    let image_grads = heads.image.backward(
        &ci,
        objective.grad_img.view(),
        objective.grad_prenorm_img.as_ref().map(|g| g.view()),
    );
    let text_grads = heads.text.backward(
        &ct,
        objective.grad_txt.view(),
        objective.grad_prenorm_txt.as_ref().map(|g| g.view()),
    );
    Ok(BatchEval {
        objective,
        image_grads,
        text_grads,
    })
}

enum Updater {
    AdamW {
        hp: AdamWParams,
        image: Vec<AdamState>,
        text: Vec<AdamState>,
    },
    Plain {
        step: f64,
    },
}

impl Updater {
    fn new(cfg: &TrainConfig, heads: &HeadPair) -> Self {
        match cfg.optimizer {
            OptimizerKind::Adamw => Updater::AdamW {
                hp: cfg.adamw(),
                image: heads.image.slices().iter().map(|s| AdamState::new(s.len())).collect(),
                text: heads.text.slices().iter().map(|s| AdamState::new(s.len())).collect(),
            },
            OptimizerKind::PlainSgd => Updater::Plain { step: cfg.lr / 2.0 },
        }
    }

    fn apply(&mut self, heads: &mut HeadPair, eval: &BatchEval) {
        let ig = eval.image_grads.slices();
        let tg = eval.text_grads.slices();
        match self {
            Updater::AdamW { hp, image, text } => {
                for ((p, g), s) in heads.image.slices_mut().into_iter().zip(ig).zip(image.iter_mut()) {
                    adamw_step(p, g, s, hp);
                }
                for ((p, g), s) in heads.text.slices_mut().into_iter().zip(tg).zip(text.iter_mut()) {
                    adamw_step(p, g, s, hp);
                }
            }
            Updater::Plain { step } => {
                for (p, g) in heads.image.slices_mut().into_iter().zip(ig) {
                    plain_step(p, g, *step);
                }
                for (p, g) in heads.text.slices_mut().into_iter().zip(tg) {
                    plain_step(p, g, *step);
                }
            }
        }
    }
}

/// Runs `cfg.epochs` passes over `dataset`, updating both heads.
///
/// A degenerate objective (all loss weights zero) is evaluated and recorded
/// but never applied, so the heads come back bit-identical.
pub fn train(
    dataset: &PairedDataset,
    heads: HeadPair,
    cfg: &TrainConfig,
) -> Result<(HeadPair, TrainReport), TrainError> {
    let start = Instant::now();
    let dim = dataset.dim();
    if heads.image.dim() != dim || heads.text.dim() != dim {
        return Err(TrainError::DimensionMismatch {
            heads: heads.image.dim(),
            data: dim,
        });
    }
    cfg.validate(dim)?;

    let mut heads = heads;
    let teacher = TeacherBank::from_dataset(dataset)?;
    let raw_img = dataset.images().to_f64();
    let raw_txt = dataset.texts().to_f64();
    let mut prior_rng = rng::substream(cfg.seed, streams::PRIOR);
    let mut updater = Updater::new(cfg, &heads);
    let skip_updates = cfg.loss.is_degenerate();

    let mut steps = Vec::new();
    for epoch in 0..cfg.epochs {
        for batch in shuffle_batches(dataset.len(), cfg.batch_size, cfg.seed, epoch as u64) {
            let step = steps.len();
            let bi = raw_img.select(Axis(0), &batch);
            let bt = raw_txt.select(Axis(0), &batch);
            let (ti, tt) = teacher.gather(&batch);
            let reference = priors::sample(&cfg.prior, batch.len(), dim, &mut prior_rng)?;
            let eval = evaluate_batch(&heads, &bi, &bt, &ti, &tt, &reference, &cfg.loss)?;
            let o = &eval.objective;
            if !o.total.is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            steps.push(StepRecord {
                step,
                epoch,
                batch_size: batch.len(),
                rafa: o.components.rafa,
                hycd: o.components.hycd,
                align: o.components.align,
                contrastive: o.components.contrastive,
                total: o.total,
            });
            if !skip_updates {
                updater.apply(&mut heads, &eval);
            }
        }
    }

    let report = TrainReport {
        steps,
        wall_time_secs: start.elapsed().as_secs_f64(),
        image_head_crc32: heads.image.checksum(),
        text_head_crc32: heads.text.checksum(),
        seed: cfg.seed,
    };
    Ok((heads, report))
}
