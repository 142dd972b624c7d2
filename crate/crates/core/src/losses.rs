//! Loss kernels on unit-normalized feature batches.
//!
//! Every kernel returns its value together with the gradient with respect to
//! the student image and text features. Teacher features and reference
//! vectors are constants: no gradient flows into them.
//!
//! Softmax rows are computed from max-shifted logits and log-probabilities are
//! taken directly from the shifted logits, never as `ln(softmax)`.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error("row {row} of distribution sums to {sum}")]
    NotRowStochastic { row: usize, sum: f64 },
}

/// Which objective the trainer optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Naive paired L2 alignment.
    Align,
    Rafa,
    /// Symmetric InfoNCE.
    Contrastive,
    /// HyCD with α = 0.
    SelfKd,
    Hycd,
    /// `λ_HyCD·HyCD + λ_RaFA·align` (the alignment term takes the RaFA weight).
    HycdPlusAlign,
    /// `λ_RaFA·RaFA + λ_HyCD·HyCD`.
    ClipRefine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub alpha: f64,
    pub lambda_rafa: f64,
    pub lambda_hycd: f64,
    pub mode: LossMode,
    /// Apply RaFA to the residual before the final normalization.
    pub rafa_prenorm: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.01,
            alpha: 0.5,
            lambda_rafa: 1.0,
            lambda_hycd: 1.0,
            mode: LossMode::ClipRefine,
            rafa_prenorm: false,
        }
    }
}

impl LossConfig {
    pub fn with_mode(mode: LossMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LossError::InvalidConfig(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(LossError::InvalidConfig(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        for (name, v) in [("lambda_rafa", self.lambda_rafa), ("lambda_hycd", self.lambda_hycd)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LossError::InvalidConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// True when the weighted objective is identically zero.
    pub fn is_degenerate(&self) -> bool {
        matches!(self.mode, LossMode::ClipRefine | LossMode::HycdPlusAlign)
            && self.lambda_rafa == 0.0
            && self.lambda_hycd == 0.0
    }

    pub fn uses_rafa(&self) -> bool {
        match self.mode {
            LossMode::Rafa => true,
            LossMode::ClipRefine => self.lambda_rafa != 0.0,
            _ => false,
        }
    }
}

/// B×B row-stochastic matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchDistribution(Array2<f64>);

impl BatchDistribution {
    pub const ROW_SUM_TOL: f64 = 1e-9;

    pub fn new(m: Array2<f64>) -> Result<Self, LossError> {
        if m.nrows() != m.ncols() {
            return Err(LossError::ShapeMismatch(format!("distribution is {:?}", m.dim())));
        }
        for (row, r) in m.rows().into_iter().enumerate() {
            let sum = r.sum();
            if r.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > Self::ROW_SUM_TOL {
                return Err(LossError::NotRowStochastic { row, sum });
            }
        }
        Ok(Self(m))
    }

    pub fn identity(b: usize) -> Self {
        Self(Array2::eye(b))
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> Array2<f64> {
        self.0
    }

    pub fn batch_size(&self) -> usize {
        self.0.nrows()
    }
}

/// Value and gradients with respect to the student image/text features.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGrad {
    pub value: f64,
    pub grad_img: Array2<f64>,
    pub grad_txt: Array2<f64>,
}

fn check_pair(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<(), LossError> {
    if a.dim() != b.dim() {
        return Err(LossError::ShapeMismatch(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.nrows() == 0 {
        return Err(LossError::ShapeMismatch("empty batch".into()));
    }
    Ok(())
}

/// Mean squared distance between paired features.
pub fn align_loss(z_img: ArrayView2<f64>, z_txt: ArrayView2<f64>) -> Result<PairGrad, LossError> {
    check_pair(z_img, z_txt)?;
    let b = z_img.nrows() as f64;
    let diff = &z_img - &z_txt;
    let value = diff.iter().map(|v| v * v).sum::<f64>() / b;
    let grad_img = &diff * (2.0 / b);
    let grad_txt = -&grad_img;
    Ok(PairGrad {
        value,
        grad_img,
        grad_txt,
    })
}

/// Mean over pairs of `½(‖z_img − z_ref‖² + ‖z_txt − z_ref‖²)`; row i of `z_ref` is shared by pair i.
pub fn rafa_loss(
    z_img: ArrayView2<f64>,
    z_txt: ArrayView2<f64>,
    z_ref: ArrayView2<f64>,
) -> Result<PairGrad, LossError> {
    check_pair(z_img, z_txt)?;
    check_pair(z_img, z_ref)?;
    let b = z_img.nrows() as f64;
    let di = &z_img - &z_ref;
    let dt = &z_txt - &z_ref;
    let sq = |m: &Array2<f64>| m.iter().map(|v| v * v).sum::<f64>();
    let value = 0.5 * (sq(&di) + sq(&dt)) / b;
    Ok(PairGrad {
        value,
        grad_img: di / b,
        grad_txt: dt / b,
    })
}

/// Row-wise log-softmax of `logits` from max-shifted values.
pub fn log_softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| v - max);
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn similarity_logits(za: ArrayView2<f64>, zb: ArrayView2<f64>, tau: f64) -> Array2<f64> {
    za.dot(&zb.t()) / tau
}

/// Row i is the softmax over j of `za_i · zb_j / τ`.
pub fn similarity_softmax(
    za: ArrayView2<f64>,
    zb: ArrayView2<f64>,
    tau: f64,
) -> Result<BatchDistribution, LossError> {
    check_pair(za, zb)?;
    if !(tau > 0.0) {
        return Err(LossError::InvalidConfig(format!("tau must be > 0, got {tau}")));
    }
    let logp = log_softmax_rows(similarity_logits(za, zb, tau).view());
    Ok(BatchDistribution(logp.mapv(f64::exp)))
}

/// `α·I + (1 − α)·q`.
pub fn hybrid_teacher(q: &BatchDistribution, alpha: f64) -> BatchDistribution {
    let mut m = q.0.mapv(|v| (1.0 - alpha) * v);
    for i in 0..m.nrows() {
        m[[i, i]] += alpha;
    }
    BatchDistribution(m)
}

/// `(1/B) Σ_i Σ_j t_ij ln(t_ij / s_ij)` with `0·ln 0 = 0`.
pub fn kd_kl(target: &BatchDistribution, student: &BatchDistribution) -> f64 {
    let b = target.batch_size() as f64;
    target
        .0
        .iter()
        .zip(student.0.iter())
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, s)| t * (t.ln() - s.ln()))
        .sum::<f64>()
        / b
}

/// KL of `target` against the row-softmax of `logits`, with the gradient on the logits.
#[derive(Debug, Clone)]
pub struct KlGrad {
    pub value: f64,
    pub grad_logits: Array2<f64>,
}

/// `target` rows must sum to 1; the gradient is `(softmax(logits) − target)/B`.
pub fn kd_kl_from_logits(target: &Array2<f64>, logits: ArrayView2<f64>) -> KlGrad {
    let b = logits.nrows() as f64;
    let logp = log_softmax_rows(logits);
    let mut value = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    for i in 0..logp.nrows() {
        for j in 0..logp.ncols() {
            let t = target[[i, j]];
            if t > 0.0 {
                value += t * (t.ln() - logp[[i, j]]);
            }
            grad[[i, j]] = (logp[[i, j]].exp() - t) / b;
        }
    }
    KlGrad {
        value: value / b,
        grad_logits: grad,
    }
}

/// Symmetric KD on the I→T logits `S` and T→I logits `Sᵀ`.
///
/// Returns `½(KL(t_it ‖ softmax(S)) + KL(t_ti ‖ softmax(Sᵀ)))` and its gradient on `S`.
pub fn symmetric_kd_on_logits(
    logits: ArrayView2<f64>,
    target_i2t: &Array2<f64>,
    target_t2i: &Array2<f64>,
) -> KlGrad {
    let i2t = kd_kl_from_logits(target_i2t, logits);
    let t2i = kd_kl_from_logits(target_t2i, logits.t());
    let grad_logits = (&i2t.grad_logits + &t2i.grad_logits.t()) * 0.5;
    KlGrad {
        value: 0.5 * (i2t.value + t2i.value),
        grad_logits,
    }
}

/// Pushes a gradient on `S = z_img·z_txtᵀ / τ` back to the features.
fn logits_to_features(
    grad_logits: &Array2<f64>,
    z_img: ArrayView2<f64>,
    z_txt: ArrayView2<f64>,
    tau: f64,
) -> (Array2<f64>, Array2<f64>) {
    let grad_img = grad_logits.dot(&z_txt) / tau;
    let grad_txt = grad_logits.t().dot(&z_img) / tau;
    (grad_img, grad_txt)
}

/// Hybrid contrastive-distillation loss.
///
/// Teacher rows `q` come from the frozen features at the same `τ`, are blended
/// with the identity by `α`, and are distilled into the student in both
/// retrieval directions.
pub fn hycd_loss(
    z_img: ArrayView2<f64>,
    z_txt: ArrayView2<f64>,
    teacher_img: ArrayView2<f64>,
    teacher_txt: ArrayView2<f64>,
    cfg: &LossConfig,
) -> Result<PairGrad, LossError> {
    check_pair(z_img, z_txt)?;
    check_pair(z_img, teacher_img)?;
    check_pair(z_img, teacher_txt)?;
    cfg.validate()?;
    // Both teacher directions come from one logit matrix, mirroring the student
    // path below, so a student equal to its teacher gets exactly zero gradient.
    let teacher_logits = similarity_logits(teacher_img, teacher_txt, cfg.tau);
    let q_i2t = BatchDistribution(log_softmax_rows(teacher_logits.view()).mapv(f64::exp));
    let q_t2i = BatchDistribution(log_softmax_rows(teacher_logits.t()).mapv(f64::exp));
    let t_i2t = hybrid_teacher(&q_i2t, cfg.alpha);
    let t_t2i = hybrid_teacher(&q_t2i, cfg.alpha);
    let logits = similarity_logits(z_img, z_txt, cfg.tau);
    let kd = symmetric_kd_on_logits(logits.view(), &t_i2t.0, &t_t2i.0);
    let (grad_img, grad_txt) = logits_to_features(&kd.grad_logits, z_img, z_txt, cfg.tau);
    Ok(PairGrad {
        value: kd.value,
        grad_img,
        grad_txt,
    })
}

/// Pure distillation from the frozen teacher: [`hycd_loss`] with `α = 0`.
pub fn self_kd_loss(
    z_img: ArrayView2<f64>,
    z_txt: ArrayView2<f64>,
    teacher_img: ArrayView2<f64>,
    teacher_txt: ArrayView2<f64>,
    tau: f64,
) -> Result<PairGrad, LossError> {
    let cfg = LossConfig {
        tau,
        alpha: 0.0,
        ..LossConfig::default()
    };
    hycd_loss(z_img, z_txt, teacher_img, teacher_txt, &cfg)
}

/// Symmetric InfoNCE: `½[mean_i −ln p^{I→T}_ii + mean_i −ln p^{T→I}_ii]`.
pub fn contrastive_loss(
    z_img: ArrayView2<f64>,
    z_txt: ArrayView2<f64>,
    tau: f64,
) -> Result<PairGrad, LossError> {
    check_pair(z_img, z_txt)?;
    if !(tau > 0.0) {
        return Err(LossError::InvalidConfig(format!("tau must be > 0, got {tau}")));
    }
    let b = z_img.nrows();
    let logits = similarity_logits(z_img, z_txt, tau);
    let eye = Array2::eye(b);
    let kd = symmetric_kd_on_logits(logits.view(), &eye, &eye);
    let (grad_img, grad_txt) = logits_to_features(&kd.grad_logits, z_img, z_txt, tau);
    Ok(PairGrad {
        value: kd.value,
        grad_img,
        grad_txt,
    })
}

/// Everything one objective evaluation needs for a batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchFeatures<'a> {
    pub student_img: ArrayView2<'a, f64>,
    pub student_txt: ArrayView2<'a, f64>,
    pub teacher_img: ArrayView2<'a, f64>,
    pub teacher_txt: ArrayView2<'a, f64>,
    pub reference: ArrayView2<'a, f64>,
    /// Pre-normalization residuals, used by RaFA when `rafa_prenorm` is set.
    pub prenorm_img: Option<ArrayView2<'a, f64>>,
    pub prenorm_txt: Option<ArrayView2<'a, f64>>,
}

/// Per-term values (unweighted); zero for terms the mode does not use.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub rafa: f64,
    pub hycd: f64,
    pub align: f64,
    pub contrastive: f64,
}

#[derive(Debug, Clone)]
pub struct Objective {
    pub total: f64,
    pub components: LossComponents,
    pub grad_img: Array2<f64>,
    pub grad_txt: Array2<f64>,
    /// Gradients on the pre-normalization residuals (pre-norm RaFA only).
    pub grad_prenorm_img: Option<Array2<f64>>,
    pub grad_prenorm_txt: Option<Array2<f64>>,
}

impl Objective {
    fn zeros_like(f: &BatchFeatures) -> Self {
        Self {
            total: 0.0,
            components: LossComponents::default(),
            grad_img: Array2::zeros(f.student_img.raw_dim()),
            grad_txt: Array2::zeros(f.student_txt.raw_dim()),
            grad_prenorm_img: None,
            grad_prenorm_txt: None,
        }
    }

    fn add(&mut self, weight: f64, part: &PairGrad) {
        self.total += weight * part.value;
        self.grad_img.scaled_add(weight, &part.grad_img);
        self.grad_txt.scaled_add(weight, &part.grad_txt);
    }
}

fn add_rafa(obj: &mut Objective, f: &BatchFeatures, cfg: &LossConfig, weight: f64) -> Result<(), LossError> {
    if cfg.rafa_prenorm {
        let (Some(pi), Some(pt)) = (f.prenorm_img, f.prenorm_txt) else {
            return Err(LossError::InvalidConfig(
                "rafa_prenorm needs pre-normalization features".into(),
            ));
        };
        let part = rafa_loss(pi, pt, f.reference)?;
        obj.total += weight * part.value;
        obj.components.rafa = part.value;
        obj.grad_prenorm_img = Some(part.grad_img * weight);
        obj.grad_prenorm_txt = Some(part.grad_txt * weight);
    } else {
        let part = rafa_loss(f.student_img, f.student_txt, f.reference)?;
        obj.components.rafa = part.value;
        obj.add(weight, &part);
    }
    Ok(())
}

/// `λ_RaFA·L_RaFA + λ_HyCD·L_HyCD`.
pub fn clip_refine_objective(f: &BatchFeatures, cfg: &LossConfig) -> Result<Objective, LossError> {
    cfg.validate()?;
    let mut obj = Objective::zeros_like(f);
    add_rafa(&mut obj, f, cfg, cfg.lambda_rafa)?;
    let hycd = hycd_loss(f.student_img, f.student_txt, f.teacher_img, f.teacher_txt, cfg)?;
    obj.components.hycd = hycd.value;
    obj.add(cfg.lambda_hycd, &hycd);
    Ok(obj)
}

/// Evaluates the objective selected by `cfg.mode`.
pub fn objective(f: &BatchFeatures, cfg: &LossConfig) -> Result<Objective, LossError> {
    cfg.validate()?;
    let mut obj = Objective::zeros_like(f);
    match cfg.mode {
        LossMode::ClipRefine => return clip_refine_objective(f, cfg),
        LossMode::Align => {
            let p = align_loss(f.student_img, f.student_txt)?;
            obj.components.align = p.value;
            obj.add(1.0, &p);
        }
        LossMode::Rafa => add_rafa(&mut obj, f, cfg, 1.0)?,
        LossMode::Contrastive => {
            let p = contrastive_loss(f.student_img, f.student_txt, cfg.tau)?;
            obj.components.contrastive = p.value;
            obj.add(1.0, &p);
        }
        LossMode::SelfKd => {
            let p = self_kd_loss(f.student_img, f.student_txt, f.teacher_img, f.teacher_txt, cfg.tau)?;
            obj.components.hycd = p.value;
            obj.add(1.0, &p);
        }
        LossMode::Hycd => {
            let p = hycd_loss(f.student_img, f.student_txt, f.teacher_img, f.teacher_txt, cfg)?;
            obj.components.hycd = p.value;
            obj.add(1.0, &p);
        }
        LossMode::HycdPlusAlign => {
            let h = hycd_loss(f.student_img, f.student_txt, f.teacher_img, f.teacher_txt, cfg)?;
            obj.components.hycd = h.value;
            obj.add(cfg.lambda_hycd, &h);
            let a = align_loss(f.student_img, f.student_txt)?;
            obj.components.align = a.value;
            obj.add(cfg.lambda_rafa, &a);
        }
    }
    Ok(obj)
}
