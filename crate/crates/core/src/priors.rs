//! Reference-vector priors for RaFA.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{normalize_rows, ModelError};
use crate::store::EmbeddingTable;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("gaussian_moments prior needs mu and sigma of dimension {dim}")]
    MissingMoments { dim: usize },
    #[error("scaled_gaussian prior needs beta >= 0, got {0:?}")]
    NegativeBeta(Option<f64>),
    #[error("sigma must be nonnegative and finite (coordinate {0})")]
    InvalidSigma(usize),
    #[error("moment fitting needs at least 2 rows, got {0}")]
    InsufficientData(usize),
    #[error("tables disagree on dimension: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    /// N(0, I)
    StandardGaussian,
    /// U(0, 1) per coordinate
    Uniform01,
    /// N(μ, diag(σ²))
    GaussianMoments,
    /// N(0, βI)
    ScaledGaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub kind: PriorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self::standard_gaussian()
    }
}

impl PriorSpec {
    fn of(kind: PriorKind) -> Self {
        Self {
            kind,
            mu: None,
            sigma: None,
            beta: None,
        }
    }

    pub fn standard_gaussian() -> Self {
        Self::of(PriorKind::StandardGaussian)
    }

    pub fn uniform01() -> Self {
        Self::of(PriorKind::Uniform01)
    }

    pub fn scaled_gaussian(beta: f64) -> Self {
        Self {
            beta: Some(beta),
            ..Self::of(PriorKind::ScaledGaussian)
        }
    }

    pub fn gaussian_moments(moments: Moments) -> Self {
        Self {
            mu: Some(moments.mu.to_vec()),
            sigma: Some(moments.sigma.to_vec()),
            ..Self::of(PriorKind::GaussianMoments)
        }
    }

    pub fn validate(&self, dim: usize) -> Result<(), PriorError> {
        match self.kind {
            PriorKind::GaussianMoments => {
                let (Some(mu), Some(sigma)) = (&self.mu, &self.sigma) else {
                    return Err(PriorError::MissingMoments { dim });
                };
                if mu.len() != dim || sigma.len() != dim {
                    return Err(PriorError::MissingMoments { dim });
                }
                if let Some(k) = sigma.iter().position(|s| !(*s >= 0.0 && s.is_finite())) {
                    return Err(PriorError::InvalidSigma(k));
                }
            }
            PriorKind::ScaledGaussian => match self.beta {
                Some(b) if b >= 0.0 && b.is_finite() => {}
                other => return Err(PriorError::NegativeBeta(other)),
            },
            PriorKind::StandardGaussian | PriorKind::Uniform01 => {}
        }
        Ok(())
    }
}

/// Draws a fresh `rows × dim` matrix of reference vectors.
pub fn sample<R: Rng + ?Sized>(
    spec: &PriorSpec,
    rows: usize,
    dim: usize,
    rng: &mut R,
) -> Result<Array2<f64>, PriorError> {
    spec.validate(dim)?;
    let out = match spec.kind {
        PriorKind::StandardGaussian => {
            Array2::from_shape_simple_fn((rows, dim), || StandardNormal.sample(&mut *rng))
        }
        PriorKind::Uniform01 => Array2::from_shape_simple_fn((rows, dim), || rng.random::<f64>()),
        PriorKind::GaussianMoments => {
            let mu = spec.mu.as_ref().unwrap();
            let sigma = spec.sigma.as_ref().unwrap();
            Array2::from_shape_fn((rows, dim), |(_, j)| {
                let g: f64 = StandardNormal.sample(&mut *rng);
                mu[j] + sigma[j] * g
            })
        }
        PriorKind::ScaledGaussian => {
            let beta = spec.beta.unwrap();
            if beta == 0.0 {
                Array2::zeros((rows, dim))
            } else {
                let scale = beta.sqrt();
                Array2::from_shape_simple_fn((rows, dim), || {
                    let g: f64 = StandardNormal.sample(&mut *rng);
                    scale * g
                })
            }
        }
    };
    Ok(out)
}

/// Per-coordinate mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mu: Array1<f64>,
    pub sigma: Array1<f64>,
}

/// Fits moments over the union of `tables`, optionally on L2-normalized rows.
pub fn fit_moments(tables: &[&EmbeddingTable], normalize: bool) -> Result<Moments, PriorError> {
    let Some(first) = tables.first() else {
        return Err(PriorError::InsufficientData(0));
    };
    let dim = first.dim();
    let mut n = 0usize;
    let mut sum = Array1::<f64>::zeros(dim);
    let mut blocks = Vec::with_capacity(tables.len());
    for t in tables {
        if t.dim() != dim {
            return Err(PriorError::DimensionMismatch(dim, t.dim()));
        }
        let x = if normalize {
            normalize_rows(t.to_f64().view())?.0
        } else {
            t.to_f64()
        };
        for row in x.rows() {
            sum += &row;
        }
        n += x.nrows();
        blocks.push(x);
    }
    if n < 2 {
        return Err(PriorError::InsufficientData(n));
    }
    let mu = sum / n as f64;
    let mut var = Array1::<f64>::zeros(dim);
    for x in &blocks {
        for row in x.rows() {
            let d = &row - &mu;
            var += &(&d * &d);
        }
    }
    let sigma = (var / n as f64).mapv(f64::sqrt);
    Ok(Moments { mu, sigma })
}
