//! Feature-space diagnostics and zero-shot evaluation.
//!
//! All inputs are unit-norm feature matrices (one row per sample).

mod pca;

use std::collections::BTreeMap;

use ndarray::{concatenate, Array1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use pca::{pca_project, PcaProjection};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty feature set")]
    EmptySet,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label mismatch: {0}")]
    LabelMismatch(String),
    #[error("power iteration for component {component} did not converge in {iterations} iterations")]
    ConvergenceFailure { component: usize, iterations: usize },
    #[error("PCA needs at least 3 points, got {0}")]
    TooFewPoints(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub modality_gap: f64,
    pub alignment: f64,
    pub uniformity: f64,
    pub n_test: usize,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Text queries against an image gallery.
    T2I,
    /// Image queries against a text gallery.
    I2T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub recall_at: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub accuracy: f64,
    pub n: usize,
    pub num_classes: usize,
}

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

fn check_nonempty_pair(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<(), MetricsError> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(MetricsError::EmptySet);
    }
    if a.ncols() != b.ncols() {
        return Err(MetricsError::ShapeMismatch(format!("dim {} vs {}", a.ncols(), b.ncols())));
    }
    Ok(())
}

fn check_paired(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<(), MetricsError> {
    check_nonempty_pair(a, b)?;
    if a.nrows() != b.nrows() {
        return Err(MetricsError::ShapeMismatch(format!("{} vs {} rows", a.nrows(), b.nrows())));
    }
    Ok(())
}

fn mean_row(x: ArrayView2<f64>) -> Array1<f64> {
    x.sum_axis(Axis(0)) / x.nrows() as f64
}

/// `‖mean(img) − mean(txt)‖²`; the means are not re-normalized.
pub fn modality_gap(img: ArrayView2<f64>, txt: ArrayView2<f64>) -> Result<f64, MetricsError> {
    check_nonempty_pair(img, txt)?;
    let d = mean_row(img) - mean_row(txt);
    Ok(d.dot(&d))
}

/// Mean squared distance between paired rows.
pub fn alignment_score(img: ArrayView2<f64>, txt: ArrayView2<f64>) -> Result<f64, MetricsError> {
    check_paired(img, txt)?;
    let total: f64 = img
        .rows()
        .into_iter()
        .zip(txt.rows())
        .map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
        .sum();
    Ok(total / img.nrows() as f64)
}

/// `(1/2N) Σ_{f1,f2 ∈ F} exp(−2‖f1 − f2‖²)` over `F = img ∪ txt`.
///
/// The double sum runs over all ordered pairs of F, self-pairs included.
pub fn uniformity_score(img: ArrayView2<f64>, txt: ArrayView2<f64>) -> Result<f64, MetricsError> {
    check_paired(img, txt)?;
    let f = concatenate(Axis(0), &[img, txt]).expect("same width");
    let sq: Vec<f64> = f.rows().into_iter().map(|r| r.dot(&r)).collect();
    let gram = f.dot(&f.t());
    let m = f.nrows();
    let mut off = 0.0;
    for a in 0..m {
        for b in (a + 1)..m {
            let d2 = (sq[a] + sq[b] - 2.0 * gram[[a, b]]).max(0.0);
            off += (-2.0 * d2).exp();
        }
    }
    let total = m as f64 + 2.0 * off;
    Ok(total / img.nrows() as f64 / 2.0)
}

pub fn feature_metrics(img: ArrayView2<f64>, txt: ArrayView2<f64>) -> Result<MetricsReport, MetricsError> {
    Ok(MetricsReport {
        modality_gap: modality_gap(img, txt)?,
        alignment: alignment_score(img, txt)?,
        uniformity: uniformity_score(img, txt)?,
        n_test: img.nrows(),
        notes: Vec::new(),
    })
}

/// Fraction of queries whose true gallery item ranks within the top k.
///
/// Ranking is by dot product; ties go to the lower gallery index.
pub fn recall_at_k(
    queries: ArrayView2<f64>,
    gallery: ArrayView2<f64>,
    truth: &[usize],
    ks: &[usize],
    direction: Direction,
) -> Result<RetrievalReport, MetricsError> {
    check_nonempty_pair(queries, gallery)?;
    if truth.len() != queries.nrows() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} queries but {} ground-truth entries",
            queries.nrows(),
            truth.len()
        )));
    }
    if let Some(&bad) = truth.iter().find(|&&t| t >= gallery.nrows()) {
        return Err(MetricsError::ShapeMismatch(format!("ground truth {bad} outside gallery")));
    }
    let scores = queries.dot(&gallery.t());
    let ranks: Vec<usize> = truth
        .iter()
        .enumerate()
        .map(|(q, &t)| {
            let row = scores.row(q);
            let s = row[t];
            row.iter()
                .enumerate()
                .filter(|&(g, &v)| v > s || (v == s && g < t))
                .count()
        })
        .collect();
    let n = ranks.len() as f64;
    let recall_at = ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r < k).count() as f64 / n))
        .collect();
    Ok(RetrievalReport {
        direction,
        recall_at,
    })
}

/// Both retrieval directions for paired features (pair i is the truth for query i).
pub fn paired_retrieval(
    img: ArrayView2<f64>,
    txt: ArrayView2<f64>,
    ks: &[usize],
) -> Result<[RetrievalReport; 2], MetricsError> {
    check_paired(img, txt)?;
    let truth: Vec<usize> = (0..img.nrows()).collect();
    Ok([
        recall_at_k(txt, img, &truth, ks, Direction::T2I)?,
        recall_at_k(img, txt, &truth, ks, Direction::I2T)?,
    ])
}

/// Predicted class per image: argmax dot product, ties to the lower class index.
pub fn zeroshot_predict(img: ArrayView2<f64>, prompts: ArrayView2<f64>) -> Result<Vec<usize>, MetricsError> {
    check_nonempty_pair(img, prompts)?;
    let scores = img.dot(&prompts.t());
    Ok(scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Top-1 zero-shot accuracy of `img` against class prompt features.
pub fn zeroshot_classify(
    img: ArrayView2<f64>,
    prompts: ArrayView2<f64>,
    labels: &[usize],
) -> Result<ZeroShotReport, MetricsError> {
    if labels.len() != img.nrows() {
        return Err(MetricsError::LabelMismatch(format!(
            "{} images but {} labels",
            img.nrows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= prompts.nrows()) {
        return Err(MetricsError::LabelMismatch(format!(
            "label {bad} but only {} classes",
            prompts.nrows()
        )));
    }
    let pred = zeroshot_predict(img, prompts)?;
    let correct = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(ZeroShotReport {
        accuracy: correct as f64 / labels.len() as f64,
        n: labels.len(),
        num_classes: prompts.nrows(),
    })
}
