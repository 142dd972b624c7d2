//! Seeded synthetic paired embeddings with a controllable modality gap.
//!
//! Pair i shares a unit latent `l_i`. The views are
//! `normalize(l_i + gap·e_img + noise·ε)` and `normalize(l_i + gap·e_txt + noise·ε')`
//! with `e_img = e_0`, `e_txt = e_1` and ε, ε' standard Gaussian.
//!
//! With `classes > 0` the latents cluster around one random center per class
//! (pair i belongs to class `i mod classes`) and class prompts are the text-side
//! view of each center.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::{self, streams};
use crate::store::{ClassPromptTable, EmbeddingTable, PairedDataset, StoreError};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    pub dim: usize,
    pub gap: f64,
    pub noise: f64,
    pub seed: u64,
    pub classes: usize,
    /// Spread of latents around their class center.
    pub class_spread: f64,
    pub train_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            dim: 32,
            gap: 0.5,
            noise: 0.1,
            seed: 0,
            classes: 0,
            class_spread: 0.5,
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthSplit {
    pub pairs: PairedDataset,
    /// Class index per pair, when classes were requested.
    pub labels: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub train: SynthSplit,
    pub test: SynthSplit,
    pub prompts: Option<ClassPromptTable>,
}

fn gaussian<R: Rng>(rng: &mut R, d: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(d, || StandardNormal.sample(&mut *rng))
}

fn normalized(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    v / n
}

/// Generates the full dataset and splits it: the first `train_fraction·n` pairs train, the rest test.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData, StoreError> {
    assert!(cfg.n >= 4, "synthetic data needs n >= 4");
    assert!(cfg.dim >= 2, "synthetic data needs d >= 2");
    let d = cfg.dim;
    let mut rng = rng::substream(cfg.seed, streams::SYNTH);
    let mut e_img = Array1::zeros(d);
    e_img[0] = 1.0;
    let mut e_txt = Array1::zeros(d);
    e_txt[1] = 1.0;

    let centers: Vec<Array1<f64>> = (0..cfg.classes).map(|_| normalized(gaussian(&mut rng, d))).collect();
    let mut img = Array2::zeros((cfg.n, d));
    let mut txt = Array2::zeros((cfg.n, d));
    for i in 0..cfg.n {
        let latent = if centers.is_empty() {
            normalized(gaussian(&mut rng, d))
        } else {
            let c = &centers[i % centers.len()];
            let jitter = gaussian(&mut rng, d) * (cfg.class_spread / (d as f64).sqrt());
            normalized(c + &jitter)
        };
        let vi = &latent + &(&e_img * cfg.gap) + &(gaussian(&mut rng, d) * cfg.noise);
        let vt = &latent + &(&e_txt * cfg.gap) + &(gaussian(&mut rng, d) * cfg.noise);
        img.row_mut(i).assign(&normalized(vi));
        txt.row_mut(i).assign(&normalized(vt));
    }

    let n_train = ((cfg.n as f64) * cfg.train_fraction).round() as usize;
    let n_train = n_train.clamp(1, cfg.n - 1);
    let labels: Option<Vec<usize>> = (!centers.is_empty()).then(|| (0..cfg.n).map(|i| i % centers.len()).collect());
    let split = |range: std::ops::Range<usize>| -> Result<SynthSplit, StoreError> {
        let rows: Vec<usize> = range.collect();
        let sub = |m: &Array2<f64>, prefix: &str| {
            let ids = rows.iter().map(|i| format!("{prefix}-{i:06}")).collect();
            EmbeddingTable::from_array(&m.select(ndarray::Axis(0), &rows), ids)
        };
        Ok(SynthSplit {
            pairs: PairedDataset::new(sub(&img, "img")?, sub(&txt, "txt")?)?,
            labels: labels.as_ref().map(|l| rows.iter().map(|&i| l[i]).collect()),
        })
    };
    let train = split(0..n_train)?;
    let test = split(n_train..cfg.n)?;

    let prompts = if centers.len() >= 2 {
        let mut m = Array2::zeros((centers.len(), d));
        for (k, c) in centers.iter().enumerate() {
            m.row_mut(k).assign(&normalized(c + &(&e_txt * cfg.gap)));
        }
        let ids = (0..centers.len()).map(|k| format!("class-{k:03}")).collect();
        Some(ClassPromptTable::new(EmbeddingTable::from_array(&m, ids)?)?)
    } else {
        None
    };
    Ok(SynthData { train, test, prompts })
}
