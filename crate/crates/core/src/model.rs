//! Residual refinement heads over frozen cached features.
//!
//! A head maps a raw embedding `x` to
//!
//! ```text
//! u = x / ‖x‖
//! r = u + GELU(u·W1 + b1)·W2 + b2
//! z = r / ‖r‖
//! ```
//!
//! With `W2 = 0, b2 = 0` the head is the identity on normalized features, so a
//! freshly initialised student reproduces the frozen teacher exactly.

use std::fs;
use std::io;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::rng::{self, streams};
use crate::store::PairedDataset;

pub const HEAD_MAGIC: [u8; 4] = *b"RHD1";
pub const HEAD_VERSION: u32 = 1;
const HEAD_HEADER_LEN: usize = 16;

/// Rows with a smaller L2 norm cannot be normalized.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("row {row} has norm below {MIN_NORM:e}")]
    ZeroNorm { row: usize },
    #[error("dimension mismatch: head has d={head}, data has d={data}")]
    DimensionMismatch { head: usize, data: usize },
    #[error("bad head checkpoint magic {0:?}")]
    BadMagic(Vec<u8>),
    #[error("head checkpoint version {found}, expected {HEAD_VERSION}")]
    VersionMismatch { found: u32 },
    #[error("head checkpoint truncated: {found} bytes, expected {expected}")]
    Truncated { found: usize, expected: usize },
    #[error("invalid head shape: {0}")]
    InvalidShape(String),
    #[error("non-finite parameter in {0}")]
    NonFiniteParameter(&'static str),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// d/dx GELU(x) = Φ(x) + x·φ(x).
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Row-wise L2 normalization; fails on rows with norm below [`MIN_NORM`].
pub fn normalize_rows(x: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>), ModelError> {
    let mut out = x.to_owned();
    let mut norms = Array1::zeros(x.nrows());
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let n = row.dot(&row).sqrt();
        if !(n >= MIN_NORM) {
            return Err(ModelError::ZeroNorm { row: i });
        }
        row.mapv_inplace(|v| v / n);
        norms[i] = n;
    }
    Ok((out, norms))
}

/// Small residual MLP applied to one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineHead {
    /// d×h
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// h×d
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Intermediates of a forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub unit: Array2<f64>,
    pub pre_act: Array2<f64>,
    pub act: Array2<f64>,
    /// Residual output before the final normalization.
    pub residual: Array2<f64>,
    pub residual_norm: Array1<f64>,
    pub out: Array2<f64>,
}

/// Parameter gradients, same shapes as [`RefineHead`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl HeadGrads {
    pub fn slices(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
        ]
    }
}

impl RefineHead {
    /// Head that reproduces normalized inputs exactly: `W1 ~ N(0, 1/d)`, everything else zero.
    pub fn init_identity(dim: usize, hidden: usize, seed: u64) -> Self {
        Self::init_with_stream(dim, hidden, seed, streams::IMAGE_HEAD_INIT)
    }

    fn init_with_stream(dim: usize, hidden: usize, seed: u64, stream: u64) -> Self {
        assert!(dim >= 1 && hidden >= 1, "head dims must be positive");
        let mut rng = rng::substream(seed, stream);
        let std = 1.0 / (dim as f64).sqrt();
        let w1 = Array2::from_shape_simple_fn((dim, hidden), || {
            let g: f64 = StandardNormal.sample(&mut rng);
            std * g
        });
        Self {
            w1,
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, dim)),
            b2: Array1::zeros(dim),
        }
    }

    pub fn from_parts(
        w1: Array2<f64>,
        b1: Array1<f64>,
        w2: Array2<f64>,
        b2: Array1<f64>,
    ) -> Result<Self, ModelError> {
        let (d, h) = w1.dim();
        if d == 0 || h == 0 || b1.len() != h || w2.dim() != (h, d) || b2.len() != d {
            return Err(ModelError::InvalidShape(format!(
                "w1 {:?}, b1 {}, w2 {:?}, b2 {}",
                w1.dim(),
                b1.len(),
                w2.dim(),
                b2.len()
            )));
        }
        let head = Self {
            w1: w1.as_standard_layout().into_owned(),
            b1,
            w2: w2.as_standard_layout().into_owned(),
            b2,
        };
        head.check_finite()?;
        Ok(head)
    }

    pub fn dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.ncols()
    }

    pub fn num_params(&self) -> usize {
        2 * self.dim() * self.hidden() + self.dim() + self.hidden()
    }

    pub fn check_dim(&self, data_dim: usize) -> Result<(), ModelError> {
        if self.dim() != data_dim {
            return Err(ModelError::DimensionMismatch {
                head: self.dim(),
                data: data_dim,
            });
        }
        Ok(())
    }

    fn check_finite(&self) -> Result<(), ModelError> {
        let names = ["w1", "b1", "w2", "b2"];
        for (name, s) in names.iter().zip(self.slices()) {
            if s.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFiniteParameter(name));
            }
        }
        Ok(())
    }

    /// Parameters in declaration order.
    pub fn slices(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
        ]
    }

    /// Unit-norm outputs for a batch of raw rows.
    pub fn forward(&self, raw: ArrayView2<f64>) -> Result<Array2<f64>, ModelError> {
        Ok(self.forward_cached(raw)?.out)
    }

    pub fn forward_cached(&self, raw: ArrayView2<f64>) -> Result<ForwardCache, ModelError> {
        self.check_dim(raw.ncols())?;
        let (unit, _) = normalize_rows(raw)?;
        let pre_act = unit.dot(&self.w1) + &self.b1;
        let act = pre_act.mapv(gelu);
        let residual = &unit + &act.dot(&self.w2) + &self.b2;
        let (out, residual_norm) = normalize_rows(residual.view())?;
        Ok(ForwardCache {
            unit,
            pre_act,
            act,
            residual,
            residual_norm,
            out,
        })
    }

    /// Reverse pass from `dL/dz` (and optionally `dL/dr` on the pre-normalization residual).
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_out: ArrayView2<f64>,
        grad_residual: Option<ArrayView2<f64>>,
    ) -> HeadGrads {
        // dz -> dr through r / ‖r‖: (g - z (z·g)) / ‖r‖
        let mut d_res = Array2::zeros(cache.residual.raw_dim());
        for i in 0..grad_out.nrows() {
            let g = grad_out.row(i);
            let z = cache.out.row(i);
            let proj = z.dot(&g);
            let inv = 1.0 / cache.residual_norm[i];
            let mut row = d_res.row_mut(i);
            for k in 0..g.len() {
                row[k] = (g[k] - z[k] * proj) * inv;
            }
        }
        if let Some(extra) = grad_residual {
            d_res += &extra;
        }
        let w2 = cache.act.t().dot(&d_res);
        let b2 = d_res.sum_axis(Axis(0));
        let mut d_pre = d_res.dot(&self.w2.t());
        d_pre.zip_mut_with(&cache.pre_act, |g, &a| *g *= gelu_grad(a));
        let w1 = cache.unit.t().dot(&d_pre);
        let b1 = d_pre.sum_axis(Axis(0));
        HeadGrads { w1, b1, w2, b2 }
    }

    /// `RHD1` checkpoint bytes: magic, `u32` version, `u32` d, `u32` h,
    /// then W1, b1, W2, b2 as little-endian `f64`.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEAD_HEADER_LEN + 8 * self.num_params());
        out.extend_from_slice(&HEAD_MAGIC);
        out.extend_from_slice(&HEAD_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.hidden() as u32).to_le_bytes());
        for s in self.slices() {
            for v in s {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < HEAD_HEADER_LEN {
            return Err(ModelError::Truncated {
                found: bytes.len(),
                expected: HEAD_HEADER_LEN,
            });
        }
        if bytes[..4] != HEAD_MAGIC {
            return Err(ModelError::BadMagic(bytes[..4].to_vec()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != HEAD_VERSION {
            return Err(ModelError::VersionMismatch { found: version });
        }
        let d = u32_at(8) as usize;
        let h = u32_at(12) as usize;
        if d == 0 || h == 0 {
            return Err(ModelError::InvalidShape(format!("d={d}, h={h}")));
        }
        let n = 2 * d * h + d + h;
        let expected = HEAD_HEADER_LEN + 8 * n;
        if bytes.len() != expected {
            return Err(ModelError::Truncated {
                found: bytes.len(),
                expected,
            });
        }
        let mut values = bytes[HEAD_HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut take = |k: usize| -> Vec<f64> { values.by_ref().take(k).collect() };
        let w1 = Array2::from_shape_vec((d, h), take(d * h)).unwrap();
        let b1 = Array1::from(take(h));
        let w2 = Array2::from_shape_vec((h, d), take(h * d)).unwrap();
        let b2 = Array1::from(take(d));
        Self::from_parts(w1, b1, w2, b2)
    }

    pub fn checksum(&self) -> u32 {
        crc32fast::hash(&self.encode())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::decode(&fs::read(path)?)
    }

    /// Loads a checkpoint and checks it against the data dimension.
    pub fn load_for_dim(path: impl AsRef<Path>, data_dim: usize) -> Result<Self, ModelError> {
        let head = Self::load(path)?;
        head.check_dim(data_dim)?;
        Ok(head)
    }
}

/// Image and text heads trained jointly.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadPair {
    pub image: RefineHead,
    pub text: RefineHead,
}

impl HeadPair {
    /// Identity-initialised pair; the two heads draw from separate streams of `seed`.
    pub fn init_identity(dim: usize, hidden: usize, seed: u64) -> Self {
        Self {
            image: RefineHead::init_with_stream(dim, hidden, seed, streams::IMAGE_HEAD_INIT),
            text: RefineHead::init_with_stream(dim, hidden, seed, streams::TEXT_HEAD_INIT),
        }
    }

    pub fn dim(&self) -> usize {
        self.image.dim()
    }

    /// Squared L2 distance over all parameters of both heads.
    pub fn param_distance_sq(&self, other: &HeadPair) -> f64 {
        let a = self.image.slices().into_iter().chain(self.text.slices());
        let b = other.image.slices().into_iter().chain(other.text.slices());
        a.zip(b)
            .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q) * (p - q)))
            .sum()
    }
}

/// Frozen unit-normalized teacher features, one matrix per modality.
#[derive(Debug, Clone)]
pub struct TeacherBank {
    images: Array2<f64>,
    texts: Array2<f64>,
}

impl TeacherBank {
    pub fn from_dataset(dataset: &PairedDataset) -> Result<Self, ModelError> {
        // Normalized twice, exactly like an identity head, so student and
        // teacher agree bit for bit at initialization.
        let twice = |m: Array2<f64>| -> Result<Array2<f64>, ModelError> {
            let (unit, _) = normalize_rows(m.view())?;
            Ok(normalize_rows(unit.view())?.0)
        };
        let images = twice(dataset.images().to_f64())?;
        let texts = twice(dataset.texts().to_f64())?;
        Ok(Self { images, texts })
    }

    pub fn images(&self) -> &Array2<f64> {
        &self.images
    }

    pub fn texts(&self) -> &Array2<f64> {
        &self.texts
    }

    pub fn gather(&self, rows: &[usize]) -> (Array2<f64>, Array2<f64>) {
        (self.images.select(Axis(0), rows), self.texts.select(Axis(0), rows))
    }
}
