//! Top principal components by power iteration with Hotelling deflation.

use std::io::{self, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::MetricsError;

pub const PCA_TOL: f64 = 1e-9;
pub const PCA_MAX_ITERS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    /// N×k projected coordinates.
    pub coords: Array2<f64>,
    /// k×d unit principal directions.
    pub components: Array2<f64>,
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
}

impl PcaProjection {
    /// CSV with header `id,modality,pc1,pc2[,...]`; `rows` gives (id, modality) per point.
    pub fn write_csv<W: Write>(&self, mut w: W, rows: &[(String, String)]) -> io::Result<()> {
        let k = self.coords.ncols();
        let header: Vec<String> = (1..=k).map(|c| format!("pc{c}")).collect();
        writeln!(w, "id,modality,{}", header.join(","))?;
        for ((id, modality), coords) in rows.iter().zip(self.coords.rows()) {
            let vals: Vec<String> = coords.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{id},{modality},{}", vals.join(","))?;
        }
        Ok(())
    }
}

fn unit(v: &Array1<f64>) -> Option<Array1<f64>> {
    let n = v.dot(v).sqrt();
    (n > 0.0).then(|| v / n)
}

/// Deterministic start: the covariance column with the largest norm, made
/// orthogonal to earlier components; falls back to basis vectors.
fn start_vector(cov: &Array2<f64>, found: &[Array1<f64>]) -> Array1<f64> {
    let d = cov.nrows();
    let mut candidates: Vec<Array1<f64>> = cov.columns().into_iter().map(|c| c.to_owned()).collect();
    candidates.sort_by(|a, b| b.dot(b).total_cmp(&a.dot(a)));
    candidates.extend((0..d).map(|i| {
        let mut e = Array1::zeros(d);
        e[i] = 1.0;
        e
    }));
    for mut c in candidates {
        for f in found {
            let p = f.dot(&c);
            c.scaled_add(-p, f);
        }
        if let Some(u) = unit(&c) {
            if c.dot(&c).sqrt() > 1e-8 * (1.0 + cov.diag().sum()) {
                return u;
            }
        }
    }
    unreachable!("some basis vector is outside the span of fewer than d components")
}

/// Projects centered features onto their top `n_components` principal directions.
///
/// Each direction is signed so its first nonzero coordinate is positive.
pub fn pca_project(feats: ArrayView2<f64>, n_components: usize) -> Result<PcaProjection, MetricsError> {
    let n = feats.nrows();
    let d = feats.ncols();
    if n < 3 {
        return Err(MetricsError::TooFewPoints(n));
    }
    if n_components == 0 || n_components > d {
        return Err(MetricsError::ShapeMismatch(format!(
            "cannot take {n_components} components of dimension {d}"
        )));
    }
    let mean = feats.sum_axis(Axis(0)) / n as f64;
    let centered = &feats - &mean;
    let cov = centered.t().dot(&centered) / n as f64;
    let trace = cov.diag().sum();
    let negligible = 1e-14 * trace.max(f64::MIN_POSITIVE);

    let mut deflated = cov.clone();
    let mut found: Vec<Array1<f64>> = Vec::with_capacity(n_components);
    let mut variances = Vec::with_capacity(n_components);
    for component in 0..n_components {
        let mut v = start_vector(&cov, &found);
        let mut converged = false;
        for _ in 0..PCA_MAX_ITERS {
            let mut w = deflated.dot(&v);
            for f in &found {
                let p = f.dot(&w);
                w.scaled_add(-p, f);
            }
            if w.dot(&w).sqrt() <= negligible {
                // remaining spectrum is zero: any orthogonal direction will do
                converged = true;
                break;
            }
            let w = unit(&w).unwrap();
            let delta = (&w - &v).mapv(f64::abs).fold(0.0f64, |m, &x| m.max(x));
            v = w;
            if delta < PCA_TOL {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(MetricsError::ConvergenceFailure {
                component,
                iterations: PCA_MAX_ITERS,
            });
        }
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                v.mapv_inplace(|x| -x);
            }
        }
        let lambda = v.dot(&cov.dot(&v)).max(0.0);
        for i in 0..d {
            for j in 0..d {
                deflated[[i, j]] -= lambda * v[i] * v[j];
            }
        }
        variances.push(lambda);
        found.push(v);
    }

    let mut components = Array2::zeros((n_components, d));
    for (k, v) in found.iter().enumerate() {
        components.row_mut(k).assign(v);
    }
    let coords = centered.dot(&components.t());
    let explained_variance_ratio = variances
        .iter()
        .map(|&l| if trace > 0.0 { l / trace } else { 0.0 })
        .collect();
    Ok(PcaProjection {
        coords,
        components,
        explained_variance: variances,
        explained_variance_ratio,
    })
}
