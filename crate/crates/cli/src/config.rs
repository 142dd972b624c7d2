//! Run configuration (JSON). Relative paths resolve against the config file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use refine_core::priors::{fit_moments, PriorKind};
use refine_core::{PairedDataset, PriorSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::files::DataPaths;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub images: PathBuf,
    pub texts: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub caption_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub images: PathBuf,
    pub texts: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub caption_index: usize,
    /// Held-out split used by `sweep`; training data is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<SplitSection>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Hidden width of each head; defaults to the embedding dimension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
}

/// Which training rows a `gaussian_moments` prior without explicit mu/sigma is fitted on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentsSource {
    Image,
    #[default]
    Text,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub moments_from: MomentsSource,
    /// Output directory for `train`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let d = &mut self.data;
        d.images = resolve(base, &d.images);
        d.texts = resolve(base, &d.texts);
        d.manifest = d.manifest.as_ref().map(|m| resolve(base, m));
        if let Some(e) = &mut d.eval {
            e.images = resolve(base, &e.images);
            e.texts = resolve(base, &e.texts);
            e.manifest = e.manifest.as_ref().map(|m| resolve(base, m));
        }
        self.output = self.output.as_ref().map(|o| resolve(base, o));
    }

    pub fn train_paths(&self) -> DataPaths {
        DataPaths {
            images: self.data.images.clone(),
            texts: self.data.texts.clone(),
            manifest: self.data.manifest.clone(),
            caption_index: self.data.caption_index,
        }
    }

    pub fn eval_paths(&self) -> DataPaths {
        match &self.data.eval {
            Some(e) => DataPaths {
                images: e.images.clone(),
                texts: e.texts.clone(),
                manifest: e.manifest.clone(),
                caption_index: e.caption_index,
            },
            None => self.train_paths(),
        }
    }

    /// The training config with any data-dependent prior filled in and validated.
    pub fn resolved_train(&self, data: &PairedDataset) -> CliResult<TrainConfig> {
        let mut train = self.train.clone();
        train.prior = resolve_prior(&train.prior, self.moments_from, data)?;
        train.validate(data.dim()).map_err(CliError::config)?;
        Ok(train)
    }

    pub fn hidden(&self, dim: usize) -> CliResult<usize> {
        match self.model.hidden {
            Some(0) => Err(CliError::config("model.hidden must be >= 1")),
            Some(h) => Ok(h),
            None => Ok(dim),
        }
    }
}

/// Fills mu/sigma of a `gaussian_moments` prior from the training rows when they are absent.
pub fn resolve_prior(spec: &PriorSpec, source: MomentsSource, data: &PairedDataset) -> CliResult<PriorSpec> {
    if spec.kind != PriorKind::GaussianMoments || (spec.mu.is_some() && spec.sigma.is_some()) {
        return Ok(spec.clone());
    }
    let tables = match source {
        MomentsSource::Image => vec![data.images()],
        MomentsSource::Text => vec![data.texts()],
        MomentsSource::All => vec![data.images(), data.texts()],
    };
    let m = fit_moments(&tables, true).map_err(CliError::data)?;
    Ok(PriorSpec::gaussian_moments(m))
}
