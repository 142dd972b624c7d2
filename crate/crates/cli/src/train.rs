use std::path::{Path, PathBuf};

use log::{info, warn};
use refine_core::trainer;
use refine_core::{HeadPair, PairedDataset, TrainConfig, TrainReport};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::files::{sha256_hex, write_atomic, write_json};
use crate::manifest::{unix_now, FileDigest, RunManifest};

pub const IMAGE_HEAD_FILE: &str = "image_head.rhd";
pub const TEXT_HEAD_FILE: &str = "text_head.rhd";
pub const REPORT_FILE: &str = "train_report.jsonl";
pub const MANIFEST_FILE: &str = "run_manifest.json";

pub struct TrainArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub rafa_prenorm: bool,
}

pub struct TrainRun {
    pub heads: HeadPair,
    pub report: TrainReport,
    pub train: TrainConfig,
    pub data: PairedDataset,
    pub config_sha256: String,
}

/// Loads the training split, resolves the config and trains from identity heads.
pub fn run_training(cfg: &RunConfig) -> CliResult<TrainRun> {
    let data = cfg.train_paths().load()?;
    train_on(cfg, data)
}

/// Trains on already loaded data with the settings in `cfg`.
pub fn train_on(cfg: &RunConfig, data: PairedDataset) -> CliResult<TrainRun> {
    let train = cfg.resolved_train(&data)?;
    let hidden = cfg.hidden(data.dim())?;
    if train.loss.is_degenerate() {
        warn!("lambda_rafa and lambda_hycd are both zero; heads will not change");
    }
    let mut resolved = cfg.clone();
    resolved.train = train.clone();
    let config_sha256 = sha256_hex(&serde_json::to_vec(&resolved).map_err(CliError::config)?);

    let init = HeadPair::init_identity(data.dim(), hidden, train.seed);
    let (heads, report) = trainer::train(&data, init, &train)?;
    Ok(TrainRun {
        heads,
        report,
        train,
        data,
        config_sha256,
    })
}

/// `refine-kit train`: writes both head checkpoints, the per-step report and a run manifest.
pub fn cmd_train(args: &TrainArgs) -> CliResult<PathBuf> {
    let started = unix_now();
    let mut cfg = RunConfig::load(&args.config)?;
    if args.rafa_prenorm {
        cfg.train.loss.rafa_prenorm = true;
    }
    let out_dir = args
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .ok_or_else(|| CliError::config("no output directory: pass --out or set \"output\""))?;

    let inputs = cfg
        .train_paths()
        .files()
        .into_iter()
        .map(|p| {
            if p.exists() {
                FileDigest::of(p)
            } else {
                Err(CliError::data(format!("missing input file {}", p.display())))
            }
        })
        .collect::<CliResult<Vec<_>>>()?;

    let run = run_training(&cfg)?;
    info!(
        "trained {} steps, final loss {}",
        run.report.steps.len(),
        run.report.steps.last().map_or(f64::NAN, |s| s.total)
    );

    let image_path = out_dir.join(IMAGE_HEAD_FILE);
    let text_path = out_dir.join(TEXT_HEAD_FILE);
    let report_path = out_dir.join(REPORT_FILE);
    write_atomic(&image_path, &run.heads.image.encode())?;
    write_atomic(&text_path, &run.heads.text.encode())?;
    write_atomic(&report_path, run.report.steps_jsonl().as_bytes())?;

    let outputs = [&image_path, &text_path, &report_path]
        .iter()
        .map(|p| FileDigest::of(p))
        .collect::<CliResult<Vec<_>>>()?;
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_path: args.config.clone(),
        config_sha256: run.config_sha256.clone(),
        inputs,
        outputs,
        seed: run.train.seed,
        deterministic: run.train.deterministic,
        steps: run.report.steps.len(),
        image_head_crc32: run.report.image_head_crc32,
        text_head_crc32: run.report.text_head_crc32,
        started_unix: started,
        finished_unix: unix_now(),
        wall_time_secs: run.report.wall_time_secs,
    };
    write_json(&out_dir.join(MANIFEST_FILE), &manifest, true)?;
    Ok(out_dir)
}

pub fn head_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join(IMAGE_HEAD_FILE), dir.join(TEXT_HEAD_FILE))
}
