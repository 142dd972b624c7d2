use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;
use refine_core::metrics::Direction;
use refine_core::priors::PriorKind;
use refine_core::{PairedDataset, PriorSpec};

use crate::config::{MomentsSource, RunConfig};
use crate::error::{CliError, CliResult};
use crate::eval::{evaluate, EvalOptions, Task};
use crate::files::write_atomic;
use crate::train::train_on;

pub const THREADS_ENV: &str = "REFINE_KIT_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Batch,
    Alpha,
    Lambda,
    Prior,
    Beta,
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "batch" => Ok(Self::Batch),
            "alpha" => Ok(Self::Alpha),
            "lambda" => Ok(Self::Lambda),
            "prior" => Ok(Self::Prior),
            "beta" => Ok(Self::Beta),
            _ => Err(format!("unknown sweep parameter {s:?} (expected batch, alpha, lambda, prior or beta)")),
        }
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            Self::Batch => "batch",
            Self::Alpha => "alpha",
            Self::Lambda => "lambda",
            Self::Prior => "prior",
            Self::Beta => "beta",
        }
    }
}

fn parse_f64(what: &str, v: &str) -> CliResult<f64> {
    v.trim()
        .parse::<f64>()
        .map_err(|_| CliError::config(format!("{what} value {v:?} is not a number")))
}

/// Applies one sweep value to a copy of the base config.
///
/// `lambda` values are `rafa:hycd` weight pairs. `prior` values are `std`,
/// `uniform`, `moments-img`, `moments-txt` or `moments-all`.
pub fn apply_value(base: &RunConfig, param: SweepParam, value: &str) -> CliResult<RunConfig> {
    let mut cfg = base.clone();
    let t = &mut cfg.train;
    match param {
        SweepParam::Batch => {
            t.batch_size = value
                .trim()
                .parse()
                .map_err(|_| CliError::config(format!("batch value {value:?} is not a positive integer")))?;
        }
        SweepParam::Alpha => t.loss.alpha = parse_f64("alpha", value)?,
        SweepParam::Lambda => {
            let (a, b) = value
                .split_once(':')
                .ok_or_else(|| CliError::config(format!("lambda value {value:?} must look like rafa:hycd")))?;
            t.loss.lambda_rafa = parse_f64("lambda", a)?;
            t.loss.lambda_hycd = parse_f64("lambda", b)?;
        }
        SweepParam::Prior => {
            let moments = |src| {
                let spec = PriorSpec {
                    kind: PriorKind::GaussianMoments,
                    mu: None,
                    sigma: None,
                    beta: None,
                };
                (spec, src)
            };
            let (spec, src) = match value.trim() {
                "std" | "standard_gaussian" => (PriorSpec::standard_gaussian(), cfg.moments_from),
                "uniform" | "uniform01" => (PriorSpec::uniform01(), cfg.moments_from),
                "moments-img" => moments(MomentsSource::Image),
                "moments-txt" => moments(MomentsSource::Text),
                "moments-all" => moments(MomentsSource::All),
                other => {
                    return Err(CliError::config(format!(
                        "unknown prior {other:?} (expected std, uniform, moments-img, moments-txt or moments-all)"
                    )))
                }
            };
            t.prior = spec;
            cfg.moments_from = src;
        }
        SweepParam::Beta => t.prior = PriorSpec::scaled_gaussian(parse_f64("beta", value)?),
    }
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub steps: usize,
    pub final_loss: f64,
    pub modality_gap: f64,
    pub alignment: f64,
    pub uniformity: f64,
    pub t2i: Vec<f64>,
    pub i2t: Vec<f64>,
    pub image_crc32: u32,
    pub text_crc32: u32,
}

pub struct SweepArgs {
    pub config: PathBuf,
    pub param: SweepParam,
    pub values: Vec<String>,
    pub ks: Vec<usize>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
}

/// Worker count: `--jobs` (default: available cores), capped by `REFINE_KIT_THREADS`.
pub fn worker_count(jobs: Option<usize>) -> CliResult<usize> {
    let requested = match jobs {
        Some(0) => return Err(CliError::config("--jobs must be >= 1")),
        Some(j) => j,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let cap: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|&c| c >= 1)
                .ok_or_else(|| CliError::config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
            Ok(requested.min(cap))
        }
        Err(_) => Ok(requested),
    }
}

fn run_one(cfg: &RunConfig, train: &PairedDataset, eval: &PairedDataset, value: &str, ks: &[usize]) -> CliResult<SweepRow> {
    let run = train_on(cfg, train.clone())?;
    let opts = EvalOptions {
        tasks: vec![Task::Metrics, Task::Retrieval],
        ks: ks.to_vec(),
        zeroshot: None,
        pca_out: None,
    };
    let report = evaluate(Some(&run.heads), eval, &opts)?;
    let m = report.metrics.expect("metrics task requested");
    let retrieval = report.retrieval.expect("retrieval task requested");
    let recalls = |d: Direction| -> Vec<f64> {
        let r = retrieval.iter().find(|r| r.direction == d).expect("both directions reported");
        ks.iter().map(|k| r.recall_at[k]).collect()
    };
    Ok(SweepRow {
        value: value.to_string(),
        steps: run.report.steps.len(),
        final_loss: run.report.steps.last().map_or(f64::NAN, |s| s.total),
        modality_gap: m.modality_gap,
        alignment: m.alignment,
        uniformity: m.uniformity,
        t2i: recalls(Direction::T2I),
        i2t: recalls(Direction::I2T),
        image_crc32: run.report.image_head_crc32,
        text_crc32: run.report.text_head_crc32,
    })
}

pub fn render_csv(param: SweepParam, ks: &[usize], rows: &[SweepRow]) -> String {
    let mut s = String::from("param,value,steps,final_loss,modality_gap,alignment,uniformity");
    for dir in ["t2i", "i2t"] {
        for k in ks {
            let _ = write!(s, ",{dir}_r{k}");
        }
    }
    s.push_str(",image_head_crc32,text_head_crc32\n");
    for r in rows {
        let _ = write!(
            s,
            "{},{},{},{},{},{},{}",
            param.name(),
            r.value,
            r.steps,
            r.final_loss,
            r.modality_gap,
            r.alignment,
            r.uniformity
        );
        for v in r.t2i.iter().chain(&r.i2t) {
            let _ = write!(s, ",{v}");
        }
        let _ = writeln!(s, ",{:08x},{:08x}", r.image_crc32, r.text_crc32);
    }
    s
}

/// `refine-kit sweep`: one train + eval per value, rows in the order given.
pub fn cmd_sweep(args: &SweepArgs) -> CliResult<Vec<SweepRow>> {
    let values: Vec<&str> = args.values.iter().map(|v| v.trim()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(CliError::config("--values is empty"));
    }
    if args.ks.is_empty() || args.ks.contains(&0) {
        return Err(CliError::config("--ks must list positive integers"));
    }
    let base = RunConfig::load(&args.config)?;
    let configs = values
        .iter()
        .map(|v| apply_value(&base, args.param, v))
        .collect::<CliResult<Vec<_>>>()?;

    let train = base.train_paths().load()?;
    let eval = match &base.data.eval {
        Some(_) => base.eval_paths().load()?,
        None => train.clone(),
    };
    if eval.dim() != train.dim() {
        return Err(CliError::data(format!(
            "eval data has d={} but training data has d={}",
            eval.dim(),
            train.dim()
        )));
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count(args.jobs)?)
        .build()
        .map_err(CliError::config)?;
    let rows = pool.install(|| {
        configs
            .par_iter()
            .zip(values.par_iter())
            .map(|(cfg, v)| run_one(cfg, &train, &eval, v, &args.ks))
            .collect::<Vec<_>>()
    });
    let rows = rows.into_iter().collect::<CliResult<Vec<_>>>()?;

    let csv = render_csv(args.param, &args.ks, &rows);
    match &args.out {
        Some(p) => write_atomic(p, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    Ok(rows)
}
