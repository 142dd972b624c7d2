use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

use ndarray::Array2;
use refine_core::metrics::{self, pca_project, MetricsReport, RetrievalReport, ZeroShotReport};
use refine_core::model::{normalize_rows, RefineHead};
use refine_core::{ClassPromptTable, EmbeddingTable, HeadPair, PairedDataset, TeacherBank};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::files::{load_table, write_atomic, write_json, DataPaths};
use crate::train::head_paths;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Metrics,
    Retrieval,
    Zeroshot,
    Pca,
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "metrics" => Ok(Task::Metrics),
            "retrieval" => Ok(Task::Retrieval),
            "zeroshot" => Ok(Task::Zeroshot),
            "pca" => Ok(Task::Pca),
            other => Err(format!("unknown task {other:?} (expected metrics, retrieval, zeroshot or pca)")),
        }
    }
}

/// Zero-shot inputs: class prompt embeddings and a JSON object mapping image id to class label.
#[derive(Debug, Clone)]
pub struct ZeroShotInputs {
    pub prompts: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub tasks: Vec<Task>,
    pub ks: Vec<usize>,
    pub zeroshot: Option<ZeroShotInputs>,
    pub pca_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadChecksums {
    pub image_crc32: u32,
    pub text_crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaSummary {
    pub csv: PathBuf,
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<HeadChecksums>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<Vec<RetrievalReport>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zeroshot: Option<ZeroShotReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pca: Option<PcaSummary>,
}

fn features(head: Option<&RefineHead>, raw: Array2<f64>, teacher: &Array2<f64>) -> CliResult<Array2<f64>> {
    match head {
        Some(h) => h.forward(raw.view()).map_err(CliError::data),
        None => Ok(teacher.clone()),
    }
}

fn prompt_features(head: Option<&RefineHead>, prompts: &EmbeddingTable) -> CliResult<Array2<f64>> {
    let raw = prompts.to_f64();
    match head {
        Some(h) => h.forward(raw.view()).map_err(CliError::data),
        None => {
            let (unit, _) = normalize_rows(raw.view()).map_err(CliError::data)?;
            Ok(normalize_rows(unit.view()).map_err(CliError::data)?.0)
        }
    }
}

fn image_labels(zs: &ZeroShotInputs, data: &PairedDataset, prompts: &ClassPromptTable) -> CliResult<Vec<usize>> {
    let text = fs::read_to_string(&zs.labels).map_err(|e| CliError::data_at(&zs.labels, e))?;
    let by_id: HashMap<String, String> = serde_json::from_str(&text).map_err(|e| CliError::data_at(&zs.labels, e))?;
    let mut names = Vec::with_capacity(data.len());
    for id in data.images().ids() {
        match by_id.get(id) {
            Some(l) => names.push(l.as_str()),
            None => return Err(CliError::data_at(&zs.labels, format!("no label for image {id}"))),
        }
    }
    prompts
        .label_indices(&names)
        .into_iter()
        .zip(&names)
        .map(|(i, n)| i.ok_or_else(|| CliError::data_at(&zs.prompts, format!("no prompt for class {n}"))))
        .collect()
}

/// Runs the requested tasks on `data`, through `heads` when given, else on the frozen features.
pub fn evaluate(heads: Option<&HeadPair>, data: &PairedDataset, opts: &EvalOptions) -> CliResult<EvalReport> {
    if let Some(h) = heads {
        for head in [&h.image, &h.text] {
            head.check_dim(data.dim()).map_err(CliError::data)?;
        }
    }
    let teacher = TeacherBank::from_dataset(data).map_err(CliError::data)?;
    let img = features(heads.map(|h| &h.image), data.images().to_f64(), teacher.images())?;
    let txt = features(heads.map(|h| &h.text), data.texts().to_f64(), teacher.texts())?;

    let mut report = EvalReport {
        n: data.len(),
        dim: data.dim(),
        heads: heads.map(|h| HeadChecksums {
            image_crc32: h.image.checksum(),
            text_crc32: h.text.checksum(),
        }),
        metrics: None,
        retrieval: None,
        zeroshot: None,
        pca: None,
    };
    for task in &opts.tasks {
        match task {
            Task::Metrics => {
                report.metrics = Some(metrics::feature_metrics(img.view(), txt.view()).map_err(CliError::data)?);
            }
            Task::Retrieval => {
                let r = metrics::paired_retrieval(img.view(), txt.view(), &opts.ks).map_err(CliError::data)?;
                report.retrieval = Some(r.to_vec());
            }
            Task::Zeroshot => {
                let zs = opts
                    .zeroshot
                    .as_ref()
                    .ok_or_else(|| CliError::config("zeroshot needs --prompts and --labels"))?;
                let table = load_table(&zs.prompts)?;
                if table.dim() != data.dim() {
                    return Err(CliError::data_at(
                        &zs.prompts,
                        format!("prompt dim {} but data dim {}", table.dim(), data.dim()),
                    ));
                }
                let prompts = ClassPromptTable::new(table).map_err(|e| CliError::data_at(&zs.prompts, e))?;
                let labels = image_labels(zs, data, &prompts)?;
                let pf = prompt_features(heads.map(|h| &h.text), prompts.table())?;
                report.zeroshot =
                    Some(metrics::zeroshot_classify(img.view(), pf.view(), &labels).map_err(CliError::data)?);
            }
            Task::Pca => {
                let path = opts.pca_out.clone().ok_or_else(|| CliError::config("pca needs --pca-out"))?;
                let stacked = ndarray::concatenate![ndarray::Axis(0), img, txt];
                let proj = pca_project(stacked.view(), 2).map_err(CliError::data)?;
                let rows: Vec<(String, String)> = data
                    .images()
                    .ids()
                    .iter()
                    .map(|id| (id.clone(), "image".to_string()))
                    .chain(data.texts().ids().iter().map(|id| (id.clone(), "text".to_string())))
                    .collect();
                let mut csv = Vec::new();
                proj.write_csv(&mut csv, &rows).map_err(CliError::data)?;
                write_atomic(&path, &csv)?;
                report.pca = Some(PcaSummary {
                    csv: path,
                    explained_variance: proj.explained_variance.to_vec(),
                    explained_variance_ratio: proj.explained_variance_ratio.to_vec(),
                });
            }
        }
    }
    Ok(report)
}

pub fn load_heads(dir: &std::path::Path, dim: usize) -> CliResult<HeadPair> {
    let (ip, tp) = head_paths(dir);
    let image = RefineHead::load_for_dim(&ip, dim).map_err(|e| CliError::data_at(&ip, e))?;
    let text = RefineHead::load_for_dim(&tp, dim).map_err(|e| CliError::data_at(&tp, e))?;
    Ok(HeadPair { image, text })
}

pub struct EvalArgs {
    pub heads: Option<PathBuf>,
    pub data: DataPaths,
    pub options: EvalOptions,
    pub out: Option<PathBuf>,
    pub pretty: bool,
}

pub fn render_table(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "pairs        {}", r.n);
    let _ = writeln!(s, "dim          {}", r.dim);
    if let Some(m) = &r.metrics {
        let _ = writeln!(s, "modality gap {:.6e}", m.modality_gap);
        let _ = writeln!(s, "alignment    {:.6}", m.alignment);
        let _ = writeln!(s, "uniformity   {:.6}", m.uniformity);
    }
    if let Some(rs) = &r.retrieval {
        for rr in rs {
            let cells: Vec<String> = rr.recall_at.iter().map(|(k, v)| format!("R@{k} {:.4}", v)).collect();
            let _ = writeln!(s, "{:<12} {}", format!("{:?}", rr.direction), cells.join("  "));
        }
    }
    if let Some(z) = &r.zeroshot {
        let _ = writeln!(s, "zero-shot    {:.4} ({} images, {} classes)", z.accuracy, z.n, z.num_classes);
    }
    if let Some(p) = &r.pca {
        let _ = writeln!(s, "pca          {} (ratio {:?})", p.csv.display(), p.explained_variance_ratio);
    }
    s
}

/// `refine-kit eval`.
pub fn cmd_eval(args: &EvalArgs) -> CliResult<EvalReport> {
    let data = args.data.load()?;
    let heads = match &args.heads {
        Some(dir) => Some(load_heads(dir, data.dim())?),
        None => None,
    };
    let report = evaluate(heads.as_ref(), &data, &args.options)?;
    if let Some(out) = &args.out {
        write_json(out, &report, true)?;
    }
    if args.pretty {
        print!("{}", render_table(&report));
    } else if args.out.is_none() {
        println!("{}", serde_json::to_string_pretty(&report).map_err(CliError::data)?);
    }
    Ok(report)
}
