use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use refine_core::store::PairManifest;
use refine_core::synth::{generate, SynthConfig, SynthSplit};
use refine_core::TrainConfig;

use crate::config::{DataSection, ModelSection, MomentsSource, RunConfig, SplitSection};
use crate::error::{CliError, CliResult};
use crate::files::{save_table, write_json};

pub struct SynthArgs {
    pub config: SynthConfig,
    pub out_prefix: PathBuf,
}

/// Paths of everything `synth` writes, keyed by role.
pub type SynthOutputs = BTreeMap<String, PathBuf>;

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(suffix);
    prefix.with_file_name(name)
}

fn file_name(p: &Path) -> PathBuf {
    PathBuf::from(p.file_name().expect("generated paths have file names"))
}

fn write_split(prefix: &Path, name: &str, split: &SynthSplit, out: &mut SynthOutputs) -> CliResult<()> {
    let images = with_suffix(prefix, &format!("_{name}_images.emb"));
    let texts = with_suffix(prefix, &format!("_{name}_texts.emb"));
    let manifest = with_suffix(prefix, &format!("_{name}_pairs.json"));
    save_table(&images, split.pairs.images())?;
    save_table(&texts, split.pairs.texts())?;
    write_json(&manifest, &PairManifest::aligned(split.pairs.images(), split.pairs.texts()), true)?;
    out.insert(format!("{name}_images"), images);
    out.insert(format!("{name}_texts"), texts);
    out.insert(format!("{name}_pairs"), manifest);
    if let Some(labels) = &split.labels {
        let path = with_suffix(prefix, &format!("_{name}_labels.json"));
        let map: BTreeMap<&str, String> = split
            .pairs
            .images()
            .ids()
            .iter()
            .zip(labels)
            .map(|(id, &l)| (id.as_str(), class_label(l)))
            .collect();
        write_json(&path, &map, true)?;
        out.insert(format!("{name}_labels"), path);
    }
    Ok(())
}

/// Matches the prompt table ids produced by the generator.
fn class_label(k: usize) -> String {
    format!("class-{k:03}")
}

/// `refine-kit synth`: train/test EMB1 files, manifests, optional class prompts
/// and labels, plus a starter run config pointing at them.
pub fn cmd_synth(args: &SynthArgs) -> CliResult<SynthOutputs> {
    let c = &args.config;
    if c.n < 4 {
        return Err(CliError::config(format!("--n must be >= 4, got {}", c.n)));
    }
    if c.dim < 2 {
        return Err(CliError::config(format!("--d must be >= 2, got {}", c.dim)));
    }
    if !(c.gap >= 0.0 && c.gap.is_finite() && c.noise >= 0.0 && c.noise.is_finite()) {
        return Err(CliError::config("--gap and --noise must be finite and >= 0"));
    }
    if c.classes == 1 {
        return Err(CliError::config("--classes must be 0 or >= 2"));
    }
    let data = generate(c).map_err(CliError::data)?;
    let prefix = &args.out_prefix;
    let mut out = SynthOutputs::new();
    write_split(prefix, "train", &data.train, &mut out)?;
    write_split(prefix, "test", &data.test, &mut out)?;
    if let Some(prompts) = &data.prompts {
        let path = with_suffix(prefix, "_prompts.emb");
        save_table(&path, prompts.table())?;
        out.insert("prompts".into(), path);
    }

    let run = RunConfig {
        data: DataSection {
            images: file_name(&out["train_images"]),
            texts: file_name(&out["train_texts"]),
            manifest: Some(file_name(&out["train_pairs"])),
            caption_index: 0,
            eval: Some(SplitSection {
                images: file_name(&out["test_images"]),
                texts: file_name(&out["test_texts"]),
                manifest: Some(file_name(&out["test_pairs"])),
                caption_index: 0,
            }),
        },
        model: ModelSection::default(),
        train: TrainConfig {
            seed: c.seed,
            ..TrainConfig::default()
        },
        moments_from: MomentsSource::default(),
        output: Some(file_name(&with_suffix(prefix, "_run"))),
    };
    let cfg_path = with_suffix(prefix, "_config.json");
    write_json(&cfg_path, &run, true)?;
    out.insert("config".into(), cfg_path);
    Ok(out)
}
