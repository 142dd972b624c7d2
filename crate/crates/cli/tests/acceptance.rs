//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use refine_core::losses::{
    self, align_loss, contrastive_loss, hycd_loss, hybrid_teacher, kd_kl, rafa_loss, self_kd_loss, similarity_softmax,
    BatchFeatures, LossConfig, LossMode,
};
use refine_core::metrics::{self, Direction};
use refine_core::model::normalize_rows;
use refine_core::priors;
use refine_core::rng::{streams, substream};
use refine_core::synth::SynthConfig;
use refine_core::trainer::{self, shuffle_batches, OptimizerKind};
use refine_core::{EmbeddingTable, HeadPair, PairedDataset, PriorSpec, RefineHead, TeacherBank, TrainConfig};
use refine_kit::config::RunConfig;
use refine_kit::eval::{evaluate, EvalOptions, Task};
use refine_kit::synth::{cmd_synth, SynthArgs};
use refine_kit::train::train_on;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut *rng))
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    normalize_rows(gaussian(rng, rows, cols).view()).unwrap().0
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn table_from(m: &Array2<f64>, prefix: &str) -> EmbeddingTable {
    let ids = (0..m.nrows()).map(|i| format!("{prefix}{i}")).collect();
    EmbeddingTable::from_array(m, ids).unwrap()
}

// ---------------------------------------------------------------- P1

/// Differentiable inputs in a fixed order: student img, student txt, pre-norm img, pre-norm txt.
struct FdInputs {
    zi: Array2<f64>,
    zt: Array2<f64>,
    pi: Array2<f64>,
    pt: Array2<f64>,
    ti: Array2<f64>,
    tt: Array2<f64>,
    reference: Array2<f64>,
}

type LossFn = fn(&FdInputs) -> (f64, Vec<Option<Array2<f64>>>);

fn features(x: &FdInputs) -> BatchFeatures<'_> {
    BatchFeatures {
        student_img: x.zi.view(),
        student_txt: x.zt.view(),
        teacher_img: x.ti.view(),
        teacher_txt: x.tt.view(),
        reference: x.reference.view(),
        prenorm_img: Some(x.pi.view()),
        prenorm_txt: Some(x.pt.view()),
    }
}

fn pair(value: f64, gi: Array2<f64>, gt: Array2<f64>) -> (f64, Vec<Option<Array2<f64>>>) {
    (value, vec![Some(gi), Some(gt), None, None])
}

fn p1_losses() -> Vec<(&'static str, LossFn)> {
    vec![
        ("align", |x| {
            let p = align_loss(x.zi.view(), x.zt.view()).unwrap();
            pair(p.value, p.grad_img, p.grad_txt)
        }),
        ("rafa", |x| {
            let p = rafa_loss(x.zi.view(), x.zt.view(), x.reference.view()).unwrap();
            pair(p.value, p.grad_img, p.grad_txt)
        }),
        ("contrastive", |x| {
            let p = contrastive_loss(x.zi.view(), x.zt.view(), LossConfig::default().tau).unwrap();
            pair(p.value, p.grad_img, p.grad_txt)
        }),
        ("self_kd", |x| {
            let p = self_kd_loss(x.zi.view(), x.zt.view(), x.ti.view(), x.tt.view(), LossConfig::default().tau)
                .unwrap();
            pair(p.value, p.grad_img, p.grad_txt)
        }),
        ("hycd", |x| {
            let p = hycd_loss(x.zi.view(), x.zt.view(), x.ti.view(), x.tt.view(), &LossConfig::default()).unwrap();
            pair(p.value, p.grad_img, p.grad_txt)
        }),
        ("clip_refine_objective", |x| {
            let o = losses::clip_refine_objective(&features(x), &LossConfig::default()).unwrap();
            pair(o.total, o.grad_img, o.grad_txt)
        }),
        ("clip_refine_objective[rafa_prenorm]", |x| {
            let cfg = LossConfig {
                rafa_prenorm: true,
                ..LossConfig::default()
            };
            let o = losses::clip_refine_objective(&features(x), &cfg).unwrap();
            (o.total, vec![Some(o.grad_img), Some(o.grad_txt), o.grad_prenorm_img, o.grad_prenorm_txt])
        }),
    ]
}

fn input_mut(x: &mut FdInputs, k: usize) -> &mut Array2<f64> {
    match k {
        0 => &mut x.zi,
        1 => &mut x.zt,
        2 => &mut x.pi,
        _ => &mut x.pt,
    }
}

/// Normwise relative error per input tensor, `max|a − n| / max(max|a|, max|n|)`,
/// maximized over the differentiable inputs.
///
/// Entry-wise ratios are not used: at τ = 0.01 logits are ~100, so a central
/// difference carries ~1e-10 of absolute round-off, which swamps entries whose
/// true gradient is itself ~1e-9.
fn fd_max_rel_err(f: LossFn, x: &mut FdInputs, h: f64) -> f64 {
    let (_, grads) = f(x);
    let mut worst = 0.0f64;
    for (k, g) in grads.iter().enumerate() {
        let shape = input_mut(x, k).dim();
        let mut numeric = Array2::<f64>::zeros(shape);
        for i in 0..shape.0 {
            for j in 0..shape.1 {
                let orig = input_mut(x, k)[[i, j]];
                input_mut(x, k)[[i, j]] = orig + h;
                let up = f(x).0;
                input_mut(x, k)[[i, j]] = orig - h;
                let down = f(x).0;
                input_mut(x, k)[[i, j]] = orig;
                numeric[[i, j]] = (up - down) / (2.0 * h);
            }
        }
        let analytic = g.clone().unwrap_or_else(|| Array2::zeros(shape));
        let inf = |m: &Array2<f64>| m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let scale = inf(&analytic).max(inf(&numeric));
        if scale > 0.0 {
            worst = worst.max(inf(&(&analytic - &numeric)) / scale);
        }
    }
    worst
}

fn p1() -> Outcome {
    let start = Instant::now();
    let mut rng = substream(101, 0);
    let (b, d) = (8, 16);
    let mut details = Vec::new();
    let mut overall = 0.0f64;
    for (name, f) in p1_losses() {
        let mut worst = 0.0f64;
        for _ in 0..3 {
            let ti = unit_rows(&mut rng, b, d);
            let tt = unit_rows(&mut rng, b, d);
            // Students near their teachers keep the softmax away from one-hot saturation.
            let zi = normalize_rows((&ti + &(gaussian(&mut rng, b, d) * 0.05)).view()).unwrap().0;
            let zt = normalize_rows((&tt + &(gaussian(&mut rng, b, d) * 0.05)).view()).unwrap().0;
            let mut x = FdInputs {
                pi: &zi * 1.3,
                pt: &zt * 0.8,
                zi,
                zt,
                ti,
                tt,
                reference: gaussian(&mut rng, b, d),
            };
            worst = worst.max(fd_max_rel_err(f, &mut x, 1e-5));
        }
        details.push(format!("{name}={worst:.1e}"));
        overall = overall.max(worst);
    }
    let secs = start.elapsed().as_secs_f64();
    let msg = format!("max rel err {overall:.2e} ({}) in {secs:.1}s", details.join(", "));
    ensure(overall < 1e-4 && secs < 60.0, || msg.clone())?;
    Ok(msg)
}

// ---------------------------------------------------------------- P2

fn p2() -> Outcome {
    let mut rng = substream(202, 0);
    let mut worst_sum = 0.0f64;
    let mut min_kl = f64::INFINITY;
    let mut max_self_kl = 0.0f64;
    for trial in 0..1000 {
        let b = rng.random_range(1..=16);
        let d = rng.random_range(2..=24);
        let tau = [0.01, 0.07, 0.5, 2.0][trial % 4];
        let za = unit_rows(&mut rng, b, d);
        let zb = unit_rows(&mut rng, b, d);
        let zc = unit_rows(&mut rng, b, d);
        let q = similarity_softmax(za.view(), zb.view(), tau).map_err(|e| e.to_string())?;
        let s = similarity_softmax(zc.view(), zb.view(), tau).map_err(|e| e.to_string())?;
        for alpha in [0.0, 0.25, 0.5, 1.0] {
            let h = hybrid_teacher(&q, alpha);
            for dist in [&q, &h, &s] {
                for row in dist.matrix().rows() {
                    worst_sum = worst_sum.max((row.sum() - 1.0).abs());
                }
            }
            min_kl = min_kl.min(kd_kl(&h, &s));
            max_self_kl = max_self_kl.max(kd_kl(&h, &h));
        }
        max_self_kl = max_self_kl.max(kd_kl(&q, &q));
    }
    let msg = format!(
        "max |row sum - 1| {worst_sum:.1e}, min kd_kl {min_kl:.2e}, max kd_kl(t,t) {max_self_kl:.1e}"
    );
    ensure(worst_sum <= 1e-9 && min_kl >= -1e-12 && max_self_kl <= 1e-10, || msg.clone())?;
    Ok(msg)
}

// ---------------------------------------------------------------- P3

fn random_dataset(rng: &mut ChaCha8Rng, n: usize, d: usize) -> PairedDataset {
    let img = gaussian(rng, n, d);
    let txt = gaussian(rng, n, d);
    PairedDataset::new(table_from(&img, "i"), table_from(&txt, "t")).unwrap()
}

fn bits_equal(a: &Array2<f64>, b: &Array2<f64>) -> bool {
    a.dim() == b.dim() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn p3() -> Outcome {
    let mut rng = substream(303, 0);
    let mut max_dev = 0.0f64;
    let mut max_selfkd = 0.0f64;
    for (n, d, h) in [(32, 12, 24), (50, 32, 32), (7, 3, 5)] {
        let ds = random_dataset(&mut rng, n, d);
        let heads = HeadPair::init_identity(d, h, rng.random());
        let teacher = TeacherBank::from_dataset(&ds).unwrap();
        let zi = heads.image.forward(ds.images().to_f64().view()).unwrap();
        let zt = heads.text.forward(ds.texts().to_f64().view()).unwrap();
        let once_i = normalize_rows(ds.images().to_f64().view()).unwrap().0;
        let once_t = normalize_rows(ds.texts().to_f64().view()).unwrap().0;
        for (a, b) in [(&zi, teacher.images()), (&zt, teacher.texts()), (&zi, &once_i), (&zt, &once_t)] {
            for (x, y) in a.iter().zip(b.iter()) {
                max_dev = max_dev.max((x - y).abs());
            }
        }
        let tau = LossConfig::default().tau;
        let kd = self_kd_loss(zi.view(), zt.view(), teacher.images().view(), teacher.texts().view(), tau).unwrap();
        max_selfkd = max_selfkd.max(kd.value.abs());
    }

    let mut bitwise = true;
    for _ in 0..20 {
        let (b, d) = (rng.random_range(1..=12), rng.random_range(2..=16));
        let zi = unit_rows(&mut rng, b, d);
        let zt = unit_rows(&mut rng, b, d);
        let ti = unit_rows(&mut rng, b, d);
        let tt = unit_rows(&mut rng, b, d);
        let tau = [0.01, 0.07, 1.0][rng.random_range(0..3)];
        let cfg = LossConfig {
            tau,
            alpha: 0.0,
            ..LossConfig::default()
        };
        let hy = hycd_loss(zi.view(), zt.view(), ti.view(), tt.view(), &cfg).unwrap();
        let kd = self_kd_loss(zi.view(), zt.view(), ti.view(), tt.view(), tau).unwrap();
        bitwise &= hy.value.to_bits() == kd.value.to_bits()
            && bits_equal(&hy.grad_img, &kd.grad_img)
            && bits_equal(&hy.grad_txt, &kd.grad_txt);
    }

    // Retention: pure self-KD from identity init, one epoch at lr 1e-6.
    let ds = random_dataset(&mut rng, 64, 8);
    let mut cfg = TrainConfig {
        batch_size: 16,
        lr: 1e-6,
        ..TrainConfig::default()
    };
    cfg.loss.lambda_rafa = 0.0;
    cfg.loss.alpha = 0.0;
    let init = HeadPair::init_identity(8, 8, 3);
    let (out, _) = trainer::train(&ds, init.clone(), &cfg).unwrap();
    let moved = out.param_distance_sq(&init).sqrt();

    let msg = format!(
        "identity max dev {max_dev:.1e}, self-KD at init {max_selfkd:.1e}, hycd(a=0)==self_kd bitwise: {bitwise}, retention distance {moved:.1e}"
    );
    ensure(max_dev <= 1e-12 && max_selfkd <= 1e-9 && bitwise && moved < 1e-6, || msg.clone())?;
    Ok(msg)
}

// ---------------------------------------------------------------- P4

fn brute_gap(img: &Array2<f64>, txt: &Array2<f64>) -> f64 {
    let d = img.ncols();
    let mut total = 0.0;
    for k in 0..d {
        let mi: f64 = (0..img.nrows()).map(|i| img[[i, k]]).sum::<f64>() / img.nrows() as f64;
        let mt: f64 = (0..txt.nrows()).map(|i| txt[[i, k]]).sum::<f64>() / txt.nrows() as f64;
        total += (mi - mt) * (mi - mt);
    }
    total
}

fn sqdist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn brute_alignment(img: &Array2<f64>, txt: &Array2<f64>) -> f64 {
    (0..img.nrows()).map(|i| sqdist(img.row(i), txt.row(i))).sum::<f64>() / img.nrows() as f64
}

fn brute_uniformity(img: &Array2<f64>, txt: &Array2<f64>) -> f64 {
    let f: Vec<_> = img.rows().into_iter().chain(txt.rows()).collect();
    let mut total = 0.0;
    for a in &f {
        for b in &f {
            total += (-2.0 * sqdist(*a, *b)).exp();
        }
    }
    total / (2.0 * img.nrows() as f64)
}

fn brute_recall(q: &Array2<f64>, g: &Array2<f64>, truth: &[usize], k: usize) -> f64 {
    let mut hits = 0;
    for (i, &t) in truth.iter().enumerate() {
        let mut order: Vec<(f64, usize)> = (0..g.nrows()).map(|j| (q.row(i).dot(&g.row(j)), j)).collect();
        order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let pos = order.iter().position(|&(_, j)| j == t).unwrap();
        if pos < k {
            hits += 1;
        }
    }
    hits as f64 / truth.len() as f64
}

fn brute_zeroshot(img: &Array2<f64>, prompts: &Array2<f64>, labels: &[usize]) -> f64 {
    let mut correct = 0;
    for (i, &l) in labels.iter().enumerate() {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for c in 0..prompts.nrows() {
            let s = img.row(i).dot(&prompts.row(c));
            if s > best_score {
                best_score = s;
                best = c;
            }
        }
        if best == l {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

fn p4() -> Outcome {
    let mut rng = substream(404, 0);
    let mut worst = 0.0f64;
    let mut exact = true;
    for _ in 0..50 {
        let n = rng.random_range(1..=64);
        let d = rng.random_range(2..=16);
        let img = unit_rows(&mut rng, n, d);
        let mut txt = unit_rows(&mut rng, n, d);
        // Duplicate rows create exact score ties for the tie-break rule.
        if n > 2 {
            let src = txt.row(0).to_owned();
            txt.row_mut(n - 1).assign(&src);
        }
        let v = [img.view(), txt.view()];
        worst = worst.max((metrics::modality_gap(v[0], v[1]).unwrap() - brute_gap(&img, &txt)).abs());
        worst = worst.max((metrics::alignment_score(v[0], v[1]).unwrap() - brute_alignment(&img, &txt)).abs());
        worst = worst.max((metrics::uniformity_score(v[0], v[1]).unwrap() - brute_uniformity(&img, &txt)).abs());

        let ks = [1, 3, 5, 10];
        let truth: Vec<usize> = (0..n).map(|i| if rng.random_bool(0.8) { i } else { rng.random_range(0..n) }).collect();
        let r = metrics::recall_at_k(txt.view(), img.view(), &truth, &ks, Direction::T2I).unwrap();
        for &k in &ks {
            exact &= r.recall_at[&k] == brute_recall(&txt, &img, &truth, k);
        }
        let [t2i, i2t] = metrics::paired_retrieval(img.view(), txt.view(), &ks).unwrap();
        let ident: Vec<usize> = (0..n).collect();
        for &k in &ks {
            exact &= t2i.recall_at[&k] == brute_recall(&txt, &img, &ident, k);
            exact &= i2t.recall_at[&k] == brute_recall(&img, &txt, &ident, k);
        }

        let classes = rng.random_range(2..=10);
        let mut prompts = unit_rows(&mut rng, classes, d);
        let src = prompts.row(0).to_owned();
        prompts.row_mut(classes - 1).assign(&src);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let z = metrics::zeroshot_classify(img.view(), prompts.view(), &labels).unwrap();
        exact &= z.accuracy == brute_zeroshot(&img, &prompts, &labels);
    }
    let msg = format!("max metric deviation {worst:.1e}, recall/accuracy exact: {exact}");
    ensure(worst <= 1e-10 && exact, || msg.clone())?;
    Ok(msg)
}

// ---------------------------------------------------------------- P5 / P6

const LR_GRID: [f64; 3] = [1e-3, 1e-2, 1e-1];

struct Scores {
    gap: f64,
    uniformity: f64,
    r1: [f64; 2],
}

fn scores(heads: Option<&HeadPair>, data: &PairedDataset) -> Scores {
    let opts = EvalOptions {
        tasks: vec![Task::Metrics, Task::Retrieval],
        ks: vec![1],
        zeroshot: None,
        pca_out: None,
    };
    let r = evaluate(heads, data, &opts).unwrap();
    let m = r.metrics.unwrap();
    let rr = r.retrieval.unwrap();
    let r1 = |d: Direction| rr.iter().find(|x| x.direction == d).unwrap().recall_at[&1];
    Scores {
        gap: m.modality_gap,
        uniformity: m.uniformity,
        r1: [r1(Direction::T2I), r1(Direction::I2T)],
    }
}

fn synth_seed(dir: &Path, seed: u64) -> RunConfig {
    let prefix = dir.join(format!("synth{seed}"));
    let out = cmd_synth(&SynthArgs {
        config: SynthConfig {
            n: 2000,
            dim: 32,
            gap: 0.5,
            seed,
            ..SynthConfig::default()
        },
        out_prefix: prefix,
    })
    .unwrap();
    RunConfig::load(&out["config"]).unwrap()
}

/// Trains once per grid lr and keeps the heads with the best mean training-split R@1
/// (ties go to the smaller lr). Test data plays no part in the choice.
fn tuned_heads(base: &RunConfig, train: &PairedDataset, batch: usize, mode: LossMode) -> (f64, HeadPair) {
    let mut best: Option<(f64, f64, HeadPair)> = None;
    for lr in LR_GRID {
        let mut cfg = base.clone();
        cfg.train.batch_size = batch;
        cfg.train.lr = lr;
        cfg.train.loss.mode = mode;
        let run = train_on(&cfg, train.clone()).unwrap();
        let s = scores(Some(&run.heads), train);
        let r = (s.r1[0] + s.r1[1]) / 2.0;
        if best.as_ref().is_none_or(|b| r > b.1) {
            best = Some((lr, r, run.heads));
        }
    }
    let (lr, _, heads) = best.unwrap();
    (lr, heads)
}

fn p5(dir: &Path) -> Outcome {
    let start = Instant::now();
    let mut gap_ratio = Vec::new();
    let mut unif_ratio = Vec::new();
    let mut d_t2i = Vec::new();
    let mut d_i2t = Vec::new();
    let mut lrs = Vec::new();
    for seed in 0..3 {
        let cfg = synth_seed(dir, seed);
        let train = cfg.train_paths().load().unwrap();
        let test = cfg.eval_paths().load().unwrap();
        let (lr, heads) = tuned_heads(&cfg, &train, 256, LossMode::ClipRefine);
        let pre = scores(None, &test);
        let post = scores(Some(&heads), &test);
        gap_ratio.push(post.gap / pre.gap);
        unif_ratio.push(post.uniformity / pre.uniformity);
        d_t2i.push(post.r1[0] - pre.r1[0]);
        d_i2t.push(post.r1[1] - pre.r1[1]);
        lrs.push(lr);
    }
    let secs = start.elapsed().as_secs_f64();
    let (g, u, a, b) = (median(gap_ratio.clone()), median(unif_ratio.clone()), median(d_t2i), median(d_i2t));
    let msg = format!(
        "lr {lrs:?}; median gap ratio {g:.3} (seeds {gap_ratio:.3?}), uniformity ratio {u:.4} (seeds {unif_ratio:.4?}), R@1 change t2i {a:+.4} i2t {b:+.4}, {secs:.1}s"
    );
    ensure(g <= 0.8 && u <= 1.05 && a >= 0.0 && b >= 0.0 && secs < 120.0, || msg.clone())?;
    Ok(msg)
}

fn p6(dir: &Path) -> Outcome {
    let mut contrastive = Vec::new();
    let mut refine = Vec::new();
    let mut lrs = Vec::new();
    for seed in 0..3 {
        let cfg = synth_seed(dir, seed);
        let train = cfg.train_paths().load().unwrap();
        let test = cfg.eval_paths().load().unwrap();
        let (lc, hc) = tuned_heads(&cfg, &train, 32, LossMode::Contrastive);
        let (lr, hr) = tuned_heads(&cfg, &train, 32, LossMode::ClipRefine);
        contrastive.push(scores(Some(&hc), &test).uniformity);
        refine.push(scores(Some(&hr), &test).uniformity);
        lrs.push((lc, lr));
    }
    let (c, r) = (median(contrastive.clone()), median(refine.clone()));
    let msg = format!(
        "lr (contrastive, clip_refine) {lrs:?}; median uniformity contrastive {c:.4} vs clip_refine {r:.4} (seeds {contrastive:.4?} vs {refine:.4?})"
    );
    ensure(c > r, || msg.clone())?;
    Ok(msg)
}

// ---------------------------------------------------------------- P7 / P9

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_refine-kit"));
    c.env("RUST_LOG", "error");
    c
}

fn run_ok(cmd: &mut Command) -> Result<Vec<u8>, String> {
    let out = cmd.output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{cmd:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

/// Small synthetic set plus a config with a quick schedule.
fn small_setup(dir: &Path, name: &str) -> Result<PathBuf, String> {
    let prefix = dir.join(name);
    run_ok(bin().args(["synth", "--n", "300", "--d", "16", "--gap", "0.5", "--seed", "7", "--out-prefix"]).arg(&prefix))?;
    let cfg_path = dir.join(format!("{name}_config.json"));
    let mut cfg: serde_json::Value = serde_json::from_slice(&std::fs::read(&cfg_path).unwrap()).unwrap();
    cfg["train"]["batch_size"] = 64.into();
    cfg["train"]["lr"] = 1e-2.into();
    std::fs::write(&cfg_path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    Ok(cfg_path)
}

fn p7(dir: &Path) -> Outcome {
    let cfg = small_setup(dir, "det")?;
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = dir.join(format!("det_run_{run}"));
        run_ok(bin().arg("train").arg("--config").arg(&cfg).arg("--out").arg(&out))?;
        let report = out.join("eval.json");
        run_ok(
            bin()
                .args(["eval", "--tasks", "metrics,retrieval,pca"])
                .arg("--heads")
                .arg(&out)
                .arg("--images")
                .arg(dir.join("det_test_images.emb"))
                .arg("--texts")
                .arg(dir.join("det_test_texts.emb"))
                .arg("--manifest")
                .arg(dir.join("det_test_pairs.json"))
                .arg("--pca-out")
                .arg(out.join("pca.csv"))
                .arg("--out")
                .arg(&report),
        )?;
        files.push(out);
    }
    let mut compared = Vec::new();
    for name in ["image_head.rhd", "text_head.rhd", "train_report.jsonl", "pca.csv"] {
        let a = std::fs::read(files[0].join(name)).map_err(|e| e.to_string())?;
        let b = std::fs::read(files[1].join(name)).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{name} differs between runs"))?;
        compared.push(name);
    }
    // The eval report embeds the pca path, which differs by run directory.
    let strip = |p: &Path| -> Result<serde_json::Value, String> {
        let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(p).map_err(|e| e.to_string())?).unwrap();
        v["pca"]["csv"] = serde_json::Value::Null;
        Ok(v)
    };
    let (ra, rb) = (strip(&files[0].join("eval.json"))?, strip(&files[1].join("eval.json"))?);
    ensure(ra == rb, || "eval reports differ".into())?;
    Ok(format!("bitwise identical: {} and eval report", compared.join(", ")))
}

fn csv_rows(bytes: &[u8]) -> Vec<Vec<String>> {
    String::from_utf8_lossy(bytes)
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

fn p9(dir: &Path) -> Outcome {
    let cfg = small_setup(dir, "sweep")?;
    let sweep = |param: &str, values: &str| -> Result<Vec<Vec<String>>, String> {
        let out = run_ok(bin().arg("sweep").arg("--config").arg(&cfg).args(["--param", param, "--values", values, "--jobs", "2"]))?;
        Ok(csv_rows(&out))
    };
    let alpha = sweep("alpha", "0,0.5,1.0")?;
    let prior = sweep("prior", "std,uniform,moments-txt")?;
    let beta = sweep("beta", "0,0.1,1,10")?;
    ensure(alpha.len() == 3 && prior.len() == 3 && beta.len() == 4, || {
        format!("row counts alpha {} prior {} beta {}", alpha.len(), prior.len(), beta.len())
    })?;

    // Independent Self-KD + RaFA run: alpha = 0 through train + eval.
    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(&cfg).unwrap()).unwrap();
    v["train"]["loss"]["alpha"] = 0.0.into();
    let solo_cfg = dir.join("sweep_selfkd_config.json");
    std::fs::write(&solo_cfg, serde_json::to_vec_pretty(&v).unwrap()).unwrap();
    let solo = dir.join("sweep_selfkd_run");
    run_ok(bin().arg("train").arg("--config").arg(&solo_cfg).arg("--out").arg(&solo))?;
    let report = run_ok(
        bin()
            .args(["eval", "--ks", "1,5,10"])
            .arg("--heads")
            .arg(&solo)
            .arg("--images")
            .arg(dir.join("sweep_test_images.emb"))
            .arg("--texts")
            .arg(dir.join("sweep_test_texts.emb"))
            .arg("--manifest")
            .arg(dir.join("sweep_test_pairs.json")),
    )?;
    let report: serde_json::Value = serde_json::from_slice(&report).unwrap();
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(solo.join("run_manifest.json")).unwrap()).unwrap();

    let row = &alpha[0];
    let f = |i: usize| row[i].parse::<f64>().unwrap();
    let m = &report["metrics"];
    let recall = |dir: &str, k: &str| {
        report["retrieval"]
            .as_array()
            .unwrap()
            .iter()
            .find(|r| r["direction"] == dir)
            .unwrap()["recall_at"][k]
            .as_f64()
            .unwrap()
    };
    let expected = [
        m["modality_gap"].as_f64().unwrap(),
        m["alignment"].as_f64().unwrap(),
        m["uniformity"].as_f64().unwrap(),
        recall("T2I", "1"),
        recall("T2I", "5"),
        recall("T2I", "10"),
        recall("I2T", "1"),
        recall("I2T", "5"),
        recall("I2T", "10"),
    ];
    let got: Vec<f64> = (4..13).map(f).collect();
    let metrics_equal = expected.iter().zip(&got).all(|(a, b)| a.to_bits() == b.to_bits());
    let crc_equal = row[13] == format!("{:08x}", manifest["image_head_crc32"].as_u64().unwrap())
        && row[14] == format!("{:08x}", manifest["text_head_crc32"].as_u64().unwrap());
    let msg = format!(
        "rows alpha {} prior {} beta {}; alpha=0 row vs independent run: metrics bitwise {metrics_equal}, head crc {crc_equal}",
        alpha.len(),
        prior.len(),
        beta.len()
    );
    ensure(metrics_equal && crc_equal, || msg.clone())?;
    Ok(msg)
}

// ---------------------------------------------------------------- P8

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn norm(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Head parameters flattened as W1 (d×h), b1, W2 (h×d), b2, all row-major.
fn naive_head(p: &[f64], d: usize, h: usize, x: &[f64]) -> Vec<f64> {
    let u = norm(x);
    let (w1, rest) = p.split_at(d * h);
    let (b1, rest) = rest.split_at(h);
    let (w2, b2) = rest.split_at(h * d);
    let act: Vec<f64> = (0..h).map(|j| gelu((0..d).map(|i| u[i] * w1[i * h + j]).sum::<f64>() + b1[j])).collect();
    let r: Vec<f64> = (0..d).map(|k| u[k] + (0..h).map(|j| act[j] * w2[j * d + k]).sum::<f64>() + b2[k]).collect();
    norm(&r)
}

fn naive_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// CLIP-Refine objective written out element by element.
fn naive_objective(
    zi: &[Vec<f64>],
    zt: &[Vec<f64>],
    ti: &[Vec<f64>],
    tt: &[Vec<f64>],
    refs: &[Vec<f64>],
    cfg: &LossConfig,
) -> f64 {
    let b = zi.len();
    let mut rafa = 0.0;
    for k in 0..b {
        let di: f64 = zi[k].iter().zip(&refs[k]).map(|(x, y)| (x - y) * (x - y)).sum();
        let dt: f64 = zt[k].iter().zip(&refs[k]).map(|(x, y)| (x - y) * (x - y)).sum();
        rafa += 0.5 * (di + dt);
    }
    rafa /= b as f64;
    let kl_dir = |sa: &[Vec<f64>], sb: &[Vec<f64>], ta: &[Vec<f64>], tb: &[Vec<f64>]| {
        let mut total = 0.0;
        for i in 0..b {
            let q = naive_softmax(&(0..b).map(|j| dot(&ta[i], &tb[j]) / cfg.tau).collect::<Vec<_>>());
            let p = naive_softmax(&(0..b).map(|j| dot(&sa[i], &sb[j]) / cfg.tau).collect::<Vec<_>>());
            for j in 0..b {
                let t = cfg.alpha * if i == j { 1.0 } else { 0.0 } + (1.0 - cfg.alpha) * q[j];
                if t > 0.0 {
                    total += t * (t / p[j]).ln();
                }
            }
        }
        total / b as f64
    };
    let hycd = 0.5 * (kl_dir(zi, zt, ti, tt) + kl_dir(zt, zi, tt, ti));
    cfg.lambda_rafa * rafa + cfg.lambda_hycd * hycd
}

fn flat(head: &RefineHead) -> Vec<f64> {
    head.slices().iter().flat_map(|s| s.iter().copied()).collect()
}

fn p8() -> Outcome {
    let (d, h, n) = (2, 2, 2);
    let mut rng = substream(808, 0);
    let raw_i = gaussian(&mut rng, n, d);
    let raw_t = gaussian(&mut rng, n, d);
    let ds = PairedDataset::new(table_from(&raw_i, "i"), table_from(&raw_t, "t")).unwrap();
    // Raw rows as stored (f32) so the oracle sees exactly what the trainer sees.
    let (xi, xt) = (ds.images().to_f64(), ds.texts().to_f64());
    let random_head = |rng: &mut ChaCha8Rng| {
        RefineHead::from_parts(
            gaussian(rng, d, h) * 0.5,
            Array1::from_shape_simple_fn(h, || rng.random_range(-0.3..0.3)),
            gaussian(rng, h, d) * 0.5,
            Array1::from_shape_simple_fn(d, || rng.random_range(-0.3..0.3)),
        )
        .unwrap()
    };
    let heads = HeadPair {
        image: random_head(&mut rng),
        text: random_head(&mut rng),
    };
    let cfg = TrainConfig {
        batch_size: n,
        lr: 0.1,
        optimizer: OptimizerKind::PlainSgd,
        seed: 17,
        loss: LossConfig {
            tau: 0.5,
            ..LossConfig::default()
        },
        prior: PriorSpec::standard_gaussian(),
        ..TrainConfig::default()
    };
    let (updated, report) = trainer::train(&ds, heads.clone(), &cfg).unwrap();
    ensure(report.steps.len() == 1, || format!("{} steps", report.steps.len()))?;

    // Replay the trainer's batch order and reference draw.
    let order = shuffle_batches(n, n, cfg.seed, 0).remove(0);
    let refs_m = priors::sample(&cfg.prior, n, d, &mut substream(cfg.seed, streams::PRIOR)).unwrap();
    let rows = |m: &Array2<f64>| -> Vec<Vec<f64>> { order.iter().map(|&i| m.row(i).to_vec()).collect() };
    let (bi, bt) = (rows(&xi), rows(&xt));
    let refs: Vec<Vec<f64>> = refs_m.rows().into_iter().map(|r| r.to_vec()).collect();
    let ti: Vec<Vec<f64>> = bi.iter().map(|x| norm(x)).collect();
    let tt: Vec<Vec<f64>> = bt.iter().map(|x| norm(x)).collect();

    let pi0 = flat(&heads.image);
    let pt0 = flat(&heads.text);
    let loss = |pi: &[f64], pt: &[f64]| {
        let zi: Vec<Vec<f64>> = bi.iter().map(|x| naive_head(pi, d, h, x)).collect();
        let zt: Vec<Vec<f64>> = bt.iter().map(|x| naive_head(pt, d, h, x)).collect();
        naive_objective(&zi, &zt, &ti, &tt, &refs, &cfg.loss)
    };
    let step = 1e-5;
    let mut worst = 0.0f64;
    for (which, (p0, new)) in [(&pi0, flat(&updated.image)), (&pt0, flat(&updated.text))].into_iter().enumerate() {
        for k in 0..p0.len() {
            let mut up = p0.clone();
            up[k] += step;
            let mut down = p0.clone();
            down[k] -= step;
            let g = if which == 0 {
                (loss(&up, &pt0) - loss(&down, &pt0)) / (2.0 * step)
            } else {
                (loss(&pi0, &up) - loss(&pi0, &down)) / (2.0 * step)
            };
            let oracle = p0[k] - cfg.lr / 2.0 * g;
            worst = worst.max((oracle - new[k]).abs());
        }
    }
    let moved = updated.param_distance_sq(&heads).sqrt();
    let msg = format!("max |trainer - oracle| {worst:.1e} over {} params (update norm {moved:.2e})", pi0.len() * 2);
    ensure(worst <= 1e-6 && moved > 1e-4, || msg.clone())?;
    Ok(msg)
}

// ---------------------------------------------------------------- driver

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let root = dir.path().to_path_buf();
    let criteria: Vec<(&str, &str, Box<dyn Fn() -> Outcome>)> = vec![
        ("P1", "gradient correctness", Box::new(p1)),
        ("P2", "distribution invariants", Box::new(p2)),
        ("P3", "identity and retention", Box::new(p3)),
        ("P4", "metric oracles", Box::new(p4)),
        ("P5", "synthetic gap/uniformity/recall direction", Box::new({
            let r = root.clone();
            move || p5(&r)
        })),
        ("P6", "contrastive uniformity degradation", Box::new({
            let r = root.clone();
            move || p6(&r)
        })),
        ("P7", "determinism", Box::new({
            let r = root.clone();
            move || p7(&r)
        })),
        ("P8", "plain-step oracle", Box::new(p8)),
        ("P9", "sweep harness", Box::new({
            let r = root.clone();
            move || p9(&r)
        })),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with('P')).collect();
    let mut failed = 0;
    for (id, name, f) in &criteria {
        if !filter.is_empty() && !filter.iter().any(|x| x == id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id} {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
