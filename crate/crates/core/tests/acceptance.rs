//! Acceptance suite: one PASS/FAIL/SKIP line per criterion, non-zero exit
//! on any failure. Run with `cargo test -p artgesture-core --test acceptance`.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use artgesture_core::autograd::{Graph, Tensor};
use artgesture_core::data::synthetic::{generate, SyntheticConfig, SyntheticMode};
use artgesture_core::data::{BBox, ExampleLoader, PreprocessConfig};
use artgesture_core::evaluation::{
    aggregate_runs, collect_rows, confusion_matrix, evaluate_split, macro_f1, per_class_f1, predict_instances,
    render_report, EvalOptions, MultiRunSummary, ReportFormat,
};
use artgesture_core::inference::{predict, Detection, InferConfig};
use artgesture_core::model::{
    build_model, load_checkpoint, save_checkpoint, BackboneFamily, BackboneSpec, FusionHeadConfig, ModelConfig,
    TwoStreamModel, Variant,
};
use artgesture_core::training::{train, TrainConfig, TrainOptions};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: Option<bool>,
    detail: String,
}

impl Outcome {
    fn check(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed: Some(passed), detail: detail.into() }
    }
}

fn tiny_model_config(context: bool, classes: usize) -> ModelConfig {
    ModelConfig {
        crop: BackboneSpec::new(BackboneFamily::TinyTest, 16),
        context: context.then(|| BackboneSpec::new(BackboneFamily::TinyTest, 32)),
        head: FusionHeadConfig::default(),
        num_classes: classes,
    }
}

fn loader(cfg: &SyntheticConfig, dir: &std::path::Path) -> ExampleLoader {
    let manifest = generate(cfg, dir).expect("synthetic data");
    ExampleLoader::new(Arc::new(manifest), PreprocessConfig { crop_size: 16, context_size: 32, ..Default::default() }).unwrap()
}

fn train_accuracy(model: &TwoStreamModel, loader: &ExampleLoader, variant: Variant) -> f64 {
    evaluate_split(model, loader, "train", variant, &EvalOptions::default()).unwrap().accuracy
}

fn overfit_config(seed: u64) -> TrainConfig {
    TrainConfig { epochs: 50, batch_size: 16, seed, ..Default::default() }
}

fn brute_force_f1(preds: &[usize], labels: &[usize], c: usize) -> (Vec<Vec<u64>>, Vec<f64>, f64) {
    let mut cm = vec![vec![0u64; c]; c];
    for i in 0..c {
        for j in 0..c {
            cm[i][j] = preds.iter().zip(labels).filter(|(p, y)| **y == i && **p == j).count() as u64;
        }
    }
    let f1: Vec<f64> = (0..c)
        .map(|k| {
            let tp = preds.iter().zip(labels).filter(|(p, y)| **p == k && **y == k).count() as f64;
            let fp = preds.iter().zip(labels).filter(|(p, y)| **p == k && **y != k).count() as f64;
            let fneg = preds.iter().zip(labels).filter(|(p, y)| **p != k && **y == k).count() as f64;
            let precision = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
            let recall = if tp + fneg == 0.0 { 0.0 } else { tp / (tp + fneg) };
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        })
        .collect();
    let mean = f1.iter().sum::<f64>() / c as f64;
    (cm, f1, mean)
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut cm_mismatch = 0;
    for _ in 0..1000 {
        let c = rng.random_range(2..=8);
        let n = rng.random_range(1..=200);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let cm = confusion_matrix(&preds, &labels, c).unwrap();
        let (oracle_cm, oracle_f1, oracle_macro) = brute_force_f1(&preds, &labels, c);
        if cm.rows() != oracle_cm {
            cm_mismatch += 1;
        }
        for (a, b) in per_class_f1(&cm).iter().zip(&oracle_f1) {
            worst = worst.max((a - b).abs());
        }
        worst = worst.max((macro_f1(&cm) - oracle_macro).abs());
    }
    let elapsed = start.elapsed();
    Outcome::check(
        cm_mismatch == 0 && worst <= 1e-9 && elapsed < Duration::from_secs(10),
        format!("1000 sets: {cm_mismatch} confusion mismatches, max |F1 diff| {worst:.1e} (<= 1e-9), {:.2}s (< 10s)", elapsed.as_secs_f64()),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut flags_ok = true;
    for i in 0..1000 {
        let n = if i % 10 == 0 { 1 } else { rng.random_range(2..=20) };
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..100.0)).collect();
        let agg = aggregate_runs(&xs).unwrap();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = if n > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        worst = worst.max((agg.mean - mean).abs()).max((agg.std - std).abs());
        flags_ok &= agg.single_run == (n == 1) && agg.n == n;
    }
    Outcome::check(
        worst <= 1e-12 && flags_ok,
        format!("1000 lists: max deviation from two-pass formula {worst:.1e} (<= 1e-12), single_run flags {}", if flags_ok { "correct" } else { "WRONG" }),
    )
}

fn criterion_4() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let loader = loader(&SyntheticConfig::default(), dir.path());
    let start = Instant::now();
    let mut model = build_model(&tiny_model_config(true, 6), loader.manifest().labels.clone(), 0).unwrap();
    let state = train(&mut model, &loader, &overfit_config(0), &TrainOptions::default()).unwrap();
    let elapsed = start.elapsed();
    let acc = train_accuracy(&model, &loader, Variant::WithContext);
    Outcome::check(
        acc >= 0.95 && state.epochs_run() <= 50 && elapsed < Duration::from_secs(120),
        format!("train accuracy {acc:.3} (>= 0.95) after {} epochs in {:.1}s (< 120s)", state.epochs_run(), elapsed.as_secs_f64()),
    )
}

fn criterion_5() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig { mode: SyntheticMode::ContextOnly, ..Default::default() };
    let loader = loader(&cfg, dir.path());
    let labels = loader.manifest().labels.clone();

    // (a) input gradients of both streams.
    let model = build_model(&tiny_model_config(true, 6), labels.clone(), 0).unwrap();
    let instances = loader.manifest().split_instances("train").unwrap();
    let batch = loader.batch(&instances[..8], None, 0).unwrap();
    let g = Graph::eval_with_grad();
    let crop = g.input(batch.crop.clone());
    let ctx = g.input(batch.context.clone());
    let logits = model.forward(&g, &crop, Some(&ctx), Variant::WithContext).unwrap();
    let loss = g.weighted_cross_entropy(&logits, &batch.labels, &[1.0; 6], 0.0);
    let grads = g.backward(&loss);
    let norm = |t: Option<&Tensor>| t.map_or(0.0, |t| t.iter().map(|v| (v * v) as f64).sum::<f64>().sqrt());
    let (gc, gx) = (norm(grads.of(&crop)), norm(grads.of(&ctx)));
    let a = gc > 0.0 && gx > 0.0;

    // (b) labels decidable only from the context.
    let mut lines = vec![format!("(a) |dL/dcrop| {gc:.2e}, |dL/dcontext| {gx:.2e}")];
    let mut b = true;
    for seed in 0..5u64 {
        let mut with = build_model(&tiny_model_config(true, 6), labels.clone(), seed).unwrap();
        train(&mut with, &loader, &overfit_config(seed), &TrainOptions::default()).unwrap();
        let acc_with = train_accuracy(&with, &loader, Variant::WithContext);
        let mut without = build_model(&tiny_model_config(false, 6), labels.clone(), seed).unwrap();
        train(&mut without, &loader, &overfit_config(seed), &TrainOptions::default()).unwrap();
        let acc_without = train_accuracy(&without, &loader, Variant::WithoutContext);
        b &= acc_with >= 0.90 && acc_without <= 0.40;
        lines.push(format!("(b) seed {seed}: with {acc_with:.3} (>= 0.90), without {acc_without:.3} (<= 0.40)"));
    }
    Outcome::check(a && b, lines.join("; "))
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn criterion_6() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig { per_class: 3, ..Default::default() };
    let loader = loader(&cfg, dir.path());
    let labels = loader.manifest().labels.clone();
    let model = build_model(&tiny_model_config(true, 6), labels.clone(), 11).unwrap();
    let instances = loader.manifest().split_instances("train").unwrap();
    let batch = loader.batch(&instances[..5], None, 0).unwrap();
    let mut notes = Vec::new();

    // Branch isolation.
    let ids = |prefix: &str| -> HashSet<_> {
        model.named_params().into_iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, p)| p.id()).collect()
    };
    let disjoint = ids("crop.").is_disjoint(&ids("context."));
    let features = |crop: &Tensor, ctx: &Tensor| {
        let g = Graph::inference();
        let (p, c) = model.extract_features(&g, &g.constant(crop.clone()), Some(&g.constant(ctx.clone()))).unwrap();
        (p.into_value(), c.unwrap().into_value())
    };
    let (p0, c0) = features(&batch.crop, &batch.context);
    let (p1, _) = features(&batch.crop, &batch.context.mapv(|v| -v));
    let (_, c2) = features(&batch.crop.mapv(|v| v * 0.5 + 1.0), &batch.context);
    let isolation = disjoint && p0 == p1 && c0 == c2;
    notes.push(format!("branch isolation {}", if isolation { "ok" } else { "BROKEN" }));

    // Checkpoint round trip.
    let ckpt = dir.path().join("m.ckpt");
    save_checkpoint(&model, &ckpt).unwrap();
    let (loaded, header) = load_checkpoint(&ckpt).unwrap();
    let params_equal = model
        .named_params()
        .iter()
        .zip(loaded.named_params())
        .all(|((na, a), (nb, b))| *na == nb && a.value().iter().map(|v| v.to_bits()).eq(b.value().iter().map(|v| v.to_bits())));
    let mut cfg_no_pretrain = model.config().clone();
    cfg_no_pretrain.crop.pretrained = false;
    let round_trip = params_equal
        && loaded.config() == &cfg_no_pretrain
        && loaded.labels() == &labels
        && header.labels == labels
        && loaded.predict_logits(&batch.crop, Some(&batch.context), Variant::WithContext).unwrap()
            == model.predict_logits(&batch.crop, Some(&batch.context), Variant::WithContext).unwrap();
    notes.push(format!("checkpoint round trip {}", if round_trip { "bitwise" } else { "DIFFERS" }));

    // Batched vs single prediction.
    let batched = predict_instances(&model, &loader, &instances[..5], Variant::WithContext, 5).unwrap();
    let single = predict_instances(&model, &loader, &instances[..5], Variant::WithContext, 1).unwrap();
    let eval_diff = max_abs_diff(&batched.into_dyn(), &single.into_dyn());
    let image = RgbImage::from_fn(48, 40, |x, y| Rgb([(x * 5) as u8, (y * 6) as u8, ((x * y) % 251) as u8]));
    let dets: Vec<Detection> = [(0.0, 0.0, 20.0, 20.0), (8.0, 4.0, 30.0, 30.0), (20.0, 10.0, 28.0, 30.0), (1.0, 2.0, 6.0, 9.0), (0.0, 0.0, 48.0, 40.0)]
        .into_iter()
        .map(|(x, y, w, h)| Detection::new(BBox::new(x, y, w, h), 1.0))
        .collect();
    let all = predict(&model, "img", &image, &dets, &InferConfig::default()).unwrap().predictions;
    let mut infer_diff = 0.0f64;
    for (d, p) in dets.iter().zip(&all) {
        let one = predict(&model, "img", &image, std::slice::from_ref(d), &InferConfig::default()).unwrap().predictions;
        for (a, b) in one[0].full_distribution.iter().zip(&p.full_distribution) {
            infer_diff = infer_diff.max((a - b).abs());
        }
    }
    let batching = all.len() == 5 && eval_diff <= 1e-5 && infer_diff <= 1e-5;
    notes.push(format!("batched vs single: logits {eval_diff:.1e}, distributions {infer_diff:.1e} (<= 1e-5)"));

    // Seeded determinism.
    let run = |seed| {
        let mut m = build_model(&tiny_model_config(true, 6), labels.clone(), seed).unwrap();
        let cfg = TrainConfig { epochs: 2, batch_size: 8, seed, ..Default::default() };
        let state = train(&mut m, &loader, &cfg, &TrainOptions::default()).unwrap();
        let params: Vec<Tensor> = m.named_params().into_iter().map(|(_, p)| p.value().clone()).collect();
        (state.history, params)
    };
    let (a, b, c) = (run(4), run(4), run(5));
    let deterministic = a == b && a.0 != c.0;
    notes.push(format!("same-seed training {}", if deterministic { "identical" } else { "NOT REPRODUCIBLE" }));

    Outcome::check(isolation && round_trip && batching && deterministic, notes.join("; "))
}

fn criterion_7() -> Outcome {
    let table = [
        ("HRNet-W32", Variant::WithoutContext, 17.3, 1.8),
        ("HRNet-W32", Variant::WithContext, 37.1, 2.8),
        ("ResNet-101", Variant::WithoutContext, 34.2, 1.8),
        ("ResNet-101", Variant::WithContext, 36.7, 1.9),
        ("ResNet-50", Variant::WithoutContext, 31.1, 2.0),
        ("ResNet-50", Variant::WithContext, 36.8, 1.9),
        ("SwinV2", Variant::WithoutContext, 15.8, 1.9),
        ("SwinV2", Variant::WithContext, 18.7, 1.9),
    ];
    let expected = ["17.3 ± 1.8", "37.1 ± 2.8", "34.2 ± 1.8", "36.7 ± 1.9", "31.1 ± 2.0", "36.8 ± 1.9", "15.8 ± 1.9", "18.7 ± 1.9"];
    let rows: Vec<MultiRunSummary> = table.iter().map(|&(b, v, m, s)| MultiRunSummary::from_stats(b, v, m, s, 5)).collect();
    let md = render_report(&rows, ReportFormat::Markdown).unwrap();
    let found = table
        .iter()
        .zip(expected)
        .filter(|((b, v, _, _), cell)| md.contains(&format!("| {b} | {} | {cell} |", v.label())))
        .count();
    Outcome::check(found == 8, format!("{found}/8 cells reproduced verbatim"))
}

/// Directional check on real test-split results, given as report or metrics
/// JSON files listed in `ARTGESTURE_FULL_RESULTS` (colon-separated).
fn criterion_8() -> Outcome {
    let Some(list) = std::env::var_os("ARTGESTURE_FULL_RESULTS") else {
        return Outcome { passed: None, detail: "optional; set ARTGESTURE_FULL_RESULTS to full-scale result files".into() };
    };
    let docs: Vec<serde_json::Value> = std::env::split_paths(&list)
        .map(|p| serde_json::from_slice(&std::fs::read(&p).unwrap()).unwrap())
        .collect();
    let rows = collect_rows(&docs).unwrap();
    let find = |v: Variant| rows.iter().find(|r| r.backbone == "ResNet-50" && r.variant == v).map(|r| r.mean_f1);
    match (find(Variant::WithContext), find(Variant::WithoutContext)) {
        (Some(with), Some(without)) => Outcome::check(with > without, format!("ResNet-50 test macro-F1: with {with:.1} vs without {without:.1}")),
        _ => Outcome::check(false, "results lack a ResNet-50 row for both variants"),
    }
}

fn main() {
    let criteria: [(&str, &str, fn() -> Outcome); 7] = [
        ("2", "metrics match brute force", criterion_2),
        ("3", "run aggregation", criterion_3),
        ("4", "overfit synthetic 6x10 with tiny_test backbones", criterion_4),
        ("5", "context mechanism", criterion_5),
        ("6", "module invariants", criterion_6),
        ("7", "report renders the published result cells", criterion_7),
        ("8", "full-scale ResNet-50 direction", criterion_8),
    ];
    let mut failed = 0;
    for (id, title, run) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Outcome::check(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        let status = match outcome.passed {
            Some(true) => "PASS",
            Some(false) => {
                failed += 1;
                "FAIL"
            }
            None => "SKIP",
        };
        println!("criterion {id} {status}  {title}: {}", outcome.detail);
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
