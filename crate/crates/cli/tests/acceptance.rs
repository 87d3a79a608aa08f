//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criterion 6 trains four 30-epoch models and is only run when
//! `LCDNET_ACCEPTANCE_FULL=1`; `LCDNET_ACCEPTANCE_DIR` keeps its outputs.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use lcdnet::data::{make_batch, synthetic_pair, SamplePair, SyntheticConfig};
use lcdnet::ffm::{self, FfmVars, FusionMode};
use lcdnet::gmm::{gate, gate_factors, NormReading, GMM_EPS};
use lcdnet::metrics::{compute_metrics, iou_from_f1, ConfusionCounts};
use lcdnet::profiler::{ComplexityReport, REFERENCE_GFLOPS, REFERENCE_PARAMS};
use lcdnet::tensor::{Graph, Shape, Tensor};
use lcdnet::tif::{exchange_tensors, ExchangeMask};
use lcdnet::trainer::{train_step, AdamW, TrainConfig};
use lcdnet::{gradsuite, LcdNet, ModelConfig};
use lcdnet_cli::{run, EXIT_OK, METRICS_CSV};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn cli(args: &[&str]) -> bool {
    run(std::iter::once("lcdnet").chain(args.iter().copied())) == EXIT_OK
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn complexity() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    if !cli(&["profile", "--format", "csv", "--out", p(dir.path())]) {
        return Outcome::Fail("profile command failed".into());
    }
    let text = fs::read_to_string(dir.path().join("profile.csv")).unwrap();
    let r = ComplexityReport::from_csv(&text, (256, 256)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let conv = r.closer_convention(REFERENCE_GFLOPS);
    let params = r.total_params() as f64;
    let gflops = r.flops(conv) as f64 / 1e9;
    let dp = params / REFERENCE_PARAMS - 1.0;
    let dg = gflops / REFERENCE_GFLOPS - 1.0;
    check(
        dp.abs() <= 0.20 && dg.abs() <= 0.25 && secs < 5.0,
        format!(
            "params {:.3}M ({:+.1}%), GFLOPs {gflops:.3} under {} ({:+.1}%), {secs:.2}s",
            params / 1e6,
            100.0 * dp,
            conv.label(),
            100.0 * dg
        ),
    )
}

fn metric_identity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst = 0.0f64;
    let mut n = 0;
    while n < 1000 {
        let c = ConfusionCounts::new(
            rng.random_range(0..1_000_000),
            rng.random_range(0..1_000_000),
            rng.random_range(0..1_000_000),
            rng.random_range(0..1_000_000),
        );
        let m = compute_metrics(&c).unwrap();
        if let (Some(f1), Some(iou)) = (m.f1, m.iou) {
            worst = worst.max((iou - f1 / (2.0 - f1)).abs());
            n += 1;
        }
    }
    let pairs_ok = [(91.48, 84.30), (81.22, 68.38), (59.29, 42.14)]
        .iter()
        .all(|&(f1, iou)| format!("{:.2}", 100.0 * iou_from_f1(f1 / 100.0)) == format!("{iou:.2}"));
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < 1e-9 && pairs_ok && secs < 1.0,
        format!("max |iou - f1/(2-f1)| {worst:.1e} over 1000 counts, reference pairs reproduced: {pairs_ok}, {secs:.2}s"),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let results = gradsuite::run(gradsuite::MIN_TRIALS, 0).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let has = |k: &str| results.iter().any(|r| r.name.contains(k));
    let blocks = has("ffm") && has("gmm") && has("decoder_level") && has("tiny_model[2x3x32x32]");
    check(
        failed.is_empty() && blocks && secs < 600.0,
        format!(
            "{} checks, worst rel error {worst:.2e}, failures {failed:?}, blocks covered: {blocks}, {secs:.2}s",
            results.len()
        ),
    )
}

fn scalar_gmm(x: &[f64], c: usize, hw: usize, alpha: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let ed: Vec<f64> = (0..c)
        .map(|k| alpha[k] * (x[k * hw..(k + 1) * hw].iter().map(|v| v * v).sum::<f64>() + eps).sqrt())
        .collect();
    let ms = ed.iter().map(|e| e * e).sum::<f64>() / c as f64;
    (0..c).map(|k| 1.0 + (ed[k] * gamma[k] / (ms + eps).sqrt() + beta[k]).tanh()).collect()
}

fn gmm_on(x: &Tensor<f64>, alpha: &[f64], gamma: &[f64], beta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let c = x.shape().c;
    let mut g = Graph::no_grad();
    let xv = g.leaf(x.clone());
    let vec = |g: &mut Graph<f64>, v: &[f64]| g.leaf(Tensor::from_f64s(Shape::channels(c), v).unwrap());
    let (a, ga, b) = (vec(&mut g, alpha), vec(&mut g, gamma), vec(&mut g, beta));
    let f = gate_factors(&mut g, xv, a, ga, b, GMM_EPS, NormReading::MeanOfSquares).unwrap();
    let y = gate(&mut g, xv, a, ga, b, GMM_EPS, NormReading::MeanOfSquares).unwrap();
    (g.value(f).data().to_vec(), g.value(y).data().to_vec())
}

fn ffm_scalar(x1: f64, x2: f64) -> f64 {
    let s = Shape::new(1, 1, 1, 1);
    let mut g = Graph::no_grad();
    let mut leaf = |v: f64| g.leaf(Tensor::from_f64s(s, &[v]).unwrap());
    let (a, b, w1, b1, w2, b2) = (leaf(x1), leaf(x2), leaf(1.0), leaf(0.0), leaf(1.0), leaf(0.0));
    let d = ffm::fuse(&mut g, a, b, Some(FfmVars { w1, b1, conv2: Some((w2, b2)) }), FusionMode::Ffm).unwrap();
    g.value(d).data()[0]
}

fn module_invariants() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut notes = Vec::new();

    let x = Tensor::<f64>::uniform(Shape::new(2, 6, 4, 4), -3.0, 3.0, &mut rng);
    let (_, y) = gmm_on(&x, &[1.0; 6], &[0.0; 6], &[0.0; 6]);
    let identity = y == x.data();
    notes.push(format!("gmm identity {identity}"));

    let mut in_range = true;
    for _ in 0..10_000 {
        let x = Tensor::<f64>::uniform(Shape::new(1, 4, 2, 2), -5.0, 5.0, &mut rng);
        let p: Vec<f64> = (0..12).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (f, _) = gmm_on(&x, &p[0..4], &p[4..8], &p[8..12]);
        in_range &= f.iter().all(|&v| v > 0.0 && v < 2.0);
    }
    notes.push(format!("gate in (0,2) {in_range}"));

    let x = Tensor::from_f64s(Shape::new(1, 2, 1, 2), &[3.0, 4.0, 0.0, 0.0]).unwrap();
    let (f, _) = gmm_on(&x, &[1.0, 1.0], &[1.0, 1.0], &[0.0, 0.0]);
    let oracle = scalar_gmm(x.data(), 2, 2, &[1.0, 1.0], &[1.0, 1.0], &[0.0, 0.0], GMM_EPS);
    let worked = (0..2).all(|k| (f[k] - oracle[k]).abs() < 1e-6)
        && (f[0] - 1.888386).abs() < 1e-6
        && (f[1] - 1.000894).abs() < 1e-6;
    notes.push(format!("gmm worked example {worked}"));

    let f1 = Tensor::<f64>::uniform(Shape::new(2, 8, 3, 3), -1.0, 1.0, &mut rng);
    let f2 = Tensor::<f64>::uniform(Shape::new(2, 8, 3, 3), -1.0, 1.0, &mut rng);
    let mask = ExchangeMask::new(8, 0.5).unwrap();
    let (a, b) = exchange_tensors(&f1, &f2, &mask).unwrap();
    let (c, d) = exchange_tensors(&a, &b, &mask).unwrap();
    let involution = c.data() == f1.data() && d.data() == f2.data();
    let with = LcdNet::<f32>::new(&ModelConfig::default()).unwrap().profile((256, 256)).unwrap();
    let without = LcdNet::<f32>::new(&ModelConfig { tif: false, ..ModelConfig::default() }).unwrap().profile((256, 256)).unwrap();
    let zero_params = with.total_params() == without.total_params()
        && with.rows.iter().filter(|r| r.layer.starts_with("tif.")).count() == 3
        && with.rows.iter().filter(|r| r.layer.starts_with("tif.")).all(|r| r.params == 0 && r.macs == 0);
    notes.push(format!("tif involution {involution}, zero params {zero_params}"));

    let ffm_ok = (ffm_scalar(2.0, 3.0) - 18.0).abs() < 1e-6 && ffm_scalar(-1.0, 3.0).abs() < 1e-6;
    notes.push(format!("ffm examples {ffm_ok}"));

    let secs = start.elapsed().as_secs_f64();
    check(
        identity && in_range && worked && involution && zero_params && ffm_ok && secs < 60.0,
        format!("{}, {secs:.2}s", notes.join(", ")),
    )
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let data: Vec<SamplePair> = (0..8).map(|i| synthetic_pair(&SyntheticConfig::default(), i)).collect();
    let refs: Vec<&SamplePair> = data.iter().collect();
    let b = make_batch::<f32>(&refs).unwrap();
    let mut model = LcdNet::<f32>::new(&ModelConfig::default()).unwrap();
    let cfg = TrainConfig::default();
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut last = f64::NAN;
    for step in 1..=500 {
        last = train_step(&mut model, &mut opt, &b.t1, &b.t2, &b.label).unwrap();
        if last < 0.05 {
            let secs = start.elapsed().as_secs_f64();
            return check(secs < 300.0, format!("loss {last:.4} < 0.05 at step {step}, {secs:.1}s"));
        }
    }
    Outcome::Fail(format!("loss {last:.4} after 500 steps, {:.1}s", start.elapsed().as_secs_f64()))
}

fn read_scores(csv: &Path) -> Option<(f64, f64)> {
    let text = fs::read_to_string(csv).ok()?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next()?.split(',').collect();
    let row: Vec<&str> = lines.next()?.split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).and_then(|i| row[i].parse::<f64>().ok());
    Some((col("f1")?, col("iou")?))
}

fn desk_scale() -> Outcome {
    if std::env::var("LCDNET_ACCEPTANCE_FULL").as_deref() != Ok("1") {
        return Outcome::Skip("four 30-epoch trainings; set LCDNET_ACCEPTANCE_FULL=1 to run".into());
    }
    let start = Instant::now();
    let keep = std::env::var("LCDNET_ACCEPTANCE_DIR").ok();
    let tmp = tempfile::tempdir().unwrap();
    let root = keep.as_deref().map(Path::new).unwrap_or(tmp.path()).to_path_buf();
    let data = root.join("syn");
    if !cli(&["gen-synthetic", "--out", p(&data), "--pairs", "1000", "--size", "64", "--density", "0.1", "--seed", "0"]) {
        return Outcome::Fail("gen-synthetic failed".into());
    }
    let variants: [(&str, &[&str]); 4] = [
        ("full", &[]),
        ("no-gmm", &["--no-gmm"]),
        ("no-gmm-no-ffm", &["--no-gmm", "--no-ffm"]),
        ("backbone-only", &["--no-tif", "--no-ffm", "--no-gmm"]),
    ];
    let mut scores = Vec::new();
    for (name, flags) in variants {
        let out = root.join(name);
        let mut args = vec!["train", "--data", p(&data), "--out", p(&out), "--epochs", "30", "--seed", "0"];
        args.extend_from_slice(flags);
        if !cli(&args) {
            return Outcome::Fail(format!("training {name} failed"));
        }
        let eval = out.join("eval");
        let ckpt = out.join("best.lcdn");
        if !cli(&["eval", "--data", p(&data), "--checkpoint", p(&ckpt), "--out", p(&eval), "--split", "test", "--no-maps"]) {
            return Outcome::Fail(format!("eval {name} failed"));
        }
        match read_scores(&eval.join(METRICS_CSV)) {
            Some(s) => scores.push((name, s)),
            None => return Outcome::Fail(format!("no scores for {name}")),
        }
    }
    let elapsed = start.elapsed();
    let (f1, iou) = scores[0].1;
    let ordered = scores.windows(2).all(|w| w[0].1 .0 >= w[1].1 .0);
    let table: Vec<String> = scores.iter().map(|(n, (f, i))| format!("{n} f1 {f:.4} iou {i:.4}")).collect();
    check(
        f1 >= 0.85 && iou >= 0.74 && ordered && elapsed < Duration::from_secs(30 * 60),
        format!(
            "{}; ordering holds: {ordered}; {:.1} min",
            table.join(", "),
            elapsed.as_secs_f64() / 60.0
        ),
    )
}

fn determinism() -> Outcome {
    let start = Instant::now();
    let pipeline = |root: &Path| -> Option<Vec<u8>> {
        let data = root.join("data");
        let model = root.join("model");
        let eval = root.join("eval");
        let ok = cli(&["gen-synthetic", "--out", p(&data), "--pairs", "20", "--size", "32", "--seed", "7", "--test-fraction", "0.25"])
            && cli(&["train", "--data", p(&data), "--out", p(&model), "--model", "tiny", "--epochs", "2", "--seed", "7"])
            && cli(&["eval", "--data", p(&data), "--checkpoint", p(&model.join("last.lcdn")), "--out", p(&eval)]);
        ok.then(|| fs::read(eval.join(METRICS_CSV)).ok()).flatten()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (m1, m2) = (pipeline(a.path()), pipeline(b.path()));
    let csv_equal = m1.is_some() && m1 == m2;

    let mut model = LcdNet::<f32>::new(&ModelConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t1 = Tensor::<f32>::uniform(Shape::new(2, 3, 64, 64), -1.0, 1.0, &mut rng);
    let t2 = Tensor::<f32>::uniform(Shape::new(2, 3, 64, 64), -1.0, 1.0, &mut rng);
    let path = a.path().join("rt.lcdn");
    model.save_checkpoint(&path, 0, None).unwrap();
    let mut back = LcdNet::<f32>::load_checkpoint(&path).unwrap();
    let (x0, x1) = model.forward(&t1, &t2).unwrap();
    let (y0, y1) = back.forward(&t1, &t2).unwrap();
    let bit_identical = x0.data() == y0.data() && x1.data() == y1.data();
    let secs = start.elapsed().as_secs_f64();
    check(
        csv_equal && bit_identical,
        format!("metric CSVs byte-identical: {csv_equal}, checkpoint forward bit-identical: {bit_identical}, {secs:.1}s"),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 complexity", complexity),
        ("2 metric identity", metric_identity),
        ("3 gradient suite", gradient_suite),
        ("4 module invariants", module_invariants),
        ("5 overfit", overfit),
        ("6 desk-scale training and ablations", desk_scale),
        ("7 full-dataset accuracy", || {
            Outcome::Skip("not a desk-scale target; covered only through the identities of criterion 2".into())
        }),
        ("8 determinism and serialization", determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match f() {
            Outcome::Pass(d) => println!("criterion {name}: PASS ({d})"),
            Outcome::Fail(d) => {
                failed += 1;
                println!("criterion {name}: FAIL ({d})");
            }
            Outcome::Skip(d) => println!("criterion {name}: N/A ({d})"),
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
