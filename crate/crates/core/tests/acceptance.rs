//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each, and exits non-zero if any fails.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cpkd::gradsuite::{self, Component};
use cpkd::labels::one_hot;
use cpkd::logic::{default_rules, eval_hard, eval_soft, random_formula, Formula, PhaseTable, ScoreMatrix};
use cpkd::metrics::{frame_metrics, relaxed_metrics, FrameMetrics};
use cpkd::pipeline::{
    evaluate, infer, run_experiment, sample, train, Dataset, ExperimentConfig, InferConfig, ModelConfig, Sample,
    TrainConfig, Trained,
};
use cpkd::schedule::NoiseSchedule;
use cpkd::synth::{gen_dataset, ncm_accuracy, Split, SplitSizes, WorkflowSpec};
use cpkd::tensor_core::{softmin, Tape};

/// Epoch budget for every benchmark training run in this suite.
const EPOCHS: usize = 12;
const DATA_SEED: u64 = 42;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let mut worst: Vec<(Component, f64)> = Vec::new();
    for c in Component::ALL {
        let mut err = 0.0f64;
        for seed in 0..20 {
            match gradsuite::check(c, seed) {
                Ok(e) => err = err.max(e),
                Err(e) => return outcome(false, format!("{} seed {seed}: {e}", c.name())),
            }
        }
        worst.push((c, err));
    }
    let elapsed = start.elapsed();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let parts: Vec<String> = worst.iter().map(|(c, e)| format!("{}={e:.1e}", c.name())).collect();
    outcome(
        max < 1e-4 && elapsed < Duration::from_secs(120),
        format!("max rel err {max:.2e} [{}], {}", parts.join(" "), secs(elapsed)),
    )
}

fn c2_round_trip() -> Outcome {
    let start = Instant::now();
    let sched = NoiseSchedule::cosine(1000).expect("schedule");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for k in 0..50 {
        let t = rng.random_range(1..=60);
        let c = rng.random_range(2..=8);
        let labels: Vec<usize> = (0..t).map(|_| rng.random_range(0..c)).collect();
        let y0 = one_hot(&labels, c).expect("one-hot");
        let config = InferConfig {
            seed: k,
            ..InferConfig::default()
        };
        let out = match sample(|_, _| Ok(y0.clone()), t, c, &sched, &config) {
            Ok(o) => o,
            Err(e) => return outcome(false, e.to_string()),
        };
        let recovered = out.y0.map(|v| (v + 1.0) / 2.0);
        worst = worst.max(recovered.max_abs_diff(&y0));
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-6 && elapsed < Duration::from_secs(10),
        format!("sup-norm error {worst:.1e} over 50 sequences, {}", secs(elapsed)),
    )
}

fn soft_sign(f: &Formula, labels: &[usize], classes: usize, gamma: f64) -> bool {
    let tape = Tape::new();
    let scores = ScoreMatrix::from_labels(&tape, labels, classes).expect("scores");
    eval_soft(f, &scores, 0, gamma).expect("soft").item() > 0.0
}

fn c3_soundness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut agree, mut unresolved) = (0usize, 0usize);
    let n = 1000;
    for _ in 0..n {
        let classes = rng.random_range(2..=4);
        let frames = rng.random_range(1..=20);
        let labels: Vec<usize> = (0..frames).map(|_| rng.random_range(0..classes)).collect();
        let f = random_formula(&mut rng, 4, classes);
        let hard = eval_hard(&f, &labels, 0).expect("hard");
        if soft_sign(&f, &labels, classes, 1e-3) == hard {
            agree += 1;
        } else if soft_sign(&f, &labels, classes, 1e-4) != hard {
            unresolved += 1;
        }
    }
    let rate = agree as f64 / n as f64;
    let elapsed = start.elapsed();
    outcome(
        rate >= 0.999 && unresolved == 0 && elapsed < Duration::from_secs(30),
        format!(
            "agreement {:.1}% at gamma=1e-3, {} of {} disagreements left at gamma=1e-4, {}",
            100.0 * rate,
            unresolved,
            n - agree,
            secs(elapsed)
        ),
    )
}

fn c4_softmin_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0;
    let mut checked = 0;
    for gamma in [1.0, 0.1, 0.01] {
        for _ in 0..10_000 {
            let len = rng.random_range(1..=50);
            let scale = 10f64.powf(rng.random_range(-2.0..3.0));
            let v: Vec<f64> = (0..len).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
            let min = v.iter().copied().fold(f64::INFINITY, f64::min);
            let gap = (softmin(&v, gamma) - min).abs();
            // allow rounding of the final subtraction only
            let ulps = 4.0 * f64::EPSILON * min.abs().max(1.0);
            if gap > gamma * (len as f64).ln() + ulps {
                violations += 1;
            }
            checked += 1;
        }
    }
    outcome(violations == 0, format!("{violations} violations in {checked} vectors"))
}

struct Benchmark {
    _dir: tempfile::TempDir,
    train: Vec<Sample>,
    val: Vec<Sample>,
    test: Vec<Sample>,
    rules: Vec<Formula>,
    baseline: f64,
}

fn benchmark() -> cpkd::Result<Benchmark> {
    let dir = tempfile::tempdir().map_err(|e| cpkd::Error::Io {
        path: std::env::temp_dir(),
        source: e,
    })?;
    gen_dataset(&WorkflowSpec::default(), SplitSizes::default(), DATA_SEED, true, dir.path())?;
    let ds = Dataset::open(dir.path())?;
    let sigma = TrainConfig::default().sigma_boundary;
    let train = ds.load(Split::Train, sigma)?;
    let val = ds.load(Split::Val, sigma)?;
    let test = ds.load(Split::Test, sigma)?;
    let pairs = |s: &[Sample]| -> Vec<(Vec<usize>, cpkd::tensor_core::Tensor)> {
        s.iter().map(|x| (x.labels.clone(), x.features.clone())).collect()
    };
    let baseline = ncm_accuracy(8, &pairs(&train), &pairs(&test))?;
    Ok(Benchmark {
        _dir: dir,
        train,
        val,
        test,
        rules: default_rules(&PhaseTable::esd())?,
        baseline,
    })
}

fn train_cell(b: &Benchmark, seed: u64, lambda: f64) -> cpkd::Result<Trained> {
    let mut cfg = TrainConfig {
        epochs: EPOCHS,
        seed,
        ..TrainConfig::default()
    };
    cfg.weights.pl = lambda;
    train(&ModelConfig::default(), &b.train, &b.val, &cfg, &InferConfig::default(), &b.rules)
}

fn c5_benchmark(b: &Benchmark, model: &Trained, train_time: Duration) -> Outcome {
    let start = Instant::now();
    let (report, _) = match evaluate(&model.params, &b.test, &InferConfig::default(), &b.rules, 10) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let total = train_time + start.elapsed();
    let (acc, jac) = (report.strict.accuracy, report.strict.macro_jaccard);
    let pass = acc >= 0.90
        && jac >= 0.75
        && (0.70..=0.85).contains(&b.baseline)
        && acc - b.baseline >= 0.05
        && total < Duration::from_secs(1800);
    outcome(
        pass,
        format!(
            "test acc {acc:.4}, macro Jaccard {jac:.4}, NCM baseline acc {:.4}, margin {:+.1} pts, {} (best epoch {})",
            b.baseline,
            100.0 * (acc - b.baseline),
            secs(total),
            model.best_epoch
        ),
    )
}

fn c6_logic_effect(b: &Benchmark, seed0: &Trained) -> Outcome {
    let start = Instant::now();
    let mut rows = Vec::new();
    for seed in 0..3u64 {
        for lambda in [0.0, 0.1] {
            let trained;
            let model = if seed == 0 && lambda == 0.1 {
                seed0
            } else {
                trained = match train_cell(b, seed, lambda) {
                    Ok(t) => t,
                    Err(e) => return outcome(false, e.to_string()),
                };
                &trained
            };
            match evaluate(&model.params, &b.test, &InferConfig::default(), &b.rules, 10) {
                Ok((r, _)) => rows.push((lambda, r.mean_violations(), r.strict.macro_jaccard)),
                Err(e) => return outcome(false, e.to_string()),
            }
        }
    }
    let mean = |lambda: f64, pick: fn(&(f64, f64, f64)) -> f64| {
        let xs: Vec<f64> = rows.iter().filter(|r| r.0 == lambda).map(pick).collect();
        xs.iter().sum::<f64>() / xs.len() as f64
    };
    let (v0, v1) = (mean(0.0, |r| r.1), mean(0.1, |r| r.1));
    let (j0, j1) = (mean(0.0, |r| r.2), mean(0.1, |r| r.2));
    outcome(
        v1 <= v0 && j1 >= j0 - 0.01,
        format!(
            "violations/seq {v1:.3} (lambda 0.1) vs {v0:.3} (lambda 0); Jaccard {j1:.4} vs {j0:.4}; {}",
            secs(start.elapsed())
        ),
    )
}

fn r_squared(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    sxy * sxy / (sxx * syy)
}

fn c7_step_sweep(b: &Benchmark, model: &Trained) -> Outcome {
    let steps = [1usize, 2, 4, 8, 16, 32];
    let mut times = vec![f64::INFINITY; steps.len()];
    let mut jaccard = vec![0.0; steps.len()];
    // fastest of five round-robin passes, so a transient load spike cannot
    // land on every reading of one step count
    for _ in 0..5 {
        for (i, &s) in steps.iter().enumerate() {
            let config = InferConfig {
                steps: s,
                ..InferConfig::default()
            };
            let start = Instant::now();
            match evaluate(&model.params, &b.test, &config, &[], 10) {
                Ok((r, _)) => jaccard[i] = r.strict.macro_jaccard,
                Err(e) => return outcome(false, e.to_string()),
            }
            times[i] = times[i].min(start.elapsed().as_secs_f64());
        }
    }
    let x: Vec<f64> = steps.iter().map(|&s| s as f64).collect();
    let r2 = r_squared(&x, &times);
    let (j1, j8) = (jaccard[0], jaccard[3]);
    let t: Vec<String> = times.iter().map(|t| format!("{t:.2}")).collect();
    outcome(
        j8 >= j1 && r2 >= 0.95,
        format!("Jaccard 8-step {j8:.4} vs 1-step {j1:.4}; time R^2 {r2:.4} (s: {})", t.join("/")),
    )
}

fn c8_global_mask(b: &Benchmark, model: &Trained) -> Outcome {
    let config = InferConfig {
        mask: "G".into(),
        ..InferConfig::default()
    };
    let sched = NoiseSchedule::cosine(model.params.config().total_steps).expect("schedule");
    let (mut hit, mut total) = (0usize, 0usize);
    for s in &b.test {
        let probs = match infer(&model.params, &s.features, &sched, &config) {
            Ok(o) => o.probs,
            Err(e) => return outcome(false, e.to_string()),
        };
        let pred = probs.argmax_rows();
        hit += pred.iter().zip(&s.labels).filter(|(a, b)| a == b).count();
        total += s.labels.len();
    }
    let acc = hit as f64 / total as f64;
    let bar = 1.5 / 8.0;
    outcome(acc > bar, format!("global-mask accuracy {acc:.4} vs bar {bar:.4}"))
}

fn brute_force(pred: &[usize], truth: &[usize]) -> (f64, f64, f64, f64) {
    let classes: BTreeSet<usize> = pred.iter().chain(truth).copied().collect();
    let (mut p, mut r, mut j) = (0.0, 0.0, 0.0);
    for &c in &classes {
        let ps: BTreeSet<usize> = (0..pred.len()).filter(|&i| pred[i] == c).collect();
        let ts: BTreeSet<usize> = (0..truth.len()).filter(|&i| truth[i] == c).collect();
        let inter = ps.intersection(&ts).count();
        let union = ps.union(&ts).count();
        p += if ps.is_empty() { 0.0 } else { inter as f64 / ps.len() as f64 };
        r += if ts.is_empty() { 0.0 } else { inter as f64 / ts.len() as f64 };
        j += inter as f64 / union as f64;
    }
    let n = classes.len() as f64;
    let acc = (0..pred.len()).filter(|&i| pred[i] == truth[i]).count() as f64 / pred.len() as f64;
    (acc, p / n, r / n, j / n)
}

fn headline(m: &FrameMetrics) -> [f64; 4] {
    [m.accuracy, m.macro_precision, m.macro_recall, m.macro_jaccard]
}

fn c9_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut mismatches, mut relaxed_below) = (0, 0);
    for _ in 0..100 {
        let n = rng.random_range(1..=120);
        let c = rng.random_range(1..=6);
        let mut truth = Vec::with_capacity(n);
        let mut cur = rng.random_range(0..c);
        for _ in 0..n {
            if rng.random_bool(0.1) {
                cur = rng.random_range(0..c);
            }
            truth.push(cur);
        }
        let pred: Vec<usize> = truth
            .iter()
            .map(|&t| if rng.random_bool(0.3) { rng.random_range(0..c) } else { t })
            .collect();
        let strict = frame_metrics(&pred, &truth).expect("metrics");
        let (a, p, r, j) = brute_force(&pred, &truth);
        if headline(&strict) != [a, p, r, j] {
            mismatches += 1;
        }
        let window = rng.random_range(0..=15);
        let relaxed = relaxed_metrics(&pred, &truth, window).expect("relaxed");
        if headline(&relaxed).iter().zip(headline(&strict)).any(|(x, y)| *x < y) {
            relaxed_below += 1;
        }
    }
    outcome(
        mismatches == 0 && relaxed_below == 0,
        format!("{mismatches} oracle mismatches, {relaxed_below} relaxed<strict cases over 100 instances"),
    )
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("read_dir") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).expect("prefix").to_path_buf());
            }
        }
    }
    out.sort();
    out
}

const DETERMINISM_CONFIG: &str = r#"
[data]
dir = "data"
seed = 5
train = 12
val = 4
test = 4

[train]
epochs = 2
seed = 3

[infer]
seed = 7

[experiment]
out_dir = "runs"
mask_grid = ["N"]
lambda_pl = [0.0]
infer_steps = [1, 8]
"#;

fn c10_determinism() -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig::parse(DETERMINISM_CONFIG).expect("config");
    let dirs = [tempfile::tempdir().expect("tmp"), tempfile::tempdir().expect("tmp")];
    for d in &dirs {
        if let Err(e) = run_experiment(&cfg, d.path()) {
            return outcome(false, e.to_string());
        }
    }
    let out0 = dirs[0].path().join("runs");
    let out1 = dirs[1].path().join("runs");
    let files = files_under(&out0);
    if files != files_under(&out1) {
        return outcome(false, "runs produced different file sets");
    }
    let mut compared = [0usize; 3];
    for f in &files {
        if f.file_name().is_some_and(|n| n == "timing.txt") {
            continue;
        }
        let a = std::fs::read(out0.join(f)).expect("read");
        let b = std::fs::read(out1.join(f)).expect("read");
        if a != b {
            return outcome(false, format!("{} differs", f.display()));
        }
        match f.extension().and_then(|e| e.to_str()) {
            Some("ckpt") => compared[0] += 1,
            Some("csv") => compared[1] += 1,
            _ => compared[2] += 1,
        }
    }
    outcome(
        compared.iter().all(|&c| c > 0),
        format!(
            "{} checkpoints, {} CSVs, {} reports byte-identical, {}",
            compared[0],
            compared[1],
            compared[2],
            secs(start.elapsed())
        ),
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        println!("[{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };
    report("C1 gradient correctness", c1_gradients());
    report("C2 diffusion round-trip", c2_round_trip());
    report("C3 logic soundness", c3_soundness());
    report("C4 soft-min bound", c4_softmin_bound());

    let names = [
        "C5 synthetic benchmark",
        "C6 logic-constraint effect",
        "C7 step sweep",
        "C8 global-mask prior",
    ];
    let bench = benchmark().and_then(|b| {
        let start = Instant::now();
        let model = train_cell(&b, 0, TrainConfig::default().weights.pl)?;
        Ok((b, model, start.elapsed()))
    });
    match bench {
        Ok((b, model, train_time)) => {
            report(names[0], c5_benchmark(&b, &model, train_time));
            report(names[2], c7_step_sweep(&b, &model));
            report(names[3], c8_global_mask(&b, &model));
            report(names[1], c6_logic_effect(&b, &model));
        }
        Err(e) => {
            for n in names {
                report(n, outcome(false, format!("benchmark setup failed: {e}")));
            }
        }
    }
    report("C9 metrics oracle", c9_metrics());
    report("C10 determinism", c10_determinism());

    let failed = results.iter().filter(|r| !r.1.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
