//! Acceptance gate. Each test prints one `criterion N: PASS|FAIL` line and
//! asserts on it. Tests share a lock so the wall-time budgets are measured
//! without other tests competing for the CPU.
//!
//! cargo test --release --test acceptance -- --nocapture

use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use patkit::dataio::events::{clip_count, span_us};
use patkit::dataio::{
    clip_dataset, gen_gestures, gen_shapes, stream_accuracy, system_prediction, window_events, ClipSpec, EventRecord,
    GestureSpec, ShapeSpec,
};
use patkit::geometry::{fps, PointCloud};
use patkit::model::{evaluate, parse_plan, train, Control, PatConfig, PatModel, Sample, TrainOptions};
use patkit::props::{self, SuiteConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

const TOL_F32: f64 = 1e-5;
const TOL_F64: f64 = 1e-10;
const GRAD_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;
const GUMBEL_TOL: f64 = 0.01;
const GSS_TOL: f64 = 0.02;

const SHAPES_TARGET: f64 = 0.95;
const SHAPES_MAX_EPOCHS: usize = 30;
const SHAPES_BUDGET: Duration = Duration::from_secs(20 * 60);
const VARIANT_GAP: f64 = 0.03;
/// Variants stop early once they reach this; otherwise they get this many epochs.
const VARIANT_STOP: f64 = 0.99;
const VARIANT_EPOCHS: usize = 6;

const GESTURE_TARGET: f64 = 0.9;
const GESTURE_BUDGET: Duration = Duration::from_secs(15 * 60);

fn suite() -> SuiteConfig {
    SuiteConfig {
        seed: 0,
        trials: None,
        tol32: TOL_F32,
        tol64: TOL_F64,
        grad_tol: GRAD_TOL,
        grad_step: GRAD_STEP,
        gumbel_tol: GUMBEL_TOL,
        gss_tol: GSS_TOL,
    }
}

/// Runs the named properties at their default trial counts and returns the
/// failure messages and the total time.
fn run_props(names: &[&str]) -> (Vec<String>, Duration) {
    let cfg = suite();
    let mut failures = Vec::new();
    let mut total = Duration::ZERO;
    for name in names {
        let outcome = props::find(name).unwrap_or_else(|| panic!("no property {name}")).run(&cfg);
        total += outcome.elapsed;
        if let Some(dump) = outcome.counterexample() {
            failures.push(dump);
        }
    }
    (failures, total)
}

fn verdict(n: usize, ok: bool, detail: &str) {
    println!("criterion {n}: {} {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} failed: {detail}");
}

fn prop_criterion(n: usize, names: &[&str], budget: Option<Duration>) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let (failures, elapsed) = run_props(names);
    let in_time = budget.is_none_or(|b| elapsed <= b);
    let detail = match budget {
        Some(b) => format!("[{}] in {:.2}s (budget {}s)", names.join(", "), elapsed.as_secs_f64(), b.as_secs()),
        None => format!("[{}] in {:.2}s", names.join(", "), elapsed.as_secs_f64()),
    };
    if !failures.is_empty() {
        eprintln!("{}", failures.join("\n"));
    }
    verdict(n, failures.is_empty() && in_time, &detail);
}

#[test]
fn c01_gsa_permutation_equivariance() {
    prop_criterion(1, &["attention-equivariance"], Some(Duration::from_secs(10)));
}

#[test]
fn c02_gss_permutation_invariance() {
    prop_criterion(2, &["gss-invariance", "gss-distribution"], Some(Duration::from_secs(30)));
}

#[test]
fn c03_gradient_fidelity() {
    prop_criterion(3, &["op-gradients", "gumbel-softmax-gradient"], Some(Duration::from_secs(60)));
}

#[test]
fn c04_gumbel_max_unbiased() {
    prop_criterion(4, &["gumbel-max-unbiased"], Some(Duration::from_secs(10)));
}

#[test]
fn c05_annealing_saturation() {
    prop_criterion(5, &["annealing"], None);
}

#[test]
fn c06_channel_shuffle() {
    prop_criterion(6, &["shuffle-bijection"], None);
}

#[test]
fn c07_parameter_efficiency() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let (failures, _) = run_props(&["gsa-param-count"]);
    let out = Command::new(env!("CARGO_BIN_EXE_patkit"))
        .args(["bench", "--runs", "1", "--batch", "1", "--width", "128"])
        .output()
        .expect("run patkit bench");
    let stdout = String::from_utf8_lossy(&out.stdout);
    let line = stdout.lines().find(|l| l.starts_with("closed form")).unwrap_or("").to_string();
    let bench_ok = out.status.success() && line.contains("GSA(c=128, g=8) = 2304 < MHA-LG(c=128, H=8) = 49664");
    verdict(7, failures.is_empty() && bench_ok, &format!("bench reports: {line}"));
}

struct VariantRun {
    accs: Vec<f64>,
    elapsed: Vec<Duration>,
}

impl VariantRun {
    fn best(&self, epochs: usize) -> f64 {
        self.accs.iter().take(epochs).cloned().fold(0.0, f64::max)
    }

    /// First epoch (1-based) reaching `target`, with the time it took.
    fn reached(&self, target: f64) -> Option<(usize, Duration)> {
        self.accs.iter().position(|&a| a >= target).map(|i| (i + 1, self.elapsed[i]))
    }
}

fn train_variant(plan: &str, train_set: &[Sample<f32>], test_set: &[Sample<f32>], keep_going: impl Fn(&[f64]) -> bool) -> VariantRun {
    let cfg = PatConfig { plan: parse_plan(plan).unwrap(), epochs: SHAPES_MAX_EPOCHS, seed: 7, ..PatConfig::default() };
    let mut model = PatModel::<f32>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
    let mut run = VariantRun { accs: Vec::new(), elapsed: Vec::new() };
    let start = Instant::now();
    train(&mut model, train_set, None, &TrainOptions::default(), |m, _| {
        run.accs.push(evaluate(m, test_set, 0, None)?.accuracy);
        run.elapsed.push(start.elapsed());
        Ok(if keep_going(&run.accs) { Control::Continue } else { Control::Stop })
    })
    .unwrap();
    println!("  plan {:<18} test accuracy per epoch {:?}", if plan.is_empty() { "(none)" } else { plan }, run.accs);
    run
}

#[test]
fn c08_desk_scale_learning() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut all = gen_shapes::<f32, _>(&ShapeSpec { n_per_class: 250, n_points: 256, ..ShapeSpec::default() }, &mut rng).unwrap();
    let test_set = all.split_off(800);
    assert_eq!((all.len(), test_set.len()), (800, 200));

    let variant_more = |accs: &[f64]| accs.len() < VARIANT_EPOCHS && accs.last().is_none_or(|&a| a < VARIANT_STOP);
    let main = train_variant("fps96,gss32,gss16", &all, &test_set, |accs| {
        let hit = accs.iter().any(|&a| a >= SHAPES_TARGET);
        (!hit || variant_more(accs)) && accs.len() < SHAPES_MAX_EPOCHS
    });
    let fps_only = train_variant("fps96,fps32,fps16", &all, &test_set, variant_more);
    let gsa_only = train_variant("", &all, &test_set, variant_more);

    let reached = main.reached(SHAPES_TARGET);
    let learn_ok = reached.is_some_and(|(e, t)| e <= SHAPES_MAX_EPOCHS && t <= SHAPES_BUDGET);
    let bests = [gsa_only.best(VARIANT_EPOCHS), fps_only.best(VARIANT_EPOCHS), main.best(VARIANT_EPOCHS)];
    let gap = bests.iter().cloned().fold(0.0, f64::max) - bests.iter().cloned().fold(1.0, f64::min);
    let detail = match reached {
        Some((e, t)) => format!(
            "FPS+GSS reached {SHAPES_TARGET} at epoch {e} after {:.0}s; best-of-{VARIANT_EPOCHS} GSA-only {:.3}, FPS {:.3}, FPS+GSS {:.3} (gap {gap:.3} <= {VARIANT_GAP})",
            t.as_secs_f64(),
            bests[0],
            bests[1],
            bests[2]
        ),
        None => format!("FPS+GSS never reached {SHAPES_TARGET}: {:?}", main.accs),
    };
    verdict(8, learn_ok && gap <= VARIANT_GAP, &detail);
}

#[test]
fn c09_fps_start_dependence() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let (failures, _) = run_props(&["fps-witness"]);
    let line = PointCloud::<f64>::from_rows(&[0.0, 1.0, 2.0, 9.0].map(|x| vec![x, 0.0, 0.0])).unwrap();
    let (a, b) = (fps(&line, 3, 0).unwrap(), fps(&line, 3, 1).unwrap());
    let ok = failures.is_empty() && a == [0, 3, 2] && b == [1, 3, 0];
    verdict(9, ok, &format!("start 0 -> {a:?}, start 1 -> {b:?}"));
}

fn event(t: u64) -> EventRecord {
    EventRecord { t, x: (t % 128) as u16, y: (t / 7 % 128) as u16, polarity: (t % 2) as u8 }
}

#[test]
fn c10_event_pipeline() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let spec = ClipSpec { window_ms: 750.0, step_ms: 100.0, n_sample: 64 };
    // Events cover [0, 1050) ms: the first at 0, the last at 1_049_999 us.
    let stream: Vec<EventRecord> = std::iter::once(event(0)).chain((0..1050).map(|ms| event(ms * 1000 + 999))).collect();
    let span = span_us(&stream);
    let clips = window_events::<f32, _>(&stream, &spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let windows_ok = span == 1_050_000 && clip_count(span, &spec) == 4 && clips.len() == 4;

    let votes: [(&[usize], usize); 5] = [
        (&[0, 0, 1], 0),
        (&[2, 1, 2, 1, 2], 2),
        (&[1, 0, 1, 0], 0),
        (&[2], 2),
        (&[0, 2, 2, 1, 1, 1], 1),
    ];
    let votes_ok = votes.iter().all(|(clips, want)| system_prediction(clips).unwrap() == *want);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let gestures = GestureSpec::default();
    let clip = ClipSpec { n_sample: 128, ..ClipSpec::default() };
    let train_streams = gen_gestures(40, &gestures, &mut rng);
    let test_streams = gen_gestures(10, &gestures, &mut rng);
    let (train_set, _) = clip_dataset::<f32, _>(&train_streams, &clip, &mut rng).unwrap();
    let (test_set, owner) = clip_dataset::<f32, _>(&test_streams, &clip, &mut rng).unwrap();
    let truth: Vec<usize> = test_streams.iter().map(|s| s.1).collect();
    let cfg = PatConfig {
        n_points: clip.n_sample,
        f: 1,
        c: 64,
        plan: parse_plan("fps48,gss16").unwrap(),
        mlp_sizes: vec![64, 32],
        m: 3,
        augment: false,
        epochs: 12,
        seed: 11,
        ..PatConfig::default()
    };
    let mut model = PatModel::<f32>::new(&cfg, &mut rng).unwrap();
    let start = Instant::now();
    let mut best = (0.0, 0, Duration::ZERO);
    train(&mut model, &train_set, None, &TrainOptions::default(), |m, s| {
        let report = evaluate(m, &test_set, 0, None)?;
        let acc = stream_accuracy(&report.predictions, &owner, &truth)?;
        if acc > best.0 {
            best = (acc, s.history.len(), start.elapsed());
        }
        Ok(if acc >= GESTURE_TARGET { Control::Stop } else { Control::Continue })
    })
    .unwrap();
    let train_ok = best.0 >= GESTURE_TARGET && best.2 <= GESTURE_BUDGET;
    verdict(
        10,
        windows_ok && votes_ok && train_ok,
        &format!(
            "span {span}us -> {} clips; 5 vote fixtures {}; stream accuracy {:.3} at epoch {} after {:.0}s",
            clips.len(),
            if votes_ok { "match" } else { "differ" },
            best.0,
            best.1,
            best.2.as_secs_f64()
        ),
    );
}

#[test]
fn c11_determinism_and_persistence() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let (failures, _) = run_props(&["training-determinism", "checkpoint-roundtrip"]);
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_patkit"))
            .args(["train", "--per-class", "6", "--points", "64", "--width", "32", "--plan", "fps32,gss8", "--epochs", "2", "--seed", "5"])
            .arg("--out")
            .arg(&out)
            .output()
            .expect("run patkit train")
            .status;
        assert!(status.success());
        std::fs::read_to_string(out.join("metrics.csv")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    let ok = failures.is_empty() && a == b && a.lines().count() == 3;
    if !failures.is_empty() {
        eprintln!("{}", failures.join("\n"));
    }
    verdict(11, ok, &format!(
            "two CLI training runs: metric CSVs {}; properties {}",
            if a == b { "identical" } else { "differ" },
            if failures.is_empty() { "pass" } else { "fail" }
        ));
}
