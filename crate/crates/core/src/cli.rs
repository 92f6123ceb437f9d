//! `patkit` command line: train, eval, bench, proptest and sample.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure,
//! 3 property-suite failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::{gsa_param_count, mha_param_count};
use crate::dataio::{
    clip_dataset, gen_gestures, gen_scene, gen_shapes, load_dataset, load_point_cloud, save_point_cloud, shape_cloud,
    stream_accuracy, ClipSpec, GestureSpec, Shape, ShapeSpec,
};
use crate::error::{PatError, Result};
use crate::geometry::{fps, PointCloud};
use crate::model::{
    checkpoint, evaluate, train, Block, Control, EvalReport, Label, PatConfig, PatModel, Sample, Task, TrainOptions,
};
use crate::nn::Module;
use crate::props::{self, SuiteConfig};
use crate::sampling::Mode;
use crate::tensor::{Real, Tape};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_PROPERTY: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "patkit", version, about = "Point Attention Transformers at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write metrics, checkpoints and the frozen config.
    Train(TrainArgs),
    /// Evaluate a checkpoint: clip accuracy, stream accuracy, confusion matrix.
    Eval(EvalArgs),
    /// Forward latency and parameter counts of GSA and MHA variants.
    Bench(BenchArgs),
    /// Run the invariant suite.
    Proptest(PropArgs),
    /// Dump a cloud with its FPS and GSS selections for plotting.
    Sample(SampleArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

impl Precision {
    fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Test,
    All,
}

/// Model configuration: preset, then config file, then flags, then `--set`.
#[derive(Args, Debug, Clone, Default)]
struct ModelArgs {
    /// Line-based `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, value_parser = ["classify", "segment"])]
    task: Option<String>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    gsa_layers: Option<usize>,
    /// Down-sampling plan such as `fps96,gss32,gss16` (`none` for empty).
    #[arg(long)]
    plan: Option<String>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ModelArgs {
    fn overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push(format!("{k}={v}"));
            }
        };
        push("task", self.task.clone());
        push("points", self.points.map(|v| v.to_string()));
        push("width", self.width.map(|v| v.to_string()));
        push("groups", self.groups.map(|v| v.to_string()));
        push("gsa_layers", self.gsa_layers.map(|v| v.to_string()));
        push("plan", self.plan.clone().map(|p| if p == "none" { String::new() } else { p }));
        push("classes", self.classes.map(|v| v.to_string()));
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        o.extend(self.set.iter().cloned());
        o
    }

    /// Resolves the configuration with `data` choosing sensible defaults for
    /// its kind before any user setting is applied.
    fn resolve(&self, data: &DataArgs) -> Result<PatConfig> {
        let segment = self.task.as_deref() == Some("segment")
            || self.set.iter().any(|s| s.replace(' ', "") == "task=segment")
            || (self.task.is_none() && data.data.is_none() && data.synthetic == "scene");
        let mut cfg = if segment { PatConfig::desk_segmenter() } else { PatConfig::default() };
        if data.data.is_none() {
            match data.synthetic.as_str() {
                "gestures" => {
                    cfg.f = 1;
                    cfg.m = 3;
                    cfg.augment = false;
                }
                "scene" => cfg.m = Shape::ALL.len(),
                s => cfg.m = shape_classes(s)?.len(),
            }
        }
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .map_err(|e| PatError::Config(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        let overrides = self.overrides();
        cfg.apply_overrides(overrides.iter().map(String::as_str))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Synthetic data: shapes1 to shapes4, scene (segmentation) or gestures (events).
    #[arg(long, default_value = "shapes4")]
    synthetic: String,
    /// Dataset directory with an `index.tsv` manifest; replaces --synthetic.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Synthetic clouds (or streams) per class; scenes in total for `scene`.
    #[arg(long, default_value_t = 250)]
    per_class: usize,
    /// Seed of the synthetic data; defaults to the model seed.
    #[arg(long)]
    data_seed: Option<u64>,
    /// Fraction of samples (or streams) held out for testing.
    #[arg(long, default_value_t = 0.2)]
    test_frac: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "f32")]
    precision: Precision,
    /// Output directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Worker threads (default: PATKIT_THREADS, then all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Stop once test accuracy reaches this value.
    #[arg(long)]
    target: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Config the checkpoint is expected to match.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Keep Gumbel noise in GSS at inference.
    #[arg(long)]
    infer_noise: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value = "f32")]
    precision: Precision,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 100)]
    runs: usize,
    /// Group counts to compare.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    group_list: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct PropArgs {
    /// Run only these properties (repeatable or comma-separated).
    #[arg(long, value_delimiter = ',')]
    only: Vec<String>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Suite file with `key = value` lines (seed, trials, tolerances).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Tolerance overrides such as `tol32=1e-5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// List properties and exit.
    #[arg(long)]
    list: bool,
    /// Directory for the frozen suite config and counterexample dumps.
    #[arg(long, default_value = "proptest-out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Use this checkpoint instead of a freshly initialised model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Point-cloud file; default is a sphere with injected outliers.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Fraction of outliers in the synthetic sphere.
    #[arg(long, default_value_t = 0.02)]
    outlier_frac: f64,
    /// FPS subset size (default: first plan step).
    #[arg(long)]
    n_fps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    fps_start: usize,
    #[arg(long, value_enum, default_value = "f32")]
    precision: Precision,
    #[arg(long, default_value = "sample")]
    out: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Proptest(a) => cmd_proptest(&a),
        Command::Sample(a) => cmd_sample(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &PatError) -> i32 {
    match e {
        PatError::Config(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| PatError::Config(format!("cannot create {}: {e}", dir.display())))
}

/// Writes `config.txt` (the resolved model config) and `run.txt` (command,
/// config path, overrides, seed, precision, output directory).
fn freeze(dir: &Path, command: &str, cfg: Option<&PatConfig>, config_path: Option<&Path>, overrides: &[String], seed: u64, precision: &str) -> Result<()> {
    create_dir(dir)?;
    if let Some(cfg) = cfg {
        fs::write(dir.join("config.txt"), cfg.to_text())?;
    }
    let run = format!(
        "command = {command}\nconfig = {}\noverrides = {}\nseed = {seed}\nprecision = {precision}\nout = {}\n",
        config_path.map(|p| p.display().to_string()).unwrap_or_default(),
        overrides.join(" "),
        dir.display()
    );
    fs::write(dir.join("run.txt"), run)?;
    Ok(())
}

// ---------------------------------------------------------------- data

fn shape_classes(name: &str) -> Result<Vec<Shape>> {
    let k: usize = name
        .strip_prefix("shapes")
        .and_then(|k| k.parse().ok())
        .filter(|k| (1..=Shape::ALL.len()).contains(k))
        .ok_or_else(|| PatError::Config(format!("unknown synthetic dataset {name:?} (shapes1-4, scene, gestures)")))?;
    Ok(Shape::ALL[..k].to_vec())
}

/// Train and test samples; for event data also the stream each test clip came from.
struct Dataset<T> {
    train: Vec<Sample<T>>,
    test: Vec<Sample<T>>,
    test_streams: Option<(Vec<usize>, Vec<usize>)>,
    train_streams: Option<(Vec<usize>, Vec<usize>)>,
}

fn split_at<X>(mut all: Vec<X>, frac: f64) -> Result<(Vec<X>, Vec<X>)> {
    if !(0.0..1.0).contains(&frac) {
        return Err(PatError::Config(format!("test fraction must be in [0, 1), got {frac}")));
    }
    let n_test = (all.len() as f64 * frac).round() as usize;
    let test = all.split_off(all.len() - n_test);
    Ok((all, test))
}

fn load_data<T: Real>(args: &DataArgs, cfg: &PatConfig) -> Result<Dataset<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.data_seed.unwrap_or(cfg.seed));
    if let Some(dir) = &args.data {
        let (train, test) = split_at(load_dataset(dir)?, args.test_frac)?;
        return Ok(Dataset { train, test, test_streams: None, train_streams: None });
    }
    match args.synthetic.as_str() {
        "gestures" => {
            let streams = gen_gestures(args.per_class, &GestureSpec::default(), &mut rng);
            let (train_s, test_s) = split_at(streams, args.test_frac)?;
            let clip = ClipSpec { n_sample: cfg.n_points, ..ClipSpec::default() };
            let (train, train_owner) = clip_dataset(&train_s, &clip, &mut rng)?;
            let (test, test_owner) = clip_dataset(&test_s, &clip, &mut rng)?;
            Ok(Dataset {
                train,
                test,
                test_streams: Some((test_owner, test_s.iter().map(|s| s.1).collect())),
                train_streams: Some((train_owner, train_s.iter().map(|s| s.1).collect())),
            })
        }
        "scene" => {
            let scenes = (0..args.per_class)
                .map(|_| gen_scene(&Shape::ALL, 3, cfg.n_points, 0.01, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let (train, test) = split_at(scenes, args.test_frac)?;
            Ok(Dataset { train, test, test_streams: None, train_streams: None })
        }
        name => {
            let spec = ShapeSpec {
                classes: shape_classes(name)?,
                n_per_class: args.per_class,
                n_points: cfg.n_points,
                ..ShapeSpec::default()
            };
            let (train, test) = split_at(gen_shapes(&spec, &mut rng)?, args.test_frac)?;
            Ok(Dataset { train, test, test_streams: None, train_streams: None })
        }
    }
}

fn check_fits<T: Real>(cfg: &PatConfig, data: &[Sample<T>]) -> Result<()> {
    if let Some(s) = data.iter().find(|s| s.cloud.channels() != 3 + cfg.f) {
        return Err(PatError::Config(format!(
            "data has {} channels per point, the model expects {} (features = {})",
            s.cloud.channels(),
            3 + cfg.f,
            cfg.f
        )));
    }
    if cfg.task == Task::Classify && data.iter().any(|s| matches!(s.label, Label::PerPoint(_))) {
        return Err(PatError::Config("per-point labels need --task segment".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------- train

fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let cfg = a.model.resolve(&a.data)?;
    freeze(&a.out, "train", Some(&cfg), a.model.config.as_deref(), &a.model.overrides(), cfg.seed, a.precision.name())?;
    match a.precision {
        Precision::F32 => train_with::<f32>(a, cfg),
        Precision::F64 => train_with::<f64>(a, cfg),
    }
}

fn report_line<T: Real>(model: &PatModel<T>, data: &Dataset<T>, threads: Option<usize>) -> Result<(EvalReport, Option<f64>)> {
    let report = evaluate(model, &data.test, 0, threads)?;
    let streams = match &data.test_streams {
        Some((owner, truth)) => Some(stream_accuracy(&report.predictions, owner, truth)?),
        None => None,
    };
    Ok((report, streams))
}

fn train_with<T: Real>(a: &TrainArgs, cfg: PatConfig) -> Result<i32> {
    let data = load_data::<T>(&a.data, &cfg)?;
    check_fits(&cfg, &data.train)?;
    let mut model = PatModel::<T>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    println!(
        "{} parameters; {} train / {} test samples; writing to {}",
        model.param_count(),
        data.train.len(),
        data.test.len(),
        a.out.display()
    );
    let opts = TrainOptions { out_dir: Some(a.out.clone()), threads: a.threads };
    let start = Instant::now();
    train(&mut model, &data.train, None, &opts, |m, s| {
        let row = s.history.last().expect("epoch recorded");
        let mut line = format!(
            "epoch {:>3}  loss {:.4}  acc {:.3}  tau {:.3}  lr {:.2e}",
            row.epoch, row.loss, row.acc, row.tau, row.lr
        );
        let mut stop = false;
        if !data.test.is_empty() {
            let (report, streams) = report_line(m, &data, a.threads)?;
            line.push_str(&format!("  test {:.3}", report.accuracy));
            if let Some(sa) = streams {
                line.push_str(&format!("  stream {sa:.3}"));
            }
            stop = a.target.is_some_and(|t| streams.unwrap_or(report.accuracy) >= t);
        }
        println!("{line}  {:.0}s", start.elapsed().as_secs_f64());
        Ok(if stop { Control::Stop } else { Control::Continue })
    })?;
    if !data.test.is_empty() {
        let (report, streams) = report_line(&model, &data, a.threads)?;
        write_eval(&a.out, &report, streams)?;
    }
    Ok(EXIT_OK)
}

fn write_eval(dir: &Path, report: &EvalReport, streams: Option<f64>) -> Result<()> {
    fs::write(dir.join("confusion.csv"), report.confusion_csv())?;
    let mut text = format!("accuracy = {}\n", report.accuracy);
    if let Some(s) = streams {
        text.push_str(&format!("stream_accuracy = {s}\n"));
    }
    fs::write(dir.join("eval.txt"), text)?;
    Ok(())
}

// ---------------------------------------------------------------- eval

/// Keys that define the network; a config that disagrees on any of them
/// cannot describe the checkpoint.
const ARCH_KEYS: &[&str] = &[
    "task", "points", "features", "width", "groups", "gsa_layers", "plan", "mlp", "classes", "embedding", "k", "block",
    "heads", "mha_hidden", "norm", "shuffle",
];

fn cmd_eval(a: &EvalArgs) -> Result<i32> {
    let bytes = fs::read(&a.checkpoint)
        .map_err(|e| PatError::Config(format!("cannot read checkpoint {}: {e}", a.checkpoint.display())))?;
    match checkpoint::stored_bits(&bytes)? {
        64 => eval_with::<f64>(a, &bytes),
        _ => eval_with::<f32>(a, &bytes),
    }
}

fn eval_with<T: Real>(a: &EvalArgs, bytes: &[u8]) -> Result<i32> {
    let mut model = checkpoint::from_bytes::<T>(bytes)?.model;
    if let Some(path) = &a.config {
        // Only keys the file names are compared; the rest would be defaults.
        let text = fs::read_to_string(path)
            .map_err(|e| PatError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let named: Vec<&str> = text
            .lines()
            .filter_map(|l| l.split('#').next()?.split_once('=').map(|(k, _)| k.trim()))
            .collect();
        let mut expected = model.config.clone();
        expected.apply_text(&text)?;
        let (want, have) = (expected.as_map(), model.config.as_map());
        let diffs: Vec<String> = ARCH_KEYS
            .iter()
            .filter(|k| named.contains(*k) && want[*k] != have[*k])
            .map(|k| format!("{k}: config {} vs checkpoint {}", want[*k], have[*k]))
            .collect();
        if !diffs.is_empty() {
            return Err(PatError::Config(format!("checkpoint does not match config: {}", diffs.join("; "))));
        }
    }
    model.config.sampler.infer_noise = a.infer_noise;
    let cfg = model.config.clone();
    let data = load_data::<T>(&a.data, &cfg)?;
    let (samples, streams) = match a.split {
        Split::Test => (data.test, data.test_streams),
        Split::Train => (data.train, data.train_streams),
        Split::All => {
            let shift = data.train.len();
            let streams = match (data.train_streams, data.test_streams) {
                (Some((mut o1, mut t1)), Some((o2, t2))) => {
                    let base = t1.len();
                    o1.extend(o2.into_iter().map(|o| o + base));
                    t1.extend(t2);
                    Some((o1, t1))
                }
                _ => None,
            };
            let mut all = data.train;
            all.extend(data.test);
            debug_assert!(all.len() >= shift);
            (all, streams)
        }
    };
    if samples.is_empty() {
        return Err(PatError::Config("the selected split is empty".into()));
    }
    check_fits(&cfg, &samples)?;
    let report = evaluate(&model, &samples, a.seed, a.threads)?;
    let stream_acc = match &streams {
        Some((owner, truth)) => Some(stream_accuracy(&report.predictions, owner, truth)?),
        None => None,
    };
    println!("samples {}", samples.len());
    println!("accuracy {:.4}", report.accuracy);
    if let Some(s) = stream_acc {
        println!("stream_accuracy {s:.4}");
    }
    print!("{}", report.confusion_csv());
    if let Some(dir) = &a.out {
        let overrides = if a.infer_noise { vec!["infer_noise=true".to_string()] } else { Vec::new() };
        freeze(dir, "eval", Some(&cfg), a.config.as_deref(), &overrides, a.seed, if std::mem::size_of::<T>() == 8 { "f64" } else { "f32" })?;
        write_eval(dir, &report, stream_acc)?;
    }
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------- bench

#[derive(Clone, Debug)]
struct BenchRow {
    variant: String,
    width: usize,
    block_params: usize,
    total_params: usize,
    median_ms: f64,
    p90_ms: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

fn time_forward<T: Real>(cfg: &PatConfig, batch: usize, runs: usize, pool: &rayon::ThreadPool) -> Result<(usize, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = PatModel::<T>::new(cfg, &mut rng)?;
    let clouds: Vec<PointCloud<T>> = (0..batch)
        .map(|_| PointCloud::new(crate::gradcheck::random_input(&[cfg.n_points, 3 + cfg.f], &mut rng)))
        .collect::<Result<_>>()?;
    let forward = || -> Result<()> {
        pool.install(|| {
            clouds.par_iter().enumerate().try_for_each(|(i, c)| {
                let tape = Tape::new();
                let mut r = ChaCha8Rng::seed_from_u64(i as u64);
                model.forward(&tape, c, Mode::Infer, cfg.sampler.tau_end, &mut r).map(|_| ())
            })
        })
    };
    forward()?;
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        forward()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok((model.param_count(), percentile(&times, 0.5), percentile(&times, 0.9)))
}

/// Width of the small MHA comparator: the multiple of `heads` and `g` whose
/// model size is closest to `target` scalars.
fn mha_small_width(base: &PatConfig, heads: usize, target: usize) -> Result<usize> {
    let step = lcm(heads, base.g);
    let mut best = (usize::MAX, step);
    let mut c = step;
    while c <= base.c {
        let cfg = PatConfig { c, block: Block::Mha, heads, ..base.clone() };
        let n = PatModel::<f32>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?.param_count();
        let gap = n.abs_diff(target);
        if gap < best.0 {
            best = (gap, c);
        }
        c += step;
    }
    Ok(best.1)
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

fn cmd_bench(a: &BenchArgs) -> Result<i32> {
    let data = DataArgs {
        synthetic: "shapes4".into(),
        data: None,
        per_class: 0,
        data_seed: None,
        test_frac: 0.0,
    };
    let base = a.model.resolve(&data)?;
    if a.batch == 0 || a.runs == 0 {
        return Err(PatError::Config("batch and runs must be >= 1".into()));
    }
    if let Some(dir) = &a.out {
        freeze(dir, "bench", Some(&base), a.model.config.as_deref(), &a.model.overrides(), base.seed, a.precision.name())?;
    }
    let pool = crate::model::thread_pool(a.threads)?;
    let mut variants: Vec<(String, PatConfig)> = Vec::new();
    for &g in &a.group_list {
        let cfg = PatConfig { g, block: Block::Gsa, ..base.clone() };
        cfg.validate()?;
        variants.push((format!("GSA g={g}"), cfg));
    }
    let lg = PatConfig { block: Block::Mha, heads: a.heads, mha_hidden: 0, ..base.clone() };
    lg.validate()?;
    variants.push((format!("MHA-LG H={}", a.heads), lg));
    let gsa8 = PatConfig { g: 8, block: Block::Gsa, ..base.clone() };
    let target = PatModel::<f32>::new(&gsa8, &mut ChaCha8Rng::seed_from_u64(0))?.param_count();
    let sm_width = mha_small_width(&base, a.heads, target)?;
    variants.push((
        format!("MHA-SM H={}", a.heads),
        PatConfig { c: sm_width, block: Block::Mha, heads: a.heads, mha_hidden: 0, ..base.clone() },
    ));

    let mut rows = Vec::new();
    for (name, cfg) in variants {
        let (total, median, p90) = match a.precision {
            Precision::F32 => time_forward::<f32>(&cfg, a.batch, a.runs, &pool)?,
            Precision::F64 => time_forward::<f64>(&cfg, a.batch, a.runs, &pool)?,
        };
        let block_params = match cfg.block {
            Block::Gsa => gsa_param_count(cfg.c, cfg.g),
            Block::Mha => mha_param_count(cfg.c, cfg.heads, cfg.mha_hidden()),
        };
        rows.push(BenchRow { variant: name, width: cfg.c, block_params, total_params: total, median_ms: median, p90_ms: p90 });
    }

    let mut csv = String::from("variant,width,block_params,total_params,size_mb,median_ms,p90_ms\n");
    println!(
        "batch {}, {} runs, {} points, precision {}",
        a.batch,
        a.runs,
        base.n_points,
        a.precision.name()
    );
    println!("{:<14} {:>6} {:>13} {:>13} {:>8} {:>10} {:>10}", "variant", "width", "block_params", "total_params", "size_MB", "median_ms", "p90_ms");
    for r in &rows {
        let mb = r.total_params as f64 * 4.0 / 1e6;
        println!(
            "{:<14} {:>6} {:>13} {:>13} {:>8.3} {:>10.3} {:>10.3}",
            r.variant, r.width, r.block_params, r.total_params, mb, r.median_ms, r.p90_ms
        );
        csv.push_str(&format!(
            "{},{},{},{},{mb:.6},{:.4},{:.4}\n",
            r.variant, r.width, r.block_params, r.total_params, r.median_ms, r.p90_ms
        ));
    }
    let c = base.c;
    let (gsa, mha) = (gsa_param_count(c, 8), mha_param_count(c, a.heads, c));
    let cmp = if gsa < mha { "<" } else { ">=" };
    println!("closed form per block: GSA(c={c}, g=8) = {gsa} {cmp} MHA-LG(c={c}, H={}) = {mha}", a.heads);
    if let Some(dir) = &a.out {
        fs::write(dir.join("bench.csv"), csv)?;
    }
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------- proptest

fn cmd_proptest(a: &PropArgs) -> Result<i32> {
    if a.list {
        for p in props::registry() {
            println!("{:<28} {:>7}  {}", p.name, p.default_trials, p.about);
        }
        return Ok(EXIT_OK);
    }
    let mut cfg = SuiteConfig { seed: a.seed, trials: a.trials, ..SuiteConfig::default() };
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path)
            .map_err(|e| PatError::Config(format!("cannot read suite config {}: {e}", path.display())))?;
        for line in text.lines().map(|l| l.split('#').next().unwrap().trim()).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PatError::Config(format!("expected key = value, got {line:?}")))?;
            cfg.set(k, v)?;
        }
    }
    for s in &a.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| PatError::Config(format!("override {s:?} is not key=value")))?;
        cfg.set(k, v)?;
    }
    let selected = props::select(&a.only)?;
    create_dir(&a.out)?;
    fs::write(a.out.join("suite.txt"), cfg.to_text())?;
    let mut failed = 0;
    for p in selected {
        let outcome = p.run(&cfg);
        let status = if outcome.passed() { "PASS" } else { "FAIL" };
        println!(
            "{status} {:<28} trials {:>7}  {:>8.2}s",
            outcome.name,
            outcome.trials,
            outcome.elapsed.as_secs_f64()
        );
        if let Some(dump) = outcome.counterexample() {
            failed += 1;
            let path = a.out.join(format!("{}.counterexample.txt", outcome.name));
            fs::write(&path, &dump)?;
            eprint!("{dump}");
            eprintln!("counterexample written to {}", path.display());
        }
    }
    if failed > 0 {
        println!("{failed} properties failed");
        Ok(EXIT_PROPERTY)
    } else {
        println!("all properties passed");
        Ok(EXIT_OK)
    }
}

// ---------------------------------------------------------------- sample

fn cmd_sample(a: &SampleArgs) -> Result<i32> {
    match a.precision {
        Precision::F32 => sample_with::<f32>(a),
        Precision::F64 => sample_with::<f64>(a),
    }
}

fn sample_with<T: Real>(a: &SampleArgs) -> Result<i32> {
    let data = DataArgs {
        synthetic: "shapes4".into(),
        data: None,
        per_class: 0,
        data_seed: None,
        test_frac: 0.0,
    };
    let model = match &a.checkpoint {
        Some(path) => checkpoint::load::<T>(path)?.model,
        None => {
            let cfg = a.model.resolve(&data)?;
            PatModel::<T>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?
        }
    };
    let cfg = model.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cloud: PointCloud<T> = match &a.input {
        Some(path) => load_point_cloud(path)?,
        None => {
            let c: PointCloud<T> = shape_cloud(Shape::Sphere, cfg.n_points, 0.0, a.outlier_frac, &mut rng)?;
            if cfg.f == 0 {
                c
            } else {
                let ch = 3 + cfg.f;
                let data = crate::tensor::Tensor::from_fn(&[c.len(), ch], |i| {
                    if i % ch < 3 {
                        c.points().data()[i / ch * 3 + i % ch]
                    } else {
                        T::zero()
                    }
                });
                PointCloud::new(data)?
            }
        }
    };
    let n_fps = a
        .n_fps
        .or_else(|| cfg.plan.first().map(|s| s.size()))
        .unwrap_or(cloud.len() / 4)
        .clamp(1, cloud.len());
    if a.fps_start >= cloud.len() {
        return Err(PatError::Config(format!("fps start {} out of range for {} points", a.fps_start, cloud.len())));
    }
    let fps_idx = fps(&cloud, n_fps, a.fps_start)?;
    let tape = Tape::new();
    let fwd = model.forward(&tape, &cloud, Mode::Infer, cfg.sampler.tau_end, &mut rng)?;

    freeze(&a.out, "sample", Some(&cfg), a.model.config.as_deref(), &a.model.overrides(), cfg.seed, if std::mem::size_of::<T>() == 8 { "f64" } else { "f32" })?;
    save_point_cloud(&a.out.join("cloud.txt"), &cloud)?;
    let mut text = format!("# fps start {} n_out {n_fps}\n# rank index\n", a.fps_start);
    for (rank, i) in fps_idx.iter().enumerate() {
        text.push_str(&format!("{rank} {i}\n"));
    }
    fs::write(a.out.join("fps.txt"), text)?;
    println!("cloud: {} points; fps: {n_fps} indices", cloud.len());
    for rep in &fwd.gss {
        let mut text = format!("# gss after block {} ({} slots, {} duplicates)\n# slot index margin\n", rep.level, rep.indices.len(), rep.duplicates);
        for (slot, (i, m)) in rep.indices.iter().zip(&rep.margins).enumerate() {
            text.push_str(&format!("{slot} {i} {m}\n"));
        }
        let name = format!("gss_block{}.txt", rep.level);
        fs::write(a.out.join(&name), text)?;
        println!("{name}: {} slots, {} duplicates", rep.indices.len(), rep.duplicates);
    }
    Ok(EXIT_OK)
}
