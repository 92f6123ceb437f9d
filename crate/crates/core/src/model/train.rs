//! Minibatch training with Adam, evaluation, and the metrics log.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::checkpoint;
use super::config::Task;
use super::net::{check_label, class_scores, element_wise_loss, Label, PatModel};
use crate::error::{contract, PatError, Result};
use crate::geometry::PointCloud;
use crate::nn::Module;
use crate::sampling::{anneal, argmax, Mode};
use crate::tensor::{Real, Tape, Tensor};

pub const METRICS_HEADER: &str = "epoch,step,loss,acc,tau,lr";
pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;
pub const JITTER_SIGMA: f64 = 0.01;

/// One labelled cloud.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub cloud: PointCloud<T>,
    pub label: Label,
}

/// Adam moments, stored in the model's parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(model: &PatModel<T>) -> Self {
        let zeros: Vec<Tensor<T>> = model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam update with learning rate `lr`.
    pub fn step(&mut self, model: &mut PatModel<T>, grads: &[Tensor<T>], lr: f64) {
        self.t += 1;
        let (b1, b2) = ADAM_BETAS;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        let (ib1, ib2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let step = T::of(lr / c1);
        let (c2t, eps) = (T::of(c2), T::of(ADAM_EPS));
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_mut(&mut |p| {
            let g = grads[i].data();
            let m = ms[i].data_mut();
            let v = vs[i].data_mut();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                m[j] = b1t * m[j] + ib1 * g[j];
                v[j] = b2t * v[j] + ib2 * g[j] * g[j];
                *w -= step * m[j] / ((v[j] / c2t).sqrt() + eps);
            }
            i += 1;
        });
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    /// Training accuracy measured on the train-mode forward passes.
    pub acc: f64,
    pub tau: f64,
    pub lr: f64,
}

impl MetricRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{},{},{}", self.epoch, self.step, self.loss, self.acc, self.tau, self.lr)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || PatError::Format(format!("bad metric row {line:?}"));
        if f.len() != 6 {
            return Err(bad());
        }
        Ok(Self {
            epoch: f[0].parse().map_err(|_| bad())?,
            step: f[1].parse().map_err(|_| bad())?,
            loss: f[2].parse().map_err(|_| bad())?,
            acc: f[3].parse().map_err(|_| bad())?,
            tau: f[4].parse().map_err(|_| bad())?,
            lr: f[5].parse().map_err(|_| bad())?,
        })
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

/// Everything needed to resume training exactly.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    /// Completed epochs.
    pub epoch: usize,
    pub step: usize,
    pub tau: f64,
    pub adam: Adam<T>,
    pub rng: ChaCha8Rng,
    pub history: Vec<MetricRow>,
}

impl<T: Real> TrainState<T> {
    pub fn new(model: &PatModel<T>) -> Self {
        Self {
            epoch: 0,
            step: 0,
            tau: model.config.sampler.tau_start,
            adam: Adam::new(model),
            rng: ChaCha8Rng::seed_from_u64(model.config.seed),
            history: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for `metrics.csv` and checkpoints.
    pub out_dir: Option<PathBuf>,
    /// Worker threads; falls back to `PATKIT_THREADS`, then all cores.
    pub threads: Option<usize>,
}

/// Worker count from `PATKIT_THREADS`, if set to a positive integer.
pub fn env_threads() -> Option<usize> {
    std::env::var("PATKIT_THREADS").ok()?.trim().parse().ok().filter(|&n| n > 0)
}

pub fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads.or_else(env_threads) {
        b = b.num_threads(n);
    }
    b.build().map_err(|e| PatError::Config(format!("thread pool: {e}")))
}

/// Random rotation about the z (gravity) axis plus Gaussian jitter on xyz.
pub fn augment<T: Real, R: Rng + ?Sized>(cloud: &PointCloud<T>, rng: &mut R) -> Result<PointCloud<T>> {
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let (s, c) = theta.sin_cos();
    let normal = Normal::new(0.0, JITTER_SIGMA).expect("valid sigma");
    let mut pts = cloud.points().clone();
    let ch = cloud.channels();
    for row in pts.data_mut().chunks_mut(ch) {
        let (x, y) = (row[0].f64(), row[1].f64());
        row[0] = T::of(c * x - s * y + normal.sample(rng));
        row[1] = T::of(s * x + c * y + normal.sample(rng));
        row[2] = T::of(row[2].f64() + normal.sample(rng));
    }
    PointCloud::new(pts)
}

struct SampleResult<T> {
    loss: f64,
    correct: f64,
    grads: Vec<Tensor<T>>,
}

fn accuracy_of<T: Real>(task: Task, logits: &Tensor<T>, label: &Label, positions: &[usize]) -> f64 {
    match (task, label) {
        (Task::Classify, Label::Class(c)) => (argmax(&class_scores(logits)) == *c) as u8 as f64,
        (_, Label::PerPoint(v)) => {
            let m = logits.dim(1);
            let hits = logits
                .data()
                .chunks(m)
                .zip(positions)
                .filter(|(row, &p)| argmax(row) == v[p])
                .count();
            hits as f64 / positions.len() as f64
        }
        _ => 0.0,
    }
}

fn sample_grad<T: Real>(model: &PatModel<T>, sample: &Sample<T>, tau: f64, seed: u64) -> Result<SampleResult<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = if model.config.augment {
        augment(&sample.cloud, &mut rng)?
    } else {
        sample.cloud.clone()
    };
    let tape = Tape::new();
    let out = model.forward(&tape, &cloud, Mode::Train, tau, &mut rng)?;
    let loss = element_wise_loss(out.logits, &sample.label, &out.positions)?;
    let correct = out.logits.with_value(|l| accuracy_of(model.config.task, l, &sample.label, &out.positions));
    let g = tape.backward(loss)?;
    let grads = model
        .params()
        .iter()
        .map(|p| g.param(&p.name).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect();
    Ok(SampleResult {
        loss: loss.value().item().f64(),
        correct,
        grads,
    })
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.f64() * v.f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale_inplace(s);
        }
    }
    norm
}

fn write_metrics(dir: &Path, history: &[MetricRow]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut f = fs::File::create(dir.join("metrics.csv"))?;
    f.write_all(metrics_csv(history).as_bytes())?;
    Ok(())
}

/// Trains `model` on `data` until `model.config.epochs` epochs are complete
/// or `on_epoch` returns [`Control::Stop`]. Passing a previous `state`
/// resumes exactly where it stopped.
pub fn train<T, F>(
    model: &mut PatModel<T>,
    data: &[Sample<T>],
    state: Option<TrainState<T>>,
    opts: &TrainOptions,
    mut on_epoch: F,
) -> Result<TrainState<T>>
where
    T: Real,
    F: FnMut(&PatModel<T>, &TrainState<T>) -> Result<Control>,
{
    if data.is_empty() {
        return Err(contract("training needs at least one sample"));
    }
    let cfg = model.config.clone();
    for s in data {
        check_label(cfg.task, &s.label, cfg.m, s.cloud.len())?;
    }
    let pool = thread_pool(opts.threads)?;
    let mut state = state.unwrap_or_else(|| TrainState::new(model));
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let tau = anneal(&cfg.sampler, epoch, cfg.epochs);
        let lr = cfg.lr_at(epoch);
        state.tau = tau;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut state.rng);
        let (mut loss_sum, mut correct) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch) {
            let seeds: Vec<u64> = batch.iter().map(|_| state.rng.random()).collect();
            let results: Vec<Result<SampleResult<T>>> = pool.install(|| {
                batch
                    .par_iter()
                    .zip(seeds.par_iter())
                    .map(|(&i, &seed)| sample_grad(model, &data[i], tau, seed))
                    .collect()
            });
            let mut grads: Option<Vec<Tensor<T>>> = None;
            let mut batch_loss = 0.0;
            for r in results {
                let r = r?;
                batch_loss += r.loss;
                correct += r.correct;
                match &mut grads {
                    None => grads = Some(r.grads),
                    Some(acc) => acc.iter_mut().zip(&r.grads).for_each(|(a, g)| a.add_assign(g)),
                }
            }
            if !batch_loss.is_finite() {
                return Err(PatError::Divergence {
                    epoch,
                    step: state.step,
                    detail: format!("loss {batch_loss} at lr {lr}, tau {tau}"),
                });
            }
            let mut grads = grads.expect("non-empty batch");
            let inv = T::of(1.0 / batch.len() as f64);
            grads.iter_mut().for_each(|g| g.scale_inplace(inv));
            clip_global_norm(&mut grads, cfg.clip_norm);
            state.adam.step(model, &grads, lr);
            state.step += 1;
            loss_sum += batch_loss;
        }
        state.epoch += 1;
        state.history.push(MetricRow {
            epoch,
            step: state.step,
            loss: loss_sum / data.len() as f64,
            acc: correct / data.len() as f64,
            tau,
            lr,
        });
        if let Some(dir) = &opts.out_dir {
            write_metrics(dir, &state.history)?;
            let periodic = cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0;
            if periodic || state.epoch == cfg.epochs {
                checkpoint::save(&dir.join(format!("epoch{:03}.ckpt", state.epoch)), model, &state)?;
            }
        }
        if on_epoch(model, &state)? == Control::Stop {
            if let Some(dir) = &opts.out_dir {
                checkpoint::save(&dir.join(format!("epoch{:03}.ckpt", state.epoch)), model, &state)?;
            }
            break;
        }
    }
    Ok(state)
}

/// Inference-mode results over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Fraction of correct clouds (classification) or points (segmentation).
    pub accuracy: f64,
    /// `confusion[truth][predicted]`, counted per cloud or per point.
    pub confusion: Vec<Vec<usize>>,
    /// Per-cloud class predictions (classification only).
    pub predictions: Vec<usize>,
}

impl EvalReport {
    pub fn confusion_csv(&self) -> String {
        let m = self.confusion.len();
        let mut s = String::from("truth");
        for j in 0..m {
            s.push_str(&format!(",pred{j}"));
        }
        s.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            s.push_str(&i.to_string());
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Evaluates in inference mode. `seed` drives any inference-time noise.
pub fn evaluate<T: Real>(model: &PatModel<T>, data: &[Sample<T>], seed: u64, threads: Option<usize>) -> Result<EvalReport> {
    let m = model.config.m;
    let pool = thread_pool(threads)?;
    let outputs: Vec<Result<Vec<usize>>> = pool.install(|| {
        data.par_iter()
            .enumerate()
            .map(|(i, s)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                match model.config.task {
                    Task::Classify => Ok(vec![model.predict_class(&s.cloud, &mut rng)?]),
                    Task::Segment => model.predict_points(&s.cloud, &mut rng),
                }
            })
            .collect()
    });
    let mut confusion = vec![vec![0; m]; m];
    let mut predictions = Vec::new();
    let (mut hits, mut total) = (0usize, 0usize);
    for (s, out) in data.iter().zip(outputs) {
        let pred = out?;
        let truth: Vec<usize> = match &s.label {
            Label::Class(c) => vec![*c],
            Label::PerPoint(v) => v.clone(),
        };
        if truth.len() != pred.len() {
            return Err(contract(format!("{} predictions for {} labels", pred.len(), truth.len())));
        }
        for (&t, &p) in truth.iter().zip(&pred) {
            if t >= m {
                return Err(contract(format!("label {t} out of range for {m} classes")));
            }
            confusion[t][p] += 1;
            hits += (t == p) as usize;
            total += 1;
        }
        if model.config.task == Task::Classify {
            predictions.push(pred[0]);
        }
    }
    Ok(EvalReport {
        accuracy: hits as f64 / total.max(1) as f64,
        confusion,
        predictions,
    })
}
