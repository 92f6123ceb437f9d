//! Gumbel noise, Gumbel-Softmax / Gumbel-Max, attention MIL pooling and
//! Gumbel Subset Sampling (GSS).
//!
//! Scores are always logits (log-domain): softmax is invariant to additive
//! constants, so `W·Xᵀ` plays the role of `log s` directly.

use std::collections::HashSet;

use rand::Rng;

use crate::error::{contract, shape_err, PatError, Result};
use crate::nn::{join, Module, Param};
use crate::tensor::{Real, Tensor, Var};

const UNIFORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Infer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    /// Current temperature; set from [`anneal`] each epoch during training.
    pub tau: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub mode: Mode,
    /// Keep Gumbel noise at inference (sampled rather than argmax subsets).
    pub infer_noise: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            tau_start: 1.0,
            tau_end: 0.1,
            mode: Mode::Train,
            infer_noise: false,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_start > 0.0 && self.tau_end > 0.0) || self.tau_end > self.tau_start {
            return Err(PatError::Config(format!(
                "temperature schedule needs 0 < tau_end <= tau_start, got {} -> {}",
                self.tau_start, self.tau_end
            )));
        }
        if self.mode == Mode::Train && !(self.tau > 0.0) {
            return Err(PatError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    pub fn infer(mut self) -> Self {
        self.mode = Mode::Infer;
        self
    }

    pub fn train(mut self, tau: f64) -> Self {
        self.mode = Mode::Train;
        self.tau = tau;
        self
    }
}

/// `−ln(−ln u)` with `u` clamped away from 0 and 1.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS);
    -(-u.ln()).ln()
}

/// i.i.d. standard Gumbel samples.
pub fn gumbel_noise<T: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(gumbel_from_uniform(rng.random::<f64>())))
}

/// `softmax((logits + noise) / τ)` along the last axis. `noise = None` means
/// zero noise.
pub fn gumbel_softmax<'t, T: Real>(logits: Var<'t, T>, noise: Option<&Tensor<T>>, tau: f64) -> Result<Var<'t, T>> {
    if !(tau > 0.0) {
        return Err(contract(format!("gumbel_softmax needs tau > 0, got {tau}")));
    }
    let axis = logits.shape().len() - 1;
    let z = match noise {
        Some(g) => {
            if g.shape() != logits.shape().as_slice() {
                return Err(shape_err("gumbel_softmax", &logits.shape(), g.shape()));
            }
            logits.add(logits.tape().constant(g.clone()))?
        }
        None => logits,
    };
    Ok(z.scale(1.0 / tau).softmax(axis))
}

/// Index of the maximum of `row`; ties go to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise argmax of `logits + g` over the last axis; `g` is fresh Gumbel
/// noise when `rng` is given, zero otherwise.
pub fn gumbel_argmax<T: Real, R: Rng + ?Sized>(logits: &Tensor<T>, rng: Option<&mut R>) -> Vec<usize> {
    let m = *logits.shape().last().unwrap();
    match rng {
        Some(rng) => logits
            .data()
            .chunks(m)
            .map(|row| {
                let mut best = (0, f64::NEG_INFINITY);
                for (i, &v) in row.iter().enumerate() {
                    let z = v.f64() + gumbel_from_uniform(rng.random::<f64>());
                    if z > best.1 {
                        best = (i, z);
                    }
                }
                best.0
            })
            .collect(),
        None => logits.data().chunks(m).map(argmax).collect(),
    }
}

/// One-hot form of [`gumbel_argmax`], same shape as `logits`.
pub fn gumbel_max<T: Real, R: Rng + ?Sized>(logits: &Tensor<T>, rng: Option<&mut R>) -> Tensor<T> {
    let m = *logits.shape().last().unwrap();
    let picks = gumbel_argmax(logits, rng);
    let mut out = Tensor::zeros(logits.shape());
    for (r, &i) in picks.iter().enumerate() {
        out.data_mut()[r * m + i] = T::one();
    }
    out
}

/// Attention-based MIL pooling `softmax(w·Xᵀ)·X`, returning a `c`-vector.
pub fn mil_pool<'t, T: Real>(x: Var<'t, T>, w: Var<'t, T>) -> Result<Var<'t, T>> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 2 || ws != [xs[1]] {
        return Err(shape_err("mil_pool", &xs, &ws));
    }
    let c = xs[1];
    let weights = w.reshape(&[1, c])?.matmul(x.t())?.softmax(1);
    weights.matmul(x)?.reshape(&[c])
}

/// `N_out` selection queries, one per output slot.
#[derive(Clone, Debug)]
pub struct GssLayer<T> {
    pub weight: Param<T>,
}

impl<T: Real> GssLayer<T> {
    pub fn new<R: Rng + ?Sized>(prefix: &str, n_out: usize, c: usize, rng: &mut R) -> Result<Self> {
        if n_out == 0 || c == 0 {
            return Err(contract(format!("gss layer needs n_out, c >= 1, got {n_out}, {c}")));
        }
        Ok(Self {
            weight: Param::glorot(join(prefix, "weight"), &[n_out, c], c, n_out, rng),
        })
    }

    pub fn n_out(&self) -> usize {
        self.weight.value.dim(0)
    }

    pub fn channels(&self) -> usize {
        self.weight.value.dim(1)
    }
}

impl<T: Real> Module<T> for GssLayer<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
    }
}

#[derive(Clone, Debug)]
pub struct GssOutput<'t, T> {
    /// `N_out × c` selected (infer) or softly mixed (train) rows.
    pub features: Var<'t, T>,
    /// Per-slot winning point: the copied row at inference, the heaviest
    /// mixture weight in training.
    pub indices: Vec<usize>,
    /// Slots that picked a point some earlier slot already picked.
    pub duplicates: usize,
    /// Per-slot gap between the best and second-best (noised) score.
    pub margins: Vec<f64>,
}

fn slot_margin(row: &[f64]) -> f64 {
    let mut top = [f64::NEG_INFINITY; 2];
    for &v in row {
        if v > top[0] {
            top = [v, top[0]];
        } else if v > top[1] {
            top[1] = v;
        }
    }
    if top[1].is_finite() {
        top[0] - top[1]
    } else {
        f64::INFINITY
    }
}

fn count_duplicates(indices: &[usize]) -> usize {
    indices.len() - indices.iter().collect::<HashSet<_>>().len()
}

/// Gumbel Subset Sampling of `N_out` rows from `x: N × c`.
///
/// Train mode: every slot is `gumbel_softmax(w_slot·Xᵀ)·X` with independent
/// noise. Infer mode: every slot copies the row with the largest score (plus
/// noise iff `cfg.infer_noise`).
pub fn gss<'t, T: Real, R: Rng + ?Sized>(
    x: Var<'t, T>,
    layer: &GssLayer<T>,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<GssOutput<'t, T>> {
    let xs = x.shape();
    if xs.len() != 2 || xs[1] != layer.channels() {
        return Err(shape_err("gss", &xs, &[xs.first().copied().unwrap_or(0), layer.channels()]));
    }
    let n = xs[0];
    let tape = x.tape();
    let logits = tape.param(&layer.weight).matmul(x.t())?;
    let use_noise = cfg.mode == Mode::Train || cfg.infer_noise;
    let noise: Option<Tensor<T>> = use_noise.then(|| gumbel_noise(&[layer.n_out(), n], rng));

    let scores: Vec<f64> = logits.with_value(|l| match &noise {
        Some(g) => l.data().iter().zip(g.data()).map(|(a, b)| a.f64() + b.f64()).collect(),
        None => l.to_f64_vec(),
    });
    let indices: Vec<usize> = scores.chunks(n).map(argmax).collect();
    let margins = scores.chunks(n).map(slot_margin).collect();
    let duplicates = count_duplicates(&indices);

    let features = match cfg.mode {
        Mode::Train => gumbel_softmax(logits, noise.as_ref(), cfg.tau)?.matmul(x)?,
        Mode::Infer => x.index_select(&indices)?,
    };
    Ok(GssOutput {
        features,
        indices,
        duplicates,
        margins,
    })
}

/// Exponential schedule `τ(e) = τ_start · (τ_end/τ_start)^(e/total)`.
pub fn anneal(cfg: &SamplerConfig, epoch: usize, total_epochs: usize) -> f64 {
    let total = total_epochs.max(1) as f64;
    let frac = (epoch as f64 / total).min(1.0);
    cfg.tau_start * (cfg.tau_end / cfg.tau_start).powf(frac)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{E, PI};

    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::{grad_check, random_input};
    use crate::tensor::Tape;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn entropy(p: &[f64]) -> f64 {
        p.iter().filter(|&&v| v > 0.0).map(|v| -v * v.ln()).sum()
    }

    #[test]
    fn gumbel_closed_form_and_moments() {
        assert!(gumbel_from_uniform(1.0 / E).abs() < 1e-15);
        assert!(gumbel_from_uniform(0.0).is_finite() && gumbel_from_uniform(1.0).is_finite());

        let g: Tensor<f64> = gumbel_noise(&[1_000_000], &mut rng(11));
        let n = g.numel() as f64;
        let mean = g.sum() / n;
        let var = g.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean - 0.577_215_664_9).abs() < 0.01, "mean {mean}");
        assert!((var - PI * PI / 6.0).abs() < 0.05, "var {var}");

        let again: Tensor<f64> = gumbel_noise(&[1_000_000], &mut rng(11));
        assert_eq!(g, again);
    }

    #[test]
    fn gumbel_softmax_examples() {
        let tape = Tape::new();
        let s = tape.constant(t(&[2], &[0.9f64.ln(), 0.1f64.ln()]));
        let y = gumbel_softmax(s, None, 1.0).unwrap().value();
        assert!((y.data()[0] - 0.9).abs() < 1e-12 && (y.data()[1] - 0.1).abs() < 1e-12);

        let u = tape.constant(t(&[4], &[0.3; 4]));
        for tau in [0.01, 1.0, 7.0] {
            let y = gumbel_softmax(u, None, tau).unwrap().value();
            assert!(y.data().iter().all(|v| (v - 0.25).abs() < 1e-12));
        }
        assert!(gumbel_softmax(u, None, 0.0).is_err());
        assert!(gumbel_softmax(u, None, -1.0).is_err());
    }

    #[test]
    fn gumbel_softmax_saturates_and_sharpens() {
        let mut r = rng(12);
        for _ in 0..20 {
            // Fixtures whose noised top two scores are at least 0.02 apart.
            let (logits, noise) = loop {
                let l: Tensor<f64> = random_input(&[3, 6], &mut r);
                let g: Tensor<f64> = gumbel_noise(&[3, 6], &mut r);
                let z = l.zip_map(&g, |a, b| a + b).unwrap();
                if z.data().chunks(6).all(|row| slot_margin(row) >= 0.02) {
                    break (l, g);
                }
            };
            let tape = Tape::new();
            let l = tape.constant(logits.clone());
            let hard = gumbel_softmax(l, Some(&noise), 1e-3).unwrap().value();
            let mut prev = vec![f64::INFINITY; 3];
            for tau in [1.0, 0.5, 0.1, 0.01] {
                let y = gumbel_softmax(l, Some(&noise), tau).unwrap().value();
                for row in 0..3 {
                    let p = &y.data()[row * 6..(row + 1) * 6];
                    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                    let h = entropy(p);
                    assert!(h <= prev[row] + 1e-12, "entropy rose at tau {tau}");
                    prev[row] = h;
                }
            }
            for row in hard.data().chunks(6) {
                assert!(row.iter().cloned().fold(0.0, f64::max) >= 0.999);
            }
        }
    }

    #[test]
    fn gumbel_softmax_gradient() {
        let mut r = rng(13);
        let noise: Tensor<f64> = gumbel_noise(&[2, 5], &mut r);
        let weights: Tensor<f64> = random_input(&[2, 5], &mut r);
        let x: Tensor<f64> = random_input(&[2, 5], &mut r);
        let report = grad_check(
            |tape, v| {
                let y = gumbel_softmax(v[0], Some(&noise), 0.7)?;
                y.mul(tape.constant(weights.clone()))?.sum().exp().log()
            },
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_error());
    }

    #[test]
    fn gumbel_max_deterministic_and_unbiased() {
        let s = [0.2, 0.5, 0.3];
        let logits = t(&[3], &s.map(f64::ln));
        let hot = gumbel_max::<f64, ChaCha8Rng>(&logits, None);
        assert_eq!(hot.data(), &[0.0, 1.0, 0.0]);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);

        let draws = 100_000;
        let batch = Tensor::from_fn(&[draws, 3], |i| s[i % 3].ln());
        let picks = gumbel_argmax(&batch, Some(&mut rng(14)));
        let mut freq = [0.0; 3];
        for p in picks {
            freq[p] += 1.0 / draws as f64;
        }
        for i in 0..3 {
            assert!((freq[i] - s[i]).abs() <= 0.01, "{freq:?}");
        }

        let peaked: [f64; 3] = [0.999, 0.0005, 0.0005];
        let batch = Tensor::from_fn(&[draws, 3], |i| peaked[i % 3].ln());
        let zero_hits = gumbel_argmax(&batch, Some(&mut rng(15))).iter().filter(|&&p| p == 0).count();
        assert!((zero_hits as f64 / draws as f64 - 0.999).abs() < 0.002);
    }

    #[test]
    fn mil_pool_examples() {
        let tape = Tape::new();
        let same = tape.constant(Tensor::from_fn(&[5, 3], |i| [1.0, -2.0, 0.5][i % 3]));
        let w = tape.constant(t(&[3], &[0.3, 0.1, -4.0]));
        let y = mil_pool(same, w).unwrap().value();
        assert!(y.max_abs_diff(&t(&[3], &[1.0, -2.0, 0.5])) < 1e-12);

        let mut r = rng(16);
        let xv: Tensor<f64> = random_input(&[7, 4], &mut r);
        let x = tape.constant(xv.clone());
        let y = mil_pool(x, tape.constant(Tensor::zeros(&[4]))).unwrap().value();
        let mean = x.mean_axis(0, false).unwrap().value();
        assert!(y.max_abs_diff(&mean) < 1e-12);

        let w = tape.constant(random_input(&[4], &mut r));
        let y = mil_pool(x, w).unwrap().value();
        for j in 0..4 {
            let col: Vec<f64> = (0..7).map(|i| xv.at(&[i, j])).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(y.data()[j] >= lo - 1e-12 && y.data()[j] <= hi + 1e-12);
        }
        assert!(mil_pool(x, tape.constant(Tensor::zeros(&[3]))).is_err());
    }

    #[test]
    fn single_slot_gss_is_mil_pool_without_noise() {
        let mut r = rng(17);
        let layer = GssLayer::<f64>::new("gss", 1, 4, &mut r).unwrap();
        let tape = Tape::new();
        let x = tape.constant(random_input(&[6, 4], &mut r));
        let w = tape.param(&layer.weight);
        let logits = w.matmul(x.t()).unwrap();
        let soft = gumbel_softmax(logits, None, 1.0).unwrap().matmul(x).unwrap().reshape(&[4]).unwrap();
        let pooled = mil_pool(x, w.reshape(&[4]).unwrap()).unwrap();
        assert!(soft.value().max_abs_diff(&pooled.value()) < 1e-12);
    }

    #[test]
    fn infer_gss_permutation_invariant() {
        let mut r = rng(18);
        let cfg = SamplerConfig::default().infer();
        for _ in 0..20 {
            let layer = GssLayer::<f64>::new("gss", 5, 8, &mut r).unwrap();
            let xv: Tensor<f64> = random_input(&[20, 8], &mut r);
            let mut perm: Vec<usize> = (0..20).collect();
            perm.shuffle(&mut r);
            let tape = Tape::new();
            let a = gss(tape.constant(xv.clone()), &layer, &cfg, &mut r).unwrap();
            let b = gss(tape.constant(xv.select_rows(&perm)), &layer, &cfg, &mut r).unwrap();
            assert_eq!(a.features.value(), b.features.value());
            let relabeled: Vec<usize> = b.indices.iter().map(|&i| perm[i]).collect();
            assert_eq!(a.indices, relabeled);
        }
    }

    #[test]
    fn train_gss_saturates_to_selected_rows() {
        let mut r = rng(19);
        let mut layer = GssLayer::<f64>::new("gss", 3, 4, &mut r).unwrap();
        let xv = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        layer.weight.value = Tensor::from_fn(&[3, 4], |i| if i / 4 == i % 4 { 50.0 } else { 0.0 });
        let cfg = SamplerConfig::default().train(0.01);
        let tape = Tape::new();
        let out = gss(tape.constant(xv.clone()), &layer, &cfg, &mut r).unwrap();
        assert_eq!(out.indices, vec![0, 1, 2]);
        assert_eq!(out.duplicates, 0);
        assert!(out.features.value().max_abs_diff(&xv.select_rows(&[0, 1, 2])) < 1e-3);
    }

    #[test]
    fn duplicates_and_margins_reported() {
        let mut r = rng(20);
        let mut layer = GssLayer::<f64>::new("gss", 2, 2, &mut r).unwrap();
        layer.weight.value = t(&[2, 2], &[1.0, 0.0, 2.0, 0.0]);
        let tape = Tape::new();
        let x = tape.constant(t(&[3, 2], &[3.0, 0.0, 1.0, 0.0, 0.0, 0.0]));
        let out = gss(x, &layer, &SamplerConfig::default().infer(), &mut r).unwrap();
        assert_eq!(out.indices, vec![0, 0]);
        assert_eq!(out.duplicates, 1);
        assert!((out.margins[0] - 2.0).abs() < 1e-12 && (out.margins[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn anneal_schedule() {
        let cfg = SamplerConfig::default();
        assert!((anneal(&cfg, 0, 30) - 1.0).abs() < 1e-15);
        assert!((anneal(&cfg, 30, 30) - 0.1).abs() < 1e-12);
        assert!((anneal(&cfg, 15, 30) - 0.1f64.sqrt()).abs() < 1e-12);
        let flat = SamplerConfig {
            tau_end: 0.4,
            tau_start: 0.4,
            ..cfg.clone()
        };
        assert!((0..10).all(|e| anneal(&flat, e, 10) == 0.4));
        let taus: Vec<f64> = (0..=30).map(|e| anneal(&cfg, e, 30)).collect();
        assert!(taus.windows(2).all(|w| w[1] <= w[0]));
        assert!(SamplerConfig { tau_end: 2.0, ..cfg }.validate().is_err());
    }
}
