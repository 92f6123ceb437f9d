//! Attention operators on feature sets `X ∈ R^{N×c}`.
//!
//! Rows are set elements (points), columns are channels. Every operator here is
//! permutation-equivariant in the rows.

use rand::Rng;

use crate::error::{contract, shape_err, Result};
use crate::nn::{join, Affine, Linear, Module, Param};
use crate::tensor::{concat, Real, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;

/// Channel grouping `c = g · c_g`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupConfig {
    pub c: usize,
    pub g: usize,
}

impl GroupConfig {
    pub fn new(c: usize, g: usize) -> Result<Self> {
        if g == 0 || c == 0 || c % g != 0 {
            return Err(contract(format!("channel count {c} not divisible by group count {g}")));
        }
        Ok(Self { c, g })
    }

    pub fn cg(&self) -> usize {
        self.c / self.g
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Group normalization with this many groups, statistics over points × group channels.
    Group(usize),
    /// Layer normalization over the channels of each point.
    Layer,
}

fn check_features<T: Real>(x: &Var<'_, T>, c: usize, op: &'static str) -> Result<usize> {
    let s = x.shape();
    if s.len() != 2 || s[1] != c {
        return Err(shape_err(op, &s, &[s.first().copied().unwrap_or(0), c]));
    }
    Ok(s[0])
}

/// `softmax(q·xᵀ / √c)`, shape `N_q × N`.
pub fn attn_weights<'t, T: Real>(q: Var<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let (qs, xs) = (q.shape(), x.shape());
    if qs.len() != 2 || xs.len() != 2 || qs[1] != xs[1] {
        return Err(shape_err("attn_weights", &qs, &xs));
    }
    let c = qs[1] as f64;
    Ok(q.matmul_nt(x)?.scaled_softmax(1, 1.0 / c.sqrt()))
}

/// `S(q, x) · x`.
pub fn vanilla_attn<'t, T: Real>(q: Var<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
    attn_weights(q, x)?.matmul(x)
}

/// `S(x, x) · elu(x)`: the pre-activation attends to the post-activation.
pub fn nonlinear_self_attn<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    attn_weights(x, x)?.matmul(x.elu())
}

/// Same as [`nonlinear_self_attn`] on a batch `[B, N, c]`, each slice independent.
fn batched_nonlinear_self_attn<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let c = x.shape()[2] as f64;
    let scores = x.matmul_nt(x)?.scaled_softmax(2, 1.0 / c.sqrt());
    scores.matmul(x.elu())
}

/// Source channel of every output channel of the shuffle: output position
/// `j·g + i` reads input `i·c_g + j`.
pub fn shuffle_source(c: usize, g: usize) -> Result<Vec<usize>> {
    let cfg = GroupConfig::new(c, g)?;
    let cg = cfg.cg();
    let mut src = vec![0; c];
    for j in 0..cg {
        for i in 0..g {
            src[j * g + i] = i * cg + j;
        }
    }
    Ok(src)
}

/// Parameter-free channel shuffle, realised as reshape → transpose → flatten.
pub fn channel_shuffle<'t, T: Real>(x: Var<'t, T>, g: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    let (n, c) = (s[0], s[1]);
    let cfg = GroupConfig::new(c, g)?;
    x.reshape(&[n, g, cfg.cg()])?.permute(&[0, 2, 1])?.reshape(&[n, c])
}

fn affine<'t, T: Real>(x: Var<'t, T>, scale: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
    x.scale_shift(scale, bias)
}

/// Group normalization of an `N × c` set: statistics over all points and the
/// `c/g` channels of each group, then a per-channel affine.
pub fn group_norm<'t, T: Real>(
    x: Var<'t, T>,
    g: usize,
    eps: f64,
    scale: Var<'t, T>,
    bias: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(shape_err("group_norm", &s, &[0, 0]));
    }
    GroupConfig::new(s[1], g)?;
    affine(x.normalize(g, false, eps)?, scale, bias)
}

/// Layer normalization over the channels of each point.
pub fn layer_norm<'t, T: Real>(x: Var<'t, T>, eps: f64, scale: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
    if x.shape().len() != 2 {
        return Err(shape_err("layer_norm", &x.shape(), &[0, 0]));
    }
    affine(x.normalize(1, true, eps)?, scale, bias)
}

/// Normalization with its own affine parameters.
#[derive(Clone, Debug)]
pub struct Norm<T> {
    pub kind: NormKind,
    pub affine: Affine<T>,
}

impl<T: Real> Norm<T> {
    pub fn new(prefix: &str, channels: usize, kind: NormKind) -> Result<Self> {
        if let NormKind::Group(g) = kind {
            GroupConfig::new(channels, g)?;
        }
        Ok(Self {
            kind,
            affine: Affine::new(prefix, channels),
        })
    }

    pub fn forward<'t>(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (s, b) = self.affine.bind(x.tape());
        match self.kind {
            NormKind::Group(g) => group_norm(x, g, NORM_EPS, s, b),
            NormKind::Layer => layer_norm(x, NORM_EPS, s, b),
        }
    }
}

impl<T: Real> Module<T> for Norm<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.affine.visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.affine.visit_mut(f)
    }
}

/// Group Shuffle Attention block: `norm(shuffle(GroupAttn(x)) + x)`.
#[derive(Clone, Debug)]
pub struct GsaLayer<T> {
    pub config: GroupConfig,
    /// `W_i`, one `c_g × c_g` matrix per group.
    pub group_weights: Vec<Param<T>>,
    pub norm: Norm<T>,
    pub shuffle: bool,
}

impl<T: Real> GsaLayer<T> {
    /// Block with channel shuffle on and group norm sharing the attention's `g`.
    pub fn new<R: Rng + ?Sized>(prefix: &str, c: usize, g: usize, rng: &mut R) -> Result<Self> {
        Self::with_options(prefix, c, g, true, NormKind::Group(g), rng)
    }

    pub fn with_options<R: Rng + ?Sized>(
        prefix: &str,
        c: usize,
        g: usize,
        shuffle: bool,
        norm: NormKind,
        rng: &mut R,
    ) -> Result<Self> {
        let config = GroupConfig::new(c, g)?;
        let cg = config.cg();
        let group_weights = (0..g)
            .map(|i| Param::glorot(join(prefix, &format!("group.{i}.weight")), &[cg, cg], cg, cg, rng))
            .collect();
        Ok(Self {
            config,
            group_weights,
            norm: Norm::new(&join(prefix, "norm"), c, norm)?,
            shuffle,
        })
    }

    /// Number of scalars in the group transforms: `c² / g`.
    pub fn attention_params(&self) -> usize {
        self.group_weights.iter().map(Param::numel).sum()
    }
}

impl<T: Real> Module<T> for GsaLayer<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        for w in &self.group_weights {
            f(w);
        }
        self.norm.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for w in &mut self.group_weights {
            f(w);
        }
        self.norm.visit_mut(f);
    }
}

/// `concat_i Attn_σ(X⁽ⁱ⁾W_i, X⁽ⁱ⁾W_i)` over the `g` channel groups.
pub fn group_attn<'t, T: Real>(x: Var<'t, T>, layer: &GsaLayer<T>) -> Result<Var<'t, T>> {
    let GroupConfig { c, g } = layer.config;
    let n = check_features(&x, c, "group_attn")?;
    let cg = layer.config.cg();
    let tape = x.tape();
    let weights: Vec<Var<'t, T>> = layer
        .group_weights
        .iter()
        .map(|w| tape.param(w).reshape(&[1, cg, cg]))
        .collect::<Result<_>>()?;
    let w = concat(&weights, 0)?;
    let groups = x.reshape(&[n, g, cg])?.permute(&[1, 0, 2])?;
    let projected = groups.matmul(w)?;
    batched_nonlinear_self_attn(projected)?
        .permute(&[1, 0, 2])?
        .reshape(&[n, c])
}

/// `norm(shuffle(group_attn(x)) + x)`.
pub fn gsa<'t, T: Real>(x: Var<'t, T>, layer: &GsaLayer<T>) -> Result<Var<'t, T>> {
    let mut y = group_attn(x, layer)?;
    if layer.shuffle {
        y = channel_shuffle(y, layer.config.g)?;
    }
    layer.norm.forward(y.add(x)?)
}

/// Multi-head attention baseline: one projection per head shared by keys,
/// queries and values, a position-wise MLP, then the same residual + norm
/// wrapper as GSA.
#[derive(Clone, Debug)]
pub struct MhaLayer<T> {
    pub c: usize,
    pub heads: usize,
    /// `W_h`, each `c × c/H`.
    pub head_weights: Vec<Param<T>>,
    pub mlp_in: Linear<T>,
    pub mlp_out: Linear<T>,
    pub norm: Norm<T>,
}

impl<T: Real> MhaLayer<T> {
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        c: usize,
        heads: usize,
        mlp_hidden: usize,
        norm: NormKind,
        rng: &mut R,
    ) -> Result<Self> {
        let dh = GroupConfig::new(c, heads)?.cg();
        let head_weights = (0..heads)
            .map(|h| Param::glorot(join(prefix, &format!("head.{h}.weight")), &[c, dh], c, dh, rng))
            .collect();
        Ok(Self {
            c,
            heads,
            head_weights,
            mlp_in: Linear::new(&join(prefix, "mlp.0"), c, mlp_hidden, true, rng),
            mlp_out: Linear::new(&join(prefix, "mlp.1"), mlp_hidden, c, true, rng),
            norm: Norm::new(&join(prefix, "norm"), c, norm)?,
        })
    }
}

impl<T: Real> Module<T> for MhaLayer<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        for w in &self.head_weights {
            f(w);
        }
        self.mlp_in.visit(f);
        self.mlp_out.visit(f);
        self.norm.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for w in &mut self.head_weights {
            f(w);
        }
        self.mlp_in.visit_mut(f);
        self.mlp_out.visit_mut(f);
        self.norm.visit_mut(f);
    }
}

/// `concat_h Attn(XW_h, XW_h)` without the MLP or residual.
pub fn multi_head<'t, T: Real>(x: Var<'t, T>, layer: &MhaLayer<T>) -> Result<Var<'t, T>> {
    check_features(&x, layer.c, "mha")?;
    let tape = x.tape();
    let heads: Vec<Var<'t, T>> = layer
        .head_weights
        .iter()
        .map(|w| {
            let xh = x.matmul(tape.param(w))?;
            vanilla_attn(xh, xh)
        })
        .collect::<Result<_>>()?;
    concat(&heads, 1)
}

/// `norm(mlp(multi_head(x)) + x)`.
pub fn mha<'t, T: Real>(x: Var<'t, T>, layer: &MhaLayer<T>) -> Result<Var<'t, T>> {
    let h = multi_head(x, layer)?;
    let y = layer.mlp_out.forward(layer.mlp_in.forward(h)?.elu())?;
    layer.norm.forward(y.add(x)?)
}

/// Scalars in one GSA block: `c²/g` attention weights plus `2c` norm affine.
pub fn gsa_param_count(c: usize, g: usize) -> usize {
    c * c / g + 2 * c
}

/// Scalars in one MHA block with `H` heads and an MLP of width `hidden`.
pub fn mha_param_count(c: usize, heads: usize, hidden: usize) -> usize {
    let projections = heads * c * (c / heads);
    let mlp = c * hidden + hidden + hidden * c + c;
    projections + mlp + 2 * c
}

/// Pure-tensor reference of the shuffle, used by tests and the property suite.
pub fn shuffle_tensor<T: Real>(x: &Tensor<T>, g: usize) -> Result<Tensor<T>> {
    let c = x.dim(1);
    let src = shuffle_source(c, g)?;
    Ok(Tensor::from_fn(x.shape(), |i| {
        let (r, j) = (i / c, i % c);
        x.data()[r * c + src[j]]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, random_input};
    use crate::tensor::Tape;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn permute_rows(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
        x.select_rows(perm)
    }

    #[test]
    fn identical_rows_give_uniform_weights() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[5, 3], |i| (i % 3) as f64 * 0.7));
        let w = attn_weights(x, x).unwrap().value();
        assert!(w.data().iter().all(|&v| (v - 0.2).abs() < 1e-12));
        let out = vanilla_attn(x, x).unwrap().value();
        assert!(out.max_abs_diff(&x.value()) < 1e-12);
    }

    #[test]
    fn single_row_weight_is_one() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 4], &[1.0, -2.0, 0.5, 3.0]).unwrap());
        assert_eq!(attn_weights(x, x).unwrap().value().data(), &[1.0]);
        let y = nonlinear_self_attn(x).unwrap().value();
        let want = x.value().map(crate::tensor::kernels::elu);
        assert!(y.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn attn_weights_match_explicit_loop() {
        let mut r = rng(4);
        let q: Tensor<f64> = random_input(&[4, 8], &mut r);
        let x: Tensor<f64> = random_input(&[6, 8], &mut r);
        let tape = Tape::new();
        let w = attn_weights(tape.constant(q.clone()), tape.constant(x.clone())).unwrap().value();
        for i in 0..4 {
            let scores: Vec<f64> = (0..6)
                .map(|j| (0..8).map(|k| q.at(&[i, k]) * x.at(&[j, k])).sum::<f64>() / 8f64.sqrt())
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for j in 0..6 {
                assert!((w.at(&[i, j]) - scores[j].exp() / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn saturated_scores_pick_a_row() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let q = tape.constant(Tensor::from_f64(&[1, 2], &[400.0, 0.0]).unwrap());
        let y = vanilla_attn(q, x).unwrap().value();
        assert!((y.data()[0] - 1.0).abs() < 1e-9 && y.data()[1].abs() < 1e-9);
    }

    #[test]
    fn vanilla_output_inside_hull() {
        let mut r = rng(5);
        let x: Tensor<f64> = random_input(&[7, 5], &mut r);
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = vanilla_attn(xv, xv).unwrap().value();
        for ch in 0..5 {
            let col: Vec<f64> = (0..7).map(|i| x.at(&[i, ch])).collect();
            let (lo, hi) = col.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            for i in 0..7 {
                let v = y.at(&[i, ch]);
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let tape = Tape::<f64>::new();
        let y = nonlinear_self_attn(tape.constant(Tensor::zeros(&[3, 4]))).unwrap().value();
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn nonlinear_self_attn_equivariant() {
        let mut r = rng(6);
        let x: Tensor<f64> = random_input(&[9, 6], &mut r);
        let mut perm: Vec<usize> = (0..9).collect();
        perm.shuffle(&mut r);
        let tape = Tape::new();
        let y = nonlinear_self_attn(tape.constant(x.clone())).unwrap().value();
        let yp = nonlinear_self_attn(tape.constant(permute_rows(&x, &perm))).unwrap().value();
        assert!(yp.max_abs_diff(&permute_rows(&y, &perm)) < 1e-12);
    }

    #[test]
    fn shuffle_six_channels_two_groups() {
        let x = Tensor::<f64>::from_f64(&[1, 6], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let tape = Tape::new();
        let y = channel_shuffle(tape.constant(x.clone()), 2).unwrap().value();
        assert_eq!(y.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(shuffle_tensor(&x, 2).unwrap(), *y);
        for g in [1, 6] {
            assert_eq!(*channel_shuffle(tape.constant(x.clone()), g).unwrap().value(), x);
        }
        assert!(channel_shuffle(tape.constant(x), 4).is_err());
    }

    #[test]
    fn shuffle_inverse_is_swapped_grouping() {
        for c in 1..=24 {
            for g in (1..=c).filter(|g| c % g == 0) {
                let x = Tensor::<f64>::from_fn(&[2, c], |i| i as f64);
                let tape = Tape::new();
                let y = channel_shuffle(tape.constant(x.clone()), g).unwrap();
                let back = channel_shuffle(y, c / g).unwrap().value();
                assert_eq!(*back, x, "c={c} g={g}");
            }
        }
    }

    #[test]
    fn group_attn_single_group_is_projected_self_attention() {
        let mut r = rng(7);
        let layer: GsaLayer<f64> = GsaLayer::new("gsa", 6, 1, &mut r).unwrap();
        let x: Tensor<f64> = random_input(&[5, 6], &mut r);
        let tape = Tape::new();
        let xv = tape.constant(x);
        let a = group_attn(xv, &layer).unwrap().value();
        let proj = xv.matmul(tape.constant(layer.group_weights[0].value.clone())).unwrap();
        let b = nonlinear_self_attn(proj).unwrap().value();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn attention_param_count_is_c_squared_over_g() {
        let mut r = rng(8);
        let l8: GsaLayer<f32> = GsaLayer::new("a", 1024, 8, &mut r).unwrap();
        assert_eq!(l8.attention_params(), 131_072);
        let l1: GsaLayer<f32> = GsaLayer::new("b", 1024, 1, &mut r).unwrap();
        assert_eq!(l1.attention_params(), 1_048_576);
        assert_eq!(l8.param_count(), gsa_param_count(1024, 8));
    }

    #[test]
    fn groups_are_independent() {
        let mut r = rng(9);
        let layer: GsaLayer<f64> = GsaLayer::new("gsa", 12, 3, &mut r).unwrap();
        let x: Tensor<f64> = random_input(&[6, 12], &mut r);
        let mut zeroed = x.clone();
        for i in 0..6 {
            for ch in 4..8 {
                zeroed.data_mut()[i * 12 + ch] = 0.0;
            }
        }
        let tape = Tape::new();
        let a = group_attn(tape.constant(x), &layer).unwrap().value();
        let b = group_attn(tape.constant(zeroed), &layer).unwrap().value();
        for i in 0..6 {
            for ch in 0..12 {
                let d = (a.at(&[i, ch]) - b.at(&[i, ch])).abs();
                if (4..8).contains(&ch) {
                    continue;
                }
                assert!(d < 1e-14, "group outside 1 changed at ({i},{ch})");
            }
        }
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    fn unit_affine(tape: &Tape<f64>, c: usize) -> (Var<'_, f64>, Var<'_, f64>) {
        (tape.constant(Tensor::ones(&[c])), tape.constant(Tensor::zeros(&[c])))
    }

    #[test]
    fn group_norm_constant_input_is_zero() {
        let tape = Tape::new();
        let (s, b) = unit_affine(&tape, 8);
        let y = group_norm(tape.constant(Tensor::full(&[4, 8], 3.0)), 2, NORM_EPS, s, b).unwrap().value();
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn group_norm_standardizes_groups() {
        let mut r = rng(10);
        let x: Tensor<f64> = random_input(&[7, 8], &mut r);
        let tape = Tape::new();
        let (s, b) = unit_affine(&tape, 8);
        let y = group_norm(tape.constant(x), 4, NORM_EPS, s, b).unwrap().value();
        for grp in 0..4 {
            let vals: Vec<f64> = (0..7).flat_map(|i| (0..2).map(move |j| (i, grp * 2 + j))).map(|(i, ch)| y.at(&[i, ch])).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn group_norm_single_group_is_slab_layer_norm() {
        let mut r = rng(11);
        let x: Tensor<f64> = random_input(&[5, 6], &mut r);
        let tape = Tape::new();
        let (s, b) = unit_affine(&tape, 6);
        let gn = group_norm(tape.constant(x.clone()), 1, NORM_EPS, s, b).unwrap().value();
        let (s30, b30) = unit_affine(&tape, 30);
        let ln = layer_norm(tape.constant(x.reshape(&[1, 30]).unwrap()), NORM_EPS, s30, b30).unwrap().value();
        assert!(gn.reshape(&[1, 30]).unwrap().max_abs_diff(&ln) < 1e-12);
    }

    #[test]
    fn layer_norm_matches_per_point_group_norm() {
        let mut r = rng(12);
        let x: Tensor<f64> = random_input(&[4, 6], &mut r);
        let tape = Tape::new();
        let (s, b) = unit_affine(&tape, 6);
        let ln = layer_norm(tape.constant(x.clone()), NORM_EPS, s, b).unwrap().value();
        for i in 0..4 {
            let row = Tensor::new(&[1, 6], x.row(i).to_vec()).unwrap();
            let gn = group_norm(tape.constant(row), 1, NORM_EPS, s, b).unwrap().value();
            assert!(gn.data().iter().zip(ln.row(i)).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        let shifted = x.map(|v| v + 5.0);
        let ln2 = layer_norm(tape.constant(shifted), NORM_EPS, s, b).unwrap().value();
        assert!(ln2.max_abs_diff(&ln) < 1e-9);
        let (s1, b1) = unit_affine(&tape, 3);
        let flat = layer_norm(tape.constant(Tensor::full(&[2, 3], 1.5)), NORM_EPS, s1, b1).unwrap().value();
        assert_eq!(flat.max_abs(), 0.0);
    }

    #[test]
    fn gsa_preserves_shape_and_is_equivariant() {
        let mut r = rng(13);
        for (n, c, g) in [(3, 8, 2), (10, 16, 4), (1, 8, 8)] {
            let layer: GsaLayer<f64> = GsaLayer::new("gsa", c, g, &mut r).unwrap();
            let x: Tensor<f64> = random_input(&[n, c], &mut r);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut r);
            let tape = Tape::new();
            let y = gsa(tape.constant(x.clone()), &layer).unwrap().value();
            assert_eq!(y.shape(), &[n, c]);
            let yp = gsa(tape.constant(permute_rows(&x, &perm)), &layer).unwrap().value();
            assert!(yp.max_abs_diff(&permute_rows(&y, &perm)) < 1e-12);
        }
    }

    #[test]
    fn gsa_gradient_check() {
        let mut r = rng(14);
        let layer: GsaLayer<f64> = GsaLayer::new("gsa", 16, 4, &mut r).unwrap();
        let x: Tensor<f64> = random_input(&[8, 16], &mut r);
        let probe: Tensor<f64> = random_input(&[8, 16], &mut r);
        let mut inputs = vec![x, probe];
        inputs.extend(layer.group_weights.iter().map(|p| p.value.clone()));
        let report = grad_check(
            |tape, v| {
                for (p, &var) in layer.group_weights.iter().zip(&v[2..]) {
                    tape.bind(&p.name, var);
                }
                Ok(gsa(v[0], &layer)?.mul(v[1])?.sum())
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_error());
    }

    #[test]
    fn mha_single_identity_head_is_vanilla() {
        let mut r = rng(15);
        let mut layer: MhaLayer<f64> = MhaLayer::new("mha", 4, 1, 4, NormKind::Group(1), &mut r).unwrap();
        layer.head_weights[0].value = Tensor::eye(4);
        let x: Tensor<f64> = random_input(&[5, 4], &mut r);
        let tape = Tape::new();
        let xv = tape.constant(x);
        let a = multi_head(xv, &layer).unwrap().value();
        let b = vanilla_attn(xv, xv).unwrap().value();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn mha_equivariant_and_larger_than_gsa() {
        let mut r = rng(16);
        let layer: MhaLayer<f64> = MhaLayer::new("mha", 16, 4, 16, NormKind::Group(4), &mut r).unwrap();
        let x: Tensor<f64> = random_input(&[7, 16], &mut r);
        let mut perm: Vec<usize> = (0..7).collect();
        perm.shuffle(&mut r);
        let tape = Tape::new();
        let y = mha(tape.constant(x.clone()), &layer).unwrap().value();
        let yp = mha(tape.constant(permute_rows(&x, &perm)), &layer).unwrap().value();
        assert!(yp.max_abs_diff(&permute_rows(&y, &perm)) < 1e-12);
        assert_eq!(layer.param_count(), mha_param_count(16, 4, 16));
        for h in [2, 4, 8] {
            assert!(mha_param_count(64, h, 64) > gsa_param_count(64, h));
        }
    }

    #[test]
    fn mha_rejects_indivisible_heads() {
        let mut r = rng(17);
        assert!(MhaLayer::<f64>::new("m", 10, 4, 8, NormKind::Layer, &mut r).is_err());
    }
}
