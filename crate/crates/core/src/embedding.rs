//! Absolute and Relative Position Embedding (ARPE) and the plain per-point
//! MLP embedding it is compared against.

use rand::Rng;

use crate::attention::{Norm, NormKind};
use crate::error::{contract, Result};
use crate::geometry::{dilated_neighbor_sample, knn, position_set, NeighborIndex, PointCloud};
use crate::nn::{fit_groups, join, Linear, Module, Param};
use crate::sampling::Mode;
use crate::tensor::{Real, Tape, Var};

/// Preferred GN group count inside embedding MLPs.
pub const MLP_GROUPS: usize = 8;

/// `Linear → GN → ELU` repeated once per width.
#[derive(Clone, Debug)]
pub struct Mlp<T> {
    pub layers: Vec<(Linear<T>, Norm<T>)>,
}

impl<T: Real> Mlp<T> {
    pub fn new<R: Rng + ?Sized>(prefix: &str, input: usize, widths: &[usize], rng: &mut R) -> Result<Self> {
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = input;
        for (i, &w) in widths.iter().enumerate() {
            let p = join(prefix, &i.to_string());
            let lin = Linear::new(&join(&p, "fc"), fan_in, w, true, rng);
            let norm = Norm::new(&join(&p, "norm"), w, NormKind::Group(fit_groups(w, MLP_GROUPS)))?;
            layers.push((lin, norm));
            fan_in = w;
        }
        Ok(Self { layers })
    }

    pub fn out_dim(&self) -> Option<usize> {
        self.layers.last().map(|(l, _)| l.out_dim())
    }

    /// Applies every layer to the rows of `x`; GN statistics span all rows.
    pub fn forward<'t>(&self, mut x: Var<'t, T>) -> Result<Var<'t, T>> {
        for (lin, norm) in &self.layers {
            x = norm.forward(lin.forward(x)?)?.elu();
        }
        Ok(x)
    }
}

impl<T: Real> Module<T> for Mlp<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        for (l, n) in &self.layers {
            l.visit(f);
            n.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for (l, n) in &mut self.layers {
            l.visit_mut(f);
            n.visit_mut(f);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArpeConfig {
    pub k: usize,
    pub d0: f64,
    pub n0: usize,
    pub h_widths: Vec<usize>,
    pub gamma_widths: Vec<usize>,
}

impl ArpeConfig {
    /// `K = 32`, `d0 = 2` at `N0 = 1024`, widths scaled from `c_out`:
    /// `h = [c/16, c/8, c/4]`, `γ = [c/2, c]`, each at least 8.
    pub fn for_width(c_out: usize) -> Self {
        let w = |div: usize| (c_out / div).max(8);
        Self {
            k: 32,
            d0: 2.0,
            n0: 1024,
            h_widths: vec![w(16), w(8), w(4)],
            gamma_widths: vec![w(2), c_out],
        }
    }
}

/// `ARPE(x_p) = γ(max_j h(x_p, x_j − x_p))` over the neighbour position set.
#[derive(Clone, Debug)]
pub struct ArpeLayer<T> {
    pub config: ArpeConfig,
    pub in_channels: usize,
    pub h: Mlp<T>,
    pub gamma: Mlp<T>,
}

impl<T: Real> ArpeLayer<T> {
    /// `in_channels` is `3 + f`.
    pub fn new<R: Rng + ?Sized>(prefix: &str, in_channels: usize, config: ArpeConfig, rng: &mut R) -> Result<Self> {
        if config.k == 0 || config.h_widths.is_empty() || config.gamma_widths.is_empty() {
            return Err(contract("arpe needs k >= 1 and non-empty h and gamma widths".to_string()));
        }
        let h = Mlp::new(&join(prefix, "h"), 2 * in_channels, &config.h_widths, rng)?;
        let gamma = Mlp::new(&join(prefix, "gamma"), h.out_dim().unwrap(), &config.gamma_widths, rng)?;
        Ok(Self {
            config,
            in_channels,
            h,
            gamma,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.gamma.out_dim().unwrap()
    }

    /// Neighbour table for `cloud`: dilated sampling in training, plain
    /// top-K at inference. `K` is clamped to `N − 1`.
    pub fn neighbors<R: Rng + ?Sized>(&self, cloud: &PointCloud<T>, mode: Mode, rng: &mut R) -> Result<NeighborIndex> {
        let n = cloud.len();
        if n < 2 {
            return Err(contract(format!("arpe needs at least 2 points, got {n}")));
        }
        let k = self.config.k.min(n - 1);
        match mode {
            Mode::Train => dilated_neighbor_sample(cloud, k, self.config.d0, self.config.n0, rng),
            Mode::Infer => knn(cloud, k),
        }
    }
}

impl<T: Real> Module<T> for ArpeLayer<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.h.visit(f);
        self.gamma.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.h.visit_mut(f);
        self.gamma.visit_mut(f);
    }
}

/// Re-sorts each neighbour row by (distance, index). The max over `K` does not
/// care about order, and a fixed order keeps the normalization sums, and so
/// the output bits, independent of how the rows were listed.
fn canonical_order<T: Real>(cloud: &PointCloud<T>, nbrs: &NeighborIndex) -> Result<NeighborIndex> {
    let k = nbrs.k();
    let mut flat = Vec::with_capacity(nbrs.flat().len());
    for p in 0..nbrs.n() {
        let xp = cloud.xyz(p);
        let mut row: Vec<(T, usize)> = nbrs
            .row(p)
            .iter()
            .map(|&i| {
                let xi = cloud.xyz(i);
                let d = (0..3).map(|a| (xi[a] - xp[a]) * (xi[a] - xp[a])).fold(T::zero(), |s, v| s + v);
                (d, i)
            })
            .collect();
        row.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
        flat.extend(row.into_iter().map(|(_, i)| i));
    }
    NeighborIndex::new(flat, nbrs.n(), k, nbrs.pool)
}

/// ARPE on a given neighbour table, `N × c_out`.
pub fn arpe_with<'t, T: Real>(
    tape: &'t Tape<T>,
    cloud: &PointCloud<T>,
    nbrs: &NeighborIndex,
    layer: &ArpeLayer<T>,
) -> Result<Var<'t, T>> {
    if cloud.channels() != layer.in_channels {
        return Err(contract(format!(
            "arpe built for {} channels, cloud has {}",
            layer.in_channels,
            cloud.channels()
        )));
    }
    let (n, k) = (cloud.len(), nbrs.k());
    let nbrs = canonical_order(cloud, nbrs)?;
    let pairs = position_set(cloud, &nbrs)?.reshape(&[n * k, 2 * layer.in_channels])?;
    let hidden = layer.h.forward(tape.constant(pairs))?;
    let width = hidden.shape()[1];
    let pooled = hidden.reshape(&[n, k, width])?.max_axis(1, false)?;
    layer.gamma.forward(pooled)
}

/// ARPE with neighbours drawn per [`ArpeLayer::neighbors`].
pub fn arpe<'t, T: Real, R: Rng + ?Sized>(
    tape: &'t Tape<T>,
    cloud: &PointCloud<T>,
    layer: &ArpeLayer<T>,
    mode: Mode,
    rng: &mut R,
) -> Result<Var<'t, T>> {
    let nbrs = layer.neighbors(cloud, mode, rng)?;
    arpe_with(tape, cloud, &nbrs, layer)
}

/// Ablation comparator: a shared per-point MLP on the raw `3 + f` channels
/// with the same widths as ARPE's `h` followed by `γ`.
#[derive(Clone, Debug)]
pub struct PointMlp<T> {
    pub in_channels: usize,
    pub mlp: Mlp<T>,
}

impl<T: Real> PointMlp<T> {
    pub fn new<R: Rng + ?Sized>(prefix: &str, in_channels: usize, config: &ArpeConfig, rng: &mut R) -> Result<Self> {
        let widths: Vec<usize> = config.h_widths.iter().chain(&config.gamma_widths).copied().collect();
        Ok(Self {
            in_channels,
            mlp: Mlp::new(&join(prefix, "mlp"), in_channels, &widths, rng)?,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, cloud: &PointCloud<T>) -> Result<Var<'t, T>> {
        if cloud.channels() != self.in_channels {
            return Err(contract(format!(
                "embedding built for {} channels, cloud has {}",
                self.in_channels,
                cloud.channels()
            )));
        }
        self.mlp.forward(tape.constant(cloud.points().clone()))
    }
}

impl<T: Real> Module<T> for PointMlp<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.mlp.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.mlp.visit_mut(f);
    }
}
