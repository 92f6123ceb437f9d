//! Parameters, the parameter registry, and small shared building blocks.

use std::collections::HashSet;

use rand::Rng;

use crate::error::{contract, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// A trainable tensor with a dotted path name such as `gsa.0.group.3.weight`.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    /// Fan-based uniform init: `U(±sqrt(6 / (fan_in + fan_out)))`.
    pub fn glorot<R: Rng + ?Sized>(name: impl Into<String>, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let value = Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)));
        Self::new(name, value)
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::zeros(shape))
    }

    pub fn ones(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::ones(shape))
    }
}

/// Anything that owns parameters.
pub trait Module<T: Real> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>));

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.numel());
        n
    }
}

/// Checks that every parameter name occurs exactly once.
pub fn check_registry<T: Real, M: Module<T> + ?Sized>(m: &M) -> Result<()> {
    let mut seen = HashSet::new();
    for p in m.params() {
        if !seen.insert(p.name.as_str()) {
            return Err(contract(format!("parameter {} registered twice", p.name)));
        }
    }
    Ok(())
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Fully connected layer `y = x·W + b` with `W: in×out`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(prefix: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Self {
        Self {
            weight: Param::glorot(join(prefix, "weight"), &[fan_in, fan_out], fan_in, fan_out, rng),
            bias: bias.then(|| Param::zeros(join(prefix, "bias"), &[fan_out])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.dim(0)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.dim(1)
    }

    pub fn forward<'t>(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let tape = x.tape();
        let w = tape.param(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.param(b));
        if x.with_value(|t| t.rank()) == 2 {
            return x.linear(w, b);
        }
        let y = x.matmul(w)?;
        match b {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// Per-channel affine parameters of a normalization layer (scale 1, bias 0).
#[derive(Clone, Debug)]
pub struct Affine<T> {
    pub scale: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Affine<T> {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self {
            scale: Param::ones(join(prefix, "scale"), &[channels]),
            bias: Param::zeros(join(prefix, "bias"), &[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.value.numel()
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> (Var<'t, T>, Var<'t, T>) {
        (tape.param(&self.scale), tape.param(&self.bias))
    }
}

impl<T: Real> Module<T> for Affine<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.scale);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.scale);
        f(&mut self.bias);
    }
}

/// Largest group count `<= preferred` that divides `channels`.
pub fn fit_groups(channels: usize, preferred: usize) -> usize {
    (1..=preferred.min(channels).max(1))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}
