//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::tensor::{Real, Tape, Tensor, Var};

/// One checked coordinate.
#[derive(Clone, Debug)]
pub struct Coord {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub coords: Vec<Coord>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.coords.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }

    pub fn failures(&self) -> impl Iterator<Item = &Coord> {
        self.coords.iter().filter(move |c| !(c.rel_error < self.tolerance))
    }
}

/// Relative error with an absolute floor of 1 in the denominator, so
/// near-zero gradients are compared absolutely.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Compares reverse-mode gradients of the scalar function `f` against central
/// differences at every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64, tolerance: f64) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_, f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_, f64>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        Ok(out.value().item())
    };

    let mut coords = Vec::new();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (input, base) in inputs.iter().enumerate() {
        for index in 0..base.numel() {
            let x0 = base.data()[index];
            work[input].data_mut()[index] = x0 + step;
            let up = eval(&work)?;
            work[input].data_mut()[index] = x0 - step;
            let down = eval(&work)?;
            work[input].data_mut()[index] = x0;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[input].data()[index];
            coords.push(Coord {
                input,
                index,
                analytic: a,
                numeric,
                rel_error: rel_error(a, numeric),
            });
        }
    }
    Ok(GradReport { coords, tolerance })
}

/// Draws a tensor with entries uniform in `[-2, 2]`.
pub fn random_input<R: rand::Rng + ?Sized, T: Real>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-2.0..2.0)))
}
