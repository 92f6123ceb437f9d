//! Reverse-mode differentiation tape.
//!
//! A [`Tape`] owns an append-only list of nodes; every [`Var`] is an index into
//! it. Nodes are created in topological order, so backward is a single reverse
//! sweep over insertion order.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, Reduce};
use super::{Real, Tensor};
use crate::error::{contract, shape_err, PatError, Result};
use crate::nn::Param;

/// Operation recorded for a node, with the input node ids and whatever the
/// backward rule needs beyond the input and output values.
#[derive(Clone, Debug)]
pub enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Elu(usize),
    Powf(usize, T),
    Scale(usize, T),
    AddScalar(usize),
    MatMul(usize, usize),
    /// `a · bᵀ` with `b` stored untransposed.
    MatMulNt(usize, usize),
    /// Standardization of an `[n, c]` tensor; `inv_std` holds one entry per
    /// statistics group.
    /// `x · w + b` for rank-2 `x`, with an optional bias row.
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    /// Per-channel `x · scale + bias` on an `[n, c]` tensor.
    ScaleShift {
        x: usize,
        scale: usize,
        bias: usize,
    },
    Normalize {
        x: usize,
        groups: usize,
        per_row: bool,
        inv_std: Vec<T>,
    },
    /// Softmax of `x · s` along an axis.
    Softmax(usize, usize, T),
    LogSoftmax(usize, usize),
    Reduce {
        x: usize,
        kind: Reduce,
        axis: usize,
        argmax: Option<Vec<usize>>,
    },
    SumAll(usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    IndexSelect(usize, Vec<usize>),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-owner differentiation tape. One forward/backward per tape.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<String, usize>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        #[cfg(debug_assertions)]
        {
            if !value.is_finite() {
                // Leaves may hold diverged parameters; training reports those itself.
                let nodes = self.nodes.borrow();
                let inputs = op_inputs(&op);
                let inputs_finite = inputs.iter().all(|&i| nodes[i].value.is_finite());
                assert!(inputs.is_empty() || !inputs_finite, "non-finite output from finite inputs in {op:?}");
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that is not differentiated.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable input.
    pub fn leaf(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a parameter to this tape. Binding the same name twice returns the
    /// same node.
    pub fn param(&self, p: &Param<T>) -> Var<'_, T> {
        if let Some(&id) = self.params.borrow().get(&p.name) {
            return Var { tape: self, id };
        }
        let v = self.leaf(p.value.clone());
        self.params.borrow_mut().insert(p.name.clone(), v.id);
        v
    }

    /// Makes later `param(p)` calls with `p.name == name` resolve to `v`.
    /// Lets a caller differentiate with respect to parameters through leaves it owns.
    pub fn bind(&self, name: &str, v: Var<'_, T>) {
        self.params.borrow_mut().insert(name.to_string(), v.id);
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn val(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn unary(&self, x: usize, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let rg = self.requires(&[x]);
        self.push(value, op, rg)
    }

    /// Reverse sweep from a scalar `loss`. The tape is left intact, so calling
    /// this twice yields identical gradients.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, gi) in backward_rule(&nodes, id, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&gi),
                    slot => *slot = Some(gi),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.borrow().clone(),
        })
    }
}

#[cfg(debug_assertions)]
fn op_inputs<T>(op: &Op<T>) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) | Op::MatMulNt(a, b) => {
            vec![*a, *b]
        }
        Op::Neg(x)
        | Op::Exp(x)
        | Op::Log(x)
        | Op::Elu(x)
        | Op::Powf(x, _)
        | Op::Scale(x, _)
        | Op::AddScalar(x)
        | Op::Softmax(x, _, _)
        | Op::LogSoftmax(x, _)
        | Op::SumAll(x)
        | Op::Reshape(x)
        | Op::Permute(x, _)
        | Op::IndexSelect(x, _) => vec![*x],
        Op::Reduce { x, .. } | Op::Narrow { x, .. } | Op::Normalize { x, .. } => vec![*x],
        Op::Linear { x, w, b } => [*x, *w].into_iter().chain(*b).collect(),
        Op::ScaleShift { x, scale, bias } => vec![*x, *scale, *bias],
        Op::Concat(xs, _) => xs.clone(),
    }
}

fn expand_along<T: Real>(g: &Tensor<T>, shape: &[usize], axis: usize, scale: T) -> Tensor<T> {
    let (outer, len, inner) = kernels::axis_split(shape, axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for src in g.data().chunks(inner) {
        for _ in 0..len {
            data.extend(src.iter().map(|&v| v * scale));
        }
    }
    Tensor::from_raw(shape.to_vec(), data)
}

fn backward_rule<T: Real>(nodes: &[Node<T>], id: usize, g: &Tensor<T>) -> Vec<(usize, Tensor<T>)> {
    let v = |i: usize| -> &Tensor<T> { &nodes[i].value };
    let out = &nodes[id].value;
    let bin = |a: usize, b: usize, f: &dyn Fn(T, T) -> T| -> Tensor<T> {
        kernels::broadcast_binary("backward", v(a), v(b), f).expect("shapes checked in forward")
    };
    let mul_g = |t: &Tensor<T>| -> Tensor<T> {
        kernels::broadcast_binary("backward", g, t, |x, y| x * y).expect("shapes checked in forward")
    };
    match &nodes[id].op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![
            (*a, kernels::sum_to_shape(g, v(*a).shape())),
            (*b, kernels::sum_to_shape(g, v(*b).shape())),
        ],
        Op::Sub(a, b) => vec![
            (*a, kernels::sum_to_shape(g, v(*a).shape())),
            (*b, kernels::sum_to_shape(&g.map(|x| -x), v(*b).shape())),
        ],
        Op::Mul(a, b) => vec![
            (*a, kernels::sum_to_shape(&mul_g(v(*b)), v(*a).shape())),
            (*b, kernels::sum_to_shape(&mul_g(v(*a)), v(*b).shape())),
        ],
        Op::Div(a, b) => {
            let inv_b = v(*b).map(|x| T::one() / x);
            let db = bin(*a, *b, &|x, y| -x / (y * y));
            vec![
                (*a, kernels::sum_to_shape(&mul_g(&inv_b), v(*a).shape())),
                (*b, kernels::sum_to_shape(&mul_g(&db), v(*b).shape())),
            ]
        }
        Op::Neg(x) => vec![(*x, g.map(|t| -t))],
        Op::Exp(x) => vec![(*x, g.zip_map(out, |a, b| a * b).unwrap())],
        Op::Log(x) => vec![(*x, g.zip_map(v(*x), |a, b| a / b).unwrap())],
        Op::Elu(x) => vec![(*x, g.zip_map(v(*x), |a, b| a * kernels::elu_grad(b)).unwrap())],
        Op::Powf(x, p) => {
            let p = *p;
            vec![(*x, g.zip_map(v(*x), |a, b| a * p * b.powf(p - T::one())).unwrap())]
        }
        Op::Scale(x, s) => {
            let s = *s;
            vec![(*x, g.map(|t| t * s))]
        }
        Op::AddScalar(x) => vec![(*x, g.clone())],
        Op::MatMul(a, b) => {
            let (ta, tb) = (v(*a), v(*b));
            let da = kernels::matmul_t(g, tb, false, true).expect("matmul backward");
            let db = if ta.rank() == 3 && tb.rank() == 2 {
                let (bm, k) = (ta.dim(0) * ta.dim(1), ta.dim(2));
                let a2 = ta.reshape(&[bm, k]).unwrap();
                let g2 = g.reshape(&[bm, g.dim(2)]).unwrap();
                kernels::matmul_t(&a2, &g2, true, false).expect("matmul backward")
            } else {
                kernels::matmul_t(ta, g, true, false).expect("matmul backward")
            };
            vec![(*a, da), (*b, db)]
        }
        Op::MatMulNt(a, b) => {
            let (ta, tb) = (v(*a), v(*b));
            let da = kernels::matmul_t(g, tb, false, false).expect("matmul backward");
            let db = kernels::matmul_t(g, ta, true, false).expect("matmul backward");
            vec![(*a, da), (*b, db)]
        }
        Op::Linear { x, w, b } => {
            let (tx, tw) = (v(*x), v(*w));
            let mut out = vec![
                (*x, kernels::matmul_t(g, tw, false, true).expect("linear backward")),
                (*w, kernels::matmul_t(tx, g, true, false).expect("linear backward")),
            ];
            if let Some(b) = b {
                out.push((*b, kernels::sum_to_shape(g, v(*b).shape())));
            }
            out
        }
        Op::ScaleShift { x, scale, bias } => {
            let (tx, ts) = (v(*x), v(*scale));
            let c = ts.numel();
            let mut dx = Vec::with_capacity(g.numel());
            let mut ds = vec![T::zero(); c];
            let mut db = vec![T::zero(); c];
            for (gr, xr) in g.data().chunks(c).zip(tx.data().chunks(c)) {
                dx.extend(gr.iter().zip(ts.data()).map(|(&gv, &sv)| gv * sv));
                for (((d_s, d_b), &gv), &xv) in ds.iter_mut().zip(db.iter_mut()).zip(gr).zip(xr) {
                    *d_s += gv * xv;
                    *d_b += gv;
                }
            }
            vec![
                (*x, Tensor::from_raw(tx.shape().to_vec(), dx)),
                (*scale, Tensor::from_raw(ts.shape().to_vec(), ds)),
                (*bias, Tensor::from_raw(v(*bias).shape().to_vec(), db)),
            ]
        }
        Op::Normalize {
            x,
            groups,
            per_row,
            inv_std,
        } => vec![(*x, kernels::normalize_backward(g, out, *groups, *per_row, inv_std))],
        Op::Softmax(x, axis, scale) => {
            let scale = *scale;
            let gy = g.zip_map(out, |a, b| a * b).unwrap();
            let (s, _) = kernels::reduce(&gy, Reduce::Sum, *axis, true).unwrap();
            let s = expand_along(&s, out.shape(), *axis, T::one());
            let dx = Tensor::from_raw(
                out.shape().to_vec(),
                out.data()
                    .iter()
                    .zip(g.data())
                    .zip(s.data())
                    .map(|((&y, &gi), &si)| scale * y * (gi - si))
                    .collect(),
            );
            vec![(*x, dx)]
        }
        Op::LogSoftmax(x, axis) => {
            let (s, _) = kernels::reduce(g, Reduce::Sum, *axis, true).unwrap();
            let s = expand_along(&s, out.shape(), *axis, T::one());
            let dx = Tensor::from_raw(
                out.shape().to_vec(),
                out.data()
                    .iter()
                    .zip(g.data())
                    .zip(s.data())
                    .map(|((&y, &gi), &si)| gi - y.exp() * si)
                    .collect(),
            );
            vec![(*x, dx)]
        }
        Op::Reduce {
            x,
            kind,
            axis,
            argmax,
        } => {
            let shape = v(*x).shape();
            let dx = match kind {
                Reduce::Sum => expand_along(g, shape, *axis, T::one()),
                Reduce::Mean => expand_along(g, shape, *axis, T::one() / T::of(shape[*axis] as f64)),
                Reduce::Max => {
                    let (outer, len, inner) = kernels::axis_split(shape, *axis);
                    let arg = argmax.as_ref().expect("max reduce saves argmax");
                    let mut data = vec![T::zero(); outer * len * inner];
                    for o in 0..outer {
                        for i in 0..inner {
                            let r = o * inner + i;
                            data[(o * len + arg[r]) * inner + i] = g.data()[r];
                        }
                    }
                    Tensor::from_raw(shape.to_vec(), data)
                }
            };
            vec![(*x, dx)]
        }
        Op::SumAll(x) => vec![(*x, Tensor::full(v(*x).shape(), g.item()))],
        Op::Reshape(x) => vec![(*x, g.reshape(v(*x).shape()).unwrap())],
        Op::Permute(x, perm) => vec![(*x, kernels::permute(g, &kernels::inverse_perm(perm)))],
        Op::Concat(xs, axis) => {
            let mut start = 0;
            xs.iter()
                .map(|&x| {
                    let len = v(x).dim(*axis);
                    let part = kernels::narrow(g, *axis, start, len).unwrap();
                    start += len;
                    (x, part)
                })
                .collect()
        }
        Op::Narrow { x, axis, start } => {
            vec![(*x, kernels::narrow_backward(g, v(*x).shape(), *axis, *start))]
        }
        Op::IndexSelect(x, idx) => vec![(*x, kernels::index_add(g, v(*x).shape(), idx))],
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    params: HashMap<String, usize>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`; zeros when `v` did not reach the loss.
    pub fn wrt(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }

    /// Gradient of a bound parameter by name; zeros if bound but unreachable,
    /// `None` if the parameter was never bound to the tape.
    pub fn param(&self, name: &str) -> Option<Tensor<T>> {
        let &id = self.params.get(name)?;
        Some(
            self.grads[id]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(&self.shapes[id])),
        )
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.val(self.id)
    }

    /// Borrow of the node value; do not hold across further ops on the tape.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        let nodes: Ref<'_, Vec<Node<T>>> = self.tape.nodes.borrow();
        f(&nodes[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn binary(
        self,
        other: Var<'t, T>,
        name: &'static str,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out = kernels::broadcast_binary(name, &a, &b, f)?;
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(out, op, rg))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        if other.with_value(|t| t.data().iter().any(|v| v.is_zero())) {
            return Err(PatError::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        self.binary(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn neg(self) -> Var<'t, T> {
        let out = self.value().map(|x| -x);
        self.tape.unary(self.id, out, Op::Neg(self.id))
    }

    pub fn exp(self) -> Var<'t, T> {
        let out = self.value().map(|x| x.exp());
        self.tape.unary(self.id, out, Op::Exp(self.id))
    }

    pub fn log(self) -> Result<Var<'t, T>> {
        let x = self.value();
        if let Some(bad) = x.data().iter().find(|v| **v <= T::zero()) {
            return Err(PatError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let out = x.map(|v| v.ln());
        Ok(self.tape.unary(self.id, out, Op::Log(self.id)))
    }

    /// ELU with α = 1.
    pub fn elu(self) -> Var<'t, T> {
        let out = self.value().map(kernels::elu);
        self.tape.unary(self.id, out, Op::Elu(self.id))
    }

    pub fn powf(self, p: f64) -> Var<'t, T> {
        let p = T::of(p);
        let out = self.value().map(|x| x.powf(p));
        self.tape.unary(self.id, out, Op::Powf(self.id, p))
    }

    pub fn scale(self, s: f64) -> Var<'t, T> {
        let s = T::of(s);
        let out = self.value().map(|x| x * s);
        self.tape.unary(self.id, out, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: f64) -> Var<'t, T> {
        let s = T::of(s);
        let out = self.value().map(|x| x + s);
        self.tape.unary(self.id, out, Op::AddScalar(self.id))
    }

    pub fn square(self) -> Var<'t, T> {
        self.mul(self).expect("same shape")
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = kernels::matmul(&self.value(), &other.value())?;
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id), rg))
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_nt(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        if self.with_value(|t| t.rank()) != other.with_value(|t| t.rank()) {
            return Err(shape_err("matmul_nt", &self.shape(), &other.shape()));
        }
        let out = kernels::matmul_t(&self.value(), &other.value(), false, true)?;
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(out, Op::MatMulNt(self.id, other.id), rg))
    }

    /// `self · w + b` for a rank-2 `self`; one fused node.
    pub fn linear(self, w: Var<'t, T>, b: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let (x, wv) = (self.value(), w.value());
        if x.rank() != 2 || wv.rank() != 2 || x.dim(1) != wv.dim(0) {
            return Err(shape_err("linear", x.shape(), wv.shape()));
        }
        let (n, k, p) = (x.dim(0), x.dim(1), wv.dim(1));
        let mut data = match b {
            Some(b) => {
                let bv = b.value();
                if bv.numel() != p {
                    return Err(shape_err("linear bias", wv.shape(), bv.shape()));
                }
                bv.data().repeat(n)
            }
            None => vec![T::zero(); n * p],
        };
        T::gemm(n, k, p, x.data(), (k, 1), wv.data(), (p, 1), &mut data);
        let mut ids = vec![self.id, w.id];
        ids.extend(b.map(|b| b.id));
        let rg = self.tape.requires(&ids);
        let op = Op::Linear {
            x: self.id,
            w: w.id,
            b: b.map(|b| b.id),
        };
        Ok(self.tape.push(Tensor::from_raw(vec![n, p], data), op, rg))
    }

    /// Per-channel `self · scale + bias` for `[n, c]` input and `[c]` parameters.
    pub fn scale_shift(self, scale: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, s, b) = (self.value(), scale.value(), bias.value());
        if x.rank() != 2 || s.numel() != x.dim(1) || b.numel() != x.dim(1) {
            return Err(shape_err("scale_shift", x.shape(), s.shape()));
        }
        let c = x.dim(1);
        let mut data = Vec::with_capacity(x.numel());
        for row in x.data().chunks(c) {
            data.extend(row.iter().zip(s.data()).zip(b.data()).map(|((&v, &sv), &bv)| v * sv + bv));
        }
        let rg = self.tape.requires(&[self.id, scale.id, bias.id]);
        let op = Op::ScaleShift {
            x: self.id,
            scale: scale.id,
            bias: bias.id,
        };
        Ok(self.tape.push(Tensor::from_raw(x.shape().to_vec(), data), op, rg))
    }

    /// Zero-mean, unit-variance standardization of an `[n, c]` tensor. With
    /// `per_row` each row is one statistics group; otherwise channels split
    /// into `groups` contiguous blocks whose statistics span every row.
    pub fn normalize(self, groups: usize, per_row: bool, eps: f64) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 2 || groups == 0 || x.dim(1) % groups != 0 || x.numel() == 0 {
            return Err(shape_err("normalize", x.shape(), &[groups]));
        }
        let (out, inv_std) = kernels::normalize(&x, groups, per_row, T::of(eps));
        let op = Op::Normalize {
            x: self.id,
            groups,
            per_row,
            inv_std,
        };
        Ok(self.tape.unary(self.id, out, op))
    }

    pub fn softmax(self, axis: usize) -> Var<'t, T> {
        let out = kernels::softmax(&self.value(), axis);
        self.tape.unary(self.id, out, Op::Softmax(self.id, axis, T::one()))
    }

    /// `softmax(s · self)` along `axis` as one node.
    pub fn scaled_softmax(self, axis: usize, s: f64) -> Var<'t, T> {
        let s = T::of(s);
        let out = kernels::scaled_softmax(&self.value(), axis, s);
        self.tape.unary(self.id, out, Op::Softmax(self.id, axis, s))
    }

    pub fn log_softmax(self, axis: usize) -> Var<'t, T> {
        let out = kernels::log_softmax(&self.value(), axis);
        self.tape.unary(self.id, out, Op::LogSoftmax(self.id, axis))
    }

    pub fn reduce(self, kind: Reduce, axis: usize, keepdim: bool) -> Result<Var<'t, T>> {
        let (out, argmax) = kernels::reduce(&self.value(), kind, axis, keepdim)?;
        let op = Op::Reduce {
            x: self.id,
            kind,
            axis,
            argmax,
        };
        Ok(self.tape.unary(self.id, out, op))
    }

    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t, T>> {
        self.reduce(Reduce::Sum, axis, keepdim)
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t, T>> {
        self.reduce(Reduce::Mean, axis, keepdim)
    }

    pub fn max_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t, T>> {
        self.reduce(Reduce::Max, axis, keepdim)
    }

    pub fn sum(self) -> Var<'t, T> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.unary(self.id, out, Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.with_value(|t| t.numel());
        self.sum().scale(1.0 / n as f64)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.unary(self.id, out, Op::Reshape(self.id)))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let mut seen = vec![false; x.rank()];
        let valid = perm.len() == x.rank()
            && perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(shape_err("permute", x.shape(), perm));
        }
        let out = kernels::permute(&x, perm);
        Ok(self.tape.unary(self.id, out, Op::Permute(self.id, perm.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn t(self) -> Var<'t, T> {
        let r = self.with_value(|t| t.rank());
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm).expect("valid permutation")
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let out = kernels::narrow(&self.value(), axis, start, len)?;
        Ok(self.tape.unary(
            self.id,
            out,
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
        ))
    }

    pub fn index_select(self, idx: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.dim(0)) {
            return Err(contract(format!(
                "index {bad} out of range for axis of size {}",
                x.dim(0)
            )));
        }
        let out = kernels::index_select(&x, idx);
        Ok(self.tape.unary(self.id, out, Op::IndexSelect(self.id, idx.to_vec())))
    }
}

/// Concatenates along `axis`.
pub fn concat<'t, T: Real>(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
    let first = parts.first().ok_or_else(|| contract("concat of zero tensors"))?;
    let tape = first.tape;
    let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
    let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
    let out = kernels::concat(&refs, axis)?;
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let rg = tape.requires(&ids);
    Ok(tape.push(out, Op::Concat(ids, axis), rg))
}
