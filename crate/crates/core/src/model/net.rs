//! Network assembly: embedding, attention stack with down-sampling, shared
//! per-point head, element-wise loss and prediction.

use std::collections::BTreeMap;

use rand::Rng;

use super::config::{Block, Downsample, Embedding, NormChoice, PatConfig, Task};
use crate::attention::{gsa, mha, GsaLayer, MhaLayer, Norm, NormKind};
use crate::embedding::{arpe, ArpeLayer, PointMlp};
use crate::error::{contract, PatError, Result};
use crate::geometry::{fps, PointCloud};
use crate::nn::{check_registry, fit_groups, join, Linear, Module, Param};
use crate::sampling::{argmax, gss, GssLayer, Mode, SamplerConfig};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub enum EmbedLayer<T> {
    Arpe(ArpeLayer<T>),
    Mlp(PointMlp<T>),
}

#[derive(Clone, Debug)]
pub enum AttnBlock<T> {
    Gsa(GsaLayer<T>),
    Mha(MhaLayer<T>),
}

impl<T: Real> AttnBlock<T> {
    pub fn forward<'t>(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match self {
            AttnBlock::Gsa(l) => gsa(x, l),
            AttnBlock::Mha(l) => mha(x, l),
        }
    }
}

/// Shared per-point `FC - GN - ELU - dropout` stack and the final classifier.
#[derive(Clone, Debug)]
pub struct Head<T> {
    pub layers: Vec<(Linear<T>, Norm<T>)>,
    pub out: Linear<T>,
    pub dropout: f64,
}

impl<T: Real> Head<T> {
    fn new<R: Rng + ?Sized>(prefix: &str, input: usize, widths: &[usize], m: usize, g: usize, dropout: f64, rng: &mut R) -> Result<Self> {
        let mut layers = Vec::new();
        let mut fan_in = input;
        for (i, &w) in widths.iter().enumerate() {
            let p = join(prefix, &i.to_string());
            let lin = Linear::new(&join(&p, "fc"), fan_in, w, true, rng);
            let norm = Norm::new(&join(&p, "norm"), w, NormKind::Group(fit_groups(w, g)))?;
            layers.push((lin, norm));
            fan_in = w;
        }
        Ok(Self {
            layers,
            out: Linear::new(&join(prefix, "out"), fan_in, m, true, rng),
            dropout,
        })
    }

    fn forward<'t, R: Rng + ?Sized>(&self, mut x: Var<'t, T>, mode: Mode, rng: &mut R) -> Result<Var<'t, T>> {
        let tape = x.tape();
        for (lin, norm) in &self.layers {
            x = norm.forward(lin.forward(x)?)?.elu();
            if mode == Mode::Train && self.dropout > 0.0 {
                let keep = 1.0 / (1.0 - self.dropout);
                let mask = Tensor::from_fn(&x.shape(), |_| {
                    T::of(if rng.random::<f64>() < self.dropout { 0.0 } else { keep })
                });
                x = x.mul(tape.constant(mask))?;
            }
        }
        self.out.forward(x)
    }
}

impl<T: Real> Module<T> for Head<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        for (l, n) in &self.layers {
            l.visit(f);
            n.visit(f);
        }
        self.out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for (l, n) in &mut self.layers {
            l.visit_mut(f);
            n.visit_mut(f);
        }
        self.out.visit_mut(f);
    }
}

/// Diagnostics of one GSS step.
#[derive(Clone, Debug, PartialEq)]
pub struct GssReport {
    pub level: usize,
    pub indices: Vec<usize>,
    pub duplicates: usize,
    pub margins: Vec<f64>,
}

pub struct Forward<'t, T> {
    /// `R × m` logits of the points that reach the head.
    pub logits: Var<'t, T>,
    /// Original index of every row of `logits` (for soft GSS rows, the
    /// heaviest contributor).
    pub positions: Vec<usize>,
    pub gss: Vec<GssReport>,
}

/// A point attention transformer for classification or segmentation.
#[derive(Clone, Debug)]
pub struct PatModel<T> {
    pub config: PatConfig,
    pub embed: EmbedLayer<T>,
    pub blocks: Vec<AttnBlock<T>>,
    /// One entry per plan step; `None` for FPS steps.
    pub samplers: Vec<Option<GssLayer<T>>>,
    pub head: Head<T>,
}

impl<T: Real> PatModel<T> {
    pub fn new<R: Rng + ?Sized>(config: &PatConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let cfg = config.clone();
        let in_ch = 3 + cfg.f;
        let embed = match cfg.embedding {
            Embedding::Arpe => EmbedLayer::Arpe(ArpeLayer::new("arpe", in_ch, cfg.arpe(), rng)?),
            Embedding::Mlp => EmbedLayer::Mlp(PointMlp::new("embed", in_ch, &cfg.arpe(), rng)?),
        };
        let norm = match cfg.norm {
            NormChoice::Group => NormKind::Group(cfg.g),
            NormChoice::Layer => NormKind::Layer,
        };
        let mut blocks = Vec::with_capacity(cfg.n_gsa);
        let mut samplers = Vec::with_capacity(cfg.plan.len());
        for i in 0..cfg.n_gsa {
            let prefix = format!("block.{i}");
            blocks.push(match cfg.block {
                Block::Gsa => AttnBlock::Gsa(GsaLayer::with_options(&prefix, cfg.c, cfg.g, cfg.shuffle, norm, rng)?),
                Block::Mha => AttnBlock::Mha(MhaLayer::new(&prefix, cfg.c, cfg.heads, cfg.mha_hidden(), norm, rng)?),
            });
            if let Some(step) = cfg.plan.get(i) {
                samplers.push(match step {
                    Downsample::Fps(_) => None,
                    Downsample::Gss(n) => Some(GssLayer::new(&format!("gss.{i}"), *n, cfg.c, rng)?),
                });
            }
        }
        let head = Head::new("head", cfg.c, &cfg.mlp_sizes, cfg.m, cfg.g, cfg.dropout, rng)?;
        let model = Self {
            config: cfg,
            embed,
            blocks,
            samplers,
            head,
        };
        check_registry(&model)?;
        Ok(model)
    }

    /// Runs the network on one cloud. `tau` is the current temperature for
    /// train-mode GSS.
    pub fn forward<'t, R: Rng + ?Sized>(
        &self,
        tape: &'t Tape<T>,
        cloud: &PointCloud<T>,
        mode: Mode,
        tau: f64,
        rng: &mut R,
    ) -> Result<Forward<'t, T>> {
        let cfg = &self.config;
        if cloud.channels() != 3 + cfg.f {
            return Err(contract(format!(
                "model expects {} channels per point, cloud has {}",
                3 + cfg.f,
                cloud.channels()
            )));
        }
        let mut x = match &self.embed {
            EmbedLayer::Arpe(l) => arpe(tape, cloud, l, mode, rng)?,
            EmbedLayer::Mlp(l) => l.forward(tape, cloud)?,
        };
        let mut positions: Vec<usize> = (0..cloud.len()).collect();
        let sampler = SamplerConfig {
            tau,
            mode,
            ..cfg.sampler.clone()
        };
        let mut reports = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(x)?;
            let Some(step) = cfg.plan.get(i) else { continue };
            let n_out = step.size();
            if n_out >= positions.len() {
                return Err(contract(format!("cannot down-sample {} points to {n_out}", positions.len())));
            }
            match &self.samplers[i] {
                None => {
                    let current = cloud.select(&positions);
                    let start = cfg.fps_start.min(positions.len() - 1);
                    let keep = fps(&current, n_out, start)?;
                    x = x.index_select(&keep)?;
                    positions = keep.iter().map(|&j| positions[j]).collect();
                }
                Some(layer) => {
                    let out = gss(x, layer, &sampler, rng)?;
                    x = out.features;
                    positions = out.indices.iter().map(|&j| positions[j]).collect();
                    reports.push(GssReport {
                        level: i,
                        indices: positions.clone(),
                        duplicates: out.duplicates,
                        margins: out.margins,
                    });
                }
            }
        }
        let logits = self.head.forward(x, mode, rng)?;
        Ok(Forward {
            logits,
            positions,
            gss: reports,
        })
    }

    /// Trainable scalars grouped by module path (`arpe`, `block.0`, `gss.1`, `head`).
    pub fn param_breakdown(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        self.visit(&mut |p| {
            let mut parts = p.name.split('.');
            let first = parts.next().unwrap_or_default();
            let key = match parts.next() {
                Some(second) if second.chars().all(|ch| ch.is_ascii_digit()) => format!("{first}.{second}"),
                _ => first.to_string(),
            };
            *out.entry(key).or_insert(0) += p.numel();
        });
        out
    }

    /// Scalars in the attention transforms of all blocks (`c²/g` each for GSA).
    pub fn attention_params(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| match b {
                AttnBlock::Gsa(l) => l.attention_params(),
                AttnBlock::Mha(l) => l.head_weights.iter().map(Param::numel).sum(),
            })
            .sum()
    }

    /// Predicted class of a cloud (classification) in inference mode.
    pub fn predict_class<R: Rng + ?Sized>(&self, cloud: &PointCloud<T>, rng: &mut R) -> Result<usize> {
        let tape = Tape::new();
        let out = self.forward(&tape, cloud, Mode::Infer, self.config.sampler.tau_end, rng)?;
        Ok(out.logits.with_value(predict_from_logits))
    }

    /// Per-point predicted classes (segmentation) in inference mode.
    pub fn predict_points<R: Rng + ?Sized>(&self, cloud: &PointCloud<T>, rng: &mut R) -> Result<Vec<usize>> {
        let tape = Tape::new();
        let out = self.forward(&tape, cloud, Mode::Infer, self.config.sampler.tau_end, rng)?;
        Ok(out.logits.with_value(|l| l.data().chunks(l.dim(1)).map(argmax).collect()))
    }
}

impl<T: Real> Module<T> for PatModel<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        match &self.embed {
            EmbedLayer::Arpe(l) => l.visit(f),
            EmbedLayer::Mlp(l) => l.visit(f),
        }
        for (i, b) in self.blocks.iter().enumerate() {
            match b {
                AttnBlock::Gsa(l) => l.visit(f),
                AttnBlock::Mha(l) => l.visit(f),
            }
            if let Some(Some(s)) = self.samplers.get(i) {
                s.visit(f);
            }
        }
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match &mut self.embed {
            EmbedLayer::Arpe(l) => l.visit_mut(f),
            EmbedLayer::Mlp(l) => l.visit_mut(f),
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            match b {
                AttnBlock::Gsa(l) => l.visit_mut(f),
                AttnBlock::Mha(l) => l.visit_mut(f),
            }
            if let Some(Some(s)) = self.samplers.get_mut(i) {
                s.visit_mut(f);
            }
        }
        self.head.visit_mut(f);
    }
}

/// Training target of one sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Label {
    Class(usize),
    PerPoint(Vec<usize>),
}

/// Mean softmax cross-entropy over the rows of `logits: R × m`. A class label
/// is the target of every row; per-point labels are indexed by `positions`.
pub fn element_wise_loss<'t, T: Real>(logits: Var<'t, T>, label: &Label, positions: &[usize]) -> Result<Var<'t, T>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] == 0 {
        return Err(contract(format!("loss needs R × m logits, got {s:?}")));
    }
    let (r, m) = (s[0], s[1]);
    let target = |row: usize| -> Result<usize> {
        let t = match label {
            Label::Class(c) => *c,
            Label::PerPoint(v) => {
                let p = positions.get(row).copied().unwrap_or(row);
                *v.get(p)
                    .ok_or_else(|| contract(format!("no label for point {p} ({} labels)", v.len())))?
            }
        };
        if t >= m {
            return Err(contract(format!("label {t} out of range for {m} classes")));
        }
        Ok(t)
    };
    let mut onehot = Tensor::<T>::zeros(&[r, m]);
    for row in 0..r {
        onehot.data_mut()[row * m + target(row)?] = T::one();
    }
    let picked = logits.log_softmax(1).mul(logits.tape().constant(onehot))?;
    Ok(picked.sum().scale(-1.0 / r as f64))
}

/// Mean of the per-row softmax scores.
pub fn class_scores<T: Real>(logits: &Tensor<T>) -> Vec<f64> {
    let m = logits.dim(1);
    let r = logits.dim(0) as f64;
    let mut acc = vec![0.0; m];
    for row in logits.data().chunks(m) {
        let mx = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v.f64() - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for (a, v) in acc.iter_mut().zip(e) {
            *a += v / z / r;
        }
    }
    acc
}

/// Argmax of the averaged post-softmax scores; ties to the lowest class.
pub fn predict_from_logits<T: Real>(logits: &Tensor<T>) -> usize {
    argmax(&class_scores(logits))
}

/// Prediction target for a task, checked against the class count.
pub fn check_label(task: Task, label: &Label, m: usize, n_points: usize) -> Result<()> {
    match (task, label) {
        (Task::Classify, Label::Class(c)) if *c < m => Ok(()),
        (Task::Segment, Label::PerPoint(v)) if v.len() == n_points && v.iter().all(|&c| c < m) => Ok(()),
        _ => Err(PatError::Format(format!("label {label:?} does not fit task {task:?} with {m} classes"))),
    }
}
