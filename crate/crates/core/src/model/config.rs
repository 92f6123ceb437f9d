//! Network configuration, the down-sampling plan grammar and the line-based
//! `key = value` config format.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::embedding::ArpeConfig;
use crate::error::{PatError, Result};
use crate::sampling::SamplerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Classify,
    Segment,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Downsample {
    Fps(usize),
    Gss(usize),
}

impl Downsample {
    pub fn size(&self) -> usize {
        match *self {
            Downsample::Fps(n) | Downsample::Gss(n) => n,
        }
    }
}

impl fmt::Display for Downsample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Downsample::Fps(n) => write!(f, "fps{n}"),
            Downsample::Gss(n) => write!(f, "gss{n}"),
        }
    }
}

/// Parses `"fps384,gss128,gss64"`; the empty string is the empty plan.
pub fn parse_plan(s: &str) -> Result<Vec<Downsample>> {
    let s = s.trim();
    if s.is_empty() || s == "none" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|tok| {
            let tok = tok.trim().to_ascii_lowercase();
            let (ctor, digits): (fn(usize) -> Downsample, &str) = if let Some(d) = tok.strip_prefix("fps") {
                (Downsample::Fps, d)
            } else if let Some(d) = tok.strip_prefix("gss") {
                (Downsample::Gss, d)
            } else {
                return Err(PatError::Config(format!("plan step {tok:?} must start with fps or gss")));
            };
            let n: usize = digits
                .parse()
                .map_err(|_| PatError::Config(format!("plan step {tok:?} needs a size")))?;
            Ok(ctor(n))
        })
        .collect()
}

pub fn format_plan(plan: &[Downsample]) -> String {
    if plan.is_empty() {
        return "none".into();
    }
    plan.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Embedding {
    Arpe,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Gsa,
    Mha,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormChoice {
    Group,
    Layer,
}

/// Everything needed to build, train and evaluate a network.
#[derive(Clone, Debug, PartialEq)]
pub struct PatConfig {
    pub task: Task,
    pub n_points: usize,
    /// Extra feature channels beyond xyz.
    pub f: usize,
    pub c: usize,
    pub g: usize,
    pub n_gsa: usize,
    pub plan: Vec<Downsample>,
    pub mlp_sizes: Vec<usize>,
    pub m: usize,
    pub dropout: f64,
    pub embedding: Embedding,
    pub k: usize,
    pub d0: f64,
    pub n0: usize,
    pub block: Block,
    pub heads: usize,
    /// MLP width inside MHA blocks; 0 means `c`.
    pub mha_hidden: usize,
    pub norm: NormChoice,
    pub shuffle: bool,
    pub fps_start: usize,
    pub sampler: SamplerConfig,
    pub lr: f64,
    /// Halve the learning rate every this many epochs; 0 disables.
    pub lr_halve_every: usize,
    pub batch: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub augment: bool,
    /// Write a checkpoint every this many epochs; 0 writes only the last.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for PatConfig {
    /// Desk-scale classifier: 256 points, `c = 128`, plan `fps96,gss32,gss16`.
    fn default() -> Self {
        Self {
            task: Task::Classify,
            n_points: 256,
            f: 0,
            c: 128,
            g: 8,
            n_gsa: 3,
            plan: vec![Downsample::Fps(96), Downsample::Gss(32), Downsample::Gss(16)],
            mlp_sizes: vec![128, 64, 32],
            m: 4,
            dropout: 0.2,
            embedding: Embedding::Arpe,
            k: 32,
            d0: 2.0,
            n0: 1024,
            block: Block::Gsa,
            heads: 8,
            mha_hidden: 0,
            norm: NormChoice::Group,
            shuffle: true,
            fps_start: 0,
            sampler: SamplerConfig::default(),
            lr: 1e-3,
            lr_halve_every: 15,
            batch: 16,
            epochs: 30,
            clip_norm: 5.0,
            augment: true,
            checkpoint_every: 0,
            seed: 7,
        }
    }
}

impl PatConfig {
    /// Full-scale classifier: 1024 points, `c = 1024`, plan `fps384,gss128,gss64`,
    /// head `1024-512-256`, 40 classes.
    pub fn full_scale_classifier() -> Self {
        Self {
            n_points: 1024,
            c: 1024,
            plan: vec![Downsample::Fps(384), Downsample::Gss(128), Downsample::Gss(64)],
            mlp_sizes: vec![1024, 512, 256],
            m: 40,
            batch: 64,
            ..Self::default()
        }
    }

    /// Desk-scale segmenter: 5 blocks, no down-sampling, 4 classes.
    pub fn desk_segmenter() -> Self {
        Self {
            task: Task::Segment,
            n_gsa: 5,
            plan: Vec::new(),
            lr: 1e-3,
            lr_halve_every: 5,
            ..Self::default()
        }
    }

    pub fn arpe(&self) -> ArpeConfig {
        ArpeConfig {
            k: self.k,
            d0: self.d0,
            n0: self.n0,
            ..ArpeConfig::for_width(self.c)
        }
    }

    pub fn mha_hidden(&self) -> usize {
        if self.mha_hidden == 0 {
            self.c
        } else {
            self.mha_hidden
        }
    }

    /// Learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_halve_every {
            0 => self.lr,
            k => self.lr * 0.5f64.powi((epoch / k) as i32),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(PatError::Config(msg));
        if self.n_points < 2 {
            return bad(format!("points must be >= 2, got {}", self.n_points));
        }
        if self.c == 0 || self.g == 0 || self.c % self.g != 0 {
            return bad(format!("width {} must be a positive multiple of groups {}", self.c, self.g));
        }
        if self.block == Block::Mha && (self.heads == 0 || self.c % self.heads != 0) {
            return bad(format!("width {} must be a multiple of heads {}", self.c, self.heads));
        }
        if self.n_gsa == 0 {
            return bad("need at least one attention block".into());
        }
        if self.m < 2 {
            return bad(format!("need at least 2 classes, got {}", self.m));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.task == Task::Segment && !self.plan.is_empty() {
            return bad("segmentation takes no down-sampling plan".into());
        }
        if self.plan.len() > self.n_gsa {
            return bad(format!(
                "plan has {} steps but only {} attention blocks precede them",
                self.plan.len(),
                self.n_gsa
            ));
        }
        let mut prev = self.n_points;
        for step in &self.plan {
            let n = step.size();
            if n == 0 || n >= prev {
                return bad(format!(
                    "plan sizes must strictly decrease from {} points: {}",
                    self.n_points,
                    format_plan(&self.plan)
                ));
            }
            prev = n;
        }
        if self.fps_start >= self.n_points {
            return bad(format!("fps start {} out of range", self.fps_start));
        }
        if self.k == 0 || self.n0 == 0 || !(self.d0 > 0.0) {
            return bad("k, n0 and d0 must be positive".into());
        }
        if self.batch == 0 {
            return bad("batch must be >= 1".into());
        }
        if !(self.lr >= 0.0) || !(self.clip_norm > 0.0) {
            return bad("lr must be >= 0 and clip_norm > 0".into());
        }
        self.sampler.validate()
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "task" => {
                self.task = match v {
                    "classify" => Task::Classify,
                    "segment" => Task::Segment,
                    _ => return Err(PatError::Config(format!("unknown task {v:?}"))),
                }
            }
            "points" => self.n_points = num(key, v)?,
            "features" => self.f = num(key, v)?,
            "width" => self.c = num(key, v)?,
            "groups" => self.g = num(key, v)?,
            "gsa_layers" => self.n_gsa = num(key, v)?,
            "plan" => self.plan = parse_plan(v)?,
            "mlp" => {
                self.mlp_sizes = if v.is_empty() || v == "none" {
                    Vec::new()
                } else {
                    v.split(',').map(|s| num(key, s.trim())).collect::<Result<_>>()?
                }
            }
            "classes" => self.m = num(key, v)?,
            "dropout" => self.dropout = num(key, v)?,
            "embedding" => {
                self.embedding = match v {
                    "arpe" => Embedding::Arpe,
                    "mlp" => Embedding::Mlp,
                    _ => return Err(PatError::Config(format!("unknown embedding {v:?}"))),
                }
            }
            "k" => self.k = num(key, v)?,
            "d0" => self.d0 = num(key, v)?,
            "n0" => self.n0 = num(key, v)?,
            "block" => {
                self.block = match v {
                    "gsa" => Block::Gsa,
                    "mha" => Block::Mha,
                    _ => return Err(PatError::Config(format!("unknown block {v:?}"))),
                }
            }
            "heads" => self.heads = num(key, v)?,
            "mha_hidden" => self.mha_hidden = num(key, v)?,
            "norm" => {
                self.norm = match v {
                    "group" => NormChoice::Group,
                    "layer" => NormChoice::Layer,
                    _ => return Err(PatError::Config(format!("unknown norm {v:?}"))),
                }
            }
            "shuffle" => self.shuffle = num(key, v)?,
            "fps_start" => self.fps_start = num(key, v)?,
            "tau_start" => self.sampler.tau_start = num(key, v)?,
            "tau_end" => self.sampler.tau_end = num(key, v)?,
            "infer_noise" => self.sampler.infer_noise = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "lr_halve_every" => self.lr_halve_every = num(key, v)?,
            "batch" => self.batch = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "clip_norm" => self.clip_norm = num(key, v)?,
            "augment" => self.augment = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            other => return Err(PatError::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let list = |v: &[usize]| {
            if v.is_empty() {
                "none".to_string()
            } else {
                v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
            }
        };
        vec![
            ("task", match self.task {
                Task::Classify => "classify",
                Task::Segment => "segment",
            }
            .into()),
            ("points", self.n_points.to_string()),
            ("features", self.f.to_string()),
            ("width", self.c.to_string()),
            ("groups", self.g.to_string()),
            ("gsa_layers", self.n_gsa.to_string()),
            ("plan", format_plan(&self.plan)),
            ("mlp", list(&self.mlp_sizes)),
            ("classes", self.m.to_string()),
            ("dropout", self.dropout.to_string()),
            ("embedding", match self.embedding {
                Embedding::Arpe => "arpe",
                Embedding::Mlp => "mlp",
            }
            .into()),
            ("k", self.k.to_string()),
            ("d0", self.d0.to_string()),
            ("n0", self.n0.to_string()),
            ("block", match self.block {
                Block::Gsa => "gsa",
                Block::Mha => "mha",
            }
            .into()),
            ("heads", self.heads.to_string()),
            ("mha_hidden", self.mha_hidden.to_string()),
            ("norm", match self.norm {
                NormChoice::Group => "group",
                NormChoice::Layer => "layer",
            }
            .into()),
            ("shuffle", self.shuffle.to_string()),
            ("fps_start", self.fps_start.to_string()),
            ("tau_start", self.sampler.tau_start.to_string()),
            ("tau_end", self.sampler.tau_end.to_string()),
            ("infer_noise", self.sampler.infer_noise.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_halve_every", self.lr_halve_every.to_string()),
            ("batch", self.batch.to_string()),
            ("epochs", self.epochs.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("augment", self.augment.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Frozen form: one `key = value` line per entry.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PatError::Config(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            self.set(k, v).map_err(|e| match e {
                PatError::Config(m) => PatError::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| PatError::Config(format!("override {o:?} is not key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn as_map(&self) -> BTreeMap<&'static str, String> {
        self.entries().into_iter().collect()
    }
}

fn num<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| PatError::Config(format!("bad value {v:?} for {}", key.trim())))
}
