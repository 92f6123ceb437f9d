//! Runtime invariant suite: every property is a named, seeded check that can
//! be run alone, scaled by a trial count and replayed from a failing seed.
//!
//! Trial `t` of a run with seed `s` draws from `ChaCha8Rng::seed_from_u64(s + t)`,
//! so a failure at trial `t` replays with `--seed s+t --trials 1`. Statistical
//! properties run as one experiment whose trial count is the number of draws.

mod checks;

use std::fmt;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{PatError, Result};

/// Seeds and tolerances for a suite run.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    pub seed: u64,
    /// Overrides every property's default trial count.
    pub trials: Option<usize>,
    pub tol32: f64,
    pub tol64: f64,
    pub grad_tol: f64,
    pub grad_step: f64,
    pub gumbel_tol: f64,
    pub gss_tol: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: None,
            tol32: 1e-5,
            tol64: 1e-10,
            grad_tol: 1e-4,
            grad_step: 1e-5,
            gumbel_tol: 0.01,
            gss_tol: 0.02,
        }
    }
}

impl SuiteConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let num = |v: &str| -> Result<f64> {
            v.parse()
                .ok()
                .filter(|x: &f64| x.is_finite() && *x > 0.0)
                .ok_or_else(|| PatError::Config(format!("bad value {v:?} for {key}")))
        };
        match key.trim() {
            "seed" => self.seed = v.parse().map_err(|_| PatError::Config(format!("bad seed {v:?}")))?,
            "trials" => {
                let n: usize = v.parse().map_err(|_| PatError::Config(format!("bad trial count {v:?}")))?;
                self.trials = Some(n.max(1));
            }
            "tol32" => self.tol32 = num(v)?,
            "tol64" => self.tol64 = num(v)?,
            "grad_tol" => self.grad_tol = num(v)?,
            "grad_step" => self.grad_step = num(v)?,
            "gumbel_tol" => self.gumbel_tol = num(v)?,
            "gss_tol" => self.gss_tol = num(v)?,
            other => return Err(PatError::Config(format!("unknown suite key {other:?}"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("seed = {}\n", self.seed);
        if let Some(t) = self.trials {
            s.push_str(&format!("trials = {t}\n"));
        }
        for (k, v) in [
            ("tol32", self.tol32),
            ("tol64", self.tol64),
            ("grad_tol", self.grad_tol),
            ("grad_step", self.grad_step),
            ("gumbel_tol", self.gumbel_tol),
            ("gss_tol", self.gss_tol),
        ] {
            s.push_str(&format!("{k} = {v:e}\n"));
        }
        s
    }
}

/// A broken invariant inside one trial.
#[derive(Clone, Debug, PartialEq)]
pub struct Violation(pub String);

impl From<PatError> for Violation {
    fn from(e: PatError) -> Self {
        Violation(format!("unexpected error: {e}"))
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub type Check = std::result::Result<(), Violation>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::props::Violation(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;

/// What a property sees while running.
pub struct Ctx<'a> {
    pub cfg: &'a SuiteConfig,
    pub trials: usize,
}

/// Failure of a whole property, with the seed that reproduces it.
#[derive(Clone, Debug, PartialEq)]
pub struct Failure {
    /// Seed of the failing trial; `None` for single-experiment properties.
    pub trial_seed: Option<u64>,
    pub message: String,
}

impl Ctx<'_> {
    pub fn rng(&self, trial: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_add(trial as u64))
    }

    /// Runs `f` once per trial and stops at the first violation.
    pub fn each_trial(&self, mut f: impl FnMut(&mut ChaCha8Rng) -> Check) -> std::result::Result<(), Failure> {
        for t in 0..self.trials {
            f(&mut self.rng(t)).map_err(|v| Failure {
                trial_seed: Some(self.cfg.seed.wrapping_add(t as u64)),
                message: v.0,
            })?;
        }
        Ok(())
    }

    /// Runs `f` once as a single experiment over `self.trials` draws.
    pub fn once(&self, f: impl FnOnce(&mut ChaCha8Rng, usize) -> Check) -> std::result::Result<(), Failure> {
        f(&mut self.rng(0), self.trials).map_err(|v| Failure {
            trial_seed: None,
            message: v.0,
        })
    }
}

type Body = fn(&Ctx<'_>) -> std::result::Result<(), Failure>;

#[derive(Clone, Copy)]
pub struct Property {
    pub name: &'static str,
    pub about: &'static str,
    pub default_trials: usize,
    body: Body,
}

impl fmt::Debug for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Property").field("name", &self.name).finish()
    }
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub name: &'static str,
    pub trials: usize,
    pub seed: u64,
    pub failure: Option<Failure>,
    pub elapsed: Duration,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }

    /// Human-readable dump of a failure, including the command that replays it.
    pub fn counterexample(&self) -> Option<String> {
        let f = self.failure.as_ref()?;
        let (seed, trials) = match f.trial_seed {
            Some(s) => (s, 1),
            None => (self.seed, self.trials),
        };
        Some(format!(
            "property = {}\nseed = {seed}\ntrials = {trials}\nreplay = patkit proptest --only {} --seed {seed} --trials {trials}\n\n{}\n",
            self.name, self.name, f.message
        ))
    }
}

impl Property {
    pub fn run(&self, cfg: &SuiteConfig) -> Outcome {
        let trials = cfg.trials.unwrap_or(self.default_trials).max(1);
        let start = Instant::now();
        let failure = (self.body)(&Ctx { cfg, trials }).err();
        Outcome {
            name: self.name,
            trials,
            seed: cfg.seed,
            failure,
            elapsed: start.elapsed(),
        }
    }
}

/// Every property, in suite order.
pub fn registry() -> Vec<Property> {
    checks::ALL
        .iter()
        .map(|&(name, about, default_trials, body)| Property {
            name,
            about,
            default_trials,
            body,
        })
        .collect()
}

pub fn find(name: &str) -> Option<Property> {
    registry().into_iter().find(|p| p.name == name)
}

/// Properties named in `only` (all when empty), in registry order.
pub fn select(only: &[String]) -> Result<Vec<Property>> {
    let all = registry();
    if let Some(bad) = only.iter().find(|n| !all.iter().any(|p| p.name == n.as_str())) {
        return Err(PatError::Config(format!("unknown property {bad:?}")));
    }
    Ok(all
        .into_iter()
        .filter(|p| only.is_empty() || only.iter().any(|n| n == p.name))
        .collect())
}
