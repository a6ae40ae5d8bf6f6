//! Experiment configuration and its TOML file form.
//!
//! A config file holds any subset of the [`ExperimentConfig`] fields;
//! missing fields keep the defaults of the experiment kind. Example:
//!
//! ```toml
//! kind = "cost-sweep"
//! algorithms = ["lbfgs", "ppo"]
//! chain_lengths = [4, 5]
//! transitions = ["0:2"]
//! sigmas = [0.0]
//! shots = 0
//! runs = 20
//! threshold = 0.99
//! budget = 1000000
//! seed = 7
//!
//! [ppo]
//! policy_lr = 3e-4
//!
//! [lbfgs]
//! memory = 10
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::Algorithm;
use crate::error::{Error, Result};
use crate::lbfgs::LbfgsConfig;
use crate::ppo::PpoConfig;
use crate::robustness::SPHERE_GRID_POINTS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    CostSweep,
    NoiseSweep,
    Mcra,
    Sphere,
    RandomBaseline,
}

/// `source:target`, zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub source: usize,
    pub target: usize,
}

impl FromStr for Transition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("transition {s:?} is not of the form S:T"));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        Ok(Self {
            source: a.trim().parse().map_err(|_| bad())?,
            target: b.trim().parse().map_err(|_| bad())?,
        })
    }
}

impl fmt::Display for Transition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.source, self.target)
    }
}

impl Serialize for Transition {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Transition {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub algorithms: Vec<Algorithm>,
    pub chain_lengths: Vec<usize>,
    pub transitions: Vec<Transition>,
    pub sigmas: Vec<f64>,
    pub shots: u64,
    pub runs: usize,
    /// Stopping threshold of every kind except the noise sweep.
    pub threshold: f64,
    /// Stopping threshold of the noise sweep.
    pub noisy_threshold: f64,
    /// Environment calls allowed per run.
    pub budget: u64,
    pub seed: u64,
    pub mcra_repeats: usize,
    pub sphere_directions: usize,
    pub sphere_points: usize,
    pub ppo: PpoConfig,
    pub lbfgs: LbfgsConfig,
}

impl ExperimentConfig {
    pub fn for_kind(kind: ExperimentKind) -> Self {
        use Algorithm::*;
        let base = Self {
            kind,
            algorithms: vec![Lbfgs, Ppo, Random],
            chain_lengths: (3..=7).collect(),
            transitions: vec![Transition { source: 0, target: 2 }],
            sigmas: vec![0.0],
            shots: 0,
            runs: 50,
            threshold: 0.99,
            noisy_threshold: 0.98,
            budget: 1_000_000,
            seed: 0,
            mcra_repeats: 10,
            sphere_directions: 1000,
            sphere_points: SPHERE_GRID_POINTS,
            ppo: PpoConfig::default(),
            lbfgs: LbfgsConfig::default(),
        };
        match kind {
            ExperimentKind::CostSweep => base,
            ExperimentKind::NoiseSweep => Self {
                algorithms: vec![Lbfgs, Ppo],
                chain_lengths: vec![4],
                sigmas: vec![0.0, 0.025, 0.05, 0.075, 0.1],
                ..base
            },
            ExperimentKind::RandomBaseline => Self {
                algorithms: vec![Random],
                ..base
            },
            ExperimentKind::Mcra => Self {
                algorithms: vec![Lbfgs],
                chain_lengths: vec![4],
                ..base
            },
            ExperimentKind::Sphere => Self {
                algorithms: vec![Lbfgs],
                chain_lengths: vec![5],
                transitions: vec![Transition { source: 0, target: 4 }],
                ..base
            },
        }
    }

    /// Threshold applied to this experiment's runs.
    pub fn active_threshold(&self) -> f64 {
        match self.kind {
            ExperimentKind::NoiseSweep => self.noisy_threshold,
            _ => self.threshold,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.runs == 0 {
            return fail("runs must be at least 1".into());
        }
        for t in [self.threshold, self.noisy_threshold] {
            if !(t > 0.0 && t <= 1.0) {
                return fail(format!("threshold {t} outside (0, 1]"));
            }
        }
        if self.budget == 0 {
            return fail("budget must be at least 1".into());
        }
        if self.algorithms.is_empty() || self.chain_lengths.is_empty() || self.sigmas.is_empty() || self.transitions.is_empty() {
            return fail("algorithms, chain lengths, sigmas and transitions must be non-empty".into());
        }
        if self.sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return fail("sigmas must be finite and non-negative".into());
        }
        if matches!(self.kind, ExperimentKind::Mcra | ExperimentKind::Sphere)
            && (self.chain_lengths.len() != 1 || self.transitions.len() != 1 || self.sigmas.len() != 1)
        {
            return fail("robustness experiments take exactly one chain length, transition and sigma".into());
        }
        if self.mcra_repeats == 0 || self.sphere_points == 0 {
            return fail("mcra_repeats and sphere_points must be positive".into());
        }
        self.ppo.validate()?;
        self.lbfgs.validate()
    }

    /// Overlays the fields present in a TOML document onto `self`.
    pub fn merge_toml(&self, text: &str) -> Result<Self> {
        let overrides: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("config file: {e}")))?;
        let mut base = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, overrides);
        toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("config file: {e}")))
    }

    /// Reads a config file, taking the kind's defaults for absent fields.
    /// A `kind` in the file must match `kind`.
    pub fn from_file(kind: ExperimentKind, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg = Self::for_kind(kind).merge_toml(&text)?;
        if cfg.kind != kind {
            return Err(Error::Config(format!(
                "{} describes a {:?} experiment",
                path.display(),
                cfg.kind
            )));
        }
        Ok(cfg)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
