//! Versioned JSON checkpoints of a PPO agent.
//!
//! Layout (`version = 1`):
//!
//! ```text
//! {
//!   "format": "spinctl-ppo-checkpoint",
//!   "version": 1,
//!   "config": { ...PpoConfig... },
//!   "policy_sizes": [in, h1, ..., out], "policy_params": [...], "log_std": [...],
//!   "value_sizes": [in, h1, ..., 1],    "value_params": [...],
//!   "rng": { "seed": [32 bytes], "stream": u64, "word_pos": "u128 as decimal" }
//! }
//! ```
//!
//! Parameter vectors use the flat layout of [`Mlp`]: per layer a row-major
//! `out x in` weight block followed by the bias.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GaussianPolicy, Mlp, PpoAgent, PpoConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "spinctl-ppo-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Config(format!("bad rng word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: PpoConfig,
    pub policy_sizes: Vec<usize>,
    pub policy_params: Vec<f64>,
    pub log_std: Vec<f64>,
    pub value_sizes: Vec<usize>,
    pub value_params: Vec<f64>,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn capture(agent: &PpoAgent, cfg: &PpoConfig, rng: &ChaCha8Rng) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: cfg.clone(),
            policy_sizes: agent.policy.net.sizes().to_vec(),
            policy_params: agent.policy.net.params().to_vec(),
            log_std: agent.policy.log_std.clone(),
            value_sizes: agent.value.sizes().to_vec(),
            value_params: agent.value.params().to_vec(),
            rng: RngState::capture(rng),
        }
    }

    /// Rebuilds the agent (with fresh optimizer state), config and RNG.
    pub fn restore(&self) -> Result<(PpoAgent, PpoConfig, ChaCha8Rng)> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let net = Mlp::from_params(self.policy_sizes.clone(), self.policy_params.clone())
            .ok_or_else(|| Error::Config("policy parameters do not match sizes".into()))?;
        if self.log_std.len() != net.output_dim() {
            return Err(Error::Config("log_std length does not match policy output".into()));
        }
        let value = Mlp::from_params(self.value_sizes.clone(), self.value_params.clone())
            .ok_or_else(|| Error::Config("value parameters do not match sizes".into()))?;
        let policy = GaussianPolicy {
            net,
            log_std: self.log_std.clone(),
        };
        let agent = PpoAgent::from_parts(policy, value, &self.config);
        Ok((agent, self.config.clone(), self.rng.restore()?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        fs::write(path, text).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn round_trip_preserves_agent_and_rng() {
        let cfg = PpoConfig {
            hidden: vec![8, 8],
            ..PpoConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let agent = PpoAgent::new(3, &cfg, &mut rng);
        let _: f64 = rng.random();
        let ckpt = Checkpoint::capture(&agent, &cfg, &rng);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agent.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);

        let (restored, cfg2, mut rng2) = loaded.restore().unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(restored.policy, agent.policy);
        assert_eq!(restored.value, agent.value);
        assert_eq!(rng2.random::<u64>(), rng.random::<u64>());
    }

    #[test]
    fn rejects_foreign_format() {
        let cfg = PpoConfig {
            hidden: vec![4],
            ..PpoConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let agent = PpoAgent::new(2, &cfg, &mut rng);
        let mut ckpt = Checkpoint::capture(&agent, &cfg, &rng);
        ckpt.version = 99;
        assert!(ckpt.restore().is_err());
    }
}
