//! Static energy-landscape control of XX spin chains.
//!
//! The crate simulates single-excitation transfer in a nearest-neighbour
//! spin chain and compares two ways of finding static bias controllers:
//! a model-agnostic policy-gradient learner ([`ppo`]) that only observes
//! (possibly noisy) fidelity rewards, and model-based L-BFGS with random
//! restarts ([`lbfgs`]) that uses the exact gradient. Costs are counted in
//! metered environment calls. [`robustness`] scores controllers under
//! Hamiltonian perturbations and [`harness`] runs seeded sweeps and exports
//! the results.

pub mod dynamics;
pub mod env;
pub mod error;
pub mod harness;
pub mod lbfgs;
pub mod noise;
pub mod ppo;
pub mod robustness;
pub mod stats;

pub use dynamics::{ChainSpec, Controller, Hamiltonian};
pub use env::{EnvConfig, Environment, SpinChainEnv};
pub use error::{Error, Result};
pub use noise::NoiseConfig;
