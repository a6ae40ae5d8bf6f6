//! Model-agnostic control environment.
//!
//! The state is the controller itself, an action is a bounded increment of
//! every bias and of the readout time, and the reward is the (possibly
//! noisy) transfer fidelity at the new controller. Every reward evaluation
//! is metered; the meter is the common cost unit for all optimizers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    build_hamiltonian, eigendecompose, transfer_gradient, ChainSpec, Controller, Hamiltonian,
    DELTA_LIMIT, TIME_LIMIT,
};
use crate::error::{contract, Error, Result};
use crate::noise::{coarse_grain_fidelity, sample_structured_perturbation, NoiseConfig};

/// Smallest admissible readout time after wrapping.
pub const TIME_FLOOR: f64 = 1e-6;

/// Wraps a bias into `[-10, 10)`.
pub fn wrap_delta(x: f64) -> f64 {
    let w = (x + DELTA_LIMIT).rem_euclid(2.0 * DELTA_LIMIT) - DELTA_LIMIT;
    // rem_euclid may round up to the period for tiny negative inputs.
    if w >= DELTA_LIMIT {
        -DELTA_LIMIT
    } else {
        w
    }
}

/// Wraps a readout time into `(0, 30]`.
pub fn wrap_time(t: f64) -> f64 {
    (((t - TIME_FLOOR).rem_euclid(TIME_LIMIT)) + TIME_FLOOR).min(TIME_LIMIT)
}

/// Uniform controller: biases on `[-10, 10]`, time on `(0, 30]`.
pub fn random_controller<R: Rng + ?Sized>(n_spins: usize, rng: &mut R) -> Controller {
    let delta = (0..n_spins)
        .map(|_| rng.random_range(-DELTA_LIMIT..=DELTA_LIMIT))
        .collect();
    // random::<f64>() is in [0, 1); flip it onto (0, 1].
    let read_time = TIME_LIMIT * (1.0 - rng.random::<f64>());
    Controller { delta, read_time }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub spec: ChainSpec,
    pub noise: NoiseConfig,
    /// Perceived fidelity at or above which a step reports `done`.
    pub reward_threshold: f64,
    /// Multiplier on raw bias increments.
    pub action_scale: f64,
    /// Multiplier on raw time increments.
    pub time_action_scale: f64,
}

impl EnvConfig {
    pub fn new(spec: ChainSpec, noise: NoiseConfig, reward_threshold: f64) -> Result<Self> {
        let cfg = Self {
            spec,
            noise,
            reward_threshold,
            action_scale: 1.0,
            time_action_scale: 3.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if !(self.reward_threshold > 0.0 && self.reward_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "reward threshold {} outside (0, 1]",
                self.reward_threshold
            )));
        }
        if !(self.noise.sigma_noise >= 0.0) {
            return Err(Error::Config("sigma_noise must be >= 0".into()));
        }
        if !(self.action_scale > 0.0 && self.time_action_scale > 0.0) {
            return Err(Error::Config("action scales must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub controller: Controller,
}

/// Raw increment proposed by an agent, before scaling and clamping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvAction {
    pub d_delta: Vec<f64>,
    pub d_time: f64,
}

impl EnvAction {
    pub fn zero(n_spins: usize) -> Self {
        Self {
            d_delta: vec![0.0; n_spins],
            d_time: 0.0,
        }
    }

    /// Splits a flat `(N + 1)`-vector into bias and time increments.
    pub fn from_slice(a: &[f64]) -> Self {
        let (t, d) = a.split_last().expect("action vector is non-empty");
        Self {
            d_delta: d.to_vec(),
            d_time: *t,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: EnvState,
    pub reward: f64,
    pub perceived_fidelity: f64,
    pub done: bool,
}

/// The interface a policy learner trains against.
pub trait Environment {
    fn n_spins(&self) -> usize;
    fn reward_threshold(&self) -> f64;
    /// Draws a random starting controller. Does not touch the call meter.
    fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> EnvState;
    /// Applies an action and evaluates the reward; one metered call.
    fn step<R: Rng + ?Sized>(
        &mut self,
        state: &EnvState,
        action: &EnvAction,
        rng: &mut R,
    ) -> Result<StepOutcome>;
    /// Noise-free score of a controller; not metered.
    fn true_fidelity(&self, state: &EnvState) -> f64;
    fn calls_made(&self) -> u64;
}

/// Moves a controller by a scaled, clamped increment and wraps it back into
/// the admissible box.
pub fn apply_action(
    ctrl: &Controller,
    action: &EnvAction,
    action_scale: f64,
    time_action_scale: f64,
) -> Result<Controller> {
    if action.d_delta.len() != ctrl.delta.len() {
        return Err(contract(format!(
            "action has {} bias increments for {} spins",
            action.d_delta.len(),
            ctrl.delta.len()
        )));
    }
    if !action.d_time.is_finite() || action.d_delta.iter().any(|x| !x.is_finite()) {
        return Err(contract("action has non-finite entries"));
    }
    let max_d = DELTA_LIMIT / 2.0;
    let max_t = TIME_LIMIT / 2.0;
    let delta = ctrl
        .delta
        .iter()
        .zip(&action.d_delta)
        .map(|(x, dx)| wrap_delta(x + (action_scale * dx).clamp(-max_d, max_d)))
        .collect();
    let read_time = wrap_time(ctrl.read_time + (time_action_scale * action.d_time).clamp(-max_t, max_t));
    Ok(Controller { delta, read_time })
}

/// Result of a metered model-based evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelEvaluation {
    /// What the optimizer observes (after perturbation and shots).
    pub perceived: f64,
    /// Gradient of the fidelity of the sampled instance with respect to
    /// `(delta_1, ..., delta_N, T)`.
    pub gradient: Vec<f64>,
}

/// The spin-chain transfer environment.
#[derive(Debug, Clone)]
pub struct SpinChainEnv {
    cfg: EnvConfig,
    calls: u64,
}

impl SpinChainEnv {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, calls: 0 })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    fn sampled_hamiltonian<R: Rng + ?Sized>(&self, ctrl: &Controller, rng: &mut R) -> Result<Hamiltonian> {
        let h = build_hamiltonian(&self.cfg.spec, ctrl)?;
        if self.cfg.noise.sigma_noise > 0.0 {
            let p = sample_structured_perturbation(self.cfg.spec.n_spins, self.cfg.noise.sigma_noise, rng);
            h.add_scaled(&p, 1.0)
        } else {
            Ok(h)
        }
    }

    /// Perceived fidelity of a controller: fresh perturbation, exact
    /// propagation, shot sampling. One metered call.
    pub fn evaluate<R: Rng + ?Sized>(&mut self, ctrl: &Controller, rng: &mut R) -> Result<f64> {
        let h = self.sampled_hamiltonian(ctrl, rng)?;
        let es = eigendecompose(&h);
        let f = crate::dynamics::transfer_amplitude(&es, self.cfg.spec.source, self.cfg.spec.target, ctrl.read_time)
            .norm_sqr()
            .min(1.0);
        self.calls += 1;
        Ok(coarse_grain_fidelity(f, self.cfg.noise.shots, rng))
    }

    /// Perceived fidelity plus the analytic gradient of the sampled
    /// instance. Shares one eigendecomposition, so it costs one call.
    pub fn evaluate_with_gradient<R: Rng + ?Sized>(
        &mut self,
        ctrl: &Controller,
        rng: &mut R,
    ) -> Result<ModelEvaluation> {
        let h = self.sampled_hamiltonian(ctrl, rng)?;
        let es = eigendecompose(&h);
        let g = transfer_gradient(&es, self.cfg.spec.source, self.cfg.spec.target, ctrl.read_time);
        self.calls += 1;
        Ok(ModelEvaluation {
            perceived: coarse_grain_fidelity(g.fidelity, self.cfg.noise.shots, rng),
            gradient: g.controller_gradient(),
        })
    }
}

impl Environment for SpinChainEnv {
    fn n_spins(&self) -> usize {
        self.cfg.spec.n_spins
    }

    fn reward_threshold(&self) -> f64 {
        self.cfg.reward_threshold
    }

    fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> EnvState {
        EnvState {
            controller: random_controller(self.cfg.spec.n_spins, rng),
        }
    }

    fn step<R: Rng + ?Sized>(
        &mut self,
        state: &EnvState,
        action: &EnvAction,
        rng: &mut R,
    ) -> Result<StepOutcome> {
        let next = apply_action(
            &state.controller,
            action,
            self.cfg.action_scale,
            self.cfg.time_action_scale,
        )?;
        let reward = self.evaluate(&next, rng)?;
        Ok(StepOutcome {
            next_state: EnvState { controller: next },
            reward,
            perceived_fidelity: reward,
            done: reward >= self.cfg.reward_threshold,
        })
    }

    fn true_fidelity(&self, state: &EnvState) -> f64 {
        crate::dynamics::fidelity(&self.cfg.spec, &state.controller).unwrap_or(0.0)
    }

    fn calls_made(&self) -> u64 {
        self.calls
    }
}
