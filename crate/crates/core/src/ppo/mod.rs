//! Proximal policy optimization written from scratch.
//!
//! A Gaussian policy network proposes controller increments; a separate
//! value network estimates discounted future fidelity. Each epoch starts
//! from a random controller, rolls out `steps_per_epoch` environment steps,
//! estimates GAE(lambda) advantages and runs several minibatch passes of the
//! clipped surrogate objective. Training stops as soon as any step's
//! perceived reward reaches the environment threshold.

mod adam;
pub mod checkpoint;
mod mlp;
mod policy;
mod trajectory;

pub use adam::Adam;
pub use mlp::{ForwardCache, Mlp};
pub use policy::{
    clipped_surrogate, clipped_surrogate_gradient, gaussian_log_density, GaussianPolicy,
    SurrogateBatch, SurrogateStats,
};
pub use trajectory::{compute_advantages, normalize, Trajectory};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Controller, DELTA_LIMIT, TIME_LIMIT};
use crate::env::{EnvAction, EnvConfig, EnvState, Environment, SpinChainEnv};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_ratio: f64,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub update_epochs: usize,
    pub minibatch_size: usize,
    pub epochs_max: usize,
    pub steps_per_epoch: usize,
    /// Hard cap on metered environment calls.
    pub max_env_calls: u64,
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
    pub entropy_coef: f64,
    /// Stop the policy passes of an update once the approximate KL exceeds
    /// this value.
    pub target_kl: Option<f64>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_ratio: 0.2,
            policy_lr: 3e-4,
            value_lr: 1e-3,
            update_epochs: 10,
            minibatch_size: 64,
            epochs_max: 100_000,
            steps_per_epoch: 128,
            max_env_calls: 1_000_000,
            hidden: vec![64, 64],
            init_log_std: 0.0,
            entropy_coef: 0.0,
            target_kl: None,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.gae_lambda >= 0.0 && self.gae_lambda <= 1.0) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            return bad("clip_ratio must lie in (0, 1)");
        }
        if self.steps_per_epoch == 0 || self.minibatch_size == 0 || self.update_epochs == 0 {
            return bad("steps_per_epoch, minibatch_size and update_epochs must be positive");
        }
        if !(self.policy_lr > 0.0 && self.value_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        Ok(())
    }
}

/// Maps a controller to network inputs of order one.
pub fn observe(ctrl: &Controller) -> Vec<f64> {
    let mut obs: Vec<f64> = ctrl.delta.iter().map(|d| d / DELTA_LIMIT).collect();
    obs.push(ctrl.read_time / TIME_LIMIT);
    obs
}

/// Policy and value networks with their optimizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoAgent {
    pub policy: GaussianPolicy,
    pub value: Mlp,
    policy_opt: Adam,
    value_opt: Adam,
}

impl PpoAgent {
    pub fn new<R: Rng + ?Sized>(n_spins: usize, cfg: &PpoConfig, rng: &mut R) -> Self {
        let dim = n_spins + 1;
        let policy = GaussianPolicy::new(dim, dim, &cfg.hidden, cfg.init_log_std, rng);
        let mut sizes = vec![dim];
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(1);
        let value = Mlp::new(&sizes, 1.0, rng);
        Self::from_parts(policy, value, cfg)
    }

    pub fn from_parts(policy: GaussianPolicy, value: Mlp, cfg: &PpoConfig) -> Self {
        let policy_opt = Adam::new(policy.n_params(), cfg.policy_lr);
        let value_opt = Adam::new(value.n_params(), cfg.value_lr);
        Self {
            policy,
            value,
            policy_opt,
            value_opt,
        }
    }

    pub fn value_of(&self, obs: &[f64]) -> f64 {
        self.value.forward(obs)[0]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct UpdateDiagnostics {
    /// Median of `|rho - 1|` over the batch before any parameter change.
    pub initial_ratio_deviation: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub value_loss_before: f64,
    pub value_loss_after: f64,
    pub policy_passes: usize,
}

fn value_loss(value: &Mlp, obs: &[Vec<f64>], returns: &[f64]) -> f64 {
    obs.iter()
        .zip(returns)
        .map(|(o, r)| 0.5 * (value.forward(o)[0] - r).powi(2))
        .sum::<f64>()
        / obs.len().max(1) as f64
}

/// One PPO update on a rollout whose advantages have been computed.
pub fn ppo_update<R: Rng + ?Sized>(
    agent: &mut PpoAgent,
    traj: &Trajectory,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateDiagnostics> {
    let n = traj.len();
    if n == 0 || traj.advantages.len() != n || traj.returns.len() != n {
        return Err(Error::Contract("trajectory advantages not computed".into()));
    }
    let advantages = traj.normalized_advantages();
    let full = SurrogateBatch {
        observations: &traj.observations,
        actions: &traj.actions,
        old_log_probs: &traj.log_probs,
        advantages: &advantages,
    };
    let initial = clipped_surrogate(&agent.policy, full, cfg.clip_ratio);
    let dev: Vec<f64> = initial.ratios.iter().map(|r| (r - 1.0).abs()).collect();
    let mut diag = UpdateDiagnostics {
        initial_ratio_deviation: crate::stats::median(&dev),
        value_loss_before: value_loss(&agent.value, &traj.observations, &traj.returns),
        ..Default::default()
    };

    let mut order: Vec<usize> = (0..n).collect();
    let mut policy_active = true;
    let mut obs_mb = Vec::with_capacity(cfg.minibatch_size);
    let mut act_mb = Vec::with_capacity(cfg.minibatch_size);
    let mut lp_mb = Vec::with_capacity(cfg.minibatch_size);
    let mut adv_mb = Vec::with_capacity(cfg.minibatch_size);
    for _ in 0..cfg.update_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch_size) {
            if policy_active {
                obs_mb.clear();
                act_mb.clear();
                lp_mb.clear();
                adv_mb.clear();
                for &i in chunk {
                    obs_mb.push(traj.observations[i].clone());
                    act_mb.push(traj.actions[i].clone());
                    lp_mb.push(traj.log_probs[i]);
                    adv_mb.push(advantages[i]);
                }
                let batch = SurrogateBatch {
                    observations: &obs_mb,
                    actions: &act_mb,
                    old_log_probs: &lp_mb,
                    advantages: &adv_mb,
                };
                let (grad, stats) =
                    clipped_surrogate_gradient(&agent.policy, batch, cfg.clip_ratio, cfg.entropy_coef);
                if !stats.objective.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Diverged(format!(
                        "non-finite surrogate objective {}",
                        stats.objective
                    )));
                }
                agent.policy.ascend(&mut agent.policy_opt, &grad);
            }

            let mut vgrad = vec![0.0; agent.value.n_params()];
            let m = chunk.len() as f64;
            for &i in chunk {
                let cache = agent.value.forward_cached(&traj.observations[i]);
                let err = cache.output()[0] - traj.returns[i];
                agent.value.backward(&cache, &[err / m], &mut vgrad);
            }
            if vgrad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged("non-finite value gradient".into()));
            }
            agent.value_opt.step(agent.value.params_mut(), &vgrad);
        }
        if policy_active {
            diag.policy_passes += 1;
            if let Some(kl) = cfg.target_kl {
                let s = clipped_surrogate(&agent.policy, full, cfg.clip_ratio);
                if s.approx_kl > 1.5 * kl {
                    policy_active = false;
                }
            }
        }
    }
    let last = clipped_surrogate(&agent.policy, full, cfg.clip_ratio);
    diag.clip_fraction = last.clip_fraction;
    diag.approx_kl = last.approx_kl;
    diag.value_loss_after = value_loss(&agent.value, &traj.observations, &traj.returns);
    if !diag.value_loss_after.is_finite() {
        return Err(Error::Diverged("non-finite value loss".into()));
    }
    Ok(diag)
}

/// Per-epoch record of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub env_calls: u64,
    /// Best perceived reward seen during the epoch.
    pub perceived_fidelity: f64,
    /// True fidelity of that epoch's best controller.
    pub true_fidelity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub best_controller: Controller,
    pub best_perceived: f64,
    pub best_true: f64,
    pub env_calls: u64,
    pub converged: bool,
    pub epochs: usize,
    pub history: Vec<EpochSummary>,
}

/// Trains a fresh agent on the spin-chain environment described by `env_cfg`.
pub fn train<R: Rng + ?Sized>(env_cfg: &EnvConfig, cfg: &PpoConfig, rng: &mut R) -> Result<TrainResult> {
    let mut env = SpinChainEnv::new(env_cfg.clone())?;
    train_on(&mut env, cfg, rng)
}

/// Trains a fresh agent on any [`Environment`].
pub fn train_on<E: Environment, R: Rng + ?Sized>(
    env: &mut E,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<TrainResult> {
    let mut agent = PpoAgent::new(env.n_spins(), cfg, rng);
    train_agent(&mut agent, env, cfg, rng)
}

/// Continues training an existing agent.
pub fn train_agent<E: Environment, R: Rng + ?Sized>(
    agent: &mut PpoAgent,
    env: &mut E,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<TrainResult> {
    cfg.validate()?;
    let mut best: Option<(EnvState, f64)> = None;
    let mut history = Vec::new();
    let mut epochs = 0;

    let finish = |best: Option<(EnvState, f64)>, env: &E, converged, epochs, history| -> Result<TrainResult> {
        let (state, perceived) =
            best.ok_or_else(|| Error::Config("training budget allows no environment call".into()))?;
        Ok(TrainResult {
            best_true: env.true_fidelity(&state),
            best_controller: state.controller,
            best_perceived: perceived,
            env_calls: env.calls_made(),
            converged,
            epochs,
            history,
        })
    };

    while epochs < cfg.epochs_max {
        let mut state = env.reset(rng);
        let mut traj = Trajectory::with_capacity(cfg.steps_per_epoch);
        let mut epoch_best: Option<(EnvState, f64)> = None;
        for _ in 0..cfg.steps_per_epoch {
            if env.calls_made() >= cfg.max_env_calls {
                return finish(best, env, false, epochs, history);
            }
            let obs = observe(&state.controller);
            let (action, log_prob) = agent.policy.sample(&obs, rng);
            let value = agent.value_of(&obs);
            let out = env.step(&state, &EnvAction::from_slice(&action), rng)?;
            traj.push(obs, action, log_prob, out.reward, value);
            if epoch_best.as_ref().is_none_or(|(_, r)| out.reward > *r) {
                epoch_best = Some((out.next_state.clone(), out.reward));
            }
            if best.as_ref().is_none_or(|(_, r)| out.reward > *r) {
                best = Some((out.next_state.clone(), out.reward));
            }
            if out.done {
                best = Some((out.next_state, out.reward));
                return finish(best, env, true, epochs + 1, history);
            }
            state = out.next_state;
        }
        traj.bootstrap_value = agent.value_of(&observe(&state.controller));
        compute_advantages(&mut traj, cfg.gamma, cfg.gae_lambda);
        ppo_update(agent, &traj, cfg, rng)?;
        epochs += 1;
        if let Some((s, r)) = epoch_best {
            history.push(EpochSummary {
                env_calls: env.calls_made(),
                perceived_fidelity: r,
                true_fidelity: env.true_fidelity(&s),
            });
        }
    }
    finish(best, env, false, epochs, history)
}
