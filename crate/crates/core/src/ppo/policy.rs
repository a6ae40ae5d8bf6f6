//! Diagonal Gaussian policy and the clipped surrogate objective.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::mlp::Mlp;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Log-density of `x` under `Normal(mean, diag(exp(log_std))^2)`.
pub fn gaussian_log_density(mean: &[f64], log_std: &[f64], x: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(x)
        .map(|((m, s), x)| {
            let z = (x - m) / s.exp();
            -0.5 * z * z - s - HALF_LN_2PI
        })
        .sum()
}

/// State-conditioned mean from an MLP, state-independent log standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub net: Mlp,
    pub log_std: Vec<f64>,
}

impl GaussianPolicy {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        act_dim: usize,
        hidden: &[usize],
        init_log_std: f64,
        rng: &mut R,
    ) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(act_dim);
        Self {
            net: Mlp::new(&sizes, 0.01, rng),
            log_std: vec![init_log_std; act_dim],
        }
    }

    pub fn act_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn mean(&self, obs: &[f64]) -> Vec<f64> {
        self.net.forward(obs)
    }

    /// Draws `a ~ Normal(mean(obs), exp(log_std)^2)` and returns it with its
    /// log-density.
    pub fn sample<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> (Vec<f64>, f64) {
        let mean = self.mean(obs);
        let action: Vec<f64> = mean
            .iter()
            .zip(&self.log_std)
            .map(|(m, s)| m + s.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let lp = gaussian_log_density(&mean, &self.log_std, &action);
        (action, lp)
    }

    pub fn log_prob(&self, obs: &[f64], action: &[f64]) -> f64 {
        gaussian_log_density(&self.mean(obs), &self.log_std, action)
    }

    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|s| s + 0.5 * (2.0 * PI).ln() + 0.5).sum()
    }

    pub fn n_params(&self) -> usize {
        self.net.n_params() + self.log_std.len()
    }

    /// Network parameters followed by the log standard deviations.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut p = self.net.params().to_vec();
        p.extend_from_slice(&self.log_std);
        p
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let n = self.net.n_params();
        self.net.params_mut().copy_from_slice(&flat[..n]);
        self.log_std.copy_from_slice(&flat[n..]);
    }

    /// Ascends `grad` (a gradient of an objective to maximize).
    pub fn ascend(&mut self, opt: &mut Adam, grad: &[f64]) {
        let mut flat = self.flat_params();
        let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
        opt.step(&mut flat, &neg);
        self.set_flat_params(&flat);
    }
}

/// Inputs of the surrogate objective for a minibatch.
#[derive(Debug, Clone, Copy)]
pub struct SurrogateBatch<'a> {
    pub observations: &'a [Vec<f64>],
    pub actions: &'a [Vec<f64>],
    pub old_log_probs: &'a [f64],
    pub advantages: &'a [f64],
}

impl SurrogateBatch<'_> {
    pub fn len(&self) -> usize {
        self.old_log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.old_log_probs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SurrogateStats {
    /// Mean of `min(rho A, clip(rho, 1 - eps, 1 + eps) A)`.
    pub objective: f64,
    /// Mean of the unclipped `rho A`.
    pub unclipped: f64,
    pub clip_fraction: f64,
    /// Sample estimate of `KL(old || new)`: mean of `log p_old - log p_new`.
    pub approx_kl: f64,
    pub ratios: Vec<f64>,
}

fn surrogate_term(ratio: f64, adv: f64, clip: f64) -> (f64, bool) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * adv;
    if clipped < unclipped {
        (clipped, false)
    } else {
        (unclipped, true)
    }
}

/// Clipped surrogate objective and diagnostics; no gradient.
pub fn clipped_surrogate(policy: &GaussianPolicy, batch: SurrogateBatch<'_>, clip: f64) -> SurrogateStats {
    let n = batch.len() as f64;
    let mut stats = SurrogateStats::default();
    for i in 0..batch.len() {
        let lp = policy.log_prob(&batch.observations[i], &batch.actions[i]);
        let ratio = (lp - batch.old_log_probs[i]).exp();
        let adv = batch.advantages[i];
        let (term, _) = surrogate_term(ratio, adv, clip);
        stats.objective += term / n;
        stats.unclipped += ratio * adv / n;
        if (ratio - 1.0).abs() > clip {
            stats.clip_fraction += 1.0 / n;
        }
        stats.approx_kl += (batch.old_log_probs[i] - lp) / n;
        stats.ratios.push(ratio);
    }
    stats
}

/// Gradient of the batch-mean clipped surrogate (plus `entropy_coef` times
/// the policy entropy) with respect to [`GaussianPolicy::flat_params`].
pub fn clipped_surrogate_gradient(
    policy: &GaussianPolicy,
    batch: SurrogateBatch<'_>,
    clip: f64,
    entropy_coef: f64,
) -> (Vec<f64>, SurrogateStats) {
    let n_net = policy.net.n_params();
    let act_dim = policy.act_dim();
    let mut grad = vec![0.0; n_net + act_dim];
    let mut stats = SurrogateStats::default();
    let n = batch.len() as f64;
    let sigma: Vec<f64> = policy.log_std.iter().map(|s| s.exp()).collect();
    let mut d_mean = vec![0.0; act_dim];

    for i in 0..batch.len() {
        let cache = policy.net.forward_cached(&batch.observations[i]);
        let mean = cache.output();
        let action = &batch.actions[i];
        let lp = gaussian_log_density(mean, &policy.log_std, action);
        let ratio = (lp - batch.old_log_probs[i]).exp();
        let adv = batch.advantages[i];
        let (term, active) = surrogate_term(ratio, adv, clip);
        stats.objective += term / n;
        stats.unclipped += ratio * adv / n;
        if (ratio - 1.0).abs() > clip {
            stats.clip_fraction += 1.0 / n;
        }
        stats.approx_kl += (batch.old_log_probs[i] - lp) / n;
        stats.ratios.push(ratio);
        if !active {
            continue;
        }
        // d(rho A)/d theta = rho A d(log p)/d theta
        let w = ratio * adv / n;
        for j in 0..act_dim {
            let z = (action[j] - mean[j]) / sigma[j];
            d_mean[j] = w * z / sigma[j];
            grad[n_net + j] += w * (z * z - 1.0);
        }
        policy.net.backward(&cache, &d_mean, &mut grad[..n_net]);
    }
    for g in &mut grad[n_net..] {
        *g += entropy_coef;
    }
    (grad, stats)
}
