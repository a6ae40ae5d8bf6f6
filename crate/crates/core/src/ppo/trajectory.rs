//! Rollout storage and generalized advantage estimation.

/// One epoch of transitions in visiting order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    /// Value estimate of the state following the last transition.
    pub bootstrap_value: f64,
    /// Discounted rewards-to-go, bootstrapped from `bootstrap_value`.
    pub returns: Vec<f64>,
    /// Unnormalized GAE(lambda) advantages.
    pub advantages: Vec<f64>,
}

impl Trajectory {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            observations: Vec::with_capacity(n),
            actions: Vec::with_capacity(n),
            log_probs: Vec::with_capacity(n),
            rewards: Vec::with_capacity(n),
            values: Vec::with_capacity(n),
            ..Self::default()
        }
    }

    pub fn push(&mut self, obs: Vec<f64>, action: Vec<f64>, log_prob: f64, reward: f64, value: f64) {
        self.observations.push(obs);
        self.actions.push(action);
        self.log_probs.push(log_prob);
        self.rewards.push(reward);
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Advantages shifted to zero mean and scaled to unit variance.
    pub fn normalized_advantages(&self) -> Vec<f64> {
        normalize(&self.advantages)
    }
}

/// Standardizes a batch; a constant batch maps to zeros.
pub fn normalize(xs: &[f64]) -> Vec<f64> {
    if xs.is_empty() {
        return Vec::new();
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd < 1e-12 {
        return vec![0.0; xs.len()];
    }
    xs.iter().map(|x| (x - mean) / sd).collect()
}

/// Fills `returns` and `advantages`.
///
/// `delta_t = r_t + gamma V(s_{t+1}) - V(s_t)` and
/// `A_t = sum_k (gamma lambda)^k delta_{t+k}`, with `V(s_T)` taken from
/// `bootstrap_value`.
pub fn compute_advantages(traj: &mut Trajectory, gamma: f64, lambda: f64) {
    let n = traj.len();
    traj.advantages = vec![0.0; n];
    traj.returns = vec![0.0; n];
    let mut gae = 0.0;
    let mut ret = traj.bootstrap_value;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n {
            traj.values[t + 1]
        } else {
            traj.bootstrap_value
        };
        let delta = traj.rewards[t] + gamma * next_value - traj.values[t];
        gae = delta + gamma * lambda * gae;
        traj.advantages[t] = gae;
        ret = traj.rewards[t] + gamma * ret;
        traj.returns[t] = ret;
    }
}
