//! L-BFGS and PPO behaviour beyond the unit tests.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use spinctl::dynamics::{build_hamiltonian, eigendecompose, transfer_gradient, Controller, DELTA_LIMIT};
use spinctl::env::{random_controller, EnvAction, EnvState};
use spinctl::lbfgs::{
    minimize, optimize_with_restarts, two_loop_direction, Bounds, LbfgsConfig,
};
use spinctl::ppo::checkpoint::Checkpoint;
use spinctl::ppo::{
    clipped_surrogate, clipped_surrogate_gradient, compute_advantages, ppo_update, train, train_on, GaussianPolicy,
    Mlp, PpoAgent, PpoConfig, SurrogateBatch, Trajectory,
};
use spinctl::{ChainSpec, EnvConfig, Environment, NoiseConfig};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Random SPD matrix `Q diag(l) Q^T` with eigenvalues in `[1, kappa]`.
fn spd(d: usize, kappa: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let m = nalgebra::DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
    let q = m.qr().q();
    let l: Vec<f64> = (0..d).map(|_| rng.random_range(1.0..kappa)).collect();
    (0..d)
        .map(|i| (0..d).map(|j| (0..d).map(|k| q[(i, k)] * l[k] * q[(j, k)]).sum()).collect())
        .collect()
}

fn matvec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| dot(row, x)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn two_loop_gives_descent(d in 1usize..10, pairs in 0usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = spd(d, 50.0, &mut rng);
        let hist: Vec<(Vec<f64>, Vec<f64>)> = (0..pairs)
            .map(|_| {
                let s: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let y = matvec(&a, &s);
                (s, y)
            })
            .collect();
        let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let dir = two_loop_direction(&hist, &g);
        prop_assert!(dot(&g, &dir) < 0.0);
    }

    #[test]
    fn quadratics_converge_quickly(d in 1usize..=10, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = spd(d, 10.0, &mut rng);
        let x0: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut calls = 0usize;
        let mut f = |x: &[f64]| {
            calls += 1;
            let ax = matvec(&a, x);
            (0.5 * dot(x, &ax), ax)
        };
        let cfg = LbfgsConfig { grad_tol: 1e-9, ..LbfgsConfig::default() };
        let res = minimize(&mut f, x0, None, &cfg);
        let xnorm = dot(&res.x, &res.x).sqrt();
        prop_assert!(xnorm <= 1e-8, "|x| = {xnorm:e} after {} iterations", res.iterations);
        prop_assert!(res.iterations <= d + 5, "{} iterations for d = {d}", res.iterations);
        prop_assert_eq!(res.evaluations, calls);
        prop_assert!(res.values.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn fidelity_ascent_is_monotone_and_in_bounds(n in 3usize..=6, seed in any::<u64>()) {
        let spec = ChainSpec::uniform(n, 0, 2).unwrap();
        let bounds = Bounds::controller(n);
        let mut points = Vec::new();
        let mut obj = |x: &[f64]| {
            points.push(x.to_vec());
            let c = Controller::from_slice(x);
            let g = transfer_gradient(&eigendecompose(&build_hamiltonian(&spec, &c).unwrap()), 0, 2, c.read_time);
            (-g.fidelity, g.controller_gradient().iter().map(|v| -v).collect::<Vec<_>>())
        };
        let x0 = random_controller(n, &mut ChaCha8Rng::seed_from_u64(seed)).to_vec();
        let res = minimize(&mut obj, x0, Some(&bounds), &LbfgsConfig::default());
        prop_assert!(res.values.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(res.evaluations, points.len());
        prop_assert!(points.iter().all(|p| bounds.contains(p)));
        prop_assert!(Controller::from_slice(&res.x).check_bounds().is_ok());
    }
}

#[test]
fn three_chain_reaches_the_analytic_optimum() {
    let spec = ChainSpec::uniform(3, 0, 2).unwrap();
    let env = EnvConfig::new(spec, NoiseConfig::NOISELESS, 0.99).unwrap();
    for seed in 0..10 {
        let r = optimize_with_restarts(&env, &LbfgsConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert!(r.converged);
        assert!(r.best_true_fidelity >= 0.99);
        assert!((1.0 - r.best_true_fidelity) <= 1e-2);
        assert!(r.env_calls >= 1);
    }
}

#[test]
fn restart_budget_is_enforced() {
    let spec = ChainSpec::uniform(6, 0, 5).unwrap();
    let env = EnvConfig::new(spec, NoiseConfig::NOISELESS, 1.0).unwrap();
    let cfg = LbfgsConfig {
        max_evaluations: 37,
        ..LbfgsConfig::default()
    };
    let r = optimize_with_restarts(&env, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(!r.converged);
    assert_eq!(r.env_calls, 37);

    let capped = LbfgsConfig {
        max_restarts: 2,
        ..LbfgsConfig::default()
    };
    let r = optimize_with_restarts(&env, &capped, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(!r.converged);
    assert_eq!(r.restarts, 2);
}

#[test]
fn noisy_mode_still_returns_a_controller() {
    let spec = ChainSpec::uniform(4, 0, 2).unwrap();
    let env = EnvConfig::new(spec, NoiseConfig::new(0.05, 100).unwrap(), 0.98).unwrap();
    let cfg = LbfgsConfig {
        noisy_mode: true,
        threshold: 0.98,
        max_evaluations: 20_000,
        ..LbfgsConfig::default()
    };
    let r = optimize_with_restarts(&env, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert!(r.env_calls <= 20_000);
    assert!((0.0..=1.0).contains(&r.best_true_fidelity));
    if r.converged {
        assert!(r.best_perceived >= 0.98);
    }
}

fn tiny_policy(w: f64, b: f64, log_std: f64) -> GaussianPolicy {
    GaussianPolicy {
        net: Mlp::from_params(vec![1, 1], vec![w, b]).unwrap(),
        log_std: vec![log_std],
    }
}

#[test]
fn surrogate_gradient_on_three_parameters() {
    let old = tiny_policy(0.4, -0.1, -0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let obs: Vec<Vec<f64>> = (0..16).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
    let mut actions = Vec::new();
    let mut old_lp = Vec::new();
    for o in &obs {
        let (a, lp) = old.sample(o, &mut rng);
        actions.push(a);
        old_lp.push(lp);
    }
    let adv: Vec<f64> = (0..16).map(|_| rng.sample(StandardNormal)).collect();
    let batch = SurrogateBatch {
        observations: &obs,
        actions: &actions,
        old_log_probs: &old_lp,
        advantages: &adv,
    };
    // Moved policies: inside the trust region, and far enough that some
    // samples are clipped.
    for (policy, clip) in [(tiny_policy(0.45, -0.08, -0.28), 0.2), (tiny_policy(0.9, 0.3, -0.6), 0.2)] {
        let (grad, _) = clipped_surrogate_gradient(&policy, batch, clip, 0.0);
        let theta = policy.flat_params();
        let h = 1e-6;
        for i in 0..3 {
            let mut p = policy.clone();
            let mut up = theta.clone();
            up[i] += h;
            p.set_flat_params(&up);
            let fu = clipped_surrogate(&p, batch, clip).objective;
            let mut down = theta.clone();
            down[i] -= h;
            p.set_flat_params(&down);
            let fdn = clipped_surrogate(&p, batch, clip).objective;
            let fd = (fu - fdn) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel <= 1e-4, "param {i}: analytic {} fd {fd}", grad[i]);
        }
    }
}

#[test]
fn surrogate_gradient_on_a_small_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let old = GaussianPolicy::new(2, 2, &[4], -0.5, &mut rng);
    let mut policy = old.clone();
    let mut p = policy.flat_params();
    for v in &mut p {
        *v += 0.05 * rng.sample::<f64, _>(StandardNormal);
    }
    policy.set_flat_params(&p);
    assert!(policy.n_params() <= 50);
    let obs: Vec<Vec<f64>> = (0..20).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let mut actions = Vec::new();
    let mut old_lp = Vec::new();
    for o in &obs {
        let (a, lp) = old.sample(o, &mut rng);
        actions.push(a);
        old_lp.push(lp);
    }
    let adv: Vec<f64> = (0..20).map(|_| rng.sample(StandardNormal)).collect();
    let batch = SurrogateBatch {
        observations: &obs,
        actions: &actions,
        old_log_probs: &old_lp,
        advantages: &adv,
    };
    let (grad, _) = clipped_surrogate_gradient(&policy, batch, 0.2, 0.0);
    let h = 1e-6;
    for i in 0..p.len() {
        let mut q = policy.clone();
        let mut up = p.clone();
        up[i] += h;
        q.set_flat_params(&up);
        let fu = clipped_surrogate(&q, batch, 0.2).objective;
        let mut down = p.clone();
        down[i] -= h;
        q.set_flat_params(&down);
        let fdn = clipped_surrogate(&q, batch, 0.2).objective;
        let fd = (fu - fdn) / (2.0 * h);
        let rel = (grad[i] - fd).abs() / fd.abs().max(1e-6);
        assert!(rel <= 1e-4, "param {i}: analytic {} fd {fd}", grad[i]);
    }
}

fn rollout(agent: &PpoAgent, n: usize, rng: &mut ChaCha8Rng) -> Trajectory {
    let spec = ChainSpec::uniform(n, 0, 2).unwrap();
    let mut env = spinctl::SpinChainEnv::new(EnvConfig::new(spec, NoiseConfig::NOISELESS, 1.0).unwrap()).unwrap();
    let mut state = env.reset(rng);
    let mut traj = Trajectory::with_capacity(128);
    for _ in 0..128 {
        let obs = spinctl::ppo::observe(&state.controller);
        let (a, lp) = agent.policy.sample(&obs, rng);
        let v = agent.value_of(&obs);
        let out = env.step(&state, &EnvAction::from_slice(&a), rng).unwrap();
        traj.push(obs, a, lp, out.reward, v);
        state = out.next_state;
    }
    traj.bootstrap_value = agent.value_of(&spinctl::ppo::observe(&state.controller));
    compute_advantages(&mut traj, 0.99, 0.95);
    traj
}

#[test]
fn update_starts_at_unit_ratio_and_fits_values() {
    let cfg = PpoConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut agent = PpoAgent::new(4, &cfg, &mut rng);
    for _ in 0..3 {
        let traj = rollout(&agent, 4, &mut rng);
        let diag = ppo_update(&mut agent, &traj, &cfg, &mut rng).unwrap();
        assert!(diag.initial_ratio_deviation <= 1e-6);
        assert!(diag.value_loss_after < diag.value_loss_before);
        assert!(diag.policy_passes >= 1);
    }
}

#[test]
fn zero_advantages_leave_the_policy_unchanged() {
    let cfg = PpoConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut agent = PpoAgent::new(3, &cfg, &mut rng);
    let mut traj = rollout(&agent, 3, &mut rng);
    traj.advantages.iter_mut().for_each(|a| *a = 0.0);
    let before = agent.policy.clone();
    ppo_update(&mut agent, &traj, &cfg, &mut rng).unwrap();
    assert_eq!(agent.policy, before);
}

/// Reward `exp(-|delta - target|^2)` on a two-site controller; time unused.
struct Bowl {
    target: [f64; 2],
    calls: u64,
}

impl Environment for Bowl {
    fn n_spins(&self) -> usize {
        2
    }
    fn reward_threshold(&self) -> f64 {
        (-0.25f64).exp()
    }
    fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> EnvState {
        EnvState {
            controller: random_controller(2, rng),
        }
    }
    fn step<R: Rng + ?Sized>(&mut self, state: &EnvState, action: &EnvAction, _rng: &mut R) -> spinctl::Result<spinctl::env::StepOutcome> {
        let next = spinctl::env::apply_action(&state.controller, action, 1.0, 3.0)?;
        self.calls += 1;
        let reward = self.reward(&next);
        Ok(spinctl::env::StepOutcome {
            done: reward >= self.reward_threshold(),
            next_state: EnvState { controller: next },
            reward,
            perceived_fidelity: reward,
        })
    }
    fn true_fidelity(&self, state: &EnvState) -> f64 {
        self.reward(&state.controller)
    }
    fn calls_made(&self) -> u64 {
        self.calls
    }
}

impl Bowl {
    fn reward(&self, c: &Controller) -> f64 {
        let d2: f64 = c.delta.iter().zip(&self.target).map(|(a, b)| (a - b).powi(2)).sum();
        (-d2).exp()
    }
}

#[test]
fn ppo_solves_a_toy_bowl() {
    let cfg = PpoConfig {
        max_env_calls: 100_000,
        ..PpoConfig::default()
    };
    for seed in 0..3 {
        let mut env = Bowl {
            target: [3.0, -6.5],
            calls: 0,
        };
        let r = train_on(&mut env, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert!(r.converged, "seed {seed} did not converge");
        assert!(r.env_calls <= 100_000);
        let dist: f64 = r
            .best_controller
            .delta
            .iter()
            .zip(&env.target)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(dist <= 0.5, "seed {seed}: distance {dist}");
        assert!(r.best_controller.delta.iter().all(|d| d.abs() <= DELTA_LIMIT));
    }
}

#[test]
fn training_is_reproducible_and_checkpoints_round_trip() {
    let spec = ChainSpec::uniform(3, 0, 2).unwrap();
    let env = EnvConfig::new(spec, NoiseConfig::new(0.02, 50).unwrap(), 0.99).unwrap();
    let cfg = PpoConfig {
        max_env_calls: 3000,
        hidden: vec![16, 16],
        ..PpoConfig::default()
    };
    let a = train(&env, &cfg, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
    let b = train(&env, &cfg, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
    assert_eq!(a, b);
    assert!(a.env_calls > 0 && a.env_calls <= 3000);

    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let agent = PpoAgent::new(3, &cfg, &mut rng);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    Checkpoint::capture(&agent, &cfg, &rng).save(&path).unwrap();
    let (restored, cfg2, mut rng2) = Checkpoint::load(&path).unwrap().restore().unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(restored.policy, agent.policy);
    assert_eq!(restored.value, agent.value);
    assert_eq!(rng2.random::<u64>(), rng.random::<u64>());
}
