//! Seeded experiment sweeps.
//!
//! An [`ExperimentConfig`] names a grid of cells (algorithm x chain length
//! x noise level x transition). Every cell runs `runs` independent
//! optimizations, each with its own environment and an RNG seeded by
//! [`derive_seed`]. Runs execute on the rayon pool; results are collected
//! in grid order, so the output does not depend on scheduling.

pub mod config;
pub mod export;
pub mod seed;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{ExperimentConfig, ExperimentKind, Transition};
pub use export::{export_records, load_records, Format};
pub use seed::derive_seed;

use crate::dynamics::{fidelity, ChainSpec, Controller};
use crate::env::{random_controller, EnvConfig, SpinChainEnv};
use crate::error::{Error, Result};
use crate::lbfgs::{optimize_with_restarts, polish, LbfgsConfig};
use crate::noise::NoiseConfig;
use crate::ppo::{train, PpoConfig};
use crate::robustness::{improving_fraction, run_mcra, sphere_scan, strength_grid, McraResult, SphereScan, SPHERE_MAX_STRENGTH};
use crate::stats::{median, quartiles};
use crate::Environment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Lbfgs,
    Ppo,
    Random,
}

impl Algorithm {
    fn code(self) -> u64 {
        match self {
            Algorithm::Lbfgs => 0,
            Algorithm::Ppo => 1,
            Algorithm::Random => 2,
        }
    }
}

/// Outcome of one optimization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub spec: ChainSpec,
    pub sigma: f64,
    pub shots: u64,
    pub threshold: f64,
    pub budget: u64,
    pub controller: Controller,
    pub env_calls: u64,
    pub converged: bool,
    pub perceived_fidelity: f64,
    pub true_fidelity: f64,
    pub wall_time_s: f64,
}

/// What a search returns before it is wrapped into a [`RunRecord`].
#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub controller: Controller,
    pub env_calls: u64,
    pub converged: bool,
    pub perceived: f64,
    pub true_fidelity: f64,
}

/// Uniform random controllers until the perceived fidelity reaches the
/// threshold or `budget` calls are spent; returns the best seen.
///
/// Unlike the environment itself this accepts a threshold of zero.
pub fn random_search<R: Rng + ?Sized>(env_cfg: &EnvConfig, budget: u64, rng: &mut R) -> Result<SearchOutcome> {
    if budget == 0 {
        return Err(Error::Config("random search budget must be at least 1".into()));
    }
    let threshold = env_cfg.reward_threshold;
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold {threshold} outside [0, 1]")));
    }
    // The environment's own threshold plays no part in `evaluate`.
    let mut env = SpinChainEnv::new(EnvConfig {
        reward_threshold: 1.0,
        ..env_cfg.clone()
    })?;
    let n = env_cfg.spec.n_spins;
    let mut best: Option<(Controller, f64)> = None;
    let mut converged = false;
    while env.calls_made() < budget {
        let c = random_controller(n, rng);
        let f = env.evaluate(&c, rng)?;
        if best.as_ref().is_none_or(|(_, b)| f > *b) {
            best = Some((c, f));
        }
        if f >= threshold {
            converged = true;
            break;
        }
    }
    let (controller, perceived) = best.expect("budget allows at least one call");
    Ok(SearchOutcome {
        true_fidelity: fidelity(&env_cfg.spec, &controller)?,
        controller,
        env_calls: env.calls_made(),
        converged,
        perceived,
    })
}

/// Settings shared by every run of a cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub algorithm: Algorithm,
    pub env: EnvConfig,
    pub budget: u64,
    pub ppo: PpoConfig,
    pub lbfgs: LbfgsConfig,
}

/// One seeded run.
pub fn run_single(settings: &RunSettings, seed: u64) -> Result<RunRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let env = &settings.env;
    let started = Instant::now();
    let outcome = match settings.algorithm {
        Algorithm::Random => random_search(env, settings.budget, &mut rng)?,
        Algorithm::Lbfgs => {
            let cfg = LbfgsConfig {
                threshold: env.reward_threshold,
                noisy_mode: !env.noise.is_noiseless(),
                max_evaluations: settings.budget,
                ..settings.lbfgs.clone()
            };
            let r = optimize_with_restarts(env, &cfg, &mut rng)?;
            SearchOutcome {
                controller: r.best_controller,
                env_calls: r.env_calls,
                converged: r.converged,
                perceived: r.best_perceived,
                true_fidelity: r.best_true_fidelity,
            }
        }
        Algorithm::Ppo => {
            let cfg = PpoConfig {
                max_env_calls: settings.budget.min(settings.ppo.max_env_calls),
                ..settings.ppo.clone()
            };
            let r = train(env, &cfg, &mut rng)?;
            SearchOutcome {
                controller: r.best_controller,
                env_calls: r.env_calls,
                converged: r.converged,
                perceived: r.best_perceived,
                true_fidelity: r.best_true,
            }
        }
    };
    Ok(RunRecord {
        algorithm: settings.algorithm,
        seed,
        spec: env.spec.clone(),
        sigma: env.noise.sigma_noise,
        shots: env.noise.shots,
        threshold: env.reward_threshold,
        budget: settings.budget,
        controller: outcome.controller,
        env_calls: outcome.env_calls,
        converged: outcome.converged,
        perceived_fidelity: outcome.perceived,
        true_fidelity: outcome.true_fidelity,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// Per-cell aggregate of run records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub algorithm: Algorithm,
    pub n_spins: usize,
    pub source: usize,
    pub target: usize,
    pub sigma: f64,
    pub shots: u64,
    pub threshold: f64,
    pub runs: usize,
    pub converged: usize,
    pub median_calls: f64,
    pub q1_calls: f64,
    pub q3_calls: f64,
    pub median_perceived: f64,
    pub median_true: f64,
}

fn same_cell(a: &RunRecord, b: &RunRecord) -> bool {
    a.algorithm == b.algorithm
        && a.spec == b.spec
        && a.sigma == b.sigma
        && a.shots == b.shots
        && a.threshold == b.threshold
}

/// Groups records by cell, in order of first appearance.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut groups: Vec<Vec<&RunRecord>> = Vec::new();
    for r in records {
        match groups.iter_mut().find(|g| same_cell(g[0], r)) {
            Some(g) => g.push(r),
            None => groups.push(vec![r]),
        }
    }
    groups
        .into_iter()
        .map(|g| {
            let calls: Vec<f64> = g.iter().map(|r| r.env_calls as f64).collect();
            let (q1, med, q3) = quartiles(&calls);
            let first = g[0];
            SummaryRow {
                algorithm: first.algorithm,
                n_spins: first.spec.n_spins,
                source: first.spec.source,
                target: first.spec.target,
                sigma: first.sigma,
                shots: first.shots,
                threshold: first.threshold,
                runs: g.len(),
                converged: g.iter().filter(|r| r.converged).count(),
                median_calls: med,
                q1_calls: q1,
                q3_calls: q3,
                median_perceived: median(&g.iter().map(|r| r.perceived_fidelity).collect::<Vec<_>>()),
                median_true: median(&g.iter().map(|r| r.true_fidelity).collect::<Vec<_>>()),
            }
        })
        .collect()
}

/// Sphere-scan result together with how its controller was chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphereReport {
    /// Index into the converged L-BFGS controllers.
    pub selected: usize,
    /// Its median fidelity pooled over all MCRA levels.
    pub pooled_median: f64,
    pub scan: SphereScan,
    /// Central-difference slopes at zero strength, one per direction.
    pub slopes: Vec<f64>,
    pub slope_step: f64,
    pub slope_tol: f64,
    pub improving_fraction: f64,
}

pub const SLOPE_STEP: f64 = 1e-5;
pub const SLOPE_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub records: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
    pub mcra: Option<McraResult>,
    pub sphere: Option<SphereReport>,
}

/// Cells of the grid with their derived-seed indices.
fn cells(cfg: &ExperimentConfig) -> Result<Vec<(RunSettings, [u64; 4])>> {
    let threshold = cfg.active_threshold();
    let mut out = Vec::new();
    for &alg in &cfg.algorithms {
        for &n in &cfg.chain_lengths {
            for (si, &sigma) in cfg.sigmas.iter().enumerate() {
                for (ti, tr) in cfg.transitions.iter().enumerate() {
                    let spec = ChainSpec::uniform(n, tr.source, tr.target)?;
                    let env = EnvConfig::new(spec, NoiseConfig::new(sigma, cfg.shots)?, threshold)?;
                    out.push((
                        RunSettings {
                            algorithm: alg,
                            env,
                            budget: cfg.budget,
                            ppo: cfg.ppo.clone(),
                            lbfgs: cfg.lbfgs.clone(),
                        },
                        [alg.code(), n as u64, si as u64, ti as u64],
                    ));
                }
            }
        }
    }
    Ok(out)
}

/// Runs every cell of the grid.
pub fn run_grid(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    let jobs: Vec<(RunSettings, u64)> = cells(cfg)?
        .into_iter()
        .flat_map(|(s, idx)| (0..cfg.runs as u64).map(move |r| (s.clone(), derive_seed(cfg.seed, &idx, r))))
        .collect();
    jobs.par_iter().map(|(s, seed)| run_single(s, *seed)).collect()
}

/// Fixed cell index for the robustness stage so its stream never
/// coincides with a run's.
const ROBUSTNESS_CELL: [u64; 1] = [u64::MAX];

/// Runs the configured experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let records = run_grid(cfg)?;
    let summary = summarize(&records);
    let mut out = ExperimentOutput {
        records,
        summary,
        mcra: None,
        sphere: None,
    };
    if matches!(cfg.kind, ExperimentKind::Mcra | ExperimentKind::Sphere) {
        let controllers: Vec<Controller> = out
            .records
            .iter()
            .filter(|r| r.converged)
            .map(|r| r.controller.clone())
            .collect();
        if controllers.is_empty() {
            return Ok(out);
        }
        let spec = out.records[0].spec.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &ROBUSTNESS_CELL, 0));
        let mcra = run_mcra(&controllers, &spec, cfg.mcra_repeats, &mut rng)?;
        if cfg.kind == ExperimentKind::Sphere {
            let selected = mcra.most_robust();
            let pooled_median = mcra.controller_pooled_medians()[selected];
            let env = EnvConfig::new(spec.clone(), NoiseConfig::NOISELESS, cfg.active_threshold())?;
            let (ctrl, _) = polish(&env, &controllers[selected], &cfg.lbfgs)?;
            let grid = strength_grid(cfg.sphere_points, SPHERE_MAX_STRENGTH);
            let scan = sphere_scan(&spec, &ctrl, cfg.sphere_directions, &grid, &mut rng)?;
            let slopes = scan.slopes(&spec, SLOPE_STEP)?;
            out.sphere = Some(SphereReport {
                selected,
                pooled_median,
                improving_fraction: improving_fraction(&slopes, SLOPE_TOL),
                scan,
                slopes,
                slope_step: SLOPE_STEP,
                slope_tol: SLOPE_TOL,
            });
        }
        out.mcra = Some(mcra);
    }
    Ok(out)
}
