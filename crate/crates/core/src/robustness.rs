//! Robustness of fixed controllers under Hamiltonian perturbations.
//!
//! Two analyses live here. Monte Carlo robustness analysis (MCRA) adds
//! random structured perturbations of graded strength to the Hamiltonian
//! and pools the resulting exact fidelities per noise level. The sphere
//! scan instead follows `H + delta * P` along unit directions `P` and
//! records a fidelity curve per direction.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    build_hamiltonian, eigendecompose, transfer_fidelity, transfer_gradient, ChainSpec, Controller,
};
use crate::error::{contract, Result};
use crate::harness::export::{csv_writer, finish_csv, write_row};
use crate::harness::seed::derive_seed;
use crate::noise::{perturbed_hamiltonian, sample_sphere_direction, sample_structured_perturbation, PerturbationDirection};
use crate::stats::{quantile_sorted, sorted, spearman};

pub const MCRA_LEVELS: usize = 10;
pub const DENSITY_BINS: usize = 50;
pub const SPHERE_MAX_STRENGTH: f64 = 0.1;
pub const SPHERE_GRID_POINTS: usize = 41;

/// `sigma_k = 0.1 k / 9` for `k = 0..=9`.
pub fn noise_levels() -> Vec<f64> {
    (0..MCRA_LEVELS).map(|k| 0.1 * k as f64 / 9.0).collect()
}

/// Tukey box-plot summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    /// Smallest sample at or above `q1 - 1.5 IQR`.
    pub whisker_low: f64,
    /// Largest sample at or below `q3 + 1.5 IQR`.
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

pub fn boxplot_stats(samples: &[f64]) -> Result<BoxStats> {
    if samples.is_empty() {
        return Err(contract("box statistics of an empty sample"));
    }
    let s = sorted(samples);
    let q1 = quantile_sorted(&s, 0.25);
    let q3 = quantile_sorted(&s, 0.75);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside = |x: &&f64| **x >= lo && **x <= hi;
    Ok(BoxStats {
        median: quantile_sorted(&s, 0.5),
        q1,
        q3,
        whisker_low: *s.iter().find(inside).expect("quartiles lie inside the fences"),
        whisker_high: *s.iter().rev().find(inside).expect("quartiles lie inside the fences"),
        outliers: s.iter().copied().filter(|x| *x < lo || *x > hi).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityDistribution {
    pub sigma: f64,
    pub samples: Vec<f64>,
    pub stats: BoxStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McraSample {
    pub controller: usize,
    pub sigma: f64,
    pub repeat: usize,
    pub fidelity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McraResult {
    pub n_controllers: usize,
    pub repeats: usize,
    /// One pooled distribution per noise level, in level order.
    pub levels: Vec<FidelityDistribution>,
    /// Every sample, ordered by level, controller, repeat.
    pub samples: Vec<McraSample>,
}

impl McraResult {
    pub fn sigmas(&self) -> Vec<f64> {
        self.levels.iter().map(|d| d.sigma).collect()
    }

    pub fn level_medians(&self) -> Vec<f64> {
        self.levels.iter().map(|d| d.stats.median).collect()
    }

    /// Spearman correlation of the level medians against sigma.
    pub fn median_trend(&self) -> f64 {
        spearman(&self.sigmas(), &self.level_medians())
    }

    /// Median of each controller's samples pooled over all levels.
    pub fn controller_pooled_medians(&self) -> Vec<f64> {
        let mut per: Vec<Vec<f64>> = vec![Vec::new(); self.n_controllers];
        for s in &self.samples {
            per[s.controller].push(s.fidelity);
        }
        per.iter().map(|v| quantile_sorted(&sorted(v), 0.5)).collect()
    }

    /// Index of the controller with the highest pooled median (first on ties).
    pub fn most_robust(&self) -> usize {
        let medians = self.controller_pooled_medians();
        let mut best = 0;
        for (i, m) in medians.iter().enumerate() {
            if *m > medians[best] {
                best = i;
            }
        }
        best
    }
}

/// Scores every controller at each MCRA level with `repeats` structured
/// perturbations and pools the exact fidelities per level.
pub fn run_mcra<R: Rng + ?Sized>(
    controllers: &[Controller],
    spec: &ChainSpec,
    repeats: usize,
    rng: &mut R,
) -> Result<McraResult> {
    run_mcra_at(controllers, spec, &noise_levels(), repeats, rng)
}

/// [`run_mcra`] on an explicit list of noise levels.
pub fn run_mcra_at<R: Rng + ?Sized>(
    controllers: &[Controller],
    spec: &ChainSpec,
    sigmas: &[f64],
    repeats: usize,
    rng: &mut R,
) -> Result<McraResult> {
    if controllers.is_empty() {
        return Err(contract("MCRA needs at least one controller"));
    }
    if repeats == 0 {
        return Err(contract("MCRA needs at least one repeat"));
    }
    let hamiltonians = controllers
        .iter()
        .map(|c| build_hamiltonian(spec, c))
        .collect::<Result<Vec<_>>>()?;
    let master: u64 = rng.random();
    let cells: Vec<(usize, usize)> = (0..sigmas.len())
        .flat_map(|l| (0..controllers.len()).map(move |c| (l, c)))
        .collect();
    let per_cell: Vec<Vec<McraSample>> = cells
        .par_iter()
        .map(|&(l, c)| {
            let mut cell_rng = ChaCha8Rng::seed_from_u64(derive_seed(master, &[l as u64, c as u64], 0));
            let h = &hamiltonians[c];
            (0..repeats)
                .map(|r| {
                    let p = sample_structured_perturbation(spec.n_spins, sigmas[l], &mut cell_rng);
                    let hp = h.add_scaled(&p, 1.0).expect("same dimension");
                    McraSample {
                        controller: c,
                        sigma: sigmas[l],
                        repeat: r,
                        fidelity: transfer_fidelity(&hp, spec.source, spec.target, controllers[c].read_time),
                    }
                })
                .collect()
        })
        .collect();
    let samples: Vec<McraSample> = per_cell.into_iter().flatten().collect();
    let per_level = controllers.len() * repeats;
    let levels = sigmas
        .iter()
        .enumerate()
        .map(|(l, &sigma)| {
            let xs: Vec<f64> = samples[l * per_level..(l + 1) * per_level]
                .iter()
                .map(|s| s.fidelity)
                .collect();
            Ok(FidelityDistribution {
                sigma,
                stats: boxplot_stats(&xs)?,
                samples: xs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(McraResult {
        n_controllers: controllers.len(),
        repeats,
        levels,
        samples,
    })
}

/// `points` evenly spaced strengths over `[-max, max]`; the middle point is
/// exactly zero for odd `points`.
pub fn strength_grid(points: usize, max: f64) -> Vec<f64> {
    if points == 1 {
        return vec![0.0];
    }
    let half = (points - 1) as f64 / 2.0;
    (0..points).map(|i| max * (i as f64 - half) / half).collect()
}

/// Histogram of the curves at one strength, `DENSITY_BINS` bins over `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrengthDensity {
    pub strength: f64,
    pub counts: Vec<u64>,
    /// Normalized so that it integrates to one over `[0, 1]`.
    pub density: Vec<f64>,
}

/// Counts of `values` in `bins` equal bins over `[0, 1]`; 1.0 falls in the
/// last bin.
pub fn histogram(values: &[f64], bins: usize) -> Vec<u64> {
    let mut counts = vec![0u64; bins];
    for &v in values {
        let i = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        counts[i] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphereScan {
    pub controller: Controller,
    pub base_fidelity: f64,
    pub strengths: Vec<f64>,
    pub directions: Vec<PerturbationDirection>,
    /// `curves[d][s]` is the fidelity along direction `d` at `strengths[s]`.
    pub curves: Vec<Vec<f64>>,
    /// One density per strength.
    pub densities: Vec<StrengthDensity>,
}

fn fidelity_along(spec: &ChainSpec, ctrl: &Controller, base: &crate::Hamiltonian, dir: &PerturbationDirection, delta: f64) -> f64 {
    let h = perturbed_hamiltonian(base, dir, delta).expect("direction matches the chain");
    transfer_fidelity(&h, spec.source, spec.target, ctrl.read_time)
}

/// Fidelity curves of `ctrl` along `n_directions` uniform unit directions.
pub fn sphere_scan<R: Rng + ?Sized>(
    spec: &ChainSpec,
    ctrl: &Controller,
    n_directions: usize,
    strengths: &[f64],
    rng: &mut R,
) -> Result<SphereScan> {
    ctrl.check_bounds()?;
    if strengths.is_empty() {
        return Err(contract("sphere scan needs at least one strength"));
    }
    let base = build_hamiltonian(spec, ctrl)?;
    let base_fidelity = transfer_fidelity(&base, spec.source, spec.target, ctrl.read_time);
    let directions: Vec<PerturbationDirection> = (0..n_directions)
        .map(|_| sample_sphere_direction(spec.n_spins, rng))
        .collect();
    let curves: Vec<Vec<f64>> = directions
        .par_iter()
        .map(|d| {
            strengths
                .iter()
                .map(|&s| fidelity_along(spec, ctrl, &base, d, s))
                .collect()
        })
        .collect();
    let densities = strengths
        .iter()
        .enumerate()
        .map(|(i, &strength)| {
            let column: Vec<f64> = curves.iter().map(|c| c[i]).collect();
            let counts = histogram(&column, DENSITY_BINS);
            let total = column.len().max(1) as f64;
            let density = counts
                .iter()
                .map(|&c| c as f64 * DENSITY_BINS as f64 / total)
                .collect();
            StrengthDensity {
                strength,
                counts,
                density,
            }
        })
        .collect();
    Ok(SphereScan {
        controller: ctrl.clone(),
        base_fidelity,
        strengths: strengths.to_vec(),
        directions,
        curves,
        densities,
    })
}

impl SphereScan {
    /// Central-difference slopes `(F(h) - F(-h)) / 2h` along every direction.
    pub fn slopes(&self, spec: &ChainSpec, h: f64) -> Result<Vec<f64>> {
        let base = build_hamiltonian(spec, &self.controller)?;
        Ok(self
            .directions
            .par_iter()
            .map(|d| {
                let up = fidelity_along(spec, &self.controller, &base, d, h);
                let down = fidelity_along(spec, &self.controller, &base, d, -h);
                (up - down) / (2.0 * h)
            })
            .collect())
    }

    /// Largest spread between curves at zero strength, if zero is on the grid.
    pub fn spread_at_zero(&self) -> Option<f64> {
        let i = self.strengths.iter().position(|s| *s == 0.0)?;
        let col = self.curves.iter().map(|c| c[i]);
        let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        Some(hi - lo)
    }
}

/// Exact derivative of the fidelity along `dir` at zero strength.
pub fn directional_derivative(spec: &ChainSpec, ctrl: &Controller, dir: &PerturbationDirection) -> Result<f64> {
    let h = build_hamiltonian(spec, ctrl)?;
    if dir.n_spins() != h.dim() {
        return Err(contract("direction does not match the chain length"));
    }
    let g = transfer_gradient(&eigendecompose(&h), spec.source, spec.target, ctrl.read_time);
    let (diag, off) = dir.components().split_at(spec.n_spins);
    Ok(g.diagonal.iter().zip(diag).map(|(a, b)| a * b).sum::<f64>()
        + g.coupling.iter().zip(off).map(|(a, b)| a * b).sum::<f64>())
}

/// Fraction of slopes above `tol`, i.e. directions that improve fidelity
/// at first order.
pub fn improving_fraction(slopes: &[f64], tol: f64) -> f64 {
    if slopes.is_empty() {
        return 0.0;
    }
    slopes.iter().filter(|s| **s > tol).count() as f64 / slopes.len() as f64
}

pub const MCRA_SAMPLES_SCHEMA: &str = "spinctl-mcra-samples/1";
pub const BOX_STATS_SCHEMA: &str = "spinctl-box-stats/1";
pub const SPHERE_CURVES_SCHEMA: &str = "spinctl-sphere-curves/1";
pub const SPHERE_DENSITY_SCHEMA: &str = "spinctl-sphere-density/1";

/// Columns: `controller,sigma,repeat,fidelity`.
pub fn write_mcra_samples(path: &Path, result: &McraResult) -> Result<()> {
    let mut w = csv_writer(path, MCRA_SAMPLES_SCHEMA)?;
    write_row(&mut w, path, ["controller", "sigma", "repeat", "fidelity"])?;
    for s in &result.samples {
        write_row(
            &mut w,
            path,
            [s.controller.to_string(), s.sigma.to_string(), s.repeat.to_string(), s.fidelity.to_string()],
        )?;
    }
    finish_csv(w, path)
}

/// Columns: `sigma,n,median,q1,q3,whisker_low,whisker_high,n_outliers`.
pub fn write_box_stats(path: &Path, levels: &[FidelityDistribution]) -> Result<()> {
    let mut w = csv_writer(path, BOX_STATS_SCHEMA)?;
    write_row(
        &mut w,
        path,
        ["sigma", "n", "median", "q1", "q3", "whisker_low", "whisker_high", "n_outliers"],
    )?;
    for d in levels {
        let s = &d.stats;
        write_row(
            &mut w,
            path,
            [
                d.sigma.to_string(),
                d.samples.len().to_string(),
                s.median.to_string(),
                s.q1.to_string(),
                s.q3.to_string(),
                s.whisker_low.to_string(),
                s.whisker_high.to_string(),
                s.outliers.len().to_string(),
            ],
        )?;
    }
    finish_csv(w, path)
}

/// Direction-by-strength matrix. Header: `direction`, then one column per
/// strength named by its value.
pub fn write_sphere_curves(path: &Path, scan: &SphereScan) -> Result<()> {
    let mut w = csv_writer(path, SPHERE_CURVES_SCHEMA)?;
    let header = std::iter::once("direction".to_string()).chain(scan.strengths.iter().map(|s| s.to_string()));
    write_row(&mut w, path, header)?;
    for (i, curve) in scan.curves.iter().enumerate() {
        let row = std::iter::once(i.to_string()).chain(curve.iter().map(|v| v.to_string()));
        write_row(&mut w, path, row)?;
    }
    finish_csv(w, path)
}

/// Columns: `strength,bin_low,bin_high,count,density`.
pub fn write_sphere_densities(path: &Path, scan: &SphereScan) -> Result<()> {
    let mut w = csv_writer(path, SPHERE_DENSITY_SCHEMA)?;
    write_row(&mut w, path, ["strength", "bin_low", "bin_high", "count", "density"])?;
    for d in &scan.densities {
        let bins = d.counts.len();
        for (b, (c, rho)) in d.counts.iter().zip(&d.density).enumerate() {
            write_row(
                &mut w,
                path,
                [
                    d.strength.to_string(),
                    (b as f64 / bins as f64).to_string(),
                    ((b + 1) as f64 / bins as f64).to_string(),
                    c.to_string(),
                    rho.to_string(),
                ],
            )?;
        }
    }
    finish_csv(w, path)
}
