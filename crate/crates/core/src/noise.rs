//! Stochastic corruptions of the transfer problem.
//!
//! Two noise models act on the reward channel: an additive symmetric
//! tridiagonal perturbation of the Hamiltonian (parameter uncertainty) and
//! binomial coarse-graining of the fidelity readout (finite shot count).
//! The uniform sphere sampler supplies perturbation directions for the
//! fidelity-curve scan.

use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::Hamiltonian;
use crate::error::{contract, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Standard deviation of every free Hamiltonian perturbation entry.
    pub sigma_noise: f64,
    /// Measurement shots per fidelity estimate; zero reads the exact value.
    pub shots: u64,
}

impl NoiseConfig {
    pub const NOISELESS: NoiseConfig = NoiseConfig {
        sigma_noise: 0.0,
        shots: 0,
    };

    pub fn new(sigma_noise: f64, shots: u64) -> Result<Self> {
        if !(sigma_noise >= 0.0) || !sigma_noise.is_finite() {
            return Err(contract(format!("sigma_noise {sigma_noise} must be >= 0")));
        }
        Ok(Self { sigma_noise, shots })
    }

    pub fn is_noiseless(&self) -> bool {
        self.sigma_noise == 0.0 && self.shots == 0
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self::NOISELESS
    }
}

/// Unit vector over the `2N - 1` free entries of a symmetric tridiagonal
/// matrix: `N` diagonal entries followed by `N - 1` off-diagonal entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationDirection {
    components: Vec<f64>,
}

impl PerturbationDirection {
    /// Normalizes `v` onto the unit sphere. `v.len()` must be odd and `v`
    /// non-zero.
    pub fn from_vector(v: Vec<f64>) -> Result<Self> {
        if v.len().is_multiple_of(2) {
            return Err(contract(format!(
                "direction dimension {} is not of the form 2N-1",
                v.len()
            )));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(contract("direction must be a finite non-zero vector"));
        }
        Ok(Self {
            components: v.into_iter().map(|x| x / norm).collect(),
        })
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn n_spins(&self) -> usize {
        self.components.len().div_ceil(2)
    }

    pub fn dimension(&self) -> usize {
        self.components.len()
    }

    pub fn negated(&self) -> Self {
        Self {
            components: self.components.iter().map(|x| -x).collect(),
        }
    }

    /// The symmetric tridiagonal matrix `P` this direction describes.
    pub fn to_matrix(&self) -> Hamiltonian {
        let n = self.n_spins();
        let (diag, off) = self.components.split_at(n);
        Hamiltonian::from_parts(diag.to_vec(), off.to_vec())
            .expect("2N-1 components always split into a valid tridiagonal")
    }
}

/// Random symmetric tridiagonal matrix with `2N - 1` i.i.d. `Normal(0, sigma^2)`
/// free entries.
pub fn sample_structured_perturbation<R: Rng + ?Sized>(
    n_spins: usize,
    sigma: f64,
    rng: &mut R,
) -> Hamiltonian {
    let mut draw = |k: usize| -> Vec<f64> {
        (0..k)
            .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let diag = draw(n_spins);
    let off = draw(n_spins.saturating_sub(1));
    Hamiltonian::from_parts(diag, off).expect("sizes are consistent")
}

/// Shot-noise estimate of a fidelity: `k / M` with `k ~ Binomial(M, f)`, or
/// `f` itself when `M = 0`.
pub fn coarse_grain_fidelity<R: Rng + ?Sized>(true_f: f64, shots: u64, rng: &mut R) -> f64 {
    if shots == 0 {
        return true_f;
    }
    let p = true_f.clamp(0.0, 1.0);
    let k = Binomial::new(shots, p)
        .expect("probability clamped to [0, 1]")
        .sample(rng);
    k as f64 / shots as f64
}

/// Uniform direction on the unit sphere of dimension `2N - 1`.
pub fn sample_sphere_direction<R: Rng + ?Sized>(n_spins: usize, rng: &mut R) -> PerturbationDirection {
    loop {
        let v: Vec<f64> = (0..2 * n_spins - 1)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        if let Ok(dir) = PerturbationDirection::from_vector(v) {
            return dir;
        }
    }
}

/// `H + delta * P(dir)`.
pub fn perturbed_hamiltonian(
    h: &Hamiltonian,
    dir: &PerturbationDirection,
    delta: f64,
) -> Result<Hamiltonian> {
    if dir.n_spins() != h.dim() {
        return Err(contract(format!(
            "direction for {} spins applied to a {}-spin Hamiltonian",
            dir.n_spins(),
            h.dim()
        )));
    }
    h.add_scaled(&dir.to_matrix(), delta)
}
