//! Exact single-excitation dynamics of an XX spin chain.
//!
//! In the single-excitation subspace the chain Hamiltonian reduces to an
//! `N x N` real symmetric tridiagonal matrix: the on-site biases `delta` on
//! the diagonal and the nearest-neighbour couplings on the two adjacent
//! diagonals. With `hbar = 1` the propagator is `U(t) = V exp(-i L t) V^T`,
//! where `H = V L V^T` is the symmetric eigendecomposition, and the transfer
//! fidelity from basis state `s` to basis state `r` is `|<r|U(T)|s>|^2`.
//!
//! The same eigendecomposition gives the exact gradient of the fidelity with
//! respect to every Hamiltonian entry and the readout time, through the
//! divided-difference (Loewner) form of the Frechet derivative of `exp`.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Bias components are confined to `[-DELTA_LIMIT, DELTA_LIMIT]` (rad/s).
pub const DELTA_LIMIT: f64 = 10.0;
/// Readout times are confined to `(0, TIME_LIMIT]` (s).
pub const TIME_LIMIT: f64 = 30.0;
/// Eigenvalue gaps below this use the confluent limit of the divided difference.
pub const DEGENERACY_TOL: f64 = 1e-10;

const NORM_TOL: f64 = 1e-12;

/// An immutable transfer problem: chain geometry plus source and target sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub n_spins: usize,
    /// `couplings[n]` couples sites `n` and `n + 1`.
    pub couplings: Vec<f64>,
    pub source: usize,
    pub target: usize,
}

impl ChainSpec {
    /// Uniform chain with all couplings equal to one.
    pub fn uniform(n_spins: usize, source: usize, target: usize) -> Result<Self> {
        if n_spins < 2 {
            return Err(contract(format!("chain needs at least 2 spins, got {n_spins}")));
        }
        Self::new(vec![1.0; n_spins - 1], source, target)
    }

    pub fn new(couplings: Vec<f64>, source: usize, target: usize) -> Result<Self> {
        let spec = Self {
            n_spins: couplings.len() + 1,
            couplings,
            source,
            target,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_spins < 2 {
            return Err(contract(format!(
                "chain needs at least 2 spins, got {}",
                self.n_spins
            )));
        }
        if self.couplings.len() != self.n_spins - 1 {
            return Err(contract(format!(
                "expected {} couplings for {} spins, got {}",
                self.n_spins - 1,
                self.n_spins,
                self.couplings.len()
            )));
        }
        if self.source >= self.n_spins || self.target >= self.n_spins {
            return Err(contract(format!(
                "source {} / target {} outside chain of {} spins",
                self.source, self.target, self.n_spins
            )));
        }
        if self.couplings.iter().any(|j| !j.is_finite()) {
            return Err(contract("non-finite coupling"));
        }
        Ok(())
    }
}

/// A static controller: on-site biases plus readout time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Controller {
    pub delta: Vec<f64>,
    pub read_time: f64,
}

impl Controller {
    /// Builds a controller, rejecting values outside the admissible box.
    pub fn new(delta: Vec<f64>, read_time: f64) -> Result<Self> {
        let ctrl = Self { delta, read_time };
        ctrl.check_bounds()?;
        Ok(ctrl)
    }

    pub fn check_bounds(&self) -> Result<()> {
        if let Some(d) = self
            .delta
            .iter()
            .find(|d| !(d.abs() <= DELTA_LIMIT))
        {
            return Err(contract(format!("bias {d} outside [-10, 10]")));
        }
        if !(self.read_time > 0.0 && self.read_time <= TIME_LIMIT) {
            return Err(contract(format!(
                "read time {} outside (0, 30]",
                self.read_time
            )));
        }
        Ok(())
    }

    /// Packs the controller as `(delta_1, ..., delta_N, T)`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.delta.clone();
        v.push(self.read_time);
        v
    }

    /// Inverse of [`Controller::to_vec`]; no bounds check.
    pub fn from_slice(x: &[f64]) -> Self {
        let (t, delta) = x.split_last().expect("controller vector is non-empty");
        Self {
            delta: delta.to_vec(),
            read_time: *t,
        }
    }

    pub fn n_spins(&self) -> usize {
        self.delta.len()
    }
}

/// Real symmetric tridiagonal matrix, stored as its diagonal and its
/// (shared) super/sub-diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hamiltonian {
    diagonal: Vec<f64>,
    off_diagonal: Vec<f64>,
}

impl Hamiltonian {
    pub fn from_parts(diagonal: Vec<f64>, off_diagonal: Vec<f64>) -> Result<Self> {
        if diagonal.is_empty() || off_diagonal.len() + 1 != diagonal.len() {
            return Err(contract(format!(
                "tridiagonal parts of length {} and {} do not fit",
                diagonal.len(),
                off_diagonal.len()
            )));
        }
        Ok(Self {
            diagonal,
            off_diagonal,
        })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            diagonal: vec![0.0; n],
            off_diagonal: vec![0.0; n.saturating_sub(1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.diagonal.len()
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diagonal
    }

    pub fn off_diagonal(&self) -> &[f64] {
        &self.off_diagonal
    }

    /// Entry `(i, j)` of the dense matrix.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        match i.abs_diff(j) {
            0 => self.diagonal[i],
            1 => self.off_diagonal[i.min(j)],
            _ => 0.0,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| self.get(i, j))
    }

    /// `self + scale * other`.
    pub fn add_scaled(&self, other: &Hamiltonian, scale: f64) -> Result<Hamiltonian> {
        if self.dim() != other.dim() {
            return Err(contract(format!(
                "cannot add {}x{} and {}x{} Hamiltonians",
                self.dim(),
                self.dim(),
                other.dim(),
                other.dim()
            )));
        }
        let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + scale * y).collect();
        Ok(Hamiltonian {
            diagonal: add(&self.diagonal, &other.diagonal),
            off_diagonal: add(&self.off_diagonal, &other.off_diagonal),
        })
    }
}

/// Builds the single-excitation Hamiltonian: biases on the diagonal,
/// couplings on the off-diagonals.
pub fn build_hamiltonian(spec: &ChainSpec, ctrl: &Controller) -> Result<Hamiltonian> {
    spec.validate()?;
    if ctrl.delta.len() != spec.n_spins {
        return Err(contract(format!(
            "controller has {} biases for a chain of {} spins",
            ctrl.delta.len(),
            spec.n_spins
        )));
    }
    Hamiltonian::from_parts(ctrl.delta.clone(), spec.couplings.clone())
}

/// Spectral data of a Hamiltonian: ascending eigenvalues and the matching
/// orthonormal eigenvectors as columns.
#[derive(Debug, Clone)]
pub struct EigenSystem {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl EigenSystem {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `V diag(lambda) V^T`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let v = &self.eigenvectors;
        let l = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.eigenvalues));
        v * l * v.transpose()
    }

    /// Phases `exp(-i lambda_k t)`.
    fn phases(&self, t: f64) -> Vec<Complex64> {
        self.eigenvalues
            .iter()
            .map(|&l| Complex64::from_polar(1.0, -l * t))
            .collect()
    }
}

pub fn eigendecompose(h: &Hamiltonian) -> EigenSystem {
    let n = h.dim();
    let eig = SymmetricEigen::new(h.to_dense());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigenvalues = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let eigenvectors = DMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    EigenSystem {
        eigenvalues,
        eigenvectors,
    }
}

/// Propagates `psi0` for time `t`: `V exp(-i L t) V^T psi0`.
pub fn evolve_state(es: &EigenSystem, t: f64, psi0: &[Complex64]) -> Result<Vec<Complex64>> {
    let n = es.dim();
    if psi0.len() != n {
        return Err(contract(format!(
            "state of length {} for a {n}-dimensional system",
            psi0.len()
        )));
    }
    if !(t >= 0.0) {
        return Err(contract(format!("evolution time {t} must be non-negative")));
    }
    let norm = psi0.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > NORM_TOL {
        return Err(contract(format!("initial state has norm {norm}, expected 1")));
    }
    let v = &es.eigenvectors;
    let phases = es.phases(t);
    // c_k = phase_k * <v_k|psi0>
    let coeffs: Vec<Complex64> = (0..n)
        .map(|k| phases[k] * (0..n).map(|i| psi0[i] * v[(i, k)]).sum::<Complex64>())
        .collect();
    Ok((0..n)
        .map(|i| (0..n).map(|k| coeffs[k] * v[(i, k)]).sum())
        .collect())
}

/// One-hot basis vector `e_index` of dimension `n`.
pub fn basis_state(n: usize, index: usize) -> Vec<Complex64> {
    let mut psi = vec![Complex64::new(0.0, 0.0); n];
    psi[index] = Complex64::new(1.0, 0.0);
    psi
}

/// `<target| U(t) |source>`.
pub fn transfer_amplitude(es: &EigenSystem, source: usize, target: usize, t: f64) -> Complex64 {
    let v = &es.eigenvectors;
    es.phases(t)
        .iter()
        .enumerate()
        .map(|(k, p)| p * (v[(target, k)] * v[(source, k)]))
        .sum()
}

/// Fidelity of transferring `source` to `target` under `h` at time `t`.
pub fn transfer_fidelity(h: &Hamiltonian, source: usize, target: usize, t: f64) -> f64 {
    let es = eigendecompose(h);
    transfer_amplitude(&es, source, target, t).norm_sqr().min(1.0)
}

/// Exact transfer fidelity `|<target|U(T)|source>|^2` of a controller.
pub fn fidelity(spec: &ChainSpec, ctrl: &Controller) -> Result<f64> {
    let h = build_hamiltonian(spec, ctrl)?;
    Ok(transfer_fidelity(&h, spec.source, spec.target, ctrl.read_time))
}

/// Fidelity together with its derivatives with respect to every free
/// entry of the Hamiltonian and the readout time.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferGradient {
    pub fidelity: f64,
    /// `dF/dH_nn`.
    pub diagonal: Vec<f64>,
    /// `dF/dJ_{n,n+1}` with the symmetric pair perturbed together.
    pub coupling: Vec<f64>,
    /// `dF/dT`.
    pub time: f64,
}

impl TransferGradient {
    /// `(dF/dDelta_1, ..., dF/dDelta_N, dF/dT)`.
    pub fn controller_gradient(&self) -> Vec<f64> {
        let mut g = self.diagonal.clone();
        g.push(self.time);
        g
    }
}

/// Gradient of the transfer fidelity via the spectral Frechet derivative.
///
/// For a symmetric perturbation `E`, `dU = V (G o (V^T E V)) V^T` with
/// `G_kl = (p_k - p_l) / (lambda_k - lambda_l)`, `p_k = exp(-i lambda_k t)`,
/// and `G_kk = -i t p_k`. Contracting with the source and target columns
/// gives `da/dH_mn = (V M V^T)_mn` where `M_kl = v_tk G_kl v_sl`.
pub fn transfer_gradient(
    es: &EigenSystem,
    source: usize,
    target: usize,
    t: f64,
) -> TransferGradient {
    let n = es.dim();
    let v = &es.eigenvectors;
    let lambda = &es.eigenvalues;
    let phases = es.phases(t);
    let minus_i = Complex64::new(0.0, -1.0);

    let amp: Complex64 = (0..n)
        .map(|k| phases[k] * (v[(target, k)] * v[(source, k)]))
        .sum();
    let damp_dt: Complex64 = (0..n)
        .map(|k| minus_i * lambda[k] * phases[k] * (v[(target, k)] * v[(source, k)]))
        .sum();

    let mut m = vec![Complex64::new(0.0, 0.0); n * n];
    for k in 0..n {
        for l in 0..n {
            let gap = lambda[k] - lambda[l];
            let div = if gap.abs() < DEGENERACY_TOL {
                minus_i * t * phases[k]
            } else {
                (phases[k] - phases[l]) / gap
            };
            m[k * n + l] = div * (v[(target, k)] * v[(source, l)]);
        }
    }
    // W = M V^T, then G_ij = sum_k V_ik W_kj; only the tridiagonal band is needed.
    let mut w = vec![Complex64::new(0.0, 0.0); n * n];
    for k in 0..n {
        for j in 0..n {
            w[k * n + j] = (0..n).map(|l| m[k * n + l] * v[(j, l)]).sum();
        }
    }
    let g = |i: usize, j: usize| -> Complex64 { (0..n).map(|k| w[k * n + j] * v[(i, k)]).sum() };

    let conj = amp.conj();
    let d_fid = |da: Complex64| 2.0 * (conj * da).re;
    let diagonal = (0..n).map(|i| d_fid(g(i, i))).collect();
    let coupling = (0..n.saturating_sub(1))
        .map(|i| d_fid(g(i, i + 1) + g(i + 1, i)))
        .collect();
    TransferGradient {
        fidelity: amp.norm_sqr().min(1.0),
        diagonal,
        coupling,
        time: d_fid(damp_dt),
    }
}

/// `(dF/dDelta_1, ..., dF/dDelta_N, dF/dT)` for a controller.
pub fn fidelity_gradient(spec: &ChainSpec, ctrl: &Controller) -> Result<Vec<f64>> {
    let h = build_hamiltonian(spec, ctrl)?;
    let es = eigendecompose(&h);
    Ok(transfer_gradient(&es, spec.source, spec.target, ctrl.read_time).controller_gradient())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{PI, SQRT_2};

    fn ctrl(delta: &[f64], t: f64) -> Controller {
        Controller::new(delta.to_vec(), t).unwrap()
    }

    #[test]
    fn uniform_three_chain_matrix() {
        let spec = ChainSpec::uniform(3, 0, 2).unwrap();
        let h = build_hamiltonian(&spec, &ctrl(&[0.0; 3], 1.0)).unwrap();
        let expected = DMatrix::from_row_slice(3, 3, &[0., 1., 0., 1., 0., 1., 0., 1., 0.]);
        assert_eq!(h.to_dense(), expected);
    }

    #[test]
    fn two_site_and_four_site_matrices() {
        let spec = ChainSpec::uniform(2, 0, 1).unwrap();
        let h = build_hamiltonian(&spec, &ctrl(&[0.3, -2.0], 1.0)).unwrap();
        assert_eq!(h.to_dense(), DMatrix::from_row_slice(2, 2, &[0.3, 1., 1., -2.0]));

        let spec = ChainSpec::uniform(4, 0, 3).unwrap();
        let h = build_hamiltonian(&spec, &ctrl(&[1., 2., 3., 4.], 1.0)).unwrap();
        let d = h.to_dense();
        for i in 0..4usize {
            for j in 0..4 {
                let want = match i.abs_diff(j) {
                    0 => (i + 1) as f64,
                    1 => 1.0,
                    _ => 0.0,
                };
                assert_eq!(d[(i, j)], want);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let spec = ChainSpec::uniform(3, 0, 2).unwrap();
        assert!(build_hamiltonian(&spec, &ctrl(&[0.0; 4], 1.0)).is_err());
        assert!(ChainSpec::uniform(1, 0, 0).is_err());
        assert!(ChainSpec::uniform(3, 0, 3).is_err());
        assert!(Controller::new(vec![10.5], 1.0).is_err());
        assert!(Controller::new(vec![0.0], 0.0).is_err());
        assert!(Controller::new(vec![0.0], 30.5).is_err());
    }

    #[test]
    fn three_chain_spectrum() {
        // lambda^3 - 2 lambda = 0
        let h = Hamiltonian::from_parts(vec![0.0; 3], vec![1.0; 2]).unwrap();
        let es = eigendecompose(&h);
        assert_abs_diff_eq!(es.eigenvalues[0], -SQRT_2, epsilon = 1e-13);
        assert_abs_diff_eq!(es.eigenvalues[1], 0.0, epsilon = 1e-13);
        assert_abs_diff_eq!(es.eigenvalues[2], SQRT_2, epsilon = 1e-13);
    }

    #[test]
    fn single_site_diagnostic() {
        let h = Hamiltonian::from_parts(vec![2.5], vec![]).unwrap();
        let es = eigendecompose(&h);
        assert_eq!(es.eigenvalues, vec![2.5]);
        assert_abs_diff_eq!(es.eigenvectors[(0, 0)].abs(), 1.0);
    }

    #[test]
    fn perfect_transfer_in_uniform_three_chain() {
        let spec = ChainSpec::uniform(3, 0, 2).unwrap();
        let f = fidelity(&spec, &ctrl(&[0.0; 3], PI / SQRT_2)).unwrap();
        assert_abs_diff_eq!(f, 1.0, epsilon = 1e-10);

        let h = build_hamiltonian(&spec, &ctrl(&[0.0; 3], 1.0)).unwrap();
        let out = evolve_state(&eigendecompose(&h), PI / SQRT_2, &basis_state(3, 0)).unwrap();
        assert_abs_diff_eq!(out[2].norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn endpoint_amplitude_matches_closed_form() {
        // <2|U(t)|0> = (cos(sqrt2 t) - 1) / 2 for the uniform 3-chain
        let h = Hamiltonian::from_parts(vec![0.0; 3], vec![1.0; 2]).unwrap();
        let es = eigendecompose(&h);
        for &t in &[0.1, 0.7, 1.9, 4.4, 12.0] {
            let a = transfer_amplitude(&es, 0, 2, t);
            assert_abs_diff_eq!(a.re, 0.5 * (SQRT_2 * t).cos() - 0.5, epsilon = 1e-12);
            assert_abs_diff_eq!(a.im, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_time_is_identity() {
        let h = Hamiltonian::from_parts(vec![0.4, -1.0, 3.0], vec![1.0, 0.5]).unwrap();
        let es = eigendecompose(&h);
        let psi = basis_state(3, 1);
        let out = evolve_state(&es, 0.0, &psi).unwrap();
        for (a, b) in out.iter().zip(&psi) {
            assert_abs_diff_eq!((a - b).norm(), 0.0, epsilon = 1e-14);
        }
        assert_abs_diff_eq!(transfer_fidelity(&h, 0, 2, 1e-12), 0.0, epsilon = 1e-20);
        assert_abs_diff_eq!(transfer_fidelity(&h, 1, 1, 1e-12), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn evolve_rejects_bad_input() {
        let es = eigendecompose(&Hamiltonian::zeros(2));
        let bad = vec![Complex64::new(1.0, 0.0), Complex64::new(1.0, 0.0)];
        assert!(evolve_state(&es, 1.0, &bad).is_err());
        assert!(evolve_state(&es, -1.0, &basis_state(2, 0)).is_err());
        assert!(evolve_state(&es, 1.0, &basis_state(3, 0)).is_err());
    }

    #[test]
    fn gradient_vanishes_at_zero_time() {
        let spec = ChainSpec::uniform(4, 0, 2).unwrap();
        let g = fidelity_gradient(&spec, &ctrl(&[1.0, -2.0, 0.5, 3.0], 1e-9)).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-12), "{g:?}");
    }

    #[test]
    fn gradient_is_mirror_symmetric_for_symmetric_transfer() {
        let spec = ChainSpec::uniform(3, 0, 2).unwrap();
        let g = fidelity_gradient(&spec, &ctrl(&[0.0; 3], 1.3)).unwrap();
        assert_abs_diff_eq!(g[0], g[2], epsilon = 1e-12);
        // Central differences agree with the analytic values.
        let h = 1e-5;
        for i in 0..3 {
            let mut p = vec![0.0; 3];
            p[i] = h;
            let fp = fidelity(&spec, &ctrl(&p, 1.3)).unwrap();
            p[i] = -h;
            let fm = fidelity(&spec, &ctrl(&p, 1.3)).unwrap();
            assert_abs_diff_eq!(g[i], (fp - fm) / (2.0 * h), epsilon = 1e-8);
        }
    }

    #[test]
    fn degenerate_spectrum_uses_confluent_limit() {
        // Decoupled chain has degenerate eigenvalues; the coupling derivative
        // must still match central differences.
        let h0 = Hamiltonian::from_parts(vec![0.0; 3], vec![0.0, 1.0]).unwrap();
        let es = eigendecompose(&h0);
        let grad = transfer_gradient(&es, 1, 2, 0.8);
        let step = 1e-6;
        let hp = Hamiltonian::from_parts(vec![step, 0.0, 0.0], vec![0.0, 1.0]).unwrap();
        let hm = Hamiltonian::from_parts(vec![-step, 0.0, 0.0], vec![0.0, 1.0]).unwrap();
        let fd = (transfer_fidelity(&hp, 1, 2, 0.8) - transfer_fidelity(&hm, 1, 2, 0.8)) / (2.0 * step);
        assert_abs_diff_eq!(grad.diagonal[0], fd, epsilon = 1e-8);
    }
}
