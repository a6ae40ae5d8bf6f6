//! L-BFGS with random restarts on the analytic transfer fidelity.
//!
//! The local solver is a textbook limited-memory BFGS: two-loop recursion
//! for the search direction and a strong-Wolfe line search (bracketing and
//! zoom with safeguarded cubic interpolation). Box constraints are handled
//! by projecting every trial point onto the admissible controller box.
//!
//! The restart driver draws uniform controllers, maximizes fidelity from
//! each, and stops as soon as an evaluation reaches the threshold. Every
//! objective evaluation is one metered environment call.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{fidelity, Controller, DELTA_LIMIT, TIME_LIMIT};
use crate::env::{random_controller, EnvConfig, SpinChainEnv, TIME_FLOOR};
use crate::error::{Error, Result};

/// Pairs with `s^T y` at or below this are not stored.
pub const CURVATURE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub c1: f64,
    pub c2: f64,
    pub grad_tol: f64,
    pub max_iters: usize,
    pub max_restarts: usize,
    pub threshold: f64,
    /// Objective values are noisy: the line search falls back to halving
    /// instead of abandoning the start, and the threshold is tested against
    /// the perceived fidelity.
    pub noisy_mode: bool,
    /// Cap on metered environment calls over all restarts.
    pub max_evaluations: u64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            c1: 1e-4,
            c2: 0.9,
            grad_tol: 1e-8,
            max_iters: 500,
            max_restarts: 100,
            threshold: 0.99,
            noisy_mode: false,
            max_evaluations: 1_000_000,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::Config(format!(
                "Wolfe constants need 0 < c1 < c2 < 1, got {} and {}",
                self.c1, self.c2
            )));
        }
        if self.memory == 0 {
            return Err(Error::Config("L-BFGS memory must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1]", self.threshold)));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Bounded history of `(s, y)` correction pairs.
#[derive(Debug, Clone, Default)]
pub struct History {
    pairs: VecDeque<(Vec<f64>, Vec<f64>)>,
    memory: usize,
}

impl History {
    pub fn new(memory: usize) -> Self {
        Self {
            pairs: VecDeque::with_capacity(memory),
            memory,
        }
    }

    /// Stores the pair if it satisfies the curvature condition; returns
    /// whether it was kept.
    pub fn push(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        if dot(&s, &y) <= CURVATURE_TOL {
            return false;
        }
        if self.pairs.len() == self.memory {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y));
        true
    }

    pub fn clear(&mut self) {
        self.pairs.clear();
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> impl DoubleEndedIterator<Item = &(Vec<f64>, Vec<f64>)> {
        self.pairs.iter()
    }
}

/// Two-loop recursion: returns `-H grad` for the inverse-Hessian estimate
/// built from the stored pairs (oldest first). Pairs violating the
/// curvature condition are skipped; an empty history yields `-grad`.
pub fn two_loop_direction<'a, I>(pairs: I, grad: &[f64]) -> Vec<f64>
where
    I: IntoIterator<Item = &'a (Vec<f64>, Vec<f64>)>,
{
    let kept: Vec<(&[f64], &[f64], f64)> = pairs
        .into_iter()
        .filter_map(|(s, y)| {
            let sy = dot(s, y);
            (sy > CURVATURE_TOL).then(|| (s.as_slice(), y.as_slice(), 1.0 / sy))
        })
        .collect();
    let mut q = grad.to_vec();
    let mut alpha = vec![0.0; kept.len()];
    for (i, (s, y, rho)) in kept.iter().enumerate().rev() {
        alpha[i] = rho * dot(s, &q);
        for (qj, yj) in q.iter_mut().zip(y.iter()) {
            *qj -= alpha[i] * yj;
        }
    }
    if let Some((s, y, _)) = kept.last() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for (i, (s, y, rho)) in kept.iter().enumerate() {
        let beta = rho * dot(y, &q);
        for (qj, sj) in q.iter_mut().zip(s.iter()) {
            *qj += (alpha[i] - beta) * sj;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// A differentiable function to minimize.
pub trait Objective {
    /// Value and gradient at `x`.
    fn evaluate(&mut self, x: &[f64]) -> (f64, Vec<f64>);

    /// Polled after every evaluation; `true` aborts the solver.
    fn should_stop(&self) -> bool {
        false
    }
}

impl<F: FnMut(&[f64]) -> (f64, Vec<f64>)> Objective for F {
    fn evaluate(&mut self, x: &[f64]) -> (f64, Vec<f64>) {
        self(x)
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    /// The admissible controller box for `n_spins` biases plus readout time.
    pub fn controller(n_spins: usize) -> Self {
        let mut lower = vec![-DELTA_LIMIT; n_spins];
        let mut upper = vec![DELTA_LIMIT; n_spins];
        lower.push(TIME_FLOOR);
        upper.push(TIME_LIMIT);
        Self { lower, upper }
    }

    pub fn project(&self, x: &mut [f64]) {
        for ((v, lo), hi) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*lo, *hi);
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(&self.lower)
            .zip(&self.upper)
            .all(|((v, lo), hi)| *lo <= *v && *v <= *hi)
    }

    /// Gradient with components removed where the bound blocks descent.
    pub fn projected_gradient(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(g)
            .zip(self.lower.iter().zip(&self.upper))
            .map(|((v, gi), (lo, hi))| {
                if (*v <= *lo && *gi > 0.0) || (*v >= *hi && *gi < 0.0) {
                    0.0
                } else {
                    *gi
                }
            })
            .collect()
    }
}

/// Accepted line-search point.
#[derive(Debug, Clone, PartialEq)]
pub struct LineStep {
    pub step: f64,
    pub x: Vec<f64>,
    pub f: f64,
    pub g: Vec<f64>,
    /// `false` when the noisy-mode halving fallback produced the step.
    pub wolfe: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LineSearchError {
    /// No acceptable step within the iteration budget.
    Failed,
    NonFinite,
    Stopped,
}

struct LineContext<'a, O: Objective> {
    obj: &'a mut O,
    x: &'a [f64],
    dir: &'a [f64],
    bounds: Option<&'a Bounds>,
    evaluations: usize,
}

impl<O: Objective> LineContext<'_, O> {
    fn eval(&mut self, step: f64) -> std::result::Result<(Vec<f64>, f64, Vec<f64>, f64), LineSearchError> {
        let mut x: Vec<f64> = self.x.iter().zip(self.dir).map(|(a, d)| a + step * d).collect();
        if let Some(b) = self.bounds {
            b.project(&mut x);
        }
        let (f, g) = self.obj.evaluate(&x);
        self.evaluations += 1;
        if self.obj.should_stop() {
            return Err(LineSearchError::Stopped);
        }
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(LineSearchError::NonFinite);
        }
        let slope = dot(&g, self.dir);
        Ok((x, f, g, slope))
    }
}

/// Minimizer of the cubic through `(a, fa, da)` and `(b, fb, db)`,
/// safeguarded into the middle of the interval.
fn cubic_step(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let fallback = 0.5 * (a + b);
    if disc < 0.0 {
        return fallback;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let denom = db - da + 2.0 * d2;
    if denom == 0.0 {
        return fallback;
    }
    let t = b - (b - a) * (db + d2 - d1) / denom;
    let margin = 0.1 * (hi - lo);
    if !t.is_finite() || t < lo + margin || t > hi - margin {
        fallback
    } else {
        t
    }
}

/// Strong-Wolfe line search along `dir` from `x` (value `f0`, directional
/// derivative `slope0 < 0`), with an optional halving fallback.
#[allow(clippy::too_many_arguments)]
pub fn line_search<O: Objective>(
    obj: &mut O,
    x: &[f64],
    f0: f64,
    slope0: f64,
    dir: &[f64],
    initial_step: f64,
    bounds: Option<&Bounds>,
    cfg: &LbfgsConfig,
) -> (std::result::Result<LineStep, LineSearchError>, usize) {
    const MAX_TRIALS: usize = 20;
    const HALVINGS: usize = 20;
    let mut ctx = LineContext {
        obj,
        x,
        dir,
        bounds,
        evaluations: 0,
    };
    let sufficient = |step: f64, f: f64| f <= f0 + cfg.c1 * step * slope0;
    let curvature = |slope: f64| slope.abs() <= -cfg.c2 * slope0;

    let mut smallest: Option<LineStep> = None;
    let remember = |smallest: &mut Option<LineStep>, step: f64, x: &Vec<f64>, f: f64, g: &Vec<f64>| {
        if smallest.as_ref().is_none_or(|s| step < s.step) {
            *smallest = Some(LineStep {
                step,
                x: x.clone(),
                f,
                g: g.clone(),
                wolfe: false,
            });
        }
    };

    let result = (|| {
        let mut prev = (0.0, f0, slope0);
        let mut step = initial_step;
        let mut bracket = None;
        for i in 0..MAX_TRIALS {
            let (xn, f, g, slope) = ctx.eval(step)?;
            remember(&mut smallest, step, &xn, f, &g);
            if !sufficient(step, f) || (i > 0 && f >= prev.1) {
                bracket = Some((prev, (step, f, slope)));
                break;
            }
            if curvature(slope) {
                return Ok(LineStep { step, x: xn, f, g, wolfe: true });
            }
            if slope >= 0.0 {
                bracket = Some(((step, f, slope), prev));
                break;
            }
            prev = (step, f, slope);
            step *= 2.0;
        }
        let Some((mut lo, mut hi)) = bracket else {
            return Err(LineSearchError::Failed);
        };
        for _ in 0..MAX_TRIALS {
            let step = cubic_step(lo.0, lo.1, lo.2, hi.0, hi.1, hi.2);
            if (hi.0 - lo.0).abs() < 1e-16 * lo.0.abs().max(1.0) {
                break;
            }
            let (xn, f, g, slope) = ctx.eval(step)?;
            remember(&mut smallest, step, &xn, f, &g);
            if !sufficient(step, f) || f >= lo.1 {
                hi = (step, f, slope);
            } else {
                if curvature(slope) {
                    return Ok(LineStep { step, x: xn, f, g, wolfe: true });
                }
                if slope * (hi.0 - lo.0) >= 0.0 {
                    hi = lo;
                }
                lo = (step, f, slope);
            }
        }
        Err(LineSearchError::Failed)
    })();

    // One secant step towards the exact line minimizer. On a quadratic it
    // lands on it, which keeps the conjugacy of successive directions.
    // Skipped when every evaluation sees a different noise draw.
    let result = match result {
        Ok(acc) if acc.step > 0.0 && !cfg.noisy_mode => {
            let slope = dot(&acc.g, dir);
            let target = acc.step * slope0 / (slope0 - slope);
            if slope.abs() > 1e-3 * slope0.abs() && target.is_finite() && target > 0.0 {
                match ctx.eval(target) {
                    Ok((xn, f, g, s)) if f < acc.f && sufficient(target, f) && curvature(s) => {
                        Ok(LineStep { step: target, x: xn, f, g, wolfe: true })
                    }
                    Ok(_) | Err(LineSearchError::NonFinite) => Ok(acc),
                    Err(e) => Err(e),
                }
            } else {
                Ok(acc)
            }
        }
        other => other,
    };

    let result = match result {
        Err(LineSearchError::Failed) if cfg.noisy_mode => (|| {
            let mut step = initial_step;
            for _ in 0..HALVINGS {
                step *= 0.5;
                let (xn, f, g, _) = ctx.eval(step)?;
                if sufficient(step, f) {
                    return Ok(LineStep { step, x: xn, f, g, wolfe: false });
                }
                remember(&mut smallest, step, &xn, f, &g);
            }
            smallest.clone().ok_or(LineSearchError::Failed)
        })(),
        other => other,
    };
    (result, ctx.evaluations)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LocalStatus {
    Converged,
    MaxIterations,
    LineSearchFailed,
    NonFinite,
    Stopped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: LocalStatus,
    /// Objective at the start point and after every accepted step.
    pub values: Vec<f64>,
}

/// Runs one L-BFGS minimization from `x0`.
pub fn minimize<O: Objective>(
    obj: &mut O,
    x0: Vec<f64>,
    bounds: Option<&Bounds>,
    cfg: &LbfgsConfig,
) -> LocalResult {
    let mut x = x0;
    if let Some(b) = bounds {
        b.project(&mut x);
    }
    let (mut f, mut g) = obj.evaluate(&x);
    let mut evaluations = 1;
    let pg = |x: &[f64], g: &[f64]| match bounds {
        Some(b) => b.projected_gradient(x, g),
        None => g.to_vec(),
    };
    let mut values = vec![f];
    let result = |x, f, g: &[f64], it, ev, status, values| LocalResult {
        x,
        f,
        grad_norm: norm(g),
        iterations: it,
        evaluations: ev,
        status,
        values,
    };
    if obj.should_stop() {
        return result(x, f, &g, 0, evaluations, LocalStatus::Stopped, values);
    }
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return result(x, f, &g, 0, evaluations, LocalStatus::NonFinite, values);
    }

    let mut history = History::new(cfg.memory);
    for iter in 0..cfg.max_iters {
        let active = pg(&x, &g);
        if norm(&active) <= cfg.grad_tol {
            return result(x, f, &active, iter, evaluations, LocalStatus::Converged, values);
        }
        let mut dir = two_loop_direction(history.pairs(), &active);
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            history.clear();
            dir = active.iter().map(|v| -v).collect();
            slope = dot(&g, &dir);
        }
        let initial_step = if history.is_empty() {
            (1.0 / norm(&active)).min(1.0)
        } else {
            1.0
        };
        let (outcome, used) = line_search(obj, &x, f, slope, &dir, initial_step, bounds, cfg);
        evaluations += used;
        match outcome {
            Ok(step) => {
                let s: Vec<f64> = step.x.iter().zip(&x).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = step.g.iter().zip(&g).map(|(a, b)| a - b).collect();
                history.push(s, y);
                x = step.x;
                f = step.f;
                g = step.g;
                values.push(f);
            }
            Err(LineSearchError::Stopped) => {
                return result(x, f, &g, iter + 1, evaluations, LocalStatus::Stopped, values)
            }
            Err(LineSearchError::NonFinite) => {
                return result(x, f, &g, iter + 1, evaluations, LocalStatus::NonFinite, values)
            }
            Err(LineSearchError::Failed) => {
                return result(x, f, &g, iter + 1, evaluations, LocalStatus::LineSearchFailed, values)
            }
        }
    }
    let active = pg(&x, &g);
    result(x, f, &active, cfg.max_iters, evaluations, LocalStatus::MaxIterations, values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimResult {
    pub best_controller: Controller,
    /// Noise-free fidelity of `best_controller`.
    pub best_true_fidelity: f64,
    /// Fidelity the optimizer observed for `best_controller`.
    pub best_perceived: f64,
    pub env_calls: u64,
    pub restarts: usize,
    pub converged: bool,
}

/// Negative fidelity through the metered environment.
struct FidelityObjective<'a, R: Rng + ?Sized> {
    env: &'a mut SpinChainEnv,
    rng: &'a mut R,
    cfg: &'a LbfgsConfig,
    best: Option<(Controller, f64)>,
    hit: bool,
    error: Option<Error>,
}

impl<R: Rng + ?Sized> FidelityObjective<'_, R> {
    fn out_of_budget(&self) -> bool {
        crate::env::Environment::calls_made(&*self.env) >= self.cfg.max_evaluations
    }
}

impl<R: Rng + ?Sized> Objective for FidelityObjective<'_, R> {
    fn evaluate(&mut self, x: &[f64]) -> (f64, Vec<f64>) {
        let ctrl = Controller::from_slice(x);
        match self.env.evaluate_with_gradient(&ctrl, self.rng) {
            Ok(ev) => {
                let score = if self.cfg.noisy_mode {
                    ev.perceived
                } else {
                    fidelity(&self.env.config().spec, &ctrl).unwrap_or(ev.perceived)
                };
                if self.best.as_ref().is_none_or(|(_, b)| ev.perceived > *b) {
                    self.best = Some((ctrl, ev.perceived));
                }
                if score >= self.cfg.threshold {
                    let c = Controller::from_slice(x);
                    self.best = Some((c, ev.perceived));
                    self.hit = true;
                }
                (-ev.perceived, ev.gradient.iter().map(|g| -g).collect())
            }
            Err(e) => {
                self.error = Some(e);
                (f64::NAN, vec![f64::NAN; x.len()])
            }
        }
    }

    fn should_stop(&self) -> bool {
        self.hit || self.error.is_some() || self.out_of_budget()
    }
}

/// Maximizes transfer fidelity with L-BFGS from random starts until an
/// evaluation reaches `cfg.threshold`, the restart cap, or the call budget.
pub fn optimize_with_restarts<R: Rng + ?Sized>(
    env_cfg: &EnvConfig,
    cfg: &LbfgsConfig,
    rng: &mut R,
) -> Result<OptimResult> {
    cfg.validate()?;
    let mut env = SpinChainEnv::new(env_cfg.clone())?;
    let n = env_cfg.spec.n_spins;
    let bounds = Bounds::controller(n);
    let mut best: Option<(Controller, f64)> = None;
    let mut converged = false;
    let mut restarts = 0;

    while restarts < cfg.max_restarts {
        let x0 = random_controller(n, rng).to_vec();
        restarts += 1;
        let mut obj = FidelityObjective {
            env: &mut env,
            rng: &mut *rng,
            cfg,
            best: None,
            hit: false,
            error: None,
        };
        minimize(&mut obj, x0, Some(&bounds), cfg);
        if let Some(e) = obj.error.take() {
            return Err(e);
        }
        let hit = obj.hit;
        let out_of_budget = obj.out_of_budget();
        if let Some((c, p)) = obj.best.take() {
            if hit || best.as_ref().is_none_or(|(_, b)| p > *b) {
                best = Some((c, p));
            }
        }
        if hit {
            converged = true;
            break;
        }
        if out_of_budget {
            break;
        }
    }
    let (best_controller, best_perceived) =
        best.ok_or_else(|| Error::Config("no evaluation was possible within the budget".into()))?;
    Ok(OptimResult {
        best_true_fidelity: fidelity(&env_cfg.spec, &best_controller)?,
        best_controller,
        best_perceived,
        env_calls: crate::env::Environment::calls_made(&env),
        restarts,
        converged,
    })
}

/// Runs L-BFGS from `start` on the exact fidelity until the gradient
/// tolerance, without threshold stopping or metering. Used to settle a
/// controller onto its local maximum.
pub fn polish(env_cfg: &EnvConfig, start: &Controller, cfg: &LbfgsConfig) -> Result<(Controller, f64)> {
    let spec = env_cfg.spec.clone();
    spec.validate()?;
    let bounds = Bounds::controller(spec.n_spins);
    let mut obj = |x: &[f64]| -> (f64, Vec<f64>) {
        let ctrl = Controller::from_slice(x);
        let h = crate::dynamics::build_hamiltonian(&spec, &ctrl).expect("validated spec");
        let es = crate::dynamics::eigendecompose(&h);
        let g = crate::dynamics::transfer_gradient(&es, spec.source, spec.target, ctrl.read_time);
        (-g.fidelity, g.controller_gradient().iter().map(|v| -v).collect())
    };
    let local_cfg = LbfgsConfig {
        noisy_mode: false,
        ..cfg.clone()
    };
    let res = minimize(&mut obj, start.to_vec(), Some(&bounds), &local_cfg);
    let ctrl = Controller::from_slice(&res.x);
    let f = fidelity(&spec, &ctrl)?;
    Ok((ctrl, f))
}
