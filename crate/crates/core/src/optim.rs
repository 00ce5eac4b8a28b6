//! Deterministic minimization of the quadratic loss
//! `L(W) = (A_W − A*)ᵀ Σ (A_W − A*)` with an L-BFGS quasi-Newton method and a
//! strong-Wolfe line search.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archzoo::{ArchError, Manifold};
use crate::covkit::{CovarianceMatrix, ExactPredictor};
use crate::linalg::{kron_identity, repeat_entries, sup_norm};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error("shape mismatch: manifold has {manifold} coefficients, task has {task}")]
    ShapeMismatch { manifold: usize, task: usize },
    #[error("no restart reached the gradient tolerance (best grad {grad_norm:e} > {tolerance:e})")]
    DidNotConverge { grad_norm: f64, tolerance: f64 },
    #[error("invalid fit config: {0}")]
    InvalidConfig(String),
}

/// The quadratic prediction task: covariance of the model inputs, the exact
/// predictor, and its residual variance.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticTask {
    pub sigma: DMatrix<f64>,
    pub target: DVector<f64>,
    pub v_star: f64,
}

impl QuadraticTask {
    pub fn new(sigma: DMatrix<f64>, target: DVector<f64>, v_star: f64) -> Self {
        Self {
            sigma,
            target,
            v_star,
        }
    }

    pub fn from_predictor(cov: &CovarianceMatrix, pred: &ExactPredictor) -> Self {
        Self::new(cov.sigma.clone(), pred.a_star.clone(), pred.v_star)
    }

    /// Task over `d` independent copies of the process, predicting the sum of
    /// their next samples. `Σ` lifts to `Σ ⊗ I_d` and the target to `A* ⊗ 1_d`.
    pub fn lifted(cov: &CovarianceMatrix, pred: &ExactPredictor, d: usize) -> Self {
        Self::new(
            kron_identity(&cov.sigma, d),
            repeat_entries(&pred.a_star, d),
            pred.v_star * d as f64,
        )
    }

    pub fn dim(&self) -> usize {
        self.target.len()
    }

    pub fn loss_at(&self, a: &DVector<f64>) -> f64 {
        let x = a - &self.target;
        x.dot(&(&self.sigma * &x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub max_iterations: usize,
    /// Relative tolerance: a run terminates once
    /// `‖∂L/∂W‖_∞ ≤ gradient_tolerance · (1 + L(W_init))`.
    pub gradient_tolerance: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iterations: 5000,
            gradient_tolerance: 1e-9,
            restarts: 8,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.gradient_tolerance > 0.0) {
            return Err(OptimError::InvalidConfig("tolerance must be > 0".into()));
        }
        if self.restarts == 0 {
            return Err(OptimError::InvalidConfig("restarts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub w_hat: DVector<f64>,
    pub a_hat: DVector<f64>,
    pub loss: f64,
    /// `v* + L`.
    pub residual_variance: f64,
    pub grad_norm: f64,
    /// Absolute gradient tolerance used by the selected run.
    pub tolerance: f64,
    pub converged: bool,
    pub iterations: usize,
    pub best_restart: usize,
    pub restart_losses: Vec<f64>,
}

impl FitResult {
    pub fn ensure_converged(&self) -> Result<&Self, OptimError> {
        if self.converged {
            Ok(self)
        } else {
            Err(OptimError::DidNotConverge {
                grad_norm: self.grad_norm,
                tolerance: self.tolerance,
            })
        }
    }
}

fn check_shapes(m: &dyn Manifold, task: &QuadraticTask) -> Result<(), OptimError> {
    if m.coefficient_len() != task.dim() {
        return Err(OptimError::ShapeMismatch {
            manifold: m.coefficient_len(),
            task: task.dim(),
        });
    }
    Ok(())
}

/// `L = XᵀΣX` and `∂L/∂W = 2 (∂A/∂W)ᵀ Σ X` with `X = A_W − A*`.
pub fn loss_and_gradient(
    m: &dyn Manifold,
    task: &QuadraticTask,
    w: &DVector<f64>,
) -> Result<(f64, DVector<f64>), OptimError> {
    check_shapes(m, task)?;
    let x = m.coefficients(w)? - &task.target;
    let sx = &task.sigma * &x;
    let loss = x.dot(&sx);
    let grad = m.vjp(w, &sx)? * 2.0;
    Ok((loss, grad))
}

/// Outcome of a single quasi-Newton run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub w: DVector<f64>,
    pub loss: f64,
    pub grad_norm: f64,
    pub tolerance: f64,
    pub iterations: usize,
    pub converged: bool,
}

const MEMORY: usize = 20;
const C1: f64 = 1e-4;
const C2: f64 = 0.9;
const MAX_LINE_SEARCH: usize = 40;

struct Objective<'a> {
    m: &'a dyn Manifold,
    task: &'a QuadraticTask,
}

impl Objective<'_> {
    fn eval(&self, w: &DVector<f64>) -> (f64, DVector<f64>) {
        // Shapes are checked once up front; evaluation itself cannot fail.
        loss_and_gradient(self.m, self.task, w).expect("shapes validated")
    }
}

struct Point {
    w: DVector<f64>,
    f: f64,
    g: DVector<f64>,
}

/// Strong-Wolfe line search (bracketing + zoom with safeguarded cubic
/// interpolation). Function comparisons allow a few ulps of slack so
/// the search still terminates once the loss is resolved to rounding.
fn line_search(obj: &Objective<'_>, x: &Point, dir: &DVector<f64>, alpha0: f64) -> Option<Point> {
    let phi0 = x.f;
    let dphi0 = x.g.dot(dir);
    if !(dphi0 < 0.0) {
        return None;
    }
    let slack = 8.0 * f64::EPSILON * phi0.abs().max(f64::MIN_POSITIVE);
    let eval = |alpha: f64| {
        let w = &x.w + dir * alpha;
        let (f, g) = obj.eval(&w);
        let dphi = g.dot(dir);
        (Point { w, f, g }, dphi)
    };
    let armijo = |alpha: f64, f: f64| f <= phi0 + C1 * alpha * dphi0 + slack;
    let curvature = |dphi: f64| dphi.abs() <= -C2 * dphi0;

    let mut a_prev = 0.0;
    let mut f_prev = phi0;
    let mut d_prev = dphi0;
    let mut alpha = alpha0;
    for i in 0..MAX_LINE_SEARCH {
        let (p, dphi) = eval(alpha);
        if !p.f.is_finite() {
            alpha = 0.5 * (a_prev + alpha);
            continue;
        }
        if !armijo(alpha, p.f) || (i > 0 && p.f >= f_prev + slack) {
            return zoom(&eval, &armijo, &curvature, (a_prev, f_prev, d_prev), (alpha, p.f, dphi));
        }
        if curvature(dphi) {
            return Some(p);
        }
        if dphi >= 0.0 {
            return zoom(&eval, &armijo, &curvature, (alpha, p.f, dphi), (a_prev, f_prev, d_prev));
        }
        a_prev = alpha;
        f_prev = p.f;
        d_prev = dphi;
        alpha *= 2.0;
    }
    None
}

fn cubic_minimizer(a: (f64, f64, f64), b: (f64, f64, f64)) -> Option<f64> {
    let (x0, f0, d0) = a;
    let (x1, f1, d1) = b;
    let d1_ = d0 + d1 - 3.0 * (f0 - f1) / (x0 - x1);
    let disc = d1_ * d1_ - d0 * d1;
    if !(disc >= 0.0) {
        return None;
    }
    let d2 = (x1 - x0).signum() * disc.sqrt();
    let t = x1 - (x1 - x0) * (d1 + d2 - d1_) / (d1 - d0 + 2.0 * d2);
    t.is_finite().then_some(t)
}

fn zoom<E, A, C>(
    eval: &E,
    armijo: &A,
    curvature: &C,
    mut lo: (f64, f64, f64),
    mut hi: (f64, f64, f64),
) -> Option<Point>
where
    E: Fn(f64) -> (Point, f64),
    A: Fn(f64, f64) -> bool,
    C: Fn(f64) -> bool,
{
    let mut best: Option<Point> = None;
    for _ in 0..MAX_LINE_SEARCH {
        let (left, right) = if lo.0 < hi.0 { (lo.0, hi.0) } else { (hi.0, lo.0) };
        let width = right - left;
        if width <= 1e-16 * right.abs().max(1e-300) {
            break;
        }
        let mut alpha = cubic_minimizer(lo, hi).unwrap_or(0.5 * (left + right));
        let margin = 0.1 * width;
        if !(alpha > left + margin && alpha < right - margin) {
            alpha = 0.5 * (left + right);
        }
        let (p, dphi) = eval(alpha);
        if !armijo(alpha, p.f) || p.f >= lo.1 {
            hi = (alpha, p.f, dphi);
        } else {
            if curvature(dphi) {
                return Some(p);
            }
            if dphi * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
            }
            lo = (alpha, p.f, dphi);
            best = Some(p);
        }
    }
    // Interval collapsed: accept the best sufficient-decrease point, if any.
    best
}

/// Runs L-BFGS from `w0` until `‖∇L‖_∞ ≤ tol_rel · (1 + L(w0))` or the
/// iteration budget is exhausted.
pub fn minimize(
    m: &dyn Manifold,
    task: &QuadraticTask,
    w0: DVector<f64>,
    max_iterations: usize,
    tol_rel: f64,
) -> Result<RunOutcome, OptimError> {
    check_shapes(m, task)?;
    if w0.len() != m.param_count() {
        return Err(ArchError::ShapeMismatch {
            expected: m.param_count(),
            got: w0.len(),
        }
        .into());
    }
    let obj = Objective { m, task };
    let (f, g) = obj.eval(&w0);
    let tolerance = tol_rel * (1.0 + f);
    let mut x = Point { w: w0, f, g };
    let mut history: std::collections::VecDeque<(DVector<f64>, DVector<f64>, f64)> =
        std::collections::VecDeque::with_capacity(MEMORY);
    let mut iterations = 0;
    let mut failures = 0;
    let newton_ok = m.param_count() <= NEWTON_MAX_PARAMS;
    let budget = if newton_ok {
        max_iterations.min(NEWTON_HANDOFF)
    } else {
        max_iterations
    };

    while iterations < budget {
        if sup_norm(&x.g) <= tolerance {
            break;
        }
        iterations += 1;
        let dir = two_loop(&x.g, &history);
        let (dir, alpha0) = if x.g.dot(&dir) < 0.0 && !history.is_empty() {
            (dir, 1.0)
        } else {
            history.clear();
            let sd = -&x.g;
            let scale = (1.0 / x.g.norm()).min(1.0);
            (sd, scale)
        };
        match line_search(&obj, &x, &dir, alpha0) {
            Some(next) => {
                failures = 0;
                let s = &next.w - &x.w;
                let y = &next.g - &x.g;
                let sy = s.dot(&y);
                if sy > 1e-14 * s.norm() * y.norm() {
                    if history.len() == MEMORY {
                        history.pop_front();
                    }
                    history.push_back((s, y, 1.0 / sy));
                }
                x = next;
            }
            None => {
                failures += 1;
                history.clear();
                if failures >= 2 {
                    break;
                }
            }
        }
    }
    if sup_norm(&x.g) > tolerance && newton_ok {
        let steps_left = max_iterations.saturating_sub(iterations).max(LM_MIN_STEPS);
        let (polished, steps) = lm_polish(&obj, x, tolerance, steps_left);
        x = polished;
        iterations += steps;
    }
    if sup_norm(&x.g) > tolerance && m.param_count() <= FD_NEWTON_MAX_PARAMS {
        let (polished, steps) = newton_polish(&obj, x, tolerance);
        x = polished;
        iterations += steps;
    }
    let grad_norm = sup_norm(&x.g);
    Ok(RunOutcome {
        converged: grad_norm <= tolerance,
        w: x.w,
        loss: x.f,
        grad_norm,
        tolerance,
        iterations,
    })
}

/// Largest parameter count for which the Newton polish phase is attempted.
pub const NEWTON_MAX_PARAMS: usize = 1200;
const NEWTON_STEPS: usize = 60;
/// The finite-difference Newton fallback is only tried on models this small.
const FD_NEWTON_MAX_PARAMS: usize = 300;
/// Quasi-Newton iterations spent before handing a stalled run to Newton.
const NEWTON_HANDOFF: usize = 1000;

/// Levenberg–Marquardt gets the rest of the iteration budget, at least this.
const LM_MIN_STEPS: usize = 200;

/// Solves `(JᵀΣJ + μI) d = −JᵀΣX`, through the smaller of the two normal
/// systems (the coefficient-side form uses `Jᵀ(ΣJJᵀ + μI)⁻¹ΣX`).
fn lm_step(jac: &DMatrix<f64>, gn: &GaussNewton, sx: &DVector<f64>, mu: f64) -> Option<DVector<f64>> {
    match gn {
        GaussNewton::Params(h) => {
            let mut a = h.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += mu;
            }
            let rhs = -(jac.tr_mul(sx));
            a.cholesky().map(|c| c.solve(&rhs))
        }
        GaussNewton::Coefficients(sg) => {
            let mut a = sg.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += mu;
            }
            a.lu().solve(sx).map(|y| -(jac.tr_mul(&y)))
        }
    }
}

enum GaussNewton {
    /// `JᵀΣJ`, used when `p ≤ n·d`.
    Params(DMatrix<f64>),
    /// `ΣJJᵀ`, used otherwise.
    Coefficients(DMatrix<f64>),
}

/// Levenberg–Marquardt on the weighted residual `A_W − A*` with a Marquardt
/// damping schedule.
fn lm_polish(obj: &Objective<'_>, mut x: Point, tolerance: f64, max_steps: usize) -> (Point, usize) {
    let (m, task) = (obj.m, obj.task);
    let mut mu = -1.0;
    let mut nu = 2.0;
    let mut steps = 0;
    while steps < max_steps && sup_norm(&x.g) > tolerance {
        steps += 1;
        let (Ok(jac), Ok(a)) = (m.jacobian(&x.w), m.coefficients(&x.w)) else {
            break;
        };
        let resid = a - &task.target;
        let sx = &task.sigma * &resid;
        let sj = &task.sigma * &jac;
        let gn = if jac.ncols() <= jac.nrows() {
            GaussNewton::Params(jac.tr_mul(&sj))
        } else {
            GaussNewton::Coefficients(&sj * jac.transpose())
        };
        if mu < 0.0 {
            let diag = (0..jac.ncols())
                .map(|j| jac.column(j).dot(&sj.column(j)))
                .fold(0.0f64, f64::max);
            mu = 1e-6 * diag.max(f64::MIN_POSITIVE);
        }
        let mut accepted = false;
        for _ in 0..30 {
            let Some(d) = lm_step(&jac, &gn, &sx, mu) else {
                mu *= nu;
                nu *= 2.0;
                continue;
            };
            let w = &x.w + &d;
            let (f, g) = obj.eval(&w);
            let jd = &jac * &d;
            let predicted = -(2.0 * jd.dot(&sx) + jd.dot(&(&task.sigma * &jd)));
            if f.is_finite() && f < x.f {
                let rho = (x.f - f) / predicted.max(f64::MIN_POSITIVE);
                if rho > 0.75 {
                    mu /= 10.0;
                } else if rho > 0.25 {
                    mu /= 3.0;
                }
                nu = 2.0;
                x = Point { w, f, g };
                accepted = true;
                break;
            }
            mu *= nu;
            nu *= 2.0;
        }
        if !accepted {
            break;
        }
    }
    (x, steps)
}

/// Hessian by central differences of the analytic gradient, symmetrized.
fn fd_hessian(obj: &Objective<'_>, w: &DVector<f64>) -> DMatrix<f64> {
    let p = w.len();
    let mut h = DMatrix::zeros(p, p);
    for j in 0..p {
        let step = 1e-5 * (1.0 + w[j].abs());
        let mut wp = w.clone();
        wp[j] += step;
        let mut wm = w.clone();
        wm[j] -= step;
        let col = (obj.eval(&wp).1 - obj.eval(&wm).1) / (2.0 * step);
        h.set_column(j, &col);
    }
    (&h + h.transpose()) * 0.5
}

/// Regularized Newton iterations used once L-BFGS stalls on an
/// ill-conditioned optimum. The step inverts `|λ| + μ` on the Hessian
/// eigenbasis, so it is always a descent direction; flat directions (weight
/// rescalings) receive no step because the gradient has no component there.
fn newton_polish(obj: &Objective<'_>, mut x: Point, tolerance: f64) -> (Point, usize) {
    let mut steps = 0;
    while steps < NEWTON_STEPS && sup_norm(&x.g) > tolerance {
        steps += 1;
        let h = fd_hessian(obj, &x.w);
        let (vals, vecs) = crate::linalg::sym_eigen_desc(&h);
        let scale = vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let mu = 1e-12 * scale.max(f64::MIN_POSITIVE);
        let coords = vecs.tr_mul(&x.g);
        let scaled = DVector::from_fn(coords.len(), |k, _| coords[k] / (vals[k].abs() + mu));
        let dir = -(&vecs * scaled);
        match line_search(obj, &x, &dir, 1.0) {
            Some(next) => x = next,
            None => break,
        }
    }
    (x, steps)
}

fn two_loop(g: &DVector<f64>, history: &std::collections::VecDeque<(DVector<f64>, DVector<f64>, f64)>) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * s.dot(&q);
        q.axpy(-a, y, 1.0);
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        q *= s.dot(y) / y.dot(y);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * y.dot(&q);
        q.axpy(a - b, s, 1.0);
    }
    -q
}

/// Seed of restart `index`, derived from the base seed.
pub fn restart_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn result_from_run(
    m: &dyn Manifold,
    task: &QuadraticTask,
    run: RunOutcome,
    best_restart: usize,
    restart_losses: Vec<f64>,
) -> Result<FitResult, OptimError> {
    let a_hat = m.coefficients(&run.w)?;
    Ok(FitResult {
        residual_variance: task.v_star + run.loss,
        a_hat,
        w_hat: run.w,
        loss: run.loss,
        grad_norm: run.grad_norm,
        tolerance: run.tolerance,
        converged: run.converged,
        iterations: run.iterations,
        best_restart,
        restart_losses,
    })
}

/// Best of `cfg.restarts` independent runs from random initializations.
/// Restarts run in parallel. Selection takes the lowest loss among converged
/// runs (all runs if none converged), ties broken by the lowest restart index,
/// so the result only depends on `cfg`.
pub fn fit(m: &dyn Manifold, task: &QuadraticTask, cfg: &FitConfig) -> Result<FitResult, OptimError> {
    let runs = run_restarts(m, task, cfg)?;
    let losses: Vec<f64> = runs.iter().map(|r| r.loss).collect();
    let any_converged = runs.iter().any(|r| r.converged);
    let best = (0..runs.len())
        .filter(|&i| runs[i].converged || !any_converged)
        .min_by(|&a, &b| {
            losses[a]
                .partial_cmp(&losses[b])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        })
        .expect("at least one restart");
    let run = runs.into_iter().nth(best).expect("index in range");
    result_from_run(m, task, run, best, losses)
}

/// Every restart of [`fit`] as its own result, in restart order.
pub fn fit_restarts(
    m: &dyn Manifold,
    task: &QuadraticTask,
    cfg: &FitConfig,
) -> Result<Vec<FitResult>, OptimError> {
    let runs = run_restarts(m, task, cfg)?;
    let losses: Vec<f64> = runs.iter().map(|r| r.loss).collect();
    runs.into_iter()
        .enumerate()
        .map(|(i, run)| result_from_run(m, task, run, i, losses.clone()))
        .collect()
}

fn run_restarts(m: &dyn Manifold, task: &QuadraticTask, cfg: &FitConfig) -> Result<Vec<RunOutcome>, OptimError> {
    cfg.validate()?;
    check_shapes(m, task)?;
    (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(restart_seed(cfg.seed, r));
            let w0 = m.init_params(&mut rng);
            minimize(m, task, w0, cfg.max_iterations, cfg.gradient_tolerance)
        })
        .collect()
}

/// Single run from a given starting point.
pub fn fit_from(
    m: &dyn Manifold,
    task: &QuadraticTask,
    w0: DVector<f64>,
    cfg: &FitConfig,
) -> Result<FitResult, OptimError> {
    cfg.validate()?;
    let run = minimize(m, task, w0, cfg.max_iterations, cfg.gradient_tolerance)?;
    let loss = run.loss;
    result_from_run(m, task, run, 0, vec![loss])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archzoo::{DilationPattern, ModelManifold, ScaledDirection};
    use crate::covkit::{build_covariance, exact_predictor, AutocovarianceSpec};

    fn power_task(n: usize) -> QuadraticTask {
        let cov = build_covariance(&AutocovarianceSpec::power_law(1.0, n)).unwrap();
        let pred = exact_predictor(&cov).unwrap();
        QuadraticTask::from_predictor(&cov, &pred)
    }

    #[test]
    fn optimum_has_zero_loss_and_gradient() {
        let task = power_task(8);
        let m = ModelManifold::fully_connected(8, 1).unwrap();
        let (loss, grad) = loss_and_gradient(&m, &task, &task.target).unwrap();
        assert!(loss.abs() < 1e-28);
        assert!(grad.norm() < 1e-14);
    }

    #[test]
    fn scalar_least_squares_closed_form() {
        let a_star = DVector::from_column_slice(&[0.5, -0.25, 0.125, 1.0]);
        let a0 = DVector::from_column_slice(&[1.0, 2.0, 0.0, -1.0]);
        let task = QuadraticTask::new(DMatrix::identity(4, 4), a_star.clone(), 0.3);
        let m = ScaledDirection::new(a0.clone(), 1);
        let w_opt = a0.dot(&a_star) / a0.norm_squared();
        let fit = fit(&m, &task, &FitConfig::default().with_restarts(2)).unwrap();
        assert!(fit.converged);
        assert!((fit.w_hat[0] - w_opt).abs() < 1e-8, "{} vs {w_opt}", fit.w_hat[0]);
        let expected_loss = (&a0 * w_opt - &a_star).norm_squared();
        assert!((fit.loss - expected_loss).abs() < 1e-12);
        assert!((fit.residual_variance - (0.3 + fit.loss)).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let task = power_task(16);
        let m = ModelManifold::hierarchical(4, 2, 2, 1, DilationPattern::Exponential).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = m.init_params(&mut rng);
        let (_, grad) = loss_and_gradient(&m, &task, &w).unwrap();
        for j in 0..m.param_count() {
            let h = 1e-6 * (1.0 + w[j].abs());
            let mut wp = w.clone();
            wp[j] += h;
            let mut wm = w.clone();
            wm[j] -= h;
            let fd = (loss_and_gradient(&m, &task, &wp).unwrap().0
                - loss_and_gradient(&m, &task, &wm).unwrap().0)
                / (2.0 * h);
            let rel = (fd - grad[j]).abs() / grad[j].abs().max(1e-6);
            assert!(rel < 1e-5, "param {j}: fd {fd} vs {}", grad[j]);
        }
    }

    #[test]
    fn fully_connected_reaches_exact_model() {
        let task = power_task(16);
        let m = ModelManifold::fully_connected(16, 1).unwrap();
        let fit = fit(&m, &task, &FitConfig::default().with_restarts(2)).unwrap();
        assert!(fit.converged);
        assert!(fit.loss <= 1e-10);
        assert!((&fit.a_hat - &task.target).amax() < 1e-6);
    }

    #[test]
    fn restarts_are_deterministic() {
        let task = power_task(16);
        let m = ModelManifold::hierarchical(4, 2, 2, 1, DilationPattern::Exponential).unwrap();
        let cfg = FitConfig::default().with_seed(5).with_restarts(4);
        let a = fit(&m, &task, &cfg).unwrap();
        let b = fit(&m, &task, &cfg).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.restart_losses), bits(&b.restart_losses));
        assert_eq!(a.best_restart, b.best_restart);
    }

    #[test]
    fn converged_fit_is_stationary() {
        let task = power_task(32);
        let m = ModelManifold::hierarchical(5, 2, 2, 1, DilationPattern::Exponential).unwrap();
        let fit = fit(&m, &task, &FitConfig::default().with_restarts(3)).unwrap();
        assert!(fit.converged, "grad {} tol {}", fit.grad_norm, fit.tolerance);
        let jac = m.jacobian(&fit.w_hat).unwrap();
        let stationarity = jac.tr_mul(&(&task.sigma * (&fit.a_hat - &task.target)));
        assert!(sup_norm(&stationarity) <= fit.tolerance);
        assert!(fit.residual_variance >= task.v_star - 1e-9);
    }

    #[test]
    fn invalid_config_rejected() {
        let task = power_task(4);
        let m = ModelManifold::fully_connected(4, 1).unwrap();
        let mut cfg = FitConfig::default();
        cfg.restarts = 0;
        assert!(matches!(fit(&m, &task, &cfg), Err(OptimError::InvalidConfig(_))));
        cfg.restarts = 1;
        cfg.gradient_tolerance = 0.0;
        assert!(matches!(fit(&m, &task, &cfg), Err(OptimError::InvalidConfig(_))));
    }

    #[test]
    fn mismatched_task_rejected() {
        let task = power_task(4);
        let m = ModelManifold::fully_connected(8, 1).unwrap();
        assert!(matches!(
            loss_and_gradient(&m, &task, &DVector::zeros(8)),
            Err(OptimError::ShapeMismatch { .. })
        ));
    }
}
