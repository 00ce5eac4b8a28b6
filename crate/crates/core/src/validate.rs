//! Randomized self-check of the library invariants.
//!
//! [`validate`] runs the capacity axioms, the orthogonal-sum equivalence, the
//! chain rule, Jacobian checks, stationarity, the residual-variance identity
//! and covariance invariants on instances drawn from a fixed seed, and
//! returns one [`CheckResult`] per property.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::archzoo::{DilationPattern, Manifold, ModelManifold};
use crate::capacity::{
    capacity_of, conditional_chain, spatial_cpi, ConstraintBasis, ConstraintMatrix, Subspace,
};
use crate::covkit::{build_covariance, check_ar_stability, exact_predictor, AutocovarianceSpec};
use crate::linalg::{orthonormality_defect, orthonormalize, sym_eigen_desc};
use crate::optim::{fit, loss_and_gradient, FitConfig, QuadraticTask};

/// Testing hook: deliberately corrupt one quantity before it is checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    #[default]
    None,
    /// Adds `1e-3` to one entry of every constraint basis `K` before the
    /// orthonormality check.
    PerturbOrthonormality,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidateOptions {
    pub seed: u64,
    /// Random instances per property.
    pub instances: usize,
    pub fault: Fault,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 200,
            fault: Fault::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Largest violation observed (or a count, see `detail`).
    pub worst: f64,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub seed: u64,
    pub fault: Fault,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn failed(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }
}

fn check(name: &str, worst: f64, tolerance: f64, detail: impl Into<String>) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed: worst <= tolerance,
        worst,
        tolerance,
        detail: detail.into(),
    }
}

pub fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// `n × k` matrix with orthonormal columns, Haar-like via QR of a Gaussian.
pub fn random_orthonormal(rng: &mut impl Rng, n: usize, k: usize) -> DMatrix<f64> {
    loop {
        if let Some(q) = orthonormalize(&gaussian_matrix(rng, n, k)) {
            return q;
        }
    }
}

/// A constraint basis given directly by orthonormal columns.
pub fn basis_from_columns(k: DMatrix<f64>) -> ConstraintBasis {
    let kappa = k.ncols();
    let dim = k.nrows();
    let mut spectrum = vec![1.0; kappa];
    spectrum.resize(dim, 0.0);
    ConstraintBasis {
        k,
        spectrum,
        threshold: 0.5,
        kappa,
    }
}

fn subspace(s: DMatrix<f64>) -> Subspace {
    Subspace { s, label: String::new() }
}

fn kappa(k: &DMatrix<f64>, s: &DMatrix<f64>) -> f64 {
    capacity_of(&basis_from_columns(k.clone()), &subspace(s.clone())).expect("matching dimensions")
}

const DIMS: [usize; 3] = [4, 8, 16];

fn rotation_invariance(rng: &mut ChaCha8Rng, count: usize) -> CheckResult {
    let mut worst: f64 = 0.0;
    for i in 0..count {
        let n = DIMS[i % 3];
        let (kd, sd) = (rng.random_range(1..=n), rng.random_range(1..=n));
        let k = random_orthonormal(rng, n, kd);
        let s = random_orthonormal(rng, n, sd);
        let (rk, rs) = (random_orthonormal(rng, kd, kd), random_orthonormal(rng, sd, sd));
        worst = worst.max((kappa(&k, &s) - kappa(&(&k * rk), &(&s * rs))).abs());
    }
    check("property1_rotation_invariance", worst, 1e-8, format!("{count} instances"))
}

fn totality(rng: &mut ChaCha8Rng, count: usize) -> CheckResult {
    let mut worst: f64 = 0.0;
    for i in 0..count {
        let n = DIMS[i % 3];
        let kd = rng.random_range(1..=n);
        let k = random_orthonormal(rng, n, kd);
        worst = worst.max((kappa(&k, &DMatrix::identity(n, n)) - kd as f64).abs());
    }
    check("property2_whole_space_totality", worst, 1e-8, format!("{count} instances"))
}

fn orthogonal_additivity(rng: &mut ChaCha8Rng, count: usize) -> CheckResult {
    let mut worst: f64 = 0.0;
    for i in 0..count {
        let n = DIMS[i % 3];
        let kd = rng.random_range(1..=n);
        let k = random_orthonormal(rng, n, kd);
        let total = rng.random_range(2..=n);
        let split = rng.random_range(1..total);
        let s = random_orthonormal(rng, n, total);
        let (s1, s2) = (s.columns(0, split).into_owned(), s.columns(split, total - split).into_owned());
        worst = worst.max((kappa(&k, &s) - kappa(&k, &s1) - kappa(&k, &s2)).abs());
        let basis = random_orthonormal(rng, n, n);
        let per_axis: f64 = (0..n).map(|j| kappa(&k, &basis.columns(j, 1).into_owned())).sum();
        worst = worst.max((per_axis - kd as f64).abs());
    }
    check("property3_orthogonal_additivity", worst, 1e-8, format!("{count} instances"))
}

fn unit_and_zero(rng: &mut ChaCha8Rng, count: usize) -> CheckResult {
    let mut worst: f64 = 0.0;
    for i in 0..count {
        let n = DIMS[i % 3];
        let kd = rng.random_range(1..n);
        let k = random_orthonormal(rng, n, kd);
        let inside = &k * gaussian_matrix(rng, kd, 1);
        let inside = &inside / inside.norm();
        let v = gaussian_matrix(rng, n, 1);
        let outside = &v - &k * k.tr_mul(&v);
        let outside = &outside / outside.norm();
        worst = worst.max((kappa(&k, &inside) - 1.0).abs());
        worst = worst.max(kappa(&k, &outside).abs());
    }
    check("property4_unit_and_zero_directions", worst, 1e-8, format!("{count} instances"))
}

/// Additivity for orthogonal constraint pairs, and a violating subspace for
/// every oblique pair.
fn sum_equivalence(rng: &mut ChaCha8Rng, count: usize) -> Vec<CheckResult> {
    let mut worst: f64 = 0.0;
    let mut missed = 0usize;
    for i in 0..count {
        let n = DIMS[i % 3];
        let k1d = rng.random_range(1..n);
        let k2d = rng.random_range(1..=n - k1d);
        let q = random_orthonormal(rng, n, k1d + k2d);
        let (k1, k2) = (q.columns(0, k1d).into_owned(), q.columns(k1d, k2d).into_owned());
        for _ in 0..5 {
            let sd = rng.random_range(1..=n);
            let s = random_orthonormal(rng, n, sd);
            worst = worst.max((kappa(&k1, &s) + kappa(&k2, &s) - kappa(&q, &s)).abs());
        }
        // Oblique pair: tilt the second space towards the first.
        let tilted = orthonormalize(&(&k2 + &k1.columns(0, 1) * DMatrix::from_element(1, k2d, 0.5)))
            .expect("independent columns");
        let joint = orthonormalize(&DMatrix::from_columns(
            &k1.column_iter().chain(tilted.column_iter()).collect::<Vec<_>>(),
        ))
        .expect("independent columns");
        let mut found = false;
        for attempt in 0..20 {
            let s = if attempt == 0 {
                tilted.columns(0, 1).into_owned()
            } else {
                random_orthonormal(rng, n, 1)
            };
            if (kappa(&k1, &s) + kappa(&tilted, &s) - kappa(&joint, &s)).abs() > 1e-6 {
                found = true;
                break;
            }
        }
        if !found {
            missed += 1;
        }
    }
    vec![
        check("property5_orthogonal_pairs_additive", worst, 1e-10, format!("{count} pairs")),
        check(
            "property5_oblique_pairs_violate",
            missed as f64,
            0.0,
            format!("{missed} of {count} oblique pairs without a violating subspace"),
        ),
    ]
}

fn chain_rule(rng: &mut ChaCha8Rng, count: usize) -> CheckResult {
    let mut worst: f64 = 0.0;
    for i in 0..count {
        let n = DIMS[i % 3];
        let d = if i % 2 == 0 { 1 } else { 2 };
        let p = rng.random_range(2..=2 * n);
        let cm = ConstraintMatrix {
            k_tilde: gaussian_matrix(rng, n * d, p),
            input_dim: d,
        };
        let mut perm: Vec<usize> = (0..p).collect();
        for j in (1..p).rev() {
            perm.swap(j, rng.random_range(0..=j));
        }
        let blocks = rng.random_range(1..=p.min(5));
        let grouping: Vec<Vec<usize>> = (0..blocks)
            .map(|b| perm.iter().copied().skip(b).step_by(blocks).collect())
            .collect();
        let all: Vec<usize> = (0..p).collect();
        let joint = spatial_cpi(&cm.block_basis(&all), d).expect("shape");
        let chain = conditional_chain(&cm, &grouping).expect("valid partition");
        for (lag, j) in joint.iter().enumerate() {
            let s: f64 = chain.iter().map(|c| c[lag]).sum();
            worst = worst.max((s - j).abs());
        }
    }
    check("property6_chain_rule", worst, 1e-8, format!("{count} partitions"))
}

fn fitted_models() -> Vec<(String, ModelManifold, QuadraticTask)> {
    let cov = build_covariance(&AutocovarianceSpec::power_law(1.0, 8)).expect("valid");
    let pred = exact_predictor(&cov).expect("regular");
    let task = QuadraticTask::from_predictor(&cov, &pred);
    let lifted = QuadraticTask::lifted(&cov, &pred, 4);
    vec![
        (
            "hierarchical_c2".into(),
            ModelManifold::hierarchical(3, 2, 2, 1, DilationPattern::Exponential).expect("valid"),
            task.clone(),
        ),
        (
            "hierarchical_d4".into(),
            ModelManifold::hierarchical(3, 2, 2, 4, DilationPattern::Exponential).expect("valid"),
            lifted,
        ),
        ("recurrent_c2".into(), ModelManifold::recurrent(2, 8, 1).expect("valid"), task.clone()),
        ("fully_connected".into(), ModelManifold::fully_connected(8, 1).expect("valid"), task),
    ]
}

fn fit_checks(seed: u64, fault: Fault) -> Vec<CheckResult> {
    let cfg = FitConfig::default().with_seed(seed).with_restarts(2);
    let mut stationarity: f64 = 0.0;
    let mut residual: f64 = 0.0;
    let mut ortho: f64 = 0.0;
    let mut cpi_bounds: f64 = 0.0;
    let mut failures = Vec::new();
    for (name, m, task) in fitted_models() {
        let f = match fit(&m, &task, &cfg) {
            Ok(f) if f.converged => f,
            Ok(f) => {
                failures.push(format!("{name}: not converged (grad {:e})", f.grad_norm));
                continue;
            }
            Err(e) => {
                failures.push(format!("{name}: {e}"));
                continue;
            }
        };
        let (_, grad) = loss_and_gradient(&m, &task, &f.w_hat).expect("shapes match");
        let g = grad.amax();
        stationarity = stationarity.max(g / f.tolerance);
        // E[(y − Âᵀx)²] from second moments, against v* + L.
        let ah = &f.a_hat;
        let cross = &task.sigma * &task.target;
        let c0 = task.v_star + task.target.dot(&cross);
        let direct = c0 - 2.0 * ah.dot(&cross) + ah.dot(&(&task.sigma * ah));
        residual = residual.max((direct - f.residual_variance).abs() / c0);
        let mut basis = match ConstraintMatrix::at_point(&m, &task, &f.w_hat).and_then(|cm| cm.basis()) {
            Ok(b) => b,
            Err(e) => {
                failures.push(format!("{name}: {e}"));
                continue;
            }
        };
        let d = m.input_dim();
        let cpi = spatial_cpi(&basis, d).expect("shape");
        for c in &cpi {
            cpi_bounds = cpi_bounds.max(-c).max(c - d as f64);
        }
        cpi_bounds = cpi_bounds.max((cpi.iter().sum::<f64>() - basis.kappa as f64).abs());
        if fault == Fault::PerturbOrthonormality {
            basis.k[(0, 0)] += 1e-3;
        }
        ortho = ortho.max(orthonormality_defect(&basis.k));
    }
    let detail = if failures.is_empty() {
        "4 fitted models".to_string()
    } else {
        failures.join("; ")
    };
    let penalty = if failures.is_empty() { 0.0 } else { f64::INFINITY };
    vec![
        check("stationarity", stationarity.max(penalty), 1.0, detail.clone()),
        check("residual_variance_identity", residual.max(penalty), 1e-10, detail.clone()),
        check("constraint_basis_orthonormality", ortho.max(penalty), 1e-10, detail.clone()),
        check("cpi_bounds_and_sum", cpi_bounds.max(penalty), 1e-8, detail),
    ]
}

/// Max relative error between the analytic Jacobian and central differences.
pub fn jacobian_error(m: &dyn Manifold, w: &DVector<f64>) -> f64 {
    let jac = m.jacobian(w).expect("valid parameters");
    let scale = jac.amax().max(1e-12);
    let mut worst: f64 = 0.0;
    for j in 0..m.param_count() {
        let h = 1e-5 * (1.0 + w[j].abs());
        let (mut wp, mut wm) = (w.clone(), w.clone());
        wp[j] += h;
        wm[j] -= h;
        let fd = (m.coefficients(&wp).expect("valid") - m.coefficients(&wm).expect("valid")) / (2.0 * h);
        for r in 0..fd.len() {
            worst = worst.max((fd[r] - jac[(r, j)]).abs() / scale);
        }
    }
    worst
}

fn jacobian_checks(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut worst: f64 = 0.0;
    for d in [1, 4] {
        let models = [
            ModelManifold::hierarchical(3, 2, 2, d, DilationPattern::Exponential),
            ModelManifold::hierarchical(2, 2, 2, d, DilationPattern::Tiled { blocks: 2 }),
            ModelManifold::hierarchical(2, 2, 2, d, DilationPattern::Repeated { blocks: 2 }),
            ModelManifold::recurrent(3, 8, d),
            ModelManifold::fully_connected(6, d),
        ];
        for m in models {
            let m = m.expect("valid architecture");
            let w = m.init_params(rng);
            worst = worst.max(jacobian_error(&m, &w));
        }
    }
    check("jacobian_finite_differences", worst, 1e-5, "5 architectures, d in {1, 4}")
}

fn covariance_checks(rng: &mut ChaCha8Rng, count: usize) -> CheckResult {
    let mut worst: f64 = 0.0;
    for i in 0..count {
        let n = DIMS[i % 3];
        let spec = match i % 3 {
            0 => AutocovarianceSpec::power_law(rng.random_range(0.2..3.0), n),
            1 => AutocovarianceSpec::exponential(rng.random_range(0.05..0.95), n),
            _ => {
                let rho: f64 = rng.random_range(-0.9..0.9);
                AutocovarianceSpec::ar(vec![rho], 1.0, n)
            }
        };
        let cov = build_covariance(&spec).expect("valid process");
        worst = worst.max((&cov.sigma - cov.sigma.transpose()).amax());
        let (vals, _) = sym_eigen_desc(&cov.window_covariance());
        worst = worst.max((-vals[vals.len() - 1] / cov.c0()).max(0.0));
        let pred = exact_predictor(&cov).expect("regular");
        worst = worst.max((-pred.v_star).max(pred.v_star - cov.c0()).max(0.0));
        if let crate::covkit::ProcessKind::ArCoefficients { weights, .. } = &spec.kind {
            if check_ar_stability(weights).is_ok() {
                worst = worst.max((pred.a_star[0] - weights[0]).abs());
                worst = worst.max(pred.a_star.rows(1, n - 1).amax());
            }
        }
    }
    check("covariance_invariants", worst, 1e-8, format!("{count} processes"))
}

/// Runs every check. The report passes only if every check passes.
pub fn validate(opts: &ValidateOptions) -> ValidationReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let count = opts.instances.max(3);
    let mut checks = vec![
        rotation_invariance(&mut rng, count),
        totality(&mut rng, count),
        orthogonal_additivity(&mut rng, count),
        unit_and_zero(&mut rng, count),
    ];
    checks.extend(sum_equivalence(&mut rng, count.min(100)));
    checks.push(chain_rule(&mut rng, count.min(100)));
    checks.push(jacobian_checks(&mut rng));
    checks.push(covariance_checks(&mut rng, count.min(60)));
    checks.extend(fit_checks(opts.seed, opts.fault));
    ValidationReport {
        seed: opts.seed,
        fault: opts.fault,
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}
