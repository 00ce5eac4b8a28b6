//! Stationary Gaussian-process covariance structures and the exact optimal
//! linear one-step predictor.
//!
//! Lag convention used throughout the crate: coefficient index `i` (1-based)
//! multiplies the sample `i` steps in the past, so index 1 is the most recent
//! input. Vectors are stored 0-based, i.e. entry `i - 1` holds lag `i`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::sym_eigen_desc;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CovError {
    #[error("receptive field must be at least 2, got {0}")]
    LengthTooSmall(usize),
    #[error("invalid process parameter: {0}")]
    InvalidParameter(String),
    #[error("autocovariance is not positive semi-definite (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveSemiDefinite { min_eigenvalue: f64 },
    #[error("AR polynomial is unstable (reflection coefficient {reflection:.6} at order {order})")]
    UnstableAR { order: usize, reflection: f64 },
    #[error("covariance is singular (min eigenvalue {min_eigenvalue:e})")]
    SingularCovariance { min_eigenvalue: f64 },
}

/// Family of the autocovariance sequence `c_τ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProcessKind {
    /// `y_t = Σ_j w_j y_{t-j} + η`, `η ~ N(0, innovation_variance)`.
    ArCoefficients {
        weights: Vec<f64>,
        innovation_variance: f64,
    },
    /// `c_τ = (1 + τ)^(-α)`.
    PowerLaw { alpha: f64 },
    /// `c_τ = ρ^τ`.
    Exponential { rate: f64 },
    /// `c_0, c_1, …` given directly; must cover lags `0..=n`.
    Explicit { values: Vec<f64> },
}

/// Declarative description of a stationary process over a window of `length`
/// past samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutocovarianceSpec {
    #[serde(flatten)]
    pub kind: ProcessKind,
    pub length: usize,
    #[serde(default)]
    pub normalize: bool,
}

impl AutocovarianceSpec {
    pub fn new(kind: ProcessKind, length: usize) -> Self {
        Self {
            kind,
            length,
            normalize: false,
        }
    }

    pub fn power_law(alpha: f64, length: usize) -> Self {
        Self::new(ProcessKind::PowerLaw { alpha }, length)
    }

    pub fn exponential(rate: f64, length: usize) -> Self {
        Self::new(ProcessKind::Exponential { rate }, length)
    }

    pub fn ar(weights: Vec<f64>, innovation_variance: f64, length: usize) -> Self {
        Self::new(
            ProcessKind::ArCoefficients {
                weights,
                innovation_variance,
            },
            length,
        )
    }

    pub fn explicit(values: Vec<f64>, length: usize) -> Self {
        Self::new(ProcessKind::Explicit { values }, length)
    }

    pub fn white_noise(length: usize) -> Self {
        let mut values = vec![0.0; length + 1];
        values[0] = 1.0;
        Self::explicit(values, length)
    }

    pub fn normalized(mut self) -> Self {
        self.normalize = true;
        self
    }

    pub fn with_length(mut self, length: usize) -> Self {
        self.length = length;
        self
    }

    /// Autocovariances `c_0..=c_max_lag`, after normalization when requested.
    /// Parameters are validated but the PSD check is left to
    /// [`build_covariance`].
    pub fn autocovariance(&self, max_lag: usize) -> Result<Vec<f64>, CovError> {
        let mut c = match &self.kind {
            ProcessKind::PowerLaw { alpha } => {
                if !(*alpha > 0.0 && alpha.is_finite()) {
                    return Err(CovError::InvalidParameter(format!(
                        "power_law alpha must be > 0, got {alpha}"
                    )));
                }
                (0..=max_lag)
                    .map(|t| (1.0 + t as f64).powf(-alpha))
                    .collect()
            }
            ProcessKind::Exponential { rate } => {
                if !(*rate > 0.0 && *rate < 1.0) {
                    return Err(CovError::InvalidParameter(format!(
                        "exponential rate must lie in (0, 1), got {rate}"
                    )));
                }
                (0..=max_lag).map(|t| rate.powi(t as i32)).collect()
            }
            ProcessKind::Explicit { values } => {
                if values.len() < max_lag + 1 {
                    return Err(CovError::InvalidParameter(format!(
                        "explicit sequence has {} values, need c_0..c_{max_lag}",
                        values.len()
                    )));
                }
                if !(values[0] > 0.0) || values.iter().any(|v| !v.is_finite()) {
                    return Err(CovError::InvalidParameter(
                        "explicit sequence needs finite values and c_0 > 0".into(),
                    ));
                }
                values[..=max_lag].to_vec()
            }
            ProcessKind::ArCoefficients {
                weights,
                innovation_variance,
            } => {
                if weights.is_empty() {
                    return Err(CovError::InvalidParameter(
                        "ar_coefficients needs at least one weight".into(),
                    ));
                }
                if !(*innovation_variance > 0.0) {
                    return Err(CovError::InvalidParameter(format!(
                        "innovation variance must be > 0, got {innovation_variance}"
                    )));
                }
                check_ar_stability(weights)?;
                ar_autocovariance(weights, *innovation_variance, max_lag)
            }
        };
        if self.normalize {
            let c0 = c[0];
            c.iter_mut().for_each(|v| *v /= c0);
        }
        Ok(c)
    }
}

/// Step-down (Schur–Cohn) test: the AR polynomial is stable iff every
/// reflection coefficient has modulus strictly below one.
pub fn check_ar_stability(weights: &[f64]) -> Result<(), CovError> {
    let mut a = weights.to_vec();
    for m in (1..=a.len()).rev() {
        let k = a[m - 1];
        if !(k.abs() < 1.0) {
            return Err(CovError::UnstableAR {
                order: m,
                reflection: k,
            });
        }
        let denom = 1.0 - k * k;
        let prev: Vec<f64> = (1..m)
            .map(|j| (a[j - 1] + k * a[m - j - 1]) / denom)
            .collect();
        a = prev;
    }
    Ok(())
}

/// Autocovariance of the AR process by reversing the Yule–Walker relations:
/// solve for `c_0..c_p`, then extend with the AR recursion.
fn ar_autocovariance(weights: &[f64], innovation_variance: f64, max_lag: usize) -> Vec<f64> {
    let p = weights.len();
    let mut m = DMatrix::zeros(p + 1, p + 1);
    let mut rhs = DVector::zeros(p + 1);
    rhs[0] = innovation_variance;
    for k in 0..=p {
        m[(k, k)] += 1.0;
        for (j, w) in weights.iter().enumerate() {
            let lag = (k as isize - (j as isize + 1)).unsigned_abs();
            m[(k, lag)] -= w;
        }
    }
    let head = m
        .lu()
        .solve(&rhs)
        .expect("stable AR gives a nonsingular Yule-Walker system");
    extend_ar(weights, head.as_slice(), max_lag)
}

fn extend_ar(weights: &[f64], head: &[f64], max_lag: usize) -> Vec<f64> {
    let mut c: Vec<f64> = head.iter().copied().take(max_lag + 1).collect();
    while c.len() <= max_lag {
        let k = c.len();
        let v = weights
            .iter()
            .enumerate()
            .map(|(j, w)| w * c[(k as isize - j as isize - 1).unsigned_abs()])
            .sum();
        c.push(v);
    }
    c
}

/// Autocovariance implied by the AR coefficients `a` (lag order) when `c_0`
/// is pinned to `c0`: the Yule–Walker equations for lags `1..=p` are solved
/// for `c_1..c_p`, then extended by recursion up to `max_lag`. The result
/// matches the true `c_0` exactly by construction.
pub fn implied_autocovariance(a: &[f64], c0: f64, max_lag: usize) -> Option<Vec<f64>> {
    let p = a.len();
    if p == 0 {
        let mut c = vec![0.0; max_lag + 1];
        c[0] = c0;
        return Some(c);
    }
    let mut m = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    for k in 1..=p {
        m[(k - 1, k - 1)] += 1.0;
        for (j, w) in a.iter().enumerate() {
            let lag = (k as isize - (j as isize + 1)).unsigned_abs();
            if lag == 0 {
                rhs[k - 1] += w * c0;
            } else {
                m[(k - 1, lag - 1)] -= w;
            }
        }
    }
    let tail = m.lu().solve(&rhs)?;
    let mut head = vec![c0];
    head.extend(tail.iter());
    Some(extend_ar(a, &head, max_lag))
}

/// Toeplitz covariance of the `n` past samples plus the cross-covariance of
/// those samples with the next one.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix {
    /// `Σ_ij = c_{|i-j|}`, `n × n`.
    pub sigma: DMatrix<f64>,
    /// `(c_1, …, c_n)`: covariance of lag `i` with the predicted sample.
    pub cross: DVector<f64>,
    /// `c_0..=c_n`.
    pub autocov: Vec<f64>,
    pub spec: AutocovarianceSpec,
}

impl CovarianceMatrix {
    pub fn n(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn c0(&self) -> f64 {
        self.autocov[0]
    }

    /// `(n+1) × (n+1)` covariance of `(y_next, y_lag1, …, y_lagn)`.
    pub fn window_covariance(&self) -> DMatrix<f64> {
        toeplitz(&self.autocov)
    }
}

pub fn toeplitz(c: &[f64]) -> DMatrix<f64> {
    let n = c.len();
    DMatrix::from_fn(n, n, |i, j| c[i.abs_diff(j)])
}

pub fn build_covariance(spec: &AutocovarianceSpec) -> Result<CovarianceMatrix, CovError> {
    let n = spec.length;
    if n < 2 {
        return Err(CovError::LengthTooSmall(n));
    }
    let autocov = spec.autocovariance(n)?;
    let full = toeplitz(&autocov);
    let (vals, _) = sym_eigen_desc(&full);
    let min_eigenvalue = vals[vals.len() - 1];
    if min_eigenvalue < -1e-10 * autocov[0] {
        return Err(CovError::NotPositiveSemiDefinite { min_eigenvalue });
    }
    Ok(CovarianceMatrix {
        sigma: toeplitz(&autocov[..n]),
        cross: DVector::from_column_slice(&autocov[1..=n]),
        autocov,
        spec: spec.clone(),
    })
}

/// Optimal one-step linear predictor `a* = Σ⁻¹ cross` and its residual
/// variance `v* = c_0 − crossᵀ a*`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactPredictor {
    pub a_star: DVector<f64>,
    pub v_star: f64,
}

pub fn exact_predictor(cov: &CovarianceMatrix) -> Result<ExactPredictor, CovError> {
    let (vals, _) = sym_eigen_desc(&cov.sigma);
    let min_eigenvalue = vals[vals.len() - 1];
    if min_eigenvalue <= 1e-12 * cov.c0() {
        return Err(CovError::SingularCovariance { min_eigenvalue });
    }
    let a_star = solve_spd(&cov.sigma, &cov.cross)
        .ok_or(CovError::SingularCovariance { min_eigenvalue })?;
    let v_star = (cov.c0() - cov.cross.dot(&a_star)).clamp(0.0, cov.c0());
    Ok(ExactPredictor { a_star, v_star })
}

/// Cholesky solve with one round of iterative refinement.
pub fn solve_spd(m: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let chol = m.clone().cholesky()?;
    let mut x = chol.solve(b);
    let r = b - m * &x;
    x += chol.solve(&r);
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn white_noise_is_identity() {
        let cov = build_covariance(&AutocovarianceSpec::explicit(vec![1.0, 0.0, 0.0, 0.0, 0.0], 4))
            .unwrap();
        assert_eq!(cov.sigma, DMatrix::identity(4, 4));
        assert_eq!(cov.cross, DVector::zeros(4));
    }

    #[test]
    fn ar1_autocovariance_matches_geometric_and_simulation() {
        let spec = AutocovarianceSpec::ar(vec![0.5], 0.75, 4);
        let cov = build_covariance(&spec).unwrap();
        let expected = [1.0, 0.5, 0.25, 0.125, 0.0625];
        for (c, e) in cov.autocov.iter().zip(expected) {
            assert!((c - e).abs() < 1e-14, "{c} vs {e}");
        }
        assert_eq!(cov.sigma, toeplitz(&expected[..4]));

        // Simulation oracle: empirical autocovariance of a long AR(1) path.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let steps = 1_000_000;
        let mut y = 0.0;
        let mut path = Vec::with_capacity(steps);
        for _ in 0..steps {
            let eta: f64 = rng.sample(StandardNormal);
            y = 0.5 * y + 0.75f64.sqrt() * eta;
            path.push(y);
        }
        for (lag, e) in expected.iter().enumerate() {
            let emp: f64 = path
                .iter()
                .zip(&path[lag..])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / (steps - lag) as f64;
            assert!((emp - e).abs() < 1e-2, "lag {lag}: {emp} vs {e}");
        }
    }

    #[test]
    fn non_psd_sequence_rejected() {
        // Tridiagonal 5x5 with 0.9 off the diagonal: λ_min = 1 - 1.8 cos(π/6) < 0.
        let err = build_covariance(&AutocovarianceSpec::explicit(vec![1.0, 0.9, 0.0, 0.0, 0.0], 4))
            .unwrap_err();
        match err {
            CovError::NotPositiveSemiDefinite { min_eigenvalue } => {
                let oracle = 1.0 - 1.8 * (std::f64::consts::PI / 6.0).cos();
                assert!((min_eigenvalue - oracle).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn constant_correlation_sequence_is_psd() {
        // 0.1 I + 0.9 11ᵀ has smallest eigenvalue 0.1.
        let cov =
            build_covariance(&AutocovarianceSpec::explicit(vec![1.0, 0.9, 0.9, 0.9, 0.9], 4)).unwrap();
        let (vals, _) = sym_eigen_desc(&cov.window_covariance());
        assert!((vals[4] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn unstable_ar_rejected() {
        for w in [vec![1.0], vec![0.5, 0.6], vec![-1.2]] {
            let err = build_covariance(&AutocovarianceSpec::ar(w.clone(), 1.0, 4)).unwrap_err();
            assert!(matches!(err, CovError::UnstableAR { .. }), "{w:?}");
        }
        assert!(check_ar_stability(&[1.5, -0.56]).is_ok());
    }

    #[test]
    fn parameter_ranges_enforced() {
        assert!(matches!(
            build_covariance(&AutocovarianceSpec::power_law(0.0, 4)),
            Err(CovError::InvalidParameter(_))
        ));
        assert!(matches!(
            build_covariance(&AutocovarianceSpec::exponential(1.0, 4)),
            Err(CovError::InvalidParameter(_))
        ));
        assert!(matches!(
            build_covariance(&AutocovarianceSpec::power_law(1.0, 1)),
            Err(CovError::LengthTooSmall(1))
        ));
        assert!(matches!(
            build_covariance(&AutocovarianceSpec::explicit(vec![1.0, 0.0], 4)),
            Err(CovError::InvalidParameter(_))
        ));
    }

    #[test]
    fn ar1_predictor_is_markov() {
        let cov = build_covariance(&AutocovarianceSpec::ar(vec![0.5], 0.75, 8)).unwrap();
        let pred = exact_predictor(&cov).unwrap();
        // Oracle: dense LU solve.
        let oracle = cov.sigma.clone().lu().solve(&cov.cross).unwrap();
        assert!((pred.a_star[0] - 0.5).abs() < 1e-12);
        assert!((&pred.a_star - oracle).norm() < 1e-12);
        assert!(pred.a_star.rows(1, 7).iter().all(|v| v.abs() < 1e-12));
        assert!((pred.v_star - 0.75).abs() < 1e-12);
    }

    #[test]
    fn white_noise_has_no_predictability() {
        let cov = build_covariance(&AutocovarianceSpec::white_noise(8)).unwrap();
        let pred = exact_predictor(&cov).unwrap();
        assert!(pred.a_star.iter().all(|v| *v == 0.0));
        assert_eq!(pred.v_star, 1.0);
    }

    #[test]
    fn power_law_residual_check() {
        let cov = build_covariance(&AutocovarianceSpec::power_law(1.0, 4)).unwrap();
        let pred = exact_predictor(&cov).unwrap();
        assert!((&cov.sigma * &pred.a_star - &cov.cross).norm() < 1e-10);
        assert!(pred.v_star > 0.0 && pred.v_star < cov.c0());
    }

    #[test]
    fn singular_covariance_detected() {
        let cov = build_covariance(&AutocovarianceSpec::explicit(vec![1.0; 5], 4)).unwrap();
        assert!(matches!(
            exact_predictor(&cov),
            Err(CovError::SingularCovariance { .. })
        ));
    }

    #[test]
    fn implied_autocovariance_inverts_predictor() {
        let cov = build_covariance(&AutocovarianceSpec::power_law(1.0, 16)).unwrap();
        let pred = exact_predictor(&cov).unwrap();
        let c = implied_autocovariance(pred.a_star.as_slice(), cov.c0(), 16).unwrap();
        for (a, b) in c.iter().zip(&cov.autocov) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn normalization_pins_c0() {
        let spec = AutocovarianceSpec::ar(vec![0.6, 0.2], 2.0, 6).normalized();
        let cov = build_covariance(&spec).unwrap();
        assert!((cov.c0() - 1.0).abs() < 1e-15);
    }
}
