//! Capacity analysis in the space of fixed componentwise feature maps.
//!
//! Each lag `y_i` of the input window is expanded into `φ¹(y_i), …, φᵈ(y_i)`
//! (lag-major layout), the second-moment matrix `Σ^φ = E[φ(Y)φ(Y)ᵀ]` and the
//! cross moment `E[φ(Y) y]` are estimated by exact Gaussian sampling, and the
//! usual pipeline runs with `Σ^φ` in place of `Σ`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archzoo::Manifold;
use crate::capacity::{spatial_cpi, CapacityError, ConstraintBasis, ConstraintMatrix};
use crate::covkit::{solve_spd, toeplitz, AutocovarianceSpec, CovError};
use crate::linalg::sym_eigen_desc;
use crate::optim::QuadraticTask;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error(transparent)]
    Cov(#[from] CovError),
    #[error(transparent)]
    Capacity(#[from] CapacityError),
    #[error("feature second moments are rank deficient (min eigenvalue {min_eigenvalue:e}, max {max_eigenvalue:e})")]
    RankDeficientFeatures { min_eigenvalue: f64, max_eigenvalue: f64 },
    #[error("need at least {required} samples for {features} features, got {got}")]
    InsufficientSamples { required: usize, features: usize, got: usize },
    #[error("feature map has no basis functions")]
    EmptyFeatureMap,
}

/// A scalar basis function applied to every input position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisFunction {
    /// `scale · y^degree`.
    Monomial { degree: u32, scale: f64 },
    /// Probabilists' Hermite polynomial `He_degree(y)`.
    Hermite { degree: u32 },
}

impl BasisFunction {
    pub fn eval(&self, y: f64) -> f64 {
        match *self {
            BasisFunction::Monomial { degree, scale } => scale * y.powi(degree as i32),
            BasisFunction::Hermite { degree } => hermite(degree, y),
        }
    }
}

/// `He_0 = 1`, `He_1 = y`, `He_{k+1} = y He_k − k He_{k−1}`.
fn hermite(degree: u32, y: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, y);
    if degree == 0 {
        return prev;
    }
    for k in 1..degree {
        let next = y * cur - k as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Feature family as written in experiment configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureFamily {
    Identity,
    Polynomial,
    Hermite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub basis: Vec<BasisFunction>,
}

impl FeatureMap {
    pub fn new(basis: Vec<BasisFunction>) -> Self {
        Self { basis }
    }

    pub fn identity() -> Self {
        Self::polynomial(1)
    }

    /// `{y, y², …, y^degree}`. The constant is left out: it would repeat at
    /// every position.
    pub fn polynomial(degree: u32) -> Self {
        Self::new(
            (1..=degree)
                .map(|degree| BasisFunction::Monomial { degree, scale: 1.0 })
                .collect(),
        )
    }

    /// `{He_1, …, He_degree}`.
    pub fn hermite(degree: u32) -> Self {
        Self::new((1..=degree).map(|degree| BasisFunction::Hermite { degree }).collect())
    }

    pub fn from_family(family: FeatureFamily, degree: u32) -> Self {
        match family {
            FeatureFamily::Identity => Self::identity(),
            FeatureFamily::Polynomial => Self::polynomial(degree),
            FeatureFamily::Hermite => Self::hermite(degree),
        }
    }

    /// Number of basis functions per position.
    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    /// Lag-major feature vector of a window `y_1..y_n`.
    pub fn apply(&self, window: &[f64]) -> DVector<f64> {
        let d = self.dim();
        DVector::from_fn(window.len() * d, |r, _| self.basis[r % d].eval(window[r / d]))
    }
}

/// Sampled feature moments.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureMoment {
    pub sigma_phi: DMatrix<f64>,
    pub cross_phi: DVector<f64>,
    /// Sample estimate of `E[y²]` for the predicted sample.
    pub target_second_moment: f64,
    pub sample_count: usize,
    pub seed: u64,
    pub receptive_field: usize,
    pub feature_dim: usize,
}

impl FeatureMoment {
    pub fn m(&self) -> usize {
        self.cross_phi.len()
    }
}

const BATCH: usize = 4096;

/// Factor `L` with `L Lᵀ = c` (Cholesky, or an eigen square root when `c` is
/// only semi-definite).
fn covariance_factor(c: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = c.clone().cholesky() {
        return ch.l();
    }
    let (vals, vecs) = sym_eigen_desc(c);
    let roots = DVector::from_iterator(vals.len(), vals.iter().map(|v| v.max(0.0).sqrt()));
    vecs * DMatrix::from_diagonal(&roots)
}

/// Estimates `Σ^φ` and `E[φ(Y) y]` from `samples` exact draws of the window
/// `(y, y_1, …, y_n)`. Batches are drawn in parallel from per-batch seeds
/// and reduced in batch order, so the result depends only on `seed`.
pub fn estimate_feature_moments(
    spec: &AutocovarianceSpec,
    fmap: &FeatureMap,
    samples: usize,
    seed: u64,
) -> Result<FeatureMoment, FeatureError> {
    let d = fmap.dim();
    if d == 0 {
        return Err(FeatureError::EmptyFeatureMap);
    }
    let n = spec.length;
    let m = n * d;
    if samples < 10 * m {
        return Err(FeatureError::InsufficientSamples {
            required: 10 * m,
            features: m,
            got: samples,
        });
    }
    // Index 0 is the predicted sample, index i the sample i steps before it.
    let full = toeplitz(&spec.autocovariance(n)?);
    let factor = covariance_factor(&full);
    let batches = samples.div_ceil(BATCH);
    let partials: Vec<(DMatrix<f64>, DVector<f64>, f64)> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let count = BATCH.min(samples - b * BATCH);
            let mut rng = ChaCha8Rng::seed_from_u64(crate::optim::restart_seed(seed, b));
            let mut feats = DMatrix::zeros(m, count);
            let mut targets = DVector::zeros(count);
            for s in 0..count {
                let z = DVector::from_fn(n + 1, |_, _| StandardNormal.sample(&mut rng));
                let y = &factor * z;
                targets[s] = y[0];
                feats.set_column(s, &fmap.apply(&y.as_slice()[1..]));
            }
            let outer = &feats * feats.transpose();
            let cross = &feats * &targets;
            (outer, cross, targets.norm_squared())
        })
        .collect();
    let mut sigma_phi = DMatrix::zeros(m, m);
    let mut cross_phi = DVector::zeros(m);
    let mut target_sq = 0.0;
    for (o, c, t) in partials {
        sigma_phi += o;
        cross_phi += c;
        target_sq += t;
    }
    let inv = 1.0 / samples as f64;
    sigma_phi *= inv;
    cross_phi *= inv;
    let sigma_phi = (&sigma_phi + sigma_phi.transpose()) * 0.5;

    let (vals, _) = sym_eigen_desc(&sigma_phi);
    let (max_eigenvalue, min_eigenvalue) = (vals[0], vals[vals.len() - 1]);
    if !(min_eigenvalue > 1e-10 * max_eigenvalue) {
        return Err(FeatureError::RankDeficientFeatures {
            min_eigenvalue,
            max_eigenvalue,
        });
    }
    Ok(FeatureMoment {
        sigma_phi,
        cross_phi,
        target_second_moment: target_sq * inv,
        sample_count: samples,
        seed,
        receptive_field: n,
        feature_dim: d,
    })
}

/// The feature-space task: `Σ^φ`, `A*_φ = (Σ^φ)⁻¹ E[φ(Y) y]` and its
/// residual second moment.
pub fn feature_task(moments: &FeatureMoment) -> Result<QuadraticTask, FeatureError> {
    let target = solve_spd(&moments.sigma_phi, &moments.cross_phi).ok_or(FeatureError::RankDeficientFeatures {
        min_eigenvalue: 0.0,
        max_eigenvalue: moments.sigma_phi.norm(),
    })?;
    let v_star = (moments.target_second_moment - moments.cross_phi.dot(&target)).max(0.0);
    Ok(QuadraticTask::new(moments.sigma_phi.clone(), target, v_star))
}

/// Constraint basis of a model over the feature space at a stationary point
/// of the feature-space loss.
pub fn feature_capacity(
    m: &dyn Manifold,
    moments: &FeatureMoment,
    w_hat: &DVector<f64>,
    tolerance: f64,
) -> Result<ConstraintBasis, FeatureError> {
    let task = feature_task(moments)?;
    Ok(ConstraintMatrix::at_optimum(m, &task, w_hat, tolerance)?.basis()?)
}

/// Capacity per input position: the sum over the `d` feature directions of
/// each lag.
pub fn input_space_capacity(basis: &ConstraintBasis, n: usize, d: usize) -> Result<Vec<f64>, FeatureError> {
    if basis.dim() != n * d {
        return Err(CapacityError::ShapeMismatch {
            expected: n * d,
            got: basis.dim(),
        }
        .into());
    }
    Ok(spatial_cpi(basis, d)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_recurrence() {
        let y: f64 = 0.7;
        assert!((hermite(2, y) - (y * y - 1.0)).abs() < 1e-14);
        assert!((hermite(3, y) - (y.powi(3) - 3.0 * y)).abs() < 1e-14);
        assert!((hermite(4, y) - (y.powi(4) - 6.0 * y * y + 3.0)).abs() < 1e-13);
    }

    #[test]
    fn layout_is_lag_major() {
        let f = FeatureMap::polynomial(2).apply(&[2.0, 3.0]);
        assert_eq!(f.as_slice(), &[2.0, 4.0, 3.0, 9.0]);
    }

    #[test]
    fn too_few_samples_rejected() {
        let spec = AutocovarianceSpec::white_noise(4);
        let err = estimate_feature_moments(&spec, &FeatureMap::identity(), 39, 0).unwrap_err();
        assert!(matches!(err, FeatureError::InsufficientSamples { required: 40, .. }));
    }

    #[test]
    fn duplicate_basis_is_rank_deficient() {
        let spec = AutocovarianceSpec::white_noise(4);
        let fmap = FeatureMap::new(vec![
            BasisFunction::Monomial { degree: 1, scale: 1.0 },
            BasisFunction::Monomial { degree: 1, scale: 2.0 },
        ]);
        let err = estimate_feature_moments(&spec, &fmap, 1000, 0).unwrap_err();
        assert!(matches!(err, FeatureError::RankDeficientFeatures { .. }));
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = AutocovarianceSpec::power_law(1.0, 4);
        let a = estimate_feature_moments(&spec, &FeatureMap::hermite(2), 5000, 3).unwrap();
        let b = estimate_feature_moments(&spec, &FeatureMap::hermite(2), 5000, 3).unwrap();
        assert_eq!(a, b);
    }
}
