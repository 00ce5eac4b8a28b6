//! Capacity algebra over constraint subspaces.
//!
//! At a stationary point `Ŵ` of the quadratic loss the optimality condition
//! reads `K̃ᵀX = 0` with `K̃ = Σ ∂A/∂W` and `X = Â − A*`. The orthonormal basis
//! `K` of `span(K̃)` is the object every capacity query runs against: the
//! capacity allocated to a subspace with orthonormal basis `S` is
//! `κ_K(S) = ‖KᵀS‖_F²`.

use std::collections::BTreeMap;
use std::io::Write;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archzoo::{random_nonzero, ArchError, Frozen, Manifold};
use crate::linalg::{orthonormality_defect, orthonormalize, sup_norm, sym_eigen_desc};
use crate::optim::{fit, fit_from, loss_and_gradient, FitConfig, FitResult, OptimError, QuadraticTask};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CapacityError {
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("not a stationary point: gradient {grad_norm:e} exceeds tolerance {tolerance:e}")]
    StationarityViolated { grad_norm: f64, tolerance: f64 },
    #[error("constraint matrix is degenerate: every Gram eigenvalue is below the rank threshold")]
    DegenerateJacobian,
    #[error("shape mismatch: expected dimension {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("subspace `{0}` has linearly dependent columns")]
    DependentSubspace(String),
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("error-bound analysis needs at least 2 fits, got {0}")]
    InsufficientFits(usize),
}

/// Rank cutoff for a Gram spectrum: ten times the magnitude of the most
/// negative eigenvalue (pure rounding noise for a PSD matrix), floored at
/// `1e-12` of the largest eigenvalue.
pub fn rank_threshold(spectrum: &[f64]) -> f64 {
    let lo = spectrum.iter().copied().fold(0.0f64, f64::min);
    let hi = spectrum.iter().copied().fold(0.0f64, f64::max);
    (10.0 * lo.abs()).max(1e-12 * hi)
}

/// Orthonormal basis of a constraint space together with the Gram spectrum
/// it was extracted from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstraintBasis {
    /// `dim × kappa`, orthonormal columns.
    pub k: DMatrix<f64>,
    /// Eigenvalues of `K̃K̃ᵀ`, descending, length `dim`.
    pub spectrum: Vec<f64>,
    pub threshold: f64,
    pub kappa: usize,
}

impl ConstraintBasis {
    /// Basis of `span(k_tilde)`. Fails when no eigenvalue survives the
    /// threshold.
    pub fn from_constraints(k_tilde: &DMatrix<f64>) -> Result<Self, CapacityError> {
        let basis = Self::spanning(k_tilde);
        if basis.kappa == 0 {
            return Err(CapacityError::DegenerateJacobian);
        }
        Ok(basis)
    }

    /// Like [`from_constraints`](Self::from_constraints) but an empty or
    /// numerically zero constraint set yields `κ = 0`.
    pub fn spanning(k_tilde: &DMatrix<f64>) -> Self {
        let dim = k_tilde.nrows();
        if k_tilde.ncols() == 0 {
            return Self {
                k: DMatrix::zeros(dim, 0),
                spectrum: vec![0.0; dim],
                threshold: 0.0,
                kappa: 0,
            };
        }
        let gram = k_tilde * k_tilde.transpose();
        let (vals, vecs) = sym_eigen_desc(&gram);
        let spectrum: Vec<f64> = vals.iter().copied().collect();
        let threshold = rank_threshold(&spectrum);
        let kappa = spectrum.iter().filter(|&&v| v > threshold).count();
        Self {
            k: vecs.columns(0, kappa).into_owned(),
            spectrum,
            threshold,
            kappa,
        }
    }

    pub fn dim(&self) -> usize {
        self.k.nrows()
    }

    /// `KKᵀ`, the orthogonal projector onto the constraint space.
    pub fn projector(&self) -> DMatrix<f64> {
        &self.k * self.k.transpose()
    }
}

/// The constraint matrix `K̃ = Σ ∂A/∂W` at a parameter point.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintMatrix {
    pub k_tilde: DMatrix<f64>,
    pub input_dim: usize,
}

impl ConstraintMatrix {
    /// `Σ ∂A/∂W` at `w` without any optimality check.
    pub fn at_point(m: &dyn Manifold, task: &QuadraticTask, w: &DVector<f64>) -> Result<Self, CapacityError> {
        if m.coefficient_len() != task.dim() {
            return Err(CapacityError::ShapeMismatch {
                expected: m.coefficient_len(),
                got: task.dim(),
            });
        }
        let jac = m.jacobian(w)?;
        Ok(Self {
            k_tilde: &task.sigma * jac,
            input_dim: m.input_dim(),
        })
    }

    /// `Σ ∂A/∂W` at `w_hat`, after re-checking `‖∂L/∂W‖_∞ ≤ tolerance`.
    pub fn at_optimum(
        m: &dyn Manifold,
        task: &QuadraticTask,
        w_hat: &DVector<f64>,
        tolerance: f64,
    ) -> Result<Self, CapacityError> {
        let (_, grad) = loss_and_gradient(m, task, w_hat)?;
        let grad_norm = sup_norm(&grad);
        if !(grad_norm <= tolerance) {
            return Err(CapacityError::StationarityViolated { grad_norm, tolerance });
        }
        Self::at_point(m, task, w_hat)
    }

    pub fn dim(&self) -> usize {
        self.k_tilde.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.k_tilde.ncols()
    }

    pub fn receptive_field(&self) -> usize {
        self.dim() / self.input_dim
    }

    pub fn basis(&self) -> Result<ConstraintBasis, CapacityError> {
        ConstraintBasis::from_constraints(&self.k_tilde)
    }

    /// Joint basis of the constraint columns of the listed parameters.
    pub fn block_basis(&self, params: &[usize]) -> ConstraintBasis {
        let mut cols = params.to_vec();
        cols.sort_unstable();
        ConstraintBasis::spanning(&self.k_tilde.select_columns(&cols))
    }
}

/// Constraint basis at a fitted optimum.
pub fn constraint_basis(
    m: &dyn Manifold,
    task: &QuadraticTask,
    w_hat: &DVector<f64>,
    tolerance: f64,
) -> Result<ConstraintBasis, CapacityError> {
    ConstraintMatrix::at_optimum(m, task, w_hat, tolerance)?.basis()
}

/// Numerical rank of `Σ ∂A/∂W` at a generic point.
pub fn effective_parameter_count(
    m: &dyn Manifold,
    task: &QuadraticTask,
    w: &DVector<f64>,
) -> Result<usize, CapacityError> {
    Ok(ConstraintBasis::spanning(&ConstraintMatrix::at_point(m, task, w)?.k_tilde).kappa)
}

/// A labelled subspace given by an orthonormal basis.
#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    pub s: DMatrix<f64>,
    pub label: String,
}

impl Subspace {
    /// Columns that are not orthonormal are re-orthonormalized (thin QR) with
    /// a warning; dependent columns are rejected.
    pub fn new(s: DMatrix<f64>, label: impl Into<String>) -> Result<Self, CapacityError> {
        let label = label.into();
        if s.ncols() == 0 || orthonormality_defect(&s) <= 1e-10 {
            return Ok(Self { s, label });
        }
        warn!("subspace `{label}` is not orthonormal; orthonormalizing");
        match orthonormalize(&s) {
            Some(q) => Ok(Self { s: q, label }),
            None => Err(CapacityError::DependentSubspace(label)),
        }
    }

    pub fn one_hot(dim: usize, index: usize, label: impl Into<String>) -> Self {
        let mut s = DMatrix::zeros(dim, 1);
        s[(index, 0)] = 1.0;
        Self { s, label: label.into() }
    }

    /// The `d` one-hot directions of lag `lag` (zero-based position in the
    /// lag-major layout; labelled with the one-based lag).
    pub fn lag(n: usize, d: usize, lag: usize) -> Self {
        let mut s = DMatrix::zeros(n * d, d);
        for a in 0..d {
            s[(lag * d + a, a)] = 1.0;
        }
        Self {
            s,
            label: format!("lag {}", lag + 1),
        }
    }

    pub fn full(dim: usize) -> Self {
        Self {
            s: DMatrix::identity(dim, dim),
            label: "full".into(),
        }
    }

    pub fn direction(v: &DVector<f64>, label: impl Into<String>) -> Result<Self, CapacityError> {
        Self::new(DMatrix::from_column_slice(v.len(), 1, v.as_slice()), label)
    }

    pub fn dim(&self) -> usize {
        self.s.nrows()
    }

    /// `n_S`.
    pub fn rank(&self) -> usize {
        self.s.ncols()
    }
}

/// One subspace per lag.
pub fn lag_subspaces(n: usize, d: usize) -> Vec<Subspace> {
    (0..n).map(|i| Subspace::lag(n, d, i)).collect()
}

/// The eigenvectors of `sigma`, by descending eigenvalue.
pub fn covariance_eigen_subspaces(sigma: &DMatrix<f64>) -> Vec<Subspace> {
    let (_, vecs) = sym_eigen_desc(sigma);
    (0..vecs.ncols())
        .map(|j| Subspace {
            s: vecs.columns(j, 1).into_owned(),
            label: format!("eigen {}", j + 1),
        })
        .collect()
}

fn check_dim(expected: usize, got: usize) -> Result<(), CapacityError> {
    if expected == got {
        Ok(())
    } else {
        Err(CapacityError::ShapeMismatch { expected, got })
    }
}

/// `‖KᵀS‖_F²`.
pub fn capacity_of(basis: &ConstraintBasis, s: &Subspace) -> Result<f64, CapacityError> {
    check_dim(basis.dim(), s.dim())?;
    Ok(basis.k.tr_mul(&s.s).norm_squared())
}

/// Capacity per lag: for lag `i` the sum over its `d` one-hot directions.
pub fn spatial_cpi(basis: &ConstraintBasis, input_dim: usize) -> Result<Vec<f64>, CapacityError> {
    if input_dim == 0 || basis.dim() % input_dim != 0 {
        return Err(CapacityError::ShapeMismatch {
            expected: input_dim,
            got: basis.dim(),
        });
    }
    let n = basis.dim() / input_dim;
    let mut cpi = vec![0.0; n];
    for r in 0..basis.dim() {
        cpi[r / input_dim] += basis.k.row(r).norm_squared();
    }
    Ok(cpi)
}

/// Capacities of the eigenvectors of `sigma`, by descending eigenvalue.
pub fn covariance_eigen_capacity(basis: &ConstraintBasis, sigma: &DMatrix<f64>) -> Result<Vec<f64>, CapacityError> {
    check_dim(basis.dim(), sigma.nrows())?;
    let (_, vecs) = sym_eigen_desc(sigma);
    let proj = basis.k.tr_mul(&vecs);
    Ok((0..proj.ncols()).map(|j| proj.column(j).norm_squared()).collect())
}

/// `κ_{K₁⊕K₂}(S) − κ_{K₂}(S)`, unclamped.
pub fn conditional_capacity(
    joint: &ConstraintBasis,
    sub: &ConstraintBasis,
    s: &Subspace,
) -> Result<f64, CapacityError> {
    check_dim(joint.dim(), sub.dim())?;
    Ok(capacity_of(joint, s)? - capacity_of(sub, s)?)
}

fn validate_partition(grouping: &[Vec<usize>], p: usize) -> Result<(), CapacityError> {
    if grouping.is_empty() {
        return Err(CapacityError::InvalidPartition("no blocks".into()));
    }
    let mut seen = vec![false; p];
    for (b, block) in grouping.iter().enumerate() {
        if block.is_empty() {
            return Err(CapacityError::InvalidPartition(format!("block {b} is empty")));
        }
        for &j in block {
            if j >= p {
                return Err(CapacityError::InvalidPartition(format!(
                    "parameter {j} out of range (p = {p})"
                )));
            }
            if seen[j] {
                return Err(CapacityError::InvalidPartition(format!("parameter {j} appears twice")));
            }
            seen[j] = true;
        }
    }
    if let Some(j) = seen.iter().position(|s| !s) {
        return Err(CapacityError::InvalidPartition(format!("parameter {j} is not covered")));
    }
    Ok(())
}

fn cpi_of(basis: &ConstraintBasis, d: usize) -> Vec<f64> {
    spatial_cpi(basis, d).expect("constraint dimension is n·d")
}

/// Conditional spatial capacity of each block given the blocks before it.
/// The vectors telescope to the joint spatial CPI.
pub fn conditional_chain(cm: &ConstraintMatrix, grouping: &[Vec<usize>]) -> Result<Vec<Vec<f64>>, CapacityError> {
    validate_partition(grouping, cm.param_count())?;
    let d = cm.input_dim;
    let mut union: Vec<usize> = Vec::new();
    let mut prev = vec![0.0; cm.receptive_field()];
    let mut chain = Vec::with_capacity(grouping.len());
    for block in grouping {
        union.extend_from_slice(block);
        let cpi = cpi_of(&cm.block_basis(&union), d);
        chain.push(cpi.iter().zip(&prev).map(|(c, p)| c - p).collect());
        prev = cpi;
    }
    Ok(chain)
}

/// Reverses the block order of a grouping.
pub fn backward(grouping: &[Vec<usize>]) -> Vec<Vec<usize>> {
    grouping.iter().rev().cloned().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockContribution {
    pub block: usize,
    pub params: usize,
    /// Conditional capacity of the block given every other block.
    pub marginal_total: f64,
    pub marginal_cpi: Vec<f64>,
    /// Capacity of the block's constraints alone.
    pub independent_total: f64,
    pub independent_cpi: Vec<f64>,
}

pub fn marginal_contributions(
    cm: &ConstraintMatrix,
    grouping: &[Vec<usize>],
) -> Result<Vec<BlockContribution>, CapacityError> {
    validate_partition(grouping, cm.param_count())?;
    let d = cm.input_dim;
    let all: Vec<usize> = (0..cm.param_count()).collect();
    let full = cpi_of(&cm.block_basis(&all), d);
    Ok(grouping
        .iter()
        .enumerate()
        .map(|(b, block)| {
            let rest: Vec<usize> = grouping
                .iter()
                .enumerate()
                .filter(|(o, _)| *o != b)
                .flat_map(|(_, blk)| blk.iter().copied())
                .collect();
            let without = cpi_of(&cm.block_basis(&rest), d);
            let marginal_cpi: Vec<f64> = full.iter().zip(&without).map(|(f, w)| f - w).collect();
            let independent_cpi = cpi_of(&cm.block_basis(block), d);
            BlockContribution {
                block: b,
                params: block.len(),
                marginal_total: marginal_cpi.iter().sum(),
                marginal_cpi,
                independent_total: independent_cpi.iter().sum(),
                independent_cpi,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RedundancyConfig {
    pub freezes: usize,
    /// A block is flagged when its full-space marginal contribution is at
    /// most this value.
    pub threshold: f64,
    /// Allowed relative excess loss of a refit.
    pub recovery_tolerance: f64,
    pub fit: FitConfig,
    pub seed: u64,
}

impl Default for RedundancyConfig {
    fn default() -> Self {
        Self {
            freezes: 20,
            threshold: 1e-6,
            recovery_tolerance: 1e-6,
            fit: FitConfig::default().with_restarts(16),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FreezeTrial {
    pub frozen_values: Vec<f64>,
    pub loss: f64,
    pub relative_excess: f64,
    pub recovered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RedundancyRecord {
    pub block: Vec<usize>,
    pub marginal: f64,
    pub redundant: bool,
    pub reference_loss: f64,
    pub trials: Vec<FreezeTrial>,
    /// `Some(all trials recovered)` when the block was flagged.
    pub recovered: Option<bool>,
}

/// Flags `block` when its marginal contribution vanishes; flagged blocks are
/// frozen at fresh random values and the remaining parameters re-optimized.
/// A trial recovers when `(L_refit − L̂) / max(L̂, 1e-10·v*)` is within the
/// recovery tolerance.
pub fn redundancy_check(
    m: &dyn Manifold,
    task: &QuadraticTask,
    w_hat: &DVector<f64>,
    tolerance: f64,
    block: &[usize],
    cfg: &RedundancyConfig,
) -> Result<RedundancyRecord, CapacityError> {
    let cm = ConstraintMatrix::at_optimum(m, task, w_hat, tolerance)?;
    let p = cm.param_count();
    if block.is_empty() || block.iter().any(|&j| j >= p) {
        return Err(CapacityError::InvalidPartition(format!(
            "block {block:?} is not a non-empty subset of 0..{p}"
        )));
    }
    let all: Vec<usize> = (0..p).collect();
    let rest: Vec<usize> = all.iter().copied().filter(|j| !block.contains(j)).collect();
    let marginal = cm.block_basis(&all).kappa as f64 - cm.block_basis(&rest).kappa as f64;
    let redundant = marginal <= cfg.threshold;
    let (reference_loss, _) = loss_and_gradient(m, task, w_hat)?;
    let mut record = RedundancyRecord {
        block: block.to_vec(),
        marginal,
        redundant,
        reference_loss,
        trials: Vec::new(),
        recovered: None,
    };
    if !redundant {
        return Ok(record);
    }
    let rms = (block.iter().map(|&j| w_hat[j] * w_hat[j]).sum::<f64>() / block.len() as f64).sqrt();
    let scale = if rms > 0.0 { rms } else { 1.0 };
    let denom = reference_loss.max(1e-10 * task.v_star.max(f64::MIN_POSITIVE));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for t in 0..cfg.freezes {
        let frozen_values: Vec<f64> = block.iter().map(|_| scale * random_nonzero(&mut rng, 0.5, 1.5)).collect();
        let pins: Vec<(usize, f64)> = block.iter().copied().zip(frozen_values.iter().copied()).collect();
        let frozen = Frozen::new(m, &pins)?;
        let fit_cfg = cfg.fit.with_seed(cfg.fit.seed.wrapping_add(t as u64));
        let cold = fit(&frozen, task, &fit_cfg)?;
        let warm = fit_from(&frozen, task, frozen.restrict(w_hat), &fit_cfg)?;
        let loss = cold.loss.min(warm.loss);
        let relative_excess = (loss - reference_loss) / denom;
        record.trials.push(FreezeTrial {
            frozen_values,
            loss,
            relative_excess,
            recovered: relative_excess <= cfg.recovery_tolerance,
        });
    }
    record.recovered = Some(record.trials.iter().all(|t| t.recovered));
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorBoundRow {
    pub label: String,
    pub n_s: usize,
    pub kappa_s: f64,
    /// `n_S − κ_S`, normalized to sum to 1 over the table when
    /// [`ErrorBoundTable::normalized`].
    pub bound: f64,
    pub error_mean: f64,
    pub error_std: f64,
    /// Mean of the raw `ε_S = ‖XᵀS‖²`.
    pub raw_error_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorBoundTable {
    pub rows: Vec<ErrorBoundRow>,
    pub fits: usize,
    /// False when the table has no capacity deficit (`κ_S = n_S`
    /// everywhere); both series are then reported unnormalized.
    pub normalized: bool,
}

impl ErrorBoundTable {
    pub fn bounds(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.bound).collect()
    }

    pub fn error_means(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.error_mean).collect()
    }
}

/// Capacity bounds `n_S − κ_S` against the realized squared errors of
/// several fits. Realized errors are normalized per fit before averaging.
pub fn error_bound_analysis(
    basis: &ConstraintBasis,
    fits: &[FitResult],
    target: &DVector<f64>,
    subspaces: &[Subspace],
) -> Result<ErrorBoundTable, CapacityError> {
    if fits.len() < 2 {
        return Err(CapacityError::InsufficientFits(fits.len()));
    }
    check_dim(basis.dim(), target.len())?;
    for s in subspaces {
        check_dim(basis.dim(), s.dim())?;
    }
    let mut deficits = Vec::with_capacity(subspaces.len());
    let mut kappas = Vec::with_capacity(subspaces.len());
    for s in subspaces {
        let k = capacity_of(basis, s)?;
        kappas.push(k);
        deficits.push(s.rank() as f64 - k);
    }
    let total_deficit: f64 = deficits.iter().sum();
    let normalized = total_deficit > 1e-8;

    let mut raw = vec![vec![0.0; fits.len()]; subspaces.len()];
    for (f, fr) in fits.iter().enumerate() {
        check_dim(target.len(), fr.a_hat.len())?;
        let x = &fr.a_hat - target;
        for (i, s) in subspaces.iter().enumerate() {
            raw[i][f] = s.s.tr_mul(&x).norm_squared();
        }
    }
    let mut scaled = raw.clone();
    if normalized {
        for f in 0..fits.len() {
            let total: f64 = raw.iter().map(|r| r[f]).sum();
            for r in scaled.iter_mut() {
                r[f] = if total > 0.0 { r[f] / total } else { 0.0 };
            }
        }
    }
    let rows = subspaces
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (mean, std) = mean_std(&scaled[i]);
            ErrorBoundRow {
                label: s.label.clone(),
                n_s: s.rank(),
                kappa_s: kappas[i],
                bound: if normalized { deficits[i] / total_deficit } else { deficits[i] },
                error_mean: mean,
                error_std: std,
                raw_error_mean: mean_std(&raw[i]).0,
            }
        })
        .collect();
    Ok(ErrorBoundTable {
        rows,
        fits: fits.len(),
        normalized,
    })
}

/// Mean and sample standard deviation.
fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Everything the analyses report about one fitted model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapacityReport {
    pub label: String,
    pub param_count: usize,
    pub total_kappa: usize,
    pub threshold: f64,
    pub spectrum: Vec<f64>,
    pub spatial_cpi: Vec<f64>,
    pub covariance_eigen_capacity: Vec<f64>,
    pub conditional_chains: BTreeMap<String, Vec<Vec<f64>>>,
    /// Error bounds with one subspace per lag.
    pub lag_error_bounds: Option<ErrorBoundTable>,
    /// Error bounds along the covariance eigenvectors.
    pub eigen_error_bounds: Option<ErrorBoundTable>,
}

impl CapacityReport {
    pub fn new(
        label: impl Into<String>,
        cm: &ConstraintMatrix,
        basis: &ConstraintBasis,
        sigma: &DMatrix<f64>,
    ) -> Result<Self, CapacityError> {
        Ok(Self {
            label: label.into(),
            param_count: cm.param_count(),
            total_kappa: basis.kappa,
            threshold: basis.threshold,
            spectrum: basis.spectrum.clone(),
            spatial_cpi: spatial_cpi(basis, cm.input_dim)?,
            covariance_eigen_capacity: covariance_eigen_capacity(basis, sigma)?,
            conditional_chains: BTreeMap::new(),
            lag_error_bounds: None,
            eigen_error_bounds: None,
        })
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    /// One row per lag: `lag, cpi, bound, error_mean, error_std`. The error
    /// columns are empty without lag error bounds.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["lag", "cpi", "bound", "error_mean", "error_std"])?;
        for (i, cpi) in self.spatial_cpi.iter().enumerate() {
            let mut rec = vec![(i + 1).to_string(), format!("{cpi:.16e}")];
            match &self.lag_error_bounds {
                Some(t) => {
                    let r = &t.rows[i];
                    rec.extend([r.bound, r.error_mean, r.error_std].iter().map(|v| format!("{v:.16e}")));
                }
                None => rec.extend(std::iter::repeat_n(String::new(), 3)),
            }
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archzoo::{DilationPattern, LinearManifold, ModelManifold, ScaledDirection};
    use crate::covkit::{build_covariance, exact_predictor, AutocovarianceSpec};
    use crate::optim::fit;

    fn task(spec: AutocovarianceSpec) -> QuadraticTask {
        let cov = build_covariance(&spec).unwrap();
        let pred = exact_predictor(&cov).unwrap();
        QuadraticTask::from_predictor(&cov, &pred)
    }

    #[test]
    fn fully_connected_has_full_capacity() {
        let t = task(AutocovarianceSpec::power_law(1.0, 16));
        let m = ModelManifold::fully_connected(16, 1).unwrap();
        let f = fit(&m, &t, &FitConfig::default().with_restarts(2)).unwrap();
        let basis = constraint_basis(&m, &t, &f.w_hat, f.tolerance).unwrap();
        assert_eq!(basis.kappa, 16);
        for c in spatial_cpi(&basis, 1).unwrap() {
            assert!((c - 1.0).abs() < 1e-10);
        }
        let eig = covariance_eigen_capacity(&basis, &t.sigma).unwrap();
        assert!(eig.iter().all(|c| (c - 1.0).abs() < 1e-10));
    }

    #[test]
    fn one_parameter_basis_is_normalized_constraint() {
        let t = task(AutocovarianceSpec::power_law(1.0, 8));
        let a0 = DVector::from_fn(8, |i, _| 1.0 / (1.0 + i as f64));
        let m = ScaledDirection::new(a0.clone(), 1);
        let f = fit(&m, &t, &FitConfig::default().with_restarts(1)).unwrap();
        let basis = constraint_basis(&m, &t, &f.w_hat, f.tolerance).unwrap();
        assert_eq!(basis.kappa, 1);
        let expected = &t.sigma * &a0;
        let expected = &expected / expected.norm();
        let dot = basis.k.column(0).dot(&expected);
        assert!((dot.abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hierarchical_single_channel_has_seven_effective_parameters() {
        let t = task(AutocovarianceSpec::power_law(1.0, 64));
        let m = ModelManifold::hierarchical(6, 2, 1, 1, DilationPattern::Exponential).unwrap();
        let f = fit(&m, &t, &FitConfig::default().with_restarts(2)).unwrap();
        let basis = constraint_basis(&m, &t, &f.w_hat, f.tolerance).unwrap();
        assert_eq!(m.param_count(), 12);
        assert_eq!(basis.kappa, 7);
        let total: f64 = spatial_cpi(&basis, 1).unwrap().iter().sum();
        assert!((total - 7.0).abs() < 1e-8);
    }

    #[test]
    fn stationarity_is_enforced() {
        let t = task(AutocovarianceSpec::power_law(1.0, 8));
        let m = ModelManifold::fully_connected(8, 1).unwrap();
        let w = DVector::zeros(8);
        let err = constraint_basis(&m, &t, &w, 1e-9).unwrap_err();
        assert!(matches!(err, CapacityError::StationarityViolated { .. }));
    }

    #[test]
    fn zero_constraints_are_degenerate() {
        let err = ConstraintBasis::from_constraints(&DMatrix::zeros(4, 2)).unwrap_err();
        assert_eq!(err, CapacityError::DegenerateJacobian);
    }

    #[test]
    fn subspace_is_orthonormalized() {
        let s = DMatrix::from_column_slice(3, 2, &[1.0, 1.0, 0.0, 0.0, 2.0, 0.0]);
        let sub = Subspace::new(s, "skew").unwrap();
        assert!(orthonormality_defect(&sub.s) < 1e-12);
        let dep = DMatrix::from_column_slice(3, 2, &[1.0, 1.0, 0.0, 2.0, 2.0, 0.0]);
        assert!(Subspace::new(dep, "dep").is_err());
    }

    #[test]
    fn partition_errors() {
        let cm = ConstraintMatrix {
            k_tilde: DMatrix::identity(3, 3),
            input_dim: 1,
        };
        assert!(conditional_chain(&cm, &[vec![0, 1]]).is_err());
        assert!(conditional_chain(&cm, &[vec![0, 1], vec![1, 2]]).is_err());
        assert!(conditional_chain(&cm, &[vec![0, 1, 2], vec![]]).is_err());
        assert!(conditional_chain(&cm, &[vec![0, 1, 5]]).is_err());
        let single = conditional_chain(&cm, &[vec![0, 1, 2]]).unwrap();
        assert_eq!(single, vec![vec![1.0, 1.0, 1.0]]);
    }

    #[test]
    fn duplicated_block_has_zero_marginal() {
        let b = DMatrix::from_column_slice(4, 3, &[1.0, 0.5, 0.0, 0.0, 0.0, 1.0, 0.2, 0.0, 1.0, 0.5, 0.0, 0.0]);
        let m = LinearManifold::new(b);
        let t = task(AutocovarianceSpec::power_law(1.0, 4));
        let cm = ConstraintMatrix::at_point(&m, &t, &DVector::zeros(3)).unwrap();
        let contrib = marginal_contributions(&cm, &[vec![0], vec![1], vec![2]]).unwrap();
        assert!(contrib[0].marginal_total.abs() < 1e-10);
        assert!(contrib[2].marginal_total.abs() < 1e-10);
        assert!((contrib[1].marginal_total - 1.0).abs() < 1e-10);
        for c in &contrib {
            assert!(c.independent_total + 1e-8 >= c.marginal_total);
        }
    }

    #[test]
    fn product_manifold_block_is_redundant_and_recoverable() {
        let t = task(AutocovarianceSpec::power_law(1.0, 8));
        let a0 = DVector::from_fn(8, |i, _| 0.5f64.powi(i as i32));
        let m = ScaledDirection::new(a0, 2);
        let f = fit(&m, &t, &FitConfig::default()).unwrap();
        let cfg = RedundancyConfig {
            freezes: 3,
            ..RedundancyConfig::default()
        };
        let rec = redundancy_check(&m, &t, &f.w_hat, f.tolerance, &[1], &cfg).unwrap();
        assert!(rec.redundant);
        assert_eq!(rec.recovered, Some(true));
    }

    #[test]
    fn fully_connected_coefficient_is_not_redundant() {
        let t = task(AutocovarianceSpec::power_law(1.0, 6));
        let m = ModelManifold::fully_connected(6, 1).unwrap();
        let f = fit(&m, &t, &FitConfig::default().with_restarts(1)).unwrap();
        let rec = redundancy_check(&m, &t, &f.w_hat, f.tolerance, &[2], &RedundancyConfig::default()).unwrap();
        assert!(!rec.redundant);
        assert!(rec.trials.is_empty());
    }

    #[test]
    fn error_bounds_need_two_fits() {
        let basis = ConstraintBasis::from_constraints(&DMatrix::identity(2, 2)).unwrap();
        let err = error_bound_analysis(&basis, &[], &DVector::zeros(2), &[]).unwrap_err();
        assert_eq!(err, CapacityError::InsufficientFits(0));
    }

    #[test]
    fn csv_has_one_row_per_lag() {
        let cm = ConstraintMatrix {
            k_tilde: DMatrix::identity(3, 3),
            input_dim: 1,
        };
        let basis = cm.basis().unwrap();
        let rep = CapacityReport::new("id", &cm, &basis, &DMatrix::identity(3, 3)).unwrap();
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("lag,cpi,bound,error_mean,error_std"));
    }
}
