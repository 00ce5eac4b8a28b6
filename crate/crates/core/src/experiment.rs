//! Declarative experiments: a config is resolved into a sweep of
//! architectures, each is fitted once, and every requested analysis writes
//! `<outdir>/<analysis>.csv`. A run also writes `report.json` (deterministic
//! results) and `manifest.json` (hashes, seeds, timings, status).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::archzoo::{ArchError, DilationPattern, Manifold, ModelManifold};
use crate::capacity::{
    backward, conditional_chain, covariance_eigen_subspaces, effective_parameter_count, error_bound_analysis,
    lag_subspaces, marginal_contributions, redundancy_check, CapacityError, CapacityReport,
    ConstraintBasis, ConstraintMatrix, RedundancyConfig,
};
use crate::config::{
    isqrt, AnalysisSpec, ArchitectureSection, ChainOrder, ConfigError, ExperimentConfig, RedundancyBlocks,
    SweepPoint,
};
use crate::covkit::{build_covariance, exact_predictor, implied_autocovariance, CovError, CovarianceMatrix, ExactPredictor};
use crate::featurespace::{estimate_feature_moments, feature_capacity, feature_task, input_space_capacity, FeatureError};
use crate::linalg::sym_eigen_desc;
use crate::optim::{self, FitConfig, FitResult, OptimError, QuadraticTask};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Cov(#[from] CovError),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Capacity(#[from] CapacityError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("csv error: {0}")]
    Csv(String),
    #[error("json error: {0}")]
    Json(String),
    #[error("configs cannot be compared: {0}")]
    IncompatibleConfigs(String),
    #[error("output check failed: {0}")]
    OutputCheck(String),
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Command-line overrides applied on top of a config.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub restarts: Option<usize>,
    pub max_iterations: Option<usize>,
    pub gradient_tolerance: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<(), ConfigError> {
        if let Some(d) = &self.out_dir {
            cfg.output.dir = d.clone();
        }
        if let Some(s) = self.seed {
            cfg.fit.seed = s;
        }
        if let Some(r) = self.restarts {
            cfg.fit.restarts = r;
        }
        if let Some(m) = self.max_iterations {
            cfg.fit.max_iterations = m;
        }
        if let Some(t) = self.gradient_tolerance {
            cfg.fit.gradient_tolerance = t;
        }
        cfg.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputRecord {
    pub analysis: String,
    pub file: String,
    pub seconds: f64,
}

/// Provenance of a run. Unlike `report.json` it carries wall-clock data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub name: String,
    pub config: String,
    pub config_sha256: String,
    pub fit: FitConfig,
    pub feature_seed: Option<u64>,
    pub started_unix: f64,
    pub fit_seconds: f64,
    pub total_seconds: f64,
    pub outputs: Vec<OutputRecord>,
    pub status: RunStatus,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitSummary {
    pub loss: f64,
    pub residual_variance: f64,
    pub grad_norm: f64,
    pub tolerance: f64,
    pub converged: bool,
    pub iterations: usize,
    pub best_restart: usize,
    pub restart_losses: Vec<f64>,
    pub w_hat: Vec<f64>,
    pub a_hat: Vec<f64>,
}

impl From<&FitResult> for FitSummary {
    fn from(f: &FitResult) -> Self {
        Self {
            loss: f.loss,
            residual_variance: f.residual_variance,
            grad_norm: f.grad_norm,
            tolerance: f.tolerance,
            converged: f.converged,
            iterations: f.iterations,
            best_restart: f.best_restart,
            restart_losses: f.restart_losses.clone(),
            w_hat: f.w_hat.as_slice().to_vec(),
            a_hat: f.a_hat.as_slice().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointReport {
    pub label: String,
    pub channels: Option<usize>,
    pub fit: FitSummary,
    pub capacity: CapacityReport,
}

/// Deterministic results of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub name: String,
    pub config_sha256: String,
    pub receptive_field: usize,
    pub input_dim: usize,
    pub v_star: f64,
    pub fit: FitConfig,
    pub points: Vec<PointReport>,
    pub analyses: BTreeMap<String, Value>,
}

/// A fitted sweep point with its constraint space.
pub struct FittedPoint {
    pub point: SweepPoint,
    pub fit: FitResult,
    pub cm: ConstraintMatrix,
    pub basis: ConstraintBasis,
    pub report: CapacityReport,
}

/// The resolved problem shared by every analysis of a run.
pub struct Problem {
    pub cov: CovarianceMatrix,
    pub pred: ExactPredictor,
    pub task: QuadraticTask,
    pub n: usize,
    pub d: usize,
}

impl Problem {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self, ExperimentError> {
        let spec = cfg.process_spec()?;
        let cov = build_covariance(&spec)?;
        let pred = exact_predictor(&cov)?;
        let d = cfg.input_dim();
        let task = if d == 1 {
            QuadraticTask::from_predictor(&cov, &pred)
        } else {
            QuadraticTask::lifted(&cov, &pred, d)
        };
        Ok(Self {
            n: cov.n(),
            cov,
            pred,
            task,
            d,
        })
    }
}

/// Fits `m` and extracts its constraint space; unconverged fits are refused.
pub fn fit_and_analyze(
    m: &ModelManifold,
    task: &QuadraticTask,
    cfg: &FitConfig,
    label: &str,
) -> Result<(FitResult, ConstraintMatrix, ConstraintBasis, CapacityReport), ExperimentError> {
    let fit = optim::fit(m, task, cfg)?;
    fit.ensure_converged()?;
    let cm = ConstraintMatrix::at_optimum(m, task, &fit.w_hat, fit.tolerance)?;
    let basis = cm.basis()?;
    let report = CapacityReport::new(label, &cm, &basis, &task.sigma)?;
    Ok((fit, cm, basis, report))
}

pub fn fit_sweep(
    cfg: &ExperimentConfig,
    problem: &Problem,
) -> Result<Vec<FittedPoint>, ExperimentError> {
    cfg.sweep()?
        .into_iter()
        .map(|point| {
            log::info!("fitting {} ({} parameters)", point.label, point.manifold.param_count());
            let (fit, cm, basis, report) = fit_and_analyze(&point.manifold, &problem.task, &cfg.fit, &point.label)?;
            Ok(FittedPoint {
                point,
                fit,
                cm,
                basis,
                report,
            })
        })
        .collect()
}

/// A CSV table with an optional set of column-sum checks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    /// `(column, expected sum)` verified after the file is written.
    pub sum_checks: Vec<(String, f64)>,
}

impl Table {
    fn new(header: Vec<String>) -> Self {
        Self {
            header,
            ..Self::default()
        }
    }

    /// A table indexed by `index_name = 1..=len` with one numeric column per
    /// series.
    fn indexed(index_name: &str, series: &[(String, Vec<f64>)]) -> Self {
        let len = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
        let mut t = Self::new(
            std::iter::once(index_name.to_string())
                .chain(series.iter().map(|(name, _)| name.clone()))
                .collect(),
        );
        for i in 0..len {
            let mut row = vec![(i + 1).to_string()];
            row.extend(series.iter().map(|(_, v)| v.get(i).map(|x| num(*x)).unwrap_or_default()));
            t.rows.push(row);
        }
        t
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, ExperimentError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).map_err(|e| ExperimentError::Csv(e.to_string()))?;
        for r in &self.rows {
            w.write_record(r).map_err(|e| ExperimentError::Csv(e.to_string()))?;
        }
        w.into_inner().map_err(|e| ExperimentError::Csv(e.to_string()))
    }
}

pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Re-reads a written CSV and checks the recorded column sums.
pub fn check_column_sums(path: &Path, checks: &[(String, f64)]) -> Result<(), ExperimentError> {
    if checks.is_empty() {
        return Ok(());
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| io_error(path, e))?;
    let header = rdr.headers().map_err(|e| ExperimentError::Csv(e.to_string()))?.clone();
    let cols: Vec<(usize, f64, &str)> = checks
        .iter()
        .map(|(name, expected)| {
            header
                .iter()
                .position(|h| h == name)
                .map(|i| (i, *expected, name.as_str()))
                .ok_or_else(|| ExperimentError::OutputCheck(format!("{}: missing column {name}", path.display())))
        })
        .collect::<Result<_, _>>()?;
    let mut sums = vec![0.0; cols.len()];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| ExperimentError::Csv(e.to_string()))?;
        for (k, (i, _, name)) in cols.iter().enumerate() {
            let cell = rec.get(*i).unwrap_or("");
            if cell.is_empty() {
                continue;
            }
            sums[k] += cell
                .parse::<f64>()
                .map_err(|_| ExperimentError::OutputCheck(format!("{}: bad number {cell:?} in {name}", path.display())))?;
        }
    }
    for ((_, expected, name), sum) in cols.iter().zip(&sums) {
        if (sum - expected).abs() > 1e-6 {
            return Err(ExperimentError::OutputCheck(format!(
                "{}: column {name} sums to {sum}, expected {expected}",
                path.display()
            )));
        }
    }
    Ok(())
}

/// Output of one analysis.
pub struct AnalysisOutput {
    pub table: Table,
    pub report: Value,
}

fn to_value<T: Serialize>(v: &T) -> Result<Value, ExperimentError> {
    serde_json::to_value(v).map_err(|e| ExperimentError::Json(e.to_string()))
}

fn cpi_label(label: &str) -> String {
    format!("cpi_{label}")
}

fn total_capacity(
    cfg: &ExperimentConfig,
    problem: &Problem,
    points: &[FittedPoint],
) -> Result<AnalysisOutput, ExperimentError> {
    let mut t = Table::new(
        [
            "label",
            "channels",
            "params",
            "effective_params",
            "kappa",
            "loss",
            "residual_variance",
            "converged",
        ]
        .map(String::from)
        .to_vec(),
    );
    let mut rows = Vec::new();
    let mut push = |label: &str, channels: Option<usize>, m: &ModelManifold, fit: &FitResult, kappa: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.fit.seed);
        let w = m.init_params(&mut rng);
        let eff = effective_parameter_count(m, &problem.task, &w)?;
        t.rows.push(vec![
            label.to_string(),
            channels.map(|c| c.to_string()).unwrap_or_default(),
            m.param_count().to_string(),
            eff.to_string(),
            kappa.to_string(),
            num(fit.loss),
            num(fit.residual_variance),
            fit.converged.to_string(),
        ]);
        rows.push(json!({
            "label": label,
            "channels": channels,
            "params": m.param_count(),
            "effective_params": eff,
            "kappa": kappa,
            "loss": fit.loss,
            "residual_variance": fit.residual_variance,
        }));
        Ok::<(), ExperimentError>(())
    };
    for p in points {
        push(&p.point.label, p.point.channels, &p.point.manifold, &p.fit, p.basis.kappa)?;
    }
    let fc = ModelManifold::fully_connected(problem.n, problem.d)?;
    let (fit, _, basis, _) = fit_and_analyze(&fc, &problem.task, &cfg.fit, "fc")?;
    push("fc", None, &fc, &fit, basis.kappa)?;
    Ok(AnalysisOutput {
        table: t,
        report: json!({ "rows": rows, "v_star": problem.task.v_star }),
    })
}

fn spectrum(points: &[FittedPoint]) -> AnalysisOutput {
    let mut series = Vec::new();
    for p in points {
        series.push((format!("lambda_{}", p.point.label), p.basis.spectrum.clone()));
        series.push((
            format!("threshold_{}", p.point.label),
            vec![p.basis.threshold; p.basis.spectrum.len()],
        ));
    }
    let report = points
        .iter()
        .map(|p| (p.point.label.clone(), json!({ "kappa": p.basis.kappa, "threshold": p.basis.threshold })))
        .collect::<serde_json::Map<_, _>>();
    AnalysisOutput {
        table: Table::indexed("index", &series),
        report: Value::Object(report),
    }
}

fn spatial(points: &[FittedPoint]) -> AnalysisOutput {
    let series: Vec<(String, Vec<f64>)> = points
        .iter()
        .map(|p| (cpi_label(&p.point.label), p.report.spatial_cpi.clone()))
        .collect();
    let mut table = Table::indexed("lag", &series);
    table.sum_checks = points
        .iter()
        .map(|p| (cpi_label(&p.point.label), p.basis.kappa as f64))
        .collect();
    let report = points
        .iter()
        .map(|p| (p.point.label.clone(), json!({ "kappa": p.basis.kappa, "cpi": p.report.spatial_cpi })))
        .collect::<serde_json::Map<_, _>>();
    AnalysisOutput {
        table,
        report: Value::Object(report),
    }
}

fn cov_eigen(problem: &Problem, points: &[FittedPoint]) -> AnalysisOutput {
    let (vals, _) = sym_eigen_desc(&problem.task.sigma);
    let mut series = vec![("eigenvalue".to_string(), vals.as_slice().to_vec())];
    for p in points {
        series.push((
            format!("capacity_{}", p.point.label),
            p.report.covariance_eigen_capacity.clone(),
        ));
    }
    let mut table = Table::indexed("index", &series);
    table.sum_checks = points
        .iter()
        .map(|p| (format!("capacity_{}", p.point.label), p.basis.kappa as f64))
        .collect();
    let report = points
        .iter()
        .map(|p| (p.point.label.clone(), to_value(&p.report.covariance_eigen_capacity).unwrap_or(Value::Null)))
        .collect::<serde_json::Map<_, _>>();
    AnalysisOutput {
        table,
        report: Value::Object(report),
    }
}

fn chain(points: &mut [FittedPoint], order: ChainOrder) -> Result<AnalysisOutput, ExperimentError> {
    let key = match order {
        ChainOrder::Forward => "forward",
        ChainOrder::Backward => "backward",
    };
    let mut series = Vec::new();
    let mut checks = Vec::new();
    for p in points.iter_mut() {
        let forward = p.point.manifold.layer_blocks();
        let layers: Vec<usize> = match order {
            ChainOrder::Forward => (1..=forward.len()).collect(),
            ChainOrder::Backward => (1..=forward.len()).rev().collect(),
        };
        let grouping = match order {
            ChainOrder::Forward => forward,
            ChainOrder::Backward => backward(&forward),
        };
        let steps = conditional_chain(&p.cm, &grouping)?;
        for (layer, step) in layers.iter().zip(&steps) {
            series.push((format!("{}_layer{layer}", p.point.label), step.clone()));
        }
        let total: f64 = steps.iter().flatten().sum();
        if (total - p.basis.kappa as f64).abs() > 1e-6 {
            return Err(ExperimentError::OutputCheck(format!(
                "{}: conditional chain sums to {total}, total capacity is {}",
                p.point.label, p.basis.kappa
            )));
        }
        checks.extend(
            layers
                .iter()
                .zip(&steps)
                .map(|(l, step)| (format!("{}_layer{l}", p.point.label), step.iter().sum::<f64>())),
        );
        p.report.conditional_chains.insert(key.to_string(), steps);
    }
    let mut table = Table::indexed("lag", &series);
    table.sum_checks = checks;
    let report = points
        .iter()
        .map(|p| (p.point.label.clone(), to_value(&p.report.conditional_chains[key]).unwrap_or(Value::Null)))
        .collect::<serde_json::Map<_, _>>();
    Ok(AnalysisOutput {
        table,
        report: Value::Object(report),
    })
}

fn marginal(points: &[FittedPoint]) -> Result<AnalysisOutput, ExperimentError> {
    let mut series = Vec::new();
    let mut report = serde_json::Map::new();
    for p in points {
        let contributions = marginal_contributions(&p.cm, &p.point.manifold.layer_blocks())?;
        for c in &contributions {
            let l = c.block + 1;
            series.push((format!("{}_layer{l}_independent", p.point.label), c.independent_cpi.clone()));
            series.push((format!("{}_layer{l}_marginal", p.point.label), c.marginal_cpi.clone()));
        }
        report.insert(p.point.label.clone(), to_value(&contributions)?);
    }
    Ok(AnalysisOutput {
        table: Table::indexed("lag", &series),
        report: Value::Object(report),
    })
}

fn error_bounds(
    cfg: &ExperimentConfig,
    problem: &Problem,
    points: &mut [FittedPoint],
    restarts: usize,
) -> Result<AnalysisOutput, ExperimentError> {
    let mut t = Table::new(
        [
            "point", "basis", "index", "n_s", "kappa_s", "bound", "error_mean", "error_std",
        ]
        .map(String::from)
        .to_vec(),
    );
    let lags = lag_subspaces(problem.n, problem.d);
    let eigen = covariance_eigen_subspaces(&problem.task.sigma);
    let fit_cfg = cfg.fit.with_restarts(restarts);
    for p in points.iter_mut() {
        let fits: Vec<FitResult> = optim::fit_restarts(&p.point.manifold, &problem.task, &fit_cfg)?
            .into_iter()
            .filter(|f| f.converged)
            .collect();
        let best = fits
            .iter()
            .min_by(|a, b| a.loss.partial_cmp(&b.loss).unwrap_or(std::cmp::Ordering::Equal))
            .ok_or(CapacityError::InsufficientFits(0))?;
        let basis = ConstraintMatrix::at_optimum(&p.point.manifold, &problem.task, &best.w_hat, best.tolerance)?.basis()?;
        let lag_table = error_bound_analysis(&basis, &fits, &problem.task.target, &lags)?;
        let eigen_table = error_bound_analysis(&basis, &fits, &problem.task.target, &eigen)?;
        for (name, table) in [("lag", &lag_table), ("eigen", &eigen_table)] {
            for (i, r) in table.rows.iter().enumerate() {
                t.rows.push(vec![
                    p.point.label.clone(),
                    name.to_string(),
                    (i + 1).to_string(),
                    r.n_s.to_string(),
                    num(r.kappa_s),
                    num(r.bound),
                    num(r.error_mean),
                    num(r.error_std),
                ]);
            }
        }
        p.report.lag_error_bounds = Some(lag_table);
        p.report.eigen_error_bounds = Some(eigen_table);
    }
    let report = points
        .iter()
        .map(|p| {
            (
                p.point.label.clone(),
                json!({ "lag": p.report.lag_error_bounds, "eigen": p.report.eigen_error_bounds }),
            )
        })
        .collect::<serde_json::Map<_, _>>();
    Ok(AnalysisOutput {
        table: t,
        report: Value::Object(report),
    })
}

fn hierarchical_parts(cfg: &ExperimentConfig) -> (usize, usize, Vec<usize>, DilationPattern) {
    match &cfg.architecture {
        ArchitectureSection::Hierarchical {
            depth,
            kernel,
            channels,
            pattern,
            ..
        } => (*depth, *kernel, channels.values(), *pattern),
        _ => unreachable!("validated as hierarchical"),
    }
}

fn tiled_vs_repeated(cfg: &ExperimentConfig, problem: &Problem) -> Result<AnalysisOutput, ExperimentError> {
    let (depth, kernel, channels, _) = hierarchical_parts(cfg);
    let (blocks, _) = cfg.block_pattern().expect("validated block pattern");
    let mut series = Vec::new();
    let mut checks = Vec::new();
    let mut report = Vec::new();
    for c in channels {
        let mut kappas = BTreeMap::new();
        for (name, pattern) in [
            ("tiled", DilationPattern::Tiled { blocks }),
            ("repeated", DilationPattern::Repeated { blocks }),
        ] {
            let m = ModelManifold::hierarchical(depth, kernel, c, problem.d, pattern)?;
            let label = format!("{name}_c{c}");
            let (_, _, basis, rep) = fit_and_analyze(&m, &problem.task, &cfg.fit, &label)?;
            checks.push((cpi_label(&label), basis.kappa as f64));
            series.push((cpi_label(&label), rep.spatial_cpi.clone()));
            kappas.insert(name, basis.kappa);
        }
        report.push(json!({ "channels": c, "kappa": kappas }));
    }
    let mut table = Table::indexed("lag", &series);
    table.sum_checks = checks;
    Ok(AnalysisOutput {
        table,
        report: json!({ "blocks": blocks, "points": report }),
    })
}

fn multidim_scaling(
    cfg: &ExperimentConfig,
    problem: &Problem,
    dims: &[usize],
    factors: &[usize],
) -> Result<AnalysisOutput, ExperimentError> {
    let (depth, kernel, _, pattern) = hierarchical_parts(cfg);
    let mut series = Vec::new();
    let mut checks = Vec::new();
    let mut report = Vec::new();
    for &f in factors {
        for &d in dims {
            let c = f * isqrt(d);
            let task = QuadraticTask::lifted(&problem.cov, &problem.pred, d);
            let m = ModelManifold::hierarchical(depth, kernel, c, d, pattern)?;
            let label = format!("d{d}_c{c}");
            let (_, _, basis, rep) = fit_and_analyze(&m, &task, &cfg.fit, &label)?;
            let per_dim: Vec<f64> = rep.spatial_cpi.iter().map(|v| v / d as f64).collect();
            checks.push((cpi_label(&label), basis.kappa as f64 / d as f64));
            report.push(json!({
                "dim": d,
                "channels": c,
                "c2_over_d": (c * c) as f64 / d as f64,
                "kappa": basis.kappa,
                "normalized_cpi": per_dim,
            }));
            series.push((cpi_label(&label), per_dim));
        }
    }
    let mut table = Table::indexed("lag", &series);
    table.sum_checks = checks;
    Ok(AnalysisOutput {
        table,
        report: json!({ "points": report }),
    })
}

fn coefficient_comparison(problem: &Problem, points: &[FittedPoint]) -> AnalysisOutput {
    let mut t = Table::new(
        [
            "point",
            "lag",
            "a_hat",
            "a_star",
            "abs_diff",
            "rel_diff",
            "autocov_model",
            "autocov_true",
            "autocov_diff",
        ]
        .map(String::from)
        .to_vec(),
    );
    let n = problem.n;
    let truth = &problem.cov.autocov;
    let mut report = serde_json::Map::new();
    for p in points {
        let a = p.fit.a_hat.as_slice();
        let model = implied_autocovariance(a, problem.cov.c0(), n);
        for lag in 0..=n {
            let mut row = vec![p.point.label.clone(), lag.to_string()];
            if lag == 0 {
                row.extend(std::iter::repeat_n(String::new(), 4));
            } else {
                let (ah, at) = (a[lag - 1], problem.pred.a_star[lag - 1]);
                let abs = (ah - at).abs();
                row.extend([
                    num(ah),
                    num(at),
                    num(abs),
                    if at != 0.0 { num(abs / at.abs()) } else { String::new() },
                ]);
            }
            match &model {
                Some(mc) => row.extend([num(mc[lag]), num(truth[lag]), num(mc[lag] - truth[lag])]),
                None => row.extend([String::new(), num(truth[lag]), String::new()]),
            }
            t.rows.push(row);
        }
        let max_abs = a
            .iter()
            .zip(problem.pred.a_star.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        report.insert(
            p.point.label.clone(),
            json!({
                "max_abs_coefficient_diff": max_abs,
                "stable": model.is_some(),
                "autocov_model": model,
            }),
        );
    }
    AnalysisOutput {
        table: t,
        report: Value::Object(report),
    }
}

fn redundancy(
    cfg: &ExperimentConfig,
    problem: &Problem,
    points: &[FittedPoint],
    freezes: usize,
    blocks: RedundancyBlocks,
    restarts: usize,
) -> Result<AnalysisOutput, ExperimentError> {
    let mut t = Table::new(
        [
            "point",
            "block",
            "params",
            "marginal",
            "redundant",
            "trials",
            "recovered",
            "max_relative_excess",
        ]
        .map(String::from)
        .to_vec(),
    );
    let rcfg = RedundancyConfig {
        freezes,
        fit: cfg.fit.with_restarts(restarts),
        seed: cfg.fit.seed,
        ..RedundancyConfig::default()
    };
    let mut report = serde_json::Map::new();
    for p in points {
        let groups = match blocks {
            RedundancyBlocks::Layers => p.point.manifold.layer_blocks(),
            RedundancyBlocks::Parameters => (0..p.point.manifold.param_count()).map(|j| vec![j]).collect(),
        };
        let mut records = Vec::new();
        for (b, g) in groups.iter().enumerate() {
            let r = redundancy_check(&p.point.manifold, &problem.task, &p.fit.w_hat, p.fit.tolerance, g, &rcfg)?;
            let max_excess = r.trials.iter().map(|t| t.relative_excess).fold(f64::NAN, f64::max);
            t.rows.push(vec![
                p.point.label.clone(),
                (b + 1).to_string(),
                g.len().to_string(),
                num(r.marginal),
                r.redundant.to_string(),
                r.trials.len().to_string(),
                r.recovered.map(|v| v.to_string()).unwrap_or_default(),
                if r.trials.is_empty() { String::new() } else { num(max_excess) },
            ]);
            records.push(json!({
                "block": b + 1,
                "params": g.len(),
                "marginal": r.marginal,
                "redundant": r.redundant,
                "recovered": r.recovered,
                "reference_loss": r.reference_loss,
                "trial_losses": r.trials.iter().map(|t| t.loss).collect::<Vec<_>>(),
            }));
        }
        report.insert(p.point.label.clone(), Value::Array(records));
    }
    Ok(AnalysisOutput {
        table: t,
        report: Value::Object(report),
    })
}

fn feature_analysis(
    cfg: &ExperimentConfig,
    problem: &Problem,
    points: &[FittedPoint],
) -> Result<AnalysisOutput, ExperimentError> {
    let section = cfg.features.as_ref().expect("validated features section");
    let fmap = section.feature_map();
    let dphi = fmap.dim();
    let samples = section.samples.unwrap_or(200 * problem.n * dphi);
    let spec = cfg.process_spec()?;
    let moments = estimate_feature_moments(&spec, &fmap, samples, section.seed)?;
    let task = feature_task(&moments)?;
    let models = cfg.sweep_with_input_dim(dphi)?;
    let mut series = Vec::new();
    let mut checks = Vec::new();
    let mut report = serde_json::Map::new();
    for (p, model) in points.iter().zip(&models) {
        let m = &model.manifold;
        let mut best = optim::fit(m, &task, &cfg.fit)?;
        if dphi == 1 {
            let warm = optim::fit_from(m, &task, p.fit.w_hat.clone(), &cfg.fit)?;
            if warm.converged && (!best.converged || warm.loss < best.loss) {
                best = warm;
            }
        }
        best.ensure_converged()?;
        let basis = feature_capacity(m, &moments, &best.w_hat, best.tolerance)?;
        let cpi = input_space_capacity(&basis, problem.n, dphi)?;
        let label = format!("feature_cpi_{}", p.point.label);
        checks.push((label.clone(), basis.kappa as f64));
        series.push((label, cpi.clone()));
        if dphi == 1 {
            series.push((cpi_label(&p.point.label), p.report.spatial_cpi.clone()));
        }
        report.insert(
            p.point.label.clone(),
            json!({
                "kappa": basis.kappa,
                "loss": best.loss,
                "cpi": cpi,
            }),
        );
    }
    let mut table = Table::indexed("lag", &series);
    table.sum_checks = checks;
    Ok(AnalysisOutput {
        table,
        report: json!({
            "family": section.family,
            "degree": section.degree,
            "features_per_lag": dphi,
            "samples": samples,
            "seed": section.seed,
            "v_star_phi": task.v_star,
            "points": report,
        }),
    })
}

fn run_analysis(
    a: &AnalysisSpec,
    cfg: &ExperimentConfig,
    problem: &Problem,
    points: &mut [FittedPoint],
) -> Result<AnalysisOutput, ExperimentError> {
    match a {
        AnalysisSpec::TotalCapacity => total_capacity(cfg, problem, points),
        AnalysisSpec::Spectrum => Ok(spectrum(points)),
        AnalysisSpec::SpatialCpi => Ok(spatial(points)),
        AnalysisSpec::CovEigen => Ok(cov_eigen(problem, points)),
        AnalysisSpec::ConditionalChain { order } => chain(points, *order),
        AnalysisSpec::Marginal => marginal(points),
        AnalysisSpec::ErrorBounds { restarts } => error_bounds(cfg, problem, points, *restarts),
        AnalysisSpec::TiledVsRepeated => tiled_vs_repeated(cfg, problem),
        AnalysisSpec::MultidimScaling { dims, factors } => multidim_scaling(cfg, problem, dims, factors),
        AnalysisSpec::CoefficientComparison => Ok(coefficient_comparison(problem, points)),
        AnalysisSpec::Redundancy {
            freezes,
            blocks,
            restarts,
        } => redundancy(cfg, problem, points, *freezes, *blocks, *restarts),
        AnalysisSpec::FeatureCapacity => feature_analysis(cfg, problem, points),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), ExperimentError> {
    let mut text = serde_json::to_string_pretty(v).map_err(|e| ExperimentError::Json(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Loads a config file, applies overrides and runs it.
pub fn run_file(path: &Path, overrides: &Overrides) -> Result<RunManifest, ExperimentError> {
    let (mut cfg, bytes) = ExperimentConfig::load(path)?;
    overrides.apply(&mut cfg)?;
    run_config(&cfg, &bytes, &path.display().to_string())
}

/// Runs every analysis of `cfg`. `source` is the raw config text (hashed
/// into the manifest) and `config_label` its display name. When an analysis
/// fails the manifest is still written, listing the outputs produced so far.
pub fn run_config(
    cfg: &ExperimentConfig,
    source: &[u8],
    config_label: &str,
) -> Result<RunManifest, ExperimentError> {
    cfg.validate()?;
    let out = cfg.output.dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| io_error(&out, e))?;
    let stem = Path::new(config_label)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "experiment".into());
    let mut manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        name: cfg.display_name(&stem),
        config: config_label.to_string(),
        config_sha256: sha256_hex(source),
        fit: cfg.fit,
        feature_seed: cfg.features.as_ref().map(|f| f.seed),
        started_unix: unix_now(),
        fit_seconds: 0.0,
        total_seconds: 0.0,
        outputs: Vec::new(),
        status: RunStatus::Failed,
        error: None,
    };
    let start = Instant::now();
    let result = execute(cfg, &out, &mut manifest);
    manifest.total_seconds = start.elapsed().as_secs_f64();
    match result {
        Ok(()) => manifest.status = RunStatus::Complete,
        Err(ref e) => manifest.error = Some(e.to_string()),
    }
    write_json(&out.join("manifest.json"), &manifest)?;
    result.map(|_| manifest)
}

fn execute(cfg: &ExperimentConfig, out: &Path, manifest: &mut RunManifest) -> Result<(), ExperimentError> {
    let problem = Problem::from_config(cfg)?;
    let t0 = Instant::now();
    let mut points = if cfg.analyses.iter().any(AnalysisSpec::uses_sweep_fits) {
        fit_sweep(cfg, &problem)?
    } else {
        Vec::new()
    };
    manifest.fit_seconds = t0.elapsed().as_secs_f64();
    let mut analyses = BTreeMap::new();
    for a in &cfg.analyses {
        let t = Instant::now();
        let stem = a.output_stem();
        log::info!("running {stem}");
        let output = run_analysis(a, cfg, &problem, &mut points)?;
        let file = format!("{stem}.csv");
        let path = out.join(&file);
        std::fs::write(&path, output.table.to_csv()?).map_err(|e| io_error(&path, e))?;
        check_column_sums(&path, &output.table.sum_checks)?;
        analyses.insert(stem.clone(), output.report);
        manifest.outputs.push(OutputRecord {
            analysis: stem,
            file,
            seconds: t.elapsed().as_secs_f64(),
        });
    }
    let report = RunReport {
        name: manifest.name.clone(),
        config_sha256: manifest.config_sha256.clone(),
        receptive_field: problem.n,
        input_dim: problem.d,
        v_star: problem.task.v_star,
        fit: cfg.fit,
        points: points
            .iter()
            .map(|p| PointReport {
                label: p.point.label.clone(),
                channels: p.point.channels,
                fit: FitSummary::from(&p.fit),
                capacity: p.report.clone(),
            })
            .collect(),
        analyses,
    };
    write_json(&out.join("report.json"), &report)
}

/// Result of comparing two configs on the same task.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub receptive_field: usize,
    pub kappa_a: usize,
    pub kappa_b: usize,
    pub loss_a: f64,
    pub loss_b: f64,
    pub cpi_a: Vec<f64>,
    pub cpi_b: Vec<f64>,
    pub cpi_difference: Vec<f64>,
}

fn single_point(cfg: &ExperimentConfig, which: &str) -> Result<SweepPoint, ExperimentError> {
    let mut sweep = cfg.sweep()?;
    if sweep.len() != 1 {
        return Err(ExperimentError::IncompatibleConfigs(format!(
            "config {which} sweeps {} architectures; compare needs exactly one",
            sweep.len()
        )));
    }
    Ok(sweep.remove(0))
}

/// Fits the single architecture of each config on their common task and
/// writes `compare.csv` and `compare.json` to `out`.
pub fn compare(
    a: &ExperimentConfig,
    b: &ExperimentConfig,
    names: (&str, &str),
    out: &Path,
) -> Result<Comparison, ExperimentError> {
    let (spec_a, spec_b) = (a.process_spec()?, b.process_spec()?);
    if spec_a != spec_b {
        return Err(ExperimentError::IncompatibleConfigs(
            "the configs describe different processes or receptive fields".into(),
        ));
    }
    if a.input_dim() != b.input_dim() {
        return Err(ExperimentError::IncompatibleConfigs("the configs use different input_dim".into()));
    }
    let (pa, pb) = (single_point(a, "a")?, single_point(b, "b")?);
    let problem = Problem::from_config(a)?;
    let (fa, _, ka, ra) = fit_and_analyze(&pa.manifold, &problem.task, &a.fit, names.0)?;
    let (fb, _, kb, rb) = fit_and_analyze(&pb.manifold, &problem.task, &b.fit, names.1)?;
    let cmp = Comparison {
        a: names.0.to_string(),
        b: names.1.to_string(),
        receptive_field: problem.n,
        kappa_a: ka.kappa,
        kappa_b: kb.kappa,
        loss_a: fa.loss,
        loss_b: fb.loss,
        cpi_difference: ra.spatial_cpi.iter().zip(&rb.spatial_cpi).map(|(x, y)| x - y).collect(),
        cpi_a: ra.spatial_cpi,
        cpi_b: rb.spatial_cpi,
    };
    std::fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let mut table = Table::indexed(
        "lag",
        &[
            ("cpi_a".into(), cmp.cpi_a.clone()),
            ("cpi_b".into(), cmp.cpi_b.clone()),
            ("cpi_difference".into(), cmp.cpi_difference.clone()),
        ],
    );
    table.sum_checks = vec![("cpi_a".into(), ka.kappa as f64), ("cpi_b".into(), kb.kappa as f64)];
    let path = out.join("compare.csv");
    std::fs::write(&path, table.to_csv()?).map_err(|e| io_error(&path, e))?;
    check_column_sums(&path, &table.sum_checks)?;
    write_json(&out.join("compare.json"), &cmp)?;
    Ok(cmp)
}

/// Coefficient comparison only: fits the sweep and writes
/// `coefficient_comparison.csv`, `report.json` and `manifest.json`.
pub fn coefficients(path: &Path, overrides: &Overrides) -> Result<RunManifest, ExperimentError> {
    let (mut cfg, bytes) = ExperimentConfig::load(path)?;
    overrides.apply(&mut cfg)?;
    cfg.analyses = vec![AnalysisSpec::CoefficientComparison];
    run_config(&cfg, &bytes, &path.display().to_string())
}
