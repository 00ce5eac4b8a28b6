//! Experiment configuration files.
//!
//! A config is a TOML document with the sections `process`, `architecture`,
//! `fit`, `analyses`, optionally `features`, and `output`:
//!
//! ```toml
//! name = "spatial"
//!
//! [process]
//! kind = "power_law"
//! alpha = 1.0
//!
//! [architecture]
//! kind = "hierarchical"
//! depth = 6
//! kernel = 2
//! channels = [1, 2, 4, 8]
//!
//! [fit]
//! restarts = 8
//!
//! [[analyses]]
//! kind = "spatial_cpi"
//!
//! [output]
//! dir = "out/spatial"
//! ```
//!
//! The process `length` may be omitted; it then defaults to the receptive
//! field of the architecture.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archzoo::{DilationPattern, LayerSpec, ModelManifold};
use crate::covkit::{AutocovarianceSpec, ProcessKind};
use crate::featurespace::{FeatureFamily, FeatureMap};
use crate::optim::FitConfig;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("config error{}: {message}", key.as_ref().map(|k| format!(" at `{k}`")).unwrap_or_default())]
pub struct ConfigError {
    pub key: Option<String>,
    pub message: String,
}

impl ConfigError {
    pub fn at(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            key: Some(key.into()),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub process: ProcessSection,
    pub architecture: ArchitectureSection,
    #[serde(default)]
    pub fit: FitConfig,
    pub analyses: Vec<AnalysisSpec>,
    #[serde(default)]
    pub features: Option<FeatureSection>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessSection {
    #[serde(flatten)]
    pub kind: ProcessKind,
    #[serde(default)]
    pub length: Option<usize>,
    #[serde(default)]
    pub normalize: bool,
}

/// A single value or a sweep list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sweep {
    One(usize),
    Many(Vec<usize>),
}

impl Sweep {
    pub fn values(&self) -> Vec<usize> {
        match self {
            Sweep::One(v) => vec![*v],
            Sweep::Many(v) => v.clone(),
        }
    }
}

fn one() -> usize {
    1
}

fn two() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchitectureSection {
    Hierarchical {
        depth: usize,
        #[serde(default = "two")]
        kernel: usize,
        channels: Sweep,
        #[serde(default = "one")]
        input_dim: usize,
        #[serde(default)]
        pattern: DilationPattern,
    },
    Recurrent {
        channels: Sweep,
        #[serde(default)]
        receptive_field: Option<usize>,
        #[serde(default = "one")]
        input_dim: usize,
    },
    FullyConnected {
        #[serde(default)]
        receptive_field: Option<usize>,
        #[serde(default = "one")]
        input_dim: usize,
    },
    Layers {
        layers: Vec<LayerSpec>,
        receptive_field: usize,
        #[serde(default = "one")]
        input_dim: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainOrder {
    #[default]
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RedundancyBlocks {
    #[default]
    Layers,
    Parameters,
}

fn default_bound_restarts() -> usize {
    32
}

fn default_freezes() -> usize {
    20
}

fn default_refit_restarts() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnalysisSpec {
    TotalCapacity,
    Spectrum,
    SpatialCpi,
    CovEigen,
    ConditionalChain {
        #[serde(default)]
        order: ChainOrder,
    },
    Marginal,
    ErrorBounds {
        #[serde(default = "default_bound_restarts")]
        restarts: usize,
    },
    /// Compares tiled and repeated orderings of the same dilation multiset;
    /// the architecture must use one of the two patterns.
    TiledVsRepeated,
    MultidimScaling {
        dims: Vec<usize>,
        factors: Vec<usize>,
    },
    CoefficientComparison,
    Redundancy {
        #[serde(default = "default_freezes")]
        freezes: usize,
        #[serde(default)]
        blocks: RedundancyBlocks,
        /// Cold restarts of every refit.
        #[serde(default = "default_refit_restarts")]
        restarts: usize,
    },
    FeatureCapacity,
}

impl AnalysisSpec {
    /// File stem of the analysis output (`<stem>.csv`).
    pub fn output_stem(&self) -> String {
        match self {
            AnalysisSpec::TotalCapacity => "total_capacity".into(),
            AnalysisSpec::Spectrum => "spectrum".into(),
            AnalysisSpec::SpatialCpi => "spatial_cpi".into(),
            AnalysisSpec::CovEigen => "cov_eigen".into(),
            AnalysisSpec::ConditionalChain { order } => match order {
                ChainOrder::Forward => "conditional_chain_forward".into(),
                ChainOrder::Backward => "conditional_chain_backward".into(),
            },
            AnalysisSpec::Marginal => "marginal".into(),
            AnalysisSpec::ErrorBounds { .. } => "error_bounds".into(),
            AnalysisSpec::TiledVsRepeated => "tiled_vs_repeated".into(),
            AnalysisSpec::MultidimScaling { .. } => "multidim_scaling".into(),
            AnalysisSpec::CoefficientComparison => "coefficient_comparison".into(),
            AnalysisSpec::Redundancy { .. } => "redundancy".into(),
            AnalysisSpec::FeatureCapacity => "feature_capacity".into(),
        }
    }

    /// Whether the analysis runs on the fitted sweep points (rather than
    /// building its own architectures).
    pub fn uses_sweep_fits(&self) -> bool {
        !matches!(
            self,
            AnalysisSpec::TiledVsRepeated | AnalysisSpec::MultidimScaling { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSection {
    pub family: FeatureFamily,
    #[serde(default = "default_degree")]
    pub degree: u32,
    /// Defaults to `200·m` for `m` features.
    #[serde(default)]
    pub samples: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_degree() -> u32 {
    1
}

impl FeatureSection {
    pub fn feature_map(&self) -> FeatureMap {
        FeatureMap::from_family(self.family, self.degree)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: default_dir() }
    }
}

/// One architecture of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub label: String,
    pub channels: Option<usize>,
    pub manifold: ModelManifold,
}

fn arch_error(e: impl std::fmt::Display) -> ConfigError {
    ConfigError::at("architecture", e.to_string())
}

impl ExperimentConfig {
    /// Parses and validates a config document.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError {
            key: None,
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, returning it together with its raw bytes.
    pub fn load(path: &Path) -> Result<(Self, Vec<u8>), ConfigError> {
        let bytes = std::fs::read(path).map_err(|e| ConfigError {
            key: None,
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        let text = String::from_utf8(bytes.clone()).map_err(|_| ConfigError {
            key: None,
            message: format!("{} is not UTF-8", path.display()),
        })?;
        Ok((Self::from_toml(&text)?, bytes))
    }

    /// Display name: the `name` key, else the given fallback.
    pub fn display_name(&self, fallback: &str) -> String {
        self.name.clone().unwrap_or_else(|| fallback.to_string())
    }

    pub fn input_dim(&self) -> usize {
        match &self.architecture {
            ArchitectureSection::Hierarchical { input_dim, .. }
            | ArchitectureSection::Recurrent { input_dim, .. }
            | ArchitectureSection::FullyConnected { input_dim, .. }
            | ArchitectureSection::Layers { input_dim, .. } => *input_dim,
        }
    }

    /// Receptive field implied by the architecture, else by the process.
    pub fn receptive_field(&self) -> Result<usize, ConfigError> {
        let from_arch = match &self.architecture {
            ArchitectureSection::Hierarchical {
                depth, kernel, pattern, ..
            } => Some(
                1 + pattern
                    .dilations(*depth, *kernel)
                    .iter()
                    .map(|d| d * kernel.saturating_sub(1))
                    .sum::<usize>(),
            ),
            ArchitectureSection::Recurrent { receptive_field, .. }
            | ArchitectureSection::FullyConnected { receptive_field, .. } => *receptive_field,
            ArchitectureSection::Layers { receptive_field, .. } => Some(*receptive_field),
        };
        match (from_arch, self.process.length) {
            (Some(a), Some(p)) if a != p => Err(ConfigError::at(
                "process.length",
                format!("length {p} does not match the architecture's receptive field {a}"),
            )),
            (Some(a), _) => Ok(a),
            (None, Some(p)) => Ok(p),
            (None, None) => Err(ConfigError::at(
                "architecture.receptive_field",
                "receptive field is not determined by the architecture; set it or process.length",
            )),
        }
    }

    pub fn process_spec(&self) -> Result<AutocovarianceSpec, ConfigError> {
        let mut spec = AutocovarianceSpec::new(self.process.kind.clone(), self.receptive_field()?);
        spec.normalize = self.process.normalize;
        Ok(spec)
    }

    /// `(blocks, tiled)` for hierarchical stacks with a block pattern.
    pub fn block_pattern(&self) -> Option<(usize, bool)> {
        match &self.architecture {
            ArchitectureSection::Hierarchical { pattern, .. } => match *pattern {
                DilationPattern::Tiled { blocks } => Some((blocks, true)),
                DilationPattern::Repeated { blocks } => Some((blocks, false)),
                DilationPattern::Exponential => None,
            },
            _ => None,
        }
    }

    /// Architectures of the sweep, in declaration order.
    pub fn sweep(&self) -> Result<Vec<SweepPoint>, ConfigError> {
        self.sweep_with_input_dim(self.input_dim())
    }

    /// The sweep with every model reading `input_dim` values per lag.
    pub fn sweep_with_input_dim(&self, input_dim: usize) -> Result<Vec<SweepPoint>, ConfigError> {
        let n = self.receptive_field()?;
        match &self.architecture {
            ArchitectureSection::Hierarchical {
                depth,
                kernel,
                channels,
                pattern,
                ..
            } => channels
                .values()
                .into_iter()
                .map(|c| {
                    Ok(SweepPoint {
                        label: format!("c{c}"),
                        channels: Some(c),
                        manifold: ModelManifold::hierarchical(*depth, *kernel, c, input_dim, *pattern)
                            .map_err(arch_error)?,
                    })
                })
                .collect(),
            ArchitectureSection::Recurrent { channels, .. } => channels
                .values()
                .into_iter()
                .map(|c| {
                    Ok(SweepPoint {
                        label: format!("c{c}"),
                        channels: Some(c),
                        manifold: ModelManifold::recurrent(c, n, input_dim).map_err(arch_error)?,
                    })
                })
                .collect(),
            ArchitectureSection::FullyConnected { .. } => Ok(vec![SweepPoint {
                label: "fc".into(),
                channels: None,
                manifold: ModelManifold::fully_connected(n, input_dim).map_err(arch_error)?,
            }]),
            ArchitectureSection::Layers { layers, .. } => Ok(vec![SweepPoint {
                label: "model".into(),
                channels: None,
                manifold: ModelManifold::new(layers.clone(), input_dim, n).map_err(arch_error)?,
            }]),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.fit
            .validate()
            .map_err(|e| ConfigError::at("fit", e.to_string()))?;
        if self.analyses.is_empty() {
            return Err(ConfigError::at("analyses", "at least one analysis is required"));
        }
        let mut stems = BTreeSet::new();
        for a in &self.analyses {
            if !stems.insert(a.output_stem()) {
                return Err(ConfigError::at(
                    "analyses",
                    format!("analysis `{}` is declared twice", a.output_stem()),
                ));
            }
        }
        match &self.architecture {
            ArchitectureSection::Hierarchical { channels, .. } | ArchitectureSection::Recurrent { channels, .. } => {
                let values = channels.values();
                if values.is_empty() {
                    return Err(ConfigError::at("architecture.channels", "sweep list is empty"));
                }
                if values.contains(&0) {
                    return Err(ConfigError::at("architecture.channels", "channels must be >= 1"));
                }
            }
            _ => {}
        }
        if self.input_dim() == 0 {
            return Err(ConfigError::at("architecture.input_dim", "input_dim must be >= 1"));
        }
        self.process_spec()?
            .autocovariance(0)
            .map_err(|e| ConfigError::at("process", e.to_string()))?;
        self.sweep()?;
        for a in &self.analyses {
            match a {
                AnalysisSpec::TiledVsRepeated => {
                    if self.block_pattern().is_none() {
                        return Err(ConfigError::at(
                            "analyses.tiled_vs_repeated",
                            "needs a hierarchical architecture with a tiled or repeated pattern",
                        ));
                    }
                }
                AnalysisSpec::MultidimScaling { dims, factors } => {
                    if !matches!(self.architecture, ArchitectureSection::Hierarchical { .. }) {
                        return Err(ConfigError::at(
                            "analyses.multidim_scaling",
                            "needs a hierarchical architecture",
                        ));
                    }
                    if dims.is_empty() || factors.is_empty() {
                        return Err(ConfigError::at("analyses.multidim_scaling", "sweep lists are empty"));
                    }
                    if let Some(d) = dims.iter().find(|&&d| d == 0 || isqrt(d) * isqrt(d) != d) {
                        return Err(ConfigError::at(
                            "analyses.multidim_scaling.dims",
                            format!("{d} is not a positive perfect square"),
                        ));
                    }
                    if factors.contains(&0) {
                        return Err(ConfigError::at("analyses.multidim_scaling.factors", "must be >= 1"));
                    }
                }
                AnalysisSpec::ErrorBounds { restarts } if *restarts < 2 => {
                    return Err(ConfigError::at("analyses.error_bounds.restarts", "must be >= 2"));
                }
                AnalysisSpec::CoefficientComparison if self.input_dim() != 1 => {
                    return Err(ConfigError::at(
                        "analyses.coefficient_comparison",
                        "needs input_dim = 1",
                    ));
                }
                AnalysisSpec::FeatureCapacity if self.features.is_none() => {
                    return Err(ConfigError::at("features", "feature_capacity needs a [features] section"));
                }
                AnalysisSpec::FeatureCapacity if self.input_dim() != 1 => {
                    return Err(ConfigError::at(
                        "analyses.feature_capacity",
                        "feature maps apply to scalar processes (input_dim = 1)",
                    ));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

pub(crate) fn isqrt(v: usize) -> usize {
    let mut r = (v as f64).sqrt() as usize;
    while r * r > v {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= v {
        r += 1;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[process]
kind = "power_law"
alpha = 1.0

[architecture]
kind = "hierarchical"
depth = 6
channels = [1, 2]

[[analyses]]
kind = "spatial_cpi"
"#;

    #[test]
    fn parses_and_resolves_sweep() {
        let cfg = ExperimentConfig::from_toml(BASE).unwrap();
        assert_eq!(cfg.receptive_field().unwrap(), 64);
        let sweep = cfg.sweep().unwrap();
        assert_eq!(sweep.len(), 2);
        assert_eq!(sweep[1].label, "c2");
        assert_eq!(cfg.fit, FitConfig::default());
    }

    #[test]
    fn missing_process_is_named() {
        let text = BASE.replace("[process]\nkind = \"power_law\"\nalpha = 1.0\n", "");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("process"), "{err}");
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let text = BASE.replace("alpha = 1.0", "alpha = 1.0\nlength = 32");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert_eq!(err.key.as_deref(), Some("process.length"));
    }

    #[test]
    fn empty_sweep_is_rejected() {
        let text = BASE.replace("channels = [1, 2]", "channels = []");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert_eq!(err.key.as_deref(), Some("architecture.channels"));
    }

    #[test]
    fn duplicate_analysis_is_rejected() {
        let text = format!("{BASE}\n[[analyses]]\nkind = \"spatial_cpi\"\n");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn unknown_top_level_key_is_rejected() {
        let text = format!("bogus = 1\n{BASE}");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn isqrt_exact() {
        assert_eq!(isqrt(16), 4);
        assert_eq!(isqrt(15), 3);
        assert_eq!(isqrt(1), 1);
    }
}
