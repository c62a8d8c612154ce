//! Pipeline configuration as a sectioned TOML document.
//!
//! ```toml
//! backend = "synthetic"
//! seed = 0
//!
//! [threshold]
//! z_value = -0.52
//!
//! [match]
//! alpha_t = 0.65
//!
//! [registration]
//! mode = "homography"
//! ransac_iters = 2000
//! ```
//!
//! Every section and key is optional; missing values take their defaults and
//! unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{FacetKind, ProposerConfig, SyntheticConfig};
use crate::matching::MatchParams;
use crate::metrics::AverageMode;
use crate::data::GtKind;
use crate::pseudomask::ThresholdParams;
use crate::registration::{RansacConfig, RegistrationMode};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    #[default]
    Synthetic,
    VithAdapter,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::Synthetic => "synthetic",
            BackendKind::VithAdapter => "vith-adapter",
        }
    }
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "vith-adapter" => Ok(Self::VithAdapter),
            other => Err(Error::Config(format!("unknown backend `{other}`"))),
        }
    }
}

/// Which facet feeds the pseudo-mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoConfig {
    /// `None` uses the backend's default facet layer.
    pub layer: Option<usize>,
    pub kind: FacetKind,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        Self {
            layer: None,
            kind: FacetKind::Key,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub mode: RegistrationMode,
    pub ransac_iters: usize,
    pub ransac_thresh_px: f64,
    pub min_inliers: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        let r = RansacConfig::default();
        Self {
            mode: RegistrationMode::None,
            ransac_iters: r.max_iterations,
            ransac_thresh_px: r.inlier_threshold,
            min_inliers: r.min_inliers,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub gt: GtKind,
    pub average: AverageMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutFormat {
    Json,
    Csv,
    Md,
}

impl OutFormat {
    pub fn extension(self) -> &'static str {
        match self {
            OutFormat::Json => "json",
            OutFormat::Csv => "csv",
            OutFormat::Md => "md",
        }
    }
}

impl std::str::FromStr for OutFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "md" | "markdown" => Ok(Self::Md),
            other => Err(Error::Config(format!("unknown output format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub formats: Vec<OutFormat>,
    pub emit_intermediates: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            formats: vec![OutFormat::Json],
            emit_intermediates: false,
        }
    }
}

/// Every tunable of the pipeline and the evaluation harness.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub backend: BackendKind,
    pub weights_path: Option<PathBuf>,
    pub seed: u64,
    pub pseudo: PseudoConfig,
    pub proposer: ProposerConfig,
    pub threshold: ThresholdParams,
    #[serde(rename = "match")]
    pub matching: MatchParams,
    pub registration: RegistrationConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
    pub synthetic: SyntheticConfig,
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.proposer.validate()?;
        self.threshold.validate()?;
        self.matching.validate()?;
        self.ransac().validate()?;
        if self.output.formats.is_empty() {
            return Err(Error::Config("output.formats must not be empty".into()));
        }
        Ok(())
    }

    /// RANSAC settings derived from the registration section and the seed.
    pub fn ransac(&self) -> RansacConfig {
        RansacConfig {
            max_iterations: self.registration.ransac_iters,
            inlier_threshold: self.registration.ransac_thresh_px,
            min_inliers: self.registration.min_inliers,
            random_seed: self.seed,
        }
    }
}
