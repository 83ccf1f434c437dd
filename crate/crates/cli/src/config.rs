//! Pipeline configuration file (TOML). Every table is optional; unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use acp_core::augment::AugmentConfig;
use acp_core::corpus::{PixelBox, SplitFractions};
use acp_core::detector::DetectorConfig;
use acp_core::pipeline::EvalUnit;
use acp_core::synth::SynthConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub split: SplitConfig,
    pub roi: RoiConfig,
    pub synth: SynthConfig,
    pub augment: AugmentConfig,
    pub detector: DetectorConfig,
    pub eval: EvalConfig,
    pub service: ServiceConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Directory holding `manifest.json` and the images it references.
    pub data_dir: PathBuf,
    /// Directory for split, ROI spec, checkpoint, curves, reports and logs.
    pub work_dir: PathBuf,
    /// Manifest path; defaults to `data_dir/manifest.json`.
    pub manifest: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { data_dir: PathBuf::from("data"), work_dir: PathBuf::from("work"), manifest: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let f = SplitFractions::default();
        Self { fractions: [f.train, f.val, f.test], seed: 0 }
    }
}

/// ROI derivation settings. `left`/`right` replace the derived rectangle
/// for that side, and are required for a side without training boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoiConfig {
    pub margin_px: f64,
    pub left: Option<[f64; 4]>,
    pub right: Option<[f64; 4]>,
}

impl Default for RoiConfig {
    fn default() -> Self {
        Self { margin_px: 25.0, left: None, right: None }
    }
}

impl RoiConfig {
    pub fn override_box(&self, side: acp_core::corpus::Side) -> Option<PixelBox> {
        let a = match side {
            acp_core::corpus::Side::Left => self.left,
            acp_core::corpus::Side::Right => self.right,
        }?;
        Some(PixelBox::raw(a[0], a[1], a[2], a[3]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Operating threshold on the image-level score.
    pub threshold: f64,
    pub unit: EvalUnit,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { threshold: 0.5, unit: EvalUnit::Image }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    pub bind: String,
    /// When set, every request must carry `Authorization: Bearer <token>`.
    pub auth_token: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { bind: "127.0.0.1:8080".into(), auth_token: None }
    }
}

impl PipelineConfig {
    /// Parses and validates a config file; `None` yields the defaults.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string().replace('\n', " ")))
    }

    /// Applies `ACP_DATA_DIR`, `ACP_WORK_DIR` and `ACP_BIND`.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) {
        if let Some(v) = get("ACP_DATA_DIR") {
            self.paths.data_dir = v.into();
        }
        if let Some(v) = get("ACP_WORK_DIR") {
            self.paths.work_dir = v.into();
        }
        if let Some(v) = get("ACP_BIND") {
            self.service.bind = v;
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.detector.validate()?;
        self.augment.validate()?;
        self.split_fractions().validate()?;
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err(CliError::Config(format!("eval.threshold {} outside [0, 1]", self.eval.threshold)));
        }
        if !(self.roi.margin_px >= 0.0 && self.roi.margin_px.is_finite()) {
            return Err(CliError::Config("roi.margin_px must be >= 0".into()));
        }
        for b in [self.roi.left, self.roi.right].into_iter().flatten() {
            PixelBox::new(b[0], b[1], b[2], b[3])?;
        }
        Ok(())
    }

    pub fn split_fractions(&self) -> SplitFractions {
        let [train, val, test] = self.split.fractions;
        SplitFractions { train, val, test }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.paths.manifest.clone().unwrap_or_else(|| self.paths.data_dir.join("manifest.json"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(PipelineConfig::from_toml("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn partial_tables_merge_with_defaults() {
        let c = PipelineConfig::from_toml(
            "[detector]\niterations = 10\nanchor_scales = [16.0, 32.0]\n[roi]\nleft = [0.0, 1.0, 50.0, 60.0]\n",
        )
        .unwrap();
        assert_eq!(c.detector.iterations, 10);
        assert_eq!(c.detector.momentum, 0.9);
        assert_eq!(c.roi.margin_px, 25.0);
        assert_eq!(c.roi.override_box(acp_core::corpus::Side::Left), Some(PixelBox::raw(0.0, 1.0, 50.0, 60.0)));
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(PipelineConfig::from_toml("[detector]\nlearning_rat = 0.1\n").is_err());
        assert!(PipelineConfig::from_toml("[nonsense]\n").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let c = PipelineConfig::from_toml("[split]\nfractions = [0.5, 0.1, 0.1]\n").unwrap();
        assert!(c.validate().is_err());
        let c = PipelineConfig::from_toml("[detector]\nrpn_pos_iou = 0.2\n").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn env_overrides() {
        let mut c = PipelineConfig::default();
        c.apply_env(|k| (k == "ACP_BIND").then(|| "0.0.0.0:9".to_string()));
        assert_eq!(c.service.bind, "0.0.0.0:9");
        assert_eq!(c.paths.data_dir, PathBuf::from("data"));
    }
}
