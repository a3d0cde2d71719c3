//! Acquisition manifest: which images were taken of which concentration.
//!
//! One sample per concentration; each replicate group is a stack of frames
//! that averages down to a single reading. Image paths are resolved relative
//! to the directory holding the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colorimetry::{Approach, CaptureContext};
use crate::imaging::Roi;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("manifest {path}: {message}")]
    Invalid { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestContext {
    pub phone: String,
    #[serde(deserialize_with = "crate::colorimetry::string_or_number")]
    pub led_power: String,
    pub exposure_s: f64,
    pub iso: f64,
    pub aperture_f: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration_constant: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub concentration: f64,
    pub replicate_groups: Vec<Vec<PathBuf>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub assay: String,
    pub temperature_c: f64,
    pub context: ManifestContext,
    pub unit: String,
    pub roi: Roi,
    #[serde(default = "default_approaches")]
    pub approaches: Vec<Approach>,
    pub samples: Vec<Sample>,
}

fn default_approaches() -> Vec<Approach> {
    vec![Approach::GREEN_OVER_BLUE, Approach::GreyScale]
}

/// A manifest plus the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub manifest: Manifest,
    pub base_dir: PathBuf,
}

impl LoadedManifest {
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }
}

impl Manifest {
    pub fn capture_context(&self) -> CaptureContext {
        CaptureContext {
            assay: self.assay.clone(),
            temperature_c: self.temperature_c,
            phone: self.context.phone.clone(),
            led_power: self.context.led_power.clone(),
            exposure_s: self.context.exposure_s,
            iso: self.context.iso,
            aperture_f: self.context.aperture_f,
            calibration_constant: self.context.calibration_constant,
        }
    }

    /// Reads and validates a manifest, checking that every image exists.
    pub fn load(path: &Path) -> Result<LoadedManifest, ManifestError> {
        let shown = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: shown.clone(),
            source,
        })?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|source| ManifestError::Parse {
                path: shown.clone(),
                source,
            })?;
        let base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let loaded = LoadedManifest { manifest, base_dir };
        loaded
            .validate()
            .map_err(|message| ManifestError::Invalid {
                path: shown,
                message,
            })?;
        Ok(loaded)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text)
    }
}

impl LoadedManifest {
    fn validate(&self) -> Result<(), String> {
        let m = &self.manifest;
        self.manifest.capture_context().validate()?;
        if m.roi.w == 0 || m.roi.h == 0 {
            return Err("roi width and height must be at least 1".into());
        }
        if m.approaches.is_empty() {
            return Err("at least one approach is required".into());
        }
        for (i, s) in m.samples.iter().enumerate() {
            if s.replicate_groups.is_empty() {
                return Err(format!("sample {i} has no replicate groups"));
            }
            for (g, group) in s.replicate_groups.iter().enumerate() {
                if group.is_empty() {
                    return Err(format!("sample {i} group {g} lists no images"));
                }
                for p in group {
                    let full = self.resolve(p);
                    if !full.is_file() {
                        return Err(format!("image {} does not exist", full.display()));
                    }
                }
            }
        }
        Ok(())
    }
}
