//! # assaylens
//!
//! Quantitative concentration estimates from RGB photographs of assay
//! cuvettes. The pipeline averages repeated frames, takes channel statistics
//! over a region of interest, turns them into a channel-ratio or grey-scale
//! reading, fits a log-linear calibration curve to a dilution series and maps
//! new readings back to concentrations through a database of calibrations.
//!
//! ```no_run
//! use assaylens::calibration::{build_curve, invert_curve, CurveOptions};
//! use assaylens::manifest::Manifest;
//! use assaylens::pipeline::{measure_manifest, series_for};
//! use assaylens::colorimetry::Approach;
//!
//! let loaded = Manifest::load("dataset/manifest.json".as_ref())?;
//! let measured = measure_manifest(&loaded)?;
//! let (series, _warnings) = series_for(&loaded, &measured, Approach::GreyScale)?;
//! let built = build_curve(&series, 10.0, CurveOptions::default())?;
//! let c = invert_curve(&built.curve, 120.0)?;
//! println!("{c} {}", built.curve.unit);
//! # Ok::<(), assaylens::Error>(())
//! ```

pub mod calibration;
pub mod cli;
pub mod colorimetry;
pub mod database;
pub mod imaging;
pub mod manifest;
pub mod pipeline;
pub mod synthgen;

use thiserror::Error;

pub use calibration::{
    CalibrationCurve, CalibrationError, ConcentrationEstimate, MeasurementSeries,
};
pub use colorimetry::{Approach, CaptureContext, Channel, ColorimetryError, Reading, RoiStats};
pub use database::{CalibrationDatabase, CalibrationRecord, DatabaseError};
pub use imaging::{FrameStack, ImagingError, RgbImage, Roi};
pub use manifest::{Manifest, ManifestError};
pub use synthgen::{SynthError, SyntheticModel};

/// Any error the pipeline can produce.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Colorimetry(#[from] ColorimetryError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Database(#[from] DatabaseError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}
