//! End-to-end steps shared by the CLI and FFI: image stacks to readings,
//! manifests to dilution series.

use std::path::{Path, PathBuf};

use log::{debug, warn};

use crate::calibration::{MeasurementSeries, SeriesPoint};
use crate::colorimetry::{stack_roi_stats, Approach, CaptureContext, Reading, RoiStats};
use crate::imaging::{load_image, FrameStack, Roi};
use crate::manifest::LoadedManifest;
use crate::Error;

/// Frames decoded from disk plus any lossy-source warnings.
#[derive(Debug, Clone)]
pub struct LoadedStack {
    pub stack: FrameStack,
    pub warnings: Vec<String>,
}

pub fn load_stack(paths: &[PathBuf]) -> Result<LoadedStack, Error> {
    let mut frames = Vec::with_capacity(paths.len());
    let mut warnings = Vec::new();
    for path in paths {
        let decoded = load_image(path)?;
        if let Some(w) = decoded.warning(path) {
            warn!("{w}");
            warnings.push(w);
        }
        frames.push(decoded.image);
    }
    debug!("decoded {} frames", frames.len());
    Ok(LoadedStack {
        stack: FrameStack::new(frames)?,
        warnings,
    })
}

/// Statistics and saturation for one stack over `roi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StackMeasurement {
    pub stats: RoiStats,
    /// Worst per-frame saturation fraction inside the ROI.
    pub saturation: f64,
}

pub fn measure_stack(stack: &FrameStack, roi: Roi) -> Result<StackMeasurement, Error> {
    Ok(StackMeasurement {
        stats: stack_roi_stats(stack, roi)?,
        saturation: stack.max_saturation(roi)?,
    })
}

impl StackMeasurement {
    pub fn reading(&self, approach: Approach, context: &CaptureContext) -> Result<Reading, Error> {
        Ok(Reading::from_stats(
            &self.stats,
            approach,
            context.clone(),
            self.saturation,
        )?)
    }
}

/// One reading per replicate group, for every sample of a manifest.
#[derive(Debug, Clone)]
pub struct ManifestMeasurements {
    /// `[sample][group]`
    pub groups: Vec<Vec<StackMeasurement>>,
    pub warnings: Vec<String>,
}

pub fn measure_manifest(loaded: &LoadedManifest) -> Result<ManifestMeasurements, Error> {
    let m = &loaded.manifest;
    let mut groups = Vec::with_capacity(m.samples.len());
    let mut warnings = Vec::new();
    for sample in &m.samples {
        let mut per_group = Vec::with_capacity(sample.replicate_groups.len());
        for group in &sample.replicate_groups {
            let paths: Vec<PathBuf> = group.iter().map(|p| loaded.resolve(p)).collect();
            let stack = load_stack(&paths)?;
            warnings.extend(stack.warnings);
            per_group.push(measure_stack(&stack.stack, m.roi)?);
        }
        groups.push(per_group);
    }
    Ok(ManifestMeasurements { groups, warnings })
}

/// Dilution series for `approach` from per-group measurements.
///
/// Groups whose ROI saturation exceeds the clipping threshold are kept but
/// reported in the returned warnings.
pub fn series_for(
    loaded: &LoadedManifest,
    measured: &ManifestMeasurements,
    approach: Approach,
) -> Result<(MeasurementSeries, Vec<String>), Error> {
    let m = &loaded.manifest;
    let context = m.capture_context();
    let mut warnings = Vec::new();
    let mut points = Vec::with_capacity(m.samples.len());
    for (sample, groups) in m.samples.iter().zip(&measured.groups) {
        let mut replicates = Vec::with_capacity(groups.len());
        for (g, meas) in groups.iter().enumerate() {
            if meas.saturation > crate::colorimetry::CLIPPING_THRESHOLD {
                warnings.push(format!(
                    "concentration {} group {g}: {:.2}% of ROI pixels saturated",
                    sample.concentration,
                    meas.saturation * 100.0
                ));
            }
            replicates.push(approach.evaluate(&meas.stats)?);
        }
        points.push(SeriesPoint::new(sample.concentration, replicates));
    }
    let series = MeasurementSeries::new(m.unit.clone(), approach, context, points)?;
    Ok((series, warnings))
}

/// Display form of a path relative to `base` when possible.
pub fn relative_display(path: &Path, base: &Path) -> String {
    path.strip_prefix(base)
        .unwrap_or(path)
        .display()
        .to_string()
}
