//! ROI color statistics, the two response measures and exposure normalization.
//!
//! A reading is either a channel ratio (sum of one channel over the sum of
//! another across the ROI) or a grey-scale value (mean of the three channel
//! means). Pixel values are used as stored; no gamma linearization is applied.
//!
//! Camera response is modeled as `N_d = (K_c / f_s^2) * t * S * L_s`, so with a
//! fixed camera and aperture an intensity reading scales with the product of
//! exposure time and ISO, while a channel ratio is unaffected by it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::imaging::{FrameStack, ImagingError, RgbImage, Roi};

/// Readings whose ROI saturation fraction exceeds this are not exposure-normalized.
pub const CLIPPING_THRESHOLD: f64 = 0.01;

#[derive(Debug, Error)]
pub enum ColorimetryError {
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("{denominator} channel sums to zero over the ROI, ratio {numerator}/{denominator} is undefined")]
    ZeroDenominator {
        numerator: Channel,
        denominator: Channel,
    },
    #[error("reading is saturated ({fraction:.4} of ROI pixels at full scale, limit {CLIPPING_THRESHOLD}); exposure scaling is not linear")]
    Saturated { fraction: f64 },
    #[error("exposure settings must be positive, got t={exposure_s} s, ISO {iso}")]
    NonPositiveExposure { exposure_s: f64, iso: f64 },
    #[error("unknown approach {0:?}, expected \"grey\" or a channel pair like \"G/B\"")]
    UnknownApproach(String),
    #[error("unknown channel {0:?}, expected R, G or B")]
    UnknownChannel(String),
}

pub type Result<T, E = ColorimetryError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    R,
    G,
    B,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::R, Channel::G, Channel::B];

    pub fn index(self) -> usize {
        match self {
            Channel::R => 0,
            Channel::G => 1,
            Channel::B => 2,
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Channel::R => "R",
            Channel::G => "G",
            Channel::B => "B",
        })
    }
}

impl FromStr for Channel {
    type Err = ColorimetryError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "R" | "r" => Ok(Channel::R),
            "G" | "g" => Ok(Channel::G),
            "B" | "b" => Ok(Channel::B),
            other => Err(ColorimetryError::UnknownChannel(other.to_string())),
        }
    }
}

/// How ROI statistics are turned into a scalar reading.
///
/// Serialized as `"grey"` or `"<num>/<den>"`, e.g. `"G/B"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Approach {
    ChannelRatio {
        numerator: Channel,
        denominator: Channel,
    },
    GreyScale,
}

impl Approach {
    pub const GREEN_OVER_BLUE: Approach = Approach::ChannelRatio {
        numerator: Channel::G,
        denominator: Channel::B,
    };

    pub fn is_intensity(self) -> bool {
        matches!(self, Approach::GreyScale)
    }

    /// Filesystem- and id-friendly form, e.g. `grey` or `g-b`.
    pub fn slug(self) -> String {
        match self {
            Approach::GreyScale => "grey".to_string(),
            Approach::ChannelRatio {
                numerator,
                denominator,
            } => format!("{numerator}-{denominator}").to_lowercase(),
        }
    }

    pub fn evaluate(self, stats: &RoiStats) -> Result<f64> {
        match self {
            Approach::GreyScale => Ok(grey_scale(stats)),
            Approach::ChannelRatio {
                numerator,
                denominator,
            } => channel_ratio(stats, numerator, denominator),
        }
    }
}

impl Default for Approach {
    fn default() -> Self {
        Approach::GREEN_OVER_BLUE
    }
}

impl fmt::Display for Approach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Approach::GreyScale => f.write_str("grey"),
            Approach::ChannelRatio {
                numerator,
                denominator,
            } => write!(f, "{numerator}/{denominator}"),
        }
    }
}

impl FromStr for Approach {
    type Err = ColorimetryError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("grey") || s.eq_ignore_ascii_case("gray") {
            return Ok(Approach::GreyScale);
        }
        match s.split_once('/') {
            Some((n, d)) => Ok(Approach::ChannelRatio {
                numerator: n.parse()?,
                denominator: d.parse()?,
            }),
            None => Err(ColorimetryError::UnknownApproach(s.to_string())),
        }
    }
}

impl TryFrom<String> for Approach {
    type Error = ColorimetryError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Approach> for String {
    fn from(a: Approach) -> String {
        a.to_string()
    }
}

/// Acquisition settings a reading was taken under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureContext {
    pub assay: String,
    pub temperature_c: f64,
    pub phone: String,
    #[serde(deserialize_with = "string_or_number")]
    pub led_power: String,
    pub exposure_s: f64,
    pub iso: f64,
    pub aperture_f: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration_constant: Option<f64>,
}

impl CaptureContext {
    /// Checks that exposure time, ISO and f-number are positive and finite.
    pub fn validate(&self) -> std::result::Result<(), String> {
        for (name, v) in [
            ("exposure_s", self.exposure_s),
            ("iso", self.iso),
            ("aperture_f", self.aperture_f),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        if !self.temperature_c.is_finite() {
            return Err("temperature_c must be finite".to_string());
        }
        Ok(())
    }

    /// Exposure time times ISO, the factor intensity readings scale with.
    pub fn exposure_product(&self) -> f64 {
        self.exposure_s * self.iso
    }
}

pub(crate) fn string_or_number<'de, D: Deserializer<'de>>(
    d: D,
) -> std::result::Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Label {
        Text(String),
        Number(serde_json::Number),
    }
    Ok(match Label::deserialize(d)? {
        Label::Text(s) => s,
        Label::Number(n) => n.to_string(),
    })
}

/// Channel sums and means over an ROI.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiStats {
    pub pixel_count: u64,
    pub sum: [f64; 3],
    pub mean: [f64; 3],
}

impl RoiStats {
    fn from_sums(pixel_count: u64, sum: [f64; 3]) -> Self {
        let n = pixel_count as f64;
        Self {
            pixel_count,
            sum,
            mean: sum.map(|s| s / n),
        }
    }

    pub fn sum_of(&self, c: Channel) -> f64 {
        self.sum[c.index()]
    }

    pub fn mean_of(&self, c: Channel) -> f64 {
        self.mean[c.index()]
    }
}

/// Exact channel sums over `roi`.
pub fn roi_channel_stats(image: &RgbImage, roi: Roi) -> Result<RoiStats> {
    roi.check(image.width(), image.height())?;
    let mut sum = [0u64; 3];
    for y in roi.y..roi.y + roi.h {
        for px in image.row_span(roi.x, y, roi.w) {
            for c in 0..3 {
                sum[c] += px[c] as u64;
            }
        }
    }
    Ok(RoiStats::from_sums(
        roi.pixel_count(),
        sum.map(|s| s as f64),
    ))
}

/// ROI statistics of the unrounded per-pixel mean of a stack.
///
/// Summing raw integers across all frames and dividing once by the frame
/// count avoids quantizing the averaged frame before taking statistics.
pub fn stack_roi_stats(stack: &FrameStack, roi: Roi) -> Result<RoiStats> {
    roi.check(stack.width(), stack.height())?;
    let mut sum = [0u64; 3];
    for frame in stack.frames() {
        for y in roi.y..roi.y + roi.h {
            for px in frame.row_span(roi.x, y, roi.w) {
                for c in 0..3 {
                    sum[c] += px[c] as u64;
                }
            }
        }
    }
    let frames = stack.len() as f64;
    Ok(RoiStats::from_sums(
        roi.pixel_count(),
        sum.map(|s| s as f64 / frames),
    ))
}

/// Ratio of summed `numerator` to summed `denominator` channel.
pub fn channel_ratio(stats: &RoiStats, numerator: Channel, denominator: Channel) -> Result<f64> {
    let den = stats.sum_of(denominator);
    if den <= 0.0 {
        return Err(ColorimetryError::ZeroDenominator {
            numerator,
            denominator,
        });
    }
    Ok(stats.sum_of(numerator) / den)
}

/// Mean of the three channel means.
pub fn grey_scale(stats: &RoiStats) -> f64 {
    (stats.mean[0] + stats.mean[1] + stats.mean[2]) / 3.0
}

/// A scalar reading together with the settings it was captured under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reading {
    pub approach: Approach,
    pub value: f64,
    pub context: CaptureContext,
    /// Saturation fraction of the ROI the reading came from.
    pub saturation: f64,
}

impl Reading {
    pub fn from_stats(
        stats: &RoiStats,
        approach: Approach,
        context: CaptureContext,
        saturation: f64,
    ) -> Result<Self> {
        Ok(Self {
            approach,
            value: approach.evaluate(stats)?,
            context,
            saturation,
        })
    }
}

/// Exposure settings a reading is rescaled to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExposureSettings {
    pub exposure_s: f64,
    pub iso: f64,
}

impl From<&CaptureContext> for ExposureSettings {
    fn from(c: &CaptureContext) -> Self {
        Self {
            exposure_s: c.exposure_s,
            iso: c.iso,
        }
    }
}

/// Rescales an intensity reading to `reference` exposure settings.
///
/// Channel-ratio readings are returned unchanged since the exposure factor
/// cancels in the ratio. Aperture and calibration constant are assumed equal
/// between reading and reference.
pub fn exposure_normalize(reading: &Reading, reference: ExposureSettings) -> Result<Reading> {
    let positive = |v: f64| v.is_finite() && v > 0.0;
    if !positive(reference.exposure_s) || !positive(reference.iso) {
        return Err(ColorimetryError::NonPositiveExposure {
            exposure_s: reference.exposure_s,
            iso: reference.iso,
        });
    }
    if !reading.approach.is_intensity() {
        return Ok(reading.clone());
    }
    let ctx = &reading.context;
    if !positive(ctx.exposure_s) || !positive(ctx.iso) {
        return Err(ColorimetryError::NonPositiveExposure {
            exposure_s: ctx.exposure_s,
            iso: ctx.iso,
        });
    }
    if reading.saturation > CLIPPING_THRESHOLD {
        return Err(ColorimetryError::Saturated {
            fraction: reading.saturation,
        });
    }
    let same = ctx.exposure_s == reference.exposure_s && ctx.iso == reference.iso;
    let value = if same {
        reading.value
    } else {
        reading.value * (reference.exposure_s * reference.iso) / (ctx.exposure_s * ctx.iso)
    };
    let mut context = ctx.clone();
    context.exposure_s = reference.exposure_s;
    context.iso = reference.iso;
    Ok(Reading {
        approach: reading.approach,
        value,
        context,
        saturation: reading.saturation,
    })
}
