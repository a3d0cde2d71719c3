//! Calibration curves from dilution series.
//!
//! Readings are regressed on `log10(concentration)`, so a curve is
//! `reading = intercept + slope * log10(c)` with `slope` in response units
//! per decade. Within the sensitive range the curve is strictly monotone and
//! can be inverted; outside it the response may plateau (below the detection
//! limit) or turn over (inner-filter quenching at high concentration), so
//! inversion there is refused instead of extrapolated.

use std::f64::consts::LN_10;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colorimetry::{Approach, CaptureContext};

/// Minimum coefficient of determination for a sensitive range.
pub const MIN_R_SQUARED: f64 = 0.95;
/// Minimum number of points in a sensitive range.
pub const MIN_RANGE_POINTS: usize = 3;
/// Default plateau threshold as a fraction of the fitted slope.
pub const DEFAULT_PLATEAU_THETA: f64 = 0.2;
/// Relative tolerance on the ratio of successive concentrations.
/// Coverage factor applied to the replicate standard deviation.
pub const COVERAGE: f64 = 3.0;
pub const GEOMETRIC_TOLERANCE: f64 = 0.01;

#[derive(Debug, Error, PartialEq)]
pub enum CalibrationError {
    #[error("fewer than {needed} points (got {got})")]
    TooFewPoints { needed: usize, got: usize },
    #[error("concentration must be positive and finite, got {0}")]
    NonPositiveConcentration(f64),
    #[error(
        "concentrations must be strictly increasing (point {index}: {value} after {previous})"
    )]
    NotIncreasing {
        index: usize,
        previous: f64,
        value: f64,
    },
    #[error("duplicate concentration {0}")]
    DuplicateConcentration(f64),
    #[error("point {index} has no replicate readings")]
    NoReplicates { index: usize },
    #[error("non-finite reading {value} at point {index}")]
    NonFiniteReading { index: usize, value: f64 },
    #[error("fewer than 2 replicates (got {0})")]
    TooFewReplicates(usize),
    #[error("replicate mean is zero, relative spread is undefined")]
    ZeroMean,
    #[error("no run of at least {MIN_RANGE_POINTS} strictly monotone points reaches R^2 >= {MIN_R_SQUARED}; the assay is not quantifiable under these settings")]
    NoSensitiveRange,
    #[error("dilution factor must be greater than 1, got {0}")]
    InvalidDilutionFactor(f64),
    #[error("plateau threshold must lie in [0, 1), got {0}")]
    InvalidTheta(f64),
    #[error(
        "reading {reading} is outside the invertible span [{lo}, {hi}]; refusing to extrapolate"
    )]
    OutOfSpan { reading: f64, lo: f64, hi: f64 },
    #[error("reading spread must be non-negative and finite, got {0}")]
    InvalidSpread(f64),
    #[error("all readings are equal, normalization is undefined")]
    AllEqual,
    #[error("invalid curve: {0}")]
    InvalidCurve(String),
}

pub type Result<T, E = CalibrationError> = std::result::Result<T, E>;

/// One concentration of a dilution series with its replicate readings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub concentration: f64,
    pub replicates: Vec<f64>,
}

impl SeriesPoint {
    pub fn new(concentration: f64, replicates: Vec<f64>) -> Self {
        Self {
            concentration,
            replicates,
        }
    }

    pub fn mean(&self) -> f64 {
        self.replicates.iter().sum::<f64>() / self.replicates.len() as f64
    }
}

/// Replicate readings at strictly increasing positive concentrations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSeries")]
pub struct MeasurementSeries {
    unit: String,
    approach: Approach,
    context: CaptureContext,
    points: Vec<SeriesPoint>,
}

#[derive(Deserialize)]
struct RawSeries {
    unit: String,
    approach: Approach,
    context: CaptureContext,
    points: Vec<SeriesPoint>,
}

impl TryFrom<RawSeries> for MeasurementSeries {
    type Error = CalibrationError;

    fn try_from(raw: RawSeries) -> Result<Self> {
        Self::new(raw.unit, raw.approach, raw.context, raw.points)
    }
}

impl MeasurementSeries {
    pub fn new(
        unit: impl Into<String>,
        approach: Approach,
        context: CaptureContext,
        points: Vec<SeriesPoint>,
    ) -> Result<Self> {
        for (index, p) in points.iter().enumerate() {
            if !(p.concentration.is_finite() && p.concentration > 0.0) {
                return Err(CalibrationError::NonPositiveConcentration(p.concentration));
            }
            if index > 0 && p.concentration <= points[index - 1].concentration {
                return Err(CalibrationError::NotIncreasing {
                    index,
                    previous: points[index - 1].concentration,
                    value: p.concentration,
                });
            }
            if p.replicates.is_empty() {
                return Err(CalibrationError::NoReplicates { index });
            }
            if let Some(&value) = p.replicates.iter().find(|v| !v.is_finite()) {
                return Err(CalibrationError::NonFiniteReading { index, value });
            }
        }
        Ok(Self {
            unit: unit.into(),
            approach,
            context,
            points,
        })
    }

    pub fn unit(&self) -> &str {
        &self.unit
    }

    pub fn approach(&self) -> Approach {
        self.approach
    }

    pub fn context(&self) -> &CaptureContext {
        &self.context
    }

    pub fn points(&self) -> &[SeriesPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `(concentration, mean reading)` per point.
    pub fn means(&self) -> Vec<(f64, f64)> {
        self.points
            .iter()
            .map(|p| (p.concentration, p.mean()))
            .collect()
    }
}

/// Least-squares line of reading against `log10(concentration)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    /// Response units per decade of concentration.
    pub slope: f64,
    /// Reading at concentration 1 (in the series unit).
    pub intercept: f64,
    pub r_squared: f64,
}

impl LinearFit {
    /// Fit equivalent to the exponential inverse form `c = a * exp(b * reading)`.
    pub fn from_exponential(a: f64, b: f64) -> Self {
        Self {
            slope: LN_10 / b,
            intercept: -a.ln() / b,
            r_squared: 1.0,
        }
    }

    /// `(a, b)` such that `c = a * exp(b * reading)`.
    pub fn exponential_form(&self) -> (f64, f64) {
        let b = LN_10 / self.slope;
        ((-self.intercept * b).exp(), b)
    }

    pub fn predict(&self, concentration: f64) -> f64 {
        self.intercept + self.slope * concentration.log10()
    }

    pub fn concentration_at(&self, reading: f64) -> f64 {
        10f64.powf((reading - self.intercept) / self.slope)
    }
}

/// Ordinary least squares of reading on `log10(c)`.
pub fn fit_log_linear(points: &[(f64, f64)]) -> Result<LinearFit> {
    if points.len() < 2 {
        return Err(CalibrationError::TooFewPoints {
            needed: 2,
            got: points.len(),
        });
    }
    for (i, &(c, r)) in points.iter().enumerate() {
        if !(c.is_finite() && c > 0.0) {
            return Err(CalibrationError::NonPositiveConcentration(c));
        }
        if !r.is_finite() {
            return Err(CalibrationError::NonFiniteReading { index: i, value: r });
        }
        if points[..i].iter().any(|&(other, _)| other == c) {
            return Err(CalibrationError::DuplicateConcentration(c));
        }
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|&(c, _)| c.log10()).collect();
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = points.iter().map(|&(_, r)| r).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut ss_tot) = (0.0, 0.0, 0.0);
    for (x, &(_, y)) in xs.iter().zip(points) {
        let (dx, dy) = (x - mean_x, y - mean_y);
        sxx += dx * dx;
        sxy += dx * dy;
        ss_tot += dy * dy;
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ss_res: f64 = xs
        .iter()
        .zip(points)
        .map(|(x, &(_, y))| {
            let e = y - (intercept + slope * x);
            e * e
        })
        .sum();
    // A constant response is fit exactly by a flat line.
    let r_squared = if ss_tot == 0.0 {
        1.0
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Increasing,
    Decreasing,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Increasing => "increasing",
            Direction::Decreasing => "decreasing",
        })
    }
}

/// Inclusive index window `start..=end` of a series together with its fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensitiveRange {
    pub start: usize,
    pub end: usize,
    pub fit: LinearFit,
    pub direction: Direction,
}

impl SensitiveRange {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

fn step_direction(a: f64, b: f64) -> Option<Direction> {
    if b > a {
        Some(Direction::Increasing)
    } else if b < a {
        Some(Direction::Decreasing)
    } else {
        None
    }
}

/// Longest strictly monotone window of at least three points with R² >= 0.95.
///
/// Ties go to the higher R², then to the leftmost start.
pub fn find_sensitive_range(series: &MeasurementSeries) -> Result<SensitiveRange> {
    let means = series.means();
    let n = means.len();
    if n < MIN_RANGE_POINTS {
        return Err(CalibrationError::TooFewPoints {
            needed: MIN_RANGE_POINTS,
            got: n,
        });
    }
    let mut best: Option<SensitiveRange> = None;
    for start in 0..n - 1 {
        let Some(direction) = step_direction(means[start].1, means[start + 1].1) else {
            continue;
        };
        // extend while every step keeps the same strict direction
        let mut run_end = start + 1;
        while run_end + 1 < n
            && step_direction(means[run_end].1, means[run_end + 1].1) == Some(direction)
        {
            run_end += 1;
        }
        for end in (start + MIN_RANGE_POINTS - 1)..=run_end {
            let fit = fit_log_linear(&means[start..=end])?;
            if fit.r_squared < MIN_R_SQUARED {
                continue;
            }
            let candidate = SensitiveRange {
                start,
                end,
                fit,
                direction,
            };
            let better = match &best {
                None => true,
                Some(b) => {
                    candidate.len() > b.len()
                        || (candidate.len() == b.len() && fit.r_squared > b.fit.r_squared)
                }
            };
            if better {
                best = Some(candidate);
            }
        }
    }
    best.ok_or(CalibrationError::NoSensitiveRange)
}

/// Lowest concentration of the sensitive range after dropping a leading plateau.
///
/// A point is on the plateau when the slope of the segment to its successor,
/// measured along the fitted direction, is below `theta` times the fitted slope.
pub fn detection_limit(
    series: &MeasurementSeries,
    range: &SensitiveRange,
    theta: f64,
) -> Result<f64> {
    if !(0.0..1.0).contains(&theta) {
        return Err(CalibrationError::InvalidTheta(theta));
    }
    let means = series.means();
    let slope = range.fit.slope;
    let threshold = theta * slope.abs();
    for i in range.start..range.end {
        let (c0, r0) = means[i];
        let (c1, r1) = means[i + 1];
        let segment = (r1 - r0) / (c1.log10() - c0.log10());
        if segment * slope.signum() >= threshold {
            return Ok(c0);
        }
    }
    Ok(means[range.start].0)
}

/// Spread of replicate readings relative to their mean, in percent.
///
/// `(max - min) / |mean| * 100`; for two readings this is `|I2 - I1| / I_x`
/// with `I_x` their mean.
pub fn repeating_error(replicates: &[f64]) -> Result<f64> {
    if replicates.len() < 2 {
        return Err(CalibrationError::TooFewReplicates(replicates.len()));
    }
    let mean = replicates.iter().sum::<f64>() / replicates.len() as f64;
    if mean == 0.0 {
        return Err(CalibrationError::ZeroMean);
    }
    let max = replicates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = replicates.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((max - min) / mean.abs() * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationRange {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub concentration: f64,
    pub mean_reading: f64,
    /// Percent; absent when the point has a single replicate.
    pub repeating_error: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub max: f64,
    pub average: f64,
}

impl ErrorSummary {
    fn over<'a>(points: impl IntoIterator<Item = &'a PointSummary>) -> Option<Self> {
        let errors: Vec<f64> = points
            .into_iter()
            .filter_map(|p| p.repeating_error)
            .collect();
        if errors.is_empty() {
            return None;
        }
        Some(Self {
            max: errors.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            average: errors.iter().sum::<f64>() / errors.len() as f64,
        })
    }
}

/// Repeating-error summaries over the sensitive range and over the full series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Repeatability {
    pub sensitive_range: Option<ErrorSummary>,
    pub full_series: Option<ErrorSummary>,
}

/// Fitted response model with its quality metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub approach: Approach,
    pub unit: String,
    /// Response units per decade of concentration.
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub sensitive_range: ConcentrationRange,
    pub detection_limit: f64,
    pub dilution_factor: f64,
    /// `slope * log10(dilution_factor)`: response change per dilution step.
    pub sensitivity_per_step: f64,
    pub per_point: Vec<PointSummary>,
    pub repeatability: Repeatability,
    pub monotone_direction: Direction,
    /// Pooled standard deviation of replicate readings inside the sensitive
    /// range; `None` without replicates.
    #[serde(default)]
    pub replicate_sd: Option<f64>,
    /// How far the invertible span reaches past the fitted endpoints: the
    /// larger of the worst replicate residual and `COVERAGE * replicate_sd`.
    #[serde(default)]
    pub span_margin: f64,
}

impl CalibrationCurve {
    /// Curve from the exponential form `c = a * exp(b * reading)` valid on `[c_lo, c_hi]`.
    pub fn from_exponential(
        approach: Approach,
        unit: impl Into<String>,
        a: f64,
        b: f64,
        range: ConcentrationRange,
        dilution_factor: f64,
    ) -> Result<Self> {
        if !(a > 0.0 && a.is_finite() && b != 0.0 && b.is_finite()) {
            return Err(CalibrationError::InvalidCurve(format!(
                "exponential form needs a > 0 and b != 0, got a={a}, b={b}"
            )));
        }
        if !(range.lo > 0.0 && range.lo < range.hi && range.hi.is_finite()) {
            return Err(CalibrationError::InvalidCurve(format!(
                "range must satisfy 0 < lo < hi, got [{}, {}]",
                range.lo, range.hi
            )));
        }
        if !(dilution_factor > 1.0 && dilution_factor.is_finite()) {
            return Err(CalibrationError::InvalidDilutionFactor(dilution_factor));
        }
        let fit = LinearFit::from_exponential(a, b);
        Ok(Self {
            approach,
            unit: unit.into(),
            slope: fit.slope,
            intercept: fit.intercept,
            r_squared: 1.0,
            sensitive_range: range,
            detection_limit: range.lo,
            dilution_factor,
            sensitivity_per_step: fit.slope * dilution_factor.log10(),
            per_point: Vec::new(),
            repeatability: Repeatability {
                sensitive_range: None,
                full_series: None,
            },
            monotone_direction: if fit.slope > 0.0 {
                Direction::Increasing
            } else {
                Direction::Decreasing
            },
            replicate_sd: None,
            span_margin: 0.0,
        })
    }

    pub fn fit(&self) -> LinearFit {
        LinearFit {
            slope: self.slope,
            intercept: self.intercept,
            r_squared: self.r_squared,
        }
    }

    /// Reading the curve predicts at `concentration`.
    pub fn predict(&self, concentration: f64) -> f64 {
        self.fit().predict(concentration)
    }

    /// Response change per e-fold of concentration, `1/b` in the exponential form.
    pub fn slope_per_e_fold(&self) -> f64 {
        self.slope / LN_10
    }

    /// `(min, max)` of predicted readings over the sensitive range.
    pub fn reading_span(&self) -> (f64, f64) {
        let a = self.predict(self.sensitive_range.lo);
        let b = self.predict(self.sensitive_range.hi);
        (a.min(b) - self.span_margin, a.max(b) + self.span_margin)
    }

    pub fn sensitive_summary(&self) -> Option<ErrorSummary> {
        self.repeatability.sensitive_range
    }
}

/// Output of [`build_curve`]: the curve plus non-fatal diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct BuiltCurve {
    pub curve: CalibrationCurve,
    pub range: SensitiveRange,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveOptions {
    /// Plateau threshold for the detection limit, fraction of fitted slope.
    pub plateau_theta: f64,
}

impl Default for CurveOptions {
    fn default() -> Self {
        Self {
            plateau_theta: DEFAULT_PLATEAU_THETA,
        }
    }
}

/// Fits a calibration curve to a dilution series and computes its metrics.
pub fn build_curve(
    series: &MeasurementSeries,
    dilution_factor: f64,
    options: CurveOptions,
) -> Result<BuiltCurve> {
    if !(dilution_factor > 1.0 && dilution_factor.is_finite()) {
        return Err(CalibrationError::InvalidDilutionFactor(dilution_factor));
    }
    if series.len() < 2 {
        return Err(CalibrationError::TooFewPoints {
            needed: 2,
            got: series.len(),
        });
    }
    let mut warnings = Vec::new();
    for pair in series.points().windows(2) {
        let ratio = pair[1].concentration / pair[0].concentration;
        if (ratio / dilution_factor - 1.0).abs() > GEOMETRIC_TOLERANCE {
            warnings.push(format!(
                "concentration step {} -> {} is a factor of {ratio:.4}, expected {dilution_factor}",
                pair[0].concentration, pair[1].concentration
            ));
        }
    }

    let range = find_sensitive_range(series)?;
    let detection = detection_limit(series, &range, options.plateau_theta)?;

    let per_point: Vec<PointSummary> = series
        .points()
        .iter()
        .map(|p| PointSummary {
            concentration: p.concentration,
            mean_reading: p.mean(),
            repeating_error: repeating_error(&p.replicates).ok(),
        })
        .collect();
    let repeatability = Repeatability {
        sensitive_range: ErrorSummary::over(&per_point[range.start..=range.end]),
        full_series: ErrorSummary::over(&per_point),
    };
    let points = series.points();
    let span_margin = points[range.start..=range.end]
        .iter()
        .flat_map(|p| {
            let fitted = range.fit.predict(p.concentration);
            p.replicates.iter().map(move |r| (r - fitted).abs())
        })
        .fold(0.0, f64::max);
    let replicate_sd = pooled_sd(&points[range.start..=range.end]);
    let span_margin = span_margin.max(COVERAGE * replicate_sd.unwrap_or(0.0));
    let curve = CalibrationCurve {
        approach: series.approach(),
        unit: series.unit().to_string(),
        slope: range.fit.slope,
        intercept: range.fit.intercept,
        r_squared: range.fit.r_squared,
        sensitive_range: ConcentrationRange {
            lo: points[range.start].concentration,
            hi: points[range.end].concentration,
        },
        detection_limit: detection,
        dilution_factor,
        sensitivity_per_step: range.fit.slope * dilution_factor.log10(),
        per_point,
        repeatability,
        monotone_direction: range.direction,
        replicate_sd,
        span_margin,
    };
    Ok(BuiltCurve {
        curve,
        range,
        warnings,
    })
}

/// Pooled within-point standard deviation of replicate readings.
pub fn pooled_sd(points: &[SeriesPoint]) -> Option<f64> {
    let (mut ss, mut dof) = (0.0, 0usize);
    for p in points.iter().filter(|p| p.replicates.len() > 1) {
        let mean = p.mean();
        ss += p.replicates.iter().map(|r| (r - mean).powi(2)).sum::<f64>();
        dof += p.replicates.len() - 1;
    }
    (dof > 0).then(|| (ss / dof as f64).sqrt())
}

/// Concentration for `reading`, refusing readings outside the fitted span.
pub fn invert_curve(curve: &CalibrationCurve, reading: f64) -> Result<f64> {
    let (lo, hi) = curve.reading_span();
    if !(reading >= lo && reading <= hi) {
        return Err(CalibrationError::OutOfSpan { reading, lo, hi });
    }
    Ok(curve.fit().concentration_at(reading))
}

/// Point estimate with the concentration interval implied by a reading error bar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationEstimate {
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    /// `|upper - lower| / value * 100`.
    pub measuring_error: f64,
}

/// Inverts `reading ± spread` and reports the relative width of the interval.
///
/// Only the reading itself must lie in the invertible span; the interval
/// bounds follow the fitted line.
pub fn measuring_error(
    curve: &CalibrationCurve,
    reading: f64,
    spread: f64,
) -> Result<ConcentrationEstimate> {
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(CalibrationError::InvalidSpread(spread));
    }
    let value = invert_curve(curve, reading)?;
    let (a, b) = if spread == 0.0 {
        (value, value)
    } else {
        let fit = curve.fit();
        (
            fit.concentration_at(reading - spread),
            fit.concentration_at(reading + spread),
        )
    };
    let (lower, upper) = (a.min(b), a.max(b));
    Ok(ConcentrationEstimate {
        value,
        lower,
        upper,
        measuring_error: (upper - lower).abs() / value * 100.0,
    })
}

/// Min-max scales readings to `[0, 1]`, keeping x values.
pub fn normalize_curve(points: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
    if points.len() < 2 {
        return Err(CalibrationError::TooFewPoints {
            needed: 2,
            got: points.len(),
        });
    }
    if let Some((index, &(_, value))) = points.iter().enumerate().find(|(_, p)| !p.1.is_finite()) {
        return Err(CalibrationError::NonFiniteReading { index, value });
    }
    let min = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let max = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Err(CalibrationError::AllEqual);
    }
    let span = max - min;
    Ok(points.iter().map(|&(x, r)| (x, (r - min) / span)).collect())
}
