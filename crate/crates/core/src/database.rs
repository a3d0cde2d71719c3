//! Calibration records keyed by capture context, and reverse mapping.
//!
//! The database is a value: mutation returns a new database. On disk it is a
//! UTF-8 JSON document with a top-level `format_version`; floats are written
//! in shortest round-trip form so a load after save is bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{
    self, CalibrationCurve, CalibrationError, ConcentrationEstimate, MeasurementSeries,
};
use crate::colorimetry::{
    exposure_normalize, Approach, CaptureContext, ColorimetryError, ExposureSettings, Reading,
};

pub const FORMAT_VERSION: u32 = 1;
/// Default temperature window for context matching, degrees Celsius.
pub const DEFAULT_TEMPERATURE_TOLERANCE: f64 = 2.0;
/// Relative tolerance for exposure-time equality.
pub const EXPOSURE_RELATIVE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DatabaseError {
    #[error("record id {0:?} already exists")]
    DuplicateId(String),
    #[error("record {id:?}: curve unit {curve_unit:?} differs from series unit {series_unit:?}")]
    UnitMismatch {
        id: String,
        curve_unit: String,
        series_unit: String,
    },
    #[error("record {id:?}: {message}")]
    InvalidRecord { id: String, message: String },
    #[error("no record with id {0:?}")]
    UnknownRecord(String),
    #[error("no calibration record matches assay {assay:?}, phone {phone:?}, approach {approach}")]
    NoMatch {
        assay: String,
        phone: String,
        approach: Approach,
    },
    #[error("unsupported database format_version {found}, this build reads {FORMAT_VERSION}")]
    UnsupportedVersion { found: u32 },
    #[error("malformed database {path}: {message} at line {line}, column {column} (byte offset {offset})")]
    Malformed {
        path: String,
        message: String,
        line: usize,
        column: usize,
        offset: usize,
    },
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Colorimetry(#[from] ColorimetryError),
}

pub type Result<T, E = DatabaseError> = std::result::Result<T, E>;

/// A calibration curve together with the raw series and settings it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub id: String,
    pub context: CaptureContext,
    pub curve: CalibrationCurve,
    pub series: MeasurementSeries,
    pub created_at: DateTime<Utc>,
}

impl CalibrationRecord {
    pub fn validate(&self) -> Result<()> {
        if self.curve.unit != self.series.unit() {
            return Err(DatabaseError::UnitMismatch {
                id: self.id.clone(),
                curve_unit: self.curve.unit.clone(),
                series_unit: self.series.unit().to_string(),
            });
        }
        if self.id.is_empty() {
            return Err(DatabaseError::InvalidRecord {
                id: self.id.clone(),
                message: "id must not be empty".into(),
            });
        }
        if self.curve.approach != self.series.approach() {
            return Err(DatabaseError::InvalidRecord {
                id: self.id.clone(),
                message: format!(
                    "curve approach {} differs from series approach {}",
                    self.curve.approach,
                    self.series.approach()
                ),
            });
        }
        self.context
            .validate()
            .map_err(|message| DatabaseError::InvalidRecord {
                id: self.id.clone(),
                message,
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationDatabase {
    format_version: u32,
    records: Vec<CalibrationRecord>,
}

impl Default for CalibrationDatabase {
    fn default() -> Self {
        Self::new()
    }
}

/// Which context fields must agree for a record to match.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchOptions {
    pub temperature_tolerance: f64,
    /// Require equal exposure time and ISO. Turn off when readings are
    /// exposure-normalized or exposure-invariant.
    pub match_exposure: bool,
}

impl Default for MatchOptions {
    fn default() -> Self {
        Self {
            temperature_tolerance: DEFAULT_TEMPERATURE_TOLERANCE,
            match_exposure: true,
        }
    }
}

impl MatchOptions {
    /// Options used for reverse mapping: exposure differences are handled
    /// by normalization (grey scale) or cancel out (channel ratio).
    pub fn for_estimation() -> Self {
        Self {
            match_exposure: false,
            ..Self::default()
        }
    }
}

fn exposure_equal(a: f64, b: f64) -> bool {
    (a - b).abs() <= EXPOSURE_RELATIVE_TOLERANCE * a.abs().max(b.abs())
}

/// Result of reverse mapping a reading through the best matching record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Estimate {
    pub record_id: String,
    pub unit: String,
    /// Reading after exposure normalization to the record's settings.
    pub normalized_reading: f64,
    pub estimate: ConcentrationEstimate,
}

impl CalibrationDatabase {
    pub fn new() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            records: Vec::new(),
        }
    }

    pub fn format_version(&self) -> u32 {
        self.format_version
    }

    pub fn records(&self) -> &[CalibrationRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&CalibrationRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// New database with `record` appended.
    pub fn add_record(&self, record: CalibrationRecord) -> Result<Self> {
        record.validate()?;
        if self.get(&record.id).is_some() {
            return Err(DatabaseError::DuplicateId(record.id));
        }
        let mut next = self.clone();
        next.records.push(record);
        Ok(next)
    }

    /// Records compatible with `query` for `approach`, best first.
    ///
    /// Assay, phone, LED power, approach (and, when requested, ISO and
    /// exposure time) must agree; temperature must be within tolerance.
    /// Ranking is by temperature distance, then newest first, then id.
    pub fn match_context(
        &self,
        query: &CaptureContext,
        approach: Approach,
        options: MatchOptions,
    ) -> Vec<&CalibrationRecord> {
        let mut hits: Vec<(f64, &CalibrationRecord)> = self
            .records
            .iter()
            .filter(|r| {
                let c = &r.context;
                c.assay == query.assay
                    && c.phone == query.phone
                    && c.led_power == query.led_power
                    && r.curve.approach == approach
                    && (!options.match_exposure
                        || (c.iso == query.iso && exposure_equal(c.exposure_s, query.exposure_s)))
            })
            .map(|r| ((r.context.temperature_c - query.temperature_c).abs(), r))
            .filter(|(dt, _)| *dt <= options.temperature_tolerance)
            .collect();
        hits.sort_by(|(da, a), (db, b)| {
            da.total_cmp(db)
                .then_with(|| b.created_at.cmp(&a.created_at))
                .then_with(|| a.id.cmp(&b.id))
        });
        hits.into_iter().map(|(_, r)| r).collect()
    }

    /// Maps a reading to a concentration through the best matching record.
    ///
    /// Grey-scale readings are first rescaled to the record's exposure
    /// settings; channel ratios are used as-is.
    pub fn estimate_concentration(
        &self,
        query: &CaptureContext,
        reading: &Reading,
        spread: f64,
        options: MatchOptions,
    ) -> Result<Estimate> {
        let record = self
            .match_context(query, reading.approach, options)
            .into_iter()
            .next()
            .ok_or_else(|| DatabaseError::NoMatch {
                assay: query.assay.clone(),
                phone: query.phone.clone(),
                approach: reading.approach,
            })?;
        let normalized = exposure_normalize(reading, ExposureSettings::from(&record.context))?;
        // spread is in the units of the raw reading, rescale alongside it
        let scale = if reading.value != 0.0 {
            normalized.value / reading.value
        } else {
            1.0
        };
        // sensor noise is fixed in digital numbers: a darker capture scatters
        // further past the calibrated endpoints once normalized
        let k = query.exposure_product() / record.context.exposure_product();
        let widened;
        let curve = if k < 1.0 {
            widened = CalibrationCurve {
                span_margin: record.curve.span_margin / k,
                ..record.curve.clone()
            };
            &widened
        } else {
            &record.curve
        };
        let estimate = calibration::measuring_error(curve, normalized.value, spread * scale.abs())?;
        Ok(Estimate {
            record_id: record.id.clone(),
            unit: record.curve.unit.clone(),
            normalized_reading: normalized.value,
            estimate,
        })
    }

    /// Atomically writes the database as JSON (temp file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let io_err = |source| DatabaseError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut text = serde_json::to_string_pretty(self).expect("database serializes");
        text.push('\n');
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
        tmp.write_all(text.as_bytes()).map_err(io_err)?;
        tmp.as_file().sync_all().map_err(io_err)?;
        tmp.persist(path).map_err(|e| io_err(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| DatabaseError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// Parses a database document; `origin` names the source in diagnostics.
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format_version: u32,
        }
        let malformed = |e: serde_json::Error| DatabaseError::Malformed {
            path: origin.to_string(),
            message: strip_position(&e.to_string()),
            line: e.line(),
            column: e.column(),
            offset: byte_offset(text, e.line(), e.column()),
        };
        let header: Header = serde_json::from_str(text).map_err(malformed)?;
        if header.format_version != FORMAT_VERSION {
            return Err(DatabaseError::UnsupportedVersion {
                found: header.format_version,
            });
        }
        let db: Self = serde_json::from_str(text).map_err(malformed)?;
        let mut seen = std::collections::HashSet::new();
        for record in &db.records {
            record.validate()?;
            if !seen.insert(record.id.as_str()) {
                return Err(DatabaseError::DuplicateId(record.id.clone()));
            }
        }
        Ok(db)
    }
}

fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}

/// Byte offset of a 1-based line and column as reported by serde_json.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column).min(text.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{build_curve, CurveOptions, SeriesPoint};

    fn ctx(temperature_c: f64) -> CaptureContext {
        CaptureContext {
            assay: "milk".into(),
            temperature_c,
            phone: "phone-a".into(),
            led_power: "2".into(),
            exposure_s: 0.05,
            iso: 200.0,
            aperture_f: 2.0,
            calibration_constant: Some(12.5),
        }
    }

    fn record(id: &str, temperature_c: f64, created: i64) -> CalibrationRecord {
        let context = ctx(temperature_c);
        let series = MeasurementSeries::new(
            "mg/L",
            Approach::GreyScale,
            context.clone(),
            (0..5)
                .map(|i| {
                    let c = 5f64.powi(i);
                    SeriesPoint::new(c, vec![40.0 + 12.0 * c.log10(), 41.0 + 12.0 * c.log10()])
                })
                .collect(),
        )
        .unwrap();
        let curve = build_curve(&series, 5.0, CurveOptions::default())
            .unwrap()
            .curve;
        CalibrationRecord {
            id: id.into(),
            context,
            curve,
            series,
            created_at: DateTime::from_timestamp(created, 0).unwrap(),
        }
    }

    #[test]
    fn add_and_fetch() {
        let db = CalibrationDatabase::new();
        let r = record("a", 22.0, 0);
        let db2 = db.add_record(r.clone()).unwrap();
        assert_eq!(db.len(), 0);
        assert_eq!(db2.len(), 1);
        assert_eq!(db2.get("a"), Some(&r));
        let err = db2.add_record(record("a", 23.0, 1)).unwrap_err();
        assert!(matches!(err, DatabaseError::DuplicateId(_)));
        assert_eq!(db2.len(), 1);
    }

    #[test]
    fn unit_mismatch_rejected() {
        let mut r = record("a", 22.0, 0);
        r.curve.unit = "nM".into();
        assert!(matches!(
            CalibrationDatabase::new().add_record(r),
            Err(DatabaseError::UnitMismatch { .. })
        ));
    }

    #[test]
    fn temperature_window_and_ranking() {
        let db = CalibrationDatabase::new()
            .add_record(record("warm", 25.0, 0))
            .unwrap()
            .add_record(record("cool", 21.0, 0))
            .unwrap();
        let hits = db.match_context(&ctx(22.0), Approach::GreyScale, MatchOptions::default());
        let ids: Vec<&str> = hits.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["cool"]);

        let db = db
            .add_record(record("exact-old", 22.0, 10))
            .unwrap()
            .add_record(record("exact-new", 22.0, 20))
            .unwrap();
        let hits = db.match_context(&ctx(22.0), Approach::GreyScale, MatchOptions::default());
        let ids: Vec<&str> = hits.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["exact-new", "exact-old", "cool"]);
    }

    #[test]
    fn filters_on_identity_fields() {
        let db = CalibrationDatabase::new()
            .add_record(record("a", 22.0, 0))
            .unwrap();
        let mut q = ctx(22.0);
        q.assay = "yeast".into();
        assert!(db
            .match_context(&q, Approach::GreyScale, MatchOptions::default())
            .is_empty());
        assert!(db
            .match_context(
                &ctx(22.0),
                Approach::GREEN_OVER_BLUE,
                MatchOptions::default()
            )
            .is_empty());
        let mut q = ctx(22.0);
        q.exposure_s = 0.1;
        assert!(db
            .match_context(&q, Approach::GreyScale, MatchOptions::default())
            .is_empty());
        assert_eq!(
            db.match_context(&q, Approach::GreyScale, MatchOptions::for_estimation())
                .len(),
            1
        );
        q.exposure_s = 0.05 * (1.0 + 1e-12);
        assert_eq!(
            db.match_context(&q, Approach::GreyScale, MatchOptions::default())
                .len(),
            1
        );
    }

    #[test]
    fn estimates_through_best_record() {
        let db = CalibrationDatabase::new()
            .add_record(record("a", 22.0, 0))
            .unwrap();
        let curve = &db.get("a").unwrap().curve;
        let truth = 17.0;
        let reading = Reading {
            approach: Approach::GreyScale,
            value: curve.predict(truth),
            context: ctx(22.0),
            saturation: 0.0,
        };
        let est = db
            .estimate_concentration(&ctx(22.0), &reading, 0.0, MatchOptions::for_estimation())
            .unwrap();
        assert_eq!(est.record_id, "a");
        assert!((est.estimate.value / truth - 1.0).abs() < 1e-9);

        // same scene at twice the exposure time
        let mut doubled = reading.clone();
        doubled.value *= 2.0;
        doubled.context.exposure_s *= 2.0;
        let est2 = db
            .estimate_concentration(
                &doubled.context,
                &doubled,
                0.0,
                MatchOptions::for_estimation(),
            )
            .unwrap();
        assert!((est2.estimate.value / est.estimate.value - 1.0).abs() < 1e-9);

        let mut high = reading.clone();
        high.value = curve.reading_span().1 + 1.0;
        assert!(matches!(
            db.estimate_concentration(&ctx(22.0), &high, 0.0, MatchOptions::for_estimation()),
            Err(DatabaseError::Calibration(
                CalibrationError::OutOfSpan { .. }
            ))
        ));

        let mut q = ctx(22.0);
        q.assay = "yeast".into();
        assert!(matches!(
            db.estimate_concentration(&q, &reading, 0.0, MatchOptions::for_estimation()),
            Err(DatabaseError::NoMatch { .. })
        ));

        let mut sat = reading;
        sat.saturation = 0.2;
        assert!(matches!(
            db.estimate_concentration(&ctx(22.0), &sat, 0.0, MatchOptions::for_estimation()),
            Err(DatabaseError::Colorimetry(
                ColorimetryError::Saturated { .. }
            ))
        ));
    }

    #[test]
    fn json_round_trip() {
        let db = CalibrationDatabase::new();
        let back =
            CalibrationDatabase::from_json(&serde_json::to_string(&db).unwrap(), "mem").unwrap();
        assert_eq!(back, db);

        let db = db
            .add_record(record("a", 22.0, 0))
            .unwrap()
            .add_record(record("b", 21.0, 5))
            .unwrap()
            .add_record(record("c", 23.5, 9))
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.json");
        db.save(&path).unwrap();
        assert_eq!(CalibrationDatabase::load(&path).unwrap(), db);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let text = serde_json::to_string_pretty(
            &CalibrationDatabase::new()
                .add_record(record("a", 22.0, 0))
                .unwrap(),
        )
        .unwrap();
        let cut = &text[..text.len() / 2];
        match CalibrationDatabase::from_json(cut, "db.json") {
            Err(DatabaseError::Malformed { offset, line, .. }) => {
                assert!(line > 1);
                assert_eq!(offset, cut.len());
            }
            other => panic!("expected Malformed, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch() {
        let err = CalibrationDatabase::from_json(r#"{"format_version": 99, "records": []}"#, "x")
            .unwrap_err();
        assert!(matches!(
            err,
            DatabaseError::UnsupportedVersion { found: 99 }
        ));
    }

    #[test]
    fn byte_offsets() {
        let text = "ab\ncde\nf";
        assert_eq!(byte_offset(text, 1, 2), 2);
        assert_eq!(byte_offset(text, 2, 3), 6);
        assert_eq!(byte_offset(text, 3, 1), 8);
    }
}
