//! `assaylens` command line.
//!
//! Exit codes: 0 success, 1 internal error, 2 input validation,
//! 3 no matching calibration or reading out of range.

use std::ffi::OsString;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::calibration::{
    build_curve, normalize_curve, CalibrationCurve, CalibrationError, CurveOptions, COVERAGE,
};
use crate::colorimetry::{
    channel_ratio, grey_scale, Approach, CaptureContext, Channel, ColorimetryError,
};
use crate::database::{
    CalibrationDatabase, CalibrationRecord, DatabaseError, MatchOptions,
    DEFAULT_TEMPERATURE_TOLERANCE,
};
use crate::imaging::{ImagingError, Roi};
use crate::manifest::{LoadedManifest, Manifest, ManifestError};
use crate::pipeline::{load_stack, measure_manifest, measure_stack, series_for, StackMeasurement};
use crate::synthgen::{generate_dataset, DatasetSpec, SynthError, SyntheticModel};
use crate::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NO_MATCH: i32 = 3;

/// Header of the normalized-curve report.
pub const REPORT_HEADER: &str = "concentration,reading_normalized,source";

#[derive(Debug, Parser)]
#[command(
    name = "assaylens",
    version,
    about = "Concentration estimates from assay cuvette photographs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Average a stack of images and print ROI channel statistics.
    Analyze(AnalyzeArgs),
    /// Fit calibration curves from a manifest and store them in a database.
    Calibrate(CalibrateArgs),
    /// Map readings to concentrations through a calibration database.
    Estimate(EstimateArgs),
    /// Emit min-max normalized response curves as CSV.
    Report(ReportArgs),
    /// Generate a synthetic dataset with a known response.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Human,
    Csv,
}

fn parse_roi(s: &str) -> Result<Roi, String> {
    s.parse().map_err(|e: ImagingError| e.to_string())
}

fn parse_approach(s: &str) -> Result<Approach, String> {
    s.parse().map_err(|e: ColorimetryError| e.to_string())
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Frames of one stack; they are averaged before statistics are taken.
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
    /// Region of interest as x,y,w,h (defaults to the whole image).
    #[arg(long, value_parser = parse_roi)]
    pub roi: Option<Roi>,
    /// Channel pair such as G/B, or grey.
    #[arg(long, default_value = "G/B", value_parser = parse_approach)]
    pub approach: Approach,
    #[arg(long, value_enum, default_value = "human")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Nominal dilution factor between successive concentrations.
    #[arg(long)]
    pub dilution_factor: f64,
    /// Database file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Existing database to extend (defaults to --out when it exists).
    #[arg(long)]
    pub db: Option<PathBuf>,
    /// Record id prefix; each approach appends `:<approach>` (defaults to the assay).
    #[arg(long)]
    pub id: Option<String>,
    /// Record timestamp, RFC 3339 (defaults to SOURCE_DATE_EPOCH, then the clock).
    #[arg(long)]
    pub created_at: Option<DateTime<Utc>>,
    /// Plateau threshold for the detection limit, as a fraction of the slope.
    #[arg(long, default_value_t = crate::calibration::DEFAULT_PLATEAU_THETA)]
    pub theta: f64,
    /// Approaches to calibrate (overrides the manifest).
    #[arg(long, value_delimiter = ',', value_parser = parse_approach)]
    pub approach: Vec<Approach>,
    #[arg(long, value_enum, default_value = "human")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub db: PathBuf,
    /// Manifest supplying context, ROI, approaches and (without --images) image groups.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Frames of a single stack to estimate.
    #[arg(long, num_args = 1..)]
    pub images: Vec<PathBuf>,
    #[arg(long, value_parser = parse_roi)]
    pub roi: Option<Roi>,
    #[arg(long, value_delimiter = ',', value_parser = parse_approach)]
    pub approach: Vec<Approach>,
    #[arg(long)]
    pub assay: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub phone: Option<String>,
    #[arg(long)]
    pub led_power: Option<String>,
    #[arg(long)]
    pub exposure_s: Option<f64>,
    #[arg(long)]
    pub iso: Option<f64>,
    #[arg(long)]
    pub aperture: Option<f64>,
    /// Reading error bar (±, reading units). Defaults to three times the
    /// matched record's pooled replicate standard deviation, widened in
    /// proportion when the capture is darker than the calibration.
    #[arg(long)]
    pub spread: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE_TOLERANCE)]
    pub temperature_tolerance: f64,
    #[arg(long, value_enum, default_value = "human")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub db: PathBuf,
    #[arg(long)]
    pub record: String,
    /// Instrument CSV with `concentration` and `reading` columns.
    #[arg(long)]
    pub external: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-pixel noise standard deviation in grey levels.
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 16)]
    pub frames: usize,
    /// Replicate groups (readings) per concentration.
    #[arg(long, default_value_t = 3)]
    pub groups: usize,
    #[arg(long, default_value_t = 6)]
    pub points: usize,
    /// Lowest concentration.
    #[arg(long, default_value_t = 1e-9)]
    pub start: f64,
    /// Dilution factor between points.
    #[arg(long, default_value_t = 10.0)]
    pub factor: f64,
    /// Response is flat below this concentration (defaults to --start).
    #[arg(long)]
    pub plateau_below: Option<f64>,
    /// Response stops rising above this concentration (defaults to the highest point).
    #[arg(long)]
    pub linear_until: Option<f64>,
    /// Decades of response lost per decade above --linear-until.
    #[arg(long)]
    pub downturn: Option<f64>,
    #[arg(long, default_value_t = 32)]
    pub width: u32,
    #[arg(long, default_value_t = 32)]
    pub height: u32,
    /// ROI written to the manifest (defaults to the central half of the frame).
    #[arg(long, value_parser = parse_roi)]
    pub roi: Option<Roi>,
    #[arg(long, default_value = "fluorescein")]
    pub assay: String,
    #[arg(long, default_value = "mol/L")]
    pub unit: String,
    #[arg(long, default_value = "synthetic")]
    pub phone: String,
    #[arg(long, default_value = "1")]
    pub led_power: String,
    #[arg(long, default_value_t = 0.1)]
    pub exposure_s: f64,
    #[arg(long, default_value_t = 100.0)]
    pub iso: f64,
    #[arg(long, default_value_t = 1.8)]
    pub aperture: f64,
    #[arg(long, default_value_t = 22.0)]
    pub temperature: f64,
    #[arg(long, value_delimiter = ',', default_value = "G/B,grey", value_parser = parse_approach)]
    pub approaches: Vec<Approach>,
    #[arg(long, value_enum, default_value = "human")]
    pub format: Format,
}

/// A failed command: message plus exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

macro_rules! failure_from {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Error::from(e).into()
            }
        }
    )*};
}
failure_from!(
    ImagingError,
    ColorimetryError,
    CalibrationError,
    DatabaseError,
    ManifestError,
    SynthError
);

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Self {
            code: EXIT_INTERNAL,
            message: e.to_string(),
        }
    }
}

/// Exit code for a pipeline error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Imaging(ImagingError::Encode { .. }) => EXIT_INTERNAL,
        Error::Calibration(CalibrationError::OutOfSpan { .. })
        | Error::Database(DatabaseError::Calibration(CalibrationError::OutOfSpan { .. }))
        | Error::Database(DatabaseError::NoMatch { .. })
        | Error::Database(DatabaseError::UnknownRecord(_)) => EXIT_NO_MATCH,
        Error::Synth(SynthError::Io { .. }) => EXIT_INTERNAL,
        _ => EXIT_INPUT,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, Failure> {
    match cmd {
        Command::Analyze(a) => analyze(a, out, err),
        Command::Calibrate(a) => calibrate(a, out, err),
        Command::Estimate(a) => estimate(a, out, err),
        Command::Report(a) => report(a, out),
        Command::Synth(a) => synth(a, out),
    }
}

fn warn_all(err: &mut dyn Write, warnings: &[String]) -> io::Result<()> {
    for w in warnings {
        writeln!(err, "warning: {w}")?;
    }
    Ok(())
}

fn analyze(a: AnalyzeArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, Failure> {
    let loaded = load_stack(&a.images)?;
    warn_all(err, &loaded.warnings)?;
    let roi = a.roi.unwrap_or_else(|| loaded.stack.frames()[0].full_roi());
    let m = measure_stack(&loaded.stack, roi)?;
    let (num, den) = match a.approach {
        Approach::ChannelRatio {
            numerator,
            denominator,
        } => (numerator, denominator),
        Approach::GreyScale => (Channel::G, Channel::B),
    };
    let ratio = channel_ratio(&m.stats, num, den)?;
    let grey = grey_scale(&m.stats);
    let reading = a.approach.evaluate(&m.stats)?;
    let s = &m.stats;
    match a.format {
        Format::Human => {
            writeln!(out, "frames            {}", loaded.stack.len())?;
            writeln!(out, "roi               {roi} ({} px)", s.pixel_count)?;
            writeln!(out, "mean R            {:.6}", s.mean[0])?;
            writeln!(out, "mean G            {:.6}", s.mean[1])?;
            writeln!(out, "mean B            {:.6}", s.mean[2])?;
            writeln!(out, "ratio {num}/{den}         {ratio:.6}")?;
            writeln!(out, "grey scale        {grey:.6}")?;
            writeln!(out, "saturation        {:.6}", m.saturation)?;
        }
        Format::Csv => {
            writeln!(
                out,
                "frames,roi_x,roi_y,roi_w,roi_h,pixel_count,mean_r,mean_g,mean_b,ratio_channels,ratio,grey_scale,saturation_fraction,approach,reading"
            )?;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{num}/{den},{ratio},{grey},{},{},{reading}",
                loaded.stack.len(),
                roi.x,
                roi.y,
                roi.w,
                roi.h,
                s.pixel_count,
                s.mean[0],
                s.mean[1],
                s.mean[2],
                m.saturation,
                a.approach,
            )?;
        }
    }
    if m.saturation > crate::colorimetry::CLIPPING_THRESHOLD {
        writeln!(
            err,
            "warning: {:.2}% of ROI pixels are saturated; intensity readings are clipped",
            m.saturation * 100.0
        )?;
    }
    Ok(EXIT_OK)
}

fn created_at(arg: Option<DateTime<Utc>>) -> Result<DateTime<Utc>, Failure> {
    if let Some(t) = arg {
        return Ok(t);
    }
    if let Ok(epoch) = std::env::var("SOURCE_DATE_EPOCH") {
        let secs: i64 = epoch.trim().parse().map_err(|_| {
            Failure::input(format!("SOURCE_DATE_EPOCH {epoch:?} is not an integer"))
        })?;
        return DateTime::from_timestamp(secs, 0)
            .ok_or_else(|| Failure::input(format!("SOURCE_DATE_EPOCH {secs} is out of range")));
    }
    Ok(Utc::now())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn fmt_opt_exp(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.1}%"))
        .unwrap_or_else(|| "n/a".into())
}

fn calibrate(a: CalibrateArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, Failure> {
    let loaded = Manifest::load(&a.manifest)?;
    let m = &loaded.manifest;
    let approaches = if a.approach.is_empty() {
        m.approaches.clone()
    } else {
        a.approach.clone()
    };
    let base_path =
        a.db.clone()
            .or_else(|| a.out.exists().then(|| a.out.clone()));
    let mut db = match &base_path {
        Some(p) => CalibrationDatabase::load(p)?,
        None => CalibrationDatabase::new(),
    };
    let created = created_at(a.created_at)?;
    let prefix = a.id.clone().unwrap_or_else(|| m.assay.clone());
    let options = CurveOptions {
        plateau_theta: a.theta,
    };

    let measured = measure_manifest(&loaded)?;
    warn_all(err, &measured.warnings)?;
    let mut added = Vec::new();
    for approach in approaches {
        let (series, warnings) = series_for(&loaded, &measured, approach)?;
        warn_all(err, &warnings)?;
        let built = build_curve(&series, a.dilution_factor, options)?;
        warn_all(err, &built.warnings)?;
        let record = CalibrationRecord {
            id: format!("{prefix}:{}", approach.slug()),
            context: m.capture_context(),
            curve: built.curve,
            series,
            created_at: created,
        };
        db = db.add_record(record.clone())?;
        added.push(record);
    }
    db.save(&a.out)?;

    if a.format == Format::Csv {
        writeln!(out, "record_id,approach,unit,detection_limit,range_lo,range_hi,slope_per_decade,intercept,sensitivity_per_step,dilution_factor,slope_per_e_fold,r_squared,max_repeat_sensitive,avg_repeat_sensitive,max_repeat_full,avg_repeat_full")?;
    }
    for r in &added {
        write_metrics(out, a.format, &r.id, &r.curve)?;
    }
    Ok(EXIT_OK)
}

fn write_metrics(
    out: &mut dyn Write,
    format: Format,
    id: &str,
    c: &CalibrationCurve,
) -> io::Result<()> {
    let sens = c.repeatability.sensitive_range;
    let full = c.repeatability.full_series;
    match format {
        Format::Csv => writeln!(
            out,
            "{id},{},{},{:e},{:e},{:e},{},{},{},{},{},{},{},{},{},{}",
            c.approach,
            c.unit,
            c.detection_limit,
            c.sensitive_range.lo,
            c.sensitive_range.hi,
            c.slope,
            c.intercept,
            c.sensitivity_per_step,
            c.dilution_factor,
            c.slope_per_e_fold(),
            c.r_squared,
            fmt_opt(sens.map(|s| s.max)),
            fmt_opt(sens.map(|s| s.average)),
            fmt_opt(full.map(|s| s.max)),
            fmt_opt(full.map(|s| s.average)),
        ),
        Format::Human => {
            writeln!(out, "record {id}")?;
            writeln!(out, "  approach                 {}", c.approach)?;
            writeln!(
                out,
                "  detection limit          {:e} {}",
                c.detection_limit, c.unit
            )?;
            writeln!(
                out,
                "  sensitive range          {:e} - {:e} {}",
                c.sensitive_range.lo, c.sensitive_range.hi, c.unit
            )?;
            writeln!(
                out,
                "  sensitivity              {:.4}/{}-fold ({:.4} per decade, {:.4} per e-fold)",
                c.sensitivity_per_step,
                c.dilution_factor,
                c.slope,
                c.slope_per_e_fold()
            )?;
            writeln!(out, "  R^2                      {:.5}", c.r_squared)?;
            writeln!(
                out,
                "  repeating error          max {} / avg {} (sensitive range); max {} / avg {} (all points)",
                pct(sens.map(|s| s.max)),
                pct(sens.map(|s| s.average)),
                pct(full.map(|s| s.max)),
                pct(full.map(|s| s.average)),
            )?;
            Ok(())
        }
    }
}

struct Source {
    label: String,
    nominal: Option<f64>,
    measurement: StackMeasurement,
}

fn estimate_context(
    a: &EstimateArgs,
    manifest: Option<&Manifest>,
) -> Result<CaptureContext, Failure> {
    let base = manifest.map(Manifest::capture_context);
    fn pick<T: Clone>(flag: &Option<T>, base: Option<T>, name: &str) -> Result<T, Failure> {
        flag.clone()
            .or(base)
            .ok_or_else(|| Failure::input(format!("--{name} is required without --manifest")))
    }
    let b = base.as_ref();
    let ctx = CaptureContext {
        assay: pick(&a.assay, b.map(|c| c.assay.clone()), "assay")?,
        temperature_c: pick(&a.temperature, b.map(|c| c.temperature_c), "temperature")?,
        phone: pick(&a.phone, b.map(|c| c.phone.clone()), "phone")?,
        led_power: pick(&a.led_power, b.map(|c| c.led_power.clone()), "led-power")?,
        exposure_s: pick(&a.exposure_s, b.map(|c| c.exposure_s), "exposure-s")?,
        iso: pick(&a.iso, b.map(|c| c.iso), "iso")?,
        aperture_f: pick(&a.aperture, b.map(|c| c.aperture_f), "aperture")?,
        calibration_constant: b.and_then(|c| c.calibration_constant),
    };
    ctx.validate().map_err(Failure::input)?;
    Ok(ctx)
}

fn estimate(a: EstimateArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, Failure> {
    let db = CalibrationDatabase::load(&a.db)?;
    let loaded: Option<LoadedManifest> = a.manifest.as_deref().map(Manifest::load).transpose()?;
    let manifest = loaded.as_ref().map(|l| &l.manifest);
    let context = estimate_context(&a, manifest)?;
    let approaches = if !a.approach.is_empty() {
        a.approach.clone()
    } else if let Some(m) = manifest {
        m.approaches.clone()
    } else {
        vec![Approach::GREEN_OVER_BLUE]
    };
    if let Some(s) = a.spread {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(Failure::input(format!(
                "--spread must be non-negative, got {s}"
            )));
        }
    }

    let mut sources = Vec::new();
    if !a.images.is_empty() {
        let stack = load_stack(&a.images)?;
        warn_all(err, &stack.warnings)?;
        let roi = a
            .roi
            .or(manifest.map(|m| m.roi))
            .unwrap_or_else(|| stack.stack.frames()[0].full_roi());
        sources.push(Source {
            label: "images".into(),
            nominal: None,
            measurement: measure_stack(&stack.stack, roi)?,
        });
    } else if let Some(l) = &loaded {
        let mut l = l.clone();
        if let Some(roi) = a.roi {
            l.manifest.roi = roi;
        }
        let measured = measure_manifest(&l)?;
        warn_all(err, &measured.warnings)?;
        for (i, (sample, groups)) in l.manifest.samples.iter().zip(measured.groups).enumerate() {
            for (g, measurement) in groups.into_iter().enumerate() {
                sources.push(Source {
                    label: format!("sample{i}/group{g}"),
                    nominal: Some(sample.concentration),
                    measurement,
                });
            }
        }
    } else {
        return Err(Failure::input("either --images or --manifest is required"));
    }

    let options = MatchOptions {
        temperature_tolerance: a.temperature_tolerance,
        ..MatchOptions::for_estimation()
    };
    if a.format == Format::Csv {
        writeln!(out, "source,approach,nominal,reading,normalized_reading,concentration,lower,upper,measuring_error_pct,unit,record_id,status")?;
    }
    let mut worst = EXIT_OK;
    for src in &sources {
        for &approach in &approaches {
            let row = estimate_one(&db, &context, approach, src, a.spread, options);
            match row {
                Ok(r) => match a.format {
                    Format::Csv => writeln!(
                        out,
                        "{},{approach},{},{},{},{:e},{:e},{:e},{},{},{},ok",
                        src.label,
                        fmt_opt_exp(src.nominal),
                        r.reading,
                        r.est.normalized_reading,
                        r.est.estimate.value,
                        r.est.estimate.lower,
                        r.est.estimate.upper,
                        r.est.estimate.measuring_error,
                        r.est.unit,
                        r.est.record_id,
                    )?,
                    Format::Human => writeln!(
                        out,
                        "{} [{approach}] reading {:.6} -> {:.6e} {} (bounds {:.6e} .. {:.6e}, measuring error {:.2}%) via {}",
                        src.label,
                        r.reading,
                        r.est.estimate.value,
                        r.est.unit,
                        r.est.estimate.lower,
                        r.est.estimate.upper,
                        r.est.estimate.measuring_error,
                        r.est.record_id,
                    )?,
                },
                Err(f) => {
                    worst = worst.max(f.code);
                    match a.format {
                        Format::Csv => writeln!(
                            out,
                            "{},{approach},{},,,,,,,,,{}",
                            src.label,
                            fmt_opt_exp(src.nominal),
                            csv_field(&f.message)
                        )?,
                        Format::Human => writeln!(out, "{} [{approach}] {}", src.label, f.message)?,
                    }
                    writeln!(err, "error: {} [{approach}]: {}", src.label, f.message)?;
                }
            }
        }
    }
    Ok(worst)
}

struct Row {
    reading: f64,
    est: crate::database::Estimate,
}

fn estimate_one(
    db: &CalibrationDatabase,
    context: &CaptureContext,
    approach: Approach,
    src: &Source,
    spread: Option<f64>,
    options: MatchOptions,
) -> Result<Row, Failure> {
    let reading = src.measurement.reading(approach, context)?;
    let spread = match spread {
        Some(s) => s,
        None => {
            // coverage times the matched calibration's replicate scatter;
            // sensor noise is fixed in digital numbers, so at exposure ratio
            // k the scatter of the normalized reading grows as 1/k
            let record = db
                .match_context(context, approach, options)
                .into_iter()
                .next()
                .ok_or_else(|| {
                    Failure::from(DatabaseError::NoMatch {
                        assay: context.assay.clone(),
                        phone: context.phone.clone(),
                        approach,
                    })
                })?;
            let sd = record.curve.replicate_sd.unwrap_or(0.0);
            let k = context.exposure_product() / record.context.exposure_product();
            let normalized = COVERAGE * sd / k;
            // estimate_concentration takes the spread in raw reading units
            if approach.is_intensity() {
                normalized * k
            } else {
                normalized
            }
        }
    };
    let est = db.estimate_concentration(context, &reading, spread, options)?;
    Ok(Row {
        reading: reading.value,
        est,
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Reads `(concentration, reading)` rows from an instrument CSV.
pub fn read_external_csv(path: &Path) -> Result<Vec<(f64, f64)>, Failure> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Failure::input(format!("cannot read {}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| Failure::input(format!("{}: {e}", path.display())))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Failure::input(format!("{}: missing column {name:?}", path.display())))
    };
    let (ci, ri) = (col("concentration")?, col("reading")?);
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        // data rows start on line 2
        let line = i + 2;
        let rec = rec.map_err(|e| Failure::input(format!("{} row {line}: {e}", path.display())))?;
        let field = |idx: usize, name: &str| -> Result<f64, Failure> {
            let raw = rec.get(idx).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    Failure::input(format!(
                        "{} row {line}: {name} {raw:?} is not a number",
                        path.display()
                    ))
                })
        };
        rows.push((field(ci, "concentration")?, field(ri, "reading")?));
    }
    Ok(rows)
}

fn report(a: ReportArgs, out: &mut dyn Write) -> Result<i32, Failure> {
    let db = CalibrationDatabase::load(&a.db)?;
    let record = db
        .get(&a.record)
        .ok_or_else(|| Failure::from(DatabaseError::UnknownRecord(a.record.clone())))?;
    let points: Vec<(f64, f64)> = if record.curve.per_point.is_empty() {
        record.series.means()
    } else {
        record
            .curve
            .per_point
            .iter()
            .map(|p| (p.concentration, p.mean_reading))
            .collect()
    };
    let mut curves = vec![(record.id.clone(), normalize_curve(&points)?)];
    if let Some(path) = &a.external {
        let ext = read_external_csv(path)?;
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "external".into());
        curves.push((format!("external:{label}"), normalize_curve(&ext)?));
    }
    match a.format {
        Format::Csv => {
            writeln!(out, "{REPORT_HEADER}")?;
            for (source, pts) in &curves {
                for (c, r) in pts {
                    writeln!(out, "{c:e},{r},{}", csv_field(source))?;
                }
            }
        }
        Format::Human => {
            for (source, pts) in &curves {
                writeln!(out, "{source}")?;
                for (c, r) in pts {
                    writeln!(out, "  {c:>12.4e}  {r:.4}")?;
                }
            }
        }
    }
    Ok(EXIT_OK)
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> Result<i32, Failure> {
    if a.points == 0 {
        return Err(SynthError::NoConcentrations.into());
    }
    if !(a.factor > 1.0 && a.factor.is_finite()) {
        return Err(Failure::input(format!(
            "--factor must be > 1, got {}",
            a.factor
        )));
    }
    let concentrations: Vec<f64> = (0..a.points)
        .map(|i| a.start * a.factor.powi(i as i32))
        .collect();
    let last = *concentrations.last().expect("points > 0");
    let c_lo = a.plateau_below.unwrap_or(a.start);
    let mut c_hi = a.linear_until.unwrap_or(last);
    if c_hi <= c_lo {
        // a single-point series has no span; keep the model valid
        c_hi = c_lo * a.factor;
    }
    let model = SyntheticModel {
        downturn: a.downturn,
        noise_sigma: a.sigma,
        seed: a.seed,
        ..SyntheticModel::linear(c_lo, c_hi)
    };
    let roi = a.roi.unwrap_or_else(|| Roi {
        x: a.width / 4,
        y: a.height / 4,
        w: (a.width / 2).max(1),
        h: (a.height / 2).max(1),
    });
    let context = CaptureContext {
        assay: a.assay.clone(),
        temperature_c: a.temperature,
        phone: a.phone.clone(),
        led_power: a.led_power.clone(),
        exposure_s: a.exposure_s,
        iso: a.iso,
        aperture_f: a.aperture,
        calibration_constant: None,
    };
    context.validate().map_err(Failure::input)?;
    let spec = DatasetSpec {
        concentrations,
        context,
        unit: a.unit.clone(),
        frames: a.frames,
        replicate_groups: a.groups,
        dims: (a.width, a.height),
        roi,
        approaches: a.approaches.clone(),
    };
    let (manifest, clamp) = generate_dataset(&model, &spec, &a.out)?;
    let images: usize = manifest
        .samples
        .iter()
        .flat_map(|s| &s.replicate_groups)
        .map(Vec::len)
        .sum();
    let manifest_path = a.out.join("manifest.json");
    match a.format {
        Format::Human => {
            writeln!(out, "manifest          {}", manifest_path.display())?;
            writeln!(out, "images            {images}")?;
            writeln!(out, "clamp fraction    {clamp}")?;
            for approach in &a.approaches {
                match model.true_line(*approach) {
                    Some(t) => writeln!(
                        out,
                        "true {approach:<12} slope {} per decade, intercept {}",
                        t.slope, t.intercept
                    )?,
                    None => writeln!(out, "true {approach:<12} not log-linear")?,
                }
            }
        }
        Format::Csv => {
            writeln!(
                out,
                "manifest,images,clamp_fraction,approach,true_slope,true_intercept"
            )?;
            for approach in &a.approaches {
                let t = model.true_line(*approach);
                writeln!(
                    out,
                    "{},{images},{clamp},{approach},{},{}",
                    csv_field(&manifest_path.display().to_string()),
                    fmt_opt(t.map(|t| t.slope)),
                    fmt_opt(t.map(|t| t.intercept)),
                )?;
            }
        }
    }
    Ok(EXIT_OK)
}
