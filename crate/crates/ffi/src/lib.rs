//! C ABI for assaylens.
//!
//! Every fallible function returns an [`AlStatus`]; on failure the message is
//! kept per thread and read back with [`al_last_error_message`]. Images and
//! databases are opaque handles that must be released with their `_free`
//! function. Panics never cross the boundary; they surface as
//! [`AlStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use assaylens::calibration::{fit_log_linear, repeating_error, CalibrationError};
use assaylens::colorimetry::{
    channel_ratio, grey_scale, roi_channel_stats, stack_roi_stats, Approach, CaptureContext,
    Channel, ColorimetryError, Reading, RoiStats,
};
use assaylens::database::{CalibrationDatabase, DatabaseError, MatchOptions};
use assaylens::imaging::{
    decode_image, extract_roi, saturation_fraction, FrameStack, ImagingError, RgbImage, Roi,
};
use assaylens::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Image = 3,
    /// Zero denominator, saturated ROI or similar undefined reading.
    Degenerate = 4,
    Calibration = 5,
    NoMatch = 6,
    OutOfRange = 7,
    Io = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlChannel {
    Red = 0,
    Green = 1,
    Blue = 2,
}

impl From<AlChannel> for Channel {
    fn from(c: AlChannel) -> Self {
        match c {
            AlChannel::Red => Channel::R,
            AlChannel::Green => Channel::G,
            AlChannel::Blue => Channel::B,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlRoi {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlRoiStats {
    pub pixel_count: u64,
    /// Per-channel sums, R, G, B.
    pub sum: [f64; 3],
    pub mean: [f64; 3],
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlLinearFit {
    /// Reading units per decade of concentration.
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Capture conditions of a query. Strings are NUL-terminated UTF-8.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct AlContext {
    pub assay: *const c_char,
    pub phone: *const c_char,
    pub led_power: *const c_char,
    pub temperature_c: f64,
    pub exposure_s: f64,
    pub iso: f64,
    pub aperture_f: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlEstimate {
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    /// Relative interval width in percent.
    pub measuring_error: f64,
    pub normalized_reading: f64,
}

/// Opaque decoded RGB image.
pub struct AlImage(RgbImage);

/// Opaque calibration database.
pub struct AlDatabase(CalibrationDatabase);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

struct Fail(AlStatus, String);

impl Fail {
    fn null(what: &str) -> Self {
        Fail(AlStatus::NullPointer, format!("{what} is null"))
    }

    fn arg(msg: impl Into<String>) -> Self {
        Fail(AlStatus::InvalidArgument, msg.into())
    }
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Imaging(ImagingError::Unreadable { .. }) => AlStatus::Io,
            Error::Imaging(ImagingError::RoiOutOfBounds { .. } | ImagingError::InvalidRoi(_)) => {
                AlStatus::InvalidArgument
            }
            Error::Imaging(_) => AlStatus::Image,
            Error::Colorimetry(
                ColorimetryError::Imaging(_)
                | ColorimetryError::UnknownApproach(_)
                | ColorimetryError::UnknownChannel(_),
            ) => AlStatus::InvalidArgument,
            Error::Colorimetry(_) => AlStatus::Degenerate,
            Error::Calibration(CalibrationError::OutOfSpan { .. })
            | Error::Database(DatabaseError::Calibration(CalibrationError::OutOfSpan { .. })) => {
                AlStatus::OutOfRange
            }
            Error::Calibration(_) => AlStatus::Calibration,
            Error::Database(DatabaseError::NoMatch { .. } | DatabaseError::UnknownRecord(_)) => {
                AlStatus::NoMatch
            }
            Error::Database(DatabaseError::Io { .. }) => AlStatus::Io,
            Error::Database(DatabaseError::Colorimetry(_)) => AlStatus::Degenerate,
            Error::Database(_) => AlStatus::InvalidArgument,
            _ => AlStatus::InvalidArgument,
        };
        Fail(status, e.to_string())
    }
}

macro_rules! fail_from {
    ($($t:ty),*) => {$(
        impl From<$t> for Fail {
            fn from(e: $t) -> Self {
                Error::from(e).into()
            }
        }
    )*};
}
fail_from!(
    ImagingError,
    ColorimetryError,
    CalibrationError,
    DatabaseError
);

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            AlStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            AlStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::arg(format!("{what} is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| Fail::null(what))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

fn roi(r: AlRoi) -> Result<Roi, Fail> {
    Ok(Roi::new(r.x, r.y, r.w, r.h)?)
}

fn stats_out(s: RoiStats) -> AlRoiStats {
    AlRoiStats {
        pixel_count: s.pixel_count,
        sum: s.sum,
        mean: s.mean,
    }
}

fn stats_in(s: &AlRoiStats) -> RoiStats {
    RoiStats {
        pixel_count: s.pixel_count,
        sum: s.sum,
        mean: s.mean,
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn al_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the length the full message needs, including
/// the terminator; pass a null `buf` to query it.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn al_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Decodes a PNG or JPEG file into 8-bit RGB.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn al_image_load(path: *const c_char, out: *mut *mut AlImage) -> AlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let img = decode_image(Path::new(path))?;
        *out = Box::into_raw(Box::new(AlImage(img)));
        Ok(())
    })
}

/// Builds an image from interleaved RGB bytes, row-major, `width * height * 3` long.
///
/// # Safety
/// `data` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn al_image_from_rgb(
    width: u32,
    height: u32,
    data: *const u8,
    len: usize,
    out: *mut *mut AlImage,
) -> AlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let data = slice_arg(data, len, "data")?;
        let img = RgbImage::from_raw(width, height, data)?;
        *out = Box::into_raw(Box::new(AlImage(img)));
        Ok(())
    })
}

/// Releases an image. Null is ignored.
///
/// # Safety
/// `image` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn al_image_free(image: *mut AlImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// Width in pixels, 0 for null.
///
/// # Safety
/// `image` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn al_image_width(image: *const AlImage) -> u32 {
    image.as_ref().map_or(0, |i| i.0.width())
}

/// Height in pixels, 0 for null.
///
/// # Safety
/// `image` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn al_image_height(image: *const AlImage) -> u32 {
    image.as_ref().map_or(0, |i| i.0.height())
}

/// Channel sums and means over `roi` of one image.
///
/// # Safety
/// `image` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn al_roi_stats(
    image: *const AlImage,
    roi_: AlRoi,
    out: *mut AlRoiStats,
) -> AlStatus {
    guard(|| {
        let img = image.as_ref().ok_or_else(|| Fail::null("image"))?;
        let out = out_arg(out, "out")?;
        *out = stats_out(roi_channel_stats(&img.0, roi(roi_)?)?);
        Ok(())
    })
}

/// Statistics of the frame average of `count` equally sized images.
///
/// # Safety
/// `images` must point to `count` live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn al_stack_roi_stats(
    images: *const *const AlImage,
    count: usize,
    roi_: AlRoi,
    out: *mut AlRoiStats,
) -> AlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let handles = slice_arg(images, count, "images")?;
        let mut frames = Vec::with_capacity(handles.len());
        for (i, h) in handles.iter().enumerate() {
            let img = h
                .as_ref()
                .ok_or_else(|| Fail::null(&format!("images[{i}]")))?;
            frames.push(img.0.clone());
        }
        let stack = FrameStack::new(frames)?;
        *out = stats_out(stack_roi_stats(&stack, roi(roi_)?)?);
        Ok(())
    })
}

/// Fraction of ROI pixels with any channel at 255.
///
/// # Safety
/// `image` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn al_saturation_fraction(
    image: *const AlImage,
    roi_: AlRoi,
    out: *mut f64,
) -> AlStatus {
    guard(|| {
        let img = image.as_ref().ok_or_else(|| Fail::null("image"))?;
        let out = out_arg(out, "out")?;
        *out = saturation_fraction(&extract_roi(&img.0, roi(roi_)?)?);
        Ok(())
    })
}

/// Ratio of channel sums, `numerator / denominator`.
///
/// # Safety
/// `stats` must be readable; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn al_channel_ratio(
    stats: *const AlRoiStats,
    numerator: AlChannel,
    denominator: AlChannel,
    out: *mut f64,
) -> AlStatus {
    guard(|| {
        let s = stats.as_ref().ok_or_else(|| Fail::null("stats"))?;
        let out = out_arg(out, "out")?;
        *out = channel_ratio(&stats_in(s), numerator.into(), denominator.into())?;
        Ok(())
    })
}

/// Mean of the three channel means.
///
/// # Safety
/// `stats` must be readable; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn al_grey_scale(stats: *const AlRoiStats, out: *mut f64) -> AlStatus {
    guard(|| {
        let s = stats.as_ref().ok_or_else(|| Fail::null("stats"))?;
        let out = out_arg(out, "out")?;
        *out = grey_scale(&stats_in(s));
        Ok(())
    })
}

/// Least-squares fit of `reading = intercept + slope * log10(concentration)`.
///
/// # Safety
/// `concentrations` and `readings` must each point to `count` values.
#[no_mangle]
pub unsafe extern "C" fn al_fit_log_linear(
    concentrations: *const f64,
    readings: *const f64,
    count: usize,
    out: *mut AlLinearFit,
) -> AlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let c = slice_arg(concentrations, count, "concentrations")?;
        let r = slice_arg(readings, count, "readings")?;
        let points: Vec<(f64, f64)> = c.iter().copied().zip(r.iter().copied()).collect();
        let fit = fit_log_linear(&points)?;
        *out = AlLinearFit {
            slope: fit.slope,
            intercept: fit.intercept,
            r_squared: fit.r_squared,
        };
        Ok(())
    })
}

/// `(max - min) / |mean| * 100` over replicate readings.
///
/// # Safety
/// `values` must point to `count` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn al_repeating_error(
    values: *const f64,
    count: usize,
    out: *mut f64,
) -> AlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = repeating_error(slice_arg(values, count, "values")?)?;
        Ok(())
    })
}

/// Loads a calibration database file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn al_database_load(
    path: *const c_char,
    out: *mut *mut AlDatabase,
) -> AlStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let db = CalibrationDatabase::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(AlDatabase(db)));
        Ok(())
    })
}

/// Releases a database. Null is ignored.
///
/// # Safety
/// `db` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn al_database_free(db: *mut AlDatabase) {
    if !db.is_null() {
        drop(Box::from_raw(db));
    }
}

/// Number of records, 0 for null.
///
/// # Safety
/// `db` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn al_database_len(db: *const AlDatabase) -> usize {
    db.as_ref().map_or(0, |d| d.0.len())
}

/// Estimates a concentration for `reading` taken under `context` with
/// `approach` (`"G/B"`, `"grey"`, ...). `spread` is the ± reading error bar.
/// Exposure settings are normalized to the matched record rather than matched.
///
/// # Safety
/// `db` must be a live handle, `context` readable with valid strings,
/// `approach` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn al_database_estimate(
    db: *const AlDatabase,
    context: *const AlContext,
    approach: *const c_char,
    reading: f64,
    spread: f64,
    out: *mut AlEstimate,
) -> AlStatus {
    guard(|| {
        let db = db.as_ref().ok_or_else(|| Fail::null("db"))?;
        let ctx = context.as_ref().ok_or_else(|| Fail::null("context"))?;
        let out = out_arg(out, "out")?;
        let approach: Approach = str_arg(approach, "approach")?.parse()?;
        let query = CaptureContext {
            assay: str_arg(ctx.assay, "context.assay")?.to_string(),
            temperature_c: ctx.temperature_c,
            phone: str_arg(ctx.phone, "context.phone")?.to_string(),
            led_power: str_arg(ctx.led_power, "context.led_power")?.to_string(),
            exposure_s: ctx.exposure_s,
            iso: ctx.iso,
            aperture_f: ctx.aperture_f,
            calibration_constant: None,
        };
        query.validate().map_err(Fail::arg)?;
        if !reading.is_finite() {
            return Err(Fail::arg(format!("reading must be finite, got {reading}")));
        }
        let reading = Reading {
            approach,
            value: reading,
            context: query.clone(),
            saturation: 0.0,
        };
        let est =
            db.0.estimate_concentration(&query, &reading, spread, MatchOptions::for_estimation())?;
        *out = AlEstimate {
            value: est.estimate.value,
            lower: est.estimate.lower,
            upper: est.estimate.upper,
            measuring_error: est.estimate.measuring_error,
            normalized_reading: est.normalized_reading,
        };
        Ok(())
    })
}
