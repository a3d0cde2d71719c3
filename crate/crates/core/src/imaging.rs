//! Raster input: decoding, frame averaging, ROI extraction and saturation checks.
//!
//! Every operation here is a pure function over immutable images. Frames of a
//! stack are assumed to be pre-aligned (fixed rig), so no registration is done.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::{DynamicImage, ImageFormat};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Channel value treated as sensor full-scale.
pub const FULL_SCALE: u8 = 255;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("cannot read image {path}: {message}")]
    Unreadable { path: String, message: String },
    #[error("unsupported image format in {path}: {message}")]
    UnsupportedFormat { path: String, message: String },
    #[error("image has zero width or height")]
    ZeroDimension,
    #[error("pixel buffer holds {actual} pixels, expected {expected} for {width}x{height}")]
    BufferSize {
        width: u32,
        height: u32,
        expected: usize,
        actual: usize,
    },
    #[error("frame stack is empty")]
    EmptyStack,
    #[error("frame {index} is {actual_w}x{actual_h}, expected {expected_w}x{expected_h}")]
    DimensionMismatch {
        index: usize,
        expected_w: u32,
        expected_h: u32,
        actual_w: u32,
        actual_h: u32,
    },
    #[error("ROI out of bounds: {roi} does not fit in a {width}x{height} image")]
    RoiOutOfBounds { roi: Roi, width: u32, height: u32 },
    #[error("invalid ROI: {0}")]
    InvalidRoi(String),
    #[error("cannot write image {path}: {message}")]
    Encode { path: String, message: String },
}

pub type Result<T, E = ImagingError> = std::result::Result<T, E>;

/// 8-bit RGB raster stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: u32,
    height: u32,
    pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32, pixels: Vec<[u8; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(ImagingError::ZeroDimension);
        }
        let expected = width as usize * height as usize;
        if pixels.len() != expected {
            return Err(ImagingError::BufferSize {
                width,
                height,
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Image where every pixel has the same value.
    pub fn filled(width: u32, height: u32, pixel: [u8; 3]) -> Result<Self> {
        Self::new(width, height, vec![pixel; width as usize * height as usize])
    }

    /// Builds an image from a packed `r, g, b, r, g, b, ...` buffer.
    pub fn from_raw(width: u32, height: u32, data: &[u8]) -> Result<Self> {
        if !data.len().is_multiple_of(3) {
            return Err(ImagingError::BufferSize {
                width,
                height,
                expected: width as usize * height as usize,
                actual: data.len() / 3,
            });
        }
        let pixels = data.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect();
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    /// Row `y` restricted to columns `x..x + w`.
    pub(crate) fn row_span(&self, x: u32, y: u32, w: u32) -> &[[u8; 3]] {
        let start = y as usize * self.width as usize + x as usize;
        &self.pixels[start..start + w as usize]
    }

    pub fn full_roi(&self) -> Roi {
        Roi {
            x: 0,
            y: 0,
            w: self.width,
            h: self.height,
        }
    }

    /// Writes a lossless PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let raw: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        let buffer = image::RgbImage::from_raw(self.width, self.height, raw)
            .expect("buffer length checked at construction");
        buffer
            .save_with_format(path, ImageFormat::Png)
            .map_err(|e| ImagingError::Encode {
                path: path.display().to_string(),
                message: e.to_string(),
            })
    }
}

/// Rectangular region of interest in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Roi {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Roi {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Result<Self> {
        if w == 0 || h == 0 {
            return Err(ImagingError::InvalidRoi(format!(
                "width and height must be at least 1, got {w}x{h}"
            )));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn pixel_count(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.w >= 1
            && self.h >= 1
            && (self.x as u64 + self.w as u64) <= width as u64
            && (self.y as u64 + self.h as u64) <= height as u64
    }

    pub(crate) fn check(&self, width: u32, height: u32) -> Result<()> {
        if self.fits(width, height) {
            Ok(())
        } else {
            Err(ImagingError::RoiOutOfBounds {
                roi: *self,
                width,
                height,
            })
        }
    }
}

impl fmt::Display for Roi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.x, self.y, self.w, self.h)
    }
}

impl FromStr for Roi {
    type Err = ImagingError;

    /// Parses `x,y,w,h`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(ImagingError::InvalidRoi(format!(
                "expected x,y,w,h but got {s:?}"
            )));
        }
        let mut vals = [0u32; 4];
        for (slot, part) in vals.iter_mut().zip(&parts) {
            *slot = part
                .parse()
                .map_err(|_| ImagingError::InvalidRoi(format!("{part:?} is not a pixel count")))?;
        }
        Roi::new(vals[0], vals[1], vals[2], vals[3])
    }
}

/// Ordered, dimension-equal, non-empty list of frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameStack {
    frames: Vec<RgbImage>,
}

impl FrameStack {
    pub fn new(frames: Vec<RgbImage>) -> Result<Self> {
        let first = frames.first().ok_or(ImagingError::EmptyStack)?;
        let (w, h) = (first.width, first.height);
        for (index, frame) in frames.iter().enumerate().skip(1) {
            if frame.width != w || frame.height != h {
                return Err(ImagingError::DimensionMismatch {
                    index,
                    expected_w: w,
                    expected_h: h,
                    actual_w: frame.width,
                    actual_h: frame.height,
                });
            }
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[RgbImage] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> u32 {
        self.frames[0].width
    }

    pub fn height(&self) -> u32 {
        self.frames[0].height
    }

    /// Largest per-frame saturation fraction inside `roi`.
    pub fn max_saturation(&self, roi: Roi) -> Result<f64> {
        let mut worst = 0.0f64;
        for frame in &self.frames {
            worst = worst.max(saturation_fraction(&extract_roi(frame, roi)?));
        }
        Ok(worst)
    }
}

/// Container format an image was decoded from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceFormat {
    Png,
    Jpeg,
}

impl SourceFormat {
    pub fn is_lossy(self) -> bool {
        matches!(self, SourceFormat::Jpeg)
    }
}

/// A decoded image together with the container it came from.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub image: RgbImage,
    pub format: SourceFormat,
}

impl Decoded {
    /// Warning text for lossy sources, whose compression perturbs channel statistics.
    pub fn warning(&self, path: &Path) -> Option<String> {
        self.format.is_lossy().then(|| {
            format!(
                "{} is JPEG; lossy compression perturbs channel statistics",
                path.display()
            )
        })
    }
}

/// Decodes a PNG or JPEG file into an 8-bit RGB image, dropping alpha.
pub fn decode_image(path: &Path) -> Result<RgbImage> {
    load_image(path).map(|d| d.image)
}

/// Like [`decode_image`] but also reports the source container.
pub fn load_image(path: &Path) -> Result<Decoded> {
    let shown = || path.display().to_string();
    let reader = image::ImageReader::open(path)
        .map_err(|e| ImagingError::Unreadable {
            path: shown(),
            message: e.to_string(),
        })?
        .with_guessed_format()
        .map_err(|e| ImagingError::Unreadable {
            path: shown(),
            message: e.to_string(),
        })?;
    let format = match reader.format() {
        Some(ImageFormat::Png) => SourceFormat::Png,
        Some(ImageFormat::Jpeg) => SourceFormat::Jpeg,
        other => {
            return Err(ImagingError::UnsupportedFormat {
                path: shown(),
                message: match other {
                    Some(f) => format!("{f:?} is not supported, use PNG or JPEG"),
                    None => "unrecognized container".to_string(),
                },
            })
        }
    };
    let dynamic = reader.decode().map_err(|e| match e {
        image::ImageError::Unsupported(u) => ImagingError::UnsupportedFormat {
            path: shown(),
            message: u.to_string(),
        },
        other => ImagingError::Unreadable {
            path: shown(),
            message: other.to_string(),
        },
    })?;
    let image = from_dynamic(dynamic).map_err(|e| match e {
        ImagingError::UnsupportedFormat { message, .. } => ImagingError::UnsupportedFormat {
            path: shown(),
            message,
        },
        other => other,
    })?;
    Ok(Decoded { image, format })
}

fn from_dynamic(dynamic: DynamicImage) -> Result<RgbImage> {
    let (w, h) = (dynamic.width(), dynamic.height());
    if w == 0 || h == 0 {
        return Err(ImagingError::ZeroDimension);
    }
    let unsupported = |what: &str| ImagingError::UnsupportedFormat {
        path: String::new(),
        message: format!("{what} images are not supported, need at least 3 channels"),
    };
    let pixels: Vec<[u8; 3]> = match dynamic {
        DynamicImage::ImageRgb8(buf) => buf.pixels().map(|p| p.0).collect(),
        DynamicImage::ImageRgba8(buf) => buf.pixels().map(|p| [p[0], p[1], p[2]]).collect(),
        DynamicImage::ImageRgb16(buf) => buf.pixels().map(|p| narrow16(p.0)).collect(),
        DynamicImage::ImageRgba16(buf) => {
            buf.pixels().map(|p| narrow16([p[0], p[1], p[2]])).collect()
        }
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_) => return Err(unsupported("greyscale")),
        _ => return Err(unsupported("floating-point")),
    };
    RgbImage::new(w, h, pixels)
}

// 16-bit to 8-bit by integer division, so 65535 maps to 255.
fn narrow16(p: [u16; 3]) -> [u8; 3] {
    p.map(|v| (v / 257) as u8)
}

/// Per-pixel, per-channel mean across the stack, rounded half-up.
pub fn average_frames(stack: &FrameStack) -> RgbImage {
    let n = stack.len() as u32;
    let first = &stack.frames[0];
    let mut sums = vec![[0u32; 3]; first.pixels.len()];
    for frame in &stack.frames {
        for (acc, px) in sums.iter_mut().zip(&frame.pixels) {
            for c in 0..3 {
                acc[c] += px[c] as u32;
            }
        }
    }
    // floor(sum / n + 1/2) in exact integer arithmetic
    let pixels = sums
        .into_iter()
        .map(|s| s.map(|v| ((2 * v + n) / (2 * n)) as u8))
        .collect();
    RgbImage {
        width: first.width,
        height: first.height,
        pixels,
    }
}

/// Copies the `roi` sub-image.
pub fn extract_roi(image: &RgbImage, roi: Roi) -> Result<RgbImage> {
    roi.check(image.width, image.height)?;
    let mut pixels = Vec::with_capacity(roi.pixel_count() as usize);
    for y in roi.y..roi.y + roi.h {
        pixels.extend_from_slice(image.row_span(roi.x, y, roi.w));
    }
    Ok(RgbImage {
        width: roi.w,
        height: roi.h,
        pixels,
    })
}

/// Fraction of pixels with at least one channel at full scale.
pub fn saturation_fraction(image: &RgbImage) -> f64 {
    let saturated = image
        .pixels
        .iter()
        .filter(|p| p.contains(&FULL_SCALE))
        .count();
    saturated as f64 / image.pixels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numbered(w: u32, h: u32) -> RgbImage {
        let pixels = (0..w * h)
            .map(|i| [i as u8, (i * 2) as u8, (i * 3) as u8])
            .collect();
        RgbImage::new(w, h, pixels).unwrap()
    }

    #[test]
    fn rejects_bad_buffers() {
        assert!(matches!(
            RgbImage::new(0, 3, vec![]),
            Err(ImagingError::ZeroDimension)
        ));
        assert!(matches!(
            RgbImage::new(2, 2, vec![[0; 3]; 3]),
            Err(ImagingError::BufferSize {
                expected: 4,
                actual: 3,
                ..
            })
        ));
    }

    #[test]
    fn averages_two_constant_frames() {
        let a = RgbImage::filled(3, 2, [100; 3]).unwrap();
        let b = RgbImage::filled(3, 2, [110; 3]).unwrap();
        let avg = average_frames(&FrameStack::new(vec![a, b]).unwrap());
        assert!(avg.pixels().iter().all(|p| *p == [105; 3]));
    }

    #[test]
    fn average_rounds_half_up() {
        let frames = [100, 101, 101]
            .iter()
            .map(|&v| RgbImage::filled(1, 1, [v; 3]).unwrap())
            .collect();
        let avg = average_frames(&FrameStack::new(frames).unwrap());
        assert_eq!(avg.pixel(0, 0), [101; 3]);

        // 100.5 exactly rounds up
        let frames = vec![
            RgbImage::filled(1, 1, [100; 3]).unwrap(),
            RgbImage::filled(1, 1, [101; 3]).unwrap(),
        ];
        let avg = average_frames(&FrameStack::new(frames).unwrap());
        assert_eq!(avg.pixel(0, 0), [101; 3]);
    }

    #[test]
    fn single_frame_average_is_identity() {
        let img = numbered(4, 3);
        let avg = average_frames(&FrameStack::new(vec![img.clone()]).unwrap());
        assert_eq!(avg, img);
    }

    #[test]
    fn stack_validation() {
        assert!(matches!(
            FrameStack::new(vec![]),
            Err(ImagingError::EmptyStack)
        ));
        let err = FrameStack::new(vec![numbered(2, 2), numbered(2, 3)]).unwrap_err();
        assert!(matches!(
            err,
            ImagingError::DimensionMismatch { index: 1, .. }
        ));
    }

    #[test]
    fn roi_extraction() {
        let img = numbered(4, 4);
        assert_eq!(extract_roi(&img, img.full_roi()).unwrap(), img);

        let corner = extract_roi(&img, Roi::new(0, 0, 1, 1).unwrap()).unwrap();
        assert_eq!(corner.pixels(), &[img.pixel(0, 0)]);

        // pixels (1,1) and (2,1) have row-major indices 5 and 6
        let strip = extract_roi(&img, Roi::new(1, 1, 2, 1).unwrap()).unwrap();
        assert_eq!(strip.pixels(), &[[5, 10, 15], [6, 12, 18]]);
    }

    #[test]
    fn roi_out_of_bounds() {
        let img = numbered(4, 4);
        for roi in [
            Roi::new(3, 0, 2, 1).unwrap(),
            Roi::new(0, 4, 1, 1).unwrap(),
            Roi::new(u32::MAX, 0, 1, 1).unwrap(),
        ] {
            assert!(matches!(
                extract_roi(&img, roi),
                Err(ImagingError::RoiOutOfBounds { .. })
            ));
        }
        assert!(Roi::new(0, 0, 0, 1).is_err());
    }

    #[test]
    fn roi_parse() {
        assert_eq!(
            "1, 2,3,4".parse::<Roi>().unwrap(),
            Roi::new(1, 2, 3, 4).unwrap()
        );
        assert!("1,2,3".parse::<Roi>().is_err());
        assert!("1,2,3,x".parse::<Roi>().is_err());
        assert!("1,2,0,4".parse::<Roi>().is_err());
    }

    #[test]
    fn saturation() {
        assert_eq!(
            saturation_fraction(&RgbImage::filled(3, 3, [0; 3]).unwrap()),
            0.0
        );
        assert_eq!(
            saturation_fraction(&RgbImage::filled(3, 3, [255; 3]).unwrap()),
            1.0
        );
        let img = RgbImage::new(2, 2, vec![[255, 0, 0], [0; 3], [0; 3], [254; 3]]).unwrap();
        assert_eq!(saturation_fraction(&img), 0.25);
    }

    #[test]
    fn narrow16_divides_by_257() {
        assert_eq!(narrow16([65535, 257, 256]), [255, 1, 0]);
    }
}
