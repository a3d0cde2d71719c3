//! Synthetic frame stacks and dilution-series datasets with a known response.
//!
//! Channel levels follow `base + gain * d(c)` where `d(c)` counts decades of
//! concentration above the plateau knee `c_lo`, saturates at `c_hi` and may
//! fall again above it (an inner-filter style downturn). Levels scale with
//! `t * S` relative to the model's reference exposure, then independent
//! Gaussian noise is added per pixel and channel before quantization.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::colorimetry::{Approach, CaptureContext, Channel, ExposureSettings};
use crate::imaging::{FrameStack, ImagingError, RgbImage, Roi};
use crate::manifest::{Manifest, ManifestContext, Sample};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("concentration must be positive and finite, got {0}")]
    NonPositiveConcentration(f64),
    #[error("at least one frame is required")]
    NoFrames,
    #[error("at least one replicate group is required")]
    NoGroups,
    #[error("concentration list is empty")]
    NoConcentrations,
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("cannot write to {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

/// Ground-truth response model.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticModel {
    /// Channel levels on the low-concentration plateau, at reference exposure.
    pub base: [f64; 3],
    /// Channel change per decade of concentration between `c_lo` and `c_hi`.
    pub gain: [f64; 3],
    pub c_lo: f64,
    pub c_hi: f64,
    /// Decades of response lost per decade above `c_hi`; `None` keeps a plateau.
    pub downturn: Option<f64>,
    /// Noise standard deviation in grey levels.
    pub noise_sigma: f64,
    pub reference: ExposureSettings,
    pub seed: u64,
}

/// Exact line a model traces over its sensitive span for one approach.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrueLine {
    pub slope: f64,
    pub intercept: f64,
}

impl SyntheticModel {
    /// Per-decade grey-scale slope of the fluorescein grey-scale inverse fit.
    pub const GREY_SLOPE: f64 = 1.0 / 0.0524;
    /// Per-decade G/B slope of the fluorescein channel-ratio inverse fit.
    pub const RATIO_SLOPE: f64 = 1.0 / 7.69;

    /// Model that is log-linear on `[c_lo, c_hi]`, sized like the fluorescein
    /// response: grey slope about 19.08 and G/B slope about 0.13 per decade.
    pub fn linear(c_lo: f64, c_hi: f64) -> Self {
        let base = [30.0, 30.0, 150.0];
        let green = Self::RATIO_SLOPE * base[2];
        let red = 3.0 * Self::GREY_SLOPE - green;
        Self {
            base,
            gain: [red, green, 0.0],
            c_lo,
            c_hi,
            downturn: None,
            noise_sigma: 1.0,
            reference: ExposureSettings {
                exposure_s: 0.1,
                iso: 100.0,
            },
            seed: 0,
        }
    }

    /// Plateau below 10 nM, log-linear to 10 µM, dropping above (mol/L units).
    pub fn fluorescein_like() -> Self {
        Self {
            downturn: Some(1.0),
            ..Self::linear(1e-8, 1e-5)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidModel(m));
        if !(self.c_lo > 0.0 && self.c_lo < self.c_hi && self.c_hi.is_finite()) {
            return bad(format!(
                "need 0 < c_lo < c_hi, got [{}, {}]",
                self.c_lo, self.c_hi
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!(
                "noise sigma must be >= 0, got {}",
                self.noise_sigma
            ));
        }
        if self.base.iter().chain(&self.gain).any(|v| !v.is_finite()) {
            return bad("channel levels must be finite".into());
        }
        if let Some(d) = self.downturn {
            if !(d >= 0.0 && d.is_finite()) {
                return bad(format!("downturn rate must be >= 0, got {d}"));
            }
        }
        if !(self.reference.exposure_s > 0.0 && self.reference.iso > 0.0) {
            return bad("reference exposure must be positive".into());
        }
        Ok(())
    }

    /// Effective decades of response at `c`.
    fn decades(&self, c: f64) -> f64 {
        let span = (self.c_hi / self.c_lo).log10();
        let inside = (c.clamp(self.c_lo, self.c_hi) / self.c_lo).log10();
        match self.downturn {
            Some(rate) if c > self.c_hi => span - rate * (c / self.c_hi).log10(),
            _ => inside.min(span),
        }
    }

    /// Noise-free channel levels at `c` under the reference exposure.
    pub fn channel_levels(&self, c: f64) -> [f64; 3] {
        let d = self.decades(c);
        [0, 1, 2].map(|i| self.base[i] + self.gain[i] * d)
    }

    /// Noise-free reading at `c` under the reference exposure.
    pub fn reading(&self, approach: Approach, c: f64) -> f64 {
        let l = self.channel_levels(c);
        match approach {
            Approach::GreyScale => (l[0] + l[1] + l[2]) / 3.0,
            Approach::ChannelRatio {
                numerator,
                denominator,
            } => l[numerator.index()] / l[denominator.index()],
        }
    }

    /// The line `reading = intercept + slope * log10(c)` on `[c_lo, c_hi]`.
    ///
    /// `None` for channel ratios whose denominator varies with concentration,
    /// since those are not exactly log-linear.
    pub fn true_line(&self, approach: Approach) -> Option<TrueLine> {
        let lo = self.c_lo.log10();
        match approach {
            Approach::GreyScale => {
                let slope = self.gain.iter().sum::<f64>() / 3.0;
                let base = self.base.iter().sum::<f64>() / 3.0;
                Some(TrueLine {
                    slope,
                    intercept: base - slope * lo,
                })
            }
            Approach::ChannelRatio {
                numerator,
                denominator,
            } => {
                let (n, d) = (numerator.index(), denominator.index());
                if self.gain[d] != 0.0 || numerator == denominator {
                    return None;
                }
                let slope = self.gain[n] / self.base[d];
                Some(TrueLine {
                    slope,
                    intercept: self.base[n] / self.base[d] - slope * lo,
                })
            }
        }
    }
}

/// Rendered frames plus clamp accounting.
#[derive(Debug, Clone)]
pub struct RenderedStack {
    pub stack: FrameStack,
    /// Fraction of pixels, over all frames, with a channel at full scale.
    pub clamp_fraction: f64,
    /// Fraction of pixels, over all frames, with a channel clamped at zero.
    pub low_clamp_fraction: f64,
}

/// Renders `frames` uniform frames of size `dims` at concentration `c`.
///
/// Frame `k` draws its noise from ChaCha stream `k` of the model seed, so
/// output depends only on `(model, c, context, frames, dims)`.
pub fn render_stack(
    model: &SyntheticModel,
    concentration: f64,
    context: &CaptureContext,
    frames: usize,
    dims: (u32, u32),
) -> Result<RenderedStack> {
    model.validate()?;
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(SynthError::NonPositiveConcentration(concentration));
    }
    if frames == 0 {
        return Err(SynthError::NoFrames);
    }
    let (w, h) = dims;
    if w == 0 || h == 0 {
        return Err(ImagingError::ZeroDimension.into());
    }
    let scale = context.exposure_product() / (model.reference.exposure_s * model.reference.iso);
    let levels = model.channel_levels(concentration).map(|l| l * scale);
    let noise =
        Normal::new(0.0, model.noise_sigma).map_err(|e| SynthError::InvalidModel(e.to_string()))?;
    let n_pixels = w as usize * h as usize;

    let (mut high, mut low) = (0usize, 0usize);
    let mut out = Vec::with_capacity(frames);
    for k in 0..frames {
        let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
        rng.set_stream(k as u64);
        let mut pixels = Vec::with_capacity(n_pixels);
        for _ in 0..n_pixels {
            let mut px = [0u8; 3];
            let (mut hit_high, mut hit_low) = (false, false);
            for c in Channel::ALL {
                let mut v = levels[c.index()];
                if model.noise_sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                let q = (v + 0.5).floor();
                if q >= 255.0 {
                    hit_high = true;
                }
                if q < 0.0 {
                    hit_low = true;
                }
                px[c.index()] = q.clamp(0.0, 255.0) as u8;
            }
            high += hit_high as usize;
            low += hit_low as usize;
            pixels.push(px);
        }
        out.push(RgbImage::new(w, h, pixels)?);
    }
    let total = (n_pixels * frames) as f64;
    Ok(RenderedStack {
        stack: FrameStack::new(out)?,
        clamp_fraction: high as f64 / total,
        low_clamp_fraction: low as f64 / total,
    })
}

/// Mixes a seed with sample and group indices (splitmix64 finalizer).
pub fn derive_seed(seed: u64, sample: usize, group: usize) -> u64 {
    let mut z = seed
        ^ (sample as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (group as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Layout and metadata of a generated dataset.
#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub concentrations: Vec<f64>,
    pub context: CaptureContext,
    pub unit: String,
    pub frames: usize,
    pub replicate_groups: usize,
    pub dims: (u32, u32),
    pub roi: Roi,
    pub approaches: Vec<Approach>,
}

/// Writes PNG frames under `out_dir/images` and `out_dir/manifest.json`.
///
/// Returns the manifest (paths relative to `out_dir`) and the clamp fraction
/// over every rendered frame.
pub fn generate_dataset(
    model: &SyntheticModel,
    spec: &DatasetSpec,
    out_dir: &Path,
) -> Result<(Manifest, f64)> {
    if spec.concentrations.is_empty() {
        return Err(SynthError::NoConcentrations);
    }
    if let Some(&c) = spec
        .concentrations
        .iter()
        .find(|c| !(c.is_finite() && **c > 0.0))
    {
        return Err(SynthError::NonPositiveConcentration(c));
    }
    if spec.replicate_groups == 0 {
        return Err(SynthError::NoGroups);
    }
    if spec.frames == 0 {
        return Err(SynthError::NoFrames);
    }
    model.validate()?;
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| SynthError::Io { path, source }
    };
    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir).map_err(io(&image_dir))?;

    let mut samples = Vec::with_capacity(spec.concentrations.len());
    let mut clamp_sum = 0.0;
    for (i, &c) in spec.concentrations.iter().enumerate() {
        let mut groups = Vec::with_capacity(spec.replicate_groups);
        for g in 0..spec.replicate_groups {
            let group_model = SyntheticModel {
                seed: derive_seed(model.seed, i, g),
                ..model.clone()
            };
            let rendered = render_stack(&group_model, c, &spec.context, spec.frames, spec.dims)?;
            clamp_sum += rendered.clamp_fraction;
            let mut paths = Vec::with_capacity(spec.frames);
            for (k, frame) in rendered.stack.frames().iter().enumerate() {
                let rel = PathBuf::from("images").join(format!("s{i:02}_g{g:02}_f{k:03}.png"));
                frame.save_png(&out_dir.join(&rel)).map_err(|e| match e {
                    ImagingError::Encode { path, message } => SynthError::Io {
                        path,
                        source: std::io::Error::other(message),
                    },
                    other => other.into(),
                })?;
                paths.push(rel);
            }
            groups.push(paths);
        }
        samples.push(Sample {
            concentration: c,
            replicate_groups: groups,
        });
    }
    let ctx = &spec.context;
    let manifest = Manifest {
        assay: ctx.assay.clone(),
        temperature_c: ctx.temperature_c,
        context: ManifestContext {
            phone: ctx.phone.clone(),
            led_power: ctx.led_power.clone(),
            exposure_s: ctx.exposure_s,
            iso: ctx.iso,
            aperture_f: ctx.aperture_f,
            calibration_constant: ctx.calibration_constant,
        },
        unit: spec.unit.clone(),
        roi: spec.roi,
        approaches: spec.approaches.clone(),
        samples,
    };
    let manifest_path = out_dir.join("manifest.json");
    manifest.save(&manifest_path).map_err(|e| SynthError::Io {
        path: manifest_path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    })?;
    let groups = (spec.concentrations.len() * spec.replicate_groups) as f64;
    Ok((manifest, clamp_sum / groups))
}
