use approx::assert_relative_eq;
use proptest::prelude::*;

use assaylens::calibration::{
    build_curve, fit_log_linear, normalize_curve, repeating_error, CurveOptions, MeasurementSeries,
    SeriesPoint,
};
use assaylens::colorimetry::{
    channel_ratio, grey_scale, roi_channel_stats, Approach, CaptureContext, Channel,
};
use assaylens::imaging::{average_frames, decode_image, extract_roi, FrameStack, RgbImage, Roi};

fn image_strategy(max: u32) -> impl Strategy<Value = RgbImage> {
    (1..=max, 1..=max).prop_flat_map(|(w, h)| {
        prop::collection::vec(any::<u8>(), (w * h * 3) as usize)
            .prop_map(move |data| RgbImage::from_raw(w, h, &data).unwrap())
    })
}

fn stack_strategy() -> impl Strategy<Value = Vec<RgbImage>> {
    (1..=6u32, 1..=6u32, 1..=5usize).prop_flat_map(|(w, h, n)| {
        prop::collection::vec(
            prop::collection::vec(any::<u8>(), (w * h * 3) as usize)
                .prop_map(move |d| RgbImage::from_raw(w, h, &d).unwrap()),
            n,
        )
    })
}

fn context() -> CaptureContext {
    CaptureContext {
        assay: "a".into(),
        temperature_c: 20.0,
        phone: "p".into(),
        led_power: "1".into(),
        exposure_s: 0.1,
        iso: 100.0,
        aperture_f: 2.0,
        calibration_constant: None,
    }
}

proptest! {
    #[test]
    fn averaging_ignores_frame_order(frames in stack_strategy(), rot in 0usize..6) {
        let mut rotated = frames.clone();
        let len = rotated.len();
        rotated.rotate_left(rot % len);
        let a = average_frames(&FrameStack::new(frames).unwrap());
        let b = average_frames(&FrameStack::new(rotated).unwrap());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn averaging_copies_is_identity(img in image_strategy(6), k in 1usize..5) {
        let avg = average_frames(&FrameStack::new(vec![img.clone(); k]).unwrap());
        prop_assert_eq!(avg, img);
    }

    #[test]
    fn nested_roi_composes(img in image_strategy(10), a in any::<[u8; 4]>(), b in any::<[u8; 4]>()) {
        let (w, h) = (img.width(), img.height());
        let x = a[0] as u32 % w;
        let y = a[1] as u32 % h;
        let outer = Roi::new(x, y, 1 + a[2] as u32 % (w - x), 1 + a[3] as u32 % (h - y)).unwrap();
        let ix = b[0] as u32 % outer.w;
        let iy = b[1] as u32 % outer.h;
        let inner = Roi::new(ix, iy, 1 + b[2] as u32 % (outer.w - ix), 1 + b[3] as u32 % (outer.h - iy)).unwrap();
        let composed = extract_roi(&extract_roi(&img, outer).unwrap(), inner).unwrap();
        let direct = extract_roi(&img, Roi::new(x + ix, y + iy, inner.w, inner.h).unwrap()).unwrap();
        prop_assert_eq!(composed, direct);
    }

    #[test]
    fn png_round_trip(img in image_strategy(12)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        img.save_png(&path).unwrap();
        prop_assert_eq!(decode_image(&path).unwrap(), img);
    }

    #[test]
    fn ratio_is_scale_invariant(img in image_strategy(8), k in 1u8..=4) {
        let dim = RgbImage::new(
            img.width(),
            img.height(),
            img.pixels().iter().map(|p| p.map(|v| v / 5 + 1)).collect(),
        ).unwrap();
        let bright = RgbImage::new(
            dim.width(),
            dim.height(),
            dim.pixels().iter().map(|p| p.map(|v| v * k)).collect(),
        ).unwrap();
        let roi = dim.full_roi();
        let s1 = roi_channel_stats(&dim, roi).unwrap();
        let s2 = roi_channel_stats(&bright, roi).unwrap();
        let r1 = channel_ratio(&s1, Channel::G, Channel::B).unwrap();
        let r2 = channel_ratio(&s2, Channel::G, Channel::B).unwrap();
        assert_relative_eq!(r1, r2, max_relative = 1e-12);
        let inv = channel_ratio(&s1, Channel::B, Channel::G).unwrap();
        assert_relative_eq!(r1 * inv, 1.0, max_relative = 1e-12);
        assert_relative_eq!(grey_scale(&s2), k as f64 * grey_scale(&s1), max_relative = 1e-12);
    }

    #[test]
    fn grey_lies_between_channel_means(img in image_strategy(8)) {
        let s = roi_channel_stats(&img, img.full_roi()).unwrap();
        let g = grey_scale(&s);
        let lo = s.mean.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = s.mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo - 1e-12 <= g && g <= hi + 1e-12);
        prop_assert!((0.0..=255.0).contains(&g));
    }

    #[test]
    fn fit_is_order_free_and_affine(
        ys in prop::collection::vec(-100.0f64..100.0, 3..10),
        scale in 0.1f64..10.0,
        shift in -50.0f64..50.0,
        seed in any::<u64>(),
    ) {
        let pts: Vec<(f64, f64)> = ys.iter().enumerate().map(|(i, &y)| (2f64.powi(i as i32) * 1e-6, y)).collect();
        let base = fit_log_linear(&pts).unwrap();
        let mut shuffled = pts.clone();
        let len = shuffled.len();
        shuffled.rotate_left((seed % len as u64) as usize);
        let re = fit_log_linear(&shuffled).unwrap();
        assert_relative_eq!(re.slope, base.slope, epsilon = 1e-9, max_relative = 1e-9);
        assert_relative_eq!(re.intercept, base.intercept, epsilon = 1e-9, max_relative = 1e-9);
        let mapped: Vec<(f64, f64)> = pts.iter().map(|&(c, y)| (c, scale * y + shift)).collect();
        let m = fit_log_linear(&mapped).unwrap();
        assert_relative_eq!(m.slope, scale * base.slope, epsilon = 1e-8, max_relative = 1e-9);
        assert_relative_eq!(m.r_squared, base.r_squared, epsilon = 1e-9);
        prop_assert!((0.0..=1.0).contains(&base.r_squared));
    }

    #[test]
    fn repeating_error_ignores_scale(reps in prop::collection::vec(1.0f64..100.0, 2..8), k in 0.01f64..100.0) {
        let a = repeating_error(&reps).unwrap();
        let scaled: Vec<f64> = reps.iter().map(|r| r * k).collect();
        assert_relative_eq!(repeating_error(&scaled).unwrap(), a, epsilon = 1e-9, max_relative = 1e-9);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn normalized_curve_spans_unit_interval(ys in prop::collection::vec(-1e3f64..1e3, 2..12)) {
        let pts: Vec<(f64, f64)> = ys.iter().enumerate().map(|(i, &y)| (i as f64 + 1.0, y)).collect();
        match normalize_curve(&pts) {
            Ok(n) => {
                prop_assert!(n.iter().all(|&(_, v)| (0.0..=1.0).contains(&v)));
                prop_assert!(n.iter().any(|&(_, v)| v == 0.0));
                prop_assert!(n.iter().any(|&(_, v)| v == 1.0));
                prop_assert!(n.iter().zip(&pts).all(|(a, b)| a.0 == b.0));
            }
            Err(_) => prop_assert!(ys.iter().all(|&y| y == ys[0])),
        }
    }

    #[test]
    fn sensitivity_per_step_matches_slope(
        slope in prop::sample::select(vec![-25.0, -0.2, 0.13, 3.0, 19.08]),
        factor in 1.5f64..20.0,
        intercept in -100.0f64..100.0,
    ) {
        let points = (0..5)
            .map(|i| {
                let c = 1e-9 * factor.powi(i);
                SeriesPoint::new(c, vec![intercept + slope * c.log10()])
            })
            .collect();
        let series = MeasurementSeries::new("u", Approach::GreyScale, context(), points).unwrap();
        let curve = build_curve(&series, factor, CurveOptions::default()).unwrap().curve;
        assert_relative_eq!(curve.sensitivity_per_step / factor.log10(), curve.slope, max_relative = 1e-12);
        assert_relative_eq!(curve.slope, slope, max_relative = 1e-9);
    }
}
