use std::collections::HashSet;

use promise_core::data::{
    generate, generate_sample, sample_gt_points, select_split, split_of, Domain, Label, PointPrompt, PromptSetting,
    SegmentationSample, Split, MAX_FOREGROUND, MIN_FOREGROUND,
};
use promise_core::Error;
use proptest::prelude::*;

fn mask_strategy() -> impl Strategy<Value = (usize, usize, Vec<u8>)> {
    (2usize..12, 2usize..12).prop_flat_map(|(w, h)| (Just(w), Just(h), prop::collection::vec(0u8..2, w * h)))
}

proptest! {
    #[test]
    fn sampled_points_respect_the_mask(
        (w, h, mask) in mask_strategy(),
        n_pos in 0usize..5,
        n_neg in 0usize..5,
        seed in any::<u64>(),
    ) {
        let fg = mask.iter().filter(|&&m| m != 0).count();
        let bg = mask.len() - fg;
        let res = sample_gt_points(&mask, w, h, n_pos, n_neg, seed);
        if fg < n_pos || bg < n_neg {
            let is_insufficient = matches!(res, Err(Error::InsufficientPixels { .. }));
            prop_assert!(is_insufficient);
            return Ok(());
        }
        let pts = res.unwrap();
        prop_assert_eq!(pts.len(), n_pos + n_neg);
        let mut seen = HashSet::new();
        for (i, p) in pts.iter().enumerate() {
            prop_assert!((0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y));
            let col = (p.x * w as f32).floor() as usize;
            let row = (p.y * h as f32).floor() as usize;
            let on_fg = mask[row * w + col] != 0;
            let expect = if i < n_pos { Label::Positive } else { Label::Negative };
            prop_assert_eq!(p.label, expect);
            prop_assert_eq!(on_fg, p.label == Label::Positive);
            prop_assert!(seen.insert((row, col)), "pixel sampled twice");
        }
        prop_assert_eq!(sample_gt_points(&mask, w, h, n_pos, n_neg, seed).unwrap(), pts);
    }
}

#[test]
fn sampler_uses_pixel_centers() {
    let mut mask = vec![0u8; 16];
    mask[5] = 1;
    let pts = sample_gt_points(&mask, 4, 4, 1, 0, 0).unwrap();
    assert_eq!(pts, vec![PointPrompt { x: 0.375, y: 0.375, label: Label::Positive }]);
}

#[test]
fn sampler_reports_shortfall() {
    let mask = [1u8, 1, 0, 0];
    let err = sample_gt_points(&mask, 2, 2, 3, 1, 0).unwrap_err();
    assert_eq!(err, Error::InsufficientPixels { kind: "foreground", needed: 3, available: 2 });
    assert!(sample_gt_points(&mask, 3, 2, 1, 1, 0).is_err());
}

#[test]
fn prompt_settings() {
    let counts: Vec<_> = PromptSetting::ALL.iter().map(|s| (s.name(), s.n_pos(), s.n_neg())).collect();
    assert_eq!(counts, vec![("3P", 1, 2), ("5P", 2, 3), ("16P", 8, 8)]);
    for s in PromptSetting::ALL {
        assert_eq!(s.to_string().parse::<PromptSetting>().unwrap(), s);
        assert_eq!(PromptSetting::from_total(s.total()), Some(s));
        let labels = s.labels();
        assert_eq!(labels.iter().filter(|&&l| l == Label::Positive).count(), s.n_pos());
        assert!(labels[..s.n_pos()].iter().all(|&l| l == Label::Positive));
    }
    assert!("4P".parse::<PromptSetting>().is_err());
    assert_eq!(serde_json::to_string(&PromptSetting::P16).unwrap(), "\"16P\"");
}

#[test]
fn labels_and_points() {
    assert_eq!(Label::from_sign(1).unwrap(), Label::Positive);
    assert_eq!(Label::from_sign(-1).unwrap(), Label::Negative);
    assert!(Label::from_sign(0).is_err());
    assert!(PointPrompt::new(0.5, 1.0, Label::Positive).is_ok());
    assert!(PointPrompt::new(1.01, 0.5, Label::Positive).is_err());
    assert!(PointPrompt::new(0.5, f32::NAN, Label::Negative).is_err());
    let p: PointPrompt = serde_json::from_str(r#"{"x":0.25,"y":0.5,"label":-1}"#).unwrap();
    assert_eq!(p.label, Label::Negative);
    assert_eq!(serde_json::to_string(&p).unwrap(), r#"{"x":0.25,"y":0.5,"label":-1}"#);
    assert!(serde_json::from_str::<PointPrompt>(r#"{"x":0.25,"y":0.5,"label":0}"#).is_err());
}

#[test]
fn generator_is_deterministic() {
    for d in Domain::ALL {
        let a = generate(d, 6, 32, 9);
        let b = generate(d, 6, 32, 9);
        assert_eq!(a, b);
        let c = generate(d, 6, 32, 10);
        assert_ne!(a[0].pixels, c[0].pixels);
        assert_eq!(generate_sample(d, 32, 9, 4), a[4]);
    }
}

#[test]
fn generated_masks_are_binary_and_bounded() {
    for d in Domain::ALL {
        for s in generate(d, 40, 64, 3) {
            assert_eq!(s.domain, d);
            assert_eq!(s.pixels.len(), 64 * 64 * 3);
            assert!(s.mask.iter().all(|&m| m <= 1));
            let f = s.foreground_fraction();
            assert!((MIN_FOREGROUND..=MAX_FOREGROUND).contains(&f), "{d:?} {} {f}", s.id);
        }
    }
}

fn luminance_contrast(s: &SegmentationSample) -> f64 {
    let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0.0, 0.0, 0.0);
    for (i, px) in s.pixels.chunks(3).enumerate() {
        let l = px.iter().map(|&v| v as f64).sum::<f64>() / 3.0;
        if s.mask[i] != 0 {
            fg += l;
            nf += 1.0;
        } else {
            bg += l;
            nb += 1.0;
        }
    }
    (fg / nf - bg / nb).abs()
}

fn mean_red_minus_blue(s: &SegmentationSample) -> f64 {
    let n = (s.size * s.size) as f64;
    s.pixels.chunks(3).map(|p| p[0] as f64 - p[2] as f64).sum::<f64>() / n
}

#[test]
fn low_contrast_domain_has_lower_contrast() {
    let mean = |d| {
        let v = generate(d, 100, 64, 21);
        v.iter().map(luminance_contrast).sum::<f64>() / v.len() as f64
    };
    let source = mean(Domain::Source);
    let target = mean(Domain::TargetA);
    assert!(target < 0.5 * source, "{target} vs {source}");
}

#[test]
fn domains_are_separable_by_a_color_threshold() {
    let src = generate(Domain::Source, 100, 64, 33);
    let tgt = generate(Domain::TargetA, 100, 64, 33);
    let correct = src.iter().filter(|s| mean_red_minus_blue(s) < 40.0).count()
        + tgt.iter().filter(|s| mean_red_minus_blue(s) >= 40.0).count();
    assert!(correct as f64 / 200.0 >= 0.9, "{correct}/200");
}

#[test]
fn splits_are_stable_and_roughly_proportional() {
    let data = generate(Domain::Source, 1000, 8, 1);
    let n = |sp| select_split(&data, sp).len();
    let (tr, va, te) = (n(Split::Train), n(Split::Val), n(Split::Test));
    assert_eq!(tr + va + te, 1000);
    assert!((620..=780).contains(&tr), "{tr}");
    assert!((60..=140).contains(&va), "{va}");
    assert!((140..=260).contains(&te), "{te}");
    assert_eq!(split_of("00042"), split_of("00042"));
}

#[test]
fn sample_validation() {
    assert!(SegmentationSample::new("x".into(), Domain::Source, 2, vec![0; 12], vec![0, 1, 1, 0]).is_ok());
    assert!(SegmentationSample::new("x".into(), Domain::Source, 2, vec![0; 11], vec![0; 4]).is_err());
    assert!(SegmentationSample::new("x".into(), Domain::Source, 2, vec![0; 12], vec![0, 2, 0, 0]).is_err());
}
