use std::collections::BTreeSet;

use promise_core::autodiff::{Graph, ParamStore, Tensor};
use promise_core::data::{generate, Domain, Label, PointPrompt};
use promise_core::model::{MiniSam, ModelConfig};
use promise_core::pattern::{
    compose_pattern_tokens, manifest, solve_pae_hidden, trainable_params, IpsVariant, PatternShift, IPS_TOKENS,
    MASK_TOKENS, PAE_FC1, PAE_FC2, PAE_PARAM_TARGET,
};
use promise_core::rng;
use promise_core::train::{Prompts, Segmenter};
use rand::Rng;

fn base(cfg: &ModelConfig) -> ParamStore<f32> {
    let mut store = ParamStore::new();
    MiniSam::init(&mut store, cfg, 5).unwrap();
    store.freeze_all();
    store
}

fn randomize(store: &mut ParamStore<f32>, name: &str, seed: u64) {
    let mut r = rng::stream(&[seed]);
    let id = store.id(name).unwrap();
    for v in store.get_mut(id).data_mut() {
        *v = r.random_range(-0.5..0.5);
    }
}

fn with_variant(cfg: &ModelConfig, variant: IpsVariant) -> ParamStore<f32> {
    let mut store = base(cfg);
    PatternShift::attach(&mut store, cfg, variant, 1).unwrap();
    store
}

#[test]
fn composition_example() {
    let store = ParamStore::<f32>::new();
    let mut g = Graph::new(&store);
    let iou = g.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
    let mask = g.constant(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
    let ips = g.constant(&[2, 2], vec![0.5, 0.5, 1.0, 1.0]).unwrap();
    let t = compose_pattern_tokens(&mut g, iou, mask, Some(ips)).unwrap();
    assert_eq!(g.shape(t), &[3, 2]);
    assert_eq!(g.value(t), &[1.0, 2.0, 3.5, 4.5, 6.0, 7.0]);
    let plain = compose_pattern_tokens(&mut g, iou, mask, None).unwrap();
    assert_eq!(g.value(plain), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let bad = g.constant(&[3, 2], vec![0.0; 6]).unwrap();
    assert!(compose_pattern_tokens(&mut g, iou, mask, Some(bad)).is_err());
}

#[test]
fn pae_on_a_constant_grid_matches_hand_computation() {
    let cfg = ModelConfig::tiny();
    let mut store = with_variant(&cfg, IpsVariant::IpsPae);
    for (i, name) in [PAE_FC1, PAE_FC2].iter().enumerate() {
        randomize(&mut store, &format!("{name}.weight"), i as u64);
        randomize(&mut store, &format!("{name}.bias"), 10 + i as u64);
    }
    let shift = PatternShift::bind(&mut store, &cfg).unwrap();
    let d = cfg.decoder_dim;
    let h = cfg.pae_hidden_width();
    let n = cfg.n_ips_tokens;
    let gs = cfg.grid_size();
    let v: Vec<f32> = (0..d).map(|i| (i as f32 * 0.7).sin()).collect();

    let mut g = Graph::new(&store);
    let grid = g.constant(&[gs, gs, d], v.repeat(gs * gs)).unwrap();
    let out = shift.ips(&mut g, grid).unwrap().unwrap();
    assert_eq!(g.shape(out), &[n, d]);

    let t = |name: &str| store.get(store.id(name).unwrap()).data().to_vec();
    let (w1, b1, w2, b2) = (
        t(&format!("{PAE_FC1}.weight")),
        t(&format!("{PAE_FC1}.bias")),
        t(&format!("{PAE_FC2}.weight")),
        t(&format!("{PAE_FC2}.bias")),
    );
    let gelu = |x: f64| 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let hidden: Vec<f64> = (0..h)
        .map(|j| gelu(b1[j] as f64 + (0..d).map(|i| v[i] as f64 * w1[i * h + j] as f64).sum::<f64>()))
        .collect();
    for k in 0..n * d {
        let want = b2[k] as f64 + (0..h).map(|j| hidden[j] * w2[j * n * d + k] as f64).sum::<f64>();
        let got = g.value(out)[k] as f64;
        assert!((got - want).abs() < 1e-4 * want.abs().max(1.0), "{k}: {got} vs {want}");
    }
}

fn points() -> Vec<PointPrompt> {
    vec![
        PointPrompt { x: 0.4, y: 0.5, label: Label::Positive },
        PointPrompt { x: 0.1, y: 0.1, label: Label::Negative },
    ]
}

#[test]
fn disabled_shift_is_bit_identical_to_the_base() {
    let cfg = ModelConfig::tiny();
    let mut plain = base(&cfg);
    let vanilla = Segmenter::bind(&mut plain, &cfg).unwrap();
    let mut shifted = plain.clone();
    PatternShift::attach(&mut shifted, &cfg, IpsVariant::IpsPae, 3).unwrap();
    randomize(&mut shifted, &format!("{PAE_FC2}.weight"), 4);
    let seg = Segmenter::bind(&mut shifted, &cfg).unwrap();
    let pts = points();
    let mut any_diff = false;
    for s in generate(Domain::TargetA, 20, cfg.image_size, 8) {
        let img = s.image();
        let a = vanilla.predict(&plain, &img, Prompts::Points(&pts), false).unwrap();
        let b = seg.predict(&shifted, &img, Prompts::Points(&pts), false).unwrap();
        assert_eq!(a.probs, b.probs);
        assert_eq!(a.iou_pred, b.iou_pred);
        let c = seg.predict(&shifted, &img, Prompts::Points(&pts), true).unwrap();
        any_diff |= c.probs != a.probs;
    }
    assert!(any_diff);
}

#[test]
fn zero_initialized_generator_starts_at_the_base() {
    let cfg = ModelConfig::tiny();
    let mut plain = base(&cfg);
    let vanilla = Segmenter::bind(&mut plain, &cfg).unwrap();
    let mut shifted = plain.clone();
    PatternShift::attach(&mut shifted, &cfg, IpsVariant::IpsPae, 3).unwrap();
    let seg = Segmenter::bind(&mut shifted, &cfg).unwrap();
    let img = generate(Domain::Source, 1, cfg.image_size, 2)[0].image();
    let a = vanilla.predict(&plain, &img, Prompts::Points(&points()), false).unwrap();
    let b = seg.predict(&shifted, &img, Prompts::Points(&points()), true).unwrap();
    assert_eq!(a.probs, b.probs);
}

#[test]
fn shift_leaves_the_iou_row_untouched() {
    let cfg = ModelConfig::tiny();
    let mut store = with_variant(&cfg, IpsVariant::IpsOnly);
    randomize(&mut store, IPS_TOKENS, 6);
    let seg = Segmenter::bind(&mut store, &cfg).unwrap();
    let gs = cfg.grid_size();
    let d = cfg.decoder_dim;
    let mut g = Graph::new(&store);
    let grid = g.constant(&[gs, gs, d], vec![0.1; gs * gs * d]).unwrap();
    let on = seg.shift.pattern_tokens(&mut g, &seg.model, grid, true).unwrap();
    let off = seg.shift.pattern_tokens(&mut g, &seg.model, grid, false).unwrap();
    assert_eq!(g.value(on)[..d], g.value(off)[..d]);
    assert_ne!(g.value(on)[d..], g.value(off)[d..]);
}

#[test]
fn attach_marks_exactly_the_manifest_trainable() {
    let cfg = ModelConfig::tiny();
    for v in IpsVariant::ALL {
        let store = with_variant(&cfg, v);
        let trainable: BTreeSet<String> =
            store.trainable_ids().into_iter().map(|id| store.name(id).to_string()).collect();
        let expected: BTreeSet<String> = manifest(v, &cfg).into_iter().map(|(n, _)| n).collect();
        assert_eq!(trainable, expected, "{v:?}");
        assert_eq!(store.num_trainable(), trainable_params(v, &cfg));
        for (name, shape) in manifest(v, &cfg) {
            assert_eq!(store.get(store.id(&name).unwrap()).shape(), shape.as_slice());
        }
    }
    assert_eq!(trainable_params(IpsVariant::None, &cfg), 0);
    assert_eq!(manifest(IpsVariant::MaskTokens, &cfg)[0].0, MASK_TOKENS);
}

#[test]
fn variant_is_recovered_from_the_store() {
    let cfg = ModelConfig::tiny();
    for v in IpsVariant::ALL {
        let mut store = with_variant(&cfg, v);
        assert_eq!(PatternShift::bind(&mut store, &cfg).unwrap().variant, v);
    }
    let mut both = with_variant(&cfg, IpsVariant::IpsPae);
    both.insert(IPS_TOKENS, Tensor::zeros(&[cfg.n_ips_tokens, cfg.decoder_dim])).unwrap();
    assert!(PatternShift::bind(&mut both, &cfg).is_err());
}

#[test]
fn variant_names_roundtrip() {
    for v in IpsVariant::ALL {
        assert_eq!(v.name().parse::<IpsVariant>().unwrap(), v);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<IpsVariant>(&json).unwrap(), v);
    }
    assert!("bogus".parse::<IpsVariant>().is_err());
}

#[test]
fn full_scale_parameter_accounting() {
    let mut sam = ModelConfig::sam_scale();
    let (d, n) = (256usize, 4usize);
    assert_eq!(trainable_params(IpsVariant::IpsOnly, &sam), n * d);
    assert_eq!(trainable_params(IpsVariant::IpsOnly, &sam), 1024);
    assert_eq!(trainable_params(IpsVariant::MaskTokens, &sam), 1024);
    let h = solve_pae_hidden(&sam, PAE_PARAM_TARGET);
    assert_eq!(h, 1006);
    sam.pae_hidden = h;
    let by_hand = d * h + h + h * n * d + n * d;
    let count = trainable_params(IpsVariant::IpsPae, &sam);
    assert_eq!(count, by_hand);
    assert_eq!(count, 1_289_710);
    assert!((count as f64 - 1.29e6).abs() / 1.29e6 < 0.05);
}

#[test]
fn default_hidden_width_is_four_times_model_width() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.pae_hidden_width(), 256);
    let d = 64;
    assert_eq!(trainable_params(IpsVariant::IpsPae, &cfg), d * 256 + 256 + 256 * 4 * d + 4 * d);
}
