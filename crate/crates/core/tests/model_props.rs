use std::collections::BTreeSet;

use ndarray::Array2;
use refshare_core::attention::{MaskMode, ShareSpec, TokenMask};
use refshare_core::model::*;
use refshare_core::schedule::{build_schedule, ShiftParams};
use refshare_core::tensor::{checksum, noise};

fn golden_config() -> ModelConfig {
    ModelConfig {
        num_layers: 4,
        num_heads: 2,
        head_dim: 8,
        text_tokens: 4,
        image_tokens: 16,
        latent_channels: 12,
        vital_default: [0, 2].into(),
        weight_seed: 42,
    }
}

fn bits(a: &Array2<f32>) -> Vec<u32> {
    a.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn weight_checksum_golden() {
    let a = init_model::<f32>(&golden_config()).unwrap();
    let b = init_model::<f32>(&golden_config()).unwrap();
    assert_eq!(a.weight_checksum(), b.weight_checksum());
    assert_eq!(a.weight_checksum(), WEIGHT_GOLDEN);
}

#[test]
fn forward_golden() {
    let m = init_model::<f32>(&golden_config()).unwrap();
    let z = noise::<f32>(7, 16, 12);
    let p = m.embed_prompt("a photo of a dog");
    let v = m.forward_velocity(&z, 0.5, &p, 3.5, None).unwrap();
    assert_eq!(v.dim(), z.dim());
    assert_eq!(checksum(v.iter()), FORWARD_GOLDEN);
}

const WEIGHT_GOLDEN: &str = "cde8ccdc286848e24ef5a80167a4c07a4b8f47b3bd5c8c430fe6acce540a0f6a";
const FORWARD_GOLDEN: &str = "4156201f0f79510a26d4700e7fb1de18f47592857a4765b031ad2fe7c03ed18b";

fn setup(cfg: &ModelConfig) -> (ToyMMDiT<f32>, Array2<f32>, Array2<f32>, AttentionBank<f32>) {
    let m = init_model::<f32>(cfg).unwrap();
    let z_ref = noise::<f32>(3, cfg.image_tokens, cfg.latent_channels);
    let p = m.embed_prompt("a red car");
    let sched = build_schedule::<f32>(4, &ShiftParams::new(cfg.image_tokens, -1.0)).unwrap();
    let opts = CaptureOptions { layers: Some((0..cfg.num_layers).collect()), ..Default::default() };
    let bank = capture_reference_bank_with(
        &m,
        &z_ref,
        &m.embed_prompt(""),
        &TokenMask::full(cfg.image_tokens),
        &sched,
        9,
        &opts,
    )
    .unwrap();
    (m, z_ref, p, bank)
}

#[test]
fn no_sharing_equivalence_for_every_layer_set() {
    let cfg = golden_config();
    let (m, _, p, bank) = setup(&cfg);
    let z = noise::<f32>(11, 16, 12);
    let plain = m.forward_velocity(&z, 0.7, &p, 3.5, None).unwrap();
    let sets: Vec<BTreeSet<usize>> = vec![[].into(), [0].into(), [1, 3].into(), (0..4).collect()];
    for set in sets {
        let spec = ShareSpec {
            lambda_r: 1.1,
            lambda_p: 1.1,
            vital_set: set.clone(),
            num_layers: 4,
            mask: TokenMask::empty(16),
            mask_mode: MaskMode::Drop,
            dropout_rate: 0.0,
            dropout_seed: 0,
        };
        let shared = m
            .forward_velocity(&z, 0.7, &p, 3.5, Some(ShareContext { spec: &spec, bank: &bank, timestep_index: 1 }))
            .unwrap();
        assert_eq!(bits(&plain), bits(&shared), "layers {set:?}");
    }
}

#[test]
fn sharing_changes_output() {
    let cfg = golden_config();
    let (m, _, p, bank) = setup(&cfg);
    let z = noise::<f32>(11, 16, 12);
    let plain = m.forward_velocity(&z, 0.7, &p, 3.5, None).unwrap();
    let spec = ShareSpec::plain(4, [0, 2].into(), 16);
    let shared = m
        .forward_velocity(&z, 0.7, &p, 3.5, Some(ShareContext { spec: &spec, bank: &bank, timestep_index: 1 }))
        .unwrap();
    assert_ne!(plain, shared);
}

#[test]
fn capture_does_not_touch_weights() {
    let cfg = golden_config();
    let m = init_model::<f32>(&cfg).unwrap();
    let before = m.weight_checksum();
    let sched = build_schedule::<f32>(3, &ShiftParams::new(16, -1.0)).unwrap();
    capture_reference_bank(&m, &noise(1, 16, 12), &m.embed_prompt("x"), &TokenMask::full(16), &sched, 0).unwrap();
    assert_eq!(before, m.weight_checksum());
}

#[test]
fn guidance_is_live() {
    let m = init_model::<f32>(&golden_config()).unwrap();
    let z = noise::<f32>(2, 16, 12);
    let p = m.embed_prompt("a cat");
    let a = m.forward_velocity(&z, 0.4, &p, 3.5, None).unwrap();
    let b = m.forward_velocity(&z, 0.4, &p, 1.0, None).unwrap();
    let c = m.forward_velocity(&z, 0.6, &p, 3.5, None).unwrap();
    assert_ne!(a, b);
    assert_ne!(a, c);
}

#[test]
fn output_shape_over_config_grid() {
    for (layers, heads, hd, text, img, ch) in
        [(1, 1, 1, 0, 1, 1), (2, 3, 2, 5, 9, 4), (3, 2, 4, 1, 4, 12), (8, 4, 16, 16, 64, 192)]
    {
        let cfg = ModelConfig {
            num_layers: layers,
            num_heads: heads,
            head_dim: hd,
            text_tokens: text,
            image_tokens: img,
            latent_channels: ch,
            vital_default: [0].into(),
            weight_seed: 1,
        };
        let m = init_model::<f64>(&cfg).unwrap();
        let z = noise::<f64>(0, img, ch);
        let v = m.forward_velocity(&z, 0.3, &m.embed_prompt("hello"), 3.5, None).unwrap();
        assert_eq!(v.dim(), z.dim());
        assert!(v.iter().all(|x| x.is_finite()));
    }
}

#[test]
fn bank_contract() {
    let cfg = golden_config();
    let m = init_model::<f32>(&cfg).unwrap();
    let z_ref = noise::<f32>(3, 16, 12);
    let p = m.embed_prompt("");
    let sched = build_schedule::<f32>(5, &ShiftParams::new(16, -1.0)).unwrap();
    let mask = TokenMask::from_flags((0..16).map(|i| i % 3 != 0).collect());
    let a = capture_reference_bank(&m, &z_ref, &p, &mask, &sched, 4).unwrap();
    let b = capture_reference_bank(&m, &z_ref, &p, &mask, &sched, 4).unwrap();
    assert_eq!(a.len(), sched.len() * cfg.vital_default.len());
    assert_eq!(a, b);
    assert_eq!(a.mask, mask);
    // t = 0 entry equals a capture from the clean latent
    let last = sched.len() - 1;
    let (_, direct) = m.forward_capture(&z_ref, 0.0, &p, 3.5, &cfg.vital_default, last).unwrap();
    for kv in direct {
        let stored = a.get(last, kv.layer).unwrap();
        let eq = |x: &ndarray::Array3<f32>, y: &ndarray::Array3<f32>| {
            x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
        };
        assert!(eq(&stored.keys, &kv.keys) && eq(&stored.values, &kv.values));
    }
}
