//! Stem × masking interaction and the masked pixel-regression objective.

use proptest::prelude::*;
use vitkit::masking::{commutation_check, mim_loss, patch_targets, sample_mask, MimHead, PatchMask};
use vitkit::optim::OptimizerConfig;
use vitkit::params::{Bindings, Ctx};
use vitkit::stems::{patch_independence_check, StemModule};
use vitkit::train::mim_step;
use vitkit::vit::{build_model, Forward, Model};
use vitkit::{Rng, StemKind, StemNorm, StemSpec, Tape, Tensor, ViTConfig};

fn stem(kind: StemKind, norm: StemNorm, seed: u64) -> StemModule<f64> {
    let mut rng = Rng::new(seed);
    let mut s = StemModule::build(StemSpec::standard(kind, 32).with_norm(norm), &mut rng).unwrap();
    s.randomize(&mut rng);
    s
}

fn mim_model(kind: StemKind, norm: StemNorm, seed: u64) -> (Model<f64>, MimHead<f64>) {
    let cfg = ViTConfig::custom(32, 2, 4)
        .with_image_size(64)
        .with_classes(10)
        .with_stem(kind)
        .with_stem_norm(norm);
    let mut rng = Rng::new(seed);
    let model = build_model(&cfg, &mut rng).unwrap();
    let head = MimHead::for_model(&model, &mut rng);
    (model, head)
}

/// Final-normed features with masked positions replaced after the stem.
fn masked_features(model: &Model<f64>, head: &MimHead<f64>, images: &Tensor<f64>, mask: &PatchMask) -> Tensor<f64> {
    let tape = Tape::no_grad();
    let ctx = Ctx::eval(&tape, &model.params);
    let hb = Bindings::new(&tape, &head.params);
    let token = hb.get(head.mask_token);
    let out = model
        .features(&ctx, tape.constant(images.clone()), Some((&mask.bits, token)), Forward::Parallel)
        .unwrap();
    (*out.value()).clone()
}

/// `images` with fresh noise written into every masked 16×16 patch.
fn scramble_masked(images: &Tensor<f64>, mask: &PatchMask, rng: &mut Rng) -> Tensor<f64> {
    let s = images.shape().to_vec();
    let (h, w) = (s[2], s[3]);
    let mut out = images.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let (y, x) = ((i / w) % h, i % w);
        if mask.bits[(y / 16) * (w / 16) + x / 16] {
            *v = 5.0 * rng.normal();
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn independent_stems_commute_with_masking(seed in any::<u64>(), ratio in 0.1f64..0.9) {
        let mut rng = Rng::new(seed);
        let images: Tensor<f64> = rng.normal_tensor(&[2, 3, 64, 48], 1.0);
        let mask = sample_mask(&mut rng, 12, ratio).unwrap();
        let token: Tensor<f64> = rng.normal_tensor(&[32], 1.0);
        for (kind, norm) in [(StemKind::Hmlp, StemNorm::Ln), (StemKind::Hmlp, StemNorm::Bn), (StemKind::Linear, StemNorm::None)] {
            let s = stem(kind, norm, seed);
            prop_assert_eq!(commutation_check(&s, &images, &mask, &token).unwrap(), 0.0);
        }
    }
}

#[test]
fn conv_stem_fails_commutation_and_independence() {
    let s = stem(StemKind::Conv, StemNorm::Bn, 1);
    let mut rng = Rng::new(2);
    let mut failures = 0;
    for _ in 0..10 {
        let images: Tensor<f64> = rng.normal_tensor(&[1, 3, 64, 64], 1.0);
        let mask = sample_mask(&mut rng, 16, 0.4).unwrap();
        let token: Tensor<f64> = rng.normal_tensor(&[32], 1.0);
        if commutation_check(&s, &images, &mask, &token).unwrap() > 0.0 {
            failures += 1;
        }
    }
    assert!(failures >= 1);
    let r = patch_independence_check(&s, 64, &mut rng, 10).unwrap();
    assert!(!r.independent && r.max_leakage > 0.0);
}

#[test]
fn predictions_ignore_masked_pixels_with_an_independent_stem() {
    let mut rng = Rng::new(3);
    let images: Tensor<f64> = rng.normal_tensor(&[2, 3, 64, 64], 1.0);
    let mask = PatchMask::from_bits((0..16).map(|i| i % 3 == 0).collect());
    let scrambled = scramble_masked(&images, &mask, &mut rng);
    assert!(!scrambled.bitwise_eq(&images));

    let (model, head) = mim_model(StemKind::Hmlp, StemNorm::Ln, 4);
    let a = masked_features(&model, &head, &images, &mask);
    let b = masked_features(&model, &head, &scrambled, &mask);
    assert!(a.bitwise_eq(&b));

    // Negative control: overlapping kernels let masked content leak.
    let (model, head) = mim_model(StemKind::Conv, StemNorm::Bn, 4);
    let a = masked_features(&model, &head, &images, &mask);
    let b = masked_features(&model, &head, &scrambled, &mask);
    assert!(!a.bitwise_eq(&b));
}

#[test]
fn loss_limits() {
    let mut rng = Rng::new(5);
    let images: Tensor<f64> = rng.normal_tensor(&[2, 3, 32, 32], 1.0);
    let targets = patch_targets(&images, 16).unwrap();
    let mask = vec![true, false, true, true];
    let tape = Tape::no_grad();
    let perfect = tape.constant(targets.clone()).masked_mse(&targets, &mask).unwrap();
    assert_eq!(perfect.value().data()[0], 0.0);

    // Zero decoder: predictions are zero, the loss is the target variance.
    let cfg = ViTConfig::custom(16, 1, 2).with_image_size(32).with_classes(10);
    let model: Model<f64> = build_model(&cfg, &mut rng).unwrap();
    let mut head = MimHead::for_model(&model, &mut rng);
    for e in head.params.entries_mut() {
        if e.name.starts_with("decoder") {
            e.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let ctx = Ctx::eval(&tape, &model.params);
    let hb = Bindings::new(&tape, &head.params);
    let loss = mim_loss(&ctx, &hb, &head, &model, &images, &PatchMask::from_bits(mask)).unwrap();
    assert!((loss.value().data()[0] - 1.0).abs() < 1e-3, "{}", loss.value().data()[0]);
}

#[test]
fn overfits_a_fixed_batch() {
    let cfg = ViTConfig::custom(32, 2, 4)
        .with_image_size(32)
        .with_classes(10)
        .with_stem(StemKind::Hmlp)
        .with_stem_norm(StemNorm::Ln);
    let mut rng = Rng::new(6);
    let mut model: Model<f32> = build_model(&cfg, &mut rng).unwrap();
    let mut head = MimHead::for_model(&model, &mut rng);
    let images: Tensor<f32> = rng.normal_tensor(&[4, 3, 32, 32], 1.0);
    let mask = PatchMask::from_bits(vec![true, false, false, true]);
    let opt = OptimizerConfig::adamw(1e-3);
    let (mut om, mut oh) = (opt.build().unwrap(), opt.build().unwrap());
    let mut losses = Vec::new();
    for step in 0..200 {
        losses.push(mim_step(&mut model, &mut head, &mut om, &mut oh, &images, &mask, &mut rng, step).unwrap());
    }
    let (first, last) = (losses[0], *losses.last().unwrap());
    assert!(last < 0.5 * first, "{first} -> {last}");
}
