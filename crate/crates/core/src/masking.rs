//! Patch masking, the mask-before/after commutation oracle and a
//! pixel-regression masked-image-modeling objective.

use serde::Serialize;

use crate::autograd::Var;
use crate::error::{config_err, dim_err, Result};
use crate::params::{Bindings, Ctx, ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::stems::{StemModule, INIT_STD};
use crate::tensor::Tensor;
use crate::vit::{Forward, Model};

/// Default fraction of masked patches.
pub const DEFAULT_MASK_RATIO: f64 = 0.4;

/// Variance floor of the per-patch target normalization.
pub const TARGET_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatchMask {
    pub bits: Vec<bool>,
    pub ratio: f64,
}

impl PatchMask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        let ratio = bits.iter().filter(|&&b| b).count() as f64 / bits.len().max(1) as f64;
        PatchMask { bits, ratio }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn masked(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Uniformly random subset of exactly `round(ratio·T)` masked patches.
pub fn sample_mask(rng: &mut Rng, tokens: usize, ratio: f64) -> Result<PatchMask> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(config_err!("mask ratio {ratio} outside [0, 1)"));
    }
    let count = (ratio * tokens as f64).round() as usize;
    let mut order: Vec<usize> = (0..tokens).collect();
    rng.shuffle(&mut order);
    let mut bits = vec![false; tokens];
    for &i in &order[..count] {
        bits[i] = true;
    }
    Ok(PatchMask { bits, ratio })
}

/// Replaces masked rows of `[b, T, d]` tokens by `mask_token` (`d` values).
pub fn apply_mask_tokens<T: Scalar>(tokens: &Tensor<T>, mask: &PatchMask, mask_token: &Tensor<T>) -> Result<Tensor<T>> {
    let s = tokens.shape();
    if s.len() != 3 || s[1] != mask.len() || mask_token.numel() != s[2] {
        return Err(dim_err!(
            "mask of length {} / token of {} values for tokens {:?}",
            mask.len(),
            mask_token.numel(),
            s
        ));
    }
    let (t, d) = (s[1], s[2]);
    let mut out = tokens.clone();
    for (row, chunk) in out.data_mut().chunks_mut(d).enumerate() {
        if mask.bits[row % t] {
            chunk.copy_from_slice(mask_token.data());
        }
    }
    Ok(out)
}

/// Zeroes every pixel of the masked `patch×patch` squares of `[b, c, H, W]`
/// images. Patches are numbered row-major over the patch grid.
pub fn apply_mask_pixels<T: Scalar>(images: &Tensor<T>, mask: &PatchMask, patch: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 || patch == 0 || s[2] % patch != 0 || s[3] % patch != 0 {
        return Err(dim_err!("images {:?} not divisible into {patch}x{patch} patches", s));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / patch, w / patch);
    if mask.len() != gh * gw {
        return Err(dim_err!("mask of length {} for a {gh}x{gw} patch grid", mask.len()));
    }
    let mut out = images.clone();
    let data = out.data_mut();
    for (idx, _) in mask.bits.iter().enumerate().filter(|(_, &m)| m) {
        let (py, px) = (idx / gw, idx % gw);
        for plane in 0..b * c {
            for y in py * patch..(py + 1) * patch {
                let row = (plane * h + y) * w;
                data[row + px * patch..row + (px + 1) * patch]
                    .iter_mut()
                    .for_each(|v| *v = T::zero());
            }
        }
    }
    Ok(out)
}

/// Largest absolute difference, over unmasked token rows, between masking
/// after the stem and masking the pixels before it. The stem runs in eval
/// mode.
pub fn commutation_check<T: Scalar>(
    stem: &StemModule<T>,
    images: &Tensor<T>,
    mask: &PatchMask,
    mask_token: &Tensor<T>,
) -> Result<f64> {
    let after = apply_mask_tokens(&stem.tokens(images)?, mask, mask_token)?;
    let masked = apply_mask_pixels(images, mask, stem.spec().patch_size)?;
    let before = apply_mask_tokens(&stem.tokens(&masked)?, mask, mask_token)?;
    let (t, d) = (mask.len(), stem.spec().width);
    let mut dev = 0.0f64;
    for (row, (a, b)) in after.data().chunks(d).zip(before.data().chunks(d)).enumerate() {
        if mask.bits[row % t] {
            continue;
        }
        for (&x, &y) in a.iter().zip(b) {
            dev = dev.max((x - y).abs().as_f64());
        }
    }
    Ok(dev)
}

/// Flattened patches of `[b, c, H, W]` images, each normalized to zero mean
/// and unit variance: `[b, T, c·p·p]`.
pub fn patch_targets<T: Scalar>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 || patch == 0 || s[2] % patch != 0 || s[3] % patch != 0 {
        return Err(dim_err!("images {:?} not divisible into {patch}x{patch} patches", s));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let e = c * patch * patch;
    let mut data = crate::kernels::patchify(images.data(), b, c, h, w, patch);
    let n = T::of(e as f64);
    for row in data.chunks_mut(e) {
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
        let inv = T::one() / (var + T::of(TARGET_EPS)).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
    Tensor::new(&[b, (h / patch) * (w / patch), e], data)
}

/// Learnable mask token and the linear pixel decoder of the pretext task.
#[derive(Debug, Clone)]
pub struct MimHead<T: Scalar> {
    pub params: ParamStore<T>,
    pub mask_token: ParamId,
    pub decoder_weight: ParamId,
    pub decoder_bias: ParamId,
}

impl<T: Scalar> MimHead<T> {
    pub fn new(width: usize, patch_pixels: usize, rng: &mut Rng) -> Self {
        let mut params = ParamStore::new();
        let mask_token = params.add_param(
            "mask_token",
            Tensor::from_fn(&[width], |_| T::of(rng.trunc_normal(INIT_STD))),
        );
        let decoder_weight = params.add_param(
            "decoder.weight",
            Tensor::from_fn(&[width, patch_pixels], |_| T::of(rng.trunc_normal(INIT_STD))),
        );
        let decoder_bias = params.add_param("decoder.bias", Tensor::zeros(&[patch_pixels]));
        MimHead {
            params,
            mask_token,
            decoder_weight,
            decoder_bias,
        }
    }

    /// A head sized for `model`.
    pub fn for_model(model: &Model<T>, rng: &mut Rng) -> Self {
        let c = &model.config;
        Self::new(c.width, c.in_channels * c.patch_size * c.patch_size, rng)
    }
}

/// Masked pixel-regression loss: masked positions receive the mask token
/// after the stem, pass through the trunk, and are decoded to pixels; the
/// loss is the MSE against per-patch-normalized pixels over masked
/// positions only.
pub fn mim_loss<'a, T: Scalar>(
    ctx: &Ctx<'a, T>,
    head: &Bindings<'a, T>,
    head_ids: &MimHead<T>,
    model: &Model<T>,
    images: &Tensor<T>,
    mask: &PatchMask,
) -> Result<Var<'a, T>> {
    if mask.masked() == 0 {
        return Err(config_err!("mim loss is undefined for an empty mask"));
    }
    let target = patch_targets(images, model.config.patch_size)?;
    if mask.len() != target.shape()[1] {
        return Err(dim_err!(
            "mask of length {} for {} patches",
            mask.len(),
            target.shape()[1]
        ));
    }
    let token = head.get(head_ids.mask_token);
    let x = ctx.tape.constant(images.clone());
    let feats = model.features(ctx, x, Some((&mask.bits, token)), Forward::Parallel)?;
    let s = feats.shape();
    let pred = feats.narrow(1, 1, s[1] - 1)?.linear(
        &head.get(head_ids.decoder_weight),
        Some(&head.get(head_ids.decoder_bias)),
    )?;
    pred.masked_mse(&target, &mask.bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::config::{StemKind, StemNorm, StemSpec, ViTConfig};
    use crate::vit::build_model;

    #[test]
    fn mask_counts() {
        let mut rng = Rng::new(0);
        assert_eq!(sample_mask(&mut rng, 196, 0.0).unwrap().masked(), 0);
        assert_eq!(sample_mask(&mut rng, 196, 0.4).unwrap().masked(), 78);
        assert!(sample_mask(&mut rng, 196, 1.0).is_err());
        assert!(sample_mask(&mut rng, 196, -0.1).is_err());
        let a = sample_mask(&mut Rng::new(5), 50, 0.3).unwrap();
        let b = sample_mask(&mut Rng::new(5), 50, 0.3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn token_masking_contract() {
        let mut rng = Rng::new(1);
        let x: Tensor<f64> = rng.normal_tensor(&[2, 4, 3], 1.0);
        let tok = Tensor::full(&[3], 9.0);
        let none = PatchMask::from_bits(vec![false; 4]);
        assert!(apply_mask_tokens(&x, &none, &tok).unwrap().bitwise_eq(&x));
        let most = PatchMask::from_bits(vec![true, true, false, true]);
        let y = apply_mask_tokens(&x, &most, &tok).unwrap();
        for bi in 0..2 {
            assert_eq!(&y.data()[(bi * 4 + 2) * 3..(bi * 4 + 3) * 3], &x.data()[(bi * 4 + 2) * 3..(bi * 4 + 3) * 3]);
            assert_eq!(&y.data()[(bi * 4) * 3..(bi * 4 + 1) * 3], &[9.0; 3]);
        }
        assert!(apply_mask_tokens(&x, &PatchMask::from_bits(vec![false; 3]), &tok).is_err());
    }

    #[test]
    fn pixel_masking_contract() {
        let mut rng = Rng::new(2);
        let x: Tensor<f32> = rng.normal_tensor(&[1, 3, 32, 32], 1.0);
        let none = PatchMask::from_bits(vec![false; 4]);
        assert!(apply_mask_pixels(&x, &none, 16).unwrap().bitwise_eq(&x));
        let all = PatchMask::from_bits(vec![true; 4]);
        assert!(apply_mask_pixels(&x, &all, 16).unwrap().data().iter().all(|&v| v == 0.0));
        let one = PatchMask::from_bits(vec![false, true, false, false]);
        let y = apply_mask_pixels(&x, &one, 16).unwrap();
        // Patch 1 covers rows 0..16, columns 16..32.
        assert_eq!(y.data()[5 * 32 + 20], 0.0);
        assert_eq!(y.data()[5 * 32 + 3], x.data()[5 * 32 + 3]);
        assert_eq!(y.data()[20 * 32 + 20], x.data()[20 * 32 + 20]);
    }

    #[test]
    fn commutation_by_stem() {
        let mut rng = Rng::new(3);
        let image: Tensor<f64> = rng.normal_tensor(&[1, 3, 64, 64], 1.0);
        let mask = sample_mask(&mut rng, 16, 0.4).unwrap();
        let token = Tensor::full(&[16], 0.5);
        for (kind, norm, exact) in [
            (StemKind::Hmlp, StemNorm::Ln, true),
            (StemKind::Hmlp, StemNorm::Bn, true),
            (StemKind::Linear, StemNorm::None, true),
            (StemKind::Conv, StemNorm::Bn, false),
        ] {
            let mut stem = StemModule::build(StemSpec::standard(kind, 16).with_norm(norm), &mut rng).unwrap();
            stem.randomize(&mut rng);
            let dev = commutation_check(&stem, &image, &mask, &token).unwrap();
            assert_eq!(dev == 0.0, exact, "{kind:?}/{norm:?}: {dev}");
        }
    }

    #[test]
    fn targets_are_normalized() {
        let mut rng = Rng::new(4);
        let x: Tensor<f64> = rng.uniform_tensor(&[2, 3, 32, 32], 0.0, 1.0);
        let t = patch_targets(&x, 16).unwrap();
        for row in t.data().chunks(768) {
            let mean = row.iter().sum::<f64>() / 768.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 768.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn empty_mask_is_a_config_error() {
        let cfg = ViTConfig::custom(8, 1, 2).with_image_size(32).with_classes(10);
        let mut rng = Rng::new(0);
        let model = build_model::<f64>(&cfg, &mut rng).unwrap();
        let head = MimHead::for_model(&model, &mut rng);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &model.params);
        let hb = Bindings::new(&tape, &head.params);
        let images = Tensor::zeros(&[1, 3, 32, 32]);
        let err = mim_loss(&ctx, &hb, &head, &model, &images, &PatchMask::from_bits(vec![false; 4])).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)));
    }
}
