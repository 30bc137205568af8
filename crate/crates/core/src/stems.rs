//! Patch pre-processing front ends.
//!
//! Three stems map `[b, c, H, W]` images to `[b, T, d]` token sequences with
//! `T = (H/16)·(W/16)`:
//!
//! * **linear**: each 16×16 patch flattened and projected to `d`.
//! * **hmlp**: conv(k4 s4) → norm → GELU → conv(k2 s2) → norm → GELU →
//!   conv(k2 s2) → norm, widths `d/4, d/4, d`. The kernels tile each 16×16
//!   patch exactly, so patches never exchange information.
//! * **conv**: four overlapping 3×3 stride-2 convolutions
//!   (`d/8, d/4, d/2, d`), norm + GELU after all but the last (norm only).
//!
//! Batch norm in train mode couples patches through batch statistics; the
//! independence and masking-commutation properties only hold in eval mode
//! or with layer norm.

use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::config::{Nonlinearity, StemKind, StemNorm, StemSpec};
use crate::error::{dim_err, Result};
use crate::kernels::ConvGeom;
use crate::params::{BnUpdate, Ctx, ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;
pub const BN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub enum NormParams {
    Batch {
        weight: ParamId,
        bias: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
    },
    Layer {
        weight: ParamId,
        bias: ParamId,
    },
}

impl NormParams {
    fn build<T: Scalar>(kind: StemNorm, channels: usize, store: &mut ParamStore<T>, prefix: &str) -> Option<Self> {
        match kind {
            StemNorm::None => None,
            StemNorm::Ln => Some(NormParams::Layer {
                weight: store.add_param(format!("{prefix}.weight"), Tensor::ones(&[channels])),
                bias: store.add_param(format!("{prefix}.bias"), Tensor::zeros(&[channels])),
            }),
            StemNorm::Bn => Some(NormParams::Batch {
                weight: store.add_param(format!("{prefix}.weight"), Tensor::ones(&[channels])),
                bias: store.add_param(format!("{prefix}.bias"), Tensor::zeros(&[channels])),
                running_mean: store.add_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[channels])),
                running_var: store.add_buffer(format!("{prefix}.running_var"), Tensor::ones(&[channels])),
            }),
        }
    }

    /// Normalizes a `[b, c, h, w]` map: batch norm per channel, layer norm
    /// per spatial position across channels.
    fn apply_map<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, x: Var<'a, T>) -> Result<Var<'a, T>> {
        match *self {
            NormParams::Layer { weight, bias } => x
                .permute(&[0, 2, 3, 1])?
                .layer_norm(&ctx.p(weight), &ctx.p(bias), T::of(LN_EPS))?
                .permute(&[0, 3, 1, 2]),
            NormParams::Batch {
                weight,
                bias,
                running_mean,
                running_var,
            } => {
                let store = ctx.params.store();
                let (y, stats) = x.batch_norm_2d(
                    &ctx.p(weight),
                    &ctx.p(bias),
                    store.get(running_mean).data(),
                    store.get(running_var).data(),
                    ctx.mode,
                    T::of(BN_EPS),
                )?;
                if let Some(stats) = stats {
                    ctx.record_bn(BnUpdate {
                        running_mean,
                        running_var,
                        stats,
                    });
                }
                Ok(y)
            }
        }
    }

    /// Normalizes `[b, T, d]` tokens over the width axis.
    fn apply_tokens<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, x: Var<'a, T>) -> Result<Var<'a, T>> {
        let s = x.shape();
        let (b, t, d) = (s[0], s[1], s[2]);
        match self {
            NormParams::Layer { .. } => {
                let m = x.reshape(&[b, t, 1, d])?.permute(&[0, 3, 1, 2])?;
                self.apply_map(ctx, m)?.permute(&[0, 2, 3, 1])?.reshape(&[b, t, d])
            }
            NormParams::Batch { .. } => {
                let m = x.permute(&[0, 2, 1])?.reshape(&[b, d, t, 1])?;
                self.apply_map(ctx, m)?.reshape(&[b, d, t])?.permute(&[0, 2, 1])
            }
        }
    }
}

/// Shape of one convolutional stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StagePlan {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Whether the nonlinearity follows this stage's norm.
    pub activated: bool,
}

impl StagePlan {
    pub fn geom(&self, batch: usize, h: usize, w: usize) -> ConvGeom {
        ConvGeom {
            batch,
            cin: self.cin,
            h,
            w,
            cout: self.cout,
            kh: self.kernel,
            kw: self.kernel,
            stride: self.stride,
            pad: self.pad,
        }
    }
}

/// Convolution stages of the multi-stage stems; empty for the linear stem.
pub fn stage_plan(spec: &StemSpec) -> Vec<StagePlan> {
    let (c, d) = (spec.in_channels, spec.width);
    let stage = |cin, cout, kernel, stride, pad, activated| StagePlan {
        cin,
        cout,
        kernel,
        stride,
        pad,
        activated,
    };
    match spec.kind {
        StemKind::Linear => Vec::new(),
        StemKind::Hmlp => vec![
            stage(c, d / 4, 4, 4, 0, true),
            stage(d / 4, d / 4, 2, 2, 0, true),
            stage(d / 4, d, 2, 2, 0, false),
        ],
        StemKind::Conv => vec![
            stage(c, d / 8, 3, 2, 1, true),
            stage(d / 8, d / 4, 3, 2, 1, true),
            stage(d / 4, d / 2, 3, 2, 1, true),
            stage(d / 2, d, 3, 2, 1, false),
        ],
    }
}

#[derive(Debug, Clone)]
pub struct ConvStage {
    pub plan: StagePlan,
    pub kernel: ParamId,
    pub bias: ParamId,
    pub norm: Option<NormParams>,
}

#[derive(Debug, Clone)]
pub struct LinearStem {
    /// `[c·p·p, d]`, rows ordered `(channel, row, col)` within the patch.
    pub weight: ParamId,
    pub bias: ParamId,
    pub norm: Option<NormParams>,
}

#[derive(Debug, Clone)]
pub struct Stem {
    pub spec: StemSpec,
    pub linear: Option<LinearStem>,
    pub stages: Vec<ConvStage>,
}

impl Stem {
    /// Registers the stem's tensors under `prefix` in `store`.
    pub fn build<T: Scalar>(spec: StemSpec, store: &mut ParamStore<T>, rng: &mut Rng, prefix: &str) -> Result<Self> {
        spec.validate()?;
        let d = spec.width;
        if spec.kind == StemKind::Linear {
            let fan_in = spec.in_channels * spec.patch_size * spec.patch_size;
            let weight = store.add_param(
                format!("{prefix}.proj.weight"),
                Tensor::from_fn(&[fan_in, d], |_| T::of(rng.trunc_normal(INIT_STD))),
            );
            let bias = store.add_param(format!("{prefix}.proj.bias"), Tensor::zeros(&[d]));
            let norm = NormParams::build(spec.norm, d, store, &format!("{prefix}.norm"));
            return Ok(Stem {
                spec,
                linear: Some(LinearStem { weight, bias, norm }),
                stages: Vec::new(),
            });
        }
        let stages = stage_plan(&spec)
            .into_iter()
            .enumerate()
            .map(|(i, plan)| {
                let k = plan.kernel;
                let kernel = store.add_param(
                    format!("{prefix}.{i}.conv.weight"),
                    Tensor::from_fn(&[plan.cout, plan.cin, k, k], |_| T::of(rng.trunc_normal(INIT_STD))),
                );
                let bias = store.add_param(format!("{prefix}.{i}.conv.bias"), Tensor::zeros(&[plan.cout]));
                let norm = NormParams::build(spec.norm, plan.cout, store, &format!("{prefix}.{i}.norm"));
                ConvStage {
                    plan,
                    kernel,
                    bias,
                    norm,
                }
            })
            .collect();
        Ok(Stem {
            spec,
            linear: None,
            stages,
        })
    }

    fn check_input<T: Scalar>(&self, images: &Var<'_, T>) -> Result<()> {
        let s = images.shape();
        let p = self.spec.patch_size;
        if s.len() != 4 || s[1] != self.spec.in_channels || s[2] % p != 0 || s[3] % p != 0 {
            return Err(dim_err!(
                "stem expects [b, {}, H, W] with H, W divisible by {p}, got {:?}",
                self.spec.in_channels,
                s
            ));
        }
        Ok(())
    }

    /// Maps `[b, c, H, W]` images to `[b, T, d]` tokens.
    pub fn forward<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, images: Var<'a, T>) -> Result<Var<'a, T>> {
        self.check_input(&images)?;
        match &self.linear {
            Some(lin) => linear_stem(ctx, lin, &self.spec, images),
            None => staged_stem(ctx, &self.stages, &self.spec, images),
        }
    }
}

/// Flattened-patch projection, with optional token norm and GELU.
pub fn linear_stem<'a, T: Scalar>(
    ctx: &Ctx<'a, T>,
    stem: &LinearStem,
    spec: &StemSpec,
    images: Var<'a, T>,
) -> Result<Var<'a, T>> {
    let mut x = images
        .patchify(spec.patch_size)?
        .linear(&ctx.p(stem.weight), Some(&ctx.p(stem.bias)))?;
    if let Some(norm) = &stem.norm {
        x = norm.apply_tokens(ctx, x)?;
    }
    if spec.nonlinearity == Nonlinearity::Gelu {
        x = x.gelu();
    }
    Ok(x)
}

/// Conv → norm → GELU stages (the hmlp and conv stems), flattened to tokens.
pub fn staged_stem<'a, T: Scalar>(
    ctx: &Ctx<'a, T>,
    stages: &[ConvStage],
    spec: &StemSpec,
    images: Var<'a, T>,
) -> Result<Var<'a, T>> {
    let mut x = images;
    for stage in stages {
        x = x.conv2d(&ctx.p(stage.kernel), Some(&ctx.p(stage.bias)), stage.plan.stride, stage.plan.pad)?;
        if let Some(norm) = &stage.norm {
            x = norm.apply_map(ctx, x)?;
        }
        if stage.plan.activated && spec.nonlinearity == Nonlinearity::Gelu {
            x = x.gelu();
        }
    }
    let s = x.shape();
    x.reshape(&[s[0], s[1], s[2] * s[3]])?.permute(&[0, 2, 1])
}

/// A stem with its own parameters, for standalone verification.
#[derive(Debug, Clone)]
pub struct StemModule<T: Scalar> {
    pub stem: Stem,
    pub params: ParamStore<T>,
}

impl<T: Scalar> StemModule<T> {
    pub fn build(spec: StemSpec, rng: &mut Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        let stem = Stem::build(spec, &mut params, rng, "stem")?;
        Ok(StemModule { stem, params })
    }

    pub fn spec(&self) -> &StemSpec {
        &self.stem.spec
    }

    /// Eval-mode tokens for `images`.
    pub fn tokens(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        let ctx = Ctx::eval(&tape, &self.params);
        let out = self.stem.forward(&ctx, tape.constant(images.clone()))?;
        Ok((*out.value()).clone())
    }

    /// Randomizes every parameter and running statistic so verification
    /// does not depend on the benign default initialization.
    pub fn randomize(&mut self, rng: &mut Rng) {
        for entry in self.params.entries_mut() {
            let is_var = entry.name.ends_with("running_var");
            for v in entry.tensor.data_mut() {
                *v = if is_var {
                    T::of(0.5 + rng.uniform())
                } else {
                    T::of(rng.normal() * 0.5)
                };
            }
        }
    }

    /// Sets every tensor to zero (running variances to one).
    pub fn zero(&mut self) {
        for entry in self.params.entries_mut() {
            let fill = if entry.name.ends_with("running_var") { T::one() } else { T::zero() };
            entry.tensor.data_mut().iter_mut().for_each(|v| *v = fill);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IndependenceReport {
    pub independent: bool,
    pub max_leakage: f64,
    pub trials: usize,
}

/// Perturbs one random 16×16 patch per trial and measures how much every
/// other token moves. The stem is evaluated in eval mode.
pub fn patch_independence_check<T: Scalar>(
    stem: &StemModule<T>,
    image_size: usize,
    rng: &mut Rng,
    trials: usize,
) -> Result<IndependenceReport> {
    let spec = stem.spec();
    let p = spec.patch_size;
    if image_size % p != 0 {
        return Err(dim_err!("image size {image_size} not divisible by patch size {p}"));
    }
    let grid = image_size / p;
    let (c, d) = (spec.in_channels, spec.width);
    let mut max_leakage = 0.0f64;
    for _ in 0..trials {
        let image: Tensor<T> = rng.normal_tensor(&[1, c, image_size, image_size], 1.0);
        let target = rng.below(grid * grid);
        let (py, px) = (target / grid, target % grid);
        let mut perturbed = image.clone();
        {
            let data = perturbed.data_mut();
            for ch in 0..c {
                for y in py * p..(py + 1) * p {
                    for x in px * p..(px + 1) * p {
                        data[(ch * image_size + y) * image_size + x] += T::of(rng.normal());
                    }
                }
            }
        }
        let before = stem.tokens(&image)?;
        let after = stem.tokens(&perturbed)?;
        for tok in (0..grid * grid).filter(|&t| t != target) {
            for j in 0..d {
                let i = tok * d + j;
                max_leakage = max_leakage.max((before.data()[i] - after.data()[i]).abs().as_f64());
            }
        }
    }
    Ok(IndependenceReport {
        independent: max_leakage == 0.0,
        max_leakage,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn module(kind: StemKind, norm: StemNorm, d: usize) -> StemModule<f64> {
        let mut rng = Rng::new(11);
        let mut m = StemModule::build(StemSpec::standard(kind, d).with_norm(norm), &mut rng).unwrap();
        m.randomize(&mut rng);
        m
    }

    #[test]
    fn token_count_for_every_stem() {
        for kind in [StemKind::Linear, StemKind::Hmlp, StemKind::Conv] {
            let m = module(kind, StemNorm::Ln, 16);
            let x = Tensor::zeros(&[2, 3, 48, 32]);
            assert_eq!(m.tokens(&x).unwrap().shape(), &[2, 6, 16], "{kind:?}");
        }
    }

    #[test]
    fn hmlp_stage_extents_at_224() {
        let spec = StemSpec::standard(StemKind::Hmlp, 768);
        let mut h = 224;
        let mut extents = Vec::new();
        for s in stage_plan(&spec) {
            let g = s.geom(1, h, h);
            h = g.out_h();
            extents.push((h, s.cout));
        }
        assert_eq!(extents, vec![(56, 192), (28, 192), (14, 768)]);
    }

    #[test]
    fn conv_stem_extents_at_224() {
        let spec = StemSpec::standard(StemKind::Conv, 768);
        let mut h = 224;
        for s in stage_plan(&spec) {
            h = s.geom(1, h, h).out_h();
        }
        assert_eq!(h, 14);
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let m = module(StemKind::Linear, StemNorm::None, 8);
        assert!(m.tokens(&Tensor::zeros(&[1, 3, 20, 16])).is_err());
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_tokens() {
        let mut rng = Rng::new(2);
        let m = StemModule::<f64>::build(StemSpec::standard(StemKind::Linear, 8), &mut rng).unwrap();
        let t = m.tokens(&Tensor::zeros(&[1, 3, 32, 32])).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_conv_stem_gives_zero_tokens() {
        let mut m = module(StemKind::Conv, StemNorm::Bn, 16);
        m.zero();
        let mut rng = Rng::new(5);
        let x = rng.normal_tensor(&[1, 3, 32, 32], 1.0);
        assert!(m.tokens(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn independence_by_stem() {
        let mut rng = Rng::new(9);
        let hmlp = patch_independence_check(&module(StemKind::Hmlp, StemNorm::Ln, 16), 48, &mut rng, 5).unwrap();
        assert!(hmlp.independent, "{hmlp:?}");
        let bn = patch_independence_check(&module(StemKind::Hmlp, StemNorm::Bn, 16), 48, &mut rng, 5).unwrap();
        assert!(bn.independent);
        let lin = patch_independence_check(&module(StemKind::Linear, StemNorm::None, 16), 48, &mut rng, 5).unwrap();
        assert!(lin.independent);
        let conv = patch_independence_check(&module(StemKind::Conv, StemNorm::Ln, 16), 48, &mut rng, 5).unwrap();
        assert!(!conv.independent && conv.max_leakage > 0.0);
    }
}
