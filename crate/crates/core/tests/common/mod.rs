//! Shared helpers for the integration and acceptance tests.
#![allow(dead_code)]

use vitkit::autograd::{Mode, Var};
use vitkit::config::{Layout, StemKind, StemNorm, StemSpec, ViTConfig};
use vitkit::gradcheck::{grad_check, GradCheckReport};
use vitkit::masking::{mim_loss, sample_mask, MimHead, PatchMask};
use vitkit::params::{Bindings, Ctx, ParamId, ParamStore, TensorKind};
use vitkit::stems::{StemModule, BN_EPS, LN_EPS};
use vitkit::vit::{build_model, ffn_forward, mhsa_forward, Forward, Model};
use vitkit::{Result, Rng, Tensor};

pub type T64 = Tensor<f64>;

/// Coordinates probed per input tensor.
pub const COORDS: usize = 6;

pub fn normal(rng: &mut Rng, shape: &[usize]) -> T64 {
    rng.normal_tensor(shape, 1.0)
}

/// Contracts `v` with fixed random weights so every output coordinate
/// contributes a distinct amount to the scalar loss.
pub fn project<'t>(v: Var<'t, f64>, weights: &T64) -> Result<Var<'t, f64>> {
    Ok(v.mul_const(weights)?.sum())
}

fn weights_for(rng: &mut Rng, shape: &[usize]) -> T64 {
    normal(rng, shape)
}

pub type Case = fn(&mut Rng) -> Result<GradCheckReport>;

/// Every differentiable op, each as a randomized gradient check.
pub fn layer_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("matmul", |rng| {
            let w = weights_for(rng, &[7, 3]);
            let inputs = [normal(rng, &[7, 5]), normal(rng, &[5, 3])];
            grad_check(|_, v| project(v[0].matmul(&v[1])?, &w), &inputs, COORDS, rng)
        }),
        ("linear", |rng| {
            let w = weights_for(rng, &[2, 3, 4]);
            let inputs = [normal(rng, &[2, 3, 5]), normal(rng, &[5, 4]), normal(rng, &[4])];
            grad_check(|_, v| project(v[0].linear(&v[1], Some(&v[2]))?, &w), &inputs, COORDS, rng)
        }),
        ("bmm", |rng| {
            let w = weights_for(rng, &[3, 4, 2]);
            let inputs = [normal(rng, &[3, 4, 5]), normal(rng, &[3, 5, 2]), normal(rng, &[3, 2, 5])];
            grad_check(
                |_, v| {
                    let a = project(v[0].bmm(&v[1], false)?, &w)?;
                    let b = project(v[0].bmm(&v[2], true)?, &w)?;
                    a.add(&b)
                },
                &inputs,
                COORDS,
                rng,
            )
        }),
        ("elementwise", |rng| {
            let w = weights_for(rng, &[2, 3, 4]);
            let f = [0.5, -1.5];
            let inputs = [normal(rng, &[2, 3, 4]), normal(rng, &[2, 3, 4]), normal(rng, &[3, 4]), normal(rng, &[4])];
            grad_check(
                |_, v| {
                    let y = v[0].mul(&v[1])?.sub(&v[0])?.add(&v[1])?;
                    let y = y.add_bcast(&v[2])?.mul_bcast(&v[3])?.scale(0.7).scale_samples(&f)?;
                    project(y, &w)
                },
                &inputs,
                COORDS,
                rng,
            )
        }),
        ("gelu", |rng| {
            let w = weights_for(rng, &[4, 6]);
            let inputs = [normal(rng, &[4, 6]).map(|v| 2.0 * v)];
            grad_check(|_, v| project(v[0].gelu(), &w), &inputs, COORDS, rng)
        }),
        ("softmax", |rng| {
            let w = weights_for(rng, &[3, 7]);
            let inputs = [normal(rng, &[3, 7])];
            grad_check(|_, v| project(v[0].softmax(), &w), &inputs, COORDS, rng)
        }),
        ("layer_norm", |rng| {
            let w = weights_for(rng, &[3, 4, 8]);
            let inputs = [normal(rng, &[3, 4, 8]), normal(rng, &[8]), normal(rng, &[8])];
            grad_check(|_, v| project(v[0].layer_norm(&v[1], &v[2], LN_EPS)?, &w), &inputs, COORDS, rng)
        }),
        ("batch_norm_2d/train", |rng| {
            let w = weights_for(rng, &[2, 3, 4, 4]);
            let inputs = [normal(rng, &[2, 3, 4, 4]), normal(rng, &[3]), normal(rng, &[3])];
            let (rm, rv) = ([0.0; 3], [1.0; 3]);
            grad_check(
                |_, v| project(v[0].batch_norm_2d(&v[1], &v[2], &rm, &rv, Mode::Train, BN_EPS)?.0, &w),
                &inputs,
                COORDS,
                rng,
            )
        }),
        ("batch_norm_2d/eval", |rng| {
            let w = weights_for(rng, &[2, 3, 4, 4]);
            let inputs = [normal(rng, &[2, 3, 4, 4]), normal(rng, &[3]), normal(rng, &[3])];
            let (rm, rv) = ([0.3, -0.1, 0.2], [0.5, 1.5, 2.0]);
            grad_check(
                |_, v| project(v[0].batch_norm_2d(&v[1], &v[2], &rm, &rv, Mode::Eval, BN_EPS)?.0, &w),
                &inputs,
                COORDS,
                rng,
            )
        }),
        ("conv2d/k2s2", |rng| {
            let w = weights_for(rng, &[1, 4, 4, 4]);
            let inputs = [normal(rng, &[1, 3, 8, 8]), normal(rng, &[4, 3, 2, 2]), normal(rng, &[4])];
            grad_check(|_, v| project(v[0].conv2d(&v[1], Some(&v[2]), 2, 0)?, &w), &inputs, COORDS, rng)
        }),
        ("conv2d/k3s2p1", |rng| {
            let w = weights_for(rng, &[2, 2, 3, 3]);
            let inputs = [normal(rng, &[2, 3, 6, 6]), normal(rng, &[2, 3, 3, 3])];
            grad_check(|_, v| project(v[0].conv2d(&v[1], None, 2, 1)?, &w), &inputs, COORDS, rng)
        }),
        ("reshape/permute/narrow", |rng| {
            let w = weights_for(rng, &[3, 1, 2]);
            let inputs = [normal(rng, &[2, 3, 4])];
            grad_check(
                |_, v| {
                    let y = v[0].permute(&[1, 2, 0])?.reshape(&[3, 4, 2])?.narrow(1, 2, 1)?;
                    project(y, &w)
                },
                &inputs,
                COORDS,
                rng,
            )
        }),
        ("tokens", |rng| {
            let w = weights_for(rng, &[2, 5, 12]);
            let inputs = [normal(rng, &[2, 3, 4, 8]), normal(rng, &[12]), normal(rng, &[12])];
            let mask = [true, false, false, true];
            grad_check(
                |_, v| {
                    let t = v[0].patchify(2)?.narrow(1, 0, 4)?;
                    let t = t.replace_rows(&mask, &v[1])?.prepend_token(&v[2])?;
                    project(t, &w)
                },
                &inputs,
                COORDS,
                rng,
            )
        }),
        ("cross_entropy", |rng| {
            let inputs = [normal(rng, &[4, 5]).map(|v| 3.0 * v)];
            let labels = [0, 4, 2, 2];
            grad_check(|_, v| v[0].cross_entropy(&labels), &inputs, COORDS, rng)
        }),
        ("masked_mse", |rng| {
            let target = normal(rng, &[2, 4, 3]);
            let inputs = [normal(rng, &[2, 4, 3])];
            let mask = [false, true, true, false];
            grad_check(|_, v| v[0].masked_mse(&target, &mask), &inputs, COORDS, rng)
        }),
        ("mhsa", |rng| block_case(rng, true)),
        ("ffn", |rng| block_case(rng, false)),
        ("stem/hmlp-ln", |rng| stem_case(rng, StemKind::Hmlp, StemNorm::Ln, Mode::Eval)),
        ("stem/hmlp-bn-train", |rng| stem_case(rng, StemKind::Hmlp, StemNorm::Bn, Mode::Train)),
        ("stem/conv-bn-eval", |rng| stem_case(rng, StemKind::Conv, StemNorm::Bn, Mode::Eval)),
        ("stem/linear-ln", |rng| stem_case(rng, StemKind::Linear, StemNorm::Ln, Mode::Eval)),
    ]
}

/// Binds every learnable tensor of `store` to the matching variable.
fn bind_all<'t>(bindings: &Bindings<'t, f64>, ids: &[ParamId], vars: &[Var<'t, f64>]) -> Result<()> {
    for (&id, &v) in ids.iter().zip(vars) {
        bindings.bind(id, v)?;
    }
    Ok(())
}

pub fn learnable(store: &ParamStore<f64>) -> (Vec<ParamId>, Vec<T64>) {
    store
        .ids()
        .filter(|&id| store.kind(id) == TensorKind::Param)
        .map(|id| (id, store.get(id).clone()))
        .unzip()
}

/// Perturbs every learnable tensor so checks do not sit at the benign init.
pub fn jitter(store: &mut ParamStore<f64>, rng: &mut Rng, std: f64) {
    for e in store.entries_mut() {
        if e.kind == TensorKind::Param {
            e.tensor.data_mut().iter_mut().for_each(|v| *v += std * rng.normal());
        }
    }
}

fn block_case(rng: &mut Rng, attn: bool) -> Result<GradCheckReport> {
    let cfg = ViTConfig::custom(12, 1, 3)
        .with_image_size(32)
        .with_classes(3)
        .with_layerscale(Some(0.5));
    let mut model: Model<f64> = build_model(&cfg, rng)?;
    jitter(&mut model.params, rng, 0.2);
    let block = model.layers[0][0].clone();
    let (ids, mut inputs) = learnable(&model.params);
    let w = weights_for(rng, &[2, 5, 12]);
    inputs.push(normal(rng, &[2, 5, 12]));
    let n = ids.len();
    grad_check(
        |probe, v| {
            let tape = probe.tape();
            let ctx = Ctx::eval(tape, &model.params);
            bind_all(&ctx.params, &ids, &v[..n])?;
            let out = if attn {
                mhsa_forward(&ctx, &block, v[n])?
            } else {
                ffn_forward(&ctx, &block, v[n])?
            };
            project(out, &w)
        },
        &inputs,
        COORDS,
        rng,
    )
}

fn stem_case(rng: &mut Rng, kind: StemKind, norm: StemNorm, mode: Mode) -> Result<GradCheckReport> {
    // Width 32 keeps every stage norm over at least 8 channels; over 2 the
    // normalized output is nearly constant and finite differences degrade.
    let mut stem = StemModule::<f64>::build(StemSpec::standard(kind, 32).with_norm(norm), rng)?;
    stem.randomize(rng);
    let (ids, mut inputs) = learnable(&stem.params);
    let w = weights_for(rng, &[2, 4, 32]);
    inputs.push(normal(rng, &[2, 3, 32, 32]));
    let n = ids.len();
    grad_check(
        |probe, v| {
            let tape = probe.tape();
            let ctx = Ctx::new(tape, &stem.params, mode, None);
            bind_all(&ctx.params, &ids, &v[..n])?;
            project(stem.stem.forward(&ctx, v[n])?, &w)
        },
        &inputs,
        COORDS,
        rng,
    )
}

/// Ti-width (d=192, 3 heads) model with two blocks on 32×32 inputs.
pub fn ti_two_block(layout: Layout, rng: &mut Rng) -> Result<Model<f64>> {
    let cfg = ViTConfig::tiny().with_layout(layout).with_image_size(32).with_classes(10);
    build_model(&cfg, rng)
}

/// Cross-entropy gradient check over every model parameter and the input.
pub fn model_case(rng: &mut Rng, coords: usize) -> Result<GradCheckReport> {
    let mut model = ti_two_block(Layout::new(2, 1), rng)?;
    jitter(&mut model.params, rng, 0.02);
    let (ids, mut inputs) = learnable(&model.params);
    inputs.push(normal(rng, &[2, 3, 32, 32]));
    let labels = [rng.below(10), rng.below(10)];
    let n = ids.len();
    grad_check(
        |probe, v| {
            let tape = probe.tape();
            let ctx = Ctx::eval(tape, &model.params);
            bind_all(&ctx.params, &ids, &v[..n])?;
            model.logits_var(&ctx, v[n], Forward::Sequential)?.cross_entropy(&labels)
        },
        &inputs,
        coords,
        rng,
    )
}

/// Masked pixel-regression gradient check over the model and the MIM head.
pub fn mim_case(rng: &mut Rng, coords: usize) -> Result<GradCheckReport> {
    let mut model = ti_two_block(Layout::new(1, 2), rng)?;
    jitter(&mut model.params, rng, 0.02);
    let head = MimHead::for_model(&model, rng);
    let (ids, mut inputs) = learnable(&model.params);
    let (head_ids, head_inputs) = learnable(&head.params);
    let n = ids.len();
    inputs.extend(head_inputs);
    let images = normal(rng, &[2, 3, 32, 32]);
    let mut mask = sample_mask(rng, 4, 0.4)?;
    if mask.masked() == 0 {
        mask = PatchMask::from_bits(vec![true, false, false, false]);
    }
    grad_check(
        |probe, v| {
            let tape = probe.tape();
            let ctx = Ctx::eval(tape, &model.params);
            let hb = Bindings::new(tape, &head.params);
            bind_all(&ctx.params, &ids, &v[..n])?;
            bind_all(&hb, &head_ids, &v[n..])?;
            mim_loss(&ctx, &hb, &head, &model, &images, &mask)
        },
        &inputs,
        coords,
        rng,
    )
}
