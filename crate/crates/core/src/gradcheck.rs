//! Finite-difference verification of reverse-mode gradients.

use std::marker::PhantomData;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Ctx, TensorKind};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vit::{Forward, Model};

/// Acceptance threshold on the worst relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Relative step: `h = STEP · max(|x|, 1)`.
pub const STEP: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// Gradients below this fraction of the largest analytic gradient magnitude
/// are compared absolutely against that fraction. Central differences carry
/// round-off of order `ε·|f| / h`, which swamps structurally zero gradients
/// (e.g. a bias feeding a train-mode batch norm).
pub const SCALE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// The tape a checked function records on.
///
/// Carries the environment lifetime `'env` so closures may bind borrowed
/// state (parameter stores, models) next to tape variables: the type implies
/// `'env: 't`.
#[derive(Clone, Copy)]
pub struct Probe<'t, 'env> {
    tape: &'t Tape<f64>,
    _env: PhantomData<&'t &'env ()>,
}

impl<'t, 'env> Probe<'t, 'env> {
    pub fn tape(self) -> &'t Tape<f64> {
        self.tape
    }
}

/// Compares reverse-mode gradients of the scalar function `f` against central
/// differences at `inputs`.
///
/// At most `max_coords` coordinates per input are probed, chosen with `rng`;
/// smaller inputs are checked exhaustively.
pub fn grad_check<'env, F>(f: F, inputs: &[Tensor<f64>], max_coords: usize, rng: &mut Rng) -> Result<GradCheckReport>
where
    F: for<'t> Fn(Probe<'t, 'env>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::no_grad();
        let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let loss = f(Probe { tape: &tape, _env: PhantomData }, &vars)?;
        let v = loss.value();
        if v.numel() != 1 {
            return Err(Error::Evaluation(format!("loss has shape {:?}", v.shape())));
        }
        let v = v.data()[0];
        if !v.is_finite() {
            return Err(Error::Evaluation(format!("non-finite loss {v}")));
        }
        Ok(v)
    };

    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|x| tape.var(x.clone())).collect();
        let loss = f(Probe { tape: &tape, _env: PhantomData }, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, x)| grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]))
            .collect()
    };

    let scale = analytic.iter().flatten().fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = REL_FLOOR.max(SCALE_FLOOR * scale);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = if input.numel() <= max_coords {
            (0..input.numel()).collect()
        } else {
            (0..max_coords).map(|_| rng.below(input.numel())).collect()
        };
        for i in coords {
            let x0 = input.data()[i];
            let h = STEP * x0.abs().max(1.0);
            probe[which].data_mut()[i] = x0 + h;
            let up = eval(&probe)?;
            probe[which].data_mut()[i] = x0 - h;
            let down = eval(&probe)?;
            probe[which].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            let err = rel_err(analytic[which][i], numeric, floor);
            report.max_rel_err = report.max_rel_err.max(err);
            report.coords_checked += 1;
        }
    }
    Ok(report)
}

/// Cross-entropy check of a whole model: every learnable tensor and the
/// input images.
pub fn check_model(
    model: &Model<f64>,
    images: &Tensor<f64>,
    labels: &[usize],
    exec: Forward,
    max_coords: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    let store = &model.params;
    let ids: Vec<_> = store.ids().filter(|&id| store.kind(id) == TensorKind::Param).collect();
    let mut inputs: Vec<_> = ids.iter().map(|&id| store.get(id).clone()).collect();
    inputs.push(images.clone());
    let n = ids.len();
    grad_check(
        |probe, v| {
            let ctx = Ctx::eval(probe.tape(), store);
            for (&id, &var) in ids.iter().zip(&v[..n]) {
                ctx.params.bind(id, var)?;
            }
            model.logits_var(&ctx, v[n], exec)?.cross_entropy(labels)
        },
        &inputs,
        max_coords,
        rng,
    )
}
