//! Sequential vs. parallel branch-execution throughput.
//!
//! In `par` mode the `P` branches of a layer run on a worker pool; in `seq`
//! mode they run in a loop on the calling thread. Both reduce branch outputs
//! in ascending branch order, so the two modes produce identical values.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::autograd::Tape;
use crate::config::{Layout, ViTConfig};
use crate::error::{config_err, Error, Result};
use crate::params::Ctx;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::{build_model, ffn_forward, mhsa_forward, Block, Model};

pub const CSV_HEADER: &str = "layout,exec,batch,ips,stddev,repeats";
pub const MIN_WARMUPS: usize = 2;
pub const MIN_REPEATS: usize = 5;
/// Maximum relative deviation tolerated between `seq` and `par` outputs.
pub const CONSISTENCY_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Exec {
    Seq,
    Par,
}

impl fmt::Display for Exec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Exec::Seq => "seq",
            Exec::Par => "par",
        })
    }
}

impl FromStr for Exec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq" => Ok(Exec::Seq),
            "par" => Ok(Exec::Par),
            _ => Err(config_err!("unknown exec mode {s:?} (expected seq or par)")),
        }
    }
}

/// Worker count: `max(P, available cores)`, capped by `VTC_THREADS`.
pub fn pool_size(branches: usize) -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    let size = branches.max(available);
    match std::env::var("VTC_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(cap) if cap > 0 => size.min(cap),
        _ => size,
    }
}

enum Half {
    Attn,
    Ffn,
}

fn branch_output<T: Scalar>(model: &Model<T>, block: &Block, x: &Tensor<T>, half: &Half) -> Result<Tensor<T>> {
    let tape = Tape::no_grad();
    let ctx = Ctx::eval(&tape, &model.params);
    let x = tape.constant(x.clone());
    let out = match half {
        Half::Attn => mhsa_forward(&ctx, block, x)?,
        Half::Ffn => ffn_forward(&ctx, block, x)?,
    };
    Ok((*out.value()).clone())
}

/// `x + Σ_p outs[p]`, summed in ascending branch order.
fn residual_sum<T: Scalar>(x: &Tensor<T>, outs: Vec<Tensor<T>>) -> Tensor<T> {
    let mut outs = outs.into_iter();
    let mut sum = outs.next().expect("at least one branch").into_data();
    for o in outs {
        for (s, &v) in sum.iter_mut().zip(o.data()) {
            *s += v;
        }
    }
    let data = x.data().iter().zip(&sum).map(|(&a, &b)| a + b).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

/// Eval-mode logits with the branches of each layer dispatched per `exec`.
pub fn branch_forward<T: Scalar>(
    model: &Model<T>,
    images: &Tensor<T>,
    exec: Exec,
    pool: &rayon::ThreadPool,
) -> Result<Tensor<T>> {
    let mut x = {
        let tape = Tape::no_grad();
        let ctx = Ctx::eval(&tape, &model.params);
        let v = model.embed(&ctx, tape.constant(images.clone()), None)?;
        (*v.value()).clone()
    };
    for layer in &model.layers {
        for half in [Half::Attn, Half::Ffn] {
            let outs: Vec<Tensor<T>> = match exec {
                Exec::Seq => layer
                    .iter()
                    .map(|b| branch_output(model, b, &x, &half))
                    .collect::<Result<_>>()?,
                Exec::Par => pool.install(|| {
                    layer
                        .par_iter()
                        .map(|b| branch_output(model, b, &x, &half))
                        .collect::<Result<_>>()
                })?,
            };
            x = residual_sum(&x, outs);
        }
    }
    let tape = Tape::no_grad();
    let ctx = Ctx::eval(&tape, &model.params);
    let logits = model.classify(&ctx, tape.constant(x))?;
    Ok((*logits.value()).clone())
}

/// Largest elementwise `|a − b| / max(|b|, 1e-12)`.
pub fn max_rel_dev<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs().as_f64() / y.abs().as_f64().max(1e-12))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub layout: String,
    pub exec: Exec,
    pub batch: usize,
    pub ips: f64,
    pub stddev: f64,
    pub repeats: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Largest seq/par relative output deviation over all configurations.
    pub max_rel_deviation: f64,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{},{}", r.layout, r.exec, r.batch, r.ips, r.stddev, r.repeats);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub layouts: Vec<Layout>,
    pub execs: Vec<Exec>,
    pub batch_sizes: Vec<usize>,
    pub warmups: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl BenchConfig {
    pub fn new(layouts: Vec<Layout>, batch_sizes: Vec<usize>) -> Self {
        BenchConfig {
            layouts,
            execs: vec![Exec::Seq, Exec::Par],
            batch_sizes,
            warmups: MIN_WARMUPS,
            repeats: MIN_REPEATS,
            seed: 0,
        }
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Times eval forwards of `base` under every layout × exec × batch size and
/// checks that `seq` and `par` outputs agree.
pub fn bench<T: Scalar>(base: &ViTConfig, cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.warmups < MIN_WARMUPS || cfg.repeats < MIN_REPEATS {
        return Err(config_err!(
            "bench needs at least {MIN_WARMUPS} warmups and {MIN_REPEATS} timed repeats"
        ));
    }
    if cfg.layouts.is_empty() || cfg.execs.is_empty() || cfg.batch_sizes.contains(&0) {
        return Err(config_err!("bench needs layouts, exec modes and positive batch sizes"));
    }
    if let Some(l) = cfg.layouts.iter().find(|l| l.branches < 2) {
        if cfg.execs.contains(&Exec::Par) {
            return Err(config_err!("par mode needs at least two branches, layout {l} has one"));
        }
    }
    let mut report = BenchReport::default();
    for (li, &layout) in cfg.layouts.iter().enumerate() {
        let config = base.clone().with_layout(layout);
        let model: Model<T> = build_model(&config, &mut Rng::stream(cfg.seed, li as u64))?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(pool_size(layout.branches))
            .build()
            .map_err(|e| Error::Evaluation(format!("cannot start worker pool: {e}")))?;
        for &batch in &cfg.batch_sizes {
            let mut rng = Rng::stream(cfg.seed, 1000 + batch as u64);
            let images: Tensor<T> =
                rng.normal_tensor(&[batch, config.in_channels, config.image_size, config.image_size], 1.0);
            let mut outputs = Vec::new();
            for &exec in &cfg.execs {
                let mut out = None;
                for _ in 0..cfg.warmups {
                    out = Some(branch_forward(&model, &images, exec, &pool)?);
                }
                let mut ips = Vec::with_capacity(cfg.repeats);
                for _ in 0..cfg.repeats {
                    let start = Instant::now();
                    std::hint::black_box(branch_forward(&model, &images, exec, &pool)?);
                    ips.push(batch as f64 / start.elapsed().as_secs_f64().max(1e-9));
                }
                let (mean, stddev) = mean_std(&ips);
                report.rows.push(BenchRow {
                    layout: layout.to_string(),
                    exec,
                    batch,
                    ips: mean,
                    stddev,
                    repeats: cfg.repeats,
                });
                outputs.push(out.expect("at least one warmup"));
            }
            for out in &outputs[1..] {
                let dev = max_rel_dev(out, &outputs[0]);
                report.max_rel_deviation = report.max_rel_deviation.max(dev);
                if dev > CONSISTENCY_TOL {
                    return Err(Error::Consistency(format!(
                        "layout {layout}, batch {batch}: seq and par outputs differ by {dev:e} relative"
                    )));
                }
            }
        }
    }
    Ok(report)
}
