//! Closed-form parameter and FLOP accounting.
//!
//! FLOPs follow the multiply-accumulate convention: one MAC counts as one
//! FLOP. Matrix products and convolutions are counted; biases, norms,
//! softmax and GELU are not. Counts are per image.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::autograd::Tape;
use crate::config::{StemKind, StemNorm, ViTConfig};
use crate::error::{config_err, Result};
use crate::params::Ctx;
use crate::scalar::Scalar;
use crate::stems::stage_plan;
use crate::tensor::Tensor;
use crate::vit::{Forward, Model};

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Component {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCount {
    pub layer: usize,
    pub branches: usize,
    pub mhsa_params: u64,
    pub ffn_params: u64,
    pub norm_params: u64,
    pub layerscale_params: u64,
    pub mhsa_flops: u64,
    pub ffn_flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub schema_version: String,
    pub convention: String,
    pub layout: String,
    pub width: usize,
    pub heads: usize,
    pub stem: StemKind,
    pub resolution: usize,
    /// Tokens seen by the blocks, class token included.
    pub token_count: usize,
    pub params_total: u64,
    pub params_by_component: BTreeMap<String, u64>,
    pub flops_total: u64,
    pub flops_by_component: BTreeMap<String, u64>,
    pub components: Vec<Component>,
    pub per_layer: Vec<LayerCount>,
}

/// Per-block counts at width `d` with `t` tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockCount {
    pub mhsa_params: u64,
    pub ffn_params: u64,
    pub norm_params: u64,
    pub layerscale_params: u64,
    pub mhsa_flops: u64,
    pub ffn_flops: u64,
}

impl BlockCount {
    pub fn new(d: u64, t: u64, layerscale: bool) -> Self {
        BlockCount {
            mhsa_params: 4 * d * d + 4 * d,
            ffn_params: 8 * d * d + 5 * d,
            norm_params: 4 * d,
            layerscale_params: if layerscale { 2 * d } else { 0 },
            mhsa_flops: 4 * t * d * d + 2 * t * t * d,
            ffn_flops: 8 * t * d * d,
        }
    }

    pub fn params(&self) -> u64 {
        self.mhsa_params + self.ffn_params + self.norm_params + self.layerscale_params
    }

    pub fn flops(&self) -> u64 {
        self.mhsa_flops + self.ffn_flops
    }
}

/// Parameters and per-image MACs of the stem at `resolution`.
pub fn stem_cost(config: &ViTConfig, resolution: usize) -> (u64, u64) {
    let spec = config.stem_spec();
    let d = spec.width as u64;
    let norm = |channels: u64| match spec.norm {
        StemNorm::None => 0,
        StemNorm::Bn | StemNorm::Ln => 2 * channels,
    };
    if spec.kind == StemKind::Linear {
        let fan_in = (spec.in_channels * spec.patch_size * spec.patch_size) as u64;
        let tokens = ((resolution / spec.patch_size) * (resolution / spec.patch_size)) as u64;
        return (fan_in * d + d + norm(d), tokens * fan_in * d);
    }
    let (mut params, mut flops) = (0, 0);
    let mut side = resolution;
    for plan in stage_plan(&spec) {
        let g = plan.geom(1, side, side);
        params += (plan.cout * g.patch_len() + plan.cout) as u64 + norm(plan.cout as u64);
        flops += g.macs();
        side = g.out_h();
    }
    (params, flops)
}

/// Full parameter and FLOP breakdown of `config` at `resolution`.
pub fn complexity(config: &ViTConfig, resolution: usize) -> Result<ComplexityReport> {
    let config = config.clone().with_image_size(resolution);
    config.validate()?;
    let d = config.width as u64;
    let t = (config.num_patches() + 1) as u64;
    let classes = config.num_classes as u64;
    let block = BlockCount::new(d, t, config.layerscale.is_some());
    let blocks = config.total_blocks() as u64;
    let (stem_params, stem_flops) = stem_cost(&config, resolution);
    let components = vec![
        Component {
            name: "stem".into(),
            params: stem_params,
            flops: stem_flops,
        },
        Component {
            name: "pos_cls".into(),
            params: t * d + d,
            flops: 0,
        },
        Component {
            name: "mhsa".into(),
            params: blocks * block.mhsa_params,
            flops: blocks * block.mhsa_flops,
        },
        Component {
            name: "ffn".into(),
            params: blocks * block.ffn_params,
            flops: blocks * block.ffn_flops,
        },
        Component {
            name: "block_norms".into(),
            params: blocks * block.norm_params,
            flops: 0,
        },
        Component {
            name: "layerscale".into(),
            params: blocks * block.layerscale_params,
            flops: 0,
        },
        Component {
            name: "final_norm".into(),
            params: 2 * d,
            flops: 0,
        },
        Component {
            name: "head".into(),
            params: d * classes + classes,
            flops: d * classes,
        },
    ];
    let p = config.branches as u64;
    let per_layer = (0..config.depth)
        .map(|layer| LayerCount {
            layer,
            branches: config.branches,
            mhsa_params: p * block.mhsa_params,
            ffn_params: p * block.ffn_params,
            norm_params: p * block.norm_params,
            layerscale_params: p * block.layerscale_params,
            mhsa_flops: p * block.mhsa_flops,
            ffn_flops: p * block.ffn_flops,
        })
        .collect();
    Ok(ComplexityReport {
        schema_version: SCHEMA_VERSION.into(),
        convention: "MAC".into(),
        layout: config.layout().to_string(),
        width: config.width,
        heads: config.heads,
        stem: config.stem_kind,
        resolution,
        token_count: t as usize,
        params_total: components.iter().map(|c| c.params).sum(),
        params_by_component: components.iter().map(|c| (c.name.clone(), c.params)).collect(),
        flops_total: components.iter().map(|c| c.flops).sum(),
        flops_by_component: components.iter().map(|c| (c.name.clone(), c.flops)).collect(),
        components,
        per_layer,
    })
}

/// Breakdown at the configured resolution.
pub fn count_params(config: &ViTConfig) -> Result<ComplexityReport> {
    complexity(config, config.image_size)
}

pub fn count_flops(config: &ViTConfig, resolution: usize) -> Result<ComplexityReport> {
    complexity(config, resolution)
}

impl ComplexityReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "layout {}  width {}  heads {}  stem {:?}  resolution {}  tokens {}  (FLOPs in MACs)\n",
            self.layout, self.width, self.heads, self.stem, self.resolution, self.token_count
        );
        let _ = writeln!(out, "{:<12} {:>15} {:>18}", "component", "params", "flops");
        for c in &self.components {
            let _ = writeln!(out, "{:<12} {:>15} {:>18}", c.name, c.params, c.flops);
        }
        let _ = writeln!(out, "{:<12} {:>15} {:>18}", "total", self.params_total, self.flops_total);
        let _ = writeln!(
            out,
            "{:<12} {:>14.2}M {:>17.3}G",
            "",
            self.params_total as f64 / 1e6,
            self.flops_total as f64 / 1e9
        );
        out
    }
}

/// MACs per image counted by instrumenting every matrix product and
/// convolution of one eval forward over `images`.
pub fn flops_oracle<T: Scalar>(model: &Model<T>, images: &Tensor<T>, exec: Forward) -> Result<u64> {
    let tape = Tape::no_grad();
    let ctx = Ctx::eval(&tape, &model.params);
    model.logits_var(&ctx, tape.constant(images.clone()), exec)?;
    let batch = images.shape()[0] as u64;
    Ok(tape.macs() / batch)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Depth,
    Width,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub value: usize,
    pub params: u64,
    pub block_params: u64,
    pub flops: u64,
    pub block_flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingTable {
    pub axis: Axis,
    pub rows: Vec<ScalingRow>,
    /// R² of block params (and FLOPs) against depth, or against width².
    pub r2_params: f64,
    pub r2_flops: f64,
}

/// Coefficient of determination of the least-squares line through points.
pub fn r_squared(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return 1.0;
    }
    sxy * sxy / (sxx * syy)
}

/// Sweeps depth or width from `base`, keeping the head dimension fixed when
/// sweeping width.
pub fn scaling_table(base: &ViTConfig, axis: Axis, values: &[usize]) -> Result<ScalingTable> {
    if values.len() < 2 {
        return Err(config_err!("a scaling sweep needs at least two values"));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let mut cfg = base.clone();
        match axis {
            Axis::Depth => cfg.depth = v,
            Axis::Width => {
                cfg.heads = (v / base.head_dim()).max(1);
                cfg.width = v;
            }
        }
        let r = count_params(&cfg)?;
        let block = |m: &BTreeMap<String, u64>| -> u64 {
            ["mhsa", "ffn", "block_norms", "layerscale"].iter().map(|k| m[*k]).sum()
        };
        rows.push(ScalingRow {
            value: v,
            params: r.params_total,
            block_params: block(&r.params_by_component),
            flops: r.flops_total,
            block_flops: block(&r.flops_by_component),
        });
    }
    let xs: Vec<f64> = rows
        .iter()
        .map(|r| match axis {
            Axis::Depth => r.value as f64,
            Axis::Width => (r.value as f64).powi(2),
        })
        .collect();
    let ps: Vec<f64> = rows.iter().map(|r| r.block_params as f64).collect();
    let fs: Vec<f64> = rows.iter().map(|r| r.block_flops as f64).collect();
    Ok(ScalingTable {
        axis,
        r2_params: r_squared(&xs, &ps),
        r2_flops: r_squared(&xs, &fs),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryEstimate {
    pub param_bytes: u64,
    /// Token-shaped activations kept live inside one block:
    /// `batch · 6 · T · d` values (residual, normed input, q, k, v, output).
    pub token_bytes: u64,
    /// Attention probabilities: `batch · heads · T²` values.
    pub attention_bytes: u64,
    pub activation_bytes: u64,
    pub total_bytes: u64,
    /// `"tokens"` or `"attention"`, whichever activation term is larger.
    pub dominant: String,
}

/// Inference peak-memory model: all parameters plus the live activations of
/// the largest block. Blocks run one after the other, so the activation term
/// does not grow with depth.
pub fn memory_estimate(config: &ViTConfig, resolution: usize, batch: usize) -> Result<MemoryEstimate> {
    let r = complexity(config, resolution)?;
    let bytes = config.dtype.size_of() as u64;
    let (t, d, b) = (r.token_count as u64, config.width as u64, batch as u64);
    let token_bytes = b * 6 * t * d * bytes;
    let attention_bytes = b * config.heads as u64 * t * t * bytes;
    let activation_bytes = token_bytes + attention_bytes;
    let param_bytes = r.params_total * bytes;
    Ok(MemoryEstimate {
        param_bytes,
        token_bytes,
        attention_bytes,
        activation_bytes,
        total_bytes: param_bytes + activation_bytes,
        dominant: if attention_bytes > token_bytes { "attention" } else { "tokens" }.into(),
    })
}
