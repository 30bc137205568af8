//! Vision transformer with sequential or parallel block layouts.
//!
//! A model of layout `N×P` holds `N` layers of `P` pre-norm blocks. The
//! sequential forward visits every block in order:
//!
//! ```text
//! x' = x + mhsa(x);   x = x' + ffn(x')
//! ```
//!
//! The parallel forward evaluates all branches of a layer on the same input
//! and adds their sum once to the residual stream:
//!
//! ```text
//! x' = x + Σ_p mhsa_p(x);   x = x' + Σ_p ffn_p(x')
//! ```
//!
//! Branch outputs are summed in ascending branch order.

use serde::{Deserialize, Serialize};

use crate::autograd::{Mode, Tape, Var};
use crate::config::{Layout, ViTConfig};
use crate::error::{config_err, dim_err, Result};
use crate::params::{apply_bn_updates, Ctx, ParamId, ParamStore, BN_MOMENTUM};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::stems::{Stem, INIT_STD, LN_EPS};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    fn build<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Self {
        LayerNormParams {
            weight: store.add_param(format!("{prefix}.weight"), Tensor::ones(&[d])),
            bias: store.add_param(format!("{prefix}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn apply<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, x: Var<'a, T>) -> Result<Var<'a, T>> {
        x.layer_norm(&ctx.p(self.weight), &ctx.p(self.bias), T::of(LN_EPS))
    }

    fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearParams {
    /// `[in, out]`.
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearParams {
    fn build<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, prefix: &str, fan_in: usize, fan_out: usize) -> Self {
        LinearParams {
            weight: store.add_param(
                format!("{prefix}.weight"),
                Tensor::from_fn(&[fan_in, fan_out], |_| T::of(rng.trunc_normal(INIT_STD))),
            ),
            bias: store.add_param(format!("{prefix}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn apply<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, x: Var<'a, T>) -> Result<Var<'a, T>> {
        x.linear(&ctx.p(self.weight), Some(&ctx.p(self.bias)))
    }

    fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// One (MHSA, FFN) pair with its pre-norms and optional LayerScale.
#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNormParams,
    pub qkv: LinearParams,
    pub proj: LinearParams,
    pub gamma1: Option<ParamId>,
    pub norm2: LayerNormParams,
    pub fc1: LinearParams,
    pub fc2: LinearParams,
    pub gamma2: Option<ParamId>,
    pub heads: usize,
    pub sd_rate: f64,
}

impl Block {
    fn build<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, prefix: &str, cfg: &ViTConfig) -> Self {
        let d = cfg.width;
        let gamma = |store: &mut ParamStore<T>, name: &str| {
            cfg.layerscale
                .map(|eps| store.add_param(format!("{prefix}.{name}"), Tensor::full(&[d], T::of(eps))))
        };
        let norm1 = LayerNormParams::build(store, &format!("{prefix}.norm1"), d);
        let qkv = LinearParams::build(store, rng, &format!("{prefix}.attn.qkv"), d, 3 * d);
        let proj = LinearParams::build(store, rng, &format!("{prefix}.attn.proj"), d, d);
        let gamma1 = gamma(store, "gamma1");
        let norm2 = LayerNormParams::build(store, &format!("{prefix}.norm2"), d);
        let fc1 = LinearParams::build(store, rng, &format!("{prefix}.mlp.fc1"), d, 4 * d);
        let fc2 = LinearParams::build(store, rng, &format!("{prefix}.mlp.fc2"), 4 * d, d);
        let gamma2 = gamma(store, "gamma2");
        Block {
            norm1,
            qkv,
            proj,
            gamma1,
            norm2,
            fc1,
            fc2,
            gamma2,
            heads: cfg.heads,
            sd_rate: cfg.sd_rate,
        }
    }

    /// Every tensor of the block, in inventory order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::with_capacity(14);
        ids.extend(self.norm1.ids());
        ids.extend(self.qkv.ids());
        ids.extend(self.proj.ids());
        ids.extend(self.gamma1);
        ids.extend(self.norm2.ids());
        ids.extend(self.fc1.ids());
        ids.extend(self.fc2.ids());
        ids.extend(self.gamma2);
        ids
    }
}

/// Multi-head self-attention branch: pre-LN, fused qkv, scaled dot-product
/// attention per head, output projection and optional LayerScale.
///
/// Returns the branch output only; the caller adds the residual.
pub fn mhsa_forward<'a, T: Scalar>(ctx: &Ctx<'a, T>, block: &Block, x: Var<'a, T>) -> Result<Var<'a, T>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(dim_err!("mhsa expects [b, tokens, d], got {:?}", s));
    }
    let (b, t, d) = (s[0], s[1], s[2]);
    let h = block.heads;
    if d % h != 0 {
        return Err(config_err!("width {d} is not divisible by heads {h}"));
    }
    let dh = d / h;
    let qkv = block
        .qkv
        .apply(ctx, block.norm1.apply(ctx, x)?)?
        .reshape(&[b, t, 3, h, dh])?
        .permute(&[2, 0, 3, 1, 4])?
        .reshape(&[3 * b * h, t, dh])?;
    let q = qkv.narrow(0, 0, b * h)?;
    let k = qkv.narrow(0, b * h, b * h)?;
    let v = qkv.narrow(0, 2 * b * h, b * h)?;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let attn = q.bmm(&k, true)?.scale(scale).softmax();
    let out = attn
        .bmm(&v, false)?
        .reshape(&[b, h, t, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, t, d])?;
    let out = block.proj.apply(ctx, out)?;
    match block.gamma1 {
        Some(g) => out.mul_bcast(&ctx.p(g)),
        None => Ok(out),
    }
}

/// Feed-forward branch: pre-LN, `d → 4d`, GELU, `4d → d`, optional
/// LayerScale. Returns the branch output only.
pub fn ffn_forward<'a, T: Scalar>(ctx: &Ctx<'a, T>, block: &Block, x: Var<'a, T>) -> Result<Var<'a, T>> {
    let hidden = block.fc1.apply(ctx, block.norm2.apply(ctx, x)?)?.gelu();
    let out = block.fc2.apply(ctx, hidden)?;
    match block.gamma2 {
        Some(g) => out.mul_bcast(&ctx.p(g)),
        None => Ok(out),
    }
}

/// Drops a whole branch output per sample with probability `rate` in train
/// mode, rescaling kept samples by `1/(1 − rate)`. Identity in eval mode or
/// when `rate` is zero.
pub fn stochastic_depth<'a, T: Scalar>(ctx: &Ctx<'a, T>, x: Var<'a, T>, rate: f64) -> Result<Var<'a, T>> {
    if ctx.mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(config_err!("stochastic depth rate {rate} outside [0, 1)"));
    }
    let batch = x.shape()[0];
    let keep_scale = T::of(1.0 / (1.0 - rate));
    let factors = ctx.with_rng(|rng| {
        (0..batch)
            .map(|_| if rng.bernoulli(rate) { T::zero() } else { keep_scale })
            .collect::<Vec<_>>()
    })?;
    x.scale_samples(&factors)
}

/// Interpolation kernel used to resample positional embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    Bicubic,
    Bilinear,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ViTConfig,
    pub params: ParamStore<T>,
    pub stem: Stem,
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    /// `layers[l][p]` is branch `p` of layer `l`.
    pub layers: Vec<Vec<Block>>,
    pub final_norm: LayerNormParams,
    pub head: LinearParams,
}

/// Builds a model with truncated-normal (σ=0.02) weights, zero biases, unit
/// norms and LayerScale at its configured init.
pub fn build_model<T: Scalar>(config: &ViTConfig, rng: &mut Rng) -> Result<Model<T>> {
    config.validate()?;
    let d = config.width;
    let mut params = ParamStore::new();
    let stem = Stem::build(config.stem_spec(), &mut params, rng, "stem")?;
    let cls_token = params.add_param(
        "cls_token",
        Tensor::from_fn(&[1, d], |_| T::of(rng.trunc_normal(INIT_STD))),
    );
    let pos_embed = params.add_param(
        "pos_embed",
        Tensor::from_fn(&[config.num_patches() + 1, d], |_| T::of(rng.trunc_normal(INIT_STD))),
    );
    let layers = (0..config.depth)
        .map(|l| {
            (0..config.branches)
                .map(|p| Block::build(&mut params, rng, &format!("layers.{l}.{p}"), config))
                .collect()
        })
        .collect();
    let final_norm = LayerNormParams::build(&mut params, "norm", d);
    let head = LinearParams::build(&mut params, rng, "head", d, config.num_classes);
    Ok(Model {
        config: config.clone(),
        params,
        stem,
        cls_token,
        pos_embed,
        layers,
        final_norm,
        head,
    })
}

impl<T: Scalar> Model<T> {
    pub fn layout(&self) -> Layout {
        self.config.layout()
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.layers.iter().flatten()
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut Block> {
        self.layers.iter_mut().flatten()
    }

    fn check_images(&self, images: &Var<'_, T>) -> Result<()> {
        let s = images.shape();
        let c = &self.config;
        if s.len() != 4 || s[1] != c.in_channels || s[2] != c.image_size || s[3] != c.image_size {
            return Err(dim_err!(
                "expected images [b, {}, {}, {}], got {:?}",
                c.in_channels,
                c.image_size,
                c.image_size,
                s
            ));
        }
        Ok(())
    }

    /// Stem tokens with the class token prepended and positions added:
    /// `[b, T+1, d]`. Masked positions, if any, are replaced by the mask
    /// token after the stem.
    pub fn embed<'a>(
        &self,
        ctx: &Ctx<'a, T>,
        images: Var<'a, T>,
        mask: Option<(&[bool], Var<'a, T>)>,
    ) -> Result<Var<'a, T>> {
        self.check_images(&images)?;
        let mut tokens = self.stem.forward(ctx, images)?;
        if let Some((bits, token)) = mask {
            tokens = tokens.replace_rows(bits, &token)?;
        }
        tokens
            .prepend_token(&ctx.p(self.cls_token))?
            .add_bcast(&ctx.p(self.pos_embed))
    }

    /// One parallel layer: `x + Σ mhsa_p(x)`, then `x' + Σ ffn_p(x')`.
    pub fn layer_forward<'a>(&self, ctx: &Ctx<'a, T>, layer: &[Block], x: Var<'a, T>) -> Result<Var<'a, T>> {
        let mut sum: Option<Var<'a, T>> = None;
        for block in layer {
            let out = stochastic_depth(ctx, mhsa_forward(ctx, block, x)?, block.sd_rate)?;
            sum = Some(match sum {
                Some(s) => s.add(&out)?,
                None => out,
            });
        }
        let x = x.add(&sum.expect("layer has at least one branch"))?;
        let mut sum: Option<Var<'a, T>> = None;
        for block in layer {
            let out = stochastic_depth(ctx, ffn_forward(ctx, block, x)?, block.sd_rate)?;
            sum = Some(match sum {
                Some(s) => s.add(&out)?,
                None => out,
            });
        }
        x.add(&sum.expect("layer has at least one branch"))
    }

    /// Runs every block as its own single-branch layer, in layer-major,
    /// branch-minor order.
    pub fn trunk_sequential<'a>(&self, ctx: &Ctx<'a, T>, mut x: Var<'a, T>) -> Result<Var<'a, T>> {
        for block in self.blocks() {
            x = self.layer_forward(ctx, std::slice::from_ref(block), x)?;
        }
        Ok(x)
    }

    pub fn trunk_parallel<'a>(&self, ctx: &Ctx<'a, T>, mut x: Var<'a, T>) -> Result<Var<'a, T>> {
        for layer in &self.layers {
            x = self.layer_forward(ctx, layer, x)?;
        }
        Ok(x)
    }

    /// Final-normed token features `[b, T+1, d]`.
    pub fn features<'a>(
        &self,
        ctx: &Ctx<'a, T>,
        images: Var<'a, T>,
        mask: Option<(&[bool], Var<'a, T>)>,
        exec: Forward,
    ) -> Result<Var<'a, T>> {
        let x = self.embed(ctx, images, mask)?;
        let x = match exec {
            Forward::Sequential => self.trunk_sequential(ctx, x)?,
            Forward::Parallel => self.trunk_parallel(ctx, x)?,
        };
        self.final_norm.apply(ctx, x)
    }

    /// Class-token readout: final norm, then the classification head.
    pub fn classify<'a>(&self, ctx: &Ctx<'a, T>, x: Var<'a, T>) -> Result<Var<'a, T>> {
        let s = x.shape();
        let cls = x.narrow(1, 0, 1)?.reshape(&[s[0], s[2]])?;
        self.head.apply(ctx, self.final_norm.apply(ctx, cls)?)
    }

    pub fn logits_var<'a>(&self, ctx: &Ctx<'a, T>, images: Var<'a, T>, exec: Forward) -> Result<Var<'a, T>> {
        let x = self.embed(ctx, images, None)?;
        let x = match exec {
            Forward::Sequential => self.trunk_sequential(ctx, x)?,
            Forward::Parallel => self.trunk_parallel(ctx, x)?,
        };
        self.classify(ctx, x)
    }

    /// Logits `[b, classes]` under the chosen layout semantics. Train mode
    /// needs `rng` when stochastic depth is active; batch-norm running
    /// statistics are updated in train mode.
    pub fn forward(
        &mut self,
        images: &Tensor<T>,
        exec: Forward,
        mode: Mode,
        rng: Option<&mut Rng>,
    ) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        let (out, updates) = {
            let ctx = Ctx::new(&tape, &self.params, mode, rng);
            let out = self.logits_var(&ctx, tape.constant(images.clone()), exec)?;
            ((*out.value()).clone(), ctx.take_bn_updates())
        };
        apply_bn_updates(&mut self.params, &updates, BN_MOMENTUM);
        Ok(out)
    }

    /// Eval-mode logits without touching any state.
    pub fn predict(&self, images: &Tensor<T>, exec: Forward) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        let ctx = Ctx::eval(&tape, &self.params);
        let out = self.logits_var(&ctx, tape.constant(images.clone()), exec)?;
        Ok((*out.value()).clone())
    }

    /// Converts every tensor to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            stem: self.stem.clone(),
            cls_token: self.cls_token,
            pos_embed: self.pos_embed,
            layers: self.layers.clone(),
            final_norm: self.final_norm,
            head: self.head,
        }
    }

    /// Sets every LayerScale vector to the constant `value`.
    pub fn set_layerscale(&mut self, value: T) -> Result<()> {
        let ids: Vec<ParamId> = self.blocks().flat_map(|b| b.gamma1.into_iter().chain(b.gamma2)).collect();
        if ids.is_empty() {
            return Err(config_err!("model was built without LayerScale"));
        }
        for id in ids {
            self.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = value);
        }
        Ok(())
    }
}

/// Which residual composition to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Forward {
    /// Every block in sequence.
    Sequential,
    /// Branches of a layer share their input.
    Parallel,
}

pub fn forward_sequential<T: Scalar>(
    model: &mut Model<T>,
    images: &Tensor<T>,
    mode: Mode,
    rng: Option<&mut Rng>,
) -> Result<Tensor<T>> {
    model.forward(images, Forward::Sequential, mode, rng)
}

pub fn forward_parallel<T: Scalar>(
    model: &mut Model<T>,
    images: &Tensor<T>,
    mode: Mode,
    rng: Option<&mut Rng>,
) -> Result<Tensor<T>> {
    model.forward(images, Forward::Parallel, mode, rng)
}

/// Regroups the model's blocks into layout `(total/P)×P`: consecutive blocks
/// `l·P … l·P+P−1` become the branches of layer `l`. Tensors are moved, not
/// copied, and renamed to match a freshly built model of the new layout.
pub fn regroup<T: Scalar>(model: Model<T>, branches: usize) -> Result<Model<T>> {
    let total = model.config.total_blocks();
    if branches == 0 || total % branches != 0 {
        return Err(config_err!(
            "cannot regroup {total} blocks into {branches} parallel branches"
        ));
    }
    let Model {
        mut config,
        mut params,
        stem,
        cls_token,
        pos_embed,
        layers,
        final_norm,
        head,
    } = model;
    let flat: Vec<Block> = layers.into_iter().flatten().collect();
    let depth = total / branches;
    let mut regrouped: Vec<Vec<Block>> = (0..depth).map(|_| Vec::with_capacity(branches)).collect();
    for (i, block) in flat.into_iter().enumerate() {
        let (l, p) = (i / branches, i % branches);
        for id in block.param_ids() {
            let old = params.name(id);
            let suffix = old.splitn(4, '.').nth(3).expect("block tensor names are layers.l.p.*");
            params.rename(id, format!("layers.{l}.{p}.{suffix}"));
        }
        regrouped[l].push(block);
    }
    config.depth = depth;
    config.branches = branches;
    Ok(Model {
        config,
        params,
        stem,
        cls_token,
        pos_embed,
        layers: regrouped,
        final_norm,
        head,
    })
}

fn cubic_weights(t: f64) -> [f64; 4] {
    // Keys cubic convolution, a = -0.75.
    const A: f64 = -0.75;
    let near = |x: f64| ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0;
    let far = |x: f64| ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A;
    [far(t + 1.0), near(t), near(1.0 - t), far(2.0 - t)]
}

/// Resamples a `src×src` grid of `d`-vectors to `dst×dst` (half-pixel
/// centers, edges clamped).
pub fn resample_grid(grid: &[f64], src: usize, dst: usize, d: usize, kind: Resample) -> Vec<f64> {
    let scale = src as f64 / dst as f64;
    let taps = |o: usize| -> Vec<(usize, f64)> {
        let pos = (o as f64 + 0.5) * scale - 0.5;
        let clamp = |i: isize| i.clamp(0, src as isize - 1) as usize;
        match kind {
            Resample::Bicubic => {
                let base = pos.floor();
                let w = cubic_weights(pos - base);
                (0..4).map(|k| (clamp(base as isize - 1 + k as isize), w[k])).collect()
            }
            Resample::Bilinear => {
                let pos = pos.max(0.0);
                let base = pos.floor();
                let t = pos - base;
                vec![(clamp(base as isize), 1.0 - t), (clamp(base as isize + 1), t)]
            }
        }
    };
    let mut out = vec![0.0; dst * dst * d];
    for oy in 0..dst {
        let ty = taps(oy);
        for ox in 0..dst {
            let tx = taps(ox);
            let o = &mut out[(oy * dst + ox) * d..(oy * dst + ox + 1) * d];
            for &(iy, wy) in &ty {
                for &(ix, wx) in &tx {
                    let w = wy * wx;
                    let src_row = &grid[(iy * src + ix) * d..(iy * src + ix + 1) * d];
                    for (v, &s) in o.iter_mut().zip(src_row) {
                        *v += w * s;
                    }
                }
            }
        }
    }
    out
}

/// Adapts the model to a new input resolution by resampling the grid rows
/// of the positional embedding; the class-token row is copied unchanged.
pub fn interpolate_pos_embed<T: Scalar>(mut model: Model<T>, new_image_size: usize, kind: Resample) -> Result<Model<T>> {
    let p = model.config.patch_size;
    if new_image_size == 0 || new_image_size % p != 0 {
        return Err(config_err!(
            "image size {new_image_size} is not divisible by patch size {p}"
        ));
    }
    if new_image_size == model.config.image_size {
        return Ok(model);
    }
    let d = model.config.width;
    let (src, dst) = (model.config.grid(), new_image_size / p);
    let old = model.params.get(model.pos_embed);
    let grid: Vec<f64> = old.data()[d..].iter().map(|v| v.as_f64()).collect();
    let mut data: Vec<T> = old.data()[..d].to_vec();
    data.extend(resample_grid(&grid, src, dst, d, kind).into_iter().map(T::of));
    let requires_grad = old.requires_grad;
    let entry = &mut model.params.entries_mut()[model.pos_embed.0];
    entry.tensor = Tensor::new(&[dst * dst + 1, d], data)?.with_requires_grad(requires_grad);
    model.config.image_size = new_image_size;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::StemKind;

    fn toy() -> ViTConfig {
        ViTConfig::custom(8, 1, 2).with_image_size(32).with_classes(10)
    }

    #[test]
    fn toy_parameter_count() {
        let m = build_model::<f32>(&toy(), &mut Rng::new(0)).unwrap();
        assert_eq!(m.param_count(), 7_178);
    }

    #[test]
    fn inventory_is_deterministic() {
        let cfg = toy().with_layout(Layout::new(2, 2)).with_layerscale(Some(0.1));
        let a = build_model::<f64>(&cfg, &mut Rng::new(3)).unwrap();
        let b = build_model::<f64>(&cfg, &mut Rng::new(3)).unwrap();
        assert!(a.params.bitwise_eq(&b.params));
        assert_eq!(a.params.name(a.pos_embed), "pos_embed");
        assert_eq!(a.params.get(a.pos_embed).shape(), &[5, 8]);
        assert!(a.params.find("layers.1.1.gamma2").is_some());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = toy().with_layout(Layout::new(1, 1));
        let mut bad = cfg.clone();
        bad.heads = 3;
        assert!(build_model::<f32>(&bad, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn wrong_image_size_is_a_dimension_error() {
        let m = build_model::<f64>(&toy(), &mut Rng::new(0)).unwrap();
        let err = m.predict(&Tensor::zeros(&[1, 3, 48, 48]), Forward::Sequential).unwrap_err();
        assert!(matches!(err, crate::Error::Dimension(_)));
    }

    #[test]
    fn logits_shape() {
        let m = build_model::<f32>(&toy(), &mut Rng::new(0)).unwrap();
        for b in [1, 3] {
            let y = m.predict(&Tensor::zeros(&[b, 3, 32, 32]), Forward::Parallel).unwrap();
            assert_eq!(y.shape(), &[b, 10]);
        }
    }

    #[test]
    fn regroup_renames_and_rejects_indivisible() {
        let cfg = toy().with_layout(Layout::new(4, 1));
        let m = build_model::<f64>(&cfg, &mut Rng::new(1)).unwrap();
        let fresh = build_model::<f64>(&cfg.clone().with_layout(Layout::new(2, 2)), &mut Rng::new(1)).unwrap();
        let r = regroup(m.clone(), 2).unwrap();
        assert_eq!(r.layout(), Layout::new(2, 2));
        let names: Vec<_> = r.params.entries().iter().map(|e| &e.name).collect();
        let expect: Vec<_> = fresh.params.entries().iter().map(|e| &e.name).collect();
        assert_eq!(names, expect);
        assert!(regroup(m, 3).is_err());
    }

    #[test]
    fn stochastic_depth_identities() {
        let tape = Tape::<f64>::new();
        let store = ParamStore::new();
        let x = tape.constant(Tensor::from_fn(&[4, 2], |i| i as f64));
        let ctx = Ctx::eval(&tape, &store);
        assert_eq!(stochastic_depth(&ctx, x, 0.7).unwrap().id(), x.id());
        let mut rng = Rng::new(0);
        let ctx = Ctx::new(&tape, &store, Mode::Train, Some(&mut rng));
        assert_eq!(stochastic_depth(&ctx, x, 0.0).unwrap().id(), x.id());
    }

    #[test]
    fn stochastic_depth_preserves_expectation() {
        let n = 10_000;
        let tape = Tape::<f64>::no_grad();
        let store = ParamStore::new();
        let mut rng = Rng::new(17);
        let ctx = Ctx::new(&tape, &store, Mode::Train, Some(&mut rng));
        let x = tape.constant(Tensor::ones(&[n, 1]));
        let y = stochastic_depth(&ctx, x, 0.5).unwrap().value();
        let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        let mean = y.data().iter().sum::<f64>() / n as f64;
        assert!((0.48..=0.52).contains(&kept), "{kept}");
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn pos_embed_resolution_change() {
        let cfg = ViTConfig::custom(8, 1, 2).with_classes(10);
        let m = build_model::<f64>(&cfg, &mut Rng::new(0)).unwrap();
        let same = interpolate_pos_embed(m.clone(), 224, Resample::Bicubic).unwrap();
        assert!(same.params.get(same.pos_embed).bitwise_eq(m.params.get(m.pos_embed)));
        let big = interpolate_pos_embed(m.clone(), 384, Resample::Bicubic).unwrap();
        let pe = big.params.get(big.pos_embed);
        assert_eq!(pe.shape(), &[577, 8]);
        assert_eq!(big.config.image_size, 384);
        assert_eq!(&pe.data()[..8], &m.params.get(m.pos_embed).data()[..8]);
        assert!(interpolate_pos_embed(m, 100, Resample::Bicubic).is_err());
    }

    #[test]
    fn interpolation_preserves_constants() {
        for kind in [Resample::Bicubic, Resample::Bilinear] {
            let grid = vec![2.5; 4 * 4 * 3];
            let out = resample_grid(&grid, 4, 7, 3, kind);
            assert!(out.iter().all(|&v| (v - 2.5).abs() < 1e-12), "{kind:?}");
        }
    }

    #[test]
    fn resample_identity_size() {
        let grid: Vec<f64> = (0..3 * 3 * 2).map(|v| v as f64).collect();
        assert_eq!(resample_grid(&grid, 3, 3, 2, Resample::Bicubic), grid);
    }

    #[test]
    fn hmlp_model_builds() {
        let cfg = toy().with_stem(StemKind::Hmlp);
        let m = build_model::<f32>(&cfg, &mut Rng::new(0)).unwrap();
        let y = m.predict(&Tensor::zeros(&[2, 3, 32, 32]), Forward::Sequential).unwrap();
        assert_eq!(y.shape(), &[2, 10]);
    }
}
