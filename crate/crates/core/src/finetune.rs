//! Parameter-scope selection for fine-tuning (full, attention-only,
//! FFN-only), freeze verification, and the resolution fine-tuning driver.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{config_err, Error, Result};
use crate::params::{ParamStore, TensorKind};
use crate::scalar::Scalar;
use crate::train::{fit, MetricsLog, TrainConfig};
use crate::vit::{interpolate_pos_embed, Model, Resample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Full,
    Attn,
    Ffn,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Full => "full",
            Scope::Attn => "attn",
            Scope::Ffn => "ffn",
        })
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Scope::Full),
            "attn" => Ok(Scope::Attn),
            "ffn" => Ok(Scope::Ffn),
            _ => Err(config_err!("unknown tune scope {s:?} (expected full, attn or ffn)")),
        }
    }
}

/// Coarse grouping of the parameter inventory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Stem,
    Embed,
    /// `norm1`, `attn.*` and `gamma1` of a block.
    Attn,
    /// `norm2`, `mlp.*` and `gamma2` of a block.
    Ffn,
    FinalNorm,
    Head,
    Other,
}

impl Group {
    pub const ALL: [Group; 7] = [
        Group::Stem,
        Group::Embed,
        Group::Attn,
        Group::Ffn,
        Group::FinalNorm,
        Group::Head,
        Group::Other,
    ];

    pub fn of(name: &str) -> Group {
        if name.starts_with("stem.") {
            return Group::Stem;
        }
        if name == "cls_token" || name == "pos_embed" {
            return Group::Embed;
        }
        if name.starts_with("norm.") {
            return Group::FinalNorm;
        }
        if name.starts_with("head.") {
            return Group::Head;
        }
        if let Some(rest) = name.strip_prefix("layers.") {
            let local = rest.splitn(3, '.').nth(2).unwrap_or("");
            if local.starts_with("norm1.") || local.starts_with("attn.") || local == "gamma1" {
                return Group::Attn;
            }
            if local.starts_with("norm2.") || local.starts_with("mlp.") || local == "gamma2" {
                return Group::Ffn;
            }
        }
        Group::Other
    }

    pub fn is_block(self) -> bool {
        matches!(self, Group::Attn | Group::Ffn)
    }
}

/// Fine-tuning learning rates (cosine decay, no warmup).
pub const ADAMW_LR: f64 = 1e-4;
pub const SGD_LR: f64 = 1e-2;

/// Default always-trainable name patterns (prefix match).
pub const ALWAYS_TRAINABLE: [&str; 5] = ["head.", "norm.", "pos_embed", "cls_token", "mask_token"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneScope {
    pub scope: Scope,
    pub always_trainable: Vec<String>,
}

impl TuneScope {
    pub fn new(scope: Scope) -> Self {
        TuneScope {
            scope,
            always_trainable: ALWAYS_TRAINABLE.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Whether the tensor called `name` is updated under this scope.
    pub fn selects(&self, name: &str) -> bool {
        if self.scope == Scope::Full || self.always_trainable.iter().any(|p| name.starts_with(p.as_str())) {
            return true;
        }
        matches!(
            (self.scope, Group::of(name)),
            (Scope::Attn, Group::Attn) | (Scope::Ffn, Group::Ffn)
        )
    }
}

impl From<Scope> for TuneScope {
    fn from(scope: Scope) -> Self {
        TuneScope::new(scope)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GroupCount {
    pub group: Group,
    pub params: usize,
    pub trainable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamGroupReport {
    pub scope: Scope,
    pub total_params: usize,
    pub trainable_params: usize,
    pub frozen_params: usize,
    pub trainable_fraction: f64,
    /// Parameters inside transformer blocks (MHSA, FFN and their norms and
    /// LayerScale).
    pub block_params: usize,
    pub block_trainable: usize,
    pub block_fraction: f64,
    pub groups: Vec<GroupCount>,
}

impl ParamGroupReport {
    pub fn group(&self, group: Group) -> GroupCount {
        self.groups
            .iter()
            .copied()
            .find(|g| g.group == group)
            .unwrap_or(GroupCount {
                group,
                params: 0,
                trainable: 0,
            })
    }
}

/// Counts parameters per group under `scope` without modifying anything.
pub fn scope_report<T: Scalar>(store: &ParamStore<T>, scope: &TuneScope) -> ParamGroupReport {
    let mut groups: Vec<GroupCount> = Group::ALL
        .iter()
        .map(|&group| GroupCount {
            group,
            params: 0,
            trainable: 0,
        })
        .collect();
    for e in store.entries().iter().filter(|e| e.kind == TensorKind::Param) {
        let slot = &mut groups[Group::ALL.iter().position(|&g| g == Group::of(&e.name)).unwrap()];
        slot.params += e.tensor.numel();
        if scope.selects(&e.name) {
            slot.trainable += e.tensor.numel();
        }
    }
    groups.retain(|g| g.params > 0);
    let total: usize = groups.iter().map(|g| g.params).sum();
    let trainable: usize = groups.iter().map(|g| g.trainable).sum();
    let block: usize = groups.iter().filter(|g| g.group.is_block()).map(|g| g.params).sum();
    let block_trainable: usize = groups.iter().filter(|g| g.group.is_block()).map(|g| g.trainable).sum();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    ParamGroupReport {
        scope: scope.scope,
        total_params: total,
        trainable_params: trainable,
        frozen_params: total - trainable,
        trainable_fraction: ratio(trainable, total),
        block_params: block,
        block_trainable,
        block_fraction: ratio(block_trainable, block),
        groups,
    }
}

/// Marks each parameter of `store` trainable or frozen according to `scope`.
pub fn select_store<T: Scalar>(store: &mut ParamStore<T>, scope: &TuneScope) -> ParamGroupReport {
    for e in store.entries_mut() {
        if e.kind == TensorKind::Param {
            e.tensor.requires_grad = scope.selects(&e.name);
        }
    }
    scope_report(store, scope)
}

pub fn select_trainable<T: Scalar>(model: &mut Model<T>, scope: &TuneScope) -> ParamGroupReport {
    select_store(&mut model.params, scope)
}

/// True iff every parameter outside `scope`'s trainable set is bitwise
/// identical between the two stores. Buffers are not parameters and are
/// ignored.
pub fn freeze_verify_store<T: Scalar>(before: &ParamStore<T>, after: &ParamStore<T>, scope: &TuneScope) -> Result<bool> {
    let same_inventory = before.len() == after.len()
        && before
            .entries()
            .iter()
            .zip(after.entries())
            .all(|(a, b)| a.name == b.name && a.kind == b.kind && a.tensor.shape() == b.tensor.shape());
    if !same_inventory {
        return Err(config_err!("freeze_verify needs two snapshots of the same model"));
    }
    Ok(before
        .entries()
        .iter()
        .zip(after.entries())
        .filter(|(a, _)| a.kind == TensorKind::Param && !scope.selects(&a.name))
        .all(|(a, b)| a.tensor.bitwise_eq(&b.tensor)))
}

pub fn freeze_verify<T: Scalar>(before: &Model<T>, after: &Model<T>, scope: &TuneScope) -> Result<bool> {
    if before.config != after.config {
        return Err(config_err!("freeze_verify needs two snapshots of the same configuration"));
    }
    freeze_verify_store(&before.params, &after.params, scope)
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome<T: Scalar> {
    pub model: Model<T>,
    pub report: ParamGroupReport,
    pub log: MetricsLog,
}

/// Adapts `model` to `new_size` (bicubic positional interpolation), freezes
/// everything outside `scope` and trains on `train`.
pub fn finetune_resolution<T: Scalar>(
    model: Model<T>,
    new_size: usize,
    scope: &TuneScope,
    cfg: &TrainConfig,
    train: &Dataset<T>,
    eval: Option<&Dataset<T>>,
) -> Result<FinetuneOutcome<T>> {
    let mut model = interpolate_pos_embed(model, new_size, Resample::Bicubic)?;
    let report = select_trainable(&mut model, scope);
    let log = fit(&mut model, train, eval, cfg)?;
    Ok(FinetuneOutcome { model, report, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ViTConfig;
    use crate::rng::Rng;
    use crate::vit::build_model;

    #[test]
    fn grouping() {
        assert_eq!(Group::of("layers.3.1.attn.qkv.weight"), Group::Attn);
        assert_eq!(Group::of("layers.0.0.norm1.bias"), Group::Attn);
        assert_eq!(Group::of("layers.0.0.gamma2"), Group::Ffn);
        assert_eq!(Group::of("layers.10.0.mlp.fc2.bias"), Group::Ffn);
        assert_eq!(Group::of("norm.weight"), Group::FinalNorm);
        assert_eq!(Group::of("stem.0.norm.weight"), Group::Stem);
        assert_eq!(Group::of("pos_embed"), Group::Embed);
    }

    #[test]
    fn unknown_scope_is_a_config_error() {
        assert!(matches!("mlp".parse::<Scope>(), Err(Error::Config(_))));
        assert_eq!("attn".parse::<Scope>().unwrap(), Scope::Attn);
    }

    #[test]
    fn full_scope_freezes_nothing() {
        let cfg = ViTConfig::custom(8, 2, 2).with_image_size(32).with_classes(10);
        let mut m = build_model::<f32>(&cfg, &mut Rng::new(0)).unwrap();
        let r = select_trainable(&mut m, &Scope::Full.into());
        assert_eq!(r.frozen_params, 0);
        assert_eq!(r.total_params, m.param_count());
    }

    #[test]
    fn untouched_model_verifies_under_every_scope() {
        let cfg = ViTConfig::custom(8, 1, 2).with_image_size(32).with_classes(10);
        let m = build_model::<f32>(&cfg, &mut Rng::new(0)).unwrap();
        for s in [Scope::Full, Scope::Attn, Scope::Ffn] {
            assert!(freeze_verify(&m, &m, &s.into()).unwrap());
        }
        let other = build_model::<f32>(&cfg.clone().with_classes(5), &mut Rng::new(0)).unwrap();
        assert!(freeze_verify(&m, &other, &Scope::Full.into()).is_err());
    }
}
