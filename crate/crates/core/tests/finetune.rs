//! Scope partitioning, freezing and the optimizers.

use proptest::prelude::*;
use vitkit::data::synth_split;
use vitkit::finetune::{
    finetune_resolution, freeze_verify, scope_report, select_trainable, Group, Scope, TuneScope, ADAMW_LR,
};
use vitkit::optim::OptimizerConfig;
use vitkit::train::{evaluate, train, train_step, TrainConfig};
use vitkit::vit::{build_model, Forward, Model};
use vitkit::{Layout, ParamStore, Rng, StemKind, Tensor, ViTConfig};

fn small_model(seed: u64) -> Model<f32> {
    let cfg = ViTConfig::custom(16, 2, 2)
        .with_layout(Layout::new(1, 2))
        .with_image_size(32)
        .with_classes(10)
        .with_stem(StemKind::Hmlp)
        .with_layerscale(Some(0.1));
    build_model(&cfg, &mut Rng::new(seed)).unwrap()
}

#[test]
fn scopes_partition_the_blocks() {
    let m = small_model(0);
    let attn = TuneScope::new(Scope::Attn);
    let ffn = TuneScope::new(Scope::Ffn);
    let full = TuneScope::new(Scope::Full);
    for e in m.params.entries() {
        let group = Group::of(&e.name);
        if group.is_block() {
            assert!(attn.selects(&e.name) ^ ffn.selects(&e.name), "{}", e.name);
        }
        assert!(full.selects(&e.name));
        let always = matches!(group, Group::Embed | Group::FinalNorm | Group::Head);
        if always {
            assert!(attn.selects(&e.name) && ffn.selects(&e.name), "{}", e.name);
        }
        if group == Group::Stem {
            assert!(!attn.selects(&e.name) && !ffn.selects(&e.name), "{}", e.name);
        }
    }
    for scope in [attn, ffn, full] {
        let r = scope_report(&m.params, &scope);
        assert_eq!(r.total_params, r.trainable_params + r.frozen_params);
    }
}

#[test]
fn attn_scope_trains_a_third_of_the_blocks() {
    let b: Model<f32> = build_model(&ViTConfig::base(), &mut Rng::new(0)).unwrap();
    let full = scope_report(&b.params, &TuneScope::new(Scope::Full));
    let attn = scope_report(&b.params, &TuneScope::new(Scope::Attn));
    assert_eq!(full.frozen_params, 0);
    let always: usize = [Group::Embed, Group::FinalNorm, Group::Head]
        .iter()
        .map(|&g| attn.group(g).trainable)
        .sum();
    let ratio = (attn.trainable_params - always) as f64 / full.block_params as f64;
    assert!((0.32..=0.35).contains(&ratio), "{ratio}");
}

fn bowl_losses(opt: OptimizerConfig) -> Vec<f64> {
    let mut rng = Rng::new(3);
    let curvature: Vec<f64> = (0..16).map(|_| 0.5 + rng.uniform()).collect();
    let mut store = ParamStore::<f64>::new();
    let id = store.add_param("x", rng.normal_tensor(&[16], 1.0));
    let mut opt = opt.build::<f64>().unwrap();
    let mut losses = Vec::new();
    for _ in 0..20 {
        let x = store.get(id).data().to_vec();
        losses.push(x.iter().zip(&curvature).map(|(x, a)| 0.5 * a * x * x).sum());
        let grad: Vec<f64> = x.iter().zip(&curvature).map(|(x, a)| a * x).collect();
        opt.step(&mut store, &[Some(grad)]).unwrap();
    }
    losses
}

#[test]
fn optimizers_descend_a_quadratic_bowl() {
    let adamw = OptimizerConfig::AdamW {
        lr: 1e-2,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    for opt in [OptimizerConfig::sgd(1e-2), OptimizerConfig::adamw(1e-2), adamw] {
        let losses = bowl_losses(opt);
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{opt:?}: {losses:?}");
    }
}

#[test]
fn stationary_adamw_without_decay_is_a_no_op() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add_param("x", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
    let before = store.get(id).clone();
    let mut opt = OptimizerConfig::AdamW {
        lr: 0.1,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    }
    .build::<f64>()
    .unwrap();
    for _ in 0..50 {
        opt.step(&mut store, &[Some(vec![0.0; 3])]).unwrap();
    }
    assert!(store.get(id).bitwise_eq(&before));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn frozen_tensors_never_move(scope in prop::sample::select(vec![Scope::Full, Scope::Attn, Scope::Ffn]),
                                 steps in 1usize..12, sgd in any::<bool>(), seed in 0u64..1000) {
        let initial = small_model(seed);
        let mut model = initial.clone();
        let scope = TuneScope::new(scope);
        select_trainable(&mut model, &scope);
        let cfg = if sgd { OptimizerConfig::sgd(0.05) } else { OptimizerConfig::adamw(1e-2) };
        let mut opt = cfg.build().unwrap();
        let mut rng = Rng::new(seed);
        for step in 0..steps {
            let x: Tensor<f32> = rng.normal_tensor(&[4, 3, 32, 32], 1.0);
            let y: Vec<usize> = (0..4).map(|_| rng.below(10)).collect();
            train_step(&mut model, &mut opt, &x, &y, Forward::Parallel, &mut rng, step).unwrap();
        }
        prop_assert!(freeze_verify(&initial, &model, &scope).unwrap());
        if scope.scope == Scope::Full {
            prop_assert!(!freeze_verify(&initial, &model, &TuneScope::new(Scope::Attn)).unwrap());
        }
    }
}

#[test]
fn attn_only_resolution_finetune_does_not_lose_accuracy() {
    let cfg = ViTConfig::custom(192, 2, 3).with_image_size(32).with_classes(10);
    let (train32, test32) = synth_split::<f32>(11, 500, 200, 32, 10).unwrap();
    let tc = TrainConfig::new(10, 32, OptimizerConfig::adamw(1e-3), 1);
    let (pre, log) = train(&cfg, &train32, Some(&test32), &tc).unwrap();

    // The same images, upsampled: a pure resolution change.
    let (train64, test64) = (train32.resized(64), test32.resized(64));
    let at64 = vitkit::vit::interpolate_pos_embed(pre.clone(), 64, vitkit::vit::Resample::Bicubic).unwrap();
    let (_, before) = evaluate(&at64, &test64, 50, Forward::Parallel).unwrap();
    assert!(log.last().and_then(|r| r.eval_acc).unwrap() > 0.3);

    let scope = TuneScope::new(Scope::Attn);
    let ft_cfg = TrainConfig::new(5, 32, OptimizerConfig::adamw(10.0 * ADAMW_LR), 2);
    let out = finetune_resolution(pre, 64, &scope, &ft_cfg, &train64, Some(&test64)).unwrap();
    let after = out.log.last().and_then(|r| r.eval_acc).unwrap();
    assert!(after >= before + 0.1, "{before} -> {after}");
    assert!(freeze_verify(&at64, &out.model, &scope).unwrap());
    assert!(out.report.trainable_params < out.report.total_params / 2);
}
