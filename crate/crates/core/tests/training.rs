//! Pretraining loop, retrieval evaluation and gradient-check sensitivity.

use cropvit::autodiff::check_gradients;
use cropvit::encoders::{DualEncoder, ParamGroup, PeMode, TextConfig, VitConfig};
use cropvit::harness::{
    eval_retrieval, held_out_pairs, pretrain, pretrain_model, recall_at_k, run_cases, GradCase, RunConfig, FLOOR, STEP,
};
use cropvit::losses::{focal_contrastive_loss, FocalNormalize, LossConfig, LossKind};
use cropvit::synth::gen_base_pair;
use cropvit::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(steps: usize) -> RunConfig {
    let mut cfg = RunConfig { steps, ..RunConfig::default() };
    cfg.vit = VitConfig { dim: 8, depth: 1, heads: 2, ..cfg.vit };
    cfg.text = TextConfig { dim: 8, depth: 1, heads: 2, ..cfg.text };
    cfg
}

#[test]
fn first_softmax_step_is_near_uniform_with_a_large_temperature() {
    let cfg = RunConfig { steps: 1, loss: LossConfig::softmax(), ..RunConfig::default() };
    for seed in 0..3 {
        let mut model = DualEncoder::new(cfg.vit.clone(), cfg.text.clone(), seed).unwrap();
        model.set_tau(10.0);
        let out = pretrain_model(&RunConfig { seed, ..cfg.clone() }, model, |_, _| {}).unwrap();
        let uniform = 2.0 * (cfg.batch_size as f64).ln();
        let rel = (out.initial_loss() - uniform).abs() / uniform;
        assert!(rel < 0.1, "seed {seed}: {} vs {uniform}", out.initial_loss());
    }
}

#[test]
fn five_hundred_steps_halve_the_loss() {
    let cfg = RunConfig { steps: 500, ..RunConfig::default() };
    let out = pretrain(&cfg, |_, _| {}).unwrap();
    assert!(out.trace.iter().all(|v| v.is_finite()));
    let (first, last) = (out.initial_loss(), out.final_loss(cfg.final_window));
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn non_finite_loss_aborts_with_the_step() {
    let cfg = small(5);
    let mut model = DualEncoder::new(cfg.vit.clone(), cfg.text.clone(), 0).unwrap();
    let tau = model.log_tau_param();
    model.params.get_mut(tau).data_mut()[0] = f64::NAN;
    match pretrain_model(&cfg, model, |_, _| {}) {
        Err(Error::Divergence { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn zero_backbone_rate_matches_freezing() {
    let mut zero = small(15);
    zero.optim.lr_backbone = 0.0;
    let frozen = RunConfig { freeze_backbone: true, ..small(15) };
    let a = pretrain(&zero, |_, _| {}).unwrap();
    let b = pretrain(&frozen, |_, _| {}).unwrap();
    let init = DualEncoder::new(frozen.vit.clone(), frozen.text.clone(), frozen.seed).unwrap();
    for (id, p) in a.model.params.iter() {
        if p.group == ParamGroup::Backbone {
            assert_eq!(p.value, init.params.get(id).clone(), "{}", p.name);
            assert_eq!(p.value, b.model.params.get(id).clone(), "{}", p.name);
        }
    }
    assert_eq!(a.trace, b.trace);
}

#[test]
fn checkpoints_reload_to_identical_embeddings() {
    let cfg = RunConfig { vit: VitConfig { pe_mode: PeMode::Learnable, ..small(0).vit }, ..small(20) };
    let out = pretrain(&cfg, |_, _| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    out.model.save(&path).unwrap();
    let back = DualEncoder::load(&path).unwrap();
    let p = gen_base_pair(3);
    assert_eq!(out.model.embed_text(&p.tokens).unwrap(), back.embed_text(&p.tokens).unwrap());
    assert_eq!(
        out.model.embed_image(&p.image, PeMode::Learnable, None).unwrap(),
        back.embed_image(&p.image, PeMode::Learnable, None).unwrap()
    );
    let mut again = Vec::new();
    back.write_to(&mut again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), again);
}

#[test]
fn untrained_models_retrieve_at_chance() {
    let cfg = RunConfig::default();
    let pairs = held_out_pairs(100);
    for seed in 0..5 {
        let model = DualEncoder::new(cfg.vit.clone(), cfg.text.clone(), 100 + seed).unwrap();
        let r = eval_retrieval(&model, &pairs, &[1]).unwrap();
        assert!(r.i2t[0] < 0.05 && r.t2i[0] < 0.05, "seed {seed}: {} / {}", r.i2t[0], r.t2i[0]);
    }
}

#[test]
fn injected_focal_sign_error_is_caught() {
    // Forward value is the focal loss but the backward pass is negated:
    // 2 * stop_grad(L) - L.
    let buggy = GradCase::new("focal_sign_bug", 3, |rng| {
        let v = Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let l = Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        check_gradients(
            |t, x| {
                let tau = t.constant(Tensor::scalar(0.5));
                let loss = focal_contrastive_loss(t, x[0], x[1], tau, 2.0, FocalNormalize::PerQuery)?;
                let frozen = t.constant(t.value(loss).clone());
                let twice = t.scale(frozen, 2.0);
                let neg = t.scale(loss, -1.0);
                t.add(twice, neg)
            },
            &[v, l],
            STEP,
            FLOOR,
        )
    });
    let report = run_cases(&[buggy], 0);
    assert!(!report.all_passed());
    let failures = report.failures();
    assert_eq!(failures.len(), 1);
    assert_eq!(failures[0].name, "focal_sign_bug");
    assert!(failures[0].worst.contains("coord"), "{}", failures[0].worst);
}

#[test]
fn both_loss_kinds_train_through_every_pe_mode() {
    for mode in PeMode::ALL {
        for kind in [LossKind::Softmax, LossKind::Focal] {
            let mut cfg = small(3);
            cfg.vit.pe_mode = mode;
            cfg.loss.kind = kind;
            let out = pretrain(&cfg, |_, _| {}).unwrap();
            assert_eq!(out.trace.len(), 3);
            assert!(out.trace.iter().all(|v| v.is_finite()));
        }
    }
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

proptest! {
    #[test]
    fn recall_is_monotone_and_saturates(n in 1usize..30, d in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng, d)).collect();
        let texts: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng, d)).collect();
        let ks: Vec<usize> = (1..=n).collect();
        let r = recall_at_k(&images, &texts, &ks).unwrap();
        for w in [&r.i2t, &r.t2i] {
            prop_assert!(w.windows(2).all(|p| p[0] <= p[1]));
            prop_assert!(w.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(w[n - 1], 1.0);
        }
    }

    #[test]
    fn embeddings_are_unit_norm_and_ignore_trailing_padding(seed in 0u64..1000, pad in 0usize..5) {
        let model = DualEncoder::new(small(0).vit, small(0).text, seed).unwrap();
        let p = gen_base_pair(seed);
        let mut padded = p.tokens.clone();
        padded.extend(std::iter::repeat(0).take(pad));
        let t = model.embed_text(&p.tokens).unwrap();
        prop_assert_eq!(&t, &model.embed_text(&padded).unwrap());
        let img = model.embed_image(&p.image, PeMode::Learnable, None).unwrap();
        for e in [&t, &img] {
            prop_assert!((e.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
