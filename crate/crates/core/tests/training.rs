mod common;

use proptest::prelude::*;
use wog::checkpoint::Stage;
use wog::future_encoder;
use wog::policy::{Policy, COND_QUERY, DIT};
use wog::rng::derived_rng;
use wog::sim::SourceTag;
use wog::tensor::{Graph, Tensor};
use wog::training::{
    self, align_term, loss, Batch, Dataset, LossInputs, MixSpec, Objective, StageConfig,
};
use wog::vision::VisionEncoders;

fn mixed_data() -> Dataset {
    let mut eps = common::demos(2, 1).episodes;
    eps.extend(common::human(2, 2).episodes);
    Dataset::new(eps)
}

fn half_mix() -> MixSpec {
    MixSpec::new(&[(SourceTag::Robot, 1.0), (SourceTag::HumanVideo, 1.0)]).unwrap()
}

#[test]
fn stage1_returns_stage_one_with_live_encoder() {
    let data = common::demos(2, 1);
    let out = training::train_stage1(&data, &MixSpec::default(), &common::model(), &common::vision(), &common::stage(3, 0)).unwrap();
    assert_eq!(out.checkpoint.stage, Stage::One);
    assert_eq!(out.checkpoint.encoder_checksum, None);
    assert_eq!(out.metrics.len(), 3);
    assert!(out.metrics.iter().all(|m| m.align_term.is_none() && m.flow_term.is_finite()));
    let fresh = Policy::new(&common::model(), &common::vision(), 0).unwrap();
    assert_ne!(future_encoder::checksum(&fresh.store), future_encoder::checksum(&out.checkpoint.params));
}

#[test]
fn stage2_freezes_encoder_and_trains_query_head() {
    let data = mixed_data();
    let s1 = common::stage1(&data, 2);
    let out = training::train_stage2(&data, &half_mix(), &common::stage(3, 0), &s1).unwrap();
    let ck = &out.checkpoint;
    assert_eq!(ck.stage, Stage::Two);
    assert_eq!(future_encoder::checksum(&ck.params), future_encoder::checksum(&s1.params));
    assert_eq!(ck.encoder_checksum.as_deref(), Some(future_encoder::checksum(&s1.params).as_str()));
    assert_ne!(ck.params.checksum(COND_QUERY), s1.params.checksum(COND_QUERY));
    assert!(out.metrics.iter().all(|m| m.align_term.is_some()));
}

#[test]
fn wo_cotrain_leaves_query_head_alone() {
    let data = common::demos(2, 1);
    let s1 = common::stage1(&data, 2);
    let out = training::train_stage2_wo_cotrain(&data, &MixSpec::default(), &common::stage(2, 0), &s1).unwrap();
    assert_eq!(out.checkpoint.params.checksum(COND_QUERY), s1.params.checksum(COND_QUERY));
    assert_eq!(out.checkpoint.variant, training::variant::WOG_WO_COTRAIN);
    assert!(out.metrics.iter().all(|m| m.align_term.is_none()));
}

#[test]
fn unlabeled_rows_carry_no_flow() {
    let data = mixed_data();
    let s1 = common::stage1(&data, 1);
    let cfg = StageConfig {
        log_per_sample: true,
        batch_size: 8,
        ..common::stage(3, 0)
    };
    let out = training::train_stage2(&data, &half_mix(), &cfg, &s1).unwrap();
    let mut seen = (0, 0);
    for m in &out.metrics {
        for s in m.per_sample.as_ref().unwrap() {
            assert_eq!(s.has_action_labels, s.source_tag != SourceTag::HumanVideo);
            if s.has_action_labels {
                seen.0 += 1;
                assert!(s.flow > 0.0);
            } else {
                seen.1 += 1;
                assert_eq!(s.flow, 0.0);
            }
        }
    }
    assert!(seen.0 > 0 && seen.1 > 0, "{seen:?}");
}

#[test]
fn runs_are_reproducible() {
    let data = common::demos(2, 1);
    let run = |seed| {
        let o = training::train_stage1(&data, &MixSpec::default(), &common::model(), &common::vision(), &common::stage(3, seed)).unwrap();
        let m: Vec<String> = o.metrics.iter().map(|r| r.timing_free_json()).collect();
        (m, o.checkpoint.to_bytes().unwrap())
    };
    let a = run(5);
    assert_eq!(a, run(5));
    assert_ne!(a.0, run(6).0);
}

#[test]
fn zero_lr_finetune_is_a_no_op() {
    let data = common::demos(2, 1);
    let s2 = common::stage2(&data, 1);
    let cfg = StageConfig {
        lr: 0.0,
        ..common::stage(2, 0)
    };
    let ft = training::finetune(&data, &MixSpec::default(), &cfg, &s2).unwrap();
    assert_eq!(ft.checkpoint.stage, Stage::Finetune);
    for ((_, p), (_, q)) in s2.params.iter().zip(ft.checkpoint.params.iter()) {
        assert_eq!(p.tensor.data(), q.tensor.data(), "{}", p.name);
    }
}

#[test]
fn stage_gates() {
    let data = common::demos(2, 1);
    let s2 = common::stage2(&data, 1);
    let e = training::train_stage2(&data, &MixSpec::default(), &common::stage(1, 0), &s2).unwrap_err();
    assert!(e.to_string().contains("stage-I"), "{e}");
    let e = training::train_stage2_wo_cotrain(&data, &MixSpec::default(), &common::stage(1, 0), &s2).unwrap_err();
    assert!(e.to_string().contains("stage-I"), "{e}");
}

#[test]
fn stage1_refuses_unlabeled_only_data() {
    let data = common::human(2, 3);
    let r = training::train_stage1(&data, &MixSpec::single(SourceTag::HumanVideo), &common::model(), &common::vision(), &common::stage(1, 0));
    assert!(r.is_err());
}

#[test]
fn vanilla_never_touches_future_parts() {
    let data = common::demos(2, 1);
    let out = training::train_vanilla(&data, &MixSpec::default(), &common::model(), &common::vision(), &common::stage(3, 4)).unwrap();
    let fresh = Policy::new(&common::model(), &common::vision(), 4).unwrap();
    assert_eq!(future_encoder::checksum(&out.checkpoint.params), future_encoder::checksum(&fresh.store));
    assert_eq!(out.checkpoint.params.checksum(COND_QUERY), fresh.store.checksum(COND_QUERY));
    assert_ne!(out.checkpoint.params.checksum(DIT), fresh.store.checksum(DIT));
    assert_eq!(out.checkpoint.variant, training::variant::VANILLA);
}

#[test]
fn composed_stage1_loss_passes_gradient_check() {
    let data = common::demos(2, 1);
    let r = training::stage1_loss_grad_check(&data, &common::model(), &common::vision(), 2, 3, 1e-5, Some(2)).unwrap();
    assert!(r.max_rel_error < 1e-3, "{r:?}");
    assert!(r.checked > 0 && r.checked <= r.check_set);
}

#[test]
fn unlabeled_batch_gives_zero_dit_gradient() {
    let data = common::demos(2, 1);
    let s1 = common::stage1(&data, 1);
    let mut policy = s1.to_policy().unwrap();
    future_encoder::freeze(&mut policy.store);
    policy.store.set_frozen(COND_QUERY, false);
    let unl = common::human(2, 9);
    let mut rng = derived_rng(0, "t", 0);
    let samples = unl.sample(&MixSpec::single(SourceTag::HumanVideo), 4, false, &mut rng).unwrap();
    let batch = Batch::from_samples(&unl.episodes, &samples, 16, &s1.action_norm).unwrap();
    let enc = VisionEncoders::new(&common::vision()).unwrap();
    let inputs = LossInputs::from_batch(&batch, Some(&enc), &mut rng).unwrap();
    let mut g = Graph::with_params(&policy.store);
    let (l, br) = training::loss_stage2(&mut g, &policy, &inputs).unwrap();
    g.backward(l).unwrap();
    assert_eq!(br.flow_term, 0.0);
    let mut align = 0.0;
    for (id, grad) in g.param_grads() {
        let name = &policy.store.get(id).unwrap().name;
        if name.starts_with(DIT) {
            assert!(grad.iter().all(|x| *x == 0.0), "{name}");
        }
        if name.starts_with(COND_QUERY) {
            align += grad.iter().map(|x| x.abs()).sum::<f64>();
        }
    }
    assert!(align > 0.0);
}

/// A small stage-II setup reused across proptest cases.
struct Fixture {
    policy: Policy,
    inputs: LossInputs,
}

fn fixture() -> Fixture {
    let data = common::demos(2, 1);
    let mut policy = Policy::new(&common::model(), &common::vision(), 2).unwrap();
    future_encoder::freeze(&mut policy.store);
    let mut rng = derived_rng(1, "fixture", 0);
    let samples = data.sample(&MixSpec::default(), 4, true, &mut rng).unwrap();
    let norm = training::ActionNorm::fit(data.labeled());
    let batch = Batch::from_samples(&data.episodes, &samples, 16, &norm).unwrap();
    let enc = VisionEncoders::new(&common::vision()).unwrap();
    let inputs = LossInputs::from_batch(&batch, Some(&enc), &mut rng).unwrap();
    Fixture { policy, inputs }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Targets of unlabeled rows never reach the loss or any gradient.
    #[test]
    fn masking_soundness(labels in prop::collection::vec(any::<bool>(), 4), junk in -5.0f64..5.0) {
        thread_local!(static FX: Fixture = fixture());
        FX.with(|fx| {
            let eval = |inputs: &LossInputs| {
                let mut g = Graph::with_params(&fx.policy.store);
                let (l, br) = loss(&mut g, &fx.policy, inputs, Objective::STAGE2).unwrap();
                g.backward(l).unwrap();
                (br, g.param_grads())
            };
            let mut a = fx.inputs.clone();
            a.has_action_labels = labels.clone();
            let mut b = a.clone();
            let per = b.v_star.numel() / 4;
            for (i, &lab) in labels.iter().enumerate() {
                if !lab {
                    for x in &mut b.v_star.data_mut()[i * per..(i + 1) * per] {
                        *x += junk;
                    }
                }
            }
            let (ba, ga) = eval(&a);
            let (bb, gb) = eval(&b);
            prop_assert_eq!(ba.flow_term, bb.flow_term);
            prop_assert_eq!(ga, gb);
            for (i, &lab) in labels.iter().enumerate() {
                if !lab {
                    prop_assert_eq!(ba.per_sample_flow[i], 0.0);
                }
            }
            Ok(())
        })?;
    }

    #[test]
    fn align_term_in_unit_range(
        p in prop::collection::vec(-3.0f64..3.0, 24),
        q in prop::collection::vec(-3.0f64..3.0, 24),
    ) {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new([2, 3, 4], p).unwrap());
        let b = g.constant(Tensor::new([2, 3, 4], q).unwrap());
        let v = align_term(&mut g, a, b).unwrap();
        let x = g.item(v);
        prop_assert!((0.0..=2.0 + 1e-12).contains(&x), "{}", x);
        let same = align_term(&mut g, a, a).unwrap();
        prop_assert!(g.item(same).abs() < 1e-9);
    }
}
