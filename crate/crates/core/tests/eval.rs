mod common;

use wog::eval::{
    condition_probe, evaluate, relative_drop, rollout, suite, token_cosines, EvalOptions, ExpertController, PolicyHandle,
    Setup,
};
use wog::policy::Policy;
use wog::sim::Task;
use wog::tensor::Tensor;
use wog::training::ActionNorm;
use wog::{future_encoder, vision};

fn opts(n: usize) -> EvalOptions {
    EvalOptions {
        n_trials: n,
        ..EvalOptions::default()
    }
}

#[test]
fn expert_solves_id_and_ood_cells() {
    let report = evaluate(&ExpertController::default(), &suite(&Task::ALL, &Setup::ALL), &opts(10)).unwrap();
    assert_eq!(report.cells.len(), 12);
    for c in &report.cells {
        assert_eq!(c.success_rate, 1.0, "{} {}", c.task, c.setup.as_str());
        assert!(c.mean_episode_length <= 80.0);
    }
}

#[test]
fn random_weight_policies_rarely_succeed() {
    let data = common::demos(4, 1);
    let norm = ActionNorm::fit(data.labeled());
    let o = opts(1);
    let cells = suite(&[Task::PickPlace], &[Setup::Id]);
    let mut wins = 0;
    for seed in 0..100 {
        let policy = Policy::new(&common::model(), &common::vision(), seed).unwrap();
        let handle = PolicyHandle::new(policy, norm.clone(), "random");
        let opts = EvalOptions { seed, ..o.clone() };
        wins += evaluate(&handle, &cells, &opts).unwrap().cells[0].successes;
    }
    assert!(wins < 5, "{wins}/100");
}

#[test]
fn evaluation_is_deterministic_and_isolated() {
    let ck = common::stage2(&common::demos(2, 1), 2);
    let handle = PolicyHandle::from_checkpoint(&ck).unwrap();
    let cells = suite(&[Task::PickPlace, Task::CloseDoor], &[Setup::Id, Setup::Background]);
    vision::reset_call_count();
    future_encoder::reset_call_count();
    let a = evaluate(&handle, &cells, &opts(3)).unwrap();
    assert_eq!((vision::call_count(), future_encoder::call_count()), (0, 0));
    assert_eq!((a.vision_calls, a.future_encoder_calls), (0, 0));
    let b = evaluate(&handle, &cells, &opts(3)).unwrap();
    assert_eq!(a.to_jsonl(), b.to_jsonl());
    assert_eq!(a.cells.len(), 4);
    assert!(a.cell(Task::CloseDoor, Setup::Background).is_some());
}

#[test]
fn rollout_respects_step_cap() {
    let env = opts(1).env(suite(&[Task::FoldCorners], &[Setup::Id])[0], 0);
    let r = rollout(&ExpertController::default(), &env, 80, 8).unwrap();
    assert!(r.success);
    assert!(r.len() <= 80);
    let r = rollout(&ExpertController::default(), &env, 3, 8).unwrap();
    assert_eq!(r.len(), 3);
    assert!(!r.success);
}

#[test]
fn stage_one_checkpoints_cannot_be_evaluated_or_probed() {
    let data = common::demos(2, 1);
    let s1 = common::stage1(&data, 1);
    assert!(PolicyHandle::from_checkpoint(&s1).is_err());
    let e = condition_probe(&s1, &data, 8, 0).unwrap_err();
    assert!(e.to_string().contains("stage"), "{e}");
}

#[test]
fn probe_reports_histogram_of_all_tokens() {
    let data = common::demos(2, 1);
    let ck = common::stage2(&data, 2);
    let p = condition_probe(&ck, &data, 10, 0).unwrap();
    assert_eq!(p.samples, 10);
    assert_eq!(p.tokens, 10 * common::model().n_queries);
    assert_eq!(p.histogram.iter().sum::<u64>() as usize, p.tokens);
    assert!((-1.0..=1.0).contains(&p.mean_token_cosine));
}

#[test]
fn token_cosines_of_identical_rows_are_one() {
    let t = Tensor::new([2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]).unwrap();
    let c = token_cosines(&t, &t).unwrap();
    assert!(c.iter().all(|x| (x - 1.0).abs() < 1e-12));
    let neg = Tensor::new([2, 3], t.data().iter().map(|x| -x).collect()).unwrap();
    assert!(token_cosines(&t, &neg).unwrap().iter().all(|x| (x + 1.0).abs() < 1e-12));
}

#[test]
fn relative_drop_cases() {
    assert_eq!(relative_drop(0.5, 0.25), 0.5);
    assert_eq!(relative_drop(0.4, 0.4), 0.0);
    assert_eq!(relative_drop(0.0, 0.0), 0.0);
    assert!(relative_drop(0.2, 0.4) < 0.0);
}
