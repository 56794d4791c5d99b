//! Repair loop contract on the corridor toy system and one desk-scale drone run.

use std::path::PathBuf;

use certrepair::certificates::{BarrierFn, CertKind, CertVerdict, LyapunovFn, PolicyFn};
use certrepair::dynamics::{BlackBoxEnv, EnvKind, SystemState};
use certrepair::harness::RunConfig;
use certrepair::monitors::MonitorKind;
use certrepair::nn::{Activation, DenseArray, Mlp, OutputTransform};
use certrepair::repair::{
    collect_violations, partition_barrier_data, partition_lyapunov_data, repair_loop, repair_round, repair_samples,
    Problem, RepairConfig, RoundStatus, Violation, ViolationSet,
};
use certrepair::training::{train_joint, Networks};

/// Corridor observation: `[x, v, obstacle dx, obstacle dv, goal dx]`.
const OBS: usize = 5;

fn linear(weights: [f64; OBS], bias: f64, transform: OutputTransform) -> Mlp {
    Mlp::from_parts(
        &[OBS, 1],
        Activation::Tanh,
        transform,
        vec![DenseArray::from_vec(&[1, OBS], weights.to_vec()).unwrap()],
        vec![DenseArray::vector(vec![bias])],
    )
    .unwrap()
}

/// Goal-seeking PD controller `a = tanh((5 - x) - 2 v)` that settles at the
/// goal, 3 m short of the obstacle; `B = (8 - x) - 1` stays positive along it
/// and `L B + B = 7 - x - v` never goes negative.
fn certified_pair() -> Networks {
    Networks {
        policy: PolicyFn::new(
            linear([0.0, -2.0, 0.0, 0.0, 1.0], 0.0, OutputTransform::Identity),
            vec![(-1.0, 1.0)],
        )
        .unwrap(),
        barrier: Some(BarrierFn::new(linear([0.0, 0.0, 1.0, 0.0, 0.0], -1.0, OutputTransform::Identity)).unwrap()),
        lyapunov: None,
    }
}

/// Full throttle into the obstacle.
fn reckless(barrier: BarrierFn) -> Networks {
    Networks {
        policy: PolicyFn::new(linear([0.0; OBS], 5.0, OutputTransform::Identity), vec![(-1.0, 1.0)]).unwrap(),
        barrier: Some(barrier),
        lyapunov: None,
    }
}

fn small_cfg() -> RepairConfig {
    RepairConfig {
        rollouts: 8,
        steps: 120,
        epochs: 3,
        eval_rollouts: 4,
        seed: 9,
        ..RepairConfig::default()
    }
}

fn violation(env: &BlackBoxEnv, x: f64, v: f64, kind: CertKind) -> Violation {
    let state = SystemState::new(vec![x, v], 0.0);
    let next = SystemState::new(vec![x + 0.1 * v, v], 0.1);
    Violation {
        obs: env.observe(&state),
        next_obs: env.observe(&next),
        dt: 0.1,
        verdict: CertVerdict {
            kind,
            mask: kind.bit(),
            ..CertVerdict::none(state.clone())
        },
        state,
        rollout: 0,
        step: 0,
    }
}

#[test]
fn certified_pair_raises_no_flag_and_stops_after_one_round() {
    let mut env = BlackBoxEnv::preset(EnvKind::Corridor1d);
    let nets = certified_pair();
    let cfg = small_cfg();
    let set = collect_violations(&env, &nets, &cfg, 1).unwrap();
    assert_eq!(set.flags_total, 0);
    assert!(set.is_empty());
    assert_eq!(set.unflagged.len(), cfg.rollouts * (cfg.steps + 1));

    let out = repair_loop(&mut env, &nets, &RepairConfig { max_rounds: 3, ..cfg }).unwrap();
    assert_eq!(out.rounds.len(), 1);
    assert_eq!(out.rounds[0].flags_total, 0);
    assert_eq!(out.networks, nets);
    assert_eq!(out.final_eval.sr, 1.0);
}

#[test]
fn no_rollouts_means_no_violations() {
    let env = BlackBoxEnv::preset(EnvKind::Corridor1d);
    let set = collect_violations(
        &env,
        &reckless(certified_pair().barrier.unwrap()),
        &RepairConfig {
            rollouts: 0,
            ..small_cfg()
        },
        1,
    )
    .unwrap();
    assert!(set.is_empty());
    assert_eq!(set.flags_total, 0);
}

#[test]
fn baseline_only_collects_unsafe_states() {
    let env = BlackBoxEnv::preset(EnvKind::Corridor1d);
    let nets = reckless(certified_pair().barrier.unwrap());
    let cfg = RepairConfig {
        monitor: MonitorKind::Baseline,
        ..small_cfg()
    };
    let set = collect_violations(&env, &nets, &cfg, 1).unwrap();
    assert!(!set.is_empty());
    assert!(set
        .entries
        .iter()
        .all(|e| env.in_unsafe(&e.state) && e.verdict.kind == CertKind::PropertyUnsafe));
    assert_eq!(set.flags_by_cause.keys().collect::<Vec<_>>(), ["PropertyUnsafe"]);
}

#[test]
fn barrier_partition_follows_set_membership() {
    let env = BlackBoxEnv::preset(EnvKind::Corridor1d);
    // B = v - 0.2.
    let barrier = BarrierFn::new(linear([0.0, 1.0, 0.0, 0.0, 0.0], -0.2, OutputTransform::Identity)).unwrap();
    let a = violation(&env, 1.0, 0.1, CertKind::InitCond);
    let b = violation(&env, 7.8, 0.4, CertKind::PropertyUnsafe);
    let set = ViolationSet {
        entries: vec![a.clone(), b.clone()],
        ..Default::default()
    };
    let data = partition_barrier_data(&set, &env, &barrier).unwrap();
    assert_eq!(data.d_init, vec![a.obs.clone()]);
    assert_eq!(data.d_safe, vec![b.obs.clone()]);
    assert_eq!(data.d_nondec.len(), 1);
    assert_eq!(data.d_nondec[0].obs, b.obs);
    assert_eq!(data.d_nondec[0].next_obs, b.next_obs);

    let both = violation(&env, 1.0, 0.3, CertKind::NonDecCond);
    let set = ViolationSet {
        entries: vec![both.clone()],
        ..Default::default()
    };
    let data = partition_barrier_data(&set, &env, &barrier).unwrap();
    assert_eq!(data.d_init, vec![both.obs.clone()]);
    assert!(data.d_safe.is_empty());
    assert_eq!(data.d_nondec[0].obs, both.obs);

    // A purely predictive flag with B < 0 is routed to the unsafe-side set.
    let early = violation(&env, 6.0, 0.1, CertKind::None);
    let set = ViolationSet {
        entries: vec![early.clone()],
        ..Default::default()
    };
    let data = partition_barrier_data(&set, &env, &barrier).unwrap();
    assert_eq!(data.d_safe, vec![early.obs]);
    assert!(data.d_init.is_empty() && data.d_nondec.is_empty());

    let empty = partition_barrier_data(&ViolationSet::default(), &env, &barrier).unwrap();
    assert!(empty.d_init.is_empty() && empty.d_safe.is_empty() && empty.d_nondec.is_empty());
}

#[test]
fn lyapunov_partition_splits_on_the_goal() {
    let env = BlackBoxEnv::preset(EnvKind::Corridor1d);
    let on_edge = violation(&env, 5.5, 0.0, CertKind::ZeroGoalCond);
    let inside = violation(&env, 5.1, 0.0, CertKind::ZeroGoalCond);
    let outside = violation(&env, 2.0, 0.3, CertKind::DecreasingCond);
    let set = ViolationSet {
        entries: vec![on_edge.clone(), inside.clone(), outside.clone()],
        ..Default::default()
    };
    let data = partition_lyapunov_data(&set, &env);
    assert_eq!(data.d_goal, vec![on_edge.obs, inside.obs]);
    assert_eq!(data.d_decrease.len(), 1);
    assert_eq!(data.d_decrease[0].obs, outside.obs);
    let empty = partition_lyapunov_data(&ViolationSet::default(), &env);
    assert!(empty.d_goal.is_empty() && empty.d_decrease.is_empty());
}

#[test]
fn collected_partitions_satisfy_their_predicates() {
    let env = BlackBoxEnv::preset(EnvKind::Corridor1d);
    // B = 7.5 - x - 0.5 v: slightly wrong near the obstacle.
    let barrier = BarrierFn::new(linear([0.0, -0.5, 1.0, 0.0, 0.0], -0.5, OutputTransform::Identity)).unwrap();
    let nets = reckless(barrier.clone());
    let set = collect_violations(&env, &nets, &small_cfg(), 1).unwrap();
    assert!(set.len() > 10);
    let data = partition_barrier_data(&set, &env, &barrier).unwrap();
    let flagged: Vec<&Vec<f64>> = set.entries.iter().map(|e| &e.obs).collect();
    let state_of = |obs: &Vec<f64>| &set.entries.iter().find(|e| &e.obs == obs).unwrap().state;
    for o in &data.d_init {
        assert!(flagged.contains(&o) && env.in_initial(state_of(o)));
    }
    for o in &data.d_safe {
        assert!(flagged.contains(&o) && env.in_unsafe(state_of(o)));
    }
    for t in &data.d_nondec {
        assert!(flagged.contains(&&t.obs) && barrier.value(&t.obs).unwrap() >= 0.0);
    }
    assert!(!data.d_safe.is_empty() && !data.d_nondec.is_empty());
}

#[test]
fn collection_touches_the_environment_only_through_its_interface() {
    let env = BlackBoxEnv::preset(EnvKind::Corridor1d);
    let cfg = small_cfg();
    let before = env.call_counts();
    collect_violations(&env, &certified_pair(), &cfg, 1).unwrap();
    let after = env.call_counts();
    assert_eq!(after.resets - before.resets, cfg.rollouts as u64);
    assert_eq!(after.steps - before.steps, (cfg.rollouts * (cfg.steps + 1)) as u64);
    assert!(after.observes > before.observes);
    assert!(after.predicates > before.predicates);
}

#[test]
fn collection_and_repair_are_deterministic() {
    let env = BlackBoxEnv::preset(EnvKind::Corridor1d);
    let barrier = BarrierFn::new(linear([0.0, -0.5, 1.0, 0.0, 0.0], -0.5, OutputTransform::Identity)).unwrap();
    let nets = reckless(barrier);
    let cfg = small_cfg();
    assert_eq!(
        collect_violations(&env, &nets, &cfg, 2).unwrap(),
        collect_violations(&env, &nets, &cfg, 2).unwrap()
    );
    let run = || repair_loop(&mut env.clone(), &nets, &cfg).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.networks, b.networks);
    assert_eq!(a.rounds.len(), 1);
    assert_eq!(a.rounds[0].flags_total, b.rounds[0].flags_total);
}

#[test]
fn cert_only_repair_freezes_the_policy() {
    let mut env = BlackBoxEnv::preset(EnvKind::Corridor1d);
    let barrier = BarrierFn::new(linear([0.0, -0.5, 1.0, 0.0, 0.0], -0.5, OutputTransform::Identity)).unwrap();
    let nets = reckless(barrier);
    let cfg = RepairConfig {
        problem: Problem::CertOnly,
        ..small_cfg()
    };
    let out = repair_loop(&mut env, &nets, &cfg).unwrap();
    assert_eq!(out.networks.policy.net().params(), nets.policy.net().params());
    assert_ne!(out.networks.barrier, nets.barrier);
}

#[test]
fn empty_repair_data_leaves_the_networks_alone() {
    let mut env = BlackBoxEnv::preset(EnvKind::Corridor1d);
    let nets = certified_pair();
    let out = repair_round(&mut env, &nets, Vec::new(), &[], &small_cfg(), 1).unwrap();
    assert_eq!(out.status, RoundStatus::NothingToRepair);
    assert_eq!(out.networks, nets);
}

#[test]
fn rounds_are_capped_and_reported() {
    let mut env = BlackBoxEnv::preset(EnvKind::Corridor1d);
    let barrier = BarrierFn::new(linear([0.0, -0.5, 1.0, 0.0, 0.0], -0.5, OutputTransform::Identity)).unwrap();
    let nets = reckless(barrier);
    let one = repair_loop(&mut env, &nets, &small_cfg()).unwrap();
    assert_eq!(one.rounds.len(), 1);
    assert!(one.rounds[0].flags_total > 0);
    // The reckless policy stays unsafe after a few epochs, so every round flags.
    let three = repair_loop(
        &mut env,
        &nets,
        &RepairConfig {
            max_rounds: 3,
            ..small_cfg()
        },
    )
    .unwrap();
    assert_eq!(three.rounds.iter().map(|r| r.round).collect::<Vec<_>>(), [1, 2, 3]);
    assert!(three
        .rounds
        .iter()
        .all(|r| r.flags_total > 0 && !r.flags_by_cause.is_empty()));
    assert!(repair_loop(
        &mut env,
        &nets,
        &RepairConfig {
            max_rounds: 0,
            ..small_cfg()
        }
    )
    .is_err());
}

#[test]
fn lyapunov_repair_needs_a_lyapunov_network() {
    let mut env = BlackBoxEnv::preset(EnvKind::Corridor1d);
    let cfg = RepairConfig {
        target: certrepair::repair::CertTarget::Lyapunov,
        ..small_cfg()
    };
    assert!(repair_loop(&mut env, &certified_pair(), &cfg).is_err());
    let mut nets = certified_pair();
    // V = (goal dx)^2.
    nets.lyapunov =
        Some(LyapunovFn::new(linear([0.0, 0.0, 0.0, 0.0, 1.0], 0.0, OutputTransform::NonNegative)).unwrap());
    let set = collect_violations(&env, &nets, &cfg, 1).unwrap();
    let samples = repair_samples(&set, &env, &nets, cfg.target).unwrap();
    assert_eq!(samples.len(), set.len());
    repair_loop(&mut env, &nets, &cfg).unwrap();
}

#[test]
fn one_certpm_round_reduces_flags_on_the_drone() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/drone_desk.json");
    let cfg = RunConfig::load(&path).unwrap().with_seed(0);
    let mut env = cfg.build_env().unwrap();
    let trained = train_joint(&mut env, &cfg.train).unwrap().networks;
    let repaired = repair_loop(&mut env, &trained, &cfg.repair).unwrap().networks;
    // 50 fresh rollouts, the same initial states for both networks.
    let probe = RepairConfig {
        rollouts: 50,
        ..cfg.repair.clone()
    };
    let before = collect_violations(&env, &trained, &probe, 1_000).unwrap().flags_total;
    let after = collect_violations(&env, &repaired, &probe, 1_000).unwrap().flags_total;
    assert!(after < before, "flags {before} -> {after}");
}
