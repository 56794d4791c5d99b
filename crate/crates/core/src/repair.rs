//! Monitor-driven repair: run the closed loop under a monitor, collect the
//! states it flags, sort them into the certificate-loss data sets and retrain.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::certificates::{BarrierFn, CertVerdict};
use crate::dynamics::{parallel_rollouts, BlackBoxEnv, SystemState};
use crate::metrics::{evaluate, EvalConfig, EvalReport};
use crate::monitors::{monitor_rollout, Certificate, MonitorKind};
use crate::training::{
    BarrierDataset, EpochLosses, FitOptions, Learner, LyapunovDataset, Networks, Roles, TrainingSample, Transition,
};
use crate::{seeds, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Problem {
    /// Retrain the policy and the certificate.
    Joint,
    /// Retrain the certificate only; the policy is frozen.
    CertOnly,
}

/// Which certificate the monitor checks and the repair retrains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum CertTarget {
    Barrier,
    Lyapunov,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct RepairConfig {
    /// Monitored rollouts per round.
    pub rollouts: usize,
    /// Monitoring intervals per rollout.
    pub steps: usize,
    pub dt: f64,
    pub monitor: MonitorKind,
    pub problem: Problem,
    pub target: CertTarget,
    pub max_rounds: usize,
    /// Retraining epochs per round.
    pub epochs: usize,
    pub fit: FitOptions,
    /// Replay samples per repair sample.
    pub replay_ratio: f64,
    /// Share of the replay drawn from the initial set rather than the whole space.
    pub replay_initial_fraction: f64,
    /// Share of the replay drawn from unflagged states of the monitored rollouts.
    pub replay_on_policy_fraction: f64,
    pub zero_tol: f64,
    /// Rollouts used to score each round.
    pub eval_rollouts: usize,
    pub seed: u64,
}

impl Default for RepairConfig {
    fn default() -> Self {
        Self {
            rollouts: 200,
            steps: 200,
            dt: 0.1,
            monitor: MonitorKind::Certpm,
            problem: Problem::Joint,
            target: CertTarget::Barrier,
            max_rounds: 1,
            epochs: 60,
            fit: FitOptions {
                lr_policy: 3e-3,
                lr_certificate: 3e-3,
                ..FitOptions::default()
            },
            replay_ratio: 1.0,
            replay_initial_fraction: 0.1,
            replay_on_policy_fraction: 0.3,
            zero_tol: 1e-3,
            eval_rollouts: 50,
            seed: 0,
        }
    }
}

impl RepairConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_rounds == 0 {
            return Err(Error::Config("max_rounds must be at least 1".into()));
        }
        if self.steps == 0
            || !(self.dt > 0.0)
            || self.eval_rollouts == 0
            || !(self.replay_ratio >= 0.0)
            || !(0.0..=1.0).contains(&self.replay_initial_fraction)
            || !(0.0..=1.0).contains(&self.replay_on_policy_fraction)
            || self.replay_initial_fraction + self.replay_on_policy_fraction > 1.0
            || !(self.zero_tol >= 0.0)
            || self.fit.batch_size == 0
        {
            return Err(Error::Config(format!("invalid repair configuration {self:?}")));
        }
        if let MonitorKind::Predpm { surrogate, .. } = &self.monitor {
            surrogate.validate()?;
            if self.target == CertTarget::Lyapunov {
                return Err(Error::Config("the predictive monitor covers safety only".into()));
            }
        }
        Ok(())
    }

    fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            rollouts: self.eval_rollouts,
            steps: self.steps,
            dt: self.dt,
            zero_tol: self.zero_tol,
        }
    }
}

/// A flagged state with the observation one interval later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub state: SystemState,
    pub obs: Vec<f64>,
    pub next_obs: Vec<f64>,
    /// Time between the state and the successor observation.
    pub dt: f64,
    /// The violated condition; `kind` is `None` for purely predictive flags.
    pub verdict: CertVerdict,
    pub rollout: usize,
    pub step: usize,
}

impl Violation {
    pub fn is_predictive(&self) -> bool {
        !self.verdict.is_violation()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ViolationSet {
    pub entries: Vec<Violation>,
    /// Monitor queries that returned 1.
    pub flags_total: usize,
    /// Flags by condition name (`Predictive` for threshold-only warnings).
    pub flags_by_cause: BTreeMap<String, u64>,
    /// Monitored states that were not recorded as violations.
    pub unflagged: Vec<SystemState>,
}

impl ViolationSet {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
}

fn certificate_of(nets: &Networks, target: CertTarget, zero_tol: f64) -> Result<Certificate<'_>> {
    match target {
        CertTarget::Barrier => nets
            .barrier
            .as_ref()
            .map(Certificate::Barrier)
            .ok_or_else(|| Error::Config("barrier repair needs a barrier network".into())),
        CertTarget::Lyapunov => nets
            .lyapunov
            .as_ref()
            .map(|v| Certificate::Lyapunov(v, zero_tol))
            .ok_or_else(|| Error::Config("Lyapunov repair needs a Lyapunov network".into())),
    }
}

/// Runs `cfg.rollouts` monitored executions and collects every flagged state.
///
/// A state is recorded where its condition failed: a non-decreasing (or
/// decreasing) violation detected at `x_n` is recorded at `x_{n-1}`.
/// `round` selects the random streams, so every round sees fresh initial states.
pub fn collect_violations(env: &BlackBoxEnv, nets: &Networks, cfg: &RepairConfig, round: u64) -> Result<ViolationSet> {
    cfg.validate()?;
    let certificate = certificate_of(nets, cfg.target, cfg.zero_tol)?;
    // One extra interval so the last monitored state has a successor.
    let runs = parallel_rollouts(
        env,
        &nets.policy,
        cfg.rollouts,
        cfg.steps + 1,
        cfg.dt,
        seeds::derive_seed(cfg.seed, "repair-collect", round),
    )?;
    type RunHarvest = (Vec<Violation>, Vec<SystemState>, usize, BTreeMap<String, u64>);
    let per_run: Vec<RunHarvest> = runs
        .par_iter()
        .enumerate()
        .map(|(r, run)| -> Result<_> {
            let verdicts = monitor_rollout(&cfg.monitor, run, certificate, env, cfg.steps)?;
            let pts = run.trajectory.points();
            let mut entries: BTreeMap<usize, Violation> = BTreeMap::new();
            let mut flags = 0;
            let mut causes: BTreeMap<String, u64> = BTreeMap::new();
            let mut record = |step: usize, verdict: CertVerdict| {
                entries
                    .entry(step)
                    .and_modify(|e| {
                        if e.is_predictive() && verdict.is_violation() {
                            e.verdict = verdict.clone();
                        } else {
                            e.verdict.mask |= verdict.mask;
                        }
                    })
                    .or_insert_with(|| Violation {
                        state: pts[step].clone(),
                        obs: run.observations[step].clone(),
                        next_obs: run.observations[step + 1].clone(),
                        dt: pts[step + 1].timestamp - pts[step].timestamp,
                        verdict,
                        rollout: r,
                        step,
                    });
            };
            for (n, v) in verdicts.into_iter().enumerate() {
                if !v.flagged {
                    continue;
                }
                flags += 1;
                let mut any = false;
                if let Some(d) = v.deferred {
                    *causes.entry(d.kind.name().to_string()).or_default() += 1;
                    record(n - 1, d);
                    any = true;
                }
                if v.cause.is_violation() || !any {
                    let name = if v.cause.is_violation() {
                        v.cause.kind.name()
                    } else {
                        "Predictive"
                    };
                    *causes.entry(name.to_string()).or_default() += 1;
                    record(n, v.cause);
                }
            }
            let unflagged = (0..=cfg.steps)
                .filter(|n| !entries.contains_key(n))
                .map(|n| pts[n].clone())
                .collect();
            Ok((entries.into_values().collect(), unflagged, flags, causes))
        })
        .collect::<Result<_>>()?;

    let mut set = ViolationSet::default();
    for (entries, unflagged, flags, causes) in per_run {
        set.entries.extend(entries);
        set.unflagged.extend(unflagged);
        set.flags_total += flags;
        for (k, c) in causes {
            *set.flags_by_cause.entry(k).or_default() += c;
        }
    }
    Ok(set)
}

/// Barrier-loss roles of a flagged state: `X_0`, `X_u` and `{B >= 0}`
/// membership. A purely predictive flag with `B < 0` also goes to the
/// unsafe-side set.
fn barrier_roles(v: &Violation, env: &BlackBoxEnv, barrier: &BarrierFn) -> Result<Roles> {
    let b = barrier.value(&v.obs)?;
    Ok(Roles {
        init: env.in_initial(&v.state),
        safe: env.in_unsafe(&v.state) || (v.is_predictive() && b < 0.0),
        nondec: b >= 0.0,
        ..Default::default()
    })
}

fn lyapunov_roles(v: &Violation, env: &BlackBoxEnv) -> Roles {
    let goal = env.in_goal(&v.state);
    Roles {
        goal,
        decrease: !goal,
        ..Default::default()
    }
}

/// Flagged states split into the barrier-loss sets; the sets may overlap.
pub fn partition_barrier_data(v: &ViolationSet, env: &BlackBoxEnv, barrier: &BarrierFn) -> Result<BarrierDataset> {
    let mut data = BarrierDataset::default();
    for e in &v.entries {
        let roles = barrier_roles(e, env, barrier)?;
        if roles.init {
            data.d_init.push(e.obs.clone());
        }
        if roles.safe {
            data.d_safe.push(e.obs.clone());
        }
        if roles.nondec {
            data.d_nondec
                .push(Transition::new(e.obs.clone(), e.next_obs.clone(), e.dt));
        }
    }
    Ok(data)
}

/// Flagged states split by goal membership.
pub fn partition_lyapunov_data(v: &ViolationSet, env: &BlackBoxEnv) -> LyapunovDataset {
    let mut data = LyapunovDataset::default();
    for e in &v.entries {
        let roles = lyapunov_roles(e, env);
        if roles.goal {
            data.d_goal.push(e.obs.clone());
        } else {
            data.d_decrease
                .push(Transition::new(e.obs.clone(), e.next_obs.clone(), e.dt));
        }
    }
    data
}

/// The flagged states as training samples with their partition roles and
/// recorded successors.
pub fn repair_samples(
    v: &ViolationSet,
    env: &BlackBoxEnv,
    nets: &Networks,
    target: CertTarget,
) -> Result<Vec<TrainingSample>> {
    v.entries
        .iter()
        .map(|e| {
            let roles = match target {
                CertTarget::Barrier => {
                    let b = nets
                        .barrier
                        .as_ref()
                        .ok_or_else(|| Error::Config("barrier repair needs a barrier network".into()))?;
                    barrier_roles(e, env, b)?
                }
                CertTarget::Lyapunov => lyapunov_roles(e, env),
            };
            Ok(TrainingSample {
                state: e.state.clone(),
                obs: e.obs.clone(),
                roles,
                next_obs: Some(e.next_obs.clone()),
            })
        })
        .filter(|s| s.as_ref().map_or(true, |s| s.roles != Roles::default()))
        .collect()
}

fn restrict(roles: Roles, target: CertTarget) -> Roles {
    match target {
        CertTarget::Barrier => Roles {
            goal: false,
            decrease: false,
            ..roles
        },
        CertTarget::Lyapunov => Roles {
            goal: roles.goal,
            decrease: roles.decrease,
            ..Default::default()
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundStatus {
    Repaired,
    NothingToRepair,
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub networks: Networks,
    pub status: RoundStatus,
    pub curve: Vec<EpochLosses>,
}

/// Retrains on the repair samples mixed with a fresh replay sample of the
/// original training distribution: uniform states, initial states and
/// states from `on_policy` (the unflagged part of the monitored rollouts).
///
/// In [`Problem::CertOnly`] the policy is left bitwise unchanged.
pub fn repair_round(
    env: &mut BlackBoxEnv,
    nets: &Networks,
    samples: Vec<TrainingSample>,
    on_policy: &[SystemState],
    cfg: &RepairConfig,
    round: u64,
) -> Result<RoundOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        log::info!("round {round}: nothing to repair");
        return Ok(RoundOutcome {
            networks: nets.clone(),
            status: RoundStatus::NothingToRepair,
            curve: Vec::new(),
        });
    }
    let mut working = Networks {
        policy: nets.policy.clone(),
        barrier: if cfg.target == CertTarget::Barrier {
            nets.barrier.clone()
        } else {
            None
        },
        lyapunov: if cfg.target == CertTarget::Lyapunov {
            nets.lyapunov.clone()
        } else {
            None
        },
    };
    certificate_of(&working, cfg.target, cfg.zero_tol)?;

    let mut rng = seeds::stream(cfg.seed, "repair-replay", round);
    let replay_count = (cfg.replay_ratio * samples.len() as f64).round() as usize;
    let from_initial = (cfg.replay_initial_fraction * replay_count as f64).round() as usize;
    let from_rollouts = if on_policy.is_empty() {
        0
    } else {
        (cfg.replay_on_policy_fraction * replay_count as f64).round() as usize
    };
    let horizon = cfg.steps as f64 * cfg.dt;
    let mut replay: Vec<SystemState> =
        env.sample_states(replay_count - from_initial - from_rollouts, horizon, &mut rng);
    replay.extend(env.sample_initial_states(from_initial, &mut rng)?);
    replay.extend(on_policy.choose_multiple(&mut rng, from_rollouts).cloned());

    let mut pool: Vec<TrainingSample> = samples
        .into_iter()
        .map(|mut s| {
            s.roles = restrict(s.roles, cfg.target);
            s
        })
        .collect();
    pool.extend(replay.into_iter().map(|s| {
        let roles = restrict(Roles::by_membership(env, &s), cfg.target);
        TrainingSample::new(env, s, roles)
    }));

    let train_policy = cfg.problem == Problem::Joint;
    let mut learner = Learner::new(&working, cfg.fit.clone(), train_policy)?;
    let mut shuffle = seeds::stream(cfg.seed, "repair-shuffle", round);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        curve.push(learner.epoch(env, &mut working, &mut pool, &mut shuffle)?);
    }

    if !train_policy && working.policy.net().params() != nets.policy.net().params() {
        return Err(Error::Precondition(
            "certificate-only repair modified the policy".into(),
        ));
    }
    let mut out = nets.clone();
    out.policy = working.policy;
    match cfg.target {
        CertTarget::Barrier => out.barrier = working.barrier,
        CertTarget::Lyapunov => out.lyapunov = working.lyapunov,
    }
    Ok(RoundOutcome {
        networks: out,
        status: RoundStatus::Repaired,
        curve,
    })
}

/// One row of the per-round report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub flags_total: usize,
    /// `Kind=count` pairs separated by `;`.
    pub flags_by_cause: String,
    #[serde(rename = "SR")]
    pub sr: f64,
    #[serde(rename = "BR")]
    pub br: Option<f64>,
    #[serde(rename = "NDR")]
    pub ndr: Option<f64>,
    #[serde(rename = "DR")]
    pub dr: Option<f64>,
    /// Seconds spent on the round; kept out of the CSV so reports stay reproducible.
    #[serde(skip)]
    pub wall_time: f64,
}

pub fn write_report_csv(path: &Path, rows: &[RoundReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RepairOutcome {
    pub networks: Networks,
    pub rounds: Vec<RoundReport>,
    /// Metrics of the final networks on the last round's evaluation rollouts.
    pub final_eval: EvalReport,
}

/// Collect, partition and retrain until a round's monitored rollouts raise no
/// flag or `max_rounds` rounds were run.
///
/// Each row reports the flags collected in that round and the metrics of the
/// networks leaving it, measured on fresh rollouts.
pub fn repair_loop(env: &mut BlackBoxEnv, nets: &Networks, cfg: &RepairConfig) -> Result<RepairOutcome> {
    cfg.validate()?;
    let mut nets = nets.clone();
    let mut rounds = Vec::new();
    let mut final_eval = None;
    for round in 1..=cfg.max_rounds {
        let started = Instant::now();
        let violations = collect_violations(env, &nets, cfg, round as u64)?;
        let clean = violations.flags_total == 0;
        if !clean {
            let samples = repair_samples(&violations, env, &nets, cfg.target)?;
            nets = repair_round(env, &nets, samples, &violations.unflagged, cfg, round as u64)?.networks;
        }
        let eval = evaluate(
            env,
            &nets,
            &cfg.eval_config(),
            seeds::derive_seed(cfg.seed, "repair-eval", round as u64),
        )?;
        rounds.push(RoundReport {
            round,
            flags_total: violations.flags_total,
            flags_by_cause: violations
                .flags_by_cause
                .iter()
                .map(|(k, c)| format!("{k}={c}"))
                .collect::<Vec<_>>()
                .join(";"),
            sr: eval.sr,
            br: eval.br,
            ndr: eval.ndr,
            dr: eval.dr,
            wall_time: started.elapsed().as_secs_f64(),
        });
        final_eval = Some(eval);
        if clean {
            break;
        }
    }
    Ok(RepairOutcome {
        networks: nets,
        rounds,
        final_eval: final_eval.expect("at least one round runs"),
    })
}
