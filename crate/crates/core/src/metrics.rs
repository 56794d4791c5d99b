//! Time-fraction metrics of executions and their aggregation over rollouts.
//!
//! All rates are discrete: fractions of observed time points (or of
//! consecutive pairs) on a uniform grid.

use std::collections::BTreeMap;
use std::path::Path;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::certificates::{
    barrier_check, lie_derivative_fd, lyapunov_check, BarrierFn, CertKind, LyapunovFn, NextObservation,
};
use crate::dynamics::{parallel_rollouts, BlackBoxEnv, Rollout, Trajectory};
use crate::training::Networks;
use crate::{Error, Result};

/// A rate together with whether it had anything to measure.
///
/// An empty denominator is reported as 1.0 with `empty` set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub value: f64,
    pub empty: bool,
}

impl Rate {
    fn of(hits: usize, total: usize) -> Self {
        if total == 0 {
            Self {
                value: 1.0,
                empty: true,
            }
        } else {
            Self {
                value: hits as f64 / total as f64,
                empty: false,
            }
        }
    }
}

fn require_points(n: usize, min: usize) -> Result<()> {
    if n < min {
        return Err(Error::InvalidInput(format!(
            "need at least {min} trajectory points, got {n}"
        )));
    }
    Ok(())
}

/// Fraction of time points outside the unsafe set (SR).
pub fn safety_rate(traj: &Trajectory, env: &BlackBoxEnv) -> Result<f64> {
    require_points(traj.len(), 1)?;
    let safe = traj.points().iter().filter(|x| !env.in_unsafe(x)).count();
    Ok(safe as f64 / traj.len() as f64)
}

/// Fraction of time points with `B >= 0` (BR).
pub fn barrier_rate(run: &Rollout, barrier: &BarrierFn) -> Result<f64> {
    require_points(run.observations.len(), 1)?;
    let mut inside = 0;
    for o in &run.observations {
        if barrier.value(o)? >= 0.0 {
            inside += 1;
        }
    }
    Ok(inside as f64 / run.observations.len() as f64)
}

/// Over consecutive pairs starting at `B >= 0`, the fraction with
/// `L B + B >= 0` (NDR). Pairs starting at `B < 0` are not counted.
pub fn nondec_rate(run: &Rollout, barrier: &BarrierFn) -> Result<Rate> {
    require_points(run.observations.len(), 2)?;
    let values = run
        .observations
        .iter()
        .map(|o| barrier.value(o))
        .collect::<Result<Vec<_>>>()?;
    let times: Vec<f64> = run.trajectory.times().collect();
    let (mut ok, mut total) = (0, 0);
    for n in 0..values.len() - 1 {
        if values[n] >= 0.0 {
            total += 1;
            if lie_derivative_fd(values[n], values[n + 1], times[n], times[n + 1])? + values[n] >= 0.0 {
                ok += 1;
            }
        }
    }
    Ok(Rate::of(ok, total))
}

/// Over consecutive pairs starting off the goal, the fraction with `L V < 0` (DR).
pub fn decreasing_rate(run: &Rollout, lyapunov: &LyapunovFn, env: &BlackBoxEnv) -> Result<Rate> {
    require_points(run.observations.len(), 2)?;
    let points = run.trajectory.points();
    let (mut ok, mut total) = (0, 0);
    for n in 0..points.len() - 1 {
        if env.in_goal(&points[n]) {
            continue;
        }
        total += 1;
        let v = lyapunov.value(&run.observations[n])?;
        let v1 = lyapunov.value(&run.observations[n + 1])?;
        if lie_derivative_fd(v, v1, points[n].timestamp, points[n + 1].timestamp)? < 0.0 {
            ok += 1;
        }
    }
    Ok(Rate::of(ok, total))
}

/// Metrics of one execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    pub sr: f64,
    pub br: Option<f64>,
    pub ndr: Option<Rate>,
    pub dr: Option<Rate>,
    /// Number of states at which each condition is violated.
    pub violations: BTreeMap<CertKind, u64>,
}

/// Per-state condition violations of an execution; every violated condition
/// at a state is counted, not only the first.
pub fn count_violations(
    run: &Rollout,
    nets: &Networks,
    env: &BlackBoxEnv,
    zero_tol: f64,
) -> Result<BTreeMap<CertKind, u64>> {
    let points = run.trajectory.points();
    let mut counts = BTreeMap::new();
    let mut tally = |mask: u8| {
        for k in CertKind::VIOLATIONS {
            if mask & k.bit() != 0 {
                *counts.entry(k).or_insert(0) += 1;
            }
        }
    };
    for (n, x) in points.iter().enumerate() {
        let next = run.observations.get(n + 1).map(|obs| NextObservation {
            obs,
            time: points[n + 1].timestamp,
        });
        let mut mask = 0;
        if let Some(b) = &nets.barrier {
            mask |= barrier_check(b, &run.observations[n], next, x, env)?.mask;
        } else if env.in_unsafe(x) {
            mask |= CertKind::PropertyUnsafe.bit();
        }
        if let Some(v) = &nets.lyapunov {
            mask |= lyapunov_check(v, &run.observations[n], next, x, env, zero_tol)?.mask;
        }
        tally(mask);
    }
    Ok(counts)
}

pub fn trajectory_metrics(
    run: &Rollout,
    nets: &Networks,
    env: &BlackBoxEnv,
    zero_tol: f64,
) -> Result<TrajectoryMetrics> {
    Ok(TrajectoryMetrics {
        sr: safety_rate(&run.trajectory, env)?,
        br: nets.barrier.as_ref().map(|b| barrier_rate(run, b)).transpose()?,
        ndr: nets.barrier.as_ref().map(|b| nondec_rate(run, b)).transpose()?,
        dr: nets
            .lyapunov
            .as_ref()
            .map(|v| decreasing_rate(run, v, env))
            .transpose()?,
        violations: count_violations(run, nets, env, zero_tol)?,
    })
}

/// Means over executions; certificate rates are absent without the certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rollouts: usize,
    pub sr: f64,
    pub br: Option<f64>,
    pub ndr: Option<f64>,
    pub dr: Option<f64>,
    /// Executions whose NDR had no eligible pair.
    pub ndr_empty: usize,
    pub violations: BTreeMap<CertKind, u64>,
    pub per_trajectory: Vec<TrajectoryMetrics>,
}

impl EvalReport {
    pub fn from_trajectories(per_trajectory: Vec<TrajectoryMetrics>) -> Result<Self> {
        if per_trajectory.is_empty() {
            return Err(Error::InvalidInput("no trajectories to aggregate".into()));
        }
        let n = per_trajectory.len() as f64;
        let mean = |f: &dyn Fn(&TrajectoryMetrics) -> Option<f64>| -> Option<f64> {
            per_trajectory.iter().map(f).sum::<Option<f64>>().map(|s| s / n)
        };
        let mut violations = BTreeMap::new();
        for t in &per_trajectory {
            for (k, c) in &t.violations {
                *violations.entry(*k).or_insert(0) += c;
            }
        }
        Ok(Self {
            rollouts: per_trajectory.len(),
            sr: mean(&|t| Some(t.sr)).unwrap_or(0.0),
            br: mean(&|t| t.br),
            ndr: mean(&|t| t.ndr.map(|r| r.value)),
            dr: mean(&|t| t.dr.map(|r| r.value)),
            ndr_empty: per_trajectory.iter().filter(|t| t.ndr.is_some_and(|r| r.empty)).count(),
            violations,
            per_trajectory,
        })
    }

    pub fn violation_count(&self, kind: CertKind) -> u64 {
        self.violations.get(&kind).copied().unwrap_or(0)
    }

    /// Violations of certificate conditions, property violations excluded.
    pub fn certificate_violations(&self) -> u64 {
        self.violations
            .iter()
            .filter(|(k, _)| k.is_certificate())
            .map(|(_, c)| c)
            .sum()
    }

    pub fn summary_row(&self) -> EvalRow {
        let count = |k| self.violation_count(k);
        EvalRow {
            rollouts: self.rollouts,
            sr: self.sr,
            br: self.br,
            ndr: self.ndr,
            dr: self.dr,
            ndr_empty: self.ndr_empty,
            property_unsafe: count(CertKind::PropertyUnsafe),
            init_cond: count(CertKind::InitCond),
            safety_cond: count(CertKind::SafetyCond),
            nondec_cond: count(CertKind::NonDecCond),
            zero_goal_cond: count(CertKind::ZeroGoalCond),
            positivity_cond: count(CertKind::PositivityCond),
            decreasing_cond: count(CertKind::DecreasingCond),
        }
    }

    /// One summary row; absent rates are empty cells.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.serialize(self.summary_row())?;
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Flat summary of an [`EvalReport`], the row written to CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub rollouts: usize,
    #[serde(rename = "SR")]
    pub sr: f64,
    #[serde(rename = "BR")]
    pub br: Option<f64>,
    #[serde(rename = "NDR")]
    pub ndr: Option<f64>,
    #[serde(rename = "DR")]
    pub dr: Option<f64>,
    pub ndr_empty: usize,
    #[serde(rename = "PropertyUnsafe")]
    pub property_unsafe: u64,
    #[serde(rename = "InitCond")]
    pub init_cond: u64,
    #[serde(rename = "SafetyCond")]
    pub safety_cond: u64,
    #[serde(rename = "NonDecCond")]
    pub nondec_cond: u64,
    #[serde(rename = "ZeroGoalCond")]
    pub zero_goal_cond: u64,
    #[serde(rename = "PositivityCond")]
    pub positivity_cond: u64,
    #[serde(rename = "DecreasingCond")]
    pub decreasing_cond: u64,
}

/// Rollout settings for [`evaluate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub rollouts: usize,
    pub steps: usize,
    pub dt: f64,
    pub zero_tol: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rollouts: 50,
            steps: 200,
            dt: 0.1,
            zero_tol: 1e-3,
        }
    }
}

/// Metrics of `cfg.rollouts` fresh executions from sampled initial states.
pub fn evaluate(env: &BlackBoxEnv, nets: &Networks, cfg: &EvalConfig, seed: u64) -> Result<EvalReport> {
    if cfg.rollouts == 0 || cfg.steps == 0 {
        return Err(Error::InvalidInput(
            "evaluation needs at least one rollout of one step".into(),
        ));
    }
    let runs = parallel_rollouts(env, &nets.policy, cfg.rollouts, cfg.steps, cfg.dt, seed)?;
    let per = runs
        .iter()
        .map(|r| trajectory_metrics(r, nets, env, cfg.zero_tol))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_trajectories(per)
}
