//! Runtime monitors over observed trajectory prefixes.
//!
//! A monitor maps a prefix `x_0 .. x_n` to a 0/1 verdict. The certificate
//! monitor checks the property and the certificate conditions; the predictive
//! monitor estimates how soon they could be violated; the baseline only
//! checks the property.

mod predictive;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

pub use predictive::{
    min_time_to_set, predpm_assess, predpm_trace, predpm_verdict, sweep_thresholds, warning_indices, write_sweep_csv,
    write_trace_csv, FnTarget, PredAssessment, PredThresholds, SurrogateCfg, SurrogateTarget, SweepAxis, SweepRow,
    TraceRow,
};

use crate::certificates::{
    barrier_check, lyapunov_check, BarrierFn, CertKind, CertVerdict, LyapunovFn, NextObservation,
};
use crate::dynamics::{BlackBoxEnv, Rollout, SystemState, Trajectory};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorVerdict {
    pub flagged: bool,
    /// Condition found at the latest state `x_n`.
    pub cause: CertVerdict,
    /// A violation at `x_{n-1}` that only became checkable with `x_n`: the
    /// non-decreasing (or decreasing) condition.
    pub deferred: Option<CertVerdict>,
    pub assessment: Option<PredAssessment>,
}

impl MonitorVerdict {
    fn from_checks(cause: CertVerdict, deferred: Option<CertVerdict>) -> Self {
        let deferred = deferred.filter(|d| d.is_violation());
        Self {
            flagged: cause.is_violation() || deferred.is_some(),
            cause,
            deferred,
            assessment: None,
        }
    }
}

/// Certificate monitored by CertPM.
#[derive(Debug, Clone, Copy)]
pub enum Certificate<'a> {
    Barrier(&'a BarrierFn),
    /// Lyapunov function with the tolerance for `V = 0` on the goal.
    Lyapunov(&'a LyapunovFn, f64),
}

fn prefix_observations(prefix: &Trajectory, env: &BlackBoxEnv) -> Result<Vec<Vec<f64>>> {
    if prefix.is_empty() {
        return Err(Error::InvalidInput("monitors need a nonempty prefix".into()));
    }
    let pts = prefix.points();
    Ok(pts[pts.len().saturating_sub(2)..]
        .iter()
        .map(|x| env.observe(x))
        .collect())
}

/// CertPM verdict from the last two states of a prefix and their observations.
///
/// `x_n` gets every check that needs no successor; `x_{n-1}` gets the check
/// that needs `x_n`.
pub(crate) fn certpm_last(
    states: &[SystemState],
    observations: &[Vec<f64>],
    certificate: Certificate<'_>,
    env: &BlackBoxEnv,
) -> Result<MonitorVerdict> {
    let n = states.len() - 1;
    let x_n = &states[n];
    let obs_n = &observations[observations.len() - 1];
    let next = NextObservation {
        obs: obs_n,
        time: x_n.timestamp,
    };
    let (cause, deferred) = match certificate {
        Certificate::Barrier(b) => {
            let cause = barrier_check(b, obs_n, None, x_n, env)?;
            let deferred = if n > 0 {
                let prev = barrier_check(
                    b,
                    &observations[observations.len() - 2],
                    Some(next),
                    &states[n - 1],
                    env,
                )?;
                only(prev, CertKind::NonDecCond)
            } else {
                None
            };
            (cause, deferred)
        }
        Certificate::Lyapunov(v, zero_tol) => {
            let cause = lyapunov_check(v, obs_n, None, x_n, env, zero_tol)?;
            let deferred = if n > 0 {
                let prev = lyapunov_check(
                    v,
                    &observations[observations.len() - 2],
                    Some(next),
                    &states[n - 1],
                    env,
                    zero_tol,
                )?;
                only(prev, CertKind::DecreasingCond)
            } else {
                None
            };
            (cause, deferred)
        }
    };
    Ok(MonitorVerdict::from_checks(cause, deferred))
}

/// Narrows a verdict to a single condition, if that condition was violated.
fn only(v: CertVerdict, kind: CertKind) -> Option<CertVerdict> {
    (v.mask & kind.bit() != 0).then(|| CertVerdict {
        kind,
        detail: if v.kind == kind { v.detail } else { f64::NAN },
        mask: kind.bit(),
        state: v.state,
    })
}

/// CertPM for safety: the property and the barrier conditions.
pub fn certpm_safety(prefix: &Trajectory, barrier: &BarrierFn, env: &BlackBoxEnv) -> Result<MonitorVerdict> {
    let obs = prefix_observations(prefix, env)?;
    let pts = prefix.points();
    certpm_last(
        &pts[pts.len().saturating_sub(2)..],
        &obs,
        Certificate::Barrier(barrier),
        env,
    )
}

/// CertPM for stability: the Lyapunov conditions only (a stability
/// violation cannot be observed on a finite prefix).
pub fn certpm_stability(
    prefix: &Trajectory,
    lyapunov: &LyapunovFn,
    env: &BlackBoxEnv,
    zero_tol: f64,
) -> Result<MonitorVerdict> {
    let obs = prefix_observations(prefix, env)?;
    let pts = prefix.points();
    certpm_last(
        &pts[pts.len().saturating_sub(2)..],
        &obs,
        Certificate::Lyapunov(lyapunov, zero_tol),
        env,
    )
}

fn baseline_last(x_n: &SystemState, env: &BlackBoxEnv) -> MonitorVerdict {
    let cause = if env.in_unsafe(x_n) {
        CertVerdict {
            kind: CertKind::PropertyUnsafe,
            state: x_n.clone(),
            detail: env.clearance(x_n),
            mask: CertKind::PropertyUnsafe.bit(),
        }
    } else {
        CertVerdict::none(x_n.clone())
    };
    MonitorVerdict::from_checks(cause, None)
}

/// Property-only monitor: flags exactly when the latest state is unsafe.
pub fn baseline_monitor(prefix: &Trajectory, env: &BlackBoxEnv) -> Result<MonitorVerdict> {
    let last = prefix
        .points()
        .last()
        .ok_or_else(|| Error::InvalidInput("monitors need a nonempty prefix".into()))?;
    Ok(baseline_last(last, env))
}

/// PredPM verdict on a prefix: a threshold fired, or the latest state is unsafe.
pub fn predpm_monitor(
    prefix: &Trajectory,
    barrier: &BarrierFn,
    env: &BlackBoxEnv,
    cfg: &SurrogateCfg,
    thresholds: &PredThresholds,
) -> Result<MonitorVerdict> {
    let pts = prefix.points();
    let x_n = pts
        .last()
        .ok_or_else(|| Error::InvalidInput("monitors need a nonempty prefix".into()))?;
    let previous = pts.len().checked_sub(2).map(|i| &pts[i]);
    let a = predpm_assess(x_n, previous, barrier, env, cfg)?;
    Ok(predictive_verdict(x_n, a, thresholds, env))
}

fn predictive_verdict(x_n: &SystemState, a: PredAssessment, th: &PredThresholds, env: &BlackBoxEnv) -> MonitorVerdict {
    let mut v = baseline_last(x_n, env);
    v.flagged = v.flagged || predpm_verdict(&a, th);
    v.assessment = Some(a);
    v
}

/// Monitor choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MonitorKind {
    Certpm,
    Predpm {
        thresholds: PredThresholds,
        #[serde(default)]
        surrogate: SurrogateCfg,
    },
    Baseline,
}

impl MonitorKind {
    pub fn name(&self) -> &'static str {
        match self {
            MonitorKind::Certpm => "certpm",
            MonitorKind::Predpm { .. } => "predpm",
            MonitorKind::Baseline => "baseline",
        }
    }
}

/// Verdicts for every prefix `x_0 .. x_n` of an execution, `n = 0 ..= last`.
///
/// The predictive monitor needs a barrier; CertPM needs the certificate.
pub fn monitor_rollout(
    kind: &MonitorKind,
    run: &Rollout,
    certificate: Certificate<'_>,
    env: &BlackBoxEnv,
    last: usize,
) -> Result<Vec<MonitorVerdict>> {
    let pts = run.trajectory.points();
    if last >= pts.len() {
        return Err(Error::InvalidInput(format!(
            "cannot monitor {} prefixes of a {}-point execution",
            last + 1,
            pts.len()
        )));
    }
    (0..=last)
        .map(|n| match kind {
            MonitorKind::Certpm => {
                let lo = n.saturating_sub(1);
                certpm_last(&pts[lo..=n], &run.observations[lo..=n], certificate, env)
            }
            MonitorKind::Baseline => Ok(baseline_last(&pts[n], env)),
            MonitorKind::Predpm { thresholds, surrogate } => {
                let Certificate::Barrier(b) = certificate else {
                    return Err(Error::Config("the predictive monitor covers safety only".into()));
                };
                let previous = n.checked_sub(1).map(|i| &pts[i]);
                let a = predpm_assess(&pts[n], previous, b, env, surrogate)?;
                Ok(predictive_verdict(&pts[n], a, thresholds, env))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::EnvKind;
    use crate::nn::{Activation, DenseArray, Mlp, OutputTransform};

    /// Corridor barrier `B = (obstacle offset) - margin`, read off the observation.
    fn offset_barrier(env: &BlackBoxEnv, margin: f64) -> BarrierFn {
        let dim = env.spec().observation_dim();
        let mut w = vec![0.0; dim];
        w[2] = 1.0;
        BarrierFn::new(
            Mlp::from_parts(
                &[dim, 1],
                Activation::Tanh,
                OutputTransform::Identity,
                vec![DenseArray::from_vec(&[1, dim], w).unwrap()],
                vec![DenseArray::vector(vec![-margin])],
            )
            .unwrap(),
        )
        .unwrap()
    }

    fn line(xs: &[f64]) -> Trajectory {
        Trajectory::from_states(
            xs.iter()
                .enumerate()
                .map(|(i, &x)| SystemState::new(vec![x, 1.0], i as f64 * 0.1))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn unsafe_end_is_a_property_violation() {
        let env = BlackBoxEnv::preset(EnvKind::Corridor1d);
        let b = offset_barrier(&env, 1.0);
        let v = certpm_safety(&line(&[7.3, 7.5]), &b, &env).unwrap();
        assert!(v.flagged);
        assert_eq!(v.cause.kind, CertKind::PropertyUnsafe);
        let v = baseline_monitor(&line(&[7.3, 7.5]), &env).unwrap();
        assert_eq!(v.cause.kind, CertKind::PropertyUnsafe);
    }

    #[test]
    fn negative_barrier_before_the_obstacle_is_a_safety_violation() {
        let env = BlackBoxEnv::preset(EnvKind::Corridor1d);
        let b = offset_barrier(&env, 1.0);
        let traj = line(&[6.8, 6.9, 7.0, 7.1, 7.2]);
        let flags: Vec<CertKind> = (0..traj.len())
            .map(|n| {
                let prefix = Trajectory::from_states(traj.prefix(n).to_vec()).unwrap();
                certpm_safety(&prefix, &b, &env).unwrap().cause.kind
            })
            .collect();
        // B = 8 - x - 1 turns negative after x = 7.
        assert_eq!(flags[..3], [CertKind::None; 3]);
        assert_eq!(flags[3], CertKind::SafetyCond);
        assert!(!env.in_unsafe(&traj.points()[3]));
        // The baseline stays silent.
        let prefix = Trajectory::from_states(traj.prefix(3).to_vec()).unwrap();
        assert!(!baseline_monitor(&prefix, &env).unwrap().flagged);
    }
}
