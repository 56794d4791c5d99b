//! Predictive monitoring: how soon could a set be reached?
//!
//! Each estimate is the minimum time for a double-integrator surrogate
//! (`p' = v`, `v' = a`, `|a_i| <= a_max`) started from the observed position
//! and velocity to enter a target set. The true dynamics are never used and
//! obstacles are frozen at the assessment time. A target set is described by
//! a margin `g` along the surrogate path, with the set being `{g < 0}`.
//!
//! The acceleration sequence is optimized with Adam through a `tanh`
//! reparameterization. The objective is a softmin over time steps of
//! `k * dt + penalty * max(g_k, 0)`, so lowering the margin at any step pulls
//! the earliest feasible hit closer. The reported time is the earliest
//! crossing of any sequence evaluated, interpolated linearly in `g`.

use std::path::Path;

use rand::Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::certificates::{lie_derivative_fd, BarrierFn};
use crate::dynamics::{BlackBoxEnv, Rollout, SystemState};
use crate::nn::{AdamState, DenseArray};
use crate::{seeds, Error, Result};

/// Surrogate and optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateCfg {
    /// Acceleration bound; `None` takes the largest action bound of the environment.
    pub a_max: Option<f64>,
    pub pred_dt: f64,
    pub pred_steps: usize,
    pub opt_iters: usize,
    pub opt_lr: f64,
    pub restarts: usize,
    /// Weight of the positive margin in the objective, seconds per unit margin.
    pub penalty: f64,
    /// Softmin temperature in seconds.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SurrogateCfg {
    fn default() -> Self {
        Self {
            a_max: None,
            pred_dt: 0.1,
            pred_steps: 50,
            opt_iters: 100,
            opt_lr: 0.1,
            restarts: 3,
            penalty: 10.0,
            temperature: 0.1,
            seed: 0,
        }
    }
}

impl SurrogateCfg {
    pub fn horizon(&self) -> f64 {
        self.pred_dt * self.pred_steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        let a_ok = self.a_max.is_none_or(|a| a > 0.0);
        if !a_ok
            || !(self.pred_dt > 0.0)
            || self.pred_steps == 0
            || self.restarts == 0
            || !(self.opt_lr > 0.0)
            || !(self.penalty > 0.0)
            || !(self.temperature > 0.0)
        {
            return Err(Error::Config(format!("invalid surrogate settings {self:?}")));
        }
        Ok(())
    }

    fn accel_bound(&self, env: &BlackBoxEnv) -> f64 {
        self.a_max.unwrap_or_else(|| {
            env.spec()
                .action_bounds
                .iter()
                .map(|(lo, hi)| lo.abs().max(hi.abs()))
                .fold(0.0, f64::max)
        })
    }
}

/// Surrogate state: position and velocity.
pub type Kin = (Vec<f64>, Vec<f64>);

/// A target set `{g < 0}` described through margins along a surrogate path.
pub trait SurrogateTarget {
    /// One margin per path point; `+inf` where undefined.
    fn margins(&self, path: &[Kin]) -> Result<Vec<f64>>;

    /// Gradient of `sum_k weights[k] * g_k` with respect to every path point.
    fn weighted_gradient(&self, path: &[Kin], weights: &[f64]) -> Result<Vec<Kin>>;
}

/// Pointwise target from a margin closure; gradients by central differences.
pub struct FnTarget<F>(pub F);

impl<F: Fn(&[f64], &[f64]) -> f64> SurrogateTarget for FnTarget<F> {
    fn margins(&self, path: &[Kin]) -> Result<Vec<f64>> {
        Ok(path.iter().map(|(p, v)| (self.0)(p, v)).collect())
    }

    fn weighted_gradient(&self, path: &[Kin], weights: &[f64]) -> Result<Vec<Kin>> {
        const H: f64 = 1e-6;
        Ok(path
            .iter()
            .zip(weights)
            .map(|((p, v), &w)| {
                if w == 0.0 {
                    return (vec![0.0; p.len()], vec![0.0; v.len()]);
                }
                let mut gp = vec![0.0; p.len()];
                let mut gv = vec![0.0; v.len()];
                let (mut p2, mut v2) = (p.clone(), v.clone());
                for i in 0..p.len() {
                    p2[i] = p[i] + H;
                    let up = (self.0)(&p2, v);
                    p2[i] = p[i] - H;
                    let down = (self.0)(&p2, v);
                    p2[i] = p[i];
                    gp[i] = w * (up - down) / (2.0 * H);
                }
                for i in 0..v.len() {
                    v2[i] = v[i] + H;
                    let up = (self.0)(p, &v2);
                    v2[i] = v[i] - H;
                    let down = (self.0)(p, &v2);
                    v2[i] = v[i];
                    gv[i] = w * (up - down) / (2.0 * H);
                }
                (gp, gv)
            })
            .collect())
    }
}

/// Surrogate path from `(x0, v0)` under the accelerations, exact for
/// piecewise-constant acceleration.
fn simulate(x0: &[f64], v0: &[f64], accel: &[f64], dt: f64) -> Vec<Kin> {
    let d = x0.len();
    let steps = accel.len() / d;
    let mut path = Vec::with_capacity(steps + 1);
    let (mut p, mut v) = (x0.to_vec(), v0.to_vec());
    path.push((p.clone(), v.clone()));
    for k in 0..steps {
        let a = &accel[k * d..(k + 1) * d];
        for i in 0..d {
            p[i] += v[i] * dt + 0.5 * a[i] * dt * dt;
            v[i] += a[i] * dt;
        }
        path.push((p.clone(), v.clone()));
    }
    path
}

/// Earliest crossing into `{g < 0}`, interpolated between grid points.
fn hitting_time(margins: &[f64], dt: f64) -> Option<f64> {
    if margins[0] < 0.0 {
        return Some(-dt);
    }
    (1..margins.len()).find(|&k| margins[k] < 0.0).map(|k| {
        let (g0, g1) = (margins[k - 1], margins[k]);
        let frac = if g0.is_finite() && g0 > g1 { g0 / (g0 - g1) } else { 1.0 };
        (k as f64 - 1.0 + frac.clamp(0.0, 1.0)) * dt
    })
}

/// Approximate minimum time for the surrogate started at `(x0, v0)` to enter
/// the target set.
///
/// Returns `-pred_dt` when the start is already inside and
/// `pred_dt * pred_steps` when no evaluated sequence reaches the set.
pub fn min_time_to_set(
    x0: &[f64],
    v0: &[f64],
    target: &dyn SurrogateTarget,
    a_max: f64,
    cfg: &SurrogateCfg,
) -> Result<f64> {
    cfg.validate()?;
    if x0.len() != v0.len() || x0.is_empty() {
        return Err(Error::shape(x0.len(), v0.len()));
    }
    if !(a_max > 0.0) {
        return Err(Error::InvalidInput(format!(
            "acceleration bound must be positive, got {a_max}"
        )));
    }
    let (d, steps, dt) = (x0.len(), cfg.pred_steps, cfg.pred_dt);
    let horizon = cfg.horizon();

    let start = vec![(x0.to_vec(), v0.to_vec())];
    let g0 = target.margins(&start)?;
    if g0[0] < 0.0 {
        return Ok(-dt);
    }

    // Restart 0 pushes at full thrust against the margin gradient at the
    // start, restart 1 starts from rest, the rest are random.
    let g_start = target.weighted_gradient(&start, &[1.0])?;
    let greedy: Vec<f64> = g_start[0]
        .0
        .iter()
        .zip(&g_start[0].1)
        .map(|(gp, gv)| {
            let s = gp * dt + gv;
            if s > 0.0 {
                -2.0
            } else if s < 0.0 {
                2.0
            } else {
                0.0
            }
        })
        .collect();
    let mut rng = seeds::stream(cfg.seed, "surrogate-restart", 0);
    let mut best = horizon;
    for restart in 0..cfg.restarts {
        let w0: Vec<f64> = match restart {
            0 => (0..steps).flat_map(|_| greedy.iter().copied()).collect(),
            1 => vec![0.0; steps * d],
            _ => (0..steps * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let mut w = [DenseArray::vector(w0)];
        let mut adam = AdamState::new(cfg.opt_lr, &w)?;
        for iter in 0..=cfg.opt_iters {
            let accel: Vec<f64> = w[0].as_slice().iter().map(|x| a_max * x.tanh()).collect();
            let path = simulate(x0, v0, &accel, dt);
            let g = target.margins(&path)?;
            if let Some(t) = hitting_time(&g, dt) {
                best = best.min(t);
            }
            if iter == cfg.opt_iters {
                break;
            }
            // Softmin weights over the per-step costs.
            let costs: Vec<f64> = g
                .iter()
                .enumerate()
                .map(|(k, &gk)| k as f64 * dt + cfg.penalty * gk.max(0.0))
                .collect();
            let c_min = costs.iter().copied().fold(f64::INFINITY, f64::min);
            let mut weights: Vec<f64> = costs.iter().map(|c| (-(c - c_min) / cfg.temperature).exp()).collect();
            let total: f64 = weights.iter().sum();
            for (wk, gk) in weights.iter_mut().zip(&g) {
                *wk = if *gk > 0.0 && gk.is_finite() && *wk / total > 1e-9 {
                    cfg.penalty * *wk / total
                } else {
                    0.0
                };
            }
            if weights.iter().all(|&x| x == 0.0) {
                break;
            }
            let grads = target.weighted_gradient(&path, &weights)?;
            // Adjoint pass through the discrete double integrator.
            let mut grad_w = vec![0.0; steps * d];
            let mut lam_p = grads[steps].0.clone();
            let mut lam_v = grads[steps].1.clone();
            for k in (0..steps).rev() {
                for i in 0..d {
                    let da = lam_p[i] * 0.5 * dt * dt + lam_v[i] * dt;
                    let t = w[0].as_slice()[k * d + i].tanh();
                    grad_w[k * d + i] = da * a_max * (1.0 - t * t);
                }
                for i in 0..d {
                    lam_v[i] += grads[k].1[i] + lam_p[i] * dt;
                    lam_p[i] += grads[k].0[i];
                }
            }
            adam.step(&mut w, &[DenseArray::vector(grad_w)])?;
        }
    }
    Ok(best)
}

/// Remaining-time estimates; negative means already violated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredAssessment {
    /// Time until the unsafe set could be entered; `-pred_dt` when inside it.
    pub v_u: f64,
    /// Time until `B < 0` could hold.
    pub v_s: f64,
    /// Time until the non-decreasing condition could fail.
    pub v_n: f64,
    pub inside_unsafe: bool,
    /// When inside the unsafe set, time until the safe part could be reached.
    pub time_to_safe: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct PredThresholds {
    pub xi_u: f64,
    pub xi_s: f64,
    pub xi_n: f64,
}

impl PredThresholds {
    pub fn new(xi_u: f64, xi_s: f64, xi_n: f64) -> Self {
        Self { xi_u, xi_s, xi_n }
    }
}

/// Warning when any estimate is below its threshold, and always inside the unsafe set.
pub fn predpm_verdict(a: &PredAssessment, th: &PredThresholds) -> bool {
    a.inside_unsafe || a.v_u < th.xi_u || a.v_s < th.xi_s || a.v_n < th.xi_n
}

/// Surrogate path points turned into environment states at the frozen time.
struct Lift<'a> {
    env: &'a BlackBoxEnv,
    base: &'a SystemState,
}

impl Lift<'_> {
    fn state(&self, p: &[f64], v: &[f64]) -> SystemState {
        self.env.with_kinematics(self.base, p, v)
    }

    fn obs(&self, p: &[f64], v: &[f64]) -> Vec<f64> {
        self.env.observe(&self.state(p, v))
    }

    /// `B` at a path point and its gradient in `(p, v)`, chained through a
    /// central-difference Jacobian of the observation.
    fn barrier_with_grad(&self, b: &BarrierFn, p: &[f64], v: &[f64]) -> Result<(f64, Kin)> {
        const H: f64 = 1e-6;
        let (value, g_obs) = b.net().scalar_input_grad(&self.obs(p, v))?;
        let directional =
            |p2: &[f64], v2: &[f64]| -> f64 { self.obs(p2, v2).iter().zip(&g_obs).map(|(o, g)| o * g).sum() };
        let mut gp = vec![0.0; p.len()];
        let mut gv = vec![0.0; v.len()];
        let (mut p2, mut v2) = (p.to_vec(), v.to_vec());
        for i in 0..p.len() {
            p2[i] = p[i] + H;
            let up = directional(&p2, v);
            p2[i] = p[i] - H;
            let down = directional(&p2, v);
            p2[i] = p[i];
            gp[i] = (up - down) / (2.0 * H);
        }
        for i in 0..v.len() {
            v2[i] = v[i] + H;
            let up = directional(p, &v2);
            v2[i] = v[i] - H;
            let down = directional(p, &v2);
            v2[i] = v[i];
            gv[i] = (up - down) / (2.0 * H);
        }
        Ok((value, (gp, gv)))
    }
}

/// `{B < 0}`.
struct BarrierTarget<'a> {
    lift: Lift<'a>,
    barrier: &'a BarrierFn,
}

impl SurrogateTarget for BarrierTarget<'_> {
    fn margins(&self, path: &[Kin]) -> Result<Vec<f64>> {
        path.iter()
            .map(|(p, v)| self.barrier.value(&self.lift.obs(p, v)))
            .collect()
    }

    fn weighted_gradient(&self, path: &[Kin], weights: &[f64]) -> Result<Vec<Kin>> {
        path.iter()
            .zip(weights)
            .map(|((p, v), &w)| {
                if w == 0.0 {
                    return Ok((vec![0.0; p.len()], vec![0.0; v.len()]));
                }
                let (_, (gp, gv)) = self.lift.barrier_with_grad(self.barrier, p, v)?;
                Ok((gp.iter().map(|g| w * g).collect(), gv.iter().map(|g| w * g).collect()))
            })
            .collect()
    }
}

/// `{L B + B < 0}` with `L B` the forward difference between consecutive
/// surrogate points; margin `k` belongs to the pair `(k, k + 1)`.
struct NonDecTarget<'a> {
    lift: Lift<'a>,
    barrier: &'a BarrierFn,
    dt: f64,
}

impl SurrogateTarget for NonDecTarget<'_> {
    fn margins(&self, path: &[Kin]) -> Result<Vec<f64>> {
        let b: Vec<f64> = path
            .iter()
            .map(|(p, v)| self.barrier.value(&self.lift.obs(p, v)))
            .collect::<Result<_>>()?;
        let mut g: Vec<f64> = b.windows(2).map(|w| (w[1] - w[0]) / self.dt + w[0]).collect();
        g.push(f64::INFINITY);
        Ok(g)
    }

    fn weighted_gradient(&self, path: &[Kin], weights: &[f64]) -> Result<Vec<Kin>> {
        let last = path.len() - 1;
        (0..path.len())
            .map(|j| {
                let (p, v) = &path[j];
                // g_j contains (1 - 1/dt) B_j, g_{j-1} contains B_j / dt.
                let own = if j < last {
                    weights[j] * (1.0 - 1.0 / self.dt)
                } else {
                    0.0
                };
                let prev = if j > 0 { weights[j - 1] / self.dt } else { 0.0 };
                let coef = own + prev;
                if coef == 0.0 {
                    return Ok((vec![0.0; p.len()], vec![0.0; v.len()]));
                }
                let (_, (gp, gv)) = self.lift.barrier_with_grad(self.barrier, p, v)?;
                Ok((
                    gp.iter().map(|g| coef * g).collect(),
                    gv.iter().map(|g| coef * g).collect(),
                ))
            })
            .collect()
    }
}

/// The three remaining-time estimates at `x_n`.
///
/// `previous` is the state observed one interval earlier; when the pair
/// `(previous, x_n)` already violates the non-decreasing condition, `v_n` is
/// `-pred_dt`.
pub fn predpm_assess(
    x_n: &SystemState,
    previous: Option<&SystemState>,
    barrier: &BarrierFn,
    env: &BlackBoxEnv,
    cfg: &SurrogateCfg,
) -> Result<PredAssessment> {
    cfg.validate()?;
    let a_max = cfg.accel_bound(env);
    let (p0, v0) = env.kinematics(x_n);
    let lift = || Lift { env, base: x_n };
    let horizon = cfg.horizon();
    let clamp = |t: f64| t.clamp(-cfg.pred_dt, horizon);

    let inside_unsafe = env.in_unsafe(x_n);
    let (v_u, time_to_safe) = if inside_unsafe {
        let l = lift();
        let safe = FnTarget(|p: &[f64], v: &[f64]| -env.clearance(&l.state(p, v)));
        (-cfg.pred_dt, Some(clamp(min_time_to_set(&p0, &v0, &safe, a_max, cfg)?)))
    } else {
        let l = lift();
        let unsafe_ = FnTarget(|p: &[f64], v: &[f64]| env.clearance(&l.state(p, v)));
        (clamp(min_time_to_set(&p0, &v0, &unsafe_, a_max, cfg)?), None)
    };

    let v_s = clamp(min_time_to_set(
        &p0,
        &v0,
        &BarrierTarget { lift: lift(), barrier },
        a_max,
        cfg,
    )?);

    let observed_violation = match previous {
        Some(prev) => {
            let b_prev = barrier.value(&env.observe(prev))?;
            let b_n = barrier.value(&env.observe(x_n))?;
            b_prev >= 0.0 && lie_derivative_fd(b_prev, b_n, prev.timestamp, x_n.timestamp)? + b_prev < 0.0
        }
        None => false,
    };
    let v_n = if observed_violation {
        -cfg.pred_dt
    } else {
        let target = NonDecTarget {
            lift: lift(),
            barrier,
            dt: cfg.pred_dt,
        };
        // The first surrogate pair is a prediction, not an observation.
        clamp(min_time_to_set(&p0, &v0, &target, a_max, cfg)?.max(0.0))
    };
    Ok(PredAssessment {
        v_u,
        v_s,
        v_n,
        inside_unsafe,
        time_to_safe,
    })
}

/// One row of a predictive trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    #[serde(rename = "v_U")]
    pub v_u: f64,
    #[serde(rename = "v_S")]
    pub v_s: f64,
    #[serde(rename = "v_N")]
    pub v_n: f64,
    pub flagged: bool,
}

/// Assessments at every point of an execution.
pub fn predpm_trace(
    run: &Rollout,
    barrier: &BarrierFn,
    env: &BlackBoxEnv,
    cfg: &SurrogateCfg,
    thresholds: &PredThresholds,
) -> Result<Vec<(TraceRow, PredAssessment)>> {
    let pts = run.trajectory.points();
    (0..pts.len())
        .map(|n| {
            let previous = n.checked_sub(1).map(|i| &pts[i]);
            let a = predpm_assess(&pts[n], previous, barrier, env, cfg)?;
            let row = TraceRow {
                t: pts[n].timestamp,
                v_u: a.v_u,
                v_s: a.v_s,
                v_n: a.v_n,
                flagged: predpm_verdict(&a, thresholds),
            };
            Ok((row, a))
        })
        .collect()
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Indices of the assessments that raise a warning under `th`.
pub fn warning_indices(assessments: &[PredAssessment], th: &PredThresholds) -> Vec<usize> {
    assessments
        .iter()
        .enumerate()
        .filter(|(_, a)| predpm_verdict(a, th))
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    #[serde(rename = "xi_U")]
    U,
    #[serde(rename = "xi_S")]
    S,
    #[serde(rename = "xi_N")]
    N,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub threshold: f64,
    pub warnings: usize,
    pub observations: usize,
    pub percent: f64,
}

/// Warning percentages with one threshold swept over `grid` (ascending) and
/// the other two fixed at zero, for each axis in turn.
pub fn sweep_thresholds(assessments: &[PredAssessment], grid: &[f64]) -> Vec<SweepRow> {
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut rows = Vec::new();
    for axis in [SweepAxis::U, SweepAxis::S, SweepAxis::N] {
        for &x in &sorted {
            let th = match axis {
                SweepAxis::U => PredThresholds::new(x, 0.0, 0.0),
                SweepAxis::S => PredThresholds::new(0.0, x, 0.0),
                SweepAxis::N => PredThresholds::new(0.0, 0.0, x),
            };
            let warnings = warning_indices(assessments, &th).len();
            rows.push(SweepRow {
                axis,
                threshold: x,
                warnings,
                observations: assessments.len(),
                percent: if assessments.is_empty() {
                    0.0
                } else {
                    100.0 * warnings as f64 / assessments.len() as f64
                },
            });
        }
    }
    rows
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reach(d: f64) -> FnTarget<impl Fn(&[f64], &[f64]) -> f64> {
        FnTarget(move |p: &[f64], _: &[f64]| d - p[0])
    }

    #[test]
    fn from_rest_matches_constant_thrust_time() {
        let t = min_time_to_set(&[0.0], &[0.0], &reach(1.0), 1.0, &SurrogateCfg::default()).unwrap();
        assert!((t - 2f64.sqrt()).abs() < 0.1 * 2f64.sqrt(), "{t}");
    }

    #[test]
    fn with_initial_speed_matches_quadratic_root() {
        let t = min_time_to_set(&[0.0], &[1.0], &reach(1.0), 1.0, &SurrogateCfg::default()).unwrap();
        let exact = 3f64.sqrt() - 1.0;
        assert!((t - exact).abs() < 0.1 * exact, "{t}");
    }

    #[test]
    fn inside_the_set_is_nonpositive() {
        let t = min_time_to_set(&[2.0], &[0.0], &reach(1.0), 1.0, &SurrogateCfg::default()).unwrap();
        assert!(t <= 0.0);
    }

    #[test]
    fn unreachable_set_reports_the_horizon() {
        let cfg = SurrogateCfg {
            opt_iters: 10,
            ..Default::default()
        };
        let t = min_time_to_set(&[0.0], &[0.0], &reach(1000.0), 1.0, &cfg).unwrap();
        assert_eq!(t, cfg.horizon());
    }

    #[test]
    fn verdict_uses_below_threshold_convention() {
        let a = |u, s, n| PredAssessment {
            v_u: u,
            v_s: s,
            v_n: n,
            inside_unsafe: false,
            time_to_safe: None,
        };
        assert!(!predpm_verdict(&a(5.0, 5.0, 5.0), &PredThresholds::new(0.0, 0.0, -1.0)));
        assert!(predpm_verdict(&a(-0.1, 3.0, 3.0), &PredThresholds::new(0.0, 0.0, 0.0)));
    }
}
