//! Certificate losses and the minibatch learner shared by initial training
//! and repair retraining.
//!
//! The successor state in the non-decreasing and decreasing terms comes from
//! the black-box simulator, so it cannot be differentiated with respect to the
//! policy parameters. The policy gradient is obtained from the action instead:
//! each transition may carry *action probes*, the successor observations
//! reached when one action component is nudged up and down. The certificate's
//! sensitivity to the action is the central difference over those probes, and
//! that sensitivity is chained through the policy network.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::certificates::{BarrierFn, LyapunovFn, PolicyFn};
use crate::dynamics::{BlackBoxEnv, ControlAction, Controller, ResetMode, SystemState};
use crate::nn::{AdamState, Gradients, Mlp};
use crate::{seeds, Error, Result};

/// Successor observations with one action component moved to each side.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionProbe {
    pub plus_obs: Vec<f64>,
    pub minus_obs: Vec<f64>,
    /// Difference between the two probed action values.
    pub spread: f64,
}

/// One monitoring interval: the observation at a state and one `dt` later.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub next_obs: Vec<f64>,
    pub dt: f64,
    /// One probe per action component, or empty when the policy gets no gradient.
    pub probes: Vec<ActionProbe>,
}

impl Transition {
    pub fn new(obs: Vec<f64>, next_obs: Vec<f64>, dt: f64) -> Self {
        Self {
            obs,
            next_obs,
            dt,
            probes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BarrierDataset {
    pub d_init: Vec<Vec<f64>>,
    pub d_safe: Vec<Vec<f64>>,
    pub d_nondec: Vec<Transition>,
}

impl BarrierDataset {
    pub fn is_empty(&self) -> bool {
        self.d_init.is_empty() && self.d_safe.is_empty() && self.d_nondec.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LyapunovDataset {
    pub d_goal: Vec<Vec<f64>>,
    pub d_decrease: Vec<Transition>,
}

impl LyapunovDataset {
    pub fn is_empty(&self) -> bool {
        self.d_goal.is_empty() && self.d_decrease.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BarrierLoss {
    pub init: f64,
    pub safe: f64,
    pub nondec: f64,
}

impl BarrierLoss {
    pub fn total(&self) -> f64 {
        self.init + self.safe + self.nondec
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LyapunovLoss {
    pub goal: f64,
    pub decrease: f64,
}

impl LyapunovLoss {
    pub fn total(&self) -> f64 {
        self.goal + self.decrease
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub policy: Gradients,
    pub certificate: Gradients,
}

/// Accumulates `scale * d(value)/d(params)` for a scalar network.
fn add_scalar_grad(net: &Mlp, obs: &[f64], scale: f64, acc: &mut Gradients) -> Result<()> {
    let (_, cache) = net.forward(obs)?;
    let (g, _) = net.backward(&cache, &[scale])?;
    acc.add_scaled(&g, 1.0)
}

/// Adds `coef * dc/da` chained through the policy at `obs`, where `dc/da` is
/// the probed sensitivity of the certificate `value` to the action.
fn add_probe_grad(
    policy: &PolicyFn,
    t: &Transition,
    value: &dyn Fn(&[f64]) -> Result<f64>,
    coef: f64,
    acc: &mut Gradients,
) -> Result<()> {
    if t.probes.is_empty() {
        return Ok(());
    }
    if t.probes.len() != policy.bounds().len() {
        return Err(Error::shape(policy.bounds().len(), t.probes.len()));
    }
    let mut action_grad = Vec::with_capacity(t.probes.len());
    for p in &t.probes {
        let sens = if p.spread > 0.0 {
            (value(&p.plus_obs)? - value(&p.minus_obs)?) / p.spread
        } else {
            0.0
        };
        action_grad.push(coef * sens);
    }
    let (_, trace) = policy.action_traced(&t.obs)?;
    acc.add_scaled(&policy.backward(&trace, &action_grad)?, 1.0)
}

fn check_margin(margin: f64) -> Result<()> {
    if !(margin >= 0.0) || !margin.is_finite() {
        return Err(Error::InvalidInput(format!(
            "loss margin must be finite and nonnegative, got {margin}"
        )));
    }
    Ok(())
}

fn check_dt(t: &Transition) -> Result<()> {
    if !(t.dt > 0.0) {
        return Err(Error::InvalidInput(format!(
            "transition interval must be positive, got {}",
            t.dt
        )));
    }
    Ok(())
}

/// Barrier loss `L_Init + L_Safe + L_Non-dec`, each term a mean over its set
/// (an empty set contributes nothing), with gradients for the policy and the
/// barrier parameters.
pub fn loss_barrier(policy: &PolicyFn, barrier: &BarrierFn, data: &BarrierDataset) -> Result<(BarrierLoss, LossGrads)> {
    loss_barrier_with_margin(policy, barrier, data, 0.0)
}

/// [`loss_barrier`] with every hinge shifted by `margin`: a term is zero only
/// once its condition holds with that much room, e.g. `max(-B + margin, 0)`.
///
/// The unshifted loss is positively homogeneous in `B`, so shrinking `B`
/// always lowers it; a positive margin pins the scale of the certificate.
pub fn loss_barrier_with_margin(
    policy: &PolicyFn,
    barrier: &BarrierFn,
    data: &BarrierDataset,
    margin: f64,
) -> Result<(BarrierLoss, LossGrads)> {
    check_margin(margin)?;
    let net = barrier.net();
    let mut loss = BarrierLoss::default();
    let mut cert = Gradients::zeros_like(net);
    let mut pol = Gradients::zeros_like(policy.net());

    if !data.d_init.is_empty() {
        let w = 1.0 / data.d_init.len() as f64;
        for x in &data.d_init {
            let arg = margin - barrier.value(x)?;
            if arg > 0.0 {
                loss.init += w * arg;
                add_scalar_grad(net, x, -w, &mut cert)?;
            }
        }
    }
    if !data.d_safe.is_empty() {
        let w = 1.0 / data.d_safe.len() as f64;
        for x in &data.d_safe {
            let arg = barrier.value(x)? + margin;
            if arg > 0.0 {
                loss.safe += w * arg;
                add_scalar_grad(net, x, w, &mut cert)?;
            }
        }
    }
    if !data.d_nondec.is_empty() {
        let w = 1.0 / data.d_nondec.len() as f64;
        let value = |o: &[f64]| barrier.value(o);
        for t in &data.d_nondec {
            check_dt(t)?;
            let b = barrier.value(&t.obs)?;
            let b_next = barrier.value(&t.next_obs)?;
            let arg = -(b_next - b) / t.dt - b + margin;
            if arg > 0.0 {
                loss.nondec += w * arg;
                add_scalar_grad(net, &t.next_obs, -w / t.dt, &mut cert)?;
                add_scalar_grad(net, &t.obs, w * (1.0 / t.dt - 1.0), &mut cert)?;
                add_probe_grad(policy, t, &value, -w / t.dt, &mut pol)?;
            }
        }
    }
    Ok((
        loss,
        LossGrads {
            policy: pol,
            certificate: cert,
        },
    ))
}

/// Lyapunov loss `L_G + L_D`: mean `V²` over goal states plus mean
/// `max(L V, 0) + max(-V, 0)` over off-goal transitions.
pub fn loss_lyapunov(
    policy: &PolicyFn,
    lyapunov: &LyapunovFn,
    data: &LyapunovDataset,
) -> Result<(LyapunovLoss, LossGrads)> {
    loss_lyapunov_with_margin(policy, lyapunov, data, 0.0)
}

/// [`loss_lyapunov`] with the decrease hinge shifted to `max(L V + margin, 0)`.
pub fn loss_lyapunov_with_margin(
    policy: &PolicyFn,
    lyapunov: &LyapunovFn,
    data: &LyapunovDataset,
    margin: f64,
) -> Result<(LyapunovLoss, LossGrads)> {
    check_margin(margin)?;
    let net = lyapunov.net();
    let mut loss = LyapunovLoss::default();
    let mut cert = Gradients::zeros_like(net);
    let mut pol = Gradients::zeros_like(policy.net());

    if !data.d_goal.is_empty() {
        let w = 1.0 / data.d_goal.len() as f64;
        for x in &data.d_goal {
            let v = lyapunov.value(x)?;
            loss.goal += w * v * v;
            add_scalar_grad(net, x, 2.0 * w * v, &mut cert)?;
        }
    }
    if !data.d_decrease.is_empty() {
        let w = 1.0 / data.d_decrease.len() as f64;
        let value = |o: &[f64]| lyapunov.value(o);
        for t in &data.d_decrease {
            check_dt(t)?;
            let v = lyapunov.value(&t.obs)?;
            let v_next = lyapunov.value(&t.next_obs)?;
            let arg = (v_next - v) / t.dt + margin;
            if arg > 0.0 {
                loss.decrease += w * arg;
                add_scalar_grad(net, &t.next_obs, w / t.dt, &mut cert)?;
                add_scalar_grad(net, &t.obs, -w / t.dt, &mut cert)?;
                add_probe_grad(policy, t, &value, w / t.dt, &mut pol)?;
            }
            if -v > 0.0 {
                loss.decrease += w * -v;
                add_scalar_grad(net, &t.obs, -w, &mut cert)?;
            }
        }
    }
    Ok((
        loss,
        LossGrads {
            policy: pol,
            certificate: cert,
        },
    ))
}

/// The state reached after one interval `dt` under the policy's action.
pub fn one_step_successor(
    env: &mut BlackBoxEnv,
    state: &SystemState,
    policy: &PolicyFn,
    dt: f64,
) -> Result<SystemState> {
    env.reset(state, ResetMode::Override)?;
    let action = policy.act(&env.observe(state))?;
    env.step(&action, dt)
}

/// Executes one interval from `state` and records the transition; with
/// `probe_delta` set, also records an [`ActionProbe`] per action component.
pub fn build_transition(
    env: &mut BlackBoxEnv,
    state: &SystemState,
    policy: &PolicyFn,
    dt: f64,
    probe_delta: Option<f64>,
) -> Result<Transition> {
    let obs = env.observe(state);
    let action = policy.action(&obs)?;
    env.reset(state, ResetMode::Override)?;
    let next = env.step(&ControlAction::new(action.clone()), dt)?;
    let mut t = Transition::new(obs, env.observe(&next), dt);
    if let Some(delta) = probe_delta {
        for (i, &(lo, hi)) in policy.bounds().iter().enumerate() {
            let mut plus = action.clone();
            let mut minus = action.clone();
            plus[i] = (action[i] + delta).min(hi);
            minus[i] = (action[i] - delta).max(lo);
            let mut probe_obs = |a: Vec<f64>| -> Result<Vec<f64>> {
                env.reset(state, ResetMode::Override)?;
                let s = env.step(&ControlAction::new(a), dt)?;
                Ok(env.observe(&s))
            };
            let spread = plus[i] - minus[i];
            t.probes.push(ActionProbe {
                plus_obs: probe_obs(plus)?,
                minus_obs: probe_obs(minus)?,
                spread,
            });
        }
    }
    Ok(t)
}

/// Policy together with the certificates being learned.
#[derive(Debug, Clone, PartialEq)]
pub struct Networks {
    pub policy: PolicyFn,
    pub barrier: Option<BarrierFn>,
    pub lyapunov: Option<LyapunovFn>,
}

/// Which loss terms a training sample feeds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Roles {
    pub init: bool,
    pub safe: bool,
    pub nondec: bool,
    pub goal: bool,
    pub decrease: bool,
}

impl Roles {
    /// Roles by set membership: `X_0`, `X_u`, every state for the barrier
    /// decrease term, `X_g` and its complement for the Lyapunov terms.
    pub fn by_membership(env: &BlackBoxEnv, state: &SystemState) -> Self {
        let goal = env.in_goal(state);
        Self {
            init: env.in_initial(state),
            safe: env.in_unsafe(state),
            nondec: true,
            goal,
            decrease: !goal,
        }
    }

    fn needs_successor(&self) -> bool {
        self.nondec || self.decrease
    }
}

/// A state in the learner's pool.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub state: SystemState,
    pub obs: Vec<f64>,
    pub roles: Roles,
    /// Successor observation, when it was recorded under the current policy.
    pub next_obs: Option<Vec<f64>>,
}

impl TrainingSample {
    pub fn new(env: &BlackBoxEnv, state: SystemState, roles: Roles) -> Self {
        Self {
            obs: env.observe(&state),
            state,
            roles,
            next_obs: None,
        }
    }
}

/// Per-epoch means of the loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    #[serde(rename = "L_Init")]
    pub init: f64,
    #[serde(rename = "L_Safe")]
    pub safe: f64,
    #[serde(rename = "L_Non-dec")]
    pub nondec: f64,
    #[serde(rename = "L_G")]
    pub goal: f64,
    #[serde(rename = "L_D")]
    pub decrease: f64,
    pub total: f64,
}

pub fn write_curve_csv(path: &Path, curve: &[EpochLosses]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in curve {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Optimizer settings for [`Learner`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    pub batch_size: usize,
    pub lr_policy: f64,
    pub lr_certificate: f64,
    /// Monitoring interval used for successors.
    pub dt: f64,
    /// Weight of the squared distance between the policy action and the
    /// environment's goal-seeking reference action.
    pub tracking_weight: f64,
    /// Action perturbation used by the probes.
    pub probe_delta: f64,
    /// Hinge margin of the certificate losses (0 gives the plain losses).
    pub margin: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            batch_size: 256,
            lr_policy: 1e-3,
            lr_certificate: 1e-3,
            dt: 0.1,
            tracking_weight: 0.1,
            probe_delta: 0.05,
            margin: 0.05,
        }
    }
}

/// Minibatch Adam over a sample pool; the optimizer state persists across epochs.
///
/// With `train_policy` the successors are re-simulated under the current
/// policy for every batch (with action probes); otherwise each sample's
/// successor is simulated once and reused.
pub struct Learner {
    opts: FitOptions,
    train_policy: bool,
    policy_opt: Option<AdamState>,
    barrier_opt: Option<AdamState>,
    lyapunov_opt: Option<AdamState>,
    epochs_done: usize,
}

impl Learner {
    pub fn new(nets: &Networks, opts: FitOptions, train_policy: bool) -> Result<Self> {
        if opts.batch_size == 0 || !(opts.dt > 0.0) || !(opts.probe_delta > 0.0) || !(opts.margin >= 0.0) {
            return Err(Error::Config(format!("invalid fit options {opts:?}")));
        }
        Ok(Self {
            policy_opt: if train_policy {
                Some(AdamState::new(opts.lr_policy, nets.policy.net().params())?)
            } else {
                None
            },
            barrier_opt: match &nets.barrier {
                Some(b) => Some(AdamState::new(opts.lr_certificate, b.net().params())?),
                None => None,
            },
            lyapunov_opt: match &nets.lyapunov {
                Some(v) => Some(AdamState::new(opts.lr_certificate, v.net().params())?),
                None => None,
            },
            opts,
            train_policy,
            epochs_done: 0,
        })
    }

    /// One pass over `samples` in shuffled minibatches.
    pub fn epoch<R: Rng + ?Sized>(
        &mut self,
        env: &mut BlackBoxEnv,
        nets: &mut Networks,
        samples: &mut [TrainingSample],
        rng: &mut R,
    ) -> Result<EpochLosses> {
        if !self.train_policy {
            for s in samples
                .iter_mut()
                .filter(|s| s.roles.needs_successor() && s.next_obs.is_none())
            {
                let next = one_step_successor(env, &s.state, &nets.policy, self.opts.dt)?;
                s.next_obs = Some(env.observe(&next));
            }
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(rng);
        let mut acc = EpochLosses {
            epoch: self.epochs_done + 1,
            ..Default::default()
        };
        for batch in order.chunks(self.opts.batch_size) {
            let share = batch.len() as f64 / samples.len() as f64;
            let l = self.batch_step(env, nets, samples, batch)?;
            acc.init += share * l.init;
            acc.safe += share * l.safe;
            acc.nondec += share * l.nondec;
            acc.goal += share * l.goal;
            acc.decrease += share * l.decrease;
        }
        acc.total = acc.init + acc.safe + acc.nondec + acc.goal + acc.decrease;
        self.epochs_done += 1;
        Ok(acc)
    }

    fn batch_step(
        &mut self,
        env: &mut BlackBoxEnv,
        nets: &mut Networks,
        samples: &mut [TrainingSample],
        batch: &[usize],
    ) -> Result<EpochLosses> {
        let dt = self.opts.dt;
        let probe = self.train_policy.then_some(self.opts.probe_delta);
        let mut bdata = BarrierDataset::default();
        let mut ldata = LyapunovDataset::default();
        for &i in batch {
            let s = &samples[i];
            let transition = if s.roles.needs_successor() {
                Some(match (&s.next_obs, self.train_policy) {
                    (Some(next), false) => Transition::new(s.obs.clone(), next.clone(), dt),
                    _ => build_transition(env, &s.state, &nets.policy, dt, probe)?,
                })
            } else {
                None
            };
            if s.roles.init {
                bdata.d_init.push(s.obs.clone());
            }
            if s.roles.safe {
                bdata.d_safe.push(s.obs.clone());
            }
            if s.roles.goal {
                ldata.d_goal.push(s.obs.clone());
            }
            if let Some(t) = transition {
                if s.roles.decrease {
                    ldata.d_decrease.push(t.clone());
                }
                if s.roles.nondec {
                    bdata.d_nondec.push(t);
                }
            }
        }

        let mut out = EpochLosses::default();
        let mut policy_grad = Gradients::zeros_like(nets.policy.net());
        if let (Some(b), Some(opt)) = (nets.barrier.as_mut(), self.barrier_opt.as_mut()) {
            let (l, g) = loss_barrier_with_margin(&nets.policy, b, &bdata, self.opts.margin)?;
            out.init = l.init;
            out.safe = l.safe;
            out.nondec = l.nondec;
            policy_grad.add_scaled(&g.policy, 1.0)?;
            opt.step(b.net_mut().params_mut(), g.certificate.as_slice())?;
        }
        if let (Some(v), Some(opt)) = (nets.lyapunov.as_mut(), self.lyapunov_opt.as_mut()) {
            let (l, g) = loss_lyapunov_with_margin(&nets.policy, v, &ldata, self.opts.margin)?;
            out.goal = l.goal;
            out.decrease = l.decrease;
            policy_grad.add_scaled(&g.policy, 1.0)?;
            opt.step(v.net_mut().params_mut(), g.certificate.as_slice())?;
        }
        if let Some(opt) = self.policy_opt.as_mut() {
            if self.opts.tracking_weight > 0.0 {
                let w = 2.0 * self.opts.tracking_weight / batch.len() as f64;
                for &i in batch {
                    let s = &samples[i];
                    let reference = env.reference_action(&s.state);
                    let (a, trace) = nets.policy.action_traced(&s.obs)?;
                    let g: Vec<f64> = a.iter().zip(&reference.values).map(|(a, r)| w * (a - r)).collect();
                    policy_grad.add_scaled(&nets.policy.backward(&trace, &g)?, 1.0)?;
                }
            }
            opt.step(nets.policy.net_mut().params_mut(), policy_grad.as_slice())?;
        }
        Ok(out)
    }
}

/// Settings for initial joint training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub fit: FitOptions,
    /// Uniform samples over the whole sample box.
    pub uniform_samples: usize,
    /// Extra samples drawn from the initial set.
    pub initial_samples: usize,
    /// Extra samples drawn from the goal region (Lyapunov training only).
    pub goal_samples: usize,
    /// On-policy rollouts from the initial set.
    pub rollouts: usize,
    /// Length of those rollouts in intervals; also the time horizon of uniform samples.
    pub horizon_steps: usize,
    /// Keep every `rollout_stride`-th rollout state.
    pub rollout_stride: usize,
    /// Re-collect the on-policy rollouts every this many epochs (0: never).
    pub refresh_every: usize,
    pub hidden: Vec<usize>,
    pub with_lyapunov: bool,
    /// Stop once this many black-box steps were spent.
    pub max_env_steps: Option<u64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            fit: FitOptions::default(),
            uniform_samples: 10_000,
            initial_samples: 1_000,
            goal_samples: 500,
            rollouts: 50,
            horizon_steps: 200,
            rollout_stride: 4,
            refresh_every: 10,
            hidden: vec![32, 32],
            with_lyapunov: false,
            max_env_steps: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fit.batch_size == 0
            || self.horizon_steps == 0
            || self.rollout_stride == 0
            || self.hidden.contains(&0)
            || !(self.fit.dt > 0.0)
            || !(self.fit.lr_policy > 0.0)
            || !(self.fit.lr_certificate > 0.0)
            || !(self.fit.probe_delta > 0.0)
            || !(self.fit.tracking_weight >= 0.0)
        {
            return Err(Error::Config(format!("invalid training configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub networks: Networks,
    pub curve: Vec<EpochLosses>,
    /// Set when `max_env_steps` stopped training early.
    pub budget_exhausted: bool,
}

/// Freshly initialized networks for `env`.
pub fn init_networks<R: Rng + ?Sized>(
    env: &BlackBoxEnv,
    hidden: &[usize],
    with_lyapunov: bool,
    rng: &mut R,
) -> Result<Networks> {
    let spec = env.spec();
    let obs_dim = spec.observation_dim();
    Ok(Networks {
        policy: PolicyFn::init(obs_dim, hidden, spec.action_bounds.clone(), rng)?,
        barrier: Some(BarrierFn::init(obs_dim, hidden, rng)?),
        lyapunov: if with_lyapunov {
            Some(LyapunovFn::init(obs_dim, hidden, rng)?)
        } else {
            None
        },
    })
}

/// States uniform in the goal disc with velocities and times from the sample box.
pub fn sample_goal_states<R: Rng + ?Sized>(
    env: &BlackBoxEnv,
    count: usize,
    horizon: f64,
    rng: &mut R,
) -> Vec<SystemState> {
    let spec = env.spec();
    let r = spec.goal_radius;
    env.sample_states(count, horizon, rng)
        .into_iter()
        .map(|s| {
            let pos: Vec<f64> = loop {
                let offset: Vec<f64> = (0..spec.goal_center.len()).map(|_| rng.gen_range(-r..=r)).collect();
                if offset.iter().map(|o| o * o).sum::<f64>() <= r * r {
                    break spec.goal_center.iter().zip(&offset).map(|(c, o)| c + o).collect();
                }
            };
            let (_, vel) = env.kinematics(&s);
            env.with_kinematics(&s, &pos, &vel)
        })
        .collect()
}

/// States visited by `count` rollouts of `policy` from the initial set, every
/// `stride`-th point.
pub fn on_policy_states(
    env: &BlackBoxEnv,
    policy: &PolicyFn,
    count: usize,
    steps: usize,
    dt: f64,
    stride: usize,
    seed: u64,
) -> Result<Vec<SystemState>> {
    let runs = crate::dynamics::parallel_rollouts(env, policy, count, steps, dt, seed)?;
    Ok(runs
        .into_iter()
        .flat_map(|r| {
            r.trajectory
                .points()
                .iter()
                .step_by(stride)
                .cloned()
                .collect::<Vec<_>>()
        })
        .collect())
}

/// Initial joint training of the policy, the barrier and optionally a
/// Lyapunov function.
pub fn train_joint(env: &mut BlackBoxEnv, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let mut init_rng = seeds::stream(config.seed, "init", 0);
    let mut nets = init_networks(env, &config.hidden, config.with_lyapunov, &mut init_rng)?;
    let horizon = config.horizon_steps as f64 * config.fit.dt;

    let mut data_rng = seeds::stream(config.seed, "train-data", 0);
    let mut fixed: Vec<SystemState> = env.sample_states(config.uniform_samples, horizon, &mut data_rng);
    fixed.extend(env.sample_initial_states(config.initial_samples, &mut data_rng)?);
    if config.with_lyapunov {
        fixed.extend(sample_goal_states(env, config.goal_samples, horizon, &mut data_rng));
    }
    let fixed: Vec<TrainingSample> = fixed
        .into_iter()
        .map(|s| {
            let roles = Roles::by_membership(env, &s);
            TrainingSample::new(env, s, roles)
        })
        .collect();

    let mut learner = Learner::new(&nets, config.fit.clone(), true)?;
    let mut shuffle_rng = seeds::stream(config.seed, "train-shuffle", 0);
    let mut curve = Vec::with_capacity(config.epochs);
    let mut pool: Vec<TrainingSample> = Vec::new();
    let start_steps = env.call_counts().steps;
    let mut budget_exhausted = false;
    for epoch in 0..config.epochs {
        if epoch == 0 || (config.refresh_every > 0 && epoch % config.refresh_every == 0) {
            pool = fixed.clone();
            let states = on_policy_states(
                env,
                &nets.policy,
                config.rollouts,
                config.horizon_steps,
                config.fit.dt,
                config.rollout_stride,
                seeds::derive_seed(config.seed, "train-rollouts", epoch as u64),
            )?;
            pool.extend(states.into_iter().map(|s| {
                let roles = Roles::by_membership(env, &s);
                TrainingSample::new(env, s, roles)
            }));
        }
        curve.push(learner.epoch(env, &mut nets, &mut pool, &mut shuffle_rng)?);
        if let Some(limit) = config.max_env_steps {
            if env.call_counts().steps - start_steps >= limit && epoch + 1 < config.epochs {
                log::warn!(
                    "training stopped after {} epochs: environment step budget spent",
                    epoch + 1
                );
                budget_exhausted = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        networks: nets,
        curve,
        budget_exhausted,
    })
}
