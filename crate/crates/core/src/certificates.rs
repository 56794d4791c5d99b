//! Policy and certificate networks, and evaluation of the barrier and
//! Lyapunov conditions on observed states.
//!
//! The Lie derivative along the unknown dynamics is replaced by the forward
//! difference of the certificate between two consecutive observations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{BlackBoxEnv, ControlAction, Controller, SystemState};
use crate::nn::{Activation, ForwardCache, Gradients, Mlp, ModelFile, ModelRole, OutputTransform};
use crate::{Error, Result};

/// Control policy: an MLP whose outputs are squashed into the action box by `tanh`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyFn {
    net: Mlp,
    bounds: Vec<(f64, f64)>,
}

/// Everything needed to backpropagate an action gradient into the policy.
#[derive(Debug, Clone)]
pub struct PolicyTrace {
    cache: ForwardCache,
    squashed: Vec<f64>,
}

impl PolicyFn {
    pub fn new(net: Mlp, bounds: Vec<(f64, f64)>) -> Result<Self> {
        if net.output_dim() != bounds.len() {
            return Err(Error::shape(
                format!("policy output of dimension {}", bounds.len()),
                net.output_dim(),
            ));
        }
        if net.output_transform() != OutputTransform::Identity {
            return Err(Error::InvalidInput(
                "policy networks use the identity output transform".into(),
            ));
        }
        if bounds.iter().any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::InvalidInput("action bounds need lo < hi".into()));
        }
        Ok(Self { net, bounds })
    }

    pub fn init<R: Rng + ?Sized>(
        obs_dim: usize,
        hidden: &[usize],
        bounds: Vec<(f64, f64)>,
        rng: &mut R,
    ) -> Result<Self> {
        let dims = layer_dims(obs_dim, hidden, bounds.len());
        Self::new(
            Mlp::new(&dims, Activation::Tanh, OutputTransform::Identity, rng)?,
            bounds,
        )
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    fn squash(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let t: Vec<f64> = z.iter().map(|v| v.tanh()).collect();
        let a = t
            .iter()
            .zip(&self.bounds)
            .map(|(t, (lo, hi))| 0.5 * (lo + hi) + 0.5 * (hi - lo) * t)
            .collect();
        (a, t)
    }

    pub fn action(&self, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(self.squash(&self.net.eval(obs)?).0)
    }

    pub fn action_traced(&self, obs: &[f64]) -> Result<(Vec<f64>, PolicyTrace)> {
        let (z, cache) = self.net.forward(obs)?;
        let (a, squashed) = self.squash(&z);
        Ok((a, PolicyTrace { cache, squashed }))
    }

    /// Parameter gradient of `action · action_grad`.
    pub fn backward(&self, trace: &PolicyTrace, action_grad: &[f64]) -> Result<Gradients> {
        let out_grad: Vec<f64> = action_grad
            .iter()
            .zip(&trace.squashed)
            .zip(&self.bounds)
            .map(|((g, t), (lo, hi))| g * 0.5 * (hi - lo) * (1.0 - t * t))
            .collect();
        Ok(self.net.backward(&trace.cache, &out_grad)?.0)
    }

    pub fn to_model_file(&self) -> ModelFile {
        ModelFile {
            role: ModelRole::Policy,
            action_bounds: Some(self.bounds.clone()),
            network: self.net.clone(),
        }
    }

    pub fn from_model_file(file: ModelFile) -> Result<Self> {
        expect_role(&file, ModelRole::Policy)?;
        let bounds = file
            .action_bounds
            .ok_or_else(|| Error::InvalidInput("policy model file lacks action_bounds".into()))?;
        Self::new(file.network, bounds)
    }
}

impl Controller for PolicyFn {
    fn act(&self, observation: &[f64]) -> Result<ControlAction> {
        Ok(ControlAction::new(self.action(observation)?))
    }
}

/// Barrier certificate `B`: scalar network, identity output.
#[derive(Debug, Clone, PartialEq)]
pub struct BarrierFn {
    net: Mlp,
}

impl BarrierFn {
    pub fn new(net: Mlp) -> Result<Self> {
        check_scalar(&net, OutputTransform::Identity)?;
        Ok(Self { net })
    }

    pub fn init<R: Rng + ?Sized>(obs_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let dims = layer_dims(obs_dim, hidden, 1);
        Self::new(Mlp::new(&dims, Activation::Tanh, OutputTransform::Identity, rng)?)
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64> {
        self.net.eval_scalar(obs)
    }

    pub fn to_model_file(&self) -> ModelFile {
        ModelFile {
            role: ModelRole::Barrier,
            action_bounds: None,
            network: self.net.clone(),
        }
    }

    pub fn from_model_file(file: ModelFile) -> Result<Self> {
        expect_role(&file, ModelRole::Barrier)?;
        Self::new(file.network)
    }
}

/// Lyapunov certificate `V`: scalar network with squared (non-negative) output.
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovFn {
    net: Mlp,
}

impl LyapunovFn {
    pub fn new(net: Mlp) -> Result<Self> {
        check_scalar(&net, OutputTransform::NonNegative)?;
        Ok(Self { net })
    }

    /// Accepts any scalar network, e.g. one produced elsewhere without the squared output.
    pub fn imported(net: Mlp) -> Result<Self> {
        if net.output_dim() != 1 {
            return Err(Error::shape("scalar output", net.output_dim()));
        }
        Ok(Self { net })
    }

    pub fn init<R: Rng + ?Sized>(obs_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let dims = layer_dims(obs_dim, hidden, 1);
        Self::new(Mlp::new(&dims, Activation::Tanh, OutputTransform::NonNegative, rng)?)
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64> {
        self.net.eval_scalar(obs)
    }

    pub fn to_model_file(&self) -> ModelFile {
        ModelFile {
            role: ModelRole::Lyapunov,
            action_bounds: None,
            network: self.net.clone(),
        }
    }

    pub fn from_model_file(file: ModelFile) -> Result<Self> {
        expect_role(&file, ModelRole::Lyapunov)?;
        Self::imported(file.network)
    }
}

fn layer_dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    std::iter::once(input)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(output))
        .collect()
}

fn check_scalar(net: &Mlp, transform: OutputTransform) -> Result<()> {
    if net.output_dim() != 1 {
        return Err(Error::shape("scalar output", net.output_dim()));
    }
    if net.output_transform() != transform {
        return Err(Error::InvalidInput(format!(
            "certificate network needs output transform {transform:?}"
        )));
    }
    Ok(())
}

fn expect_role(file: &ModelFile, role: ModelRole) -> Result<()> {
    if file.role != role {
        return Err(Error::InvalidInput(format!(
            "expected a {role:?} model, found {:?}",
            file.role
        )));
    }
    Ok(())
}

/// Forward-difference estimate of the Lie derivative between two observations.
pub fn lie_derivative_fd(value_n: f64, value_n1: f64, t_n: f64, t_n1: f64) -> Result<f64> {
    let gap = t_n1 - t_n;
    if !(gap > 0.0) {
        return Err(Error::InvalidInput(format!(
            "time points must increase, got {t_n} -> {t_n1}"
        )));
    }
    Ok((value_n1 - value_n) / gap)
}

/// Constants bounding the finite-difference Lie-derivative error.
///
/// `lip_b`/`lip_f` are Lipschitz constants of the certificate and the dynamics,
/// `c_b`/`c_f` the bounding constants. The bound multiplies them exactly as
/// `0.5 * dt * (c_b * lip_f + c_f * lip_b) * c_f`; which constant bounds which
/// quantity is left to the caller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LieApproxConfig {
    pub dt: f64,
    pub c_b: f64,
    pub c_f: f64,
    pub lip_b: f64,
    pub lip_f: f64,
}

impl LieApproxConfig {
    pub fn new(dt: f64, c_b: f64, c_f: f64, lip_b: f64, lip_f: f64) -> Result<Self> {
        let cfg = Self {
            dt,
            c_b,
            c_f,
            lip_b,
            lip_f,
        };
        if !(dt >= 0.0) || [c_b, c_f, lip_b, lip_f].iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "invalid Lie approximation constants {cfg:?}"
            )));
        }
        Ok(cfg)
    }
}

pub fn lie_error_bound(cfg: &LieApproxConfig) -> f64 {
    0.5 * cfg.dt * (cfg.c_b * cfg.lip_f + cfg.c_f * cfg.lip_b) * cfg.c_f
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CertKind {
    None,
    PropertyUnsafe,
    InitCond,
    SafetyCond,
    NonDecCond,
    ZeroGoalCond,
    PositivityCond,
    DecreasingCond,
}

impl CertKind {
    pub const VIOLATIONS: [CertKind; 7] = [
        CertKind::PropertyUnsafe,
        CertKind::InitCond,
        CertKind::SafetyCond,
        CertKind::NonDecCond,
        CertKind::ZeroGoalCond,
        CertKind::PositivityCond,
        CertKind::DecreasingCond,
    ];

    pub fn bit(self) -> u8 {
        match self {
            CertKind::None => 0,
            k => 1 << (k as u8 - 1),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CertKind::None => "None",
            CertKind::PropertyUnsafe => "PropertyUnsafe",
            CertKind::InitCond => "InitCond",
            CertKind::SafetyCond => "SafetyCond",
            CertKind::NonDecCond => "NonDecCond",
            CertKind::ZeroGoalCond => "ZeroGoalCond",
            CertKind::PositivityCond => "PositivityCond",
            CertKind::DecreasingCond => "DecreasingCond",
        }
    }

    /// Certificate-condition violations, as opposed to property violations.
    pub fn is_certificate(self) -> bool {
        !matches!(self, CertKind::None | CertKind::PropertyUnsafe)
    }
}

/// Outcome of checking one state: the first violated condition, plus every
/// violated condition in `mask` (one [`CertKind::bit`] each).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertVerdict {
    pub kind: CertKind,
    pub state: SystemState,
    /// The violating quantity: clearance, certificate value, or `L + B`.
    pub detail: f64,
    pub mask: u8,
}

impl CertVerdict {
    pub fn none(state: SystemState) -> Self {
        Self {
            kind: CertKind::None,
            state,
            detail: 0.0,
            mask: 0,
        }
    }

    pub fn is_violation(&self) -> bool {
        self.kind != CertKind::None
    }
}

/// The observation one interval later and its time.
#[derive(Debug, Clone, Copy)]
pub struct NextObservation<'a> {
    pub obs: &'a [f64],
    pub time: f64,
}

/// Checks the property and the barrier conditions at `x_n`.
///
/// Order: `PropertyUnsafe`, `InitCond`, `SafetyCond`, `NonDecCond`. The
/// non-decreasing condition is only checked when `next` is given.
pub fn barrier_check(
    barrier: &BarrierFn,
    obs_n: &[f64],
    next: Option<NextObservation<'_>>,
    x_n: &SystemState,
    env: &BlackBoxEnv,
) -> Result<CertVerdict> {
    let b_n = barrier.value(obs_n)?;
    let lie = match next {
        Some(n) => Some(lie_derivative_fd(b_n, barrier.value(n.obs)?, x_n.timestamp, n.time)?),
        None => None,
    };
    let clearance = env.clearance(x_n);
    let unsafe_ = env.in_unsafe(x_n);
    let initial = env.in_initial(x_n);

    let mut found: Vec<(CertKind, f64)> = Vec::new();
    if unsafe_ {
        found.push((CertKind::PropertyUnsafe, clearance));
    }
    if initial && b_n < 0.0 {
        found.push((CertKind::InitCond, b_n));
    }
    if b_n < 0.0 {
        found.push((CertKind::SafetyCond, b_n));
    }
    if let Some(l) = lie {
        if b_n >= 0.0 && l + b_n < 0.0 {
            found.push((CertKind::NonDecCond, l + b_n));
        }
    }
    Ok(verdict_from(found, x_n))
}

/// Checks the Lyapunov conditions at `x_n`.
///
/// Order: `ZeroGoalCond` (`|V| > zero_tol` on the goal), `PositivityCond`
/// (`V < 0`), `DecreasingCond` (off the goal, `V > 0` and the estimated Lie
/// derivative is `>= 0`; needs `next`).
pub fn lyapunov_check(
    lyapunov: &LyapunovFn,
    obs_n: &[f64],
    next: Option<NextObservation<'_>>,
    x_n: &SystemState,
    env: &BlackBoxEnv,
    zero_tol: f64,
) -> Result<CertVerdict> {
    let v_n = lyapunov.value(obs_n)?;
    let lie = match next {
        Some(n) => Some(lie_derivative_fd(v_n, lyapunov.value(n.obs)?, x_n.timestamp, n.time)?),
        None => None,
    };
    let goal = env.in_goal(x_n);

    let mut found: Vec<(CertKind, f64)> = Vec::new();
    if goal && v_n.abs() > zero_tol {
        found.push((CertKind::ZeroGoalCond, v_n));
    }
    if v_n < 0.0 {
        found.push((CertKind::PositivityCond, v_n));
    }
    if let Some(l) = lie {
        if !goal && v_n > 0.0 && l >= 0.0 {
            found.push((CertKind::DecreasingCond, l));
        }
    }
    Ok(verdict_from(found, x_n))
}

fn verdict_from(found: Vec<(CertKind, f64)>, x_n: &SystemState) -> CertVerdict {
    let mask = found.iter().fold(0u8, |m, (k, _)| m | k.bit());
    match found.first() {
        Some(&(kind, detail)) => CertVerdict {
            kind,
            state: x_n.clone(),
            detail,
            mask,
        },
        None => CertVerdict::none(x_n.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{EnvKind, ResetMode};
    use crate::nn::DenseArray;

    /// `B(obs) = obs[0]`.
    fn first_component_barrier(dim: usize) -> BarrierFn {
        let mut w = vec![0.0; dim];
        w[0] = 1.0;
        BarrierFn::new(
            Mlp::from_parts(
                &[dim, 1],
                Activation::Tanh,
                OutputTransform::Identity,
                vec![DenseArray::from_vec(&[1, dim], w).unwrap()],
                vec![DenseArray::vector(vec![0.0])],
            )
            .unwrap(),
        )
        .unwrap()
    }

    /// `V(obs) = obs[0]^2`.
    fn first_component_lyapunov(dim: usize) -> LyapunovFn {
        let mut w = vec![0.0; dim];
        w[0] = 1.0;
        LyapunovFn::new(
            Mlp::from_parts(
                &[dim, 1],
                Activation::Tanh,
                OutputTransform::NonNegative,
                vec![DenseArray::from_vec(&[1, dim], w).unwrap()],
                vec![DenseArray::vector(vec![0.0])],
            )
            .unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn finite_difference_quotient() {
        assert!((lie_derivative_fd(1.0, 1.2, 0.0, 0.1).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(lie_derivative_fd(0.7, 0.7, 3.0, 3.1).unwrap(), 0.0);
        assert!(lie_derivative_fd(1.0, 1.0, 1.0, 1.0).is_err());
        assert!(lie_derivative_fd(1.0, 1.0, 1.0, 0.5).is_err());
    }

    #[test]
    fn quadratic_trajectory_difference() {
        // B(x) = x along x(t) = t^2, sampled at t = 1 and 1.1.
        let l = lie_derivative_fd(1.0, 1.1f64.powi(2), 1.0, 1.1).unwrap();
        assert!((l - 2.1).abs() < 1e-12);
        // |x''| = 2 bounds the error by 0.5 * dt * 2 = 0.1 = l - 2.
        let eps = lie_error_bound(&LieApproxConfig::new(0.1, 1.0, 1.0, 1.0, 1.0).unwrap());
        assert!((l - 2.0).abs() <= eps + 1e-12);
    }

    #[test]
    fn error_bound_formula() {
        let cfg = LieApproxConfig::new(0.1, 1.0, 2.0, 1.0, 1.0).unwrap();
        assert!((lie_error_bound(&cfg) - 0.3).abs() < 1e-12);
        let zero = LieApproxConfig { dt: 0.0, ..cfg };
        assert_eq!(lie_error_bound(&zero), 0.0);
        let double = LieApproxConfig { dt: 0.2, ..cfg };
        assert!((lie_error_bound(&double) - 2.0 * lie_error_bound(&cfg)).abs() < 1e-12);
        assert!(LieApproxConfig::new(0.1, -1.0, 1.0, 1.0, 1.0).is_err());
    }

    fn drone_state(x: f64, y: f64, t: f64) -> SystemState {
        SystemState::new(vec![x, y, 0.0, 0.0], t)
    }

    #[test]
    fn unsafe_state_is_reported_first() {
        let env = BlackBoxEnv::preset(EnvKind::Drone2d);
        let dim = env.spec().observation_dim();
        let b = first_component_barrier(dim);
        let x = drone_state(-1.0, 5.0, 0.0);
        let mut obs = vec![0.0; dim];
        obs[0] = 5.0;
        let v = barrier_check(&b, &obs, None, &x, &env).unwrap();
        assert_eq!(v.kind, CertKind::PropertyUnsafe);
    }

    #[test]
    fn non_decreasing_violation_detail() {
        let env = BlackBoxEnv::preset(EnvKind::Drone2d);
        let dim = env.spec().observation_dim();
        let b = first_component_barrier(dim);
        // Safe, outside X_0.
        let x = drone_state(2.5, 5.0, 0.0);
        let (mut o1, mut o2) = (vec![0.0; dim], vec![0.0; dim]);
        o1[0] = 0.1;
        o2[0] = 0.05;
        let v = barrier_check(&b, &o1, Some(NextObservation { obs: &o2, time: 0.1 }), &x, &env).unwrap();
        assert_eq!(v.kind, CertKind::NonDecCond);
        assert!((v.detail + 0.4).abs() < 1e-12);

        o1[0] = 0.5;
        o2[0] = 0.6;
        let v = barrier_check(&b, &o1, Some(NextObservation { obs: &o2, time: 0.1 }), &x, &env).unwrap();
        assert_eq!(v.kind, CertKind::None);
    }

    #[test]
    fn init_condition_precedes_safety_condition() {
        let env = BlackBoxEnv::preset(EnvKind::Drone2d);
        let dim = env.spec().observation_dim();
        let b = first_component_barrier(dim);
        let x = drone_state(1.0, 5.0, 0.0);
        assert!(env.in_initial(&x));
        let mut obs = vec![0.0; dim];
        obs[0] = -0.2;
        let v = barrier_check(&b, &obs, None, &x, &env).unwrap();
        assert_eq!(v.kind, CertKind::InitCond);
        assert_eq!(v.mask, CertKind::InitCond.bit() | CertKind::SafetyCond.bit());
    }

    #[test]
    fn lyapunov_conditions() {
        let mut env = BlackBoxEnv::preset(EnvKind::Drone2d);
        let dim = env.spec().observation_dim();
        let v = first_component_lyapunov(dim);
        let goal = drone_state(9.0, 5.0, 0.0);
        env.reset(&goal, ResetMode::Override).unwrap();
        let mut o = vec![0.0; dim];
        o[0] = 0.05f64.sqrt();
        let verdict = lyapunov_check(&v, &o, None, &goal, &env, 1e-3).unwrap();
        assert_eq!(verdict.kind, CertKind::ZeroGoalCond);

        let away = drone_state(5.0, 5.0, 0.0);
        let (mut a, mut b) = (vec![0.0; dim], vec![0.0; dim]);
        a[0] = 0.2f64.sqrt();
        b[0] = 0.25f64.sqrt();
        let verdict = lyapunov_check(&v, &a, Some(NextObservation { obs: &b, time: 0.1 }), &away, &env, 1e-3).unwrap();
        assert_eq!(verdict.kind, CertKind::DecreasingCond);
        assert!((verdict.detail - 0.5).abs() < 1e-9);

        b[0] = 0.1f64.sqrt();
        let verdict = lyapunov_check(&v, &a, Some(NextObservation { obs: &b, time: 0.1 }), &away, &env, 1e-3).unwrap();
        assert_eq!(verdict.kind, CertKind::None);
    }

    #[test]
    fn policy_actions_stay_within_bounds() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let policy = PolicyFn::init(3, &[8], vec![(-1.0, 1.0), (0.0, 2.0)], &mut rng).unwrap();
        for i in 0..100 {
            let obs = [i as f64 - 50.0, (i as f64).sin() * 30.0, 1.0];
            let a = policy.action(&obs).unwrap();
            assert!((-1.0..=1.0).contains(&a[0]) && (0.0..=2.0).contains(&a[1]));
        }
    }

    #[test]
    fn model_files_carry_roles() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let policy = PolicyFn::init(4, &[5], vec![(-1.0, 1.0)], &mut rng).unwrap();
        let text = serde_json::to_string(&policy.to_model_file()).unwrap();
        let file: ModelFile = serde_json::from_str(&text).unwrap();
        assert_eq!(PolicyFn::from_model_file(file.clone()).unwrap(), policy);
        assert!(BarrierFn::from_model_file(file).is_err());
    }
}
