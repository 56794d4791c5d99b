use std::f64::consts::PI;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::integrate::rk4_integrate;
use super::obstacles::{dist, ObstacleTrack};
use super::{ControlAction, SystemState};
use crate::{Error, Result};

/// Observation slot value used when fewer than `neighbors` obstacles exist.
pub const SENTINEL_DISTANCE: f64 = 20.0;

/// Built-in environment families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    /// Planar double integrator `(x, y, vx, vy)` among moving circular obstacles.
    Drone2d,
    /// Planar vessel `(x, y, heading, surge, sway, yaw rate)` among moving ships.
    Ship2d,
    /// One-dimensional double integrator `(x, v)` with a static obstacle.
    Corridor1d,
}

/// Where position and velocity live inside the state vector.
///
/// This is knowledge of the state space, not of the dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateLayout {
    /// `[position (dim), velocity (dim)]`.
    PointMass { dim: usize },
    /// `[x, y, heading, surge, sway, yaw rate]`; body-frame velocities.
    Vessel,
}

impl StateLayout {
    pub fn position_dim(self) -> usize {
        match self {
            StateLayout::PointMass { dim } => dim,
            StateLayout::Vessel => 2,
        }
    }

    pub fn state_dim(self) -> usize {
        match self {
            StateLayout::PointMass { dim } => 2 * dim,
            StateLayout::Vessel => 6,
        }
    }
}

/// Publicly known description of an environment: spaces, sets, obstacle routes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub kind: EnvKind,
    pub layout: StateLayout,
    pub action_bounds: Vec<(f64, f64)>,
    /// Closed box per position dimension; leaving it is unsafe.
    pub arena: Vec<(f64, f64)>,
    /// Box over the full state; `X_0` is this box minus the unsafe set.
    pub initial_box: Vec<(f64, f64)>,
    /// Box over the full state used for uniform training samples.
    pub sample_box: Vec<(f64, f64)>,
    pub agent_radius: f64,
    pub goal_center: Vec<f64>,
    pub goal_radius: f64,
    pub obstacles: Vec<ObstacleTrack>,
    /// Internal RK4 substep.
    pub h_int: f64,
    /// Number of nearest obstacles in the observation.
    pub neighbors: usize,
}

impl EnvSpec {
    pub fn state_dim(&self) -> usize {
        self.layout.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.action_bounds.len()
    }

    pub fn position_dim(&self) -> usize {
        self.layout.position_dim()
    }

    pub fn observation_dim(&self) -> usize {
        let p = self.position_dim();
        self.state_dim() + self.neighbors * 2 * p + p
    }

    pub fn preset(kind: EnvKind) -> Self {
        match kind {
            EnvKind::Drone2d => drone2d_spec(),
            EnvKind::Ship2d => ship2d_spec(),
            EnvKind::Corridor1d => corridor1d_spec(),
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        let p = self.position_dim();
        let expected_layout = match self.kind {
            EnvKind::Drone2d => StateLayout::PointMass { dim: 2 },
            EnvKind::Ship2d => StateLayout::Vessel,
            EnvKind::Corridor1d => StateLayout::PointMass { dim: 1 },
        };
        let bad = |msg: String| Err(Error::InvalidInput(format!("{}: {msg}", self.name)));
        if self.layout != expected_layout {
            return bad(format!("layout {:?} does not match kind {:?}", self.layout, self.kind));
        }
        let expected_actions = match self.kind {
            EnvKind::Corridor1d => 1,
            _ => 2,
        };
        if self.action_bounds.len() != expected_actions {
            return bad(format!("expected {expected_actions} action bounds"));
        }
        let valid_box = |b: &[(f64, f64)], len: usize| {
            b.len() == len && b.iter().all(|(lo, hi)| lo.is_finite() && hi.is_finite() && lo <= hi)
        };
        if !valid_box(&self.action_bounds, expected_actions) || self.action_bounds.iter().any(|(lo, hi)| lo >= hi) {
            return bad("action bounds must be finite with lo < hi".into());
        }
        if !valid_box(&self.arena, p) || self.arena.iter().any(|(lo, hi)| lo >= hi) {
            return bad("arena must give lo < hi for every position dimension".into());
        }
        if !valid_box(&self.initial_box, n) || !valid_box(&self.sample_box, n) {
            return bad(format!("initial and sample boxes need {n} finite intervals"));
        }
        if !(self.agent_radius >= 0.0 && self.goal_radius > 0.0) {
            return bad("agent radius must be >= 0 and goal radius > 0".into());
        }
        if self.goal_center.len() != p {
            return bad(format!("goal center must have {p} coordinates"));
        }
        if !(self.h_int > 0.0 && self.h_int.is_finite()) {
            return bad("integrator step must be positive".into());
        }
        for track in &self.obstacles {
            track.validate(Some(p))?;
        }
        // Goal disc must stay clear of the arena edge and of every obstacle route.
        for (c, (lo, hi)) in self.goal_center.iter().zip(&self.arena) {
            if c - self.goal_radius < *lo || c + self.goal_radius > *hi {
                return bad("goal disc must lie inside the arena".into());
            }
        }
        for (i, track) in self.obstacles.iter().enumerate() {
            let reach = track.radius + self.agent_radius + self.goal_radius;
            if route_distance(track, &self.goal_center) <= reach {
                return bad(format!("obstacle {i} route intersects the goal set"));
            }
        }
        Ok(())
    }
}

fn route_distance(track: &ObstacleTrack, point: &[f64]) -> f64 {
    let w = &track.waypoints;
    if w.len() == 1 {
        return dist(&w[0], point);
    }
    (0..w.len())
        .map(|i| segment_distance(&w[i], &w[(i + 1) % w.len()], point))
        .fold(f64::INFINITY, f64::min)
}

fn segment_distance(a: &[f64], b: &[f64], p: &[f64]) -> f64 {
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let len2: f64 = ab.iter().map(|v| v * v).sum();
    let s = if len2 == 0.0 {
        0.0
    } else {
        (a.iter().zip(p).zip(&ab).map(|((x, q), d)| (q - x) * d).sum::<f64>() / len2).clamp(0.0, 1.0)
    };
    let closest: Vec<f64> = a.iter().zip(&ab).map(|(x, d)| x + s * d).collect();
    dist(&closest, p)
}

/// Drone obstacles: center, whether the sweep is vertical, speed. Each sweeps
/// 1 m to either side of its center.
const DRONE_SWEEPS: [([f64; 2], bool, f64); 8] = [
    ([3.2, 2.5], true, 0.16),
    ([3.5, 6.8], false, 0.14),
    ([4.7, 4.5], true, 0.18),
    ([5.0, 8.2], false, 0.12),
    ([5.8, 2.0], false, 0.16),
    ([6.2, 6.1], true, 0.14),
    ([7.3, 3.7], false, 0.12),
    ([7.2, 7.8], true, 0.16),
];
const DRONE_OBSTACLE_RADIUS: f64 = 0.7;

fn sweep_track(center: [f64; 2], vertical: bool, half_length: f64, speed: f64, radius: f64) -> ObstacleTrack {
    let (dx, dy) = if vertical {
        (0.0, half_length)
    } else {
        (half_length, 0.0)
    };
    ObstacleTrack {
        waypoints: vec![
            vec![center[0] - dx, center[1] - dy],
            vec![center[0] + dx, center[1] + dy],
        ],
        period: 4.0 * half_length / speed,
        radius,
    }
}

fn drone2d_spec() -> EnvSpec {
    let obstacles = DRONE_SWEEPS
        .iter()
        .map(|&(c, vertical, speed)| sweep_track(c, vertical, 1.0, speed, DRONE_OBSTACLE_RADIUS))
        .collect();
    EnvSpec {
        name: "drone2d".into(),
        kind: EnvKind::Drone2d,
        layout: StateLayout::PointMass { dim: 2 },
        action_bounds: vec![(-1.0, 1.0); 2],
        arena: vec![(0.0, 10.0); 2],
        initial_box: vec![(0.5, 1.5), (1.0, 9.0), (-0.1, 0.1), (-0.1, 0.1)],
        sample_box: vec![(-1.0, 11.0), (-1.0, 11.0), (-2.0, 2.0), (-2.0, 2.0)],
        agent_radius: 0.15,
        goal_center: vec![9.0, 5.0],
        goal_radius: 0.5,
        obstacles,
        h_int: 0.02,
        neighbors: 8,
    }
}

/// Ship obstacles, same layout as [`DRONE_SWEEPS`].
const SHIP_SWEEPS: [([f64; 2], bool, f64); 8] = [
    ([1.5, 3.0], true, 0.15),
    ([8.5, 3.5], true, 0.15),
    ([2.5, 6.0], false, 0.12),
    ([7.5, 6.5], false, 0.12),
    ([1.2, 8.5], false, 0.1),
    ([8.8, 8.0], true, 0.1),
    ([2.6, 4.6], false, 0.15),
    ([7.4, 3.0], true, 0.12),
];
const SHIP_OBSTACLE_RADIUS: f64 = 0.4;

fn ship2d_spec() -> EnvSpec {
    let obstacles = SHIP_SWEEPS
        .iter()
        .map(|&(c, vertical, speed)| sweep_track(c, vertical, 1.0, speed, SHIP_OBSTACLE_RADIUS))
        .collect();
    EnvSpec {
        name: "ship2d".into(),
        kind: EnvKind::Ship2d,
        layout: StateLayout::Vessel,
        action_bounds: vec![(-1.0, 1.0); 2],
        arena: vec![(0.0, 10.0); 2],
        initial_box: vec![
            (2.0, 8.0),
            (0.5, 1.5),
            (PI / 2.0 - 0.3, PI / 2.0 + 0.3),
            (0.0, 0.3),
            (0.0, 0.0),
            (0.0, 0.0),
        ],
        sample_box: vec![
            (-1.0, 11.0),
            (-1.0, 11.0),
            (-PI, PI),
            (-0.5, 2.0),
            (-0.3, 0.3),
            (-1.0, 1.0),
        ],
        agent_radius: 0.15,
        goal_center: vec![5.0, 9.0],
        goal_radius: 0.5,
        obstacles,
        h_int: 0.02,
        neighbors: 8,
    }
}

fn corridor1d_spec() -> EnvSpec {
    EnvSpec {
        name: "corridor1d".into(),
        kind: EnvKind::Corridor1d,
        layout: StateLayout::PointMass { dim: 1 },
        action_bounds: vec![(-1.0, 1.0)],
        arena: vec![(0.0, 10.0)],
        initial_box: vec![(0.5, 1.5), (0.0, 0.5)],
        sample_box: vec![(-1.0, 11.0), (-2.0, 2.0)],
        agent_radius: 0.1,
        goal_center: vec![5.0],
        goal_radius: 0.5,
        obstacles: vec![ObstacleTrack {
            waypoints: vec![vec![8.0]],
            period: 1.0,
            radius: 0.5,
        }],
        h_int: 0.02,
        neighbors: 1,
    }
}

/// Hidden system dynamics `f`.
#[derive(Clone)]
enum Dynamics {
    DoubleIntegrator,
    Vessel {
        surge_damping: f64,
        sway_damping: f64,
        yaw_damping: f64,
    },
}

impl Dynamics {
    fn for_kind(kind: EnvKind) -> Self {
        match kind {
            EnvKind::Drone2d | EnvKind::Corridor1d => Dynamics::DoubleIntegrator,
            EnvKind::Ship2d => Dynamics::Vessel {
                surge_damping: 0.5,
                sway_damping: 0.5,
                yaw_damping: 0.5,
            },
        }
    }

    fn derivative(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        match *self {
            Dynamics::DoubleIntegrator => {
                let p = x.len() / 2;
                let mut dx = x[p..].to_vec();
                dx.extend_from_slice(u);
                dx
            }
            Dynamics::Vessel {
                surge_damping,
                sway_damping,
                yaw_damping,
            } => {
                let (theta, su, sv, w) = (x[2], x[3], x[4], x[5]);
                let (s, c) = theta.sin_cos();
                vec![
                    su * c - sv * s,
                    su * s + sv * c,
                    w,
                    u[0] - surge_damping * su,
                    -sway_damping * sv,
                    u[1] - yaw_damping * w,
                ]
            }
        }
    }
}

/// Counts of black-box interactions, by kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CallCounts {
    pub resets: u64,
    pub steps: u64,
    pub observes: u64,
    pub predicates: u64,
}

#[derive(Default)]
struct Counters {
    resets: AtomicU64,
    steps: AtomicU64,
    observes: AtomicU64,
    predicates: AtomicU64,
}

impl Counters {
    fn snapshot(&self) -> CallCounts {
        CallCounts {
            resets: self.resets.load(Ordering::Relaxed),
            steps: self.steps.load(Ordering::Relaxed),
            observes: self.observes.load(Ordering::Relaxed),
            predicates: self.predicates.load(Ordering::Relaxed),
        }
    }
}

/// How [`BlackBoxEnv::reset`] treats the requested start state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResetMode {
    /// `x0` must lie in `X_0` at time 0.
    Initial,
    /// Any state of the right dimension; the clock is set to `x0.timestamp`.
    Override,
}

/// Simulator handle. The dynamics can only be executed, never inspected.
///
/// ```compile_fail
/// use certrepair::dynamics::{BlackBoxEnv, EnvKind};
/// let env = BlackBoxEnv::preset(EnvKind::Ship2d);
/// let _f = &env.dynamics;
/// ```
#[derive(Clone)]
pub struct BlackBoxEnv {
    spec: EnvSpec,
    dynamics: Dynamics,
    state: SystemState,
    clipped_actions: u64,
    /// Shared by clones, so counts cover every copy of a handle.
    counters: Arc<Counters>,
}

impl fmt::Debug for BlackBoxEnv {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BlackBoxEnv")
            .field("name", &self.spec.name)
            .field("time", &self.state.timestamp)
            .finish_non_exhaustive()
    }
}

impl BlackBoxEnv {
    pub fn preset(kind: EnvKind) -> Self {
        Self::new(EnvSpec::preset(kind)).expect("built-in environment specs are valid")
    }

    pub fn new(spec: EnvSpec) -> Result<Self> {
        spec.validate()?;
        let dynamics = Dynamics::for_kind(spec.kind);
        let state = SystemState::new(spec.initial_box.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect(), 0.0);
        Ok(Self {
            spec,
            dynamics,
            state,
            clipped_actions: 0,
            counters: Arc::new(Counters::default()),
        })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn state(&self) -> &SystemState {
        &self.state
    }

    pub fn time(&self) -> f64 {
        self.state.timestamp
    }

    /// Number of action components clipped to bounds so far.
    pub fn clipped_actions(&self) -> u64 {
        self.clipped_actions
    }

    pub fn call_counts(&self) -> CallCounts {
        self.counters.snapshot()
    }

    fn check_state(&self, state: &SystemState) -> Result<()> {
        if state.values.len() != self.spec.state_dim() {
            return Err(Error::shape(self.spec.state_dim(), state.values.len()));
        }
        if state.values.iter().any(|v| !v.is_finite()) || !(state.timestamp >= 0.0 && state.timestamp.is_finite()) {
            return Err(Error::InvalidInput(
                "state must be finite with a nonnegative timestamp".into(),
            ));
        }
        Ok(())
    }

    pub fn reset(&mut self, x0: &SystemState, mode: ResetMode) -> Result<()> {
        self.counters.resets.fetch_add(1, Ordering::Relaxed);
        self.check_state(x0)?;
        match mode {
            ResetMode::Initial => {
                if x0.timestamp != 0.0 || !self.in_initial_inner(x0) {
                    return Err(Error::Precondition(format!(
                        "reset state {:?} is not in the initial set",
                        x0.values
                    )));
                }
            }
            ResetMode::Override => {}
        }
        self.state = x0.clone();
        Ok(())
    }

    /// Advances the system by `dt` under a zero-order-hold action.
    pub fn step(&mut self, action: &ControlAction, dt: f64) -> Result<SystemState> {
        self.counters.steps.fetch_add(1, Ordering::Relaxed);
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidInput(format!("step length must be positive, got {dt}")));
        }
        if action.values.len() != self.spec.action_dim() {
            return Err(Error::shape(self.spec.action_dim(), action.values.len()));
        }
        if action.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite action".into()));
        }
        let u: Vec<f64> = action
            .values
            .iter()
            .zip(&self.spec.action_bounds)
            .map(|(&a, &(lo, hi))| {
                let c = a.clamp(lo, hi);
                if c != a {
                    self.clipped_actions += 1;
                }
                c
            })
            .collect();
        let dynamics = &self.dynamics;
        let next = rk4_integrate(|x| dynamics.derivative(x, &u), &self.state.values, dt, self.spec.h_int);
        self.state = SystemState::new(next, self.state.timestamp + dt);
        Ok(self.state.clone())
    }

    /// Position and world-frame velocity of a state.
    pub fn kinematics(&self, state: &SystemState) -> (Vec<f64>, Vec<f64>) {
        let x = &state.values;
        match self.spec.layout {
            StateLayout::PointMass { dim } => (x[..dim].to_vec(), x[dim..2 * dim].to_vec()),
            StateLayout::Vessel => {
                let (s, c) = x[2].sin_cos();
                (vec![x[0], x[1]], vec![x[3] * c - x[4] * s, x[3] * s + x[4] * c])
            }
        }
    }

    /// `base` moved to position `pos` with world velocity `vel`, same time.
    ///
    /// Vessel heading and yaw rate are kept; the velocity is rotated into the body frame.
    pub fn with_kinematics(&self, base: &SystemState, pos: &[f64], vel: &[f64]) -> SystemState {
        let mut values = base.values.clone();
        match self.spec.layout {
            StateLayout::PointMass { dim } => {
                values[..dim].copy_from_slice(pos);
                values[dim..2 * dim].copy_from_slice(vel);
            }
            StateLayout::Vessel => {
                let (s, c) = values[2].sin_cos();
                values[0] = pos[0];
                values[1] = pos[1];
                values[3] = c * vel[0] + s * vel[1];
                values[4] = -s * vel[0] + c * vel[1];
            }
        }
        SystemState::new(values, base.timestamp)
    }

    /// Observation: own state, the `k` nearest obstacles (relative position and
    /// velocity, nearest first, ties by index), then the relative goal position.
    pub fn observe(&self, state: &SystemState) -> Vec<f64> {
        self.counters.observes.fetch_add(1, Ordering::Relaxed);
        assert_eq!(state.values.len(), self.spec.state_dim(), "state dimension mismatch");
        let p = self.spec.position_dim();
        let (pos, vel) = self.kinematics(state);
        let mut obs = Vec::with_capacity(self.spec.observation_dim());
        obs.extend_from_slice(&state.values);

        let mut others: Vec<(f64, usize, Vec<f64>, Vec<f64>)> = self
            .spec
            .obstacles
            .iter()
            .enumerate()
            .map(|(i, track)| {
                let (op, ov) = track.state_at(state.timestamp);
                (dist(&op, &pos), i, op, ov)
            })
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for slot in 0..self.spec.neighbors {
            match others.get(slot) {
                Some((_, _, op, ov)) => {
                    obs.extend(op.iter().zip(&pos).map(|(o, q)| o - q));
                    obs.extend(ov.iter().zip(&vel).map(|(o, v)| o - v));
                }
                None => {
                    obs.push(SENTINEL_DISTANCE);
                    obs.extend(std::iter::repeat_n(0.0, 2 * p - 1));
                }
            }
        }
        obs.extend(self.spec.goal_center.iter().zip(&pos).map(|(g, q)| g - q));
        obs
    }

    /// Signed clearance: negative exactly on the unsafe set.
    ///
    /// Minimum over the obstacles and the arena walls of the gap between the
    /// agent's body and the surface.
    pub fn clearance(&self, state: &SystemState) -> f64 {
        let (pos, _) = self.kinematics(state);
        let arena = pos
            .iter()
            .zip(&self.spec.arena)
            .map(|(q, (lo, hi))| (q - lo).min(hi - q) - self.spec.agent_radius)
            .fold(f64::INFINITY, f64::min);
        self.spec
            .obstacles
            .iter()
            .map(|track| dist(&track.position_at(state.timestamp), &pos) - (track.radius + self.spec.agent_radius))
            .fold(arena, f64::min)
    }

    pub fn in_unsafe(&self, state: &SystemState) -> bool {
        self.counters.predicates.fetch_add(1, Ordering::Relaxed);
        self.clearance(state) < 0.0
    }

    pub fn in_goal(&self, state: &SystemState) -> bool {
        self.counters.predicates.fetch_add(1, Ordering::Relaxed);
        let (pos, _) = self.kinematics(state);
        dist(&pos, &self.spec.goal_center) <= self.spec.goal_radius
    }

    pub fn in_initial(&self, state: &SystemState) -> bool {
        self.counters.predicates.fetch_add(1, Ordering::Relaxed);
        self.in_initial_inner(state)
    }

    fn in_initial_inner(&self, state: &SystemState) -> bool {
        state
            .values
            .iter()
            .zip(&self.spec.initial_box)
            .all(|(v, (lo, hi))| lo <= v && v <= hi)
            && self.clearance(state) >= 0.0
    }

    /// `count` i.i.d. uniform samples from `X_0` at time 0 (rejection sampling).
    pub fn sample_initial_states<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<SystemState>> {
        const MAX_ATTEMPTS: usize = 10_000;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let mut accepted = None;
            for _ in 0..MAX_ATTEMPTS {
                let candidate = SystemState::new(sample_box(&self.spec.initial_box, rng), 0.0);
                if self.in_initial_inner(&candidate) {
                    accepted = Some(candidate);
                    break;
                }
            }
            out.push(
                accepted.ok_or_else(|| {
                    Error::Precondition(format!("{}: initial set appears to be empty", self.spec.name))
                })?,
            );
        }
        Ok(out)
    }

    /// Uniform samples over the sample box with timestamps uniform in `[0, horizon]`.
    pub fn sample_states<R: Rng + ?Sized>(&self, count: usize, horizon: f64, rng: &mut R) -> Vec<SystemState> {
        (0..count)
            .map(|_| {
                let values = sample_box(&self.spec.sample_box, rng);
                let t = if horizon > 0.0 {
                    rng.gen_range(0.0..horizon)
                } else {
                    0.0
                };
                SystemState::new(values, t)
            })
            .collect()
    }

    /// Goal-seeking reference controller that ignores obstacles.
    pub fn reference_action(&self, state: &SystemState) -> ControlAction {
        let x = &state.values;
        let bounds = &self.spec.action_bounds;
        let clip = |v: f64, i: usize| v.clamp(bounds[i].0, bounds[i].1);
        match self.spec.layout {
            StateLayout::PointMass { dim } => {
                let (pos, vel) = (&x[..dim], &x[dim..2 * dim]);
                let to_goal: Vec<f64> = self.spec.goal_center.iter().zip(pos).map(|(g, q)| g - q).collect();
                let d = to_goal.iter().map(|v| v * v).sum::<f64>().sqrt();
                let speed = (0.8 * d).min(1.5);
                let values = (0..dim)
                    .map(|i| {
                        let v_des = if d > 0.0 { speed * to_goal[i] / d } else { 0.0 };
                        clip(2.0 * (v_des - vel[i]), i)
                    })
                    .collect();
                ControlAction::new(values)
            }
            StateLayout::Vessel => {
                let (dx, dy) = (self.spec.goal_center[0] - x[0], self.spec.goal_center[1] - x[1]);
                let d = (dx * dx + dy * dy).sqrt();
                let heading_err = wrap_angle(dy.atan2(dx) - x[2]);
                let u_des = (0.6 * d).min(1.2) * heading_err.cos().max(0.0);
                let surge = 0.5 * u_des + 1.5 * (u_des - x[3]);
                let yaw = 2.0 * heading_err - 1.0 * x[5];
                ControlAction::new(vec![clip(surge, 0), clip(yaw, 1)])
            }
        }
    }
}

fn sample_box<R: Rng + ?Sized>(b: &[(f64, f64)], rng: &mut R) -> Vec<f64> {
    b.iter()
        .map(|&(lo, hi)| if hi > lo { rng.gen_range(lo..=hi) } else { lo })
        .collect()
}

pub(crate) fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

/// Environment selection plus optional overrides of the preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub kind: EnvKind,
    #[serde(default)]
    pub obstacles: Option<Vec<ObstacleTrack>>,
    #[serde(default)]
    pub goal_center: Option<Vec<f64>>,
    #[serde(default)]
    pub goal_radius: Option<f64>,
    #[serde(default)]
    pub neighbors: Option<usize>,
    #[serde(default)]
    pub h_int: Option<f64>,
    #[serde(default)]
    pub agent_radius: Option<f64>,
}

impl EnvConfig {
    pub fn preset(kind: EnvKind) -> Self {
        Self {
            kind,
            obstacles: None,
            goal_center: None,
            goal_radius: None,
            neighbors: None,
            h_int: None,
            agent_radius: None,
        }
    }

    pub fn build(&self) -> Result<BlackBoxEnv> {
        let mut spec = EnvSpec::preset(self.kind);
        if let Some(o) = &self.obstacles {
            spec.obstacles = o.clone();
        }
        if let Some(g) = &self.goal_center {
            spec.goal_center = g.clone();
        }
        if let Some(r) = self.goal_radius {
            spec.goal_radius = r;
        }
        if let Some(k) = self.neighbors {
            spec.neighbors = k;
        }
        if let Some(h) = self.h_int {
            spec.h_int = h;
        }
        if let Some(r) = self.agent_radius {
            spec.agent_radius = r;
        }
        BlackBoxEnv::new(spec)
    }
}
