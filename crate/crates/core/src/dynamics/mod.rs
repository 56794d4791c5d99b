//! Simulated continuous-time systems behind a black-box stepping interface.

mod env;
mod integrate;
mod obstacles;

use serde::{Deserialize, Serialize};

pub use env::{BlackBoxEnv, CallCounts, EnvConfig, EnvKind, EnvSpec, ResetMode, StateLayout, SENTINEL_DISTANCE};
pub use integrate::{rk4_integrate, rk4_step};
pub use obstacles::ObstacleTrack;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub values: Vec<f64>,
    /// Seconds since the start of the execution.
    pub timestamp: f64,
}

impl SystemState {
    pub fn new(values: Vec<f64>, timestamp: f64) -> Self {
        Self { values, timestamp }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlAction {
    pub values: Vec<f64>,
}

impl ControlAction {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }
}

/// Observed states `x_0 ... x_N` with strictly increasing times starting at 0.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    points: Vec<SystemState>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_states(states: Vec<SystemState>) -> Result<Self> {
        let mut traj = Self::new();
        for s in states {
            traj.push(s)?;
        }
        Ok(traj)
    }

    pub fn push(&mut self, state: SystemState) -> Result<()> {
        match self.points.last() {
            None if state.timestamp != 0.0 => {
                return Err(Error::InvalidInput(format!(
                    "trajectory must start at t = 0, got {}",
                    state.timestamp
                )))
            }
            Some(last) if state.timestamp <= last.timestamp => {
                return Err(Error::InvalidInput(format!(
                    "trajectory times must increase strictly ({} after {})",
                    state.timestamp, last.timestamp
                )))
            }
            _ => {}
        }
        self.points.push(state);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[SystemState] {
        &self.points
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(|s| s.timestamp)
    }

    /// Prefix `x_0 ... x_n` (inclusive).
    pub fn prefix(&self, n: usize) -> &[SystemState] {
        &self.points[..=n]
    }
}

/// Anything that maps an observation to an action.
pub trait Controller {
    fn act(&self, observation: &[f64]) -> Result<ControlAction>;
}

impl<F> Controller for F
where
    F: Fn(&[f64]) -> ControlAction,
{
    fn act(&self, observation: &[f64]) -> Result<ControlAction> {
        Ok(self(observation))
    }
}

/// A closed-loop execution with the observation seen at every point.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub trajectory: Trajectory,
    pub observations: Vec<Vec<f64>>,
}

/// Executes `steps` monitoring intervals of length `dt` from the initial state `x0`.
///
/// The result holds `steps + 1` points. `mode` is passed to [`BlackBoxEnv::reset`].
pub fn rollout<C: Controller + ?Sized>(
    env: &mut BlackBoxEnv,
    controller: &C,
    x0: &SystemState,
    steps: usize,
    dt: f64,
    mode: ResetMode,
) -> Result<Rollout> {
    if x0.timestamp != 0.0 {
        return Err(Error::InvalidInput("rollouts start at t = 0".into()));
    }
    env.reset(x0, mode)?;
    let mut state = x0.clone();
    let mut trajectory = Trajectory::new();
    let mut observations = Vec::with_capacity(steps + 1);
    for n in 0..=steps {
        let obs = env.observe(&state);
        if n < steps {
            let action = controller.act(&obs)?;
            let mut next = env.step(&action, dt)?;
            // Grid times are n * dt, not an accumulated sum.
            next.timestamp = (n + 1) as f64 * dt;
            trajectory.push(std::mem::replace(&mut state, next))?;
        } else {
            trajectory.push(state.clone())?;
        }
        observations.push(obs);
    }
    Ok(Rollout {
        trajectory,
        observations,
    })
}

/// `count` rollouts of `controller` from initial states drawn independently
/// per trajectory (stream `i` of `seed`), each on its own clone of `env`.
///
/// Results are in trajectory order regardless of scheduling.
pub fn parallel_rollouts<C: Controller + Sync + ?Sized>(
    env: &BlackBoxEnv,
    controller: &C,
    count: usize,
    steps: usize,
    dt: f64,
    seed: u64,
) -> Result<Vec<Rollout>> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = crate::seeds::stream(seed, "initial-state", i as u64);
            let x0 = env.sample_initial_states(1, &mut rng)?.remove(0);
            let mut local = env.clone();
            rollout(&mut local, controller, &x0, steps, dt, ResetMode::Initial)
        })
        .collect()
}
