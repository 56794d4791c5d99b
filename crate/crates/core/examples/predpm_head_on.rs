//! Predictive monitoring of a drone coasting into an oncoming obstacle.
//! Prints the (v_U, v_S, v_N) estimates along the run and when each first
//! reaches zero.
//!
//! Usage: cargo run --release --example predpm_head_on

use certrepair::certificates::BarrierFn;
use certrepair::dynamics::{rollout, ControlAction, EnvConfig, EnvKind, ObstacleTrack, ResetMode, SystemState};
use certrepair::monitors::{predpm_trace, PredThresholds, SurrogateCfg};
use certrepair::nn::{Activation, DenseArray, Mlp, OutputTransform};

fn main() -> certrepair::Result<()> {
    let mut cfg = EnvConfig::preset(EnvKind::Drone2d);
    cfg.obstacles = Some(vec![ObstacleTrack::new(
        vec![vec![7.5, 5.0], vec![1.0, 5.0]],
        26.0,
        0.7,
    )?]);
    let mut env = cfg.build()?;

    // B is the x-gap to the nearest obstacle minus contact distance minus 1 m.
    let dim = env.spec().observation_dim();
    let mut w = vec![0.0; dim];
    w[4] = 1.0;
    let reach = 0.7 + env.spec().agent_radius;
    let barrier = BarrierFn::new(Mlp::from_parts(
        &[dim, 1],
        Activation::Tanh,
        OutputTransform::Identity,
        vec![DenseArray::from_vec(&[1, dim], w)?],
        vec![DenseArray::vector(vec![-(reach + 1.0)])],
    )?)?;

    let coast = |_: &[f64]| ControlAction::new(vec![0.0, 0.0]);
    let run = rollout(
        &mut env,
        &coast,
        &SystemState::new(vec![2.0, 5.0, 0.5, 0.0], 0.0),
        60,
        0.1,
        ResetMode::Override,
    )?;
    let rows = predpm_trace(
        &run,
        &barrier,
        &env,
        &SurrogateCfg::default(),
        &PredThresholds::new(0.5, 0.5, 0.0),
    )?;

    println!("{:>5} {:>7} {:>7} {:>7} warn", "t", "v_U", "v_S", "v_N");
    for (r, _) in rows.iter().step_by(5) {
        println!("{:5.1} {:7.3} {:7.3} {:7.3} {}", r.t, r.v_u, r.v_s, r.v_n, r.flagged);
    }
    let first = |f: &dyn Fn(f64, f64) -> bool| rows.iter().find(|(r, _)| f(r.v_u, r.v_s)).map(|(r, _)| r.t);
    println!("v_S <= 0 first at {:?} s", first(&|_, s| s <= 0.0));
    println!("v_U <= 0 first at {:?} s", first(&|u, _| u <= 0.0));
    Ok(())
}
