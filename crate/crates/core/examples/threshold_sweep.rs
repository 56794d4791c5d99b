//! Warning percentages of the predictive monitor as one threshold at a time
//! is swept, on a drone run through the default obstacle field with a simple
//! clearance-based barrier.
//!
//! Usage: cargo run --release --example threshold_sweep

use certrepair::certificates::BarrierFn;
use certrepair::dynamics::{rollout, BlackBoxEnv, EnvKind, ResetMode, SystemState};
use certrepair::monitors::{predpm_trace, sweep_thresholds, PredThresholds, SurrogateCfg};
use certrepair::nn::{Activation, DenseArray, Mlp, OutputTransform};

fn main() -> certrepair::Result<()> {
    let mut env = BlackBoxEnv::preset(EnvKind::Drone2d);
    let dim = env.spec().observation_dim();
    // B = x-offset of the nearest obstacle minus 1.
    let mut w = vec![0.0; dim];
    w[4] = 1.0;
    let barrier = BarrierFn::new(Mlp::from_parts(
        &[dim, 1],
        Activation::Tanh,
        OutputTransform::Identity,
        vec![DenseArray::from_vec(&[1, dim], w)?],
        vec![DenseArray::vector(vec![-1.0])],
    )?)?;

    let reference = {
        let probe = env.clone();
        move |obs: &[f64]| probe.reference_action(&SystemState::new(obs[..4].to_vec(), 0.0))
    };
    let run = rollout(
        &mut env,
        &reference,
        &SystemState::new(vec![1.0, 4.0, 0.0, 0.0], 0.0),
        120,
        0.1,
        ResetMode::Initial,
    )?;
    let assessments: Vec<_> = predpm_trace(
        &run,
        &barrier,
        &env,
        &SurrogateCfg::default(),
        &PredThresholds::new(0.0, 0.0, 0.0),
    )?
    .into_iter()
    .map(|(_, a)| a)
    .collect();

    let grid: Vec<f64> = (0..=8).map(|k| -1.0 + 0.5 * k as f64).collect();
    println!("{:<6} {:>9} {:>9}", "axis", "threshold", "percent");
    for row in sweep_thresholds(&assessments, &grid) {
        println!(
            "{:<6} {:>9.2} {:>8.1}%",
            format!("{:?}", row.axis),
            row.threshold,
            row.percent
        );
    }
    Ok(())
}
