//! CertPM and the baseline monitor side by side on a 1-D corridor run that
//! drives into a static obstacle. The certificate monitor fires before
//! the state becomes unsafe.
//!
//! Usage: cargo run --example monitor_corridor

use certrepair::certificates::BarrierFn;
use certrepair::dynamics::{rollout, BlackBoxEnv, ControlAction, EnvKind, ResetMode, SystemState, Trajectory};
use certrepair::monitors::{baseline_monitor, certpm_safety};
use certrepair::nn::{Activation, DenseArray, Mlp, OutputTransform};

fn main() -> certrepair::Result<()> {
    let mut env = BlackBoxEnv::preset(EnvKind::Corridor1d);
    // Observation [x, v, obstacle dx, obstacle dv, goal dx]; B = obstacle dx - 1.
    let net = Mlp::from_parts(
        &[5, 1],
        Activation::Tanh,
        OutputTransform::Identity,
        vec![DenseArray::from_vec(&[1, 5], vec![0.0, 0.0, 1.0, 0.0, 0.0])?],
        vec![DenseArray::vector(vec![-1.0])],
    )?;
    let barrier = BarrierFn::new(net)?;

    let push = |_: &[f64]| ControlAction::new(vec![0.4]);
    let run = rollout(
        &mut env,
        &push,
        &SystemState::new(vec![1.0, 0.2], 0.0),
        60,
        0.1,
        ResetMode::Initial,
    )?;

    println!("{:>5} {:>7} {:>8}  {:<16} baseline", "t", "x", "B", "certpm");
    let points = run.trajectory.points();
    for n in 0..points.len() {
        let prefix = Trajectory::from_states(points[..=n].to_vec())?;
        let cert = certpm_safety(&prefix, &barrier, &env)?;
        let base = baseline_monitor(&prefix, &env)?;
        let cause = match (&cert.deferred, cert.cause.is_violation()) {
            (Some(d), _) => format!("{} (prev)", d.kind.name()),
            (None, true) => cert.cause.kind.name().to_string(),
            (None, false) => "-".to_string(),
        };
        println!(
            "{:5.1} {:7.3} {:8.3}  {:<16} {}",
            points[n].timestamp,
            points[n].values[0],
            barrier.value(&run.observations[n])?,
            cause,
            if base.flagged { "PropertyUnsafe" } else { "-" }
        );
    }
    Ok(())
}
