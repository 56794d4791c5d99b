//! Train a policy with a Lyapunov function for reaching the drone's goal,
//! then repair it on CertPM stability counterexamples.
//!
//! Usage: cargo run --release --example lyapunov_repair [seed]

use std::path::PathBuf;

use certrepair::harness::RunConfig;
use certrepair::metrics::evaluate;
use certrepair::repair::repair_loop;
use certrepair::training::train_joint;

fn main() -> certrepair::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/drone_lyapunov_desk.json");
    let cfg = RunConfig::load(&path)?.with_seed(seed);
    let mut env = cfg.build_env()?;

    let trained = train_joint(&mut env, &cfg.train)?.networks;
    let before = evaluate(&env, &trained, &cfg.eval, cfg.eval_seed())?;
    let out = repair_loop(&mut env, &trained, &cfg.repair)?;
    for r in &out.rounds {
        println!("round {}: {} flags ({})", r.round, r.flags_total, r.flags_by_cause);
    }
    let after = evaluate(&env, &out.networks, &cfg.eval, cfg.eval_seed())?;
    println!(
        "DR {:.4} -> {:.4}   SR {:.4} -> {:.4}",
        before.dr.unwrap(),
        after.dr.unwrap(),
        before.sr,
        after.sr
    );
    Ok(())
}
