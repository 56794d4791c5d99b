//! Train a policy and barrier on the 2-D drone, then run one CertPM repair
//! round and compare SR/BR/NDR before and after.
//!
//! Usage: cargo run --release --example repair_drone [seed]

use std::path::PathBuf;
use std::time::Instant;

use certrepair::harness::RunConfig;
use certrepair::metrics::{evaluate, EvalReport};
use certrepair::repair::repair_loop;
use certrepair::training::train_joint;

fn show(label: &str, r: &EvalReport) {
    println!(
        "{label}: SR {:.4}  BR {:.4}  NDR {:.4}  certificate violations {}",
        r.sr,
        r.br.unwrap_or(f64::NAN),
        r.ndr.unwrap_or(f64::NAN),
        r.certificate_violations()
    );
}

fn main() -> certrepair::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg =
        RunConfig::load(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/drone_desk.json"))?.with_seed(seed);
    let mut env = cfg.build_env()?;

    let clock = Instant::now();
    let trained = train_joint(&mut env, &cfg.train)?.networks;
    println!("trained in {:.1}s", clock.elapsed().as_secs_f64());
    show("before", &evaluate(&env, &trained, &cfg.eval, cfg.eval_seed())?);

    let clock = Instant::now();
    let repaired = repair_loop(&mut env, &trained, &cfg.repair)?;
    println!("repaired in {:.1}s", clock.elapsed().as_secs_f64());
    for r in &repaired.rounds {
        println!("round {}: {} flags ({})", r.round, r.flags_total, r.flags_by_cause);
    }
    show(
        "after ",
        &evaluate(&env, &repaired.networks, &cfg.eval, cfg.eval_seed())?,
    );
    Ok(())
}
