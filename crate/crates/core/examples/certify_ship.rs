//! Certificate-only repair on the ship: the policy is frozen and only the
//! barrier is retrained on CertPM counterexamples.
//!
//! Usage: cargo run --release --example certify_ship [seed]

use std::path::PathBuf;

use certrepair::certificates::CertKind;
use certrepair::harness::RunConfig;
use certrepair::metrics::evaluate;
use certrepair::repair::repair_loop;
use certrepair::training::train_joint;

fn main() -> certrepair::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg =
        RunConfig::load(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/ship_desk.json"))?.with_seed(seed);
    let mut env = cfg.build_env()?;

    let trained = train_joint(&mut env, &cfg.train)?.networks;
    let repaired = repair_loop(&mut env, &trained, &cfg.repair)?;

    let show = |label: &str, r: &certrepair::metrics::EvalReport| {
        println!(
            "{label}: SR {:.4}  BR {:.4}  NDR {:.4}  SafetyCond {}  NonDecCond {}",
            r.sr,
            r.br.unwrap(),
            r.ndr.unwrap(),
            r.violation_count(CertKind::SafetyCond),
            r.violation_count(CertKind::NonDecCond)
        )
    };
    show("before", &evaluate(&env, &trained, &cfg.eval, cfg.eval_seed())?);
    show(
        "after ",
        &evaluate(&env, &repaired.networks, &cfg.eval, cfg.eval_seed())?,
    );
    println!("policy unchanged: {}", repaired.networks.policy == trained.policy);
    Ok(())
}
