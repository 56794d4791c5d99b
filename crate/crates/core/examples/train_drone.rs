//! Train a policy and barrier on the 2-D drone with the desk profile and
//! store them as JSON model files.
//!
//! Usage: cargo run --release --example train_drone [out_dir] [seed]

use std::path::PathBuf;

use certrepair::harness::{save_networks, RunConfig};
use certrepair::metrics::evaluate;
use certrepair::training::train_joint;

fn main() -> certrepair::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/drone".into()));
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);

    let cfg =
        RunConfig::load(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/drone_desk.json"))?.with_seed(seed);
    let mut env = cfg.build_env()?;
    let trained = train_joint(&mut env, &cfg.train)?;
    for row in trained.curve.iter().step_by(5) {
        println!(
            "epoch {:3}  loss {:.4}  (init {:.4}, safe {:.4}, nondec {:.4})",
            row.epoch, row.total, row.init, row.safe, row.nondec
        );
    }

    let report = evaluate(&env, &trained.networks, &cfg.eval, cfg.eval_seed())?;
    println!(
        "SR {:.4}  BR {:.4}  NDR {:.4}",
        report.sr,
        report.br.unwrap(),
        report.ndr.unwrap()
    );
    for f in save_networks(&trained.networks, &out)? {
        println!("wrote {}", f.display());
    }
    Ok(())
}
