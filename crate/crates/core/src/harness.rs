//! Run configuration, output manifests and the experiment steps behind the
//! command-line tool. Every step writes its outputs plus a manifest into one
//! directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::certificates::{BarrierFn, LyapunovFn, PolicyFn};
use crate::dynamics::{parallel_rollouts, BlackBoxEnv, EnvConfig, EnvKind, Rollout};
use crate::metrics::{evaluate, EvalConfig, EvalReport};
use crate::monitors::{
    predpm_trace, sweep_thresholds, write_sweep_csv, write_trace_csv, PredThresholds, SurrogateCfg, SweepRow, TraceRow,
};
use crate::nn::ModelFile;
use crate::repair::{repair_loop, write_report_csv, RepairConfig, RoundReport};
use crate::training::{train_joint, write_curve_csv, Networks, TrainConfig};
use crate::{seeds, Error, Result};

/// Version of the CSV layouts written by the steps below.
pub const CSV_SCHEMA_VERSION: u32 = 1;

pub const POLICY_FILE: &str = "policy.json";
pub const BARRIER_FILE: &str = "barrier.json";
pub const LYAPUNOV_FILE: &str = "lyapunov.json";

/// Predictive monitor settings used by the trace and sweep steps and by
/// `--monitor predpm`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct PredpmSettings {
    pub thresholds: PredThresholds,
    pub surrogate: SurrogateCfg,
}

impl Default for PredpmSettings {
    fn default() -> Self {
        Self {
            thresholds: PredThresholds::new(0.0, 0.0, -1.0),
            surrogate: SurrogateCfg::default(),
        }
    }
}

/// Everything one experiment needs. Missing sections take their defaults.
///
/// The `seed` fields inside `train` and `repair` are replaced by the master
/// seed; every component derives its own streams from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub repair: RepairConfig,
    pub eval: EvalConfig,
    pub predpm: PredpmSettings,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::preset(EnvKind::Drone2d),
            train: TrainConfig::default(),
            repair: RepairConfig::default(),
            eval: EvalConfig::default(),
            predpm: PredpmSettings::default(),
            output_dir: PathBuf::from("runs"),
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Parses, applies the master seed and validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let seed = cfg.seed;
        let cfg = cfg.with_seed(seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.repair.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.env.build()?;
        self.train.validate()?;
        self.repair.validate()?;
        self.predpm.surrogate.validate()?;
        if self.eval.rollouts == 0 || self.eval.steps == 0 || !(self.eval.dt > 0.0) {
            return Err(Error::Config(format!("invalid evaluation settings {:?}", self.eval)));
        }
        Ok(())
    }

    pub fn build_env(&self) -> Result<BlackBoxEnv> {
        self.env.build()
    }

    /// Seed of the evaluation rollouts when none is given.
    pub fn eval_seed(&self) -> u64 {
        seeds::derive_seed(self.seed, "eval", 0)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("configuration serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// JSON Schema of [`RunConfig`].
pub fn config_schema() -> String {
    let schema = schemars::schema_for!(RunConfig);
    serde_json::to_string_pretty(&schema).expect("schema serializes")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

/// Written next to the outputs of every step as `manifest_<command>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub csv_schema_version: u32,
    pub config_sha256: String,
    pub seed: u64,
    pub wall_time_s: f64,
    pub stages: Vec<StageTime>,
    pub outputs: Vec<String>,
    pub config: RunConfig,
}

impl Manifest {
    pub fn file_name(command: &str) -> String {
        format!("manifest_{command}.json")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Files written by a step.
#[derive(Debug, Clone, Default)]
pub struct StepOutput {
    pub files: Vec<PathBuf>,
    pub stages: Vec<StageTime>,
}

impl StepOutput {
    fn finish(mut self, command: &str, cfg: &RunConfig, seed: u64, out: &Path, started: Instant) -> Result<Self> {
        let manifest = Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            csv_schema_version: CSV_SCHEMA_VERSION,
            config_sha256: cfg.hash(),
            seed,
            wall_time_s: started.elapsed().as_secs_f64(),
            stages: self.stages.clone(),
            outputs: self
                .files
                .iter()
                .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
                .collect(),
            config: cfg.clone(),
        };
        let path = out.join(Manifest::file_name(command));
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
        self.files.push(path);
        Ok(self)
    }
}

/// Writes the networks as `policy.json`, `barrier.json` and `lyapunov.json`.
pub fn save_networks(nets: &Networks, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut files = vec![dir.join(POLICY_FILE)];
    nets.policy.to_model_file().save(&files[0])?;
    if let Some(b) = &nets.barrier {
        let path = dir.join(BARRIER_FILE);
        b.to_model_file().save(&path)?;
        files.push(path);
    }
    if let Some(v) = &nets.lyapunov {
        let path = dir.join(LYAPUNOV_FILE);
        v.to_model_file().save(&path)?;
        files.push(path);
    }
    Ok(files)
}

/// Reads a directory written by [`save_networks`]; the certificates are optional.
pub fn load_networks(dir: &Path) -> Result<Networks> {
    let optional = |name: &str| -> Result<Option<ModelFile>> {
        let path = dir.join(name);
        if path.exists() {
            ModelFile::load(&path).map(Some)
        } else {
            Ok(None)
        }
    };
    Ok(Networks {
        policy: PolicyFn::from_model_file(ModelFile::load(&dir.join(POLICY_FILE))?)?,
        barrier: optional(BARRIER_FILE)?.map(BarrierFn::from_model_file).transpose()?,
        lyapunov: optional(LYAPUNOV_FILE)?.map(LyapunovFn::from_model_file).transpose()?,
    })
}

fn check_dims(nets: &Networks, env: &BlackBoxEnv) -> Result<()> {
    let obs = env.spec().observation_dim();
    let dims = [
        Some(nets.policy.net().input_dim()),
        nets.barrier.as_ref().map(|b| b.net().input_dim()),
        nets.lyapunov.as_ref().map(|v| v.net().input_dim()),
    ];
    if dims.into_iter().flatten().any(|d| d != obs) {
        return Err(Error::Config(format!(
            "model input dimensions do not match the {} observation size {obs}",
            env.spec().name
        )));
    }
    Ok(())
}

/// Trains policy and certificates; writes the networks and `training_curve.csv`.
pub fn run_train(cfg: &RunConfig, out: &Path) -> Result<StepOutput> {
    let started = Instant::now();
    std::fs::create_dir_all(out)?;
    let mut env = cfg.build_env()?;
    let outcome = train_joint(&mut env, &cfg.train)?;
    let mut step = StepOutput {
        files: save_networks(&outcome.networks, out)?,
        stages: vec![StageTime {
            stage: "train".into(),
            seconds: started.elapsed().as_secs_f64(),
        }],
    };
    let curve = out.join("training_curve.csv");
    write_curve_csv(&curve, &outcome.curve)?;
    step.files.push(curve);
    step.finish("train", cfg, cfg.seed, out, started)
}

/// Repairs the networks in `models`; writes the repaired networks and
/// `repair_report.csv` with one row per executed round.
pub fn run_repair(cfg: &RunConfig, models: &Path, out: &Path) -> Result<(StepOutput, Vec<RoundReport>)> {
    let started = Instant::now();
    let mut env = cfg.build_env()?;
    let nets = load_networks(models)?;
    check_dims(&nets, &env)?;
    let outcome = repair_loop(&mut env, &nets, &cfg.repair)?;
    std::fs::create_dir_all(out)?;
    let mut step = StepOutput {
        files: save_networks(&outcome.networks, out)?,
        stages: outcome
            .rounds
            .iter()
            .map(|r| StageTime {
                stage: format!("round {}", r.round),
                seconds: r.wall_time,
            })
            .collect(),
    };
    let report = out.join("repair_report.csv");
    write_report_csv(&report, &outcome.rounds)?;
    step.files.push(report);
    Ok((step.finish("repair", cfg, cfg.seed, out, started)?, outcome.rounds))
}

/// Evaluates the networks in `models` on fresh rollouts; writes `eval.csv`
/// (summary row) and `eval.json` (with per-trajectory metrics).
pub fn run_eval(cfg: &RunConfig, models: &Path, out: &Path, seed: u64) -> Result<(StepOutput, EvalReport)> {
    let started = Instant::now();
    let env = cfg.build_env()?;
    let nets = load_networks(models)?;
    check_dims(&nets, &env)?;
    let report = evaluate(&env, &nets, &cfg.eval, seed)?;
    std::fs::create_dir_all(out)?;
    let (csv_path, json_path) = (out.join("eval.csv"), out.join("eval.json"));
    report.write_csv(&csv_path)?;
    report.write_json(&json_path)?;
    let step = StepOutput {
        files: vec![csv_path, json_path],
        stages: Vec::new(),
    };
    Ok((step.finish("eval", cfg, seed, out, started)?, report))
}

/// One execution of the stored policy from the initial state drawn with `seed`.
pub fn recorded_rollout(cfg: &RunConfig, env: &BlackBoxEnv, nets: &Networks, seed: u64) -> Result<Rollout> {
    Ok(parallel_rollouts(env, &nets.policy, 1, cfg.eval.steps, cfg.eval.dt, seed)?.remove(0))
}

fn trace_of(
    cfg: &RunConfig,
    models: &Path,
    rollout_seed: u64,
) -> Result<Vec<(TraceRow, crate::monitors::PredAssessment)>> {
    let env = cfg.build_env()?;
    let nets = load_networks(models)?;
    check_dims(&nets, &env)?;
    let barrier = nets
        .barrier
        .as_ref()
        .ok_or_else(|| Error::Config(format!("the predictive monitor needs {}", BARRIER_FILE)))?;
    let run = recorded_rollout(cfg, &env, &nets, rollout_seed)?;
    predpm_trace(&run, barrier, &env, &cfg.predpm.surrogate, &cfg.predpm.thresholds)
}

/// Predictive estimates at every point of one execution; writes `predpm_trace.csv`.
pub fn run_predpm_trace(
    cfg: &RunConfig,
    models: &Path,
    out: &Path,
    rollout_seed: u64,
) -> Result<(StepOutput, Vec<TraceRow>)> {
    let started = Instant::now();
    let rows: Vec<TraceRow> = trace_of(cfg, models, rollout_seed)?
        .into_iter()
        .map(|(r, _)| r)
        .collect();
    std::fs::create_dir_all(out)?;
    let path = out.join("predpm_trace.csv");
    write_trace_csv(&path, &rows)?;
    let step = StepOutput {
        files: vec![path],
        stages: Vec::new(),
    };
    Ok((step.finish("predpm-trace", cfg, rollout_seed, out, started)?, rows))
}

/// Warning percentages over one recorded execution, each threshold swept over
/// `grid` with the other two at zero; writes `threshold_sweep.csv`.
pub fn run_threshold_sweep(
    cfg: &RunConfig,
    models: &Path,
    out: &Path,
    grid: &[f64],
    rollout_seed: u64,
) -> Result<(StepOutput, Vec<SweepRow>)> {
    let started = Instant::now();
    if grid.is_empty() {
        return Err(Error::Config("the threshold grid is empty".into()));
    }
    let assessments: Vec<_> = trace_of(cfg, models, rollout_seed)?
        .into_iter()
        .map(|(_, a)| a)
        .collect();
    let rows = sweep_thresholds(&assessments, grid);
    std::fs::create_dir_all(out)?;
    let path = out.join("threshold_sweep.csv");
    write_sweep_csv(&path, &rows)?;
    let step = StepOutput {
        files: vec![path],
        stages: Vec::new(),
    };
    Ok((step.finish("threshold-sweep", cfg, rollout_seed, out, started)?, rows))
}

/// Train, repair and evaluate into `out/train`, `out/repair` and `out/eval`.
/// Returns the CSV files written.
pub fn run_pipeline(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let (train_dir, repair_dir, eval_dir) = (out.join("train"), out.join("repair"), out.join("eval"));
    let mut files = run_train(cfg, &train_dir)?.files;
    files.extend(run_repair(cfg, &train_dir, &repair_dir)?.0.files);
    files.extend(run_eval(cfg, &repair_dir, &eval_dir, cfg.eval_seed())?.0.files);
    files.retain(|p| p.extension().is_some_and(|e| e == "csv"));
    Ok(files)
}

/// `"u,s,n"`.
pub fn parse_thresholds(text: &str) -> Result<PredThresholds> {
    let values = parse_list(text)?;
    match values[..] {
        [u, s, n] => Ok(PredThresholds::new(u, s, n)),
        _ => Err(Error::Config(format!("expected three thresholds u,s,n, got {text:?}"))),
    }
}

/// Either a comma-separated list or `start:stop:step` (stop included when hit).
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    if !text.contains(':') {
        return parse_list(text);
    }
    let parts = text.split(':').map(parse_number).collect::<Result<Vec<_>>>()?;
    let [start, stop, step] = parts[..] else {
        return Err(Error::Config(format!("expected start:stop:step, got {text:?}")));
    };
    if !(step > 0.0) || stop < start {
        return Err(Error::Config(format!("empty or unbounded grid {text:?}")));
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
    if count > 100_000 {
        return Err(Error::Config(format!("grid {text:?} has too many points")));
    }
    Ok((0..count).map(|i| start + i as f64 * step).collect())
}

fn parse_list(text: &str) -> Result<Vec<f64>> {
    text.split(',').map(parse_number).collect()
}

fn parse_number(s: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("not a number: {s:?}")))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Config(format!("not a finite number: {s:?}")))
    }
}
