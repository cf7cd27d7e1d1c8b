//! Command-line harness. Each stage reads the artifacts of the earlier stages
//! from the output directory, so stages can be run one at a time.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bnmf::{FitOptions, OrderSelection};
use crate::error::{Error, Result};
use crate::io::{matrix_csv, read_json, write_json, write_text};
use crate::partition::{BasisPartition, PartitionFit, TransformedBases};
use crate::pipeline::{
    fit_stage, partition_stage, recover_stage, simulate, verify_stage, PipelineConfig, RecoverOutput, WindowConfig,
};
use crate::register::{GroundTruth, ObservationMatrix, RegisterConfig};
use crate::snr::{sweep_curve, EnergySpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Simulate,
    Fit,
    Partition,
    Recover,
    Verify,
    Sweep,
    Pipeline,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Fit => "fit",
            Stage::Partition => "partition",
            Stage::Recover => "recover",
            Stage::Verify => "verify",
            Stage::Sweep => "sweep",
            Stage::Pipeline => "pipeline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub r_sx: f64,
    pub deltas: Vec<f64>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// The JSON config document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub stage: Option<Stage>,
    #[serde(default)]
    pub register: Option<RegisterConfig>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub k_range: Option<[usize; 2]>,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub window: WindowConfig,
    #[serde(default)]
    pub k1: Option<usize>,
    #[serde(default)]
    pub energy: EnergySpec,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            stage: None,
            register: None,
            k: None,
            k_range: None,
            fit: FitOptions::default(),
            window: WindowConfig::default(),
            k1: None,
            energy: EnergySpec::default(),
            sweep: None,
            output_dir: default_out(),
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Pipeline view; a missing register section becomes the default.
    pub fn pipeline(&self) -> PipelineConfig {
        let base = PipelineConfig::default();
        PipelineConfig {
            register: self.register.clone().unwrap_or(base.register),
            k: self.k,
            k_range: self.k_range.unwrap_or(base.k_range),
            fit: self.fit.clone(),
            window: self.window.clone(),
            k1: self.k1.unwrap_or(base.k1),
            energy: self.energy.clone(),
            seed: self.seed,
        }
    }

    /// All violations for `stage`.
    pub fn diagnostics(&self, stage: Stage) -> Vec<String> {
        let mut out = Vec::new();
        if matches!(stage, Stage::Simulate | Stage::Pipeline) && self.register.is_none() {
            out.push(format!("stage {} requires the `register` section", stage.name()));
        }
        if stage == Stage::Sweep {
            match &self.sweep {
                None => out.push("stage sweep requires the `sweep` section (r_sx, deltas)".into()),
                Some(s) => {
                    if !s.r_sx.is_finite() {
                        out.push("sweep.r_sx must be finite".into());
                    }
                    if s.deltas.is_empty() {
                        out.push("sweep.deltas must not be empty".into());
                    }
                }
            }
        } else {
            out.extend(self.pipeline().diagnostics());
        }
        if let EnergySpec::Hermitian(h) = &self.energy {
            if let Err(e) = EnergySpec::hermitian(h.clone()) {
                out.push(format!("energy: {e}"));
            }
            if let Some(r) = &self.register {
                if h.nrows() != r.horizon {
                    out.push(format!("energy: hamiltonian is {0}x{0}, horizon is {1}", h.nrows(), r.horizon));
                }
            }
        }
        out
    }
}

/// Schema and bound check of a config document; nothing is run.
pub fn validate_file(path: &Path, stage_override: Option<Stage>) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = match serde_json::from_str(&text) {
        Ok(v) => v,
        Err(e) => return Ok(vec![format!("not valid JSON: {e}")]),
    };
    let mut diags = Vec::new();
    let Some(obj) = value.as_object() else {
        return Ok(vec!["config must be a JSON object".into()]);
    };
    // negative orders fail deserialization with a less helpful message
    if let Some(k) = obj.get("k").and_then(|v| v.as_i64()) {
        if k < 0 {
            diags.push(format!("k must be >= 1, got {k}"));
        }
    }
    let cfg: RunConfig = match serde_json::from_value(value.clone()) {
        Ok(c) => c,
        Err(e) => {
            if diags.is_empty() {
                diags.push(format!("schema: {e}"));
            }
            return Ok(diags);
        }
    };
    let Some(stage) = stage_override.or(cfg.stage) else {
        diags.push("no stage given (set `stage` or pass --stage)".into());
        return Ok(diags);
    };
    Ok(cfg.diagnostics(stage))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub elapsed_ms: f64,
}

/// Written to `run.json`; the only artifact with wall-clock content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub stage: Stage,
    pub config: RunConfig,
    pub artifacts: Vec<PathBuf>,
    pub timings: Vec<StageTiming>,
    pub version: String,
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    dir: &'a Path,
    artifacts: Vec<PathBuf>,
}

impl Ctx<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<()> {
        let p = self.path(name);
        write_json(&p, v)?;
        self.artifacts.push(p);
        Ok(())
    }

    fn text(&mut self, name: &str, v: &str) -> Result<()> {
        let p = self.path(name);
        write_text(&p, v)?;
        self.artifacts.push(p);
        Ok(())
    }

    fn load<T: serde::de::DeserializeOwned>(&self, name: &str, producer: Stage) -> Result<T> {
        let p = self.path(name);
        if !p.exists() {
            return Err(Error::State(format!(
                "{} is missing; run the {} stage first",
                p.display(),
                producer.name()
            )));
        }
        read_json(&p)
    }
}

fn run_simulate(ctx: &mut Ctx) -> Result<()> {
    let pc = ctx.cfg.pipeline();
    let (gt, obs) = simulate(&pc.register_config())?;
    ctx.json("ground_truth.json", &gt)?;
    ctx.text("ground_truth.csv", &matrix_csv(&gt.source_rows))?;
    ctx.json("observation.json", &obs)?;
    ctx.text("observation.csv", &matrix_csv(&obs.values))
}

fn run_fit(ctx: &mut Ctx) -> Result<()> {
    let pc = ctx.cfg.pipeline();
    let obs: ObservationMatrix = ctx.load("observation.json", Stage::Simulate)?;
    let sel = fit_stage(&obs, pc.order_range(), &pc.fit_options())?;
    let mut table = String::from("k,bound\n");
    for (k, b) in &sel.table {
        let _ = writeln!(table, "{k},{b}");
    }
    let mut trace = String::from("iteration,bound\n");
    for (i, b) in sel.model.elbo_trace.iter().enumerate() {
        let _ = writeln!(trace, "{},{b}", i + 1);
    }
    ctx.json("model.json", &sel)?;
    ctx.text("order_table.csv", &table)?;
    ctx.text("elbo_trace.csv", &trace)?;
    ctx.text("bases.csv", &matrix_csv(&sel.model.bases))?;
    ctx.text("activations.csv", &matrix_csv(&sel.model.activations))
}

fn run_partition(ctx: &mut Ctx) -> Result<()> {
    let pc = ctx.cfg.pipeline();
    let sel: OrderSelection = ctx.load("model.json", Stage::Fit)?;
    let out = partition_stage(&sel.model, &pc.window, &pc.fit_options())?;
    let mut cost = String::from("iteration,cost\n");
    for (i, c) in out.fit.cost_trace.iter().enumerate() {
        let _ = writeln!(cost, "{},{c}", i + 1);
    }
    ctx.json("transformed.json", &out.transformed)?;
    ctx.json("partition_fit.json", &out.fit)?;
    ctx.json("partition.json", &out.partition)?;
    ctx.text("scores.csv", &out.scores.to_csv())?;
    ctx.text("partition_cost.csv", &cost)
}

fn run_recover(ctx: &mut Ctx) -> Result<()> {
    let pc = ctx.cfg.pipeline();
    let gt: GroundTruth = ctx.load("ground_truth.json", Stage::Simulate)?;
    let sel: OrderSelection = ctx.load("model.json", Stage::Fit)?;
    let tb: TransformedBases = ctx.load("transformed.json", Stage::Partition)?;
    let part: BasisPartition = ctx.load("partition.json", Stage::Partition)?;
    let _: PartitionFit = ctx.load("partition_fit.json", Stage::Partition)?;
    if !sel.model.k.is_multiple_of(pc.k1) {
        return Err(Error::Validation(format!(
            "k1 = {} does not divide the selected order {}",
            pc.k1, sel.model.k
        )));
    }
    let rec = recover_stage(&gt, &sel.model, &tb, &part, pc.k1)?;
    let mut phi = String::from("i,basis,re,im\n");
    for (i, (a, k)) in rec
        .recovery
        .phi_star
        .amplitudes
        .iter()
        .zip(&rec.recovery.recovered_labels)
        .enumerate()
    {
        let _ = writeln!(phi, "{i},{k},{},{}", a.re, a.im);
    }
    ctx.json("recovery.json", &rec)?;
    ctx.text("prob_table.csv", &rec.recovery.prob_table.to_csv())?;
    ctx.text("phi_star.csv", &phi)
}

fn run_verify(ctx: &mut Ctx) -> Result<()> {
    let gt: GroundTruth = ctx.load("ground_truth.json", Stage::Simulate)?;
    let obs: ObservationMatrix = ctx.load("observation.json", Stage::Simulate)?;
    let sel: OrderSelection = ctx.load("model.json", Stage::Fit)?;
    let rec: RecoverOutput = ctx.load("recovery.json", Stage::Recover)?;
    let out = verify_stage(&gt, &obs, &sel.model, &rec, &ctx.cfg.energy)?;
    let mut readout = String::from("t,value\n");
    for (t, v) in out.readout.iter().enumerate() {
        let _ = writeln!(readout, "{t},{v}");
    }
    ctx.json("snr_report.json", &out.report)?;
    ctx.text("readout.csv", &readout)
}

fn run_sweep(ctx: &mut Ctx) -> Result<()> {
    let sc = ctx
        .cfg
        .sweep
        .clone()
        .ok_or_else(|| Error::Validation("stage sweep requires the `sweep` section".into()))?;
    let sweep = sweep_curve(sc.r_sx, &sc.deltas)?;
    ctx.text("sweep.csv", &sweep.to_csv())?;
    ctx.json("sweep.json", &sweep)
}

/// Runs `stage` and writes its artifacts plus `run.json` under the output dir.
pub fn run(cfg: &RunConfig, stage: Stage) -> Result<RunRecord> {
    let diags = cfg.diagnostics(stage);
    if !diags.is_empty() {
        return Err(Error::Validation(diags.join("; ")));
    }
    fs::create_dir_all(&cfg.output_dir)?;
    let mut ctx = Ctx {
        cfg,
        dir: &cfg.output_dir,
        artifacts: Vec::new(),
    };
    let order: &[Stage] = match stage {
        Stage::Pipeline => &[Stage::Simulate, Stage::Fit, Stage::Partition, Stage::Recover, Stage::Verify],
        _ => std::slice::from_ref(&stage),
    };
    let mut timings = Vec::new();
    for &s in order {
        let start = Instant::now();
        log::info!("running stage {}", s.name());
        match s {
            Stage::Simulate => run_simulate(&mut ctx)?,
            Stage::Fit => run_fit(&mut ctx)?,
            Stage::Partition => run_partition(&mut ctx)?,
            Stage::Recover => run_recover(&mut ctx)?,
            Stage::Verify => run_verify(&mut ctx)?,
            Stage::Sweep => run_sweep(&mut ctx)?,
            Stage::Pipeline => unreachable!("expanded above"),
        }
        timings.push(StageTiming {
            stage: s,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    let record = RunRecord {
        stage,
        config: RunConfig {
            stage: Some(stage),
            ..cfg.clone()
        },
        artifacts: ctx.artifacts,
        timings,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    write_json(&cfg.output_dir.join("run.json"), &record)?;
    Ok(record)
}

#[derive(Debug, Parser)]
#[command(name = "hre", version, about = "Register readout simulator: factorize, partition, recover, verify")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct StageArgs {
    /// JSON config document.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    Simulate(StageArgs),
    Fit(StageArgs),
    Partition(StageArgs),
    Recover(StageArgs),
    Verify(StageArgs),
    Sweep(StageArgs),
    Pipeline(StageArgs),
    /// Run the stage named by `--stage` or by the config's `stage` field.
    Run {
        #[command(flatten)]
        args: StageArgs,
        #[arg(long, value_enum)]
        stage: Option<Stage>,
    },
    /// Check a config without running anything.
    Validate {
        config: PathBuf,
        #[arg(long, value_enum)]
        stage: Option<Stage>,
    },
}

fn load_config(args: &StageArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => read_json::<RunConfig>(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_VALIDATION,
    }
}

fn fail(e: &Error, stage: Option<Stage>) -> i32 {
    let body = json!({
        "error": e.kind(),
        "message": e.to_string(),
        "stage": stage.map(Stage::name),
    });
    eprintln!("{body}");
    exit_code(e)
}

pub fn execute(cli: Cli) -> i32 {
    let (args, stage) = match cli.command {
        Command::Validate { config, stage } => {
            return match validate_file(&config, stage) {
                Ok(d) => {
                    println!("{}", json!({ "diagnostics": d }));
                    if d.is_empty() {
                        EXIT_OK
                    } else {
                        EXIT_VALIDATION
                    }
                }
                Err(e) => fail(&e, None),
            };
        }
        Command::Simulate(a) => (a, Some(Stage::Simulate)),
        Command::Fit(a) => (a, Some(Stage::Fit)),
        Command::Partition(a) => (a, Some(Stage::Partition)),
        Command::Recover(a) => (a, Some(Stage::Recover)),
        Command::Verify(a) => (a, Some(Stage::Verify)),
        Command::Sweep(a) => (a, Some(Stage::Sweep)),
        Command::Pipeline(a) => (a, Some(Stage::Pipeline)),
        Command::Run { args, stage } => (args, stage),
    };
    let cfg = match load_config(&args) {
        Ok(c) => c,
        Err(e) => return fail(&e, stage),
    };
    let Some(stage) = stage.or(cfg.stage) else {
        return fail(&Error::Validation("no stage given (set `stage` or pass --stage)".into()), None);
    };
    match run(&cfg, stage) {
        Ok(rec) => {
            println!("{}", cfg.output_dir.join("run.json").display());
            log::info!("{} artifacts written", rec.artifacts.len());
            EXIT_OK
        }
        Err(e) => fail(&e, Some(stage)),
    }
}

/// Entry point for the binary; returns the process exit code.
pub fn main() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    execute(Cli::parse())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagnostics_cover_required_sections() {
        let cfg = RunConfig::default();
        assert!(cfg.diagnostics(Stage::Pipeline).iter().any(|d| d.contains("`register`")));
        assert!(cfg.diagnostics(Stage::Sweep).iter().any(|d| d.contains("`sweep`")));
        assert!(cfg.diagnostics(Stage::Fit).is_empty());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Validation("x".into())), EXIT_VALIDATION);
        assert_eq!(exit_code(&Error::Numerical("x".into())), EXIT_NUMERICAL);
    }

    #[test]
    fn config_round_trips() {
        let cfg = RunConfig {
            register: Some(RegisterConfig::default()),
            k: Some(2),
            ..Default::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
    }
}
