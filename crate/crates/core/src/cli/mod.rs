//! Command-line front end: `simulate`, `fit` (`fit-loss` + `fit-es`),
//! `schedule`, `verify`, `plot`, `report`, plus `pipeline` (all stages for
//! one config) and `demo` (the bundled configs).
//!
//! Exit codes: 0 ok, 2 invalid config or input, 3 fit or check failure,
//! 4 I/O. Failures print one JSON object to standard error.

pub mod config;
pub mod pipeline;
pub mod svg;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::scheduler::InitMode;
use config::{Overrides, PipelineConfig};
use pipeline::Context;

/// Environment variable overriding the output directory.
pub const OUT_DIR_ENV: &str = "BATCHSCALE_OUT_DIR";

/// Bundled demo configs, by name.
pub const DEMOS: [(&str, &str); 5] = [
    ("constant", include_str!("../../configs/constant_noise.json")),
    ("linear", include_str!("../../configs/linear_noise.json")),
    ("grid1b", include_str!("../../configs/grid_1b.json")),
    ("witness", include_str!("../../configs/crossing_witness.json")),
    ("verify", include_str!("../../configs/equivalence.json")),
];

#[derive(Debug, Parser)]
#[command(name = "batchscale", version, about = "Data-versus-steps fitting and batch-size scheduling")]
pub struct Cli {
    /// Pipeline config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long, global = true, env = OUT_DIR_ENV)]
    pub out_dir: Option<PathBuf>,
    /// Seed for every randomized step; overrides the config's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub overrides: OverrideArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InitModeArg {
    PaperLiteral,
    Anchored,
}

/// Field overrides, named after the config fields they replace.
#[derive(Debug, Args, Default)]
pub struct OverrideArgs {
    /// Run files (CSV or JSONL, comma separated) used instead of simulating
    #[arg(long, global = true, value_delimiter = ',')]
    pub runs: Option<Vec<String>>,
    /// Target loss levels for the E(S) fits
    #[arg(long, global = true, value_delimiter = ',')]
    pub target_losses: Option<Vec<f64>>,
    /// Huber delta for the loss power-law fit
    #[arg(long, global = true)]
    pub loss_delta: Option<f64>,
    /// Steps dropped from the start of each run before fitting
    #[arg(long, global = true)]
    pub warmup_exclude: Option<u64>,
    /// Multistart count for the loss power-law fit
    #[arg(long, global = true)]
    pub loss_starts: Option<usize>,
    /// Huber delta (on ln E) for the E(S) fit
    #[arg(long, global = true)]
    pub es_delta: Option<f64>,
    /// Random restarts for the E(S) fit
    #[arg(long, global = true)]
    pub es_seeds: Option<usize>,
    /// Tokens per schedule stage
    #[arg(long, global = true)]
    pub d_interval: Option<f64>,
    /// Number of schedule stages
    #[arg(long, global = true)]
    pub n: Option<usize>,
    /// Per-stage momenta, comma separated
    #[arg(long, global = true, value_delimiter = ',', allow_hyphen_values = true)]
    pub momenta: Option<Vec<f64>>,
    /// Starting global batch of the schedule recurrence: zero or the curve value at 0 tokens
    #[arg(long, global = true, value_enum)]
    pub init_mode: Option<InitModeArg>,
    /// Rounding quantum in tokens, or `none`.
    #[arg(long, global = true)]
    pub quantum: Option<String>,
    /// Also tabulate the reference batch/learning-rate formulas
    #[arg(long, global = true)]
    pub compare_reference: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one run per configured batch size.
    Simulate,
    /// Fit the loss power law per run, then E(S) per target loss.
    Fit,
    /// Fit the loss power law per run.
    FitLoss,
    /// Fit E(S) per target loss from existing loss fits.
    FitEs,
    /// Build the batch-size schedule.
    Schedule,
    /// Check fixed-data / fixed-loss argmin agreement on loss surfaces.
    Verify,
    /// Render SVG plots of the artifacts present.
    Plot,
    /// Assemble report.json and report.md.
    Report,
    /// Every stage the config supports, in order.
    Pipeline,
    /// Run bundled demo configs into <out-dir>/<name>.
    Demo {
        #[arg(value_parser = ["all", "constant", "linear", "grid1b", "witness", "verify"], default_value = "all")]
        which: String,
    },
    /// Print a bundled demo config.
    ShowConfig {
        #[arg(value_parser = ["constant", "linear", "grid1b", "witness", "verify"])]
        name: String,
    },
}

impl Cli {
    fn overrides(&self) -> Result<Overrides> {
        let o = &self.overrides;
        let quantum = match o.quantum.as_deref() {
            None => None,
            Some("none") => Some(None),
            Some(q) => Some(Some(q.parse::<f64>().map_err(|_| {
                Error::InvalidConfig(format!("--quantum expects a number or `none`, got {q:?}"))
            })?)),
        };
        Ok(Overrides {
            output_dir: self.out_dir.clone(),
            seed: self.seed,
            runs: o.runs.clone(),
            target_losses: o.target_losses.clone(),
            loss_delta: o.loss_delta,
            warmup_exclude: o.warmup_exclude,
            loss_starts: o.loss_starts,
            es_delta: o.es_delta,
            es_seeds: o.es_seeds,
            d_interval: o.d_interval,
            n: o.n,
            momenta: o.momenta.clone(),
            init_mode: o.init_mode.map(|m| match m {
                InitModeArg::PaperLiteral => InitMode::PaperLiteral,
                InitModeArg::Anchored => InitMode::Anchored,
            }),
            quantum,
            compare_reference: o.compare_reference,
        })
    }

    fn load_config(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        cfg.apply(&self.overrides()?)?;
        Ok(cfg)
    }
}

fn demo_config(name: &str) -> Result<PipelineConfig> {
    let text = DEMOS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown demo {name:?}")))?;
    PipelineConfig::from_json(name, text)
}

/// Runs a parsed command line.
pub fn execute(cli: &Cli) -> Result<Vec<String>> {
    if let Command::ShowConfig { name } = &cli.command {
        let text = DEMOS.iter().find(|(n, _)| n == name).map(|(_, t)| *t).unwrap_or_default();
        print!("{text}");
        return Ok(Vec::new());
    }
    if let Command::Demo { which } = &cli.command {
        let base = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
        let mut warnings = Vec::new();
        for (name, _) in DEMOS.iter().filter(|(n, _)| which == "all" || n == which) {
            let mut cfg = demo_config(name)?;
            let mut o = cli.overrides()?;
            o.output_dir = Some(base.join(name));
            cfg.apply(&o)?;
            let mut ctx = Context::new(cfg);
            pipeline::run_all(&mut ctx).map_err(|e| e.context(format!("demo {name}")))?;
            warnings.extend(ctx.warnings.into_iter().map(|w| format!("{name}: {w}")));
            eprintln!("demo {name}: artifacts in {}", base.join(name).display());
        }
        return Ok(warnings);
    }

    let mut ctx = Context::new(cli.load_config()?);
    match &cli.command {
        Command::Simulate => {
            pipeline::simulate(&mut ctx)?;
        }
        Command::Fit => {
            pipeline::crossings(&mut ctx)?;
            pipeline::fit_loss(&mut ctx)?;
            pipeline::fit_es_stage(&mut ctx)?;
        }
        Command::FitLoss => {
            pipeline::crossings(&mut ctx)?;
            pipeline::fit_loss(&mut ctx)?;
        }
        Command::FitEs => {
            pipeline::fit_es_stage(&mut ctx)?;
        }
        Command::Schedule => {
            let s = pipeline::schedule(&mut ctx)?;
            print!("{}", crate::scheduler::schedule_table(&s.schedule));
        }
        Command::Verify => {
            pipeline::verify(&mut ctx)?;
        }
        Command::Plot => {
            pipeline::plot(&mut ctx)?;
        }
        Command::Report => {
            pipeline::report(&mut ctx)?;
        }
        Command::Pipeline => pipeline::run_all(&mut ctx)?,
        Command::Demo { .. } | Command::ShowConfig { .. } => unreachable!("handled above"),
    }
    Ok(ctx.warnings)
}

/// Machine-readable error object written to standard error.
pub fn error_json(e: &Error) -> String {
    serde_json::json!({
        "error": e.kind(),
        "message": e.to_string(),
        "exit_code": e.exit_code(),
    })
    .to_string()
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                print!("{e}");
                return 0;
            }
            let err = Error::InvalidConfig(e.to_string().trim().to_string());
            eprintln!("{}", error_json(&err));
            return err.exit_code();
        }
    };
    match execute(&cli) {
        Ok(warnings) => {
            for w in warnings {
                eprintln!("warning: {w}");
            }
            0
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            e.exit_code()
        }
    }
}
