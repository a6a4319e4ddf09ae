use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use chiplet_dse::config::{read_json, Overrides, RunConfig};
use chiplet_dse::economics::Objective;
use chiplet_dse::explore::{cmd_evaluate, cmd_explore, cmd_plotdata, fit_constants, EvalInput, Figure, REFERENCE_CHIPS};
use chiplet_dse::{Error, Result};

#[derive(Parser)]
#[command(name = "chiplet-dse", version, about = "Chiplet-cloud design-space exploration ranked by TCO per token")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Hardware constants file (JSON).
    #[arg(long)]
    hw: Option<PathBuf>,
    /// Model file (JSON); repeat for several models.
    #[arg(long = "model")]
    models: Vec<PathBuf>,
    /// Batch sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    batch: Option<Vec<u64>>,
    /// Context lengths, comma separated.
    #[arg(long, value_delimiter = ',')]
    context: Option<Vec<u64>>,
    /// Weight sparsity levels in [0, 1), comma separated.
    #[arg(long, value_delimiter = ',')]
    sparsity: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
    #[arg(long, value_enum)]
    heuristics: Option<Switch>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    TcoPerToken,
    Throughput,
    Tco,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Run the two-phase sweep and write the run artifacts.
    Explore(ConfigArgs),
    /// Evaluate one fixed design or baseline accelerator described in a JSON file.
    Evaluate {
        input: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Emit plot data for a figure from a finished run directory.
    Plotdata {
        run_dir: PathBuf,
        /// frontier, batch_sweep, p_sweep, nre_breakeven or sparsity.
        figure: String,
    },
    /// Fit the SRAM area constant to the reference chiplet designs.
    FitConstants {
        #[arg(long)]
        hw: Option<PathBuf>,
    },
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let ov = Overrides {
            batch: self.batch.clone(),
            context: self.context.clone(),
            sparsity: self.sparsity.clone(),
            objective: self.objective.map(|o| match o {
                ObjectiveArg::TcoPerToken => Objective::TcoPerToken,
                ObjectiveArg::Throughput => Objective::Throughput,
                ObjectiveArg::Tco => Objective::Tco,
            }),
            heuristics: self.heuristics.map(|s| matches!(s, Switch::On)),
            out: self.out.clone(),
            workers: self.workers,
        };
        RunConfig::layered(self.hw.as_deref(), &self.models, &ov)
    }
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| Error::Config(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Explore(args) => {
            let cfg = args.resolve()?;
            let res = cmd_explore(&cfg)?;
            print_json(&json!({
                "status": "ok",
                "out": cfg.out,
                "config_hash": res.config_hash,
                "design_points": res.points.len(),
                "frontier": res.frontier.len(),
                "rejections": res.rejections.len(),
            }))
        }
        Command::Evaluate { input, cfg } => {
            let cfg = cfg.resolve()?;
            let value = read_json(&input)?;
            let req: EvalInput = serde_json::from_value(value).map_err(|source| Error::Json { path: input, source })?;
            print_json(&cmd_evaluate(&cfg, &req)?)
        }
        Command::Plotdata { run_dir, figure } => {
            let figure: Figure = figure.parse()?;
            let path = cmd_plotdata(&run_dir, figure)?;
            print_json(&json!({ "status": "ok", "figure": figure.name(), "path": path }))
        }
        Command::FitConstants { hw } => {
            let cfg = RunConfig::layered(hw.as_deref(), &[], &Overrides::default())?;
            print_json(&fit_constants(&REFERENCE_CHIPS, &cfg.silicon)?)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "code": e.code(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
