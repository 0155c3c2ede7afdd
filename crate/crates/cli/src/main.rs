use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use placelens::pipeline::{self, PipelineError, RunConfig, Stage};
use placelens::simgen::{self, DgpConfig};

#[derive(Parser)]
#[command(name = "placelens", version, about = "Street-view indicators and place-based effect estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Bootstrap draws (overrides `bootstrap_b`).
    #[arg(long = "bootstrap", short = 'B')]
    bootstrap_b: Option<usize>,
    /// Worker threads for parallel stages.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate and normalize raw inputs.
    Ingest(Common),
    /// Run the four-prompt chain over every valid tile.
    Elicit(Common),
    /// Build the standardized block-group panels.
    Aggregate(Common),
    /// Build queen-contiguity weights.
    Weights(Common),
    /// Fit the outcome × approach × comparison × variant ladder.
    Fit(Common),
    /// Stacked regression with the cluster bootstrap.
    Stack(Common),
    /// R² comparison and quantile pseudo-R² grid.
    Quantile(Common),
    /// Generate a synthetic lattice with known effects.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Also write raw input files (manifest, ACS, geometry, segmentation) here.
        #[arg(long)]
        raw_inputs: Option<PathBuf>,
        /// Panoramas per block group in the raw inputs.
        #[arg(long, default_value_t = 3)]
        panos_per_cbg: usize,
    },
    /// Summarize available outputs.
    Report(Common),
    /// Run several stages in order.
    Run {
        #[command(flatten)]
        common: Common,
        /// Comma-separated stages; defaults depend on whether raw inputs are configured.
        #[arg(long)]
        stages: Option<String>,
    },
}

/// Loads a run configuration. A file that is a bare simulation config is
/// accepted too and becomes the `simulate` section.
fn load_config(path: Option<&Path>) -> Result<RunConfig, PipelineError> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    match RunConfig::load(path) {
        Err(PipelineError::ConfigParse(msg)) => {
            let text = std::fs::read_to_string(path).map_err(|e| PipelineError::ConfigParse(e.to_string()))?;
            match serde_json::from_str::<DgpConfig>(&text) {
                Ok(dgp) => {
                    let mut cfg = RunConfig {
                        simulate: dgp,
                        ..RunConfig::default()
                    };
                    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
                    cfg.validate()?;
                    Ok(cfg)
                }
                Err(_) => Err(PipelineError::ConfigParse(msg)),
            }
        }
        other => other,
    }
}

fn configure(common: &Common) -> Result<RunConfig, PipelineError> {
    let mut cfg = load_config(common.config.as_deref())?;
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(b) = common.bootstrap_b {
        cfg.bootstrap_b = b;
    }
    if common.workers.is_some() {
        cfg.workers = common.workers;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(command: Command) -> Result<i32, PipelineError> {
    let (common, stages) = match command {
        Command::Ingest(c) => (c, vec![Stage::Ingest]),
        Command::Elicit(c) => (c, vec![Stage::Elicit]),
        Command::Aggregate(c) => (c, vec![Stage::Aggregate]),
        Command::Weights(c) => (c, vec![Stage::Weights]),
        Command::Fit(c) => (c, vec![Stage::Fit]),
        Command::Stack(c) => (c, vec![Stage::Stack]),
        Command::Quantile(c) => (c, vec![Stage::Quantile]),
        Command::Report(c) => (c, vec![Stage::Report]),
        Command::Simulate {
            common,
            raw_inputs,
            panos_per_cbg,
        } => {
            let cfg = configure(&common)?;
            if let Some(dir) = raw_inputs {
                let data = simgen::generate(&cfg.simulate).map_err(|e| PipelineError::Stage {
                    stage: Stage::Simulate,
                    message: e.to_string(),
                })?;
                let year = cfg.target_year.unwrap_or(placelens::ingest::DEFAULT_TARGET_YEAR);
                let raw = simgen::raw_inputs(&data, panos_per_cbg, year);
                simgen::write_raw_inputs(&raw, &dir).map_err(|e| PipelineError::Stage {
                    stage: Stage::Simulate,
                    message: e.to_string(),
                })?;
            }
            let outcome = pipeline::run(&cfg, &[Stage::Simulate])?;
            return Ok(outcome.exit_code());
        }
        Command::Run { common, stages } => {
            let cfg = configure(&common)?;
            let list = match stages {
                Some(s) => pipeline::parse_stages(&s).map_err(|_| PipelineError::ConfigInvalid("stages".into()))?,
                None => cfg.default_stages(),
            };
            let outcome = pipeline::run(&cfg, &list)?;
            return Ok(outcome.exit_code());
        }
    };
    let cfg = configure(&common)?;
    Ok(pipeline::run(&cfg, &stages)?.exit_code())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => {
            if code == 4 {
                log::warn!("finished with failed cells (see tables/ladder_meta.json)");
            }
            ExitCode::from(code as u8)
        }
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
