use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sdm_sim::analysis::{analyze_streams, load_tag_dir, parse_pairs};
use sdm_sim::bench::{run_bench, DEFAULT_BENCH_TAGS};
use sdm_sim::output::to_json;
use sdm_sim::{run_scenario, ExperimentConfig, RunOptions, SimError};

#[derive(Parser)]
#[command(name = "sdm-sim", version, about = "Simulated entanglement distribution over a 19-core fiber")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to `scenario.output_dir`, resolved
        /// against the config file's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Treat configuration warnings as errors.
        #[arg(long)]
        strict: bool,
        /// Worker threads for independent acquisitions (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
        /// Record wall-clock timestamps in the manifest; reruns are then no
        /// longer bit-identical.
        #[arg(long)]
        wall_clock: bool,
    },
    /// Re-analyse stored TTAG files.
    Analyze {
        /// Directory of `.ttag` files.
        #[arg(long)]
        tags: PathBuf,
        /// Channel pairs, e.g. `1-4,2-5`.
        #[arg(long)]
        pairs: String,
        /// Coincidence window, ps.
        #[arg(long)]
        window: u64,
        /// Fixed delay for every pair, ps; searched per pair when omitted.
        #[arg(long, allow_hyphen_values = true)]
        delay: Option<i64>,
    },
    /// Parse and validate a config file, printing the resolved configuration.
    ValidateConfig { file: PathBuf },
    /// Correlator throughput on synthetic streams.
    Bench {
        #[arg(long, default_value_t = DEFAULT_BENCH_TAGS)]
        tags: u64,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(cmd: Command) -> Result<(), SimError> {
    match cmd {
        Command::Run { config, out, strict, threads, wall_clock } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let out = match (out, &cfg.scenario.output_dir) {
                (Some(o), _) => o,
                (None, Some(d)) => config.parent().unwrap_or(std::path::Path::new(".")).join(d),
                (None, None) => {
                    return Err(SimError::Config(sdm_sim::ConfigError::Invalid {
                        key: "--out".into(),
                        message: "no --out given and no scenario.output_dir configured".into(),
                    }))
                }
            };
            let opts = RunOptions { strict, wall_clock };
            let run = || run_scenario(&cfg, &out, opts);
            match threads {
                Some(n) => {
                    let pool = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build().map_err(SimError::runtime)?;
                    pool.install(run)?;
                }
                None => {
                    run()?;
                }
            }
            eprintln!("{} run complete: {}", cfg.scenario.kind, out.display());
        }
        Command::Analyze { tags, pairs, window, delay } => {
            let pairs = parse_pairs(&pairs)?;
            if window == 0 {
                return Err(SimError::Config(sdm_sim::ConfigError::Invalid { key: "--window".into(), message: "must be > 0".into() }));
            }
            let streams = load_tag_dir(&tags)?;
            let result = analyze_streams(&streams, &pairs, window, delay)?;
            print!("{}", to_json(&result));
        }
        Command::ValidateConfig { file } => {
            let cfg = ExperimentConfig::from_file(&file)?;
            print!("{}", cfg.canonical_json());
        }
        Command::Bench { tags, out } => {
            let report = run_bench(tags)?;
            let text = to_json(&report);
            if let Some(path) = out {
                std::fs::write(&path, &text).map_err(|e| SimError::io(&path, e))?;
            }
            print!("{text}");
        }
    }
    Ok(())
}
