use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use futilsim_core::harness::engine::with_workers;
use futilsim_core::harness::output::write_json;
use futilsim_core::harness::{
    reproduce_figure, run_scenario, shrinkage_curves, tune_hybrid_cutoff, write_scenario, ConfigError,
    FigureId, ReproduceError, ScenarioConfig,
};
use futilsim_core::screening::{screen_stratifiers, BaselineFrame, DEFAULT_SUBSAMPLES};

#[derive(Parser)]
#[command(name = "futilsim", version, about = "Interim futility simulation under population shift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario config and write rows.csv, aggregates.csv and result.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to `output.dir` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = "FUTILSIM_WORKERS")]
        workers: Option<usize>,
        /// Overrides `master_seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// W1 distance to the benchmark for each hybrid cutoff.
    TuneCutoff {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,2,5,10,20,50,100")]
        grid: Vec<usize>,
        /// Also write cutoff_curve.json here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = "FUTILSIM_WORKERS")]
        workers: Option<usize>,
    },
    /// Permutation screen of candidate stratifiers against the full baseline.
    Screen {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "in_ia")]
        ia_col: String,
        #[arg(long, value_delimiter = ',', required = true)]
        vars: Vec<String>,
        #[arg(long, default_value_t = DEFAULT_SUBSAMPLES)]
        b: usize,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long)]
        bonferroni: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Also write screen.json here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = "FUTILSIM_WORKERS")]
        workers: Option<usize>,
    },
    /// Regenerate the data behind one of the figures.
    Reproduce {
        figure: FigureId,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the preset replicate count.
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long, env = "FUTILSIM_WORKERS")]
        workers: Option<usize>,
    },
    /// Analytic curves.
    Curves {
        #[command(subcommand)]
        which: Curves,
    },
}

#[derive(Subcommand)]
enum Curves {
    /// Shrinkage weight against group size and between-group variance.
    Shrinkage {
        #[arg(long)]
        out: PathBuf,
    },
}

/// Exit 1: bad arguments or config. Exit 2: failure while running.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.into())
    }
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

fn load(path: &Path, seed: Option<u64>) -> Result<ScenarioConfig, Failure> {
    let mut cfg = ScenarioConfig::from_path(path)
        .with_context(|| format!("config {}", path.display()))
        .map_err(Failure::Config)?;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    Ok(cfg)
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run {
            config,
            out,
            workers,
            seed,
        } => {
            let cfg = load(&config, seed)?;
            let dir = out
                .or_else(|| cfg.output.dir.as_ref().map(PathBuf::from))
                .ok_or_else(|| Failure::Config(anyhow::anyhow!("no output directory: pass --out")))?;
            let res = run_scenario(&cfg, workers)?;
            let m = write_scenario(&res, &cfg, &dir)
                .with_context(|| format!("writing {}", dir.display()))
                .map_err(Failure::Runtime)?;
            if res.error_count > 0 {
                eprintln!("warning: {} replicate rows failed; see the error column", res.error_count);
            }
            for f in &m.files {
                println!("{}", dir.join(f).display());
            }
        }
        Command::TuneCutoff {
            config,
            grid,
            out,
            workers,
        } => {
            let cfg = load(&config, None)?;
            let curve = tune_hybrid_cutoff(&cfg, &grid, workers)?;
            println!("{}", serde_json::to_string_pretty(&curve).map_err(runtime)?);
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(runtime)?;
                write_json(dir.join("cutoff_curve.json"), &curve).map_err(runtime)?;
            }
        }
        Command::Screen {
            data,
            ia_col,
            vars,
            b,
            alpha,
            bonferroni,
            seed,
            out,
            workers,
        } => {
            let file = File::open(&data)
                .with_context(|| format!("opening {}", data.display()))
                .map_err(Failure::Config)?;
            let (frame, ia) = BaselineFrame::from_csv(BufReader::new(file), &ia_col, &vars)
                .with_context(|| format!("reading {}", data.display()))
                .map_err(Failure::Config)?;
            let report = with_workers(workers, || screen_stratifiers(&frame, &ia, &vars, alpha, b, seed, bonferroni))
                .map_err(runtime)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(runtime)?);
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(runtime)?;
                write_json(dir.join("screen.json"), &report).map_err(runtime)?;
            }
        }
        Command::Reproduce {
            figure,
            out,
            replicates,
            workers,
        } => {
            let m = reproduce_figure(figure, &out, replicates, workers).map_err(|e| match e {
                ReproduceError::Config(c) => Failure::from(c),
                other => runtime(other),
            })?;
            for f in &m.files {
                println!("{}", out.join(f).display());
            }
        }
        Command::Curves {
            which: Curves::Shrinkage { out },
        } => {
            let m = shrinkage_curves(&out).map_err(runtime)?;
            for f in &m.files {
                println!("{}", out.join(f).display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
