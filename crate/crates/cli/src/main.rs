use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mrr_core::phasing_heuristic::CacheError;
use mrr_core::pipeline::{
    build_problem, emit_report, run_pipeline_from, run_tour, tensor_with_cache, tour_cost, tour_of, ConfigError, Formulation, IngestError,
    PipelineError, ReportFormat, RunConfig, RunReport, TourResult,
};
use mrr_core::tour_solver::{brute_force_tour, Encoding};

/// Multi-target rendezvous planner: tour selection by annealing over a
/// phasing cost tensor, then trajectory refinement by differential evolution.
#[derive(Parser)]
#[command(name = "mrr", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overrides the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Extra `key=value` settings applied after the configuration file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the cost tensor and write it to the cache file.
    Tensor {
        /// Cache path (default: <out>/tensor.bin).
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Run the annealing chains and write <out>/tour.json.
    Tour {
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Refine a tour from `mrr tour` and write the report.
    Refine {
        #[arg(long)]
        tour: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Full run: tensor, tour, time-fixed and time-free refinement.
    Run {
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Exact tour optimum by enumeration (small instances only).
    Oracle,
    /// Print the effective configuration.
    Config,
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut text = match &c.config {
        Some(p) => fs::read_to_string(p)
            .with_context(|| format!("reading {}", p.display()))
            .map_err(|e| PipelineError::Io(format!("{e:#}")))?,
        None => RunConfig::default().to_text(),
    };
    for kv in &c.set {
        text.push('\n');
        text.push_str(kv);
    }
    if let Some(s) = c.seed {
        text.push_str(&format!("\nseed = {s}"));
    }
    if let Some(o) = &c.out {
        text.push_str(&format!("\nout_dir = {}", o.display()));
    }
    Ok(RunConfig::parse(&text)?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(PipelineError::from)?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(PipelineError::from)?;
    Ok(())
}

fn cache_path(cfg: &RunConfig, cache: Option<PathBuf>) -> PathBuf {
    cache.unwrap_or_else(|| cfg.out_dir.join("tensor.bin"))
}

fn run(cli: Cli) -> Result<()> {
    if let Some(w) = cli.common.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .context("configuring worker pool")?;
    }
    let cfg = load_config(&cli.common)?;
    match cli.cmd {
        Cmd::Config => print!("{}", cfg.to_text()),
        Cmd::Tensor { cache } => {
            let problem = build_problem(&cfg)?;
            let path = cache_path(&cfg, cache);
            fs::create_dir_all(path.parent().unwrap_or(Path::new("."))).map_err(PipelineError::from)?;
            let t = tensor_with_cache(&cfg, &problem, Some(&path))?;
            println!("tensor {:?} -> {}", t.shape, path.display());
        }
        Cmd::Tour { cache } => {
            let problem = build_problem(&cfg)?;
            let cache = cache.map(|c| cache_path(&cfg, Some(c)));
            let tensor = tensor_with_cache(&cfg, &problem, cache.as_deref())?;
            let tour = run_tour(&cfg, &problem, &tensor);
            let path = cfg.out_dir.join("tour.json");
            write_json(&path, &tour)?;
            println!("sequence {:?}", tour.tour.p);
            println!("slots {:?}", tour.tour.slots);
            println!("estimate {:.4} km/s -> {}", tour.cost, path.display());
        }
        Cmd::Refine { tour, cache } => {
            let text = fs::read_to_string(&tour).map_err(|e| PipelineError::Io(format!("{}: {e}", tour.display())))?;
            let t: TourResult = serde_json::from_str(&text).map_err(|e| ConfigError::Invalid(format!("{}: {e}", tour.display())))?;
            report(&cfg, run_pipeline_from(&cfg, cache.as_deref(), Some(t)))?;
        }
        Cmd::Run { cache } => report(&cfg, run_pipeline_from(&cfg, cache.as_deref(), None))?,
        Cmd::Oracle => {
            let problem = build_problem(&cfg)?;
            let n = problem.n();
            let (len, enc) = match cfg.formulation {
                Formulation::TimeDiscrete => (n * cfg.d, Encoding::Grid { d: cfg.d }),
                _ => (n, Encoding::Sequence),
            };
            if len > 10 {
                bail!(ConfigError::Invalid(format!(
                    "oracle enumerates {len}! permutations; keep the encoding length at 10 or less"
                )));
            }
            let tensor = tensor_with_cache(&cfg, &problem, None)?;
            let (pi, cost) =
                brute_force_tour(|pi| tour_cost(cfg.formulation, pi, n, &tensor), n, enc).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            let tour = tour_of(cfg.formulation, &pi, n, cfg.d);
            println!("sequence {:?}", tour.p);
            println!("slots {:?}", tour.slots);
            println!("optimum {cost:.6} km/s");
        }
    }
    Ok(())
}

fn report(cfg: &RunConfig, result: Result<RunReport, PipelineError>) -> Result<()> {
    let formats = [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Trace];
    match result {
        Ok(r) => {
            emit_report(&r, &cfg.out_dir, &formats)?;
            for s in &r.stages {
                println!("{:<14} {:.4} km/s  {:>8.1} s", s.stage.label(), s.dv_total, s.seconds);
            }
            println!("report -> {}", cfg.out_dir.join("report.json").display());
            Ok(())
        }
        Err(PipelineError::Stage { stage, message, partial }) => {
            // keep what finished
            emit_report(&partial, &cfg.out_dir, &formats)?;
            Err(PipelineError::Stage { stage, message, partial }.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if let Some(p) = e.downcast_ref::<PipelineError>() {
        return p.exit_code() as u8;
    }
    if e.downcast_ref::<ConfigError>().is_some() {
        2
    } else if e.downcast_ref::<IngestError>().is_some() {
        3
    } else if e.downcast_ref::<CacheError>().is_some() {
        4
    } else {
        1
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
