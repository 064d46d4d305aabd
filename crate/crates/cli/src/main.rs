//! `fedreid`: run experiments, ablation grids and diagnostics from a TOML config.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::info;

use fedreid_core::diagnostics::{gradient_suite, TOLERANCE};
use fedreid_core::evalkit::{ablation_harness, Grid};
use fedreid_core::experiment::{plan, run_experiment};
use fedreid_core::gsd::StyleBank;
use fedreid_core::synthdata::{export_federation, generate_federation};
use fedreid_core::{Error, ExperimentConfig};

#[derive(Parser)]
#[command(name = "fedreid", version, about = "Federated re-identification simulator")]
struct Cli {
    /// Worker threads for clients and grid cells (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Validate and print the resolved plan without writing anything.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate data, run both phases, write artifacts.
    Run(Common),
    /// Run an ablation grid over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// components, anchoring, scope, metadata, tokens or lambda_c3.
        #[arg(long)]
        grid: String,
        /// Seeds `seed..seed+n`.
        #[arg(long, default_value_t = 5)]
        num_seeds: u64,
    },
    /// Export the synthetic federation as flat tensors plus a manifest.
    GenData(Common),
    /// Print the templates of a bank file (`.bin` or `.json`).
    InspectBank { path: PathBuf },
    /// Finite-difference audit of every analytic gradient.
    GradCheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn inspect_bank(path: &Path, out: &mut String) -> anyhow::Result<()> {
    let bank = if path.extension().is_some_and(|e| e == "json") {
        StyleBank::from_json(&std::fs::read_to_string(path)?)?
    } else {
        StyleBank::from_bytes(&std::fs::read(path)?)?
    };
    writeln!(out, "{} templates, {} channels", bank.len(), bank.channels())?;
    writeln!(out, "{:>6} {:>6}  mean | var", "client", "group")?;
    for t in bank.templates() {
        let f = |v: &[f64]| v.iter().map(|x| format!("{x:8.4}")).collect::<Vec<_>>().join(" ");
        writeln!(out, "{:>6} {:>6}  {} | {}", t.origin_client, t.origin_group, f(&t.stats.mean), f(&t.stats.var))?;
    }
    Ok(())
}

fn execute(command: Command, out: &mut String) -> anyhow::Result<()> {
    match command {
        Command::Run(common) => {
            let cfg = load(&common)?;
            if common.dry_run {
                write!(out, "{}", plan(&cfg)?)?;
                return Ok(());
            }
            let summary = run_experiment(&cfg)?;
            for e in &summary.metrics.evaluations {
                writeln!(out, "{}: mAP {:.2}%  rank-1 {:.2}%", e.name, 100.0 * e.map, 100.0 * e.rank1)?;
            }
            writeln!(out, "artifacts in {}", summary.out_dir.display())?;
        }
        Command::Ablate { common, grid, num_seeds } => {
            let cfg = load(&common)?;
            let grid: Grid = grid.parse()?;
            let seeds: Vec<u64> = (cfg.seed..cfg.seed + num_seeds).collect();
            if common.dry_run {
                write!(out, "{}", plan(&cfg)?)?;
                for c in grid.cells(&cfg) {
                    writeln!(out, "cell {} x seeds {seeds:?}", c.name)?;
                }
                return Ok(());
            }
            let table = ablation_harness(&cfg, grid, &seeds)?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            let path = cfg.out_dir.join("ablation.csv");
            std::fs::write(&path, table.to_csv()).with_context(|| format!("writing {}", path.display()))?;
            let runs = cfg.out_dir.join("ablation_runs.csv");
            std::fs::write(&runs, table.runs_csv()).with_context(|| format!("writing {}", runs.display()))?;
            write!(out, "{}", table.to_text())?;
            info!("wrote {}", path.display());
        }
        Command::GenData(common) => {
            let cfg = load(&common)?;
            if common.dry_run {
                write!(out, "{}", plan(&cfg)?)?;
                return Ok(());
            }
            let ds = generate_federation(&cfg.data, cfg.protocol, cfg.seed)?;
            export_federation(&ds, &cfg.out_dir)?;
            writeln!(out, "{} source samples, digest {}", ds.num_source_samples(), ds.digest())?;
        }
        Command::InspectBank { path } => inspect_bank(&path, out)?,
        Command::GradCheck { seeds } => {
            let seeds: Vec<u64> = (0..seeds).collect();
            let entries = gradient_suite(&seeds)?;
            let mut failed = 0;
            for e in &entries {
                if !e.passed() {
                    failed += 1;
                    writeln!(out, "FAIL {} seed {}: {:.3e}", e.target, e.seed, e.max_rel_error)?;
                }
            }
            let worst = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
            writeln!(out, "{} checks, worst relative error {worst:.3e} (tolerance {TOLERANCE:e})", entries.len())?;
            anyhow::ensure!(failed == 0, "{failed} gradient checks failed");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let mut out = String::new();
    let result = execute(cli.command, &mut out);
    // A closed pipe (e.g. `| head`) is not an error.
    if let Err(e) = std::io::stdout().lock().write_all(out.as_bytes()) {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(err) if err.is_config() => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
