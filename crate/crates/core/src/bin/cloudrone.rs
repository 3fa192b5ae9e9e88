use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use cloudrone::report::{analyze_dir, emit_metrics};
use cloudrone::{parse_scenario, simulate, Scenario};

#[derive(Parser)]
#[command(
    name = "cloudrone",
    version,
    about = "Drone micro-cloud swarm simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file, or every *.json scenario in a directory.
    Run {
        path: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output root; one subdirectory per scenario.
        #[arg(long, env = "CLOUDRONE_OUT", default_value = "out")]
        out: PathBuf,
    },
    /// Compute CDFs and check an output directory.
    Report { dir: PathBuf },
    /// Parse and validate a scenario without running it.
    Validate { path: PathBuf },
}

fn load(path: &Path) -> Result<Scenario> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_scenario(&text).with_context(|| format!("in {}", path.display()))
}

fn scenario_files(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "json"));
    files.sort();
    if files.is_empty() {
        bail!("no .json scenarios in {}", path.display());
    }
    Ok(files)
}

fn run_one(file: &Path, seed: Option<u64>, out: &Path) -> Result<String> {
    let mut scenario = load(file)?;
    if let Some(s) = seed {
        scenario.seed = s;
    }
    let stem = file
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("scenario");
    let dir = out.join(stem);
    let report = simulate(&scenario);
    let digests =
        emit_metrics(&report, &dir).with_context(|| format!("writing {}", dir.display()))?;
    let mut msg = format!(
        "{stem}: {} events, clock {} s -> {}\n",
        report.events_processed(),
        report.summary.clock_s,
        dir.display()
    );
    for (name, d) in digests {
        msg.push_str(&format!("  {d}  {name}\n"));
    }
    Ok(msg)
}

fn run(path: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let files = scenario_files(path)?;
    // Parse everything first so a bad file fails before any output is written.
    for f in &files {
        load(f)?;
    }
    let results: Vec<Result<String>> = thread::scope(|s| {
        let handles: Vec<_> = files
            .iter()
            .map(|f| s.spawn(move || run_one(f, seed, out)))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| bail!("simulation thread panicked"))
            })
            .collect()
    });
    for r in results {
        print!("{}", r?);
    }
    Ok(())
}

fn report(dir: &Path) -> Result<()> {
    let a = analyze_dir(dir).with_context(|| format!("analysing {}", dir.display()))?;
    for l in &a.user_levels {
        println!(
            "users {:>4}: n={} p50={:.3} ms p90={:.3} ms p99={:.3} ms",
            l.users, l.count, l.p50_ms, l.p90_ms, l.p99_ms
        );
    }
    if let Some(mean) = a.creations.mean_creation_s {
        println!(
            "creations: {} mean={mean:.3} s total={:.1} s",
            a.creations.count, a.creations.total_creation_s
        );
    }
    if !a.inconsistencies.is_empty() {
        for i in &a.inconsistencies {
            eprintln!("inconsistent: {i}");
        }
        bail!("summary.json disagrees with the raw files");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { path, seed, out } => run(path, *seed, out),
        Command::Report { dir } => report(dir),
        Command::Validate { path } => {
            scenario_files(path).and_then(|fs| fs.iter().try_for_each(|f| load(f).map(drop)))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
