use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ina_sim::config::parse_seeds;
use ina_sim::harness::{read_csv, run_matrix, write_csv, Comparison, CsvRow, MatrixError};
use ina_sim::scenarios;
use ina_sim::sim::RunOptions;
use ina_sim::{AllocationPolicy, ScenarioConfig};

#[derive(Parser)]
#[command(name = "ina-sim", version, about = "In-network aggregation simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file for one or more policies and seeds.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Policy or comma-separated list (esa, atp, switchml, always, coin:0.5).
        #[arg(long)]
        policy: Option<String>,
        /// Seeds as `1..5`, `1,4,9` or `3`. Defaults to the config's seeds.
        #[arg(long)]
        seeds: Option<String>,
        /// Write one trace CSV per run.
        #[arg(long)]
        trace: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the speedup table for `<out>/runs.csv`, running esa, atp and
    /// switchml first when a config is given.
    Compare {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<String>,
        /// Policies to run with `--config`.
        #[arg(long, default_value = "esa,atp,switchml")]
        policies: String,
    },
    /// List the scripted scenarios, or run one and write its trace.
    Scenario {
        name: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure with its exit code: 2 for bad input, 1 for a failed run.
struct Failure(u8, String);

impl From<MatrixError> for Failure {
    fn from(e: MatrixError) -> Self {
        match e {
            MatrixError::Config(e) => Failure(2, e.to_string()),
            e @ MatrixError::Run { .. } => Failure(1, e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure(2, format!("{}: {e}", path.display()))
}

fn parse_policies(s: &str) -> Result<Vec<AllocationPolicy>, Failure> {
    s.split(',')
        .map(|p| AllocationPolicy::parse(p).ok_or_else(|| Failure(2, format!("unknown policy `{p}`"))))
        .collect()
}

fn load(config: &Path, seeds: Option<&str>) -> Result<(ScenarioConfig, Vec<u64>), Failure> {
    let cfg = ScenarioConfig::load(config).map_err(|e| Failure(2, e.to_string()))?;
    let seeds = match seeds {
        Some(s) => parse_seeds(s).map_err(|e| Failure(2, e.to_string()))?,
        None => cfg.seeds.clone(),
    };
    Ok((cfg, seeds))
}

fn write_runs(out: &Path, rows: &[CsvRow]) -> Result<(), Failure> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let path = out.join("runs.csv");
    write_csv(rows, BufWriter::new(File::create(&path).map_err(io_err(&path))?)).map_err(io_err(&path))
}

fn run(config: &Path, policy: Option<&str>, seeds: Option<&str>, trace: bool, out: Option<PathBuf>) -> Result<(), Failure> {
    let (cfg, seeds) = load(config, seeds)?;
    let policies = match policy {
        Some(p) => parse_policies(p)?,
        None => vec![cfg.policy],
    };
    let out = out.or_else(|| cfg.out_dir.clone().map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("out"));
    let opts = RunOptions { keep_trace: trace, ..Default::default() };
    let outcomes = run_matrix(&cfg, &policies, &seeds, &opts)?;
    let rows: Vec<CsvRow> = outcomes.iter().map(|o| CsvRow::from(&o.report)).collect();
    write_runs(&out, &rows)?;
    let reports: Vec<_> = outcomes.iter().map(|o| &o.report).collect();
    let path = out.join("reports.json");
    let json = serde_json::to_string_pretty(&reports).expect("reports serialize");
    fs::write(&path, json).map_err(io_err(&path))?;
    for o in &outcomes {
        let r = &o.report;
        println!(
            "{:<10} seed {:<4} jct {:>10.4} ms  util {:.4}  reminders {:<6} preemptions {:<6} digest {}",
            r.policy,
            r.seed,
            r.mean_jct_ns / 1e6,
            r.mean_utilization,
            r.counters.reminders(),
            r.counters.preemptions,
            r.digest
        );
        if trace {
            let path = out.join(format!("trace_{}_{}.csv", r.policy, r.seed));
            let f = File::create(&path).map_err(io_err(&path))?;
            o.write_trace_csv(BufWriter::new(f)).map_err(io_err(&path))?;
        }
    }
    if policies.len() > 1 {
        if let Some(c) = Comparison::from_rows(&rows, None) {
            print!("{}", c.to_table());
        }
    }
    Ok(())
}

fn compare(out: &Path, config: Option<&Path>, seeds: Option<&str>, policies: &str) -> Result<(), Failure> {
    if let Some(config) = config {
        let (cfg, seeds) = load(config, seeds)?;
        let outcomes = run_matrix(&cfg, &parse_policies(policies)?, &seeds, &RunOptions::default())?;
        let rows: Vec<CsvRow> = outcomes.iter().map(|o| CsvRow::from(&o.report)).collect();
        write_runs(out, &rows)?;
    }
    let path = out.join("runs.csv");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let rows = read_csv(&text).map_err(|e| Failure(2, format!("{}: {e}", path.display())))?;
    let table = Comparison::from_rows(&rows, None).ok_or_else(|| Failure(2, format!("{}: no runs", path.display())))?.to_table();
    let path = out.join("compare.txt");
    fs::write(&path, &table).map_err(io_err(&path))?;
    print!("{table}");
    Ok(())
}

fn scenario(name: Option<&str>, out: Option<PathBuf>) -> Result<(), Failure> {
    let all = scenarios::all();
    let Some(name) = name else {
        for s in &all {
            println!("{:<12} {}", s.name, s.summary);
        }
        return Ok(());
    };
    let s = all.iter().find(|s| s.name == name).ok_or_else(|| Failure(2, format!("no scenario `{name}`")))?;
    let outcome = s.run();
    let out = out.unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let path = out.join(format!("trace_{}.csv", s.name));
    outcome.write_trace_csv(BufWriter::new(File::create(&path).map_err(io_err(&path))?)).map_err(io_err(&path))?;
    println!("{}: {} trace rows written to {}", s.name, outcome.report.trace_records, path.display());
    if let Some(f) = &outcome.failure {
        return Err(Failure(1, f.to_string()));
    }
    s.match_path(&outcome).map_err(|e| Failure(1, e))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::Run { config, policy, seeds, trace, out } => run(&config, policy.as_deref(), seeds.as_deref(), trace, out),
        Cmd::Compare { out, config, seeds, policies } => compare(&out, config.as_deref(), seeds.as_deref(), &policies),
        Cmd::Scenario { name, out } => scenario(name.as_deref(), out),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
