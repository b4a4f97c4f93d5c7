//! Run matrices: one deterministic run per (policy, seed), the per-run CSV,
//! and the speedup table derived from it.
//!
//! The table is computed from [`CsvRow`]s only, so reading a CSV back gives
//! the same numbers as the live reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use thiserror::Error;

use crate::config::{ConfigError, ScenarioConfig};
use crate::sim::{RunFailure, RunOptions, RunOutcome, RunReport, Simulation};
use crate::switchd::AllocationPolicy;

pub const CSV_COLUMNS: &str = "policy,seed,jobs,workers,mean_jct_ns,utilization,reminders,preemptions,ps_fallbacks";

#[derive(Debug, Error)]
pub enum MatrixError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("policy {policy}, seed {seed}: {failure}")]
    Run { policy: String, seed: u64, failure: RunFailure },
}

/// Runs every (policy, seed) pair and returns the outcomes sorted by policy
/// (in the order given) and then seed. Runs are spread over the available
/// cores; each simulation is single-threaded and independent, so the
/// result does not depend on scheduling. The first failing pair in that
/// order aborts the matrix.
pub fn run_matrix(
    cfg: &ScenarioConfig,
    policies: &[AllocationPolicy],
    seeds: &[u64],
    opts: &RunOptions,
) -> Result<Vec<RunOutcome>, MatrixError> {
    for &p in policies {
        ScenarioConfig { policy: p, ..cfg.clone() }.validate()?;
    }
    let tasks: Vec<(usize, AllocationPolicy, u64)> = policies
        .iter()
        .flat_map(|&p| seeds.iter().map(move |&s| (p, s)))
        .enumerate()
        .map(|(i, (p, s))| (i, p, s))
        .collect();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(tasks.len()).max(1);
    let next = AtomicUsize::new(0);
    let done: Mutex<Vec<Option<Result<RunOutcome, ConfigError>>>> = Mutex::new((0..tasks.len()).map(|_| None).collect());
    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(slot, policy, seed)) = tasks.get(i) else { break };
        let r = Simulation::new(cfg, policy, seed, opts.clone()).map(Simulation::run);
        done.lock().expect("no run panics while holding the lock")[slot] = Some(r);
    };
    if threads == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(work);
            }
        });
    }
    let mut out = Vec::with_capacity(tasks.len());
    for r in done.into_inner().expect("lock is not poisoned") {
        let outcome = r.expect("every task ran")?;
        if let Some(f) = &outcome.failure {
            return Err(MatrixError::Run { policy: outcome.report.policy.clone(), seed: outcome.report.seed, failure: f.clone() });
        }
        out.push(outcome);
    }
    Ok(out)
}

/// One line of the run CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub policy: String,
    pub seed: u64,
    pub jobs: u32,
    pub workers: u32,
    pub mean_jct_ns: u64,
    pub utilization: f64,
    pub reminders: u64,
    pub preemptions: u64,
    pub ps_fallbacks: u64,
}

impl From<&RunReport> for CsvRow {
    fn from(r: &RunReport) -> Self {
        CsvRow {
            policy: r.policy.clone(),
            seed: r.seed,
            jobs: r.jobs,
            workers: r.workers,
            mean_jct_ns: r.mean_jct_ns.round() as u64,
            utilization: r.mean_utilization,
            reminders: r.counters.reminders(),
            preemptions: r.counters.preemptions,
            ps_fallbacks: r.counters.ps_fallbacks,
        }
    }
}

pub fn write_csv<W: Write>(rows: &[CsvRow], mut w: W) -> io::Result<()> {
    writeln!(w, "{CSV_COLUMNS}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{:.6},{},{},{}",
            r.policy, r.seed, r.jobs, r.workers, r.mean_jct_ns, r.utilization, r.reminders, r.preemptions, r.ps_fallbacks
        )?;
    }
    Ok(())
}

pub fn read_csv(text: &str) -> Result<Vec<CsvRow>, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == CSV_COLUMNS => {}
        Some(h) => return Err(format!("unexpected header `{h}`, want `{CSV_COLUMNS}`")),
        None => return Err("empty CSV".into()),
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 9 {
                return Err(format!("line {}: {} fields, want 9", i + 2, f.len()));
            }
            let bad = |col: &str| format!("line {}: bad {col}", i + 2);
            Ok(CsvRow {
                policy: f[0].to_string(),
                seed: f[1].parse().map_err(|_| bad("seed"))?,
                jobs: f[2].parse().map_err(|_| bad("jobs"))?,
                workers: f[3].parse().map_err(|_| bad("workers"))?,
                mean_jct_ns: f[4].parse().map_err(|_| bad("mean_jct_ns"))?,
                utilization: f[5].parse().map_err(|_| bad("utilization"))?,
                reminders: f[6].parse().map_err(|_| bad("reminders"))?,
                preemptions: f[7].parse().map_err(|_| bad("preemptions"))?,
                ps_fallbacks: f[8].parse().map_err(|_| bad("ps_fallbacks"))?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicySummary {
    pub policy: String,
    pub runs: usize,
    pub mean_jct_ns: f64,
    pub mean_utilization: f64,
    /// This policy's mean JCT over the reference policy's.
    pub jct_speedup: f64,
    /// Reference utilization over this policy's.
    pub util_gain: f64,
    /// Seeds on which the reference had the strictly lower JCT.
    pub reference_wins: usize,
    pub paired_seeds: usize,
}

/// Per-policy means and speedups of a reference policy over the others.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub reference: String,
    pub rows: Vec<PolicySummary>,
}

impl Comparison {
    /// `reference` defaults to `esa` when present, else the first policy seen.
    pub fn from_rows(rows: &[CsvRow], reference: Option<&str>) -> Option<Comparison> {
        let mut order: Vec<&str> = Vec::new();
        let mut by_policy: BTreeMap<&str, BTreeMap<u64, &CsvRow>> = BTreeMap::new();
        for r in rows {
            if !order.contains(&r.policy.as_str()) {
                order.push(&r.policy);
            }
            by_policy.entry(&r.policy).or_default().insert(r.seed, r);
        }
        let reference = match reference {
            Some(p) => by_policy.contains_key(p).then_some(p)?,
            None if by_policy.contains_key("esa") => "esa",
            None => *order.first()?,
        };
        let mean = |m: &BTreeMap<u64, &CsvRow>, f: fn(&CsvRow) -> f64| m.values().map(|r| f(r)).sum::<f64>() / m.len() as f64;
        let refs = &by_policy[reference];
        let ref_jct = mean(refs, |r| r.mean_jct_ns as f64);
        let ref_util = mean(refs, |r| r.utilization);
        let rows = order
            .iter()
            .map(|&p| {
                let m = &by_policy[p];
                let jct = mean(m, |r| r.mean_jct_ns as f64);
                let util = mean(m, |r| r.utilization);
                let paired: Vec<u64> = m.keys().filter(|s| refs.contains_key(s)).copied().collect();
                let wins = paired.iter().filter(|s| refs[s].mean_jct_ns < m[s].mean_jct_ns).count();
                PolicySummary {
                    policy: p.to_string(),
                    runs: m.len(),
                    mean_jct_ns: jct,
                    mean_utilization: util,
                    jct_speedup: jct / ref_jct,
                    util_gain: ref_util / util,
                    reference_wins: wins,
                    paired_seeds: paired.len(),
                }
            })
            .collect();
        Some(Comparison { reference: reference.to_string(), rows })
    }

    pub fn from_reports(reports: &[&RunReport], reference: Option<&str>) -> Option<Comparison> {
        let rows: Vec<CsvRow> = reports.iter().map(|r| CsvRow::from(*r)).collect();
        Comparison::from_rows(&rows, reference)
    }

    pub fn get(&self, policy: &str) -> Option<&PolicySummary> {
        self.rows.iter().find(|r| r.policy == policy)
    }

    /// Plain-text table, one line per policy.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:>5} {:>14} {:>8} {:>12} {:>12} {:>6}",
            "policy", "runs", "mean_jct_ms", "util", "jct_speedup", "util_gain", "wins"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<10} {:>5} {:>14.4} {:>8.4} {:>12.3} {:>12.3} {:>6}",
                r.policy,
                r.runs,
                r.mean_jct_ns / 1e6,
                r.mean_utilization,
                r.jct_speedup,
                r.util_gain,
                format!("{}/{}", r.reference_wins, r.paired_seeds)
            );
        }
        let _ = writeln!(s, "speedups are relative to {}", self.reference);
        s
    }
}
