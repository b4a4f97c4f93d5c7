//! Uncontended single-job runs against closed-form pipeline timings.
//! Reference values come from `tools/oracles/pipeline_bound.py`.

use ina_sim::sim::{run_once, RunOptions};
use ina_sim::ScenarioConfig;

fn lone_job(window_bytes: u32) -> ScenarioConfig {
    ScenarioConfig {
        jobs: 1,
        workers_per_job: 8,
        iterations: 1,
        warmup: 0,
        jitter_ns: 0,
        start_spread_ns: 0,
        window_bytes,
        ..Default::default()
    }
}

fn jct_ns(cfg: &ScenarioConfig) -> f64 {
    let out = run_once(cfg, 1, RunOptions::default()).unwrap();
    assert!(out.ok(), "{:?}", out.failure);
    out.report.mean_jct_ns
}

#[test]
fn window_above_bdp_meets_line_rate_bound() {
    let bound = 1_610_059.2;
    let jct = jct_ns(&lone_job(200_000));
    assert!((jct - bound).abs() / bound < 0.05, "jct {jct} vs {bound}");
    assert!((jct - 1_610_034.7).abs() < 100.0, "jct {jct}");
}

#[test]
fn default_window_is_window_limited() {
    let jct = jct_ns(&lone_job(60_000));
    assert!((jct - 3_006_768.8).abs() < 100.0, "jct {jct}");
}
