//! Browser entry points. Each call takes plain numbers or names and returns
//! a JSON string for the page to draw; bad input comes back as
//! `{"error": "..."}` instead of a thrown exception.

use serde_json::{json, Value};
use wasm_bindgen::prelude::wasm_bindgen;

use ina_sim::config::{JobConfig, ModelRef};
use ina_sim::harness::{run_matrix, Comparison};
use ina_sim::priority::{compute_priority, downgrade, quantize_priority, JobProfile, QuantMode, QuantScale};
use ina_sim::scenarios;
use ina_sim::sim::RunOptions;
use ina_sim::types::JobId;
use ina_sim::workload::{DnnModel, LAYERS};
use ina_sim::{AllocationPolicy, ScenarioConfig};

const CURVE_POINTS: usize = 48;

fn error(msg: impl std::fmt::Display) -> String {
    json!({ "error": msg.to_string() }).to_string()
}

/// Raw score and 8-bit code of both layers of `model` as the remaining time
/// sweeps 1 ms to 1 s, plus the downgrade chain of the top code.
#[wasm_bindgen]
pub fn priority_curve(model: &str, mode: &str, k: f64, p_ref: f64) -> String {
    let Some(m) = DnnModel::preset(model) else { return error(format!("unknown model `{model}`")) };
    let mode = match mode {
        "log" => QuantMode::Log,
        "linear" => QuantMode::Linear,
        _ => return error(format!("unknown mode `{mode}`")),
    };
    let scale = QuantScale { mode, k, p_ref };
    if !scale.is_valid() {
        return error("k and p_ref must be positive");
    }
    let mut points = Vec::new();
    for i in 0..CURVE_POINTS {
        let t = 1e-3 * 1e3f64.powf(i as f64 / (CURVE_POINTS - 1) as f64);
        let profile = JobProfile { job: JobId(0), remaining_time: t, layer_count: LAYERS, comm_overhead: m.comm_comp_ratio, comp_overhead: 1.0 };
        for layer in 1..=LAYERS {
            let raw = compute_priority(&profile, layer).expect("profile is valid");
            points.push(json!({ "t_ms": t * 1e3, "layer": layer, "raw": raw.value(), "code": quantize_priority(raw, scale) }));
        }
    }
    let top = points.iter().filter_map(|p| p["code"].as_u64()).max().unwrap_or(0) as u8;
    let chain: Vec<u8> = std::iter::successors(Some(top), |&c| (c > 0).then(|| downgrade(c))).collect();
    json!({ "model": m.name, "points": points, "downgrades": chain }).to_string()
}

/// Names and one-line summaries of the scripted scenarios.
#[wasm_bindgen]
pub fn scenario_names() -> String {
    let list: Vec<Value> = scenarios::all().iter().map(|s| json!({ "name": s.name, "summary": s.summary })).collect();
    Value::from(list).to_string()
}

/// Runs one scripted scenario and returns its trace rows.
#[wasm_bindgen]
pub fn scenario_trace(name: &str) -> String {
    let Some(s) = scenarios::all().into_iter().find(|s| s.name == name) else {
        return error(format!("no scenario `{name}`"));
    };
    let out = s.run();
    let rows: Vec<Value> = out
        .trace
        .as_deref()
        .unwrap_or(&[])
        .iter()
        .map(|r| json!([r.time.as_nanos(), out.node_names[r.node.0 as usize], r.event, r.job.0, r.seq.0, r.detail()]))
        .collect();
    json!({
        "name": s.name,
        "summary": s.summary,
        "ok": out.ok() && out.exactly_once(),
        "path": s.match_path(&out).is_ok(),
        "jct_ns": out.report.mean_jct_ns,
        "rows": rows,
    })
    .to_string()
}

/// Mean JCT and utilization of every policy on a small mixed A/B workload.
#[wasm_bindgen]
pub fn compare_policies(jobs: u32, workers: u32, packets: u32, loss: f64, seeds: u32) -> String {
    if !(1..=8).contains(&jobs) || !(2..=16).contains(&workers) || !(1..=2_000).contains(&packets) || !(1..=5).contains(&seeds) {
        return error("keep to 1-8 jobs, 2-16 workers, 1-2000 packets per partition and 1-5 seeds");
    }
    let cfg = ScenarioConfig {
        job_list: (0..jobs)
            .map(|i| JobConfig {
                model: ModelRef::Preset(if i % 2 == 0 { "dnnA" } else { "dnnB" }.into()),
                workers,
                servers: None,
                partition_packets: Some([packets; 4]),
                priority: None,
                start_ns: None,
                start_offsets_ns: None,
            })
            .collect(),
        // Scaled with the gradients so the pool stays contended.
        pool_size: Some((packets * jobs).max(4)),
        loss_prob: loss,
        iterations: 2,
        warmup: 1,
        ..Default::default()
    };
    let policies = [
        AllocationPolicy::EsaPreemptive,
        AllocationPolicy::AtpFcfs,
        AllocationPolicy::SwitchMlStatic,
        AllocationPolicy::AlwaysPreempt,
        AllocationPolicy::CoinFlip(0.5),
    ];
    let seeds: Vec<u64> = (1..=seeds as u64).collect();
    let outcomes = match run_matrix(&cfg, &policies, &seeds, &RunOptions::default()) {
        Ok(o) => o,
        Err(e) => return error(e),
    };
    let reports: Vec<_> = outcomes.iter().map(|o| &o.report).collect();
    let cmp = Comparison::from_reports(&reports, Some("esa")).expect("esa ran");
    let rows: Vec<Value> = cmp
        .rows
        .iter()
        .map(|r| json!({ "policy": r.policy, "jct_ms": r.mean_jct_ns / 1e6, "util": r.mean_utilization, "speedup": r.jct_speedup, "wins": r.reference_wins, "seeds": r.paired_seeds }))
        .collect();
    json!({ "rows": rows, "pool": cfg.pool_size }).to_string()
}
