use ina_sim::config::{JobConfig, ModelRef};
use ina_sim::sim::{run_once, RunOptions};
use ina_sim::{AllocationPolicy, ScenarioConfig};

fn small(policy: AllocationPolicy, packets: u32) -> ScenarioConfig {
    ScenarioConfig {
        job_list: (0..2)
            .map(|_| JobConfig {
                model: ModelRef::Preset("dnnA".into()),
                workers: 4,
                servers: None,
                partition_packets: Some([packets; 4]),
                priority: None,
                start_ns: None,
                start_offsets_ns: None,
            })
            .collect(),
        policy,
        iterations: 2,
        warmup: 1,
        ..Default::default()
    }
}

fn run(cfg: &ScenarioConfig, seed: u64) -> ina_sim::sim::RunReport {
    let out = run_once(cfg, seed, RunOptions { delivery_log: true, ..Default::default() }).unwrap();
    assert!(out.ok() && out.exactly_once(), "{:?}", out.failure);
    out.report
}

#[test]
fn jct_does_not_drop_as_loss_rises() {
    for seed in 1..=4 {
        let mut last = 0.0;
        for loss in [0.0, 0.001, 0.01, 0.05] {
            let cfg = ScenarioConfig { loss_prob: loss, ..small(AllocationPolicy::EsaPreemptive, 400) };
            let jct = run(&cfg, seed).mean_jct_ns;
            assert!(jct >= last, "seed {seed} loss {loss}: {jct} < {last}");
            last = jct;
        }
    }
}

#[test]
fn identical_jobs_with_ample_memory_finish_alike() {
    let cfg = ScenarioConfig { jitter_ns: 0, start_spread_ns: 0, ..small(AllocationPolicy::EsaPreemptive, 2_000) };
    let r = run(&cfg, 3);
    let per_job: Vec<f64> = r.jct.as_ref().unwrap().per_job.values().copied().collect();
    assert_eq!(per_job.len(), 2);
    assert!((per_job[0] - per_job[1]).abs() < 1_000.0, "{per_job:?}");
    assert_eq!(r.counters.reminders(), 0);
}

/// Job 0 parks a fragment in the only aggregator while waiting for a worker
/// that starts 20 ms late, so every gradient of job 1 is forwarded to its PS.
#[test]
fn ps_fallback_costs_utilization() {
    let job = |workers: u32, offsets: Vec<u64>| JobConfig {
        model: ModelRef::Preset("dnnA".into()),
        workers,
        servers: None,
        partition_packets: Some([500; 4]),
        priority: None,
        start_ns: Some(0),
        start_offsets_ns: Some(offsets),
    };
    let cfg = |pool: Option<u32>| ScenarioConfig {
        job_list: vec![job(2, vec![0, 20_000_000]), job(4, vec![1_000; 4])],
        policy: AllocationPolicy::AtpFcfs,
        pool_size: pool,
        iterations: 1,
        warmup: 0,
        jitter_ns: 0,
        ..Default::default()
    };
    let util = |r: &ina_sim::sim::RunReport| r.utilization.as_ref().unwrap().per_job[&ina_sim::types::JobId(1)];
    let starved = run(&cfg(Some(1)), 1);
    let ample = run(&cfg(None), 1);
    assert!(starved.counters.forwarded_to_ps >= 4 * 2_000, "{:?}", starved.counters);
    assert!(util(&starved) < util(&ample), "{} vs {}", util(&starved), util(&ample));
    assert!(util(&starved) > 0.0 && util(&ample) <= 1.0);
}

#[test]
fn same_config_and_seed_give_the_same_digest() {
    for policy in [
        AllocationPolicy::EsaPreemptive,
        AllocationPolicy::AtpFcfs,
        AllocationPolicy::SwitchMlStatic,
        AllocationPolicy::AlwaysPreempt,
        AllocationPolicy::CoinFlip(0.5),
    ] {
        let cfg = ScenarioConfig { loss_prob: 0.01, ..small(policy, 300) };
        let a = run(&cfg, 9);
        let b = run(&cfg, 9);
        assert_eq!(a.digest, b.digest, "{policy:?}");
        assert_eq!(a.mean_jct_ns, b.mean_jct_ns);
        assert_ne!(a.digest, run(&cfg, 10).digest, "{policy:?}: seed should matter");
    }
}
