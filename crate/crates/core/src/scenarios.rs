//! Scripted micro-scenarios: the two walkthroughs of preemption and the
//! reminder, and one run per packet-loss case. Each is a tiny config with
//! fixed start offsets, fixed priorities and optional scripted drops, so its
//! trace is fully determined.

use crate::config::{JobConfig, ModelRef, ScenarioConfig};
use crate::sim::{Endpoint, RunOptions, RunOutcome, ScriptedDrop, Simulation};
use crate::switchd::{agg_index, AllocationPolicy};
use crate::types::{JobId, PacketKind, SeqNum};

const US: u64 = 1_000;
const LOW: u8 = 10;
const HIGH: u8 = 200;

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: &'static str,
    pub summary: &'static str,
    pub config: ScenarioConfig,
    pub drops: Vec<ScriptedDrop>,
    /// Trace events that must appear in this order, as `(node, event, job, seq)`.
    pub expected_path: Vec<(&'static str, &'static str, u32, u32)>,
}

impl Scenario {
    /// Runs with tracing, delivery logging and invariant checks on.
    pub fn run(&self) -> RunOutcome {
        let opts = RunOptions { keep_trace: true, delivery_log: true, check_invariants: true, drops: self.drops.clone() };
        Simulation::new(&self.config, self.config.policy, 1, opts).expect("scenario config is valid").run()
    }

    /// Index in the trace of each expected step, or the first step that is missing.
    pub fn match_path(&self, out: &RunOutcome) -> Result<Vec<usize>, String> {
        let trace = out.trace.as_deref().unwrap_or(&[]);
        let mut at = 0;
        let mut hits = Vec::new();
        for &(node, event, job, seq) in &self.expected_path {
            let found = trace[at..].iter().position(|r| {
                r.event == event && r.job.0 == job && r.seq.0 == seq && out.node_names[r.node.0 as usize] == node
            });
            match found {
                Some(i) => {
                    hits.push(at + i);
                    at += i + 1;
                }
                None => return Err(format!("step {node} {event} job {job} seq {seq} not found after trace row {at}")),
            }
        }
        Ok(hits)
    }
}

fn job(workers: u32, fragments: u32, priority: u8, offsets_us: &[u64]) -> JobConfig {
    assert_eq!(offsets_us.len(), workers as usize);
    JobConfig {
        model: ModelRef::Preset("dnnA".into()),
        workers,
        servers: None,
        partition_packets: Some([fragments, 0, 0, 0]),
        priority: Some(priority),
        start_ns: Some(0),
        start_offsets_ns: Some(offsets_us.iter().map(|&u| u * US).collect()),
    }
}

fn base(jobs: Vec<JobConfig>, pool: u32) -> ScenarioConfig {
    ScenarioConfig {
        name: String::new(),
        job_list: jobs,
        policy: AllocationPolicy::EsaPreemptive,
        pool_size: Some(pool),
        iterations: 1,
        warmup: 0,
        start_spread_ns: 0,
        jitter_ns: 0,
        horizon_ms: 100.0,
        ..Default::default()
    }
}

/// Smallest pool in which job 1's only fragment shares a slot with job 0's
/// seq 0, while job 0's seqs `1..fragments` all get distinct slots of their own.
fn colliding_pool(fragments: u32) -> u32 {
    (2..4096)
        .find(|&p| {
            let target = agg_index(JobId(0), SeqNum(0), p);
            if agg_index(JobId(1), SeqNum(0), p) != target {
                return false;
            }
            let mut used = vec![target];
            for s in 1..fragments {
                let i = agg_index(JobId(0), SeqNum(s), p);
                if used.contains(&i) {
                    return false;
                }
                used.push(i);
            }
            true
        })
        .expect("some pool size separates the fragments")
}

/// Preemption walkthrough: W1 and W2 of job 0 share an aggregator, job 1
/// (higher priority) takes it over and finishes on the switch, W3 and W4
/// re-allocate, and a reminder brings their partial to the PS, which merges
/// and multicasts.
pub fn preemption_walkthrough() -> Scenario {
    let cfg = base(vec![job(4, 1, LOW, &[0, 50, 200, 250]), job(2, 1, HIGH, &[100, 150])], 1);
    Scenario {
        name: "preemption",
        summary: "priority preemption splits a fragment between switch and PS",
        config: ScenarioConfig { name: "preemption".into(), ..cfg },
        drops: vec![],
        expected_path: vec![
            ("sw0", "ALLOC", 0, 0),
            ("sw0", "AGGR", 0, 0),
            ("sw0", "PREEMPT_SWAP", 1, 0),
            ("ps0", "PS_ENTRY", 0, 0),
            ("sw0", "AGGR", 1, 0),
            ("sw0", "COMPLETE_MULTICAST", 1, 0),
            ("w4", "RESULT", 1, 0),
            ("w5", "RESULT", 1, 0),
            ("sw0", "ALLOC", 0, 0),
            ("sw0", "AGGR", 0, 0),
            ("w0", "REMINDER", 0, 0),
            ("ps0", "WORKER_REMINDER", 0, 0),
            ("sw0", "REMINDER_HIT", 0, 0),
            ("ps0", "PS_MERGE", 0, 0),
            ("ps0", "PS_MULTICAST", 0, 0),
            ("w0", "RESULT", 0, 0),
            ("w3", "RESULT", 0, 0),
        ],
    }
}

/// Reminder walkthrough: job 0 has three workers. W1's first fragment fails
/// to win the aggregator and goes to the PS; W2 and W3 then occupy the slot
/// and wait. Later fragments finish on the switch, the resulting dupACKs
/// prompt a reminder, and the switch hands over the waiting partial.
pub fn reminder_walkthrough() -> Scenario {
    let frags = 4;
    let cfg = base(vec![job(3, frags, LOW, &[2, 20, 22]), job(2, 1, HIGH, &[0, 10])], colliding_pool(frags));
    Scenario {
        name: "reminder",
        summary: "a dupACK-driven reminder frees an aggregator that waits for a diverted gradient",
        config: ScenarioConfig { name: "reminder".into(), ..cfg },
        drops: vec![],
        expected_path: vec![
            ("sw0", "ALLOC", 1, 0),
            ("sw0", "DOWNGRADE", 1, 0),
            ("sw0", "FWD_PS", 0, 0),
            ("ps0", "PS_ENTRY", 0, 0),
            ("sw0", "COMPLETE_MULTICAST", 1, 0),
            ("sw0", "ALLOC", 0, 0),
            ("sw0", "AGGR", 0, 0),
            ("sw0", "COMPLETE_MULTICAST", 0, 3),
            ("w0", "REMINDER", 0, 0),
            ("ps0", "WORKER_REMINDER", 0, 0),
            ("sw0", "REMINDER_HIT", 0, 0),
            ("ps0", "PS_MERGE", 0, 0),
            ("ps0", "PS_MULTICAST", 0, 0),
            ("w0", "RESULT", 0, 0),
        ],
    }
}

/// The five packet-loss cases plus the all-workers variant of case 2
/// (numbered 6 here).
pub fn loss_case(case: u32) -> Scenario {
    let frags = 4;
    let w = |local: u16| Endpoint::Worker { job: 0, local };
    match case {
        1 | 2 | 6 => {
            // One job, no collisions anywhere.
            let cfg = base(vec![job(4, frags, LOW, &[0, 1, 2, 3])], 4096);
            let (name, summary, drops) = match case {
                1 => (
                    "loss-1",
                    "a gradient is lost on its way to the switch",
                    vec![ScriptedDrop::once(PacketKind::Gradient, JobId(0), SeqNum(1)).from(w(2))],
                ),
                2 => (
                    "loss-2",
                    "one branch of a result multicast is lost",
                    vec![ScriptedDrop::once(PacketKind::Result, JobId(0), SeqNum(1)).to(w(3))],
                ),
                _ => (
                    "loss-2-all",
                    "every branch of a result multicast is lost",
                    vec![ScriptedDrop::once(PacketKind::Result, JobId(0), SeqNum(1)).from(Endpoint::Switch(0)).times(4)],
                ),
            };
            let expected_path = match case {
                1 => vec![
                    ("w2", "DROP", 0, 1),
                    ("w0", "REMINDER", 0, 1),
                    ("ps0", "PS_ENTRY", 0, 1),
                    ("sw0", "REMINDER_HIT", 0, 1),
                    ("ps0", "PS_MERGE", 0, 1),
                    ("ps0", "PS_RETX_REQ", 0, 1),
                    ("w2", "RETRANSMIT", 0, 1),
                    ("ps0", "PS_MULTICAST", 0, 1),
                    ("w2", "RESULT", 0, 1),
                ],
                2 => vec![
                    ("sw0", "DROP", 0, 1),
                    ("w3", "REMINDER", 0, 1),
                    ("ps0", "PS_ENTRY", 0, 1),
                    ("ps0", "PS_QUERY", 0, 1),
                    ("w0", "QUERY_REPLY", 0, 1),
                    ("ps0", "PS_MULTICAST", 0, 1),
                    ("w3", "RESULT", 0, 1),
                ],
                _ => vec![
                    ("sw0", "DROP", 0, 1),
                    ("w0", "REMINDER", 0, 1),
                    ("ps0", "PS_ENTRY", 0, 1),
                    ("sw0", "REMINDER_MISS", 0, 1),
                    ("ps0", "PS_RETX_REQ", 0, 1),
                    ("w0", "RETRANSMIT", 0, 1),
                    ("ps0", "PS_MULTICAST", 0, 1),
                    ("w0", "RESULT", 0, 1),
                ],
            };
            Scenario { name, summary, config: ScenarioConfig { name: name.into(), ..cfg }, drops, expected_path }
        }
        3 => {
            // W1's seq 0 is refused by a higher-priority holder and the
            // diverted copy never reaches the PS.
            let cfg = base(vec![job(3, frags, LOW, &[2, 20, 22]), job(2, 1, HIGH, &[0, 10])], colliding_pool(frags));
            Scenario {
                name: "loss-3",
                summary: "a refused gradient is lost on its way to the PS",
                config: ScenarioConfig { name: "loss-3".into(), ..cfg },
                drops: vec![ScriptedDrop::once(PacketKind::PartialToPs, JobId(0), SeqNum(0))],
                expected_path: vec![
                    ("sw0", "FWD_PS", 0, 0),
                    ("sw0", "DROP", 0, 0),
                    ("w0", "REMINDER", 0, 0),
                    ("ps0", "PS_ENTRY", 0, 0),
                    ("sw0", "REMINDER_HIT", 0, 0),
                    ("ps0", "PS_MERGE", 0, 0),
                    ("ps0", "PS_RETX_REQ", 0, 0),
                    ("w0", "RETRANSMIT", 0, 0),
                    ("ps0", "PS_MULTICAST", 0, 0),
                    ("w0", "RESULT", 0, 0),
                ],
            }
        }
        4 | 5 => {
            // Job 1 preempts seq 0 of job 0 after W1 and W2 have aggregated.
            let cfg = base(vec![job(4, frags, LOW, &[0, 1, 20, 21]), job(2, 1, HIGH, &[10, 15])], colliding_pool(frags));
            let (name, summary, drop) = if case == 4 {
                ("loss-4", "the partial evicted by a preemption is lost on its way to the PS", ScriptedDrop::once(PacketKind::PartialToPs, JobId(0), SeqNum(0)))
            } else {
                ("loss-5", "after a preemption, another worker's gradient for the same fragment is lost", ScriptedDrop::once(PacketKind::Gradient, JobId(0), SeqNum(0)).from(w(2)))
            };
            let expected_path = if case == 4 {
                vec![
                    ("sw0", "PREEMPT_SWAP", 1, 0),
                    ("sw0", "DROP", 0, 0),
                    ("w0", "REMINDER", 0, 0),
                    ("ps0", "PS_ENTRY", 0, 0),
                    ("sw0", "REMINDER_HIT", 0, 0),
                    ("ps0", "PS_MERGE", 0, 0),
                    ("ps0", "PS_RETX_REQ", 0, 0),
                    ("w0", "RETRANSMIT", 0, 0),
                    ("ps0", "PS_MULTICAST", 0, 0),
                    ("w0", "RESULT", 0, 0),
                ]
            } else {
                vec![
                    ("sw0", "PREEMPT_SWAP", 1, 0),
                    ("w2", "DROP", 0, 0),
                    ("ps0", "PS_ENTRY", 0, 0),
                    ("ps0", "PS_MERGE", 0, 0),
                    ("w0", "REMINDER", 0, 0),
                    ("sw0", "REMINDER_HIT", 0, 0),
                    ("ps0", "PS_RETX_REQ", 0, 0),
                    ("w2", "RETRANSMIT", 0, 0),
                    ("ps0", "PS_MULTICAST", 0, 0),
                    ("w2", "RESULT", 0, 0),
                ]
            };
            Scenario { name, summary, config: ScenarioConfig { name: name.into(), ..cfg }, drops: vec![drop], expected_path }
        }
        _ => panic!("loss cases are numbered 1 to 6"),
    }
}

pub const LOSS_CASES: [u32; 6] = [1, 2, 3, 4, 5, 6];

/// Every scripted scenario, for listing and batch runs.
pub fn all() -> Vec<Scenario> {
    let mut v = vec![preemption_walkthrough(), reminder_walkthrough()];
    v.extend(LOSS_CASES.iter().map(|&c| loss_case(c)));
    v
}
