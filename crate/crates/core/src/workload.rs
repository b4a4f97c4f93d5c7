//! Two-layer DNN training jobs: partition push order, priority inputs,
//! and the JCT / utilization accounting done over finished iterations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::priority::{compute_priority, quantize_priority, JobProfile, QuantScale};
use crate::types::JobId;
use crate::SimTime;

/// Layers per model; each layer is split into two equal tensor partitions.
pub const LAYERS: u32 = 2;

/// Push order of the four partitions as `(layer, partition)`: the second
/// layer's first partition leaves first, then all of layer 1, then the rest
/// of layer 2.
pub const PUSH_ORDER: [(u32, u32); 4] = [(2, 1), (1, 1), (1, 2), (2, 2)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DnnModel {
    pub name: String,
    pub partition_bytes: u64,
    /// Computation time of one layer.
    pub comp_time: SimTime,
    /// Communication to computation ratio fed into the priority score.
    pub comm_comp_ratio: f64,
}

impl DnnModel {
    /// Communication-heavy: 4 MB partitions, 0.32 ms per layer.
    pub fn dnn_a() -> Self {
        DnnModel { name: "dnnA".into(), partition_bytes: 4_000_000, comp_time: SimTime::from_micros(320), comm_comp_ratio: 2.0 }
    }

    /// Computation-heavy: 2 MB partitions, 0.64 ms per layer.
    pub fn dnn_b() -> Self {
        DnnModel { name: "dnnB".into(), partition_bytes: 2_000_000, comp_time: SimTime::from_micros(640), comm_comp_ratio: 0.5 }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "dnnA" | "A" | "a" => Some(Self::dnn_a()),
            "dnnB" | "B" | "b" => Some(Self::dnn_b()),
            _ => None,
        }
    }

    pub fn packets_per_partition(&self, packet_bytes: u32) -> u32 {
        self.partition_bytes.div_ceil(packet_bytes as u64) as u32
    }
}

/// One job as the simulator sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct JobSpec {
    pub job: JobId,
    pub model: DnnModel,
    pub workers: u32,
    pub start_time: SimTime,
    pub iterations: u32,
    pub warmup: u32,
    /// Packets in each partition, indexed like [`PUSH_ORDER`].
    pub partition_packets: [u32; 4],
    /// Upper bound of the per-worker, per-iteration send jitter.
    pub jitter_bound: SimTime,
    /// Fixed wire priority, bypassing the score (scripted scenarios).
    pub fixed_priority: Option<u8>,
    /// Fixed per-worker start offsets, replacing jitter on the first iteration.
    pub start_offsets: Option<Vec<SimTime>>,
}

impl JobSpec {
    pub fn packets_per_iteration(&self) -> u32 {
        self.partition_packets.iter().sum()
    }

    pub fn total_iterations(&self) -> u32 {
        self.iterations + self.warmup
    }

    /// `(first_seq, count, layer)` for each partition of `iteration`, in push order.
    pub fn partition_runs(&self, iteration: u32) -> [(u32, u32, u32); 4] {
        let mut seq = iteration * self.packets_per_iteration();
        let mut runs = [(0, 0, 0); 4];
        for (i, &(layer, _)) in PUSH_ORDER.iter().enumerate() {
            runs[i] = (seq, self.partition_packets[i], layer);
            seq += self.partition_packets[i];
        }
        runs
    }

    /// Which partition (index into [`PUSH_ORDER`]) holds `seq`.
    pub fn partition_of(&self, seq: u32) -> usize {
        let mut off = seq % self.packets_per_iteration();
        for (i, &n) in self.partition_packets.iter().enumerate() {
            if off < n {
                return i;
            }
            off -= n;
        }
        unreachable!("offset inside an iteration")
    }

    /// Remaining communication plus computation, in seconds, when the
    /// partition at `part_index` of `iteration` is pushed.
    pub fn remaining_time(&self, iteration: u32, part_index: usize, packet_bytes: u32, bandwidth_bps: u64) -> f64 {
        let part_comm = |i: usize| self.partition_packets[i] as f64 * packet_bytes as f64 * 8.0 / bandwidth_bps as f64;
        let per_iter: f64 = (0..4).map(part_comm).sum::<f64>() + LAYERS as f64 * self.model.comp_time.as_secs_f64();
        let iters_left = self.total_iterations().saturating_sub(iteration) as f64;
        let done_in_iter: f64 = (0..part_index).map(part_comm).sum();
        (iters_left * per_iter - done_in_iter).max(crate::priority::MIN_REMAINING_TIME)
    }

    /// Wire priority for a partition push.
    pub fn priority(&self, iteration: u32, part_index: usize, packet_bytes: u32, bandwidth_bps: u64, scale: QuantScale) -> u8 {
        if let Some(p) = self.fixed_priority {
            return p;
        }
        let profile = JobProfile {
            job: self.job,
            remaining_time: self.remaining_time(iteration, part_index, packet_bytes, bandwidth_bps),
            layer_count: LAYERS,
            comm_overhead: self.model.comm_comp_ratio,
            comp_overhead: 1.0,
        };
        let layer = PUSH_ORDER[part_index].0;
        let raw = compute_priority(&profile, layer).expect("valid profile");
        quantize_priority(raw, scale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct IterationRecord {
    pub job: JobId,
    pub iteration: u32,
    pub comm_start: SimTime,
    pub comp_done: SimTime,
}

/// Per-worker communication activity within one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CommSample {
    pub job: JobId,
    pub iteration: u32,
    pub bytes: u64,
    pub active: SimTime,
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no completed iterations beyond warm-up")]
    Empty,
    #[error("job {0} has zero active communication time")]
    ZeroActiveTime(JobId),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JctSummary {
    /// Mean JCT per job in nanoseconds.
    pub per_job: BTreeMap<JobId, f64>,
    pub mean_ns: f64,
}

/// Mean JCT per job over iterations `>= warmup`, and the mean across jobs.
pub fn compute_jct(records: &[IterationRecord], warmup: u32) -> Result<JctSummary, MetricsError> {
    let mut acc: BTreeMap<JobId, (f64, u32)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.iteration >= warmup) {
        assert!(r.comp_done >= r.comm_start, "iteration finished before it started: {r:?}");
        let e = acc.entry(r.job).or_default();
        e.0 += (r.comp_done - r.comm_start).as_picos() as f64 / 1e3;
        e.1 += 1;
    }
    if acc.is_empty() {
        return Err(MetricsError::Empty);
    }
    let per_job: BTreeMap<JobId, f64> = acc.into_iter().map(|(j, (s, n))| (j, s / n as f64)).collect();
    let mean_ns = per_job.values().sum::<f64>() / per_job.len() as f64;
    Ok(JctSummary { per_job, mean_ns })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UtilSummary {
    pub per_job: BTreeMap<JobId, f64>,
    pub mean: f64,
}

/// Aggregation throughput per job (result bytes per second of active
/// communication, pooled over its workers) divided by the link rate.
pub fn compute_utilization(samples: &[CommSample], warmup: u32, bandwidth_bps: u64) -> Result<UtilSummary, MetricsError> {
    let mut acc: BTreeMap<JobId, (u64, u64)> = BTreeMap::new();
    for s in samples.iter().filter(|s| s.iteration >= warmup) {
        let e = acc.entry(s.job).or_default();
        e.0 += s.bytes;
        e.1 += s.active.as_picos();
    }
    if acc.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut per_job = BTreeMap::new();
    for (job, (bytes, active_ps)) in acc {
        if active_ps == 0 {
            return Err(MetricsError::ZeroActiveTime(job));
        }
        let tput = bytes as f64 * 8.0 / (active_ps as f64 * 1e-12);
        per_job.insert(job, (tput / bandwidth_bps as f64).min(1.0));
    }
    let mean = per_job.values().sum::<f64>() / per_job.len() as f64;
    Ok(UtilSummary { per_job, mean })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(model: DnnModel) -> JobSpec {
        let n = model.packets_per_partition(306);
        JobSpec {
            job: JobId(0),
            model,
            workers: 8,
            start_time: SimTime::ZERO,
            iterations: 10,
            warmup: 2,
            partition_packets: [n; 4],
            jitter_bound: SimTime::from_micros(300),
            fixed_priority: None,
            start_offsets: None,
        }
    }

    #[test]
    fn dnn_a_packet_count() {
        assert_eq!(DnnModel::dnn_a().packets_per_partition(306), 13_072);
        assert_eq!(DnnModel::dnn_b().packets_per_partition(306), 6_536);
    }

    #[test]
    fn theoretical_ratio_matches_presets() {
        // Four partitions at line rate against two layer computations.
        for m in [DnnModel::dnn_a(), DnnModel::dnn_b()] {
            let comm = 4.0 * m.partition_bytes as f64 * 8.0 / 100e9;
            let comp = 2.0 * m.comp_time.as_secs_f64();
            assert!((comm / comp - m.comm_comp_ratio).abs() < 1e-9);
        }
    }

    #[test]
    fn runs_follow_push_order() {
        let s = spec(DnnModel::dnn_a());
        let runs = s.partition_runs(1);
        assert_eq!(runs[0], (4 * 13_072, 13_072, 2));
        assert_eq!(runs[1].2, 1);
        assert_eq!(runs[3], (4 * 13_072 + 3 * 13_072, 13_072, 2));
        assert_eq!(s.partition_of(runs[2].0), 2);
        assert_eq!(s.partition_of(runs[3].0 + 13_071), 3);
    }

    #[test]
    fn front_layer_ranks_higher() {
        let s = spec(DnnModel::dnn_a());
        let scale = QuantScale { k: 16.0, p_ref: 64.0, ..Default::default() };
        let l2 = s.priority(0, 0, 306, 100_000_000_000, scale);
        let l1 = s.priority(0, 1, 306, 100_000_000_000, scale);
        assert!(l1 > l2);
        let b = spec(DnnModel::dnn_b());
        assert!(b.priority(0, 1, 306, 100_000_000_000, scale) < l1);
    }

    #[test]
    fn jct_excludes_warmup() {
        let rec = |it, a, b| IterationRecord { job: JobId(1), iteration: it, comm_start: SimTime::from_nanos(a), comp_done: SimTime::from_nanos(b) };
        let recs = [rec(0, 0, 1_000_000), rec(1, 0, 100), rec(2, 100, 400)];
        let s = compute_jct(&recs, 1).unwrap();
        assert_eq!(s.mean_ns, 200.0);
        assert_eq!(compute_jct(&recs, 5), Err(MetricsError::Empty));
    }

    #[test]
    fn line_rate_is_full_utilization() {
        let s = CommSample { job: JobId(0), iteration: 0, bytes: 12_500, active: SimTime::from_micros(1) };
        let u = compute_utilization(&[s], 0, 100_000_000_000).unwrap();
        assert!((u.mean - 1.0).abs() < 1e-12);
        let z = CommSample { active: SimTime::ZERO, ..s };
        assert_eq!(compute_utilization(&[z], 0, 100_000_000_000), Err(MetricsError::ZeroActiveTime(JobId(0))));
    }
}
