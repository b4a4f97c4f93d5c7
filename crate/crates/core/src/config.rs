//! Scenario files: JSON, every field optional with the defaults below.
//!
//! ```json
//! { "preset": "dnnA", "jobs": 8, "workers_per_job": 8, "policy": "esa", "seeds": [1, 2, 3] }
//! ```

use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::priority::QuantScale;
use crate::switchd::AllocationPolicy;
use crate::types::{MAX_JOB_WORKERS, MAX_LEVEL_FANIN};
use crate::workload::DnnModel;
use crate::SimTime;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("invalid `{key}`: {msg}")]
    Invalid { key: String, msg: String },
}

fn invalid(key: impl Into<String>, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.into(), msg: msg.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    /// Every worker and PS hangs off one switch.
    #[default]
    Single,
    /// Rack switches under one root; PSes attach to the root.
    TwoLevel,
}

/// A model given by preset name or spelled out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Preset(String),
    Custom { name: String, partition_bytes: u64, comp_time_ns: u64, comm_comp_ratio: f64 },
}

impl ModelRef {
    pub fn resolve(&self) -> Option<DnnModel> {
        match self {
            ModelRef::Preset(p) => DnnModel::preset(p),
            ModelRef::Custom { name, partition_bytes, comp_time_ns, comm_comp_ratio } => Some(DnnModel {
                name: name.clone(),
                partition_bytes: *partition_bytes,
                comp_time: SimTime::from_nanos(*comp_time_ns),
                comm_comp_ratio: *comm_comp_ratio,
            }),
        }
    }
}

/// One explicitly listed job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobConfig {
    pub model: ModelRef,
    pub workers: u32,
    /// Server indices hosting the workers; contiguous placement when absent.
    #[serde(default)]
    pub servers: Option<Vec<u32>>,
    /// Packets per partition in push order, overriding the model size.
    #[serde(default)]
    pub partition_packets: Option<[u32; 4]>,
    #[serde(default)]
    pub priority: Option<u8>,
    #[serde(default)]
    pub start_ns: Option<u64>,
    /// Per-worker first-iteration offsets, replacing jitter.
    #[serde(default)]
    pub start_offsets_ns: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    /// `dnnA`, `dnnB` or `mixAB` (alternating A and B).
    pub preset: String,
    pub jobs: u32,
    pub workers_per_job: u32,
    /// Explicit jobs; when non-empty, `preset`, `jobs` and `workers_per_job` are ignored.
    pub job_list: Vec<JobConfig>,
    pub topology: TopologyKind,
    pub rack_size: u32,
    #[serde(serialize_with = "ser_policy", deserialize_with = "de_policy")]
    pub policy: AllocationPolicy,
    pub memory_bytes: u64,
    pub packet_bytes: u32,
    pub switchml_packet_bytes: u32,
    /// Switch memory per aggregator; defaults to the packet size in use.
    pub aggregator_bytes: Option<u32>,
    /// Explicit pool size, overriding the memory division.
    pub pool_size: Option<u32>,
    pub bandwidth_bps: u64,
    pub link_latency_ns: u64,
    pub switch_delay_ns: u64,
    pub loss_prob: f64,
    pub seeds: Vec<u64>,
    pub iterations: u32,
    pub warmup: u32,
    pub quant: QuantScale,
    /// Initial sending window.
    pub window_bytes: u32,
    /// Cap for window growth; unset keeps the window static.
    pub max_window_bytes: Option<u32>,
    pub rto_min_ns: u64,
    pub start_spread_ns: u64,
    pub jitter_ns: u64,
    /// Wire size of header-only packets (reminders, queries).
    pub control_bytes: u32,
    pub horizon_ms: f64,
    pub out_dir: Option<String>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            name: "scenario".into(),
            preset: "dnnA".into(),
            jobs: 8,
            workers_per_job: 8,
            job_list: Vec::new(),
            topology: TopologyKind::Single,
            rack_size: 8,
            policy: AllocationPolicy::EsaPreemptive,
            memory_bytes: 5_000_000,
            packet_bytes: 306,
            switchml_packet_bytes: 180,
            aggregator_bytes: None,
            pool_size: None,
            bandwidth_bps: 100_000_000_000,
            link_latency_ns: 5_000,
            switch_delay_ns: 0,
            loss_prob: 0.0,
            seeds: vec![1],
            iterations: 10,
            warmup: 2,
            quant: QuantScale { k: 16.0, p_ref: 64.0, ..Default::default() },
            window_bytes: 60_000,
            max_window_bytes: None,
            rto_min_ns: 1_000_000,
            start_spread_ns: 1_000_000,
            jitter_ns: 300_000,
            control_bytes: 64,
            horizon_ms: 10_000.0,
            out_dir: None,
        }
    }
}

fn ser_policy<S: Serializer>(p: &AllocationPolicy, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&p.name())
}

fn de_policy<'de, D: Deserializer<'de>>(d: D) -> Result<AllocationPolicy, D::Error> {
    let s = String::deserialize(d)?;
    AllocationPolicy::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown policy `{s}`")))
}

/// A job after preset expansion and placement.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedJob {
    pub model: DnnModel,
    pub servers: Vec<u32>,
    pub partition_packets: Option<[u32; 4]>,
    pub priority: Option<u8>,
    pub start: Option<SimTime>,
    pub start_offsets: Option<Vec<SimTime>>,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Packet size used under `policy`; static partitioning runs with the smaller frame.
    pub fn packet_bytes_for(&self, policy: AllocationPolicy) -> u32 {
        match policy {
            AllocationPolicy::SwitchMlStatic => self.switchml_packet_bytes,
            _ => self.packet_bytes,
        }
    }

    pub fn pool_size_for(&self, policy: AllocationPolicy) -> u32 {
        if let Some(p) = self.pool_size {
            return p;
        }
        let footprint = self.aggregator_bytes.unwrap_or_else(|| self.packet_bytes_for(policy));
        (self.memory_bytes / footprint as u64) as u32
    }

    pub fn window_packets_for(&self, policy: AllocationPolicy) -> u32 {
        (self.window_bytes / self.packet_bytes_for(policy)).max(1)
    }

    pub fn max_window_packets_for(&self, policy: AllocationPolicy) -> u32 {
        let cap = self.max_window_bytes.map_or(0, |b| b / self.packet_bytes_for(policy));
        cap.max(self.window_packets_for(policy))
    }

    /// Expands presets and assigns servers.
    pub fn resolve_jobs(&self) -> Result<Vec<ResolvedJob>, ConfigError> {
        let mut out = Vec::new();
        if self.job_list.is_empty() {
            let models: Vec<DnnModel> = match self.preset.as_str() {
                "mixAB" => (0..self.jobs).map(|i| if i % 2 == 0 { DnnModel::dnn_a() } else { DnnModel::dnn_b() }).collect(),
                p => {
                    let m = DnnModel::preset(p).ok_or_else(|| invalid("preset", format!("unknown preset `{p}` (dnnA, dnnB, mixAB)")))?;
                    vec![m; self.jobs as usize]
                }
            };
            let n = self.workers_per_job;
            for (i, model) in models.into_iter().enumerate() {
                let first = i as u32 * n;
                out.push(ResolvedJob {
                    model,
                    servers: (first..first + n).collect(),
                    partition_packets: None,
                    priority: None,
                    start: None,
                    start_offsets: None,
                });
            }
        } else {
            let mut next = 0u32;
            for (i, j) in self.job_list.iter().enumerate() {
                let model = j.model.resolve().ok_or_else(|| invalid(format!("job_list[{i}].model"), "unknown model"))?;
                let servers = match &j.servers {
                    Some(s) => s.clone(),
                    None => (next..next + j.workers).collect(),
                };
                next = next.max(servers.iter().copied().max().map_or(0, |m| m + 1));
                out.push(ResolvedJob {
                    model,
                    servers,
                    partition_packets: j.partition_packets,
                    priority: j.priority,
                    start: j.start_ns.map(SimTime::from_nanos),
                    start_offsets: j.start_offsets_ns.as_ref().map(|v| v.iter().map(|&n| SimTime::from_nanos(n)).collect()),
                });
            }
        }
        Ok(out)
    }

    /// Checks every field; errors name the offending key.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.policy.is_valid() {
            return Err(invalid("policy", "coin-flip probability must lie in [0, 1]"));
        }
        if self.job_list.is_empty() {
            if self.jobs == 0 {
                return Err(invalid("jobs", "must be at least 1"));
            }
            if self.workers_per_job == 0 {
                return Err(invalid("workers_per_job", "must be at least 1"));
            }
        }
        for (key, v) in [
            ("memory_bytes", self.memory_bytes),
            ("packet_bytes", self.packet_bytes as u64),
            ("switchml_packet_bytes", self.switchml_packet_bytes as u64),
            ("bandwidth_bps", self.bandwidth_bps),
            ("window_bytes", self.window_bytes as u64),
            ("rto_min_ns", self.rto_min_ns),
            ("iterations", self.iterations as u64),
            ("control_bytes", self.control_bytes as u64),
            ("rack_size", self.rack_size as u64),
        ] {
            if v == 0 {
                return Err(invalid(key, "must be positive"));
            }
        }
        if self.switchml_packet_bytes != 180 {
            return Err(invalid("switchml_packet_bytes", "static partitioning uses 180-byte packets"));
        }
        if self.pool_size == Some(0) || self.aggregator_bytes == Some(0) {
            return Err(invalid(if self.pool_size == Some(0) { "pool_size" } else { "aggregator_bytes" }, "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.loss_prob) {
            return Err(invalid("loss_prob", "must lie in [0, 1]"));
        }
        if !self.quant.is_valid() {
            return Err(invalid("quant", "k and p_ref must be positive and finite"));
        }
        if !(self.horizon_ms > 0.0) {
            return Err(invalid("horizon_ms", "must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "need at least one seed"));
        }
        if self.window_bytes < self.packet_bytes {
            return Err(invalid("window_bytes", "smaller than one packet"));
        }
        if self.max_window_bytes.is_some_and(|m| m < self.window_bytes) {
            return Err(invalid("max_window_bytes", "below window_bytes"));
        }
        let jobs = self.resolve_jobs()?;
        let mut used = std::collections::HashSet::new();
        for (i, j) in jobs.iter().enumerate() {
            let key = if self.job_list.is_empty() { "workers_per_job".to_string() } else { format!("job_list[{i}].workers") };
            let n = j.servers.len();
            if n == 0 {
                return Err(invalid(key, "a job needs at least one worker"));
            }
            if n > MAX_JOB_WORKERS {
                return Err(invalid(key, format!("{n} workers exceeds the per-job limit of {MAX_JOB_WORKERS}")));
            }
            match self.topology {
                TopologyKind::Single => {
                    if n > MAX_LEVEL_FANIN {
                        return Err(invalid(key, format!("fan-in {n} exceeds the 32-bit bitmap width")));
                    }
                }
                TopologyKind::TwoLevel => {
                    if self.rack_size as usize > MAX_LEVEL_FANIN {
                        return Err(invalid("rack_size", "rack fan-in exceeds the 32-bit bitmap width"));
                    }
                    let mut racks: Vec<u32> = j.servers.iter().map(|s| s / self.rack_size).collect();
                    racks.sort_unstable();
                    racks.dedup();
                    if racks.len() > MAX_LEVEL_FANIN {
                        return Err(invalid(key, "second-level fan-in exceeds the 32-bit bitmap width"));
                    }
                }
            }
            if !self.job_list.is_empty() {
                let jc = &self.job_list[i];
                if jc.workers as usize != n {
                    return Err(invalid(format!("job_list[{i}].servers"), "length differs from `workers`"));
                }
                if let Some(pp) = jc.partition_packets {
                    if pp.iter().sum::<u32>() == 0 {
                        return Err(invalid(format!("job_list[{i}].partition_packets"), "no packets"));
                    }
                }
                if let Some(offs) = &jc.start_offsets_ns {
                    if offs.len() != n {
                        return Err(invalid(format!("job_list[{i}].start_offsets_ns"), "one offset per worker"));
                    }
                }
            }
            if j.model.partition_bytes == 0 || j.model.comp_time == SimTime::ZERO || !(j.model.comm_comp_ratio > 0.0) {
                return Err(invalid(format!("job_list[{i}].model"), "sizes, times and ratio must be positive"));
            }
            for &s in &j.servers {
                if !used.insert(s) {
                    return Err(invalid(format!("job_list[{i}].servers"), format!("server {s} already hosts a worker")));
                }
            }
        }
        {
            let policy = self.policy;
            let pool = self.pool_size_for(policy);
            if pool == 0 {
                return Err(invalid("memory_bytes", "smaller than one aggregator"));
            }
            if policy == AllocationPolicy::SwitchMlStatic && pool < jobs.len() as u32 {
                return Err(invalid("memory_bytes", "too small for one static partition per job"));
            }
        }
        Ok(())
    }

    pub fn rto_min(&self) -> SimTime {
        SimTime::from_nanos(self.rto_min_ns)
    }

    pub fn horizon(&self) -> SimTime {
        SimTime::from_secs_f64(self.horizon_ms * 1e-3)
    }
}

/// Parses `a..b` (inclusive), `a,b,c` or a single seed.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, ConfigError> {
    let bad = || invalid("seeds", format!("cannot parse `{s}`; use 3, 1..5 or 1,4,9"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if b < a {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ScenarioConfig::from_json(r#"{"preset": "dnnA", "jobs": 1}"#).unwrap();
        assert_eq!(c.memory_bytes, 5_000_000);
        assert_eq!(c.packet_bytes, 306);
        assert_eq!(c.link_latency_ns, 5_000);
        assert_eq!(c.window_packets_for(c.policy), 196);
        assert_eq!(c.pool_size_for(AllocationPolicy::EsaPreemptive), 16_339);
        assert_eq!(c.pool_size_for(AllocationPolicy::SwitchMlStatic), 27_777);
        assert_eq!(c.resolve_jobs().unwrap().len(), 1);
    }

    #[test]
    fn fan_in_over_32_rejected() {
        let e = ScenarioConfig::from_json(r#"{"jobs": 1, "workers_per_job": 40}"#).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("workers_per_job") && msg.contains("bitmap"), "{msg}");
    }

    #[test]
    fn switchml_frame_is_fixed() {
        let e = ScenarioConfig::from_json(r#"{"switchml_packet_bytes": 306}"#).unwrap_err();
        assert!(e.to_string().contains("switchml_packet_bytes"));
        let c = ScenarioConfig::from_json(r#"{"policy": "switchml"}"#).unwrap();
        assert_eq!(c.packet_bytes_for(c.policy), 180);
    }

    #[test]
    fn overlapping_servers_rejected() {
        let text = r#"{"job_list": [
            {"model": "dnnA", "workers": 2, "servers": [0, 1]},
            {"model": "dnnB", "workers": 2, "servers": [1, 2]}]}"#;
        let e = ScenarioConfig::from_json(text).unwrap_err();
        assert!(e.to_string().contains("job_list[1].servers"), "{e}");
    }

    #[test]
    fn unknown_keys_and_values() {
        assert!(ScenarioConfig::from_json(r#"{"jobz": 3}"#).is_err());
        assert!(ScenarioConfig::from_json(r#"{"policy": "lifo"}"#).is_err());
        let e = ScenarioConfig::from_json(r#"{"loss_prob": 2.0}"#).unwrap_err();
        assert!(e.to_string().contains("loss_prob"));
        let e = ScenarioConfig::from_json(r#"{"preset": "dnnC"}"#).unwrap_err();
        assert!(e.to_string().contains("preset"));
    }

    #[test]
    fn mix_alternates() {
        let c = ScenarioConfig::from_json(r#"{"preset": "mixAB", "jobs": 4}"#).unwrap();
        let names: Vec<_> = c.resolve_jobs().unwrap().into_iter().map(|j| j.model.name).collect();
        assert_eq!(names, ["dnnA", "dnnB", "dnnA", "dnnB"]);
    }

    #[test]
    fn json_round_trip() {
        let c = ScenarioConfig { policy: AllocationPolicy::CoinFlip(0.5), ..Default::default() };
        let back = ScenarioConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn seed_ranges() {
        assert_eq!(parse_seeds("1..3").unwrap(), vec![1, 2, 3]);
        assert_eq!(parse_seeds("4,9").unwrap(), vec![4, 9]);
        assert_eq!(parse_seeds("7").unwrap(), vec![7]);
        assert!(parse_seeds("5..1").is_err());
    }
}
