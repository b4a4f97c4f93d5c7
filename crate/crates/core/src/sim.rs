//! The event loop: builds the topology for a scenario, moves packets over
//! links, dispatches them to workers, switches and PSes, and drives the
//! training workload until every iteration of every job has finished.

use std::collections::VecDeque;
use std::time::Instant;

use fnv::{FnvHashMap, FnvHashSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{ConfigError, ScenarioConfig, TopologyKind};
use crate::endhost::{
    EntryStage, FragmentRun, IndexScheme, PsCounters, PsEvent, PsJobConfig, PsState, WorkerCounters, WorkerParams, WorkerState,
};
use crate::netsim::{rng_stream, EventQueue, Link, LinkId, NodeKind, RngPurpose, SendOutcome, Topology};
use crate::switchd::{AllocationPolicy, SwitchCounters, SwitchEvent, SwitchEventKind, SwitchJob, SwitchRole, SwitchState};
use crate::trace::{TraceRecord, Tracer};
use crate::types::{
    Dest, GradientPacket, JobId, NodeId, PacketKind, Payload, PsId, SeqNum, SwitchId, WorkerId, WorkerSet,
};
use crate::workload::{compute_jct, compute_utilization, CommSample, IterationRecord, JctSummary, JobSpec, UtilSummary};
use crate::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Action {
    LinkHead(u32),
    WorkerTimer(u32),
    PsTimer(u32),
    Push(u32),
    Comp1(u32),
    Comp2(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Worker(usize),
    Switch(usize),
    Ps(usize),
}

/// A node named by role, resolved once the topology exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endpoint {
    /// Worker `local` (its `WorkerId`) of job index `job`.
    Worker { job: u32, local: u16 },
    /// Switch by index; 0 is the root (or the only switch).
    Switch(u32),
    /// The PS of job index `job`.
    Ps(u32),
}

/// Drops matching packets at send time, regardless of the loss rate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedDrop {
    pub kind: PacketKind,
    pub job: Option<JobId>,
    pub seq: Option<SeqNum>,
    /// Sending end of the hop.
    pub from: Option<Endpoint>,
    /// Receiving end of the hop.
    pub to: Option<Endpoint>,
    /// Matching packets still to drop.
    pub remaining: u32,
}

impl ScriptedDrop {
    pub fn once(kind: PacketKind, job: JobId, seq: SeqNum) -> Self {
        ScriptedDrop { kind, job: Some(job), seq: Some(seq), from: None, to: None, remaining: 1 }
    }

    pub fn from(mut self, e: Endpoint) -> Self {
        self.from = Some(e);
        self
    }

    pub fn to(mut self, e: Endpoint) -> Self {
        self.to = Some(e);
        self
    }

    pub fn times(mut self, n: u32) -> Self {
        self.remaining = n;
        self
    }
}

#[derive(Debug, Clone)]
struct ActiveDrop {
    kind: PacketKind,
    job: Option<JobId>,
    seq: Option<SeqNum>,
    from: Option<NodeId>,
    to: Option<NodeId>,
    remaining: u32,
}

impl ActiveDrop {
    fn matches(&self, pkt: &GradientPacket, from: NodeId, to: NodeId) -> bool {
        self.remaining > 0
            && self.kind == pkt.header.kind
            && self.job.is_none_or(|j| j == pkt.header.job)
            && self.seq.is_none_or(|s| s == pkt.header.seq)
            && self.from.is_none_or(|n| n == from)
            && self.to.is_none_or(|n| n == to)
    }
}

/// Knobs that are not part of the scenario file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Keep trace records (the digest is always computed).
    pub keep_trace: bool,
    /// Count deliveries per (worker, seq) for exactly-once checks.
    pub delivery_log: bool,
    /// Check slot invariants and contribution conservation after every event.
    pub check_invariants: bool,
    pub drops: Vec<ScriptedDrop>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RunCounters {
    pub gradients_sent: u64,
    pub results_delivered: u64,
    pub duplicate_results: u64,
    pub alarms: u64,
    pub worker_reminders: u64,
    /// Worker reminders sent because the retransmission timer expired.
    pub worker_timeouts: u64,
    pub switch_reminders: u64,
    pub queries: u64,
    pub retransmits: u64,
    pub retransmit_requests: u64,
    pub preemptions: u64,
    pub downgrades: u64,
    pub forwarded_to_ps: u64,
    /// Partial aggregates the PSes received (preemptions, refusals, reminder flushes).
    pub ps_fallbacks: u64,
    pub ps_multicasts: u64,
    pub late_discarded: u64,
    pub switch_completions: u64,
    pub reminder_hits: u64,
    pub reminder_misses: u64,
    pub packets_dropped: u64,
    /// Occupied aggregators left when the run went quiet.
    pub stale_slots: u64,
}

impl RunCounters {
    /// Reminders of either kind.
    pub fn reminders(&self) -> u64 {
        self.worker_reminders + self.switch_reminders
    }

    /// Reminder, query and retransmit packets: zero on a clean run.
    pub fn recovery_packets(&self) -> u64 {
        self.reminders() + self.queries + self.retransmits + self.retransmit_requests
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub policy: String,
    pub seed: u64,
    pub jobs: u32,
    pub workers: u32,
    pub jct: Option<JctSummary>,
    pub mean_jct_ns: f64,
    pub utilization: Option<UtilSummary>,
    pub mean_utilization: f64,
    pub counters: RunCounters,
    pub digest: String,
    pub trace_records: u64,
    pub events: u64,
    pub sim_time_ns: u64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum RunFailure {
    /// Horizon reached or queue drained with undelivered fragments.
    Liveness { at_ns: u64, stuck: Vec<(JobId, WorkerId, SeqNum)> },
    /// A result or merge counted some worker twice or missed one.
    Alarms(u64),
    /// PS entries left after every job finished.
    Leak { ps_entries: usize },
    Invariant(String),
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunFailure::Liveness { at_ns, stuck } => {
                write!(f, "liveness failure at {at_ns}ns, {} workers stuck", stuck.len())?;
                if let Some((j, w, s)) = stuck.first() {
                    write!(f, " (job {j} worker {w} waiting for seq {s})")?;
                }
                Ok(())
            }
            RunFailure::Alarms(n) => write!(f, "{n} exactly-once alarms"),
            RunFailure::Leak { ps_entries } => write!(f, "{ps_entries} PS entries leaked"),
            RunFailure::Invariant(m) => write!(f, "invariant violated: {m}"),
        }
    }
}

pub struct RunOutcome {
    pub report: RunReport,
    pub failure: Option<RunFailure>,
    pub trace: Option<Vec<TraceRecord>>,
    pub node_names: Vec<String>,
    /// Per job, per worker, deliveries of each seq (when requested).
    pub deliveries: Option<Vec<Vec<Vec<u16>>>>,
    pub iterations: Vec<IterationRecord>,
}

impl RunOutcome {
    pub fn ok(&self) -> bool {
        self.failure.is_none()
    }

    /// True when every worker saw every seq of its job exactly once.
    pub fn exactly_once(&self) -> bool {
        self.deliveries.as_ref().is_some_and(|d| d.iter().flatten().flatten().all(|&n| n == 1))
            && self.report.counters.alarms == 0
    }

    pub fn write_trace_csv<W: std::io::Write>(&self, w: W) -> std::io::Result<()> {
        crate::trace::export_csv(self.trace.as_deref().unwrap_or(&[]), &self.node_names, w)
    }
}

#[derive(Debug, Clone, Default)]
struct AppState {
    iteration: u32,
    parts_left: [u32; 4],
    comp1_started: bool,
    comp1_done: bool,
    comp2_started: bool,
    comm_start: SimTime,
    comm_end: SimTime,
    finished: bool,
}

struct WorkerCtx {
    job: usize,
    local: u16,
    state: WorkerState,
    app: AppState,
    timer_at: Option<SimTime>,
}

struct JobCtx {
    spec: JobSpec,
    workers: Vec<usize>,
    ps: usize,
    iter_start: Vec<SimTime>,
    iter_done: Vec<(u32, SimTime)>,
}

struct SwitchCtx {
    state: SwitchState,
    /// Jobs whose gradients this switch aggregates first.
    level0: FnvHashSet<JobId>,
    /// Jobs whose rack results this switch aggregates.
    level1: FnvHashSet<JobId>,
    group_links: FnvHashMap<JobId, Vec<LinkId>>,
}

struct PsCtx {
    state: PsState,
    timer_at: Option<SimTime>,
}

/// One simulation instance: single-threaded and deterministic in `(config, policy, seed)`.
pub struct Simulation {
    policy: AllocationPolicy,
    seed: u64,
    packet_bytes: u32,
    control_bytes: u32,
    bandwidth_bps: u64,
    switch_delay: SimTime,
    quant: crate::priority::QuantScale,
    horizon: SimTime,
    topo: Topology,
    roles: Vec<Role>,
    names: Vec<String>,
    links: Vec<Link>,
    inflight: Vec<VecDeque<(SimTime, GradientPacket)>>,
    uplink: Vec<Option<LinkId>>,
    workers: Vec<WorkerCtx>,
    jobs: Vec<JobCtx>,
    switches: Vec<SwitchCtx>,
    pses: Vec<PsCtx>,
    queue: EventQueue<Action>,
    loss_rng: ChaCha8Rng,
    jitter_rng: ChaCha8Rng,
    opts: RunOptions,
    drops: Vec<ActiveDrop>,
    tracer: Tracer,
    deliveries: Option<Vec<Vec<Vec<u16>>>>,
    records: Vec<IterationRecord>,
    samples: Vec<CommSample>,
    dropped: u64,
    events: u64,
    failure: Option<RunFailure>,
    out: Vec<GradientPacket>,
    sw_events: Vec<SwitchEvent>,
    ps_events: Vec<PsEvent>,
    /// Per job: seqs whose contributions were deliberately duplicated (retransmits).
    relaxed: Vec<FnvHashSet<u32>>,
}

impl Simulation {
    pub fn new(cfg: &ScenarioConfig, policy: AllocationPolicy, seed: u64, opts: RunOptions) -> Result<Self, ConfigError> {
        let cfg_for_policy = ScenarioConfig { policy, ..cfg.clone() };
        cfg_for_policy.validate()?;
        let cfg = &cfg_for_policy;
        let resolved = cfg.resolve_jobs()?;
        let packet_bytes = cfg.packet_bytes_for(policy);
        let pool_size = cfg.pool_size_for(policy);
        let latency = SimTime::from_nanos(cfg.link_latency_ns);
        let mut start_rng = rng_stream(seed, RngPurpose::StartTime);
        let mut jitter_rng = rng_stream(seed, RngPurpose::Jitter);

        // Topology.
        let mut topo = Topology::default();
        let mut roles = Vec::new();
        let mut names = Vec::new();
        let mut switch_nodes = Vec::new();
        let root = topo.add_node(NodeKind::Switch);
        roles.push(Role::Switch(0));
        names.push("sw0".to_string());
        switch_nodes.push(root);

        let mut server_node: FnvHashMap<u32, NodeId> = FnvHashMap::default();
        let mut rack_switch: FnvHashMap<u32, NodeId> = FnvHashMap::default();
        let mut worker_count = 0usize;
        let mut servers_sorted: Vec<u32> = resolved.iter().flat_map(|j| j.servers.iter().copied()).collect();
        servers_sorted.sort_unstable();
        for &s in &servers_sorted {
            let attach = match cfg.topology {
                TopologyKind::Single => root,
                TopologyKind::TwoLevel => *rack_switch.entry(s / cfg.rack_size).or_insert_with(|| {
                    let n = topo.add_node(NodeKind::Switch);
                    roles.push(Role::Switch(switch_nodes.len()));
                    names.push(format!("sw{}", switch_nodes.len()));
                    switch_nodes.push(n);
                    topo.add_duplex(n, root);
                    n
                }),
            };
            let n = topo.add_node(NodeKind::Worker);
            roles.push(Role::Worker(worker_count));
            names.push(format!("w{s}"));
            worker_count += 1;
            topo.add_duplex(n, attach);
            server_node.insert(s, n);
        }
        let mut ps_nodes = Vec::new();
        for j in 0..resolved.len() {
            let n = topo.add_node(NodeKind::Ps);
            roles.push(Role::Ps(j));
            names.push(format!("ps{j}"));
            topo.add_duplex(n, root);
            ps_nodes.push(n);
        }
        topo.compute_routes();
        let links: Vec<Link> =
            topo.links.iter().map(|&(a, b)| Link::new(a, b, cfg.bandwidth_bps, latency, cfg.loss_prob)).collect();
        let mut uplink = vec![None; topo.node_count()];
        for (id, &(a, _)) in topo.links.iter().enumerate() {
            if !matches!(roles[a.0 as usize], Role::Switch(_)) {
                uplink[a.0 as usize] = Some(id);
            }
        }

        // Switches.
        let mut switches: Vec<SwitchCtx> = switch_nodes
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let mut coin = rng_stream(seed, RngPurpose::CoinFlip);
                coin.set_word_pos(i as u128 * (1 << 40));
                let coin_seed: u64 = coin.random();
                Ok(SwitchCtx {
                    state: SwitchState::new(SwitchId(i as u32), n, pool_size, policy, coin_seed)
                        .map_err(|e| ConfigError::Invalid { key: "memory_bytes".into(), msg: e.to_string() })?,
                    level0: FnvHashSet::default(),
                    level1: FnvHashSet::default(),
                    group_links: FnvHashMap::default(),
                })
            })
            .collect::<Result<_, ConfigError>>()?;
        let job_ids: Vec<JobId> = (0..resolved.len() as u32).map(JobId).collect();
        let partitions = SwitchState::equal_partitions(pool_size, &job_ids);
        if policy == AllocationPolicy::SwitchMlStatic {
            for sw in &mut switches {
                sw.state
                    .set_partitions(partitions.clone())
                    .map_err(|e| ConfigError::Invalid { key: "memory_bytes".into(), msg: e.to_string() })?;
            }
        }

        // A static partition is also the job's window: more in flight would
        // collide with its own earlier fragments.
        let part_cap = match policy {
            AllocationPolicy::SwitchMlStatic => partitions.values().map(|&(_, n)| n).min().unwrap_or(1).max(1),
            _ => u32::MAX,
        };
        let params = WorkerParams {
            window_pkts: cfg.window_packets_for(policy).min(part_cap),
            max_window_pkts: cfg.max_window_packets_for(policy).min(part_cap),
            packet_bytes,
            rto_min: cfg.rto_min(),
        };
        let mut jobs = Vec::new();
        let mut workers: Vec<Option<WorkerCtx>> = (0..worker_count).map(|_| None).collect();
        let mut pses = Vec::new();
        for (ji, rj) in resolved.iter().enumerate() {
            let job = JobId(ji as u32);
            let ps_node = ps_nodes[ji];
            let n = rj.servers.len();
            let full = WorkerSet::first_n(n);
            let nodes: Vec<NodeId> = rj.servers.iter().map(|s| server_node[s]).collect();

            // Racks of this job in server order, and each worker's position in its rack.
            let mut racks: Vec<u32> = Vec::new();
            let mut pos_in_rack: Vec<(usize, u32)> = Vec::new();
            let mut rack_counts: Vec<u32> = Vec::new();
            for &s in &rj.servers {
                let r = match cfg.topology {
                    TopologyKind::Single => 0,
                    TopologyKind::TwoLevel => s / cfg.rack_size,
                };
                let ri = match racks.iter().position(|&x| x == r) {
                    Some(i) => i,
                    None => {
                        racks.push(r);
                        rack_counts.push(0);
                        racks.len() - 1
                    }
                };
                pos_in_rack.push((ri, rack_counts[ri]));
                rack_counts[ri] += 1;
            }
            let two_level = cfg.topology == TopologyKind::TwoLevel && racks.len() > 1;
            let sw_of_rack = |ri: usize| -> usize {
                match cfg.topology {
                    TopologyKind::Single => 0,
                    TopologyKind::TwoLevel => roles_switch(&roles, rack_switch[&racks[ri]]),
                }
            };
            let mut reminder_targets = Vec::new();
            for ri in 0..racks.len() {
                let si = sw_of_rack(ri);
                let role = if two_level { SwitchRole::Leaf { rack_bit: 1 << ri } } else { SwitchRole::Root };
                switches[si].state.register_job(
                    job,
                    SwitchJob {
                        role,
                        fan_in: rack_counts[ri],
                        level: 0,
                        fanin_l1: rack_counts[ri],
                        fanin_l2: racks.len() as u32,
                        ps: ps_node,
                    },
                );
                switches[si].level0.insert(job);
                reminder_targets.push(switch_nodes[si]);
            }
            if two_level {
                let r = racks.len() as u32;
                switches[0].state.register_job(
                    job,
                    SwitchJob { role: SwitchRole::Root, fan_in: r, level: 1, fanin_l1: 0, fanin_l2: r, ps: ps_node },
                );
                switches[0].level1.insert(job);
                reminder_targets.push(switch_nodes[0]);
            }
            // Multicast fan-out per switch.
            for (si, sw) in switches.iter_mut().enumerate() {
                let is_leaf = cfg.topology == TopologyKind::TwoLevel && si != 0;
                let mut ls: Vec<LinkId> = Vec::new();
                for &wn in &nodes {
                    let Some(l) = topo.next_hop(switch_nodes[si], wn) else { continue };
                    if is_leaf && topo.links[l].1 != wn {
                        continue;
                    }
                    if !ls.contains(&l) {
                        ls.push(l);
                    }
                }
                if !ls.is_empty() {
                    sw.group_links.insert(job, ls);
                }
            }

            let index = match policy {
                AllocationPolicy::SwitchMlStatic => {
                    let (base, size) = partitions[&job];
                    IndexScheme::Partition { base, size }
                }
                _ => IndexScheme::Hash { pool: pool_size },
            };
            let mut global = Vec::new();
            for (local, &node) in nodes.iter().enumerate() {
                let (ri, pos) = pos_in_rack[local];
                let bitmap1 = if two_level { 1 << ri } else { 0 };
                let state =
                    WorkerState::new(WorkerId(local as u16), node, job, ps_node, full, 1 << pos, bitmap1, index, &params);
                let Role::Worker(gi) = roles[node.0 as usize] else { unreachable!() };
                workers[gi] = Some(WorkerCtx { job: ji, local: local as u16, state, app: AppState::default(), timer_at: None });
                global.push(gi);
            }

            let mut ps = PsState::new(PsId(ji as u32), ps_node, cfg.rto_min());
            ps.register_job(PsJobConfig { job, workers: full, worker_nodes: nodes.clone(), switches: reminder_targets });
            pses.push(PsCtx { state: ps, timer_at: None });

            let partition_packets = rj.partition_packets.unwrap_or([rj.model.packets_per_partition(packet_bytes); 4]);
            let start_time = rj.start.unwrap_or_else(|| {
                if cfg.start_spread_ns == 0 {
                    SimTime::ZERO
                } else {
                    SimTime::from_nanos(start_rng.random_range(0..cfg.start_spread_ns))
                }
            });
            let spec = JobSpec {
                job,
                model: rj.model.clone(),
                workers: n as u32,
                start_time,
                iterations: cfg.iterations,
                warmup: cfg.warmup,
                partition_packets,
                jitter_bound: SimTime::from_nanos(cfg.jitter_ns),
                fixed_priority: rj.priority,
                start_offsets: rj.start_offsets.clone(),
            };
            let total = spec.total_iterations() as usize;
            jobs.push(JobCtx { spec, workers: global, ps: ji, iter_start: vec![SimTime::MAX; total], iter_done: vec![(0, SimTime::ZERO); total] });
        }
        let workers: Vec<WorkerCtx> = workers.into_iter().map(|w| w.expect("every server hosts a worker")).collect();

        let deliveries = opts.delivery_log.then(|| {
            jobs.iter()
                .map(|j| {
                    let seqs = (j.spec.packets_per_iteration() * j.spec.total_iterations()) as usize;
                    vec![vec![0u16; seqs]; j.workers.len()]
                })
                .collect()
        });
        let inflight = vec![VecDeque::new(); links.len()];
        let mut queue = EventQueue::new();
        for j in &jobs {
            for (local, &w) in j.workers.iter().enumerate() {
                let offset = match &j.spec.start_offsets {
                    Some(o) => o[local],
                    None => jitter(&mut jitter_rng, j.spec.jitter_bound),
                };
                queue.schedule(j.spec.start_time + offset, Action::Push(w as u32));
            }
        }
        let njobs = jobs.len();
        let mut sim = Simulation {
            policy,
            seed,
            packet_bytes,
            control_bytes: cfg.control_bytes,
            bandwidth_bps: cfg.bandwidth_bps,
            switch_delay: SimTime::from_nanos(cfg.switch_delay_ns),
            quant: cfg.quant,
            horizon: cfg.horizon(),
            topo,
            roles,
            names,
            links,
            inflight,
            uplink,
            workers,
            jobs,
            switches,
            pses,
            queue,
            loss_rng: rng_stream(seed, RngPurpose::Loss),
            jitter_rng,
            tracer: Tracer::new(opts.keep_trace),
            drops: Vec::new(),
            opts,
            deliveries,
            records: Vec::new(),
            samples: Vec::new(),
            dropped: 0,
            events: 0,
            failure: None,
            out: Vec::new(),
            sw_events: Vec::new(),
            ps_events: Vec::new(),
            relaxed: vec![FnvHashSet::default(); njobs],
        };
        for d in sim.opts.drops.clone() {
            sim.add_drop(d).map_err(|msg| ConfigError::Invalid { key: "drops".into(), msg })?;
        }
        Ok(sim)
    }

    /// Node behind an endpoint, if it exists in this topology.
    pub fn resolve(&self, e: Endpoint) -> Option<NodeId> {
        match e {
            Endpoint::Worker { job, local } => {
                self.jobs.get(job as usize)?.workers.get(local as usize).map(|&w| self.workers[w].state.node)
            }
            Endpoint::Switch(i) => self.switches.get(i as usize).map(|s| s.state.node),
            Endpoint::Ps(job) => self.jobs.get(job as usize).map(|j| self.pses[j.ps].state.node),
        }
    }

    pub fn add_drop(&mut self, d: ScriptedDrop) -> Result<(), String> {
        let res = |e: Option<Endpoint>| match e {
            None => Ok(None),
            Some(e) => self.resolve(e).map(Some).ok_or_else(|| format!("no such endpoint {e:?}")),
        };
        let active = ActiveDrop { kind: d.kind, job: d.job, seq: d.seq, from: res(d.from)?, to: res(d.to)?, remaining: d.remaining };
        self.drops.push(active);
        Ok(())
    }

    pub fn run(mut self) -> RunOutcome {
        let wall = wall_clock();
        while let Some((now, action)) = self.queue.pop() {
            if now > self.horizon {
                break;
            }
            self.events += 1;
            match action {
                Action::LinkHead(l) => self.on_link_head(l as usize, now),
                Action::WorkerTimer(w) => {
                    let w = w as usize;
                    if self.workers[w].timer_at == Some(now) {
                        self.workers[w].timer_at = None;
                        let mut out = std::mem::take(&mut self.out);
                        let before = self.workers[w].state.counters.reminders_timeout;
                        self.workers[w].state.on_timer(now, &mut out);
                        if self.workers[w].state.counters.reminders_timeout > before {
                            let node = self.workers[w].state.node;
                            let job = self.workers[w].state.job;
                            let seq = self.workers[w].state.expected();
                            self.trace(now, node, "REMINDER", job, seq, 1, 0);
                        }
                        self.emit_all(self.workers[w].state.node, &mut out, now);
                        self.out = out;
                    }
                    self.arm_worker(w);
                }
                Action::PsTimer(p) => {
                    let p = p as usize;
                    if self.pses[p].timer_at == Some(now) {
                        self.pses[p].timer_at = None;
                        let mut out = std::mem::take(&mut self.out);
                        let mut evs = std::mem::take(&mut self.ps_events);
                        self.pses[p].state.on_timer(now, &mut out, &mut evs);
                        self.after_ps(p, now, &mut out, &mut evs);
                        self.out = out;
                        self.ps_events = evs;
                    }
                    self.arm_ps(p);
                }
                Action::Push(w) => self.on_push(w as usize, now),
                Action::Comp1(w) => {
                    self.workers[w as usize].app.comp1_done = true;
                    self.check_layers(w as usize, now);
                }
                Action::Comp2(w) => self.on_comp2(w as usize, now),
            }
            if self.opts.check_invariants && self.failure.is_none() {
                if let Err(e) = self.check_invariants() {
                    self.failure = Some(RunFailure::Invariant(format!("at {now}: {e}")));
                    break;
                }
            }
        }
        self.finish(wall)
    }

    fn trace(&mut self, time: SimTime, node: NodeId, event: &'static str, job: JobId, seq: SeqNum, a: u64, b: u64) {
        self.tracer.record(TraceRecord { time, node, event, job, seq, a, b });
    }

    fn on_link_head(&mut self, l: usize, now: SimTime) {
        let (_, pkt) = self.inflight[l].pop_front().expect("scheduled link head");
        if let Some(&(t, _)) = self.inflight[l].front() {
            self.queue.schedule(t, Action::LinkHead(l as u32));
        }
        let dst = self.links[l].dst;
        self.deliver(dst, pkt, now);
    }

    fn deliver(&mut self, node: NodeId, pkt: GradientPacket, now: SimTime) {
        match self.roles[node.0 as usize] {
            Role::Worker(w) => self.on_worker(w, pkt, now),
            Role::Switch(s) => self.on_switch(s, pkt, now),
            Role::Ps(p) => {
                let mut out = std::mem::take(&mut self.out);
                let mut evs = std::mem::take(&mut self.ps_events);
                if pkt.header.kind == PacketKind::Retransmit {
                    self.relaxed[pkt.header.job.0 as usize].insert(pkt.header.seq.0);
                }
                self.pses[p].state.receive(&pkt, now, &mut out, &mut evs);
                self.after_ps(p, now, &mut out, &mut evs);
                self.out = out;
                self.ps_events = evs;
                self.arm_ps(p);
            }
        }
    }

    fn after_ps(&mut self, p: usize, now: SimTime, out: &mut Vec<GradientPacket>, evs: &mut Vec<PsEvent>) {
        let node = self.pses[p].state.node;
        for e in evs.drain(..) {
            if e.kind == crate::endhost::PsEventKind::RetransmitRequest {
                self.relaxed[e.job.0 as usize].insert(e.seq.0);
            }
            self.tracer.record(TraceRecord { time: now, node, event: e.kind.as_str(), job: e.job, seq: e.seq, a: e.held as u64, b: 0 });
        }
        self.emit_all(node, out, now);
    }

    fn on_worker(&mut self, w: usize, pkt: GradientPacket, now: SimTime) {
        let mut out = std::mem::take(&mut self.out);
        let ctx = &mut self.workers[w];
        let dup_before = ctx.state.counters.reminders_dupack;
        let delivered = ctx.state.receive(&pkt, now, &mut out);
        let node = ctx.state.node;
        let job = ctx.state.job;
        let reminded = ctx.state.counters.reminders_dupack > dup_before;
        let expected = ctx.state.expected();
        match pkt.header.kind {
            PacketKind::Result => match delivered {
                Some(seq) => self.trace(now, node, "RESULT", job, seq, 0, 0),
                None => self.trace(now, node, "DUP_RESULT", job, pkt.header.seq, 0, 0),
            },
            PacketKind::Query => self.trace(now, node, "QUERY_REPLY", job, pkt.header.seq, out.last().is_some_and(|p| !p.payload.is_empty()) as u64, 0),
            PacketKind::RetransmitRequest => self.trace(now, node, "RETRANSMIT", job, pkt.header.seq, 0, 0),
            _ => {}
        }
        if reminded {
            self.trace(now, node, "REMINDER", job, expected, 0, 0);
        }
        self.emit_all(node, &mut out, now);
        self.out = out;
        if let Some(seq) = delivered {
            self.on_delivered(w, seq, now);
        }
        self.arm_worker(w);
    }

    fn on_switch(&mut self, s: usize, pkt: GradientPacket, now: SimTime) {
        let job = pkt.header.job;
        let sw = &self.switches[s];
        let node = sw.state.node;
        let intercept = match pkt.header.kind {
            PacketKind::Gradient => sw.level0.contains(&job),
            PacketKind::Result => pkt.header.level == 1 && sw.level1.contains(&job) && matches!(pkt.dst, Dest::Node(_)),
            PacketKind::Reminder => pkt.dst == Dest::Node(node),
            _ => false,
        };
        if !intercept {
            let mut out = std::mem::take(&mut self.out);
            out.push(pkt);
            self.emit_all(node, &mut out, now);
            self.out = out;
            return;
        }
        let mut out = std::mem::take(&mut self.out);
        let mut evs = std::mem::take(&mut self.sw_events);
        if pkt.header.kind == PacketKind::Reminder {
            self.switches[s].state.process_reminder(&pkt, now, &mut out, &mut evs);
        } else {
            self.switches[s].state.process_gradient(pkt, now, &mut out, &mut evs);
        }
        for e in evs.drain(..) {
            let (a, b) = match e.kind {
                SwitchEventKind::PreemptSwap => (e.index as u64, ((e.arg as u64) << 32) | e.arg2 as u64),
                SwitchEventKind::Downgrade => (e.index as u64, ((e.arg2 as u64) << 32) | e.arg as u64),
                _ => (e.index as u64, e.arg as u64),
            };
            self.trace(now, node, e.kind.as_str(), e.job, e.seq, a, b);
        }
        self.sw_events = evs;
        self.emit_all(node, &mut out, now);
        self.out = out;
    }

    fn emit_all(&mut self, from: NodeId, out: &mut Vec<GradientPacket>, now: SimTime) {
        let is_switch = matches!(self.roles[from.0 as usize], Role::Switch(_));
        let depart = if is_switch { now + self.switch_delay } else { now };
        for pkt in out.drain(..) {
            match pkt.dst {
                Dest::Node(n) => {
                    let l = self.topo.next_hop(from, n).unwrap_or_else(|| panic!("no route {from} -> {n}"));
                    self.send_on(l, pkt, depart);
                }
                Dest::Group(job) => {
                    if let Role::Switch(s) = self.roles[from.0 as usize] {
                        let links = self.switches[s].group_links.get(&job).cloned().unwrap_or_default();
                        let last = links.len().saturating_sub(1);
                        let mut pkt = Some(pkt);
                        for (i, l) in links.into_iter().enumerate() {
                            let p = if i == last { pkt.take().expect("one copy left") } else { pkt.clone().expect("copy") };
                            self.send_on(l, p, depart);
                        }
                    } else {
                        let l = self.uplink[from.0 as usize].expect("host uplink");
                        self.send_on(l, pkt, depart);
                    }
                }
            }
        }
    }

    fn send_on(&mut self, l: usize, pkt: GradientPacket, at: SimTime) {
        let bytes = pkt.wire_bytes(self.control_bytes);
        let (from, to) = (self.links[l].src, self.links[l].dst);
        let scripted = self.drops.iter_mut().find(|d| d.matches(&pkt, from, to)).map(|d| d.remaining -= 1).is_some();
        let outcome = if scripted {
            self.links[l].schedule_forced_drop(bytes, at)
        } else {
            self.links[l].schedule_send(bytes, at, pkt.reliable, &mut self.loss_rng)
        };
        match outcome {
            SendOutcome::Dropped => {
                self.dropped += 1;
                self.trace(at, from, "DROP", pkt.header.job, pkt.header.seq, pkt.header.kind as u64, to.0 as u64);
            }
            SendOutcome::Deliver(t) => {
                let q = &mut self.inflight[l];
                if q.is_empty() {
                    self.queue.schedule(t, Action::LinkHead(l as u32));
                }
                debug_assert!(q.back().is_none_or(|b| b.0 <= t), "link reordered");
                q.push_back((t, pkt));
            }
        }
    }

    fn arm_worker(&mut self, w: usize) {
        let now = self.queue.now();
        let ctx = &mut self.workers[w];
        if let Some(d) = ctx.state.timer_deadline().map(|d| d.max(now)) {
            if ctx.timer_at.is_none_or(|t| d < t) {
                ctx.timer_at = Some(d);
                self.queue.schedule(d, Action::WorkerTimer(w as u32));
            }
        }
    }

    fn arm_ps(&mut self, p: usize) {
        let now = self.queue.now();
        let ctx = &mut self.pses[p];
        if let Some(d) = ctx.state.next_deadline().map(|d| d.max(now)) {
            if ctx.timer_at.is_none_or(|t| d < t) {
                ctx.timer_at = Some(d);
                self.queue.schedule(d, Action::PsTimer(p as u32));
            }
        }
    }

    fn on_push(&mut self, w: usize, now: SimTime) {
        let ji = self.workers[w].job;
        let spec = &self.jobs[ji].spec;
        let it = self.workers[w].app.iteration;
        let runs = spec.partition_runs(it);
        let mut parts_left = [0; 4];
        let mut pushes = Vec::with_capacity(4);
        for (i, &(first, count, _)) in runs.iter().enumerate() {
            parts_left[i] = count;
            if count > 0 {
                let priority = spec.priority(it, i, self.packet_bytes, self.bandwidth_bps, self.quant);
                pushes.push(FragmentRun { first: SeqNum(first), count, priority });
            }
        }
        let js = &mut self.jobs[ji];
        js.iter_start[it as usize] = js.iter_start[it as usize].min(now);
        let ctx = &mut self.workers[w];
        for run in pushes {
            ctx.state.push(run).expect("consecutive pushes");
        }
        ctx.app.parts_left = parts_left;
        ctx.app.comm_start = now;
        ctx.app.comp1_started = false;
        ctx.app.comp1_done = false;
        ctx.app.comp2_started = false;
        let node = ctx.state.node;
        let job = ctx.state.job;
        let mut out = std::mem::take(&mut self.out);
        self.workers[w].state.pump(now, &mut out);
        self.trace(now, node, "PUSH", job, SeqNum(runs[0].0), it as u64, 0);
        self.emit_all(node, &mut out, now);
        self.out = out;
        self.arm_worker(w);
        self.check_layers(w, now);
    }

    fn on_delivered(&mut self, w: usize, seq: SeqNum, now: SimTime) {
        let ji = self.workers[w].job;
        if let Some(d) = &mut self.deliveries {
            let local = self.workers[w].local as usize;
            d[ji][local][seq.0 as usize] += 1;
        }
        let part = self.jobs[ji].spec.partition_of(seq.0);
        let app = &mut self.workers[w].app;
        app.parts_left[part] -= 1;
        if app.parts_left.iter().all(|&n| n == 0) {
            app.comm_end = now;
        }
        self.check_layers(w, now);
    }

    fn check_layers(&mut self, w: usize, now: SimTime) {
        let ji = self.workers[w].job;
        let comp = self.jobs[ji].spec.model.comp_time;
        let app = &mut self.workers[w].app;
        if app.finished {
            return;
        }
        if !app.comp1_started && app.parts_left[1] == 0 && app.parts_left[2] == 0 {
            app.comp1_started = true;
            self.queue.schedule(now + comp, Action::Comp1(w as u32));
        }
        let app = &mut self.workers[w].app;
        if app.comp1_done && !app.comp2_started && app.parts_left[0] == 0 && app.parts_left[3] == 0 {
            app.comp2_started = true;
            if app.parts_left.iter().all(|&n| n == 0) && app.comm_end < app.comm_start {
                app.comm_end = app.comm_start;
            }
            self.queue.schedule(now + comp, Action::Comp2(w as u32));
        }
    }

    fn on_comp2(&mut self, w: usize, now: SimTime) {
        let ji = self.workers[w].job;
        let it = self.workers[w].app.iteration;
        let node = self.workers[w].state.node;
        let job = self.workers[w].state.job;
        self.trace(now, node, "COMP_DONE", job, SeqNum(0), it as u64, 0);
        let bytes = self.jobs[ji].spec.packets_per_iteration() as u64 * self.packet_bytes as u64;
        let app = &self.workers[w].app;
        self.samples.push(CommSample { job, iteration: it, bytes, active: app.comm_end.saturating_sub(app.comm_start) });
        let js = &mut self.jobs[ji];
        let done = &mut js.iter_done[it as usize];
        done.0 += 1;
        done.1 = done.1.max(now);
        if done.0 as usize == js.workers.len() {
            self.records.push(IterationRecord { job, iteration: it, comm_start: js.iter_start[it as usize], comp_done: done.1 });
        }
        let total = js.spec.total_iterations();
        let bound = js.spec.jitter_bound;
        let app = &mut self.workers[w].app;
        app.iteration += 1;
        if app.iteration >= total {
            app.finished = true;
            return;
        }
        let delay = jitter(&mut self.jitter_rng, bound);
        self.queue.schedule(now + delay, Action::Push(w as u32));
    }

    fn check_invariants(&self) -> Result<(), String> {
        for sw in &self.switches {
            sw.state.check_invariants()?;
        }
        for w in &self.workers {
            if w.state.in_flight() > w.state.max_window_pkts() {
                return Err(format!("worker {} exceeds its window", w.state.node));
            }
        }
        // Conservation: for each unfinished (job, seq), every injected
        // contribution sits in exactly one place.
        let mut held: FnvHashMap<(JobId, SeqNum), Payload> = FnvHashMap::default();
        let mut add = |job: JobId, seq: SeqNum, p: &Payload| {
            held.entry((job, seq)).or_insert_with(|| Payload::empty(0)).add_assign(p);
        };
        for sw in &self.switches {
            for (j, s, p) in sw.state.parked() {
                add(j, s, p);
            }
        }
        for q in &self.inflight {
            for (_, pkt) in q {
                let carries = match pkt.header.kind {
                    PacketKind::Gradient | PacketKind::PartialToPs | PacketKind::Retransmit => true,
                    PacketKind::Result => pkt.header.level == 1 && matches!(pkt.dst, Dest::Node(_)) && !pkt.reliable,
                    _ => false,
                };
                if carries {
                    add(pkt.header.job, pkt.header.seq, &pkt.payload);
                }
            }
        }
        for ps in &self.pses {
            for (j, s, p) in ps.state.held() {
                add(j, s, p);
            }
        }
        for ((job, seq), p) in held {
            if self.relaxed[job.0 as usize].contains(&seq.0) {
                continue;
            }
            if p.has_duplicates() {
                return Err(format!("job {job} seq {seq}: contribution duplicated: {p:?}"));
            }
        }
        Ok(())
    }

    fn finish(mut self, wall: Option<Instant>) -> RunOutcome {
        let now = self.queue.now();
        let mut counters = RunCounters::default();
        let mut wc = WorkerCounters::default();
        for w in &self.workers {
            let c = &w.state.counters;
            wc.gradients_sent += c.gradients_sent;
            wc.results_delivered += c.results_delivered;
            wc.duplicate_results += c.duplicate_results;
            wc.alarms += c.alarms;
            wc.reminders_dupack += c.reminders_dupack;
            wc.reminders_timeout += c.reminders_timeout;
            wc.retransmits += c.retransmits;
        }
        let mut pc = PsCounters::default();
        for p in &self.pses {
            let c = &p.state.counters;
            pc.partials_received += c.partials_received;
            pc.alarms += c.alarms;
            pc.multicasts += c.multicasts;
            pc.switch_reminders += c.switch_reminders;
            pc.queries_sent += c.queries_sent;
            pc.retransmit_requests += c.retransmit_requests;
            pc.late_discarded += c.late_discarded;
        }
        let mut sc = SwitchCounters::default();
        let mut stale = 0u64;
        for s in &self.switches {
            let c = &s.state.counters;
            sc.preemptions += c.preemptions;
            sc.downgrades += c.downgrades;
            sc.forwarded_to_ps += c.forwarded_to_ps;
            sc.completions += c.completions;
            sc.reminder_hits += c.reminder_hits;
            sc.reminder_misses += c.reminder_misses;
            stale += s.state.occupied_slots() as u64;
        }
        counters.gradients_sent = wc.gradients_sent;
        counters.results_delivered = wc.results_delivered;
        counters.duplicate_results = wc.duplicate_results;
        counters.alarms = wc.alarms + pc.alarms;
        counters.worker_reminders = wc.reminders_dupack + wc.reminders_timeout;
        counters.worker_timeouts = wc.reminders_timeout;
        counters.switch_reminders = pc.switch_reminders;
        counters.queries = pc.queries_sent;
        counters.retransmits = wc.retransmits;
        counters.retransmit_requests = pc.retransmit_requests;
        counters.preemptions = sc.preemptions;
        counters.downgrades = sc.downgrades;
        counters.forwarded_to_ps = sc.forwarded_to_ps;
        counters.ps_fallbacks = pc.partials_received;
        counters.ps_multicasts = pc.multicasts;
        counters.late_discarded = pc.late_discarded;
        counters.switch_completions = sc.completions;
        counters.reminder_hits = sc.reminder_hits;
        counters.reminder_misses = sc.reminder_misses;
        counters.packets_dropped = self.dropped;
        counters.stale_slots = stale;

        if self.failure.is_none() {
            let stuck: Vec<(JobId, WorkerId, SeqNum)> = self
                .workers
                .iter()
                .filter(|w| !w.app.finished)
                .map(|w| (w.state.job, w.state.id, w.state.expected()))
                .collect();
            if !stuck.is_empty() {
                self.failure = Some(RunFailure::Liveness { at_ns: now.as_nanos(), stuck });
            } else if counters.alarms > 0 {
                self.failure = Some(RunFailure::Alarms(counters.alarms));
            } else {
                let live: usize = self.pses.iter().map(|p| p.state.live_entries()).sum();
                if live > 0 {
                    self.failure = Some(RunFailure::Leak { ps_entries: live });
                }
            }
        }
        for l in &self.links {
            debug_assert_eq!(l.stats.sent, l.stats.delivered + l.stats.dropped);
        }

        let warmup = self.jobs.first().map_or(0, |j| j.spec.warmup);
        let jct = compute_jct(&self.records, warmup).ok();
        let utilization = compute_utilization(&self.samples, warmup, self.bandwidth_bps).ok();
        let report = RunReport {
            policy: self.policy.name(),
            seed: self.seed,
            jobs: self.jobs.len() as u32,
            workers: self.workers.len() as u32,
            mean_jct_ns: jct.as_ref().map_or(f64::NAN, |j| j.mean_ns),
            jct,
            mean_utilization: utilization.as_ref().map_or(f64::NAN, |u| u.mean),
            utilization,
            counters,
            digest: self.tracer.digest(),
            trace_records: self.tracer.count(),
            events: self.events,
            sim_time_ns: now.as_nanos(),
            wall_ms: wall.map_or(0.0, |w| w.elapsed().as_secs_f64() * 1e3),
        };
        self.records.sort_by_key(|r| (r.job, r.iteration));
        RunOutcome {
            report,
            failure: self.failure,
            trace: self.tracer.into_records(),
            node_names: self.names,
            deliveries: self.deliveries,
            iterations: self.records,
        }
    }

    pub fn ps_entry_stage(&self, job: usize, seq: SeqNum) -> Option<EntryStage> {
        self.pses[self.jobs[job].ps].state.entry(JobId(job as u32), seq).map(|e| e.stage)
    }
}

fn roles_switch(roles: &[Role], n: NodeId) -> usize {
    match roles[n.0 as usize] {
        Role::Switch(i) => i,
        _ => unreachable!("rack switch"),
    }
}

fn jitter(rng: &mut ChaCha8Rng, bound: SimTime) -> SimTime {
    if bound == SimTime::ZERO {
        SimTime::ZERO
    } else {
        SimTime(rng.random_range(0..bound.as_picos()))
    }
}

/// Convenience: one run of `cfg` under its own policy.
/// Browsers have no monotonic clock behind `Instant`; wall time reads 0 there.
#[cfg(not(target_family = "wasm"))]
fn wall_clock() -> Option<Instant> {
    Some(Instant::now())
}

#[cfg(target_family = "wasm")]
fn wall_clock() -> Option<Instant> {
    None
}

pub fn run_once(cfg: &ScenarioConfig, seed: u64, opts: RunOptions) -> Result<RunOutcome, ConfigError> {
    Ok(Simulation::new(cfg, cfg.policy, seed, opts)?.run())
}
