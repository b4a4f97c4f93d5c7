//! Worker and parameter-server state machines.
//!
//! Workers push gradient fragments through a sliding window and pull
//! results from either the switch or the PS. The PS merges partial
//! aggregates evicted from (or refused by) the switch, and drives the
//! reminder, query and retransmit paths that recover from loss:
//!
//! | loss                                   | recovery                                                   |
//! |----------------------------------------|------------------------------------------------------------|
//! | gradient lost on the way to the switch | worker dupACK/timeout -> worker reminder -> PS entry -> switch reminder, then retransmit |
//! | multicast result lost to some workers  | worker reminder -> PS queries workers -> cached result forwarded |
//! | multicast result lost to all workers   | worker reminders -> queries all miss -> PS re-aggregates from retransmits |
//! | refused or evicted partial lost        | worker reminder recreates the PS entry                     |
//! | gradient lost after a preemption       | PS entry timeout/dupACK, else the worker path              |
//!
//! End-host to end-host traffic (reminders to the PS, queries, retransmits,
//! PS results) rides a lossless channel.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use fnv::{FnvHashMap, FnvHashSet};

use serde::Serialize;
use thiserror::Error;

use crate::switchd::agg_index;
use crate::types::{
    is_complete, Dest, GradientPacket, JobId, NodeId, PacketHeader, PacketKind, Payload, PsId, SeqNum, WorkerId, WorkerSet,
};
use crate::SimTime;

/// Out-of-order results (worker) or later-sequence partials (PS) that trigger a reminder.
pub const DUPACK_THRESHOLD: u32 = 3;

/// Backoff ceiling as a multiple of `rto_min`.
const RTO_BACKOFF_CAP: u64 = 100;

/// TCP-style retransmission timer: smoothed RTT plus four deviations,
/// floored at `rto_min`, doubled per unanswered timeout.
#[derive(Debug, Clone)]
pub struct RtoEstimator {
    srtt: Option<f64>,
    rttvar: f64,
    rto_min: SimTime,
    backoff: u32,
}

impl RtoEstimator {
    pub fn new(rto_min: SimTime) -> Self {
        RtoEstimator { srtt: None, rttvar: 0.0, rto_min, backoff: 0 }
    }

    pub fn sample(&mut self, rtt: SimTime) {
        let r = rtt.as_picos() as f64;
        match self.srtt {
            None => {
                self.srtt = Some(r);
                self.rttvar = r / 2.0;
            }
            Some(s) => {
                self.rttvar = 0.75 * self.rttvar + 0.25 * (s - r).abs();
                self.srtt = Some(0.875 * s + 0.125 * r);
            }
        }
    }

    /// Timeout without backoff.
    pub fn base(&self) -> SimTime {
        let est = self.srtt.map(|s| SimTime((s + 4.0 * self.rttvar) as u64)).unwrap_or(SimTime::ZERO);
        est.max(self.rto_min)
    }

    /// Timeout including backoff, capped at `100 * rto_min`.
    pub fn current(&self) -> SimTime {
        self.backed_off(self.backoff)
    }

    /// Timeout after `n` unanswered expiries, for callers that keep their
    /// own count.
    pub fn backed_off(&self, n: u32) -> SimTime {
        let cap = self.rto_min.mul(RTO_BACKOFF_CAP);
        self.base().mul(1u64 << n.min(20)).min(cap).max(self.rto_min)
    }

    pub fn back_off(&mut self) {
        self.backoff = (self.backoff + 1).min(20);
    }

    pub fn reset_backoff(&mut self) {
        self.backoff = 0;
    }
}

/// How a worker stamps the aggregator index into its gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexScheme {
    Hash { pool: u32 },
    Partition { base: u32, size: u32 },
}

impl IndexScheme {
    pub fn index(&self, job: JobId, seq: SeqNum) -> u32 {
        match *self {
            IndexScheme::Hash { pool } => agg_index(job, seq, pool),
            IndexScheme::Partition { base, size } => base + seq.0 % size,
        }
    }
}

/// A consecutive run of fragments sharing one priority tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FragmentRun {
    pub first: SeqNum,
    pub count: u32,
    pub priority: u8,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PushError {
    #[error("push starts at seq {got} but the next free seq is {expected}")]
    NotConsecutive { expected: SeqNum, got: SeqNum },
    #[error("empty push")]
    Empty,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct WorkerCounters {
    pub gradients_sent: u64,
    pub results_delivered: u64,
    pub duplicate_results: u64,
    /// Results whose payload was not exactly the full worker set.
    pub alarms: u64,
    pub reminders_dupack: u64,
    pub reminders_timeout: u64,
    pub query_replies: u64,
    pub retransmits: u64,
    pub unknown_packets: u64,
}

#[derive(Debug, Clone)]
pub struct WorkerParams {
    /// Initial window.
    pub window_pkts: u32,
    /// Growth cap; equal to `window_pkts` for a static window.
    pub max_window_pkts: u32,
    pub packet_bytes: u32,
    pub rto_min: SimTime,
}

pub struct WorkerState {
    pub id: WorkerId,
    pub node: NodeId,
    pub job: JobId,
    ps: NodeId,
    bitmap0: u32,
    bitmap1: u32,
    index: IndexScheme,
    window: u32,
    init_window: u32,
    max_window: u32,
    ssthresh: u32,
    acked_in_ca: u32,
    packet_bytes: u32,
    full_set: WorkerSet,
    runs: VecDeque<FragmentRun>,
    avail_end: u32,
    next_to_send: u32,
    expected: u32,
    received: Vec<bool>,
    sent_at: Vec<SimTime>,
    cache: Vec<Option<(SeqNum, Payload)>>,
    dup_counter: u32,
    dup_fired: bool,
    last_reminder: SimTime,
    rto: RtoEstimator,
    pub counters: WorkerCounters,
}

impl WorkerState {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: WorkerId,
        node: NodeId,
        job: JobId,
        ps: NodeId,
        full_set: WorkerSet,
        bitmap0: u32,
        bitmap1: u32,
        index: IndexScheme,
        params: &WorkerParams,
    ) -> Self {
        assert!(params.window_pkts > 0, "window must hold at least one packet");
        assert!(params.max_window_pkts >= params.window_pkts, "window cap below the initial window");
        let w = params.max_window_pkts as usize;
        WorkerState {
            id,
            node,
            job,
            ps,
            bitmap0,
            bitmap1,
            index,
            window: params.window_pkts,
            init_window: params.window_pkts,
            max_window: params.max_window_pkts,
            ssthresh: params.max_window_pkts,
            acked_in_ca: 0,
            packet_bytes: params.packet_bytes,
            full_set,
            runs: VecDeque::new(),
            avail_end: 0,
            next_to_send: 0,
            expected: 0,
            received: vec![false; w],
            sent_at: vec![SimTime::ZERO; w],
            cache: vec![None; w],
            dup_counter: 0,
            dup_fired: false,
            last_reminder: SimTime::ZERO,
            rto: RtoEstimator::new(params.rto_min),
            counters: WorkerCounters::default(),
        }
    }

    pub fn expected(&self) -> SeqNum {
        SeqNum(self.expected)
    }

    pub fn next_to_send(&self) -> SeqNum {
        SeqNum(self.next_to_send)
    }

    pub fn in_flight(&self) -> u32 {
        self.next_to_send - self.expected
    }

    pub fn in_flight_bytes(&self) -> u64 {
        self.in_flight() as u64 * self.packet_bytes as u64
    }

    /// Current window.
    pub fn window_pkts(&self) -> u32 {
        self.window
    }

    pub fn max_window_pkts(&self) -> u32 {
        self.max_window
    }

    /// Slow start below `ssthresh`, one packet per window above it.
    fn grow(&mut self, acked: u32) {
        for _ in 0..acked {
            if self.window >= self.max_window {
                return;
            }
            if self.window < self.ssthresh {
                self.window += 1;
            } else {
                self.acked_in_ca += 1;
                if self.acked_in_ca >= self.window {
                    self.acked_in_ca = 0;
                    self.window += 1;
                }
            }
        }
    }

    /// True once every pushed fragment has a result.
    pub fn is_drained(&self) -> bool {
        self.expected == self.avail_end
    }

    /// Queues a run of fragments; they leave as the window allows.
    pub fn push(&mut self, run: FragmentRun) -> Result<(), PushError> {
        if run.count == 0 {
            return Err(PushError::Empty);
        }
        if run.first.0 != self.avail_end {
            return Err(PushError::NotConsecutive { expected: SeqNum(self.avail_end), got: run.first });
        }
        self.avail_end += run.count;
        self.runs.push_back(run);
        Ok(())
    }

    /// Releases as many queued fragments as the window admits.
    pub fn pump(&mut self, now: SimTime, out: &mut Vec<GradientPacket>) {
        while self.next_to_send < self.avail_end && self.next_to_send - self.expected < self.window {
            while let Some(front) = self.runs.front() {
                if front.first.0 + front.count <= self.next_to_send {
                    self.runs.pop_front();
                } else {
                    break;
                }
            }
            let priority = self.runs.front().map(|r| r.priority).unwrap_or(0);
            let seq = SeqNum(self.next_to_send);
            let slot = self.ring(self.next_to_send);
            self.sent_at[slot] = now;
            self.received[slot] = false;
            out.push(self.gradient(seq, priority, now));
            self.next_to_send += 1;
            self.counters.gradients_sent += 1;
        }
        debug_assert!(self.in_flight() <= self.max_window);
    }

    fn gradient(&self, seq: SeqNum, priority: u8, now: SimTime) -> GradientPacket {
        let mut h = PacketHeader::new(PacketKind::Gradient, self.job, seq);
        h.priority = priority;
        h.bitmap0 = self.bitmap0;
        h.bitmap1 = self.bitmap1;
        h.agg_index = self.index.index(self.job, seq);
        GradientPacket::new(h, Payload::contribution(self.id, self.packet_bytes), self.node, Dest::Node(self.ps), now)
    }

    fn ring(&self, seq: u32) -> usize {
        (seq % self.max_window) as usize
    }

    /// Handles a result, query or retransmit request. Returns the sequence
    /// number newly delivered to the application, if any.
    pub fn receive(&mut self, pkt: &GradientPacket, now: SimTime, out: &mut Vec<GradientPacket>) -> Option<SeqNum> {
        if pkt.header.job != self.job {
            self.counters.unknown_packets += 1;
            return None;
        }
        match pkt.header.kind {
            PacketKind::Result => self.on_result(pkt, now, out),
            PacketKind::Query => {
                let seq = pkt.header.seq;
                let payload = self.cached(seq).cloned().unwrap_or_else(|| Payload::empty(0));
                let h = PacketHeader::new(PacketKind::QueryReply, self.job, seq);
                out.push(GradientPacket::new(h, payload, self.node, Dest::Node(self.ps), now).reliable());
                self.counters.query_replies += 1;
                None
            }
            // Nothing to resend for a fragment not pushed yet; the PS asks again.
            PacketKind::RetransmitRequest if pkt.header.seq.0 >= self.next_to_send => {
                self.counters.unknown_packets += 1;
                None
            }
            PacketKind::RetransmitRequest => {
                let h = PacketHeader::new(PacketKind::Retransmit, self.job, pkt.header.seq);
                let payload = Payload::contribution(self.id, self.packet_bytes);
                out.push(GradientPacket::new(h, payload, self.node, Dest::Node(self.ps), now).reliable());
                self.counters.retransmits += 1;
                None
            }
            _ => {
                self.counters.unknown_packets += 1;
                None
            }
        }
    }

    fn on_result(&mut self, pkt: &GradientPacket, now: SimTime, out: &mut Vec<GradientPacket>) -> Option<SeqNum> {
        if !is_complete(&pkt.payload, &self.full_set) {
            self.counters.alarms += 1;
            return None;
        }
        let s = pkt.header.seq.0;
        if s < self.expected || s >= self.next_to_send || self.received[self.ring(s)] {
            self.counters.duplicate_results += 1;
            return None;
        }
        let slot = self.ring(s);
        self.received[slot] = true;
        self.cache[slot] = Some((pkt.header.seq, pkt.payload.clone()));
        self.counters.results_delivered += 1;
        if self.sent_at[slot] >= self.last_reminder {
            self.rto.sample(now - self.sent_at[slot]);
        }
        if s == self.expected {
            let before = self.expected;
            while self.expected < self.next_to_send && self.received[self.ring(self.expected)] {
                self.expected += 1;
            }
            self.grow(self.expected - before);
            // Results already cached past a new hole count as observed.
            self.dup_counter = (self.expected + 1..self.next_to_send)
                .filter(|&q| self.received[self.ring(q)])
                .take(DUPACK_THRESHOLD as usize)
                .count() as u32;
            self.dup_fired = false;
            self.rto.reset_backoff();
            self.pump(now, out);
            self.check_dupack(now, out);
        } else {
            self.dup_counter += 1;
            self.check_dupack(now, out);
        }
        Some(SeqNum(s))
    }

    fn check_dupack(&mut self, now: SimTime, out: &mut Vec<GradientPacket>) {
        if self.dup_counter >= DUPACK_THRESHOLD && !self.dup_fired {
            self.dup_fired = true;
            self.counters.reminders_dupack += 1;
            self.remind(now, out);
        }
    }

    fn remind(&mut self, now: SimTime, out: &mut Vec<GradientPacket>) {
        self.last_reminder = now;
        let h = PacketHeader::reminder(self.job, SeqNum(self.expected));
        out.push(GradientPacket::new(h, Payload::empty(0), self.node, Dest::Node(self.ps), now).reliable());
    }

    /// Cached result for `seq`, if still held.
    pub fn cached(&self, seq: SeqNum) -> Option<&Payload> {
        match &self.cache[self.ring(seq.0)] {
            Some((s, p)) if *s == seq => Some(p),
            _ => None,
        }
    }

    /// When the retransmission timer for `expected` fires, if armed.
    pub fn timer_deadline(&self) -> Option<SimTime> {
        if self.expected >= self.next_to_send {
            return None;
        }
        let sent = self.sent_at[self.ring(self.expected)];
        Some(sent.max(self.last_reminder) + self.rto.current())
    }

    pub fn on_timer(&mut self, now: SimTime, out: &mut Vec<GradientPacket>) {
        if let Some(deadline) = self.timer_deadline() {
            if now >= deadline {
                self.counters.reminders_timeout += 1;
                self.rto.back_off();
                // Only a timeout is read as congestion; dupACKs here mostly
                // mean a fragment took the PS path.
                self.ssthresh = (self.window / 2).max(self.init_window);
                self.window = self.ssthresh;
                self.acked_in_ca = 0;
                self.remind(now, out);
            }
        }
    }

    pub fn rto(&self) -> &RtoEstimator {
        &self.rto
    }
}

/// Everything the PS knows about one job.
#[derive(Debug, Clone)]
pub struct PsJobConfig {
    pub job: JobId,
    pub workers: WorkerSet,
    /// Node of each worker, indexed by `WorkerId`.
    pub worker_nodes: Vec<NodeId>,
    /// Switches on the job's aggregation path (reminder targets).
    pub switches: Vec<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryStage {
    Collecting,
    /// A timeout already sent switch reminders.
    Reminded,
    /// Waiting for direct retransmits; switch partials are ignored.
    Reliable { missing: WorkerSet },
}

#[derive(Debug, Clone)]
pub struct PsEntry {
    pub partial: Payload,
    pub timestamp: SimTime,
    pub created_at: SimTime,
    pub dupacks: u32,
    pub stage: EntryStage,
    pub deadline: SimTime,
    pub answered: WorkerSet,
    pub timeouts: u32,
}

impl PsEntry {
    pub fn bitmap(&self) -> &WorkerSet {
        self.partial.workers()
    }
}

struct PsJob {
    cfg: PsJobConfig,
    entries: BTreeMap<SeqNum, PsEntry>,
    done: FnvHashSet<SeqNum>,
    rto: RtoEstimator,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PsCounters {
    pub partials_received: u64,
    pub entries_created: u64,
    pub merges: u64,
    /// A merge would count some worker twice.
    pub alarms: u64,
    pub multicasts: u64,
    pub switch_reminders: u64,
    pub worker_reminders: u64,
    pub queries_sent: u64,
    pub query_hits: u64,
    pub retransmit_requests: u64,
    pub retransmits_received: u64,
    pub late_discarded: u64,
    pub unknown_packets: u64,
}

/// What the PS did, for tracing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsEventKind {
    EntryCreate,
    Merge,
    Multicast,
    SwitchReminder,
    WorkerReminder,
    Query,
    RetransmitRequest,
    LateDiscard,
    Alarm,
}

impl PsEventKind {
    pub fn as_str(self) -> &'static str {
        use PsEventKind::*;
        match self {
            EntryCreate => "PS_ENTRY",
            Merge => "PS_MERGE",
            Multicast => "PS_MULTICAST",
            SwitchReminder => "PS_REMINDER",
            WorkerReminder => "WORKER_REMINDER",
            Query => "PS_QUERY",
            RetransmitRequest => "PS_RETX_REQ",
            LateDiscard => "PS_LATE",
            Alarm => "ALARM",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PsEvent {
    pub kind: PsEventKind,
    pub job: JobId,
    pub seq: SeqNum,
    /// Contributions held after the event.
    pub held: u32,
}

pub struct PsState {
    pub id: PsId,
    pub node: NodeId,
    jobs: FnvHashMap<JobId, PsJob>,
    deadlines: BTreeSet<(SimTime, JobId, SeqNum)>,
    rto_min: SimTime,
    pub counters: PsCounters,
}

impl PsState {
    pub fn new(id: PsId, node: NodeId, rto_min: SimTime) -> Self {
        PsState { id, node, jobs: FnvHashMap::default(), deadlines: BTreeSet::new(), rto_min, counters: PsCounters::default() }
    }

    pub fn register_job(&mut self, cfg: PsJobConfig) {
        let job = cfg.job;
        self.jobs.insert(job, PsJob { cfg, entries: BTreeMap::new(), done: FnvHashSet::default(), rto: RtoEstimator::new(self.rto_min) });
    }

    pub fn entry(&self, job: JobId, seq: SeqNum) -> Option<&PsEntry> {
        self.jobs.get(&job)?.entries.get(&seq)
    }

    pub fn live_entries(&self) -> usize {
        self.jobs.values().map(|j| j.entries.len()).sum()
    }

    /// Contributions held in PS entries, for conservation checks.
    pub fn held(&self) -> impl Iterator<Item = (JobId, SeqNum, &Payload)> {
        self.jobs.values().flat_map(|j| j.entries.iter().map(move |(s, e)| (j.cfg.job, *s, &e.partial)))
    }

    pub fn is_done(&self, job: JobId, seq: SeqNum) -> bool {
        self.jobs.get(&job).is_some_and(|j| j.done.contains(&seq))
    }

    /// Drops all state for a finished job.
    pub fn teardown(&mut self, job: JobId) {
        if let Some(j) = self.jobs.remove(&job) {
            for (seq, e) in j.entries {
                self.deadlines.remove(&(e.deadline, job, seq));
            }
        }
    }

    pub fn next_deadline(&self) -> Option<SimTime> {
        self.deadlines.first().map(|d| d.0)
    }

    pub fn receive(&mut self, pkt: &GradientPacket, now: SimTime, out: &mut Vec<GradientPacket>, events: &mut Vec<PsEvent>) {
        let job = pkt.header.job;
        if !self.jobs.contains_key(&job) {
            self.counters.unknown_packets += 1;
            return;
        }
        match pkt.header.kind {
            PacketKind::PartialToPs => self.on_partial(pkt, now, out, events),
            PacketKind::Retransmit => self.on_retransmit(pkt, now, out, events),
            PacketKind::Reminder => self.on_worker_reminder(pkt, now, out, events),
            PacketKind::QueryReply => self.on_query_reply(pkt, now, out, events),
            _ => self.counters.unknown_packets += 1,
        }
    }

    fn on_partial(&mut self, pkt: &GradientPacket, now: SimTime, out: &mut Vec<GradientPacket>, events: &mut Vec<PsEvent>) {
        self.counters.partials_received += 1;
        let (job, seq) = (pkt.header.job, pkt.header.seq);
        self.count_dupacks(job, seq, now, out, events);
        let j = self.jobs.get_mut(&job).expect("registered");
        if j.done.contains(&seq) || matches!(j.entries.get(&seq).map(|e| e.stage), Some(EntryStage::Reliable { .. })) {
            self.counters.late_discarded += 1;
            events.push(PsEvent { kind: PsEventKind::LateDiscard, job, seq, held: 0 });
            return;
        }
        self.merge(job, seq, &pkt.payload, now, out, events);
    }

    fn on_retransmit(&mut self, pkt: &GradientPacket, now: SimTime, out: &mut Vec<GradientPacket>, events: &mut Vec<PsEvent>) {
        self.counters.retransmits_received += 1;
        let (job, seq) = (pkt.header.job, pkt.header.seq);
        let j = self.jobs.get_mut(&job).expect("registered");
        let Some(entry) = j.entries.get_mut(&seq) else {
            self.counters.late_discarded += 1;
            return;
        };
        let EntryStage::Reliable { mut missing } = entry.stage else {
            self.counters.late_discarded += 1;
            return;
        };
        let fresh = pkt.payload.workers().intersection(&missing);
        if fresh.is_empty() {
            self.counters.late_discarded += 1;
            return;
        }
        missing = missing.difference(&fresh);
        entry.stage = EntryStage::Reliable { missing };
        self.merge(job, seq, &Payload::from_set(fresh, pkt.payload.byte_size()), now, out, events);
    }

    fn merge(&mut self, job: JobId, seq: SeqNum, payload: &Payload, now: SimTime, out: &mut Vec<GradientPacket>, events: &mut Vec<PsEvent>) {
        let j = self.jobs.get_mut(&job).expect("registered");
        let rto = j.rto.base();
        let entry = match j.entries.get_mut(&seq) {
            Some(e) => e,
            None => {
                self.counters.entries_created += 1;
                events.push(PsEvent { kind: PsEventKind::EntryCreate, job, seq, held: 0 });
                let deadline = now + rto;
                self.deadlines.insert((deadline, job, seq));
                j.entries.entry(seq).or_insert(PsEntry {
                    partial: Payload::empty(payload.byte_size()),
                    timestamp: now,
                    created_at: now,
                    dupacks: 0,
                    stage: EntryStage::Collecting,
                    deadline,
                    answered: WorkerSet::empty(),
                    timeouts: 0,
                })
            }
        };
        if !entry.partial.workers().is_disjoint(payload.workers()) || payload.has_duplicates() {
            self.counters.alarms += 1;
            events.push(PsEvent { kind: PsEventKind::Alarm, job, seq, held: entry.partial.workers().len() as u32 });
        }
        entry.partial.add_assign(payload);
        entry.timestamp = now;
        entry.dupacks = 0;
        if entry.stage == EntryStage::Reminded {
            entry.stage = EntryStage::Collecting;
        }
        self.counters.merges += 1;
        events.push(PsEvent { kind: PsEventKind::Merge, job, seq, held: entry.partial.workers().len() as u32 });

        if is_complete(&entry.partial, &j.cfg.workers) {
            let entry = j.entries.remove(&seq).expect("present");
            self.deadlines.remove(&(entry.deadline, job, seq));
            if entry.timeouts == 0 {
                j.rto.sample(now - entry.created_at);
            }
            j.done.insert(seq);
            let reliable_path = matches!(entry.stage, EntryStage::Reliable { .. });
            let h = PacketHeader::new(PacketKind::Result, job, seq);
            out.push(GradientPacket::new(h, entry.partial, self.node, Dest::Group(job), now).reliable());
            self.counters.multicasts += 1;
            events.push(PsEvent { kind: PsEventKind::Multicast, job, seq, held: j.cfg.workers.len() as u32 });
            if reliable_path {
                // Flush any straggling partial so the slot is not held forever.
                Self::switch_reminders(&j.cfg, self.node, seq, now, out);
                self.counters.switch_reminders += j.cfg.switches.len() as u64;
            }
        } else {
            let new_deadline = now + rto;
            if new_deadline != entry.deadline {
                self.deadlines.remove(&(entry.deadline, job, seq));
                entry.deadline = new_deadline;
                self.deadlines.insert((new_deadline, job, seq));
            }
        }
    }

    /// A partial for a later sequence number is a dupACK against every open
    /// entry below it. Counting from the entry's last merge, the 3rd, 6th,
    /// 12th, ... dupACK each send a switch reminder: a reminder that arrives
    /// before the straggling gradients is retried, without a storm.
    fn count_dupacks(&mut self, job: JobId, seq: SeqNum, now: SimTime, out: &mut Vec<GradientPacket>, events: &mut Vec<PsEvent>) {
        let j = self.jobs.get_mut(&job).expect("registered");
        for (&s, e) in j.entries.range_mut(..seq) {
            if matches!(e.stage, EntryStage::Reliable { .. }) {
                continue;
            }
            e.dupacks = e.dupacks.saturating_add(1);
            if e.dupacks % DUPACK_THRESHOLD == 0 && (e.dupacks / DUPACK_THRESHOLD).is_power_of_two() {
                Self::switch_reminders(&j.cfg, self.node, s, now, out);
                self.counters.switch_reminders += j.cfg.switches.len() as u64;
                events.push(PsEvent { kind: PsEventKind::SwitchReminder, job, seq: s, held: e.partial.workers().len() as u32 });
            }
        }
    }

    fn on_worker_reminder(&mut self, pkt: &GradientPacket, now: SimTime, out: &mut Vec<GradientPacket>, events: &mut Vec<PsEvent>) {
        self.counters.worker_reminders += 1;
        let (job, seq) = (pkt.header.job, pkt.header.seq);
        let j = self.jobs.get_mut(&job).expect("registered");
        events.push(PsEvent { kind: PsEventKind::WorkerReminder, job, seq, held: 0 });
        if j.done.contains(&seq) {
            // The PS already multicast this result over the reliable channel.
            return;
        }
        if let Some(e) = j.entries.get(&seq) {
            match e.stage {
                EntryStage::Reliable { missing } => {
                    // A reminder from a worker still owing its copy means it
                    // can answer now; do not wait out the backed-off timer.
                    let from = j.cfg.worker_nodes.iter().position(|&n| n == pkt.src);
                    if from.is_some_and(|w| missing.contains(WorkerId(w as u16))) {
                        let h = PacketHeader::new(PacketKind::RetransmitRequest, job, seq);
                        out.push(GradientPacket::new(h, Payload::empty(0), self.node, Dest::Node(pkt.src), now).reliable());
                        self.counters.retransmit_requests += 1;
                        events.push(PsEvent { kind: PsEventKind::RetransmitRequest, job, seq, held: e.partial.workers().len() as u32 });
                    }
                }
                _ => {
                    Self::switch_reminders(&j.cfg, self.node, seq, now, out);
                    self.counters.switch_reminders += j.cfg.switches.len() as u64;
                    events.push(PsEvent { kind: PsEventKind::SwitchReminder, job, seq, held: e.partial.workers().len() as u32 });
                }
            }
            return;
        }
        // Unknown fragment: open an empty entry, flush the switches and ask
        // every worker whether it already holds the result.
        let deadline = now + j.rto.base();
        j.entries.insert(
            seq,
            PsEntry {
                partial: Payload::empty(0),
                timestamp: now,
                created_at: now,
                dupacks: 0,
                stage: EntryStage::Collecting,
                deadline,
                answered: WorkerSet::empty(),
                timeouts: 0,
            },
        );
        self.deadlines.insert((deadline, job, seq));
        self.counters.entries_created += 1;
        events.push(PsEvent { kind: PsEventKind::EntryCreate, job, seq, held: 0 });
        Self::switch_reminders(&j.cfg, self.node, seq, now, out);
        self.counters.switch_reminders += j.cfg.switches.len() as u64;
        events.push(PsEvent { kind: PsEventKind::SwitchReminder, job, seq, held: 0 });
        for &node in &j.cfg.worker_nodes {
            let h = PacketHeader::new(PacketKind::Query, job, seq);
            out.push(GradientPacket::new(h, Payload::empty(0), self.node, Dest::Node(node), now).reliable());
            self.counters.queries_sent += 1;
        }
        events.push(PsEvent { kind: PsEventKind::Query, job, seq, held: 0 });
    }

    fn on_query_reply(&mut self, pkt: &GradientPacket, now: SimTime, out: &mut Vec<GradientPacket>, events: &mut Vec<PsEvent>) {
        let (job, seq) = (pkt.header.job, pkt.header.seq);
        let j = self.jobs.get_mut(&job).expect("registered");
        let Some(replier) = j.cfg.worker_nodes.iter().position(|&n| n == pkt.src) else {
            self.counters.unknown_packets += 1;
            return;
        };
        let Some(entry) = j.entries.get_mut(&seq) else {
            return;
        };
        if pkt.payload.is_empty() {
            entry.answered.insert(WorkerId(replier as u16));
            return;
        }
        if !is_complete(&pkt.payload, &j.cfg.workers) {
            self.counters.alarms += 1;
            events.push(PsEvent { kind: PsEventKind::Alarm, job, seq, held: 0 });
            return;
        }
        // Some worker already holds the aggregate: forward it to everyone
        // else and retire the entry.
        self.counters.query_hits += 1;
        let entry = j.entries.remove(&seq).expect("present");
        self.deadlines.remove(&(entry.deadline, job, seq));
        j.done.insert(seq);
        for (w, &node) in j.cfg.worker_nodes.iter().enumerate() {
            if w == replier {
                continue;
            }
            let h = PacketHeader::new(PacketKind::Result, job, seq);
            out.push(GradientPacket::new(h, pkt.payload.clone(), self.node, Dest::Node(node), now).reliable());
        }
        self.counters.multicasts += 1;
        events.push(PsEvent { kind: PsEventKind::Multicast, job, seq, held: j.cfg.workers.len() as u32 });
    }

    /// Fires every entry deadline at or before `now`.
    ///
    /// First timeout: reminders to the switches. A second timeout without
    /// progress: stop trusting the data plane and collect the missing
    /// contributions by direct retransmission.
    pub fn on_timer(&mut self, now: SimTime, out: &mut Vec<GradientPacket>, events: &mut Vec<PsEvent>) {
        while let Some(&(deadline, job, seq)) = self.deadlines.first() {
            if deadline > now {
                break;
            }
            self.deadlines.pop_first();
            let j = self.jobs.get_mut(&job).expect("registered");
            let Some(entry) = j.entries.get_mut(&seq) else { continue };
            if entry.deadline != deadline {
                continue;
            }
            entry.timeouts += 1;
            let next = now + j.rto.backed_off(entry.timeouts);
            match entry.stage {
                EntryStage::Collecting => {
                    entry.stage = EntryStage::Reminded;
                    Self::switch_reminders(&j.cfg, self.node, seq, now, out);
                    self.counters.switch_reminders += j.cfg.switches.len() as u64;
                    events.push(PsEvent { kind: PsEventKind::SwitchReminder, job, seq, held: entry.partial.workers().len() as u32 });
                }
                EntryStage::Reminded | EntryStage::Reliable { .. } => {
                    let missing = j.cfg.workers.difference(entry.partial.workers());
                    entry.stage = EntryStage::Reliable { missing };
                    for w in missing.iter() {
                        let h = PacketHeader::new(PacketKind::RetransmitRequest, job, seq);
                        let node = j.cfg.worker_nodes[w.0 as usize];
                        out.push(GradientPacket::new(h, Payload::empty(0), self.node, Dest::Node(node), now).reliable());
                        self.counters.retransmit_requests += 1;
                    }
                    events.push(PsEvent { kind: PsEventKind::RetransmitRequest, job, seq, held: entry.partial.workers().len() as u32 });
                }
            }
            entry.deadline = next;
            self.deadlines.insert((next, job, seq));
        }
    }

    fn switch_reminders(cfg: &PsJobConfig, node: NodeId, seq: SeqNum, now: SimTime, out: &mut Vec<GradientPacket>) {
        for &sw in &cfg.switches {
            let h = PacketHeader::reminder(cfg.job, seq);
            out.push(GradientPacket::new(h, Payload::empty(0), node, Dest::Node(sw), now));
        }
    }
}
