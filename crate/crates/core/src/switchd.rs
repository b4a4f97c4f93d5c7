//! Switch data plane: a pool of aggregators indexed by `hash(job, seq)`,
//! with the allocation rule selected by [`AllocationPolicy`].
//!
//! Every handler performs at most one read-modify-write of one slot, the
//! same constraint a register array imposes on real hardware. Preemption
//! is a swap: the arriving packet leaves carrying the evicted slot's
//! partial aggregate toward that job's PS, and the slot is re-initialised
//! from the arriving packet.

use fnv::FnvHashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::priority::downgrade;
use crate::types::{Dest, GradientPacket, JobId, NodeId, PacketHeader, PacketKind, Payload, SeqNum, SwitchId};
use crate::SimTime;

const HASH_C1: u64 = 0x9E37_79B9_7F4A_7C15;
const HASH_C2: u64 = 0xC2B2_AE3D_27D4_EB4F;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Aggregator index for a fragment: `mix64(job*C1 ^ seq*C2) mod pool_size`.
pub fn agg_index(job: JobId, seq: SeqNum, pool_size: u32) -> u32 {
    assert!(pool_size > 0, "empty aggregator pool");
    let key = (job.0 as u64).wrapping_mul(HASH_C1) ^ (seq.0 as u64).wrapping_mul(HASH_C2);
    (mix64(key) % pool_size as u64) as u32
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "p")]
pub enum AllocationPolicy {
    /// Priority preemption with downgrading of the defending slot.
    EsaPreemptive,
    /// First come, first served; the loser of a collision goes to its PS.
    AtpFcfs,
    /// Equal static partitions per job, indexed by `seq mod partition`.
    SwitchMlStatic,
    /// Straw man: every collision evicts the occupant.
    AlwaysPreempt,
    /// Straw man: a collision evicts the occupant with probability `p`.
    CoinFlip(f64),
}

impl AllocationPolicy {
    pub fn name(&self) -> String {
        match self {
            AllocationPolicy::EsaPreemptive => "esa".into(),
            AllocationPolicy::AtpFcfs => "atp".into(),
            AllocationPolicy::SwitchMlStatic => "switchml".into(),
            AllocationPolicy::AlwaysPreempt => "always".into(),
            AllocationPolicy::CoinFlip(p) => format!("coin{p}"),
        }
    }

    /// Parses `esa`, `atp`, `switchml`, `always` or `coin:<p>` / `coin<p>`.
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim().to_ascii_lowercase();
        Some(match s.as_str() {
            "esa" | "esa_preemptive" => AllocationPolicy::EsaPreemptive,
            "atp" | "atp_fcfs" => AllocationPolicy::AtpFcfs,
            "switchml" | "switchml_static" => AllocationPolicy::SwitchMlStatic,
            "always" | "always_preempt" => AllocationPolicy::AlwaysPreempt,
            other => {
                let p = other.strip_prefix("coin")?.trim_start_matches([':', '_', '=']);
                let p: f64 = if p.is_empty() { 0.5 } else { p.parse().ok()? };
                if !(0.0..=1.0).contains(&p) {
                    return None;
                }
                AllocationPolicy::CoinFlip(p)
            }
        })
    }

    pub fn is_valid(&self) -> bool {
        match self {
            AllocationPolicy::CoinFlip(p) => (0.0..=1.0).contains(p),
            _ => true,
        }
    }

    fn uses_priority(&self) -> bool {
        matches!(self, AllocationPolicy::EsaPreemptive)
    }
}

/// One switch-memory slot.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Aggregator {
    pub occupied: bool,
    pub job: JobId,
    pub seq: SeqNum,
    pub priority: u8,
    pub bitmap: u32,
    pub counter: u32,
    pub fanin_l1: u32,
    pub fanin_l2: u32,
    pub level: u8,
    pub value: Payload,
}

impl Aggregator {
    fn active_fanin(&self) -> u32 {
        if self.level == 0 {
            self.fanin_l1
        } else {
            self.fanin_l2
        }
    }

    pub fn is_cleared(&self) -> bool {
        *self == Aggregator::default()
    }
}

/// How this switch participates in a job's aggregation tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwitchRole {
    /// Rack switch in a two-level tree: aggregates local workers, sends one
    /// result upward. `rack_bit` is this rack's bit in `bitmap1`.
    Leaf { rack_bit: u32 },
    /// Top of the tree (or the only switch): multicasts completed results.
    Root,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwitchJob {
    pub role: SwitchRole,
    /// Contributors expected at this switch (workers for level 0, racks for level 1).
    pub fan_in: u32,
    /// Level of the traffic this switch aggregates for the job.
    pub level: u8,
    pub fanin_l1: u32,
    pub fanin_l2: u32,
    pub ps: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SwitchEventKind {
    Alloc,
    Aggr,
    CompleteMulticast,
    CompleteUpstream,
    PreemptSwap,
    FwdPs,
    Downgrade,
    ReminderHit,
    ReminderMiss,
    Duplicate,
    Unregistered,
}

impl SwitchEventKind {
    pub fn as_str(self) -> &'static str {
        use SwitchEventKind::*;
        match self {
            Alloc => "ALLOC",
            Aggr => "AGGR",
            CompleteMulticast => "COMPLETE_MULTICAST",
            CompleteUpstream => "COMPLETE_UPSTREAM",
            PreemptSwap => "PREEMPT_SWAP",
            FwdPs => "FWD_PS",
            Downgrade => "DOWNGRADE",
            ReminderHit => "REMINDER_HIT",
            ReminderMiss => "REMINDER_MISS",
            Duplicate => "DUPLICATE",
            Unregistered => "UNREGISTERED",
        }
    }
}

/// Something the switch did, for tracing and counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwitchEvent {
    pub kind: SwitchEventKind,
    pub job: JobId,
    pub seq: SeqNum,
    pub index: u32,
    /// Kind-specific: new counter (ALLOC/AGGR), evicted job (PREEMPT_SWAP),
    /// new priority (DOWNGRADE).
    pub arg: u32,
    /// Secondary argument: evicted seq for PREEMPT_SWAP, old priority for DOWNGRADE.
    pub arg2: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SwitchCounters {
    pub allocs: u64,
    pub aggregations: u64,
    pub completions: u64,
    pub preemptions: u64,
    pub forwarded_to_ps: u64,
    pub downgrades: u64,
    pub reminder_hits: u64,
    pub reminder_misses: u64,
    pub duplicates: u64,
    pub unregistered: u64,
}

#[derive(Debug, Error, PartialEq)]
pub enum SwitchConfigError {
    #[error("aggregator pool is empty")]
    EmptyPool,
    #[error("static partitions need {needed} slots but the pool has {pool}")]
    PartitionsExceedPool { needed: u64, pool: u32 },
    #[error("static partitions for jobs {0} and {1} overlap")]
    OverlappingPartitions(JobId, JobId),
    #[error("job {0} has no static partition")]
    MissingPartition(JobId),
    #[error("invalid policy {0:?}")]
    BadPolicy(AllocationPolicy),
}

pub struct SwitchState {
    pub id: SwitchId,
    pub node: NodeId,
    pool: Vec<Aggregator>,
    policy: AllocationPolicy,
    partitions: FnvHashMap<JobId, (u32, u32)>,
    jobs: FnvHashMap<JobId, SwitchJob>,
    coin: ChaCha8Rng,
    pub counters: SwitchCounters,
}

impl SwitchState {
    pub fn new(id: SwitchId, node: NodeId, pool_size: u32, policy: AllocationPolicy, coin_seed: u64) -> Result<Self, SwitchConfigError> {
        if pool_size == 0 {
            return Err(SwitchConfigError::EmptyPool);
        }
        if !policy.is_valid() {
            return Err(SwitchConfigError::BadPolicy(policy));
        }
        Ok(SwitchState {
            id,
            node,
            pool: vec![Aggregator::default(); pool_size as usize],
            policy,
            partitions: FnvHashMap::default(),
            jobs: FnvHashMap::default(),
            coin: ChaCha8Rng::seed_from_u64(coin_seed),
            counters: SwitchCounters::default(),
        })
    }

    pub fn policy(&self) -> AllocationPolicy {
        self.policy
    }

    pub fn pool_size(&self) -> u32 {
        self.pool.len() as u32
    }

    pub fn slot(&self, index: u32) -> &Aggregator {
        &self.pool[index as usize]
    }

    pub fn occupied_slots(&self) -> usize {
        self.pool.iter().filter(|a| a.occupied).count()
    }

    pub fn register_job(&mut self, job: JobId, cfg: SwitchJob) {
        self.jobs.insert(job, cfg);
    }

    pub fn job(&self, job: JobId) -> Option<&SwitchJob> {
        self.jobs.get(&job)
    }

    /// Assigns `(base, size)` ranges for static partitioning.
    pub fn set_partitions(&mut self, parts: FnvHashMap<JobId, (u32, u32)>) -> Result<(), SwitchConfigError> {
        let mut ranges: Vec<_> = parts.iter().map(|(j, &(b, s))| (b, s, *j)).collect();
        ranges.sort();
        let needed: u64 = ranges.iter().map(|r| r.1 as u64).sum();
        if needed > self.pool.len() as u64 || ranges.iter().any(|r| r.0 as u64 + r.1 as u64 > self.pool.len() as u64) {
            return Err(SwitchConfigError::PartitionsExceedPool { needed, pool: self.pool_size() });
        }
        for pair in ranges.windows(2) {
            if pair[0].0 + pair[0].1 > pair[1].0 {
                return Err(SwitchConfigError::OverlappingPartitions(pair[0].2, pair[1].2));
            }
        }
        self.partitions = parts;
        Ok(())
    }

    /// Splits the pool equally among `jobs` in the given order.
    pub fn equal_partitions(pool_size: u32, jobs: &[JobId]) -> FnvHashMap<JobId, (u32, u32)> {
        let size = if jobs.is_empty() { 0 } else { pool_size / jobs.len() as u32 };
        jobs.iter().enumerate().map(|(i, &j)| (j, (i as u32 * size, size))).collect()
    }

    pub fn partition(&self, job: JobId) -> Option<(u32, u32)> {
        self.partitions.get(&job).copied()
    }

    /// Slot index this switch uses for `(job, seq)` under its policy.
    pub fn index_for(&self, job: JobId, seq: SeqNum) -> Option<u32> {
        match self.policy {
            AllocationPolicy::SwitchMlStatic => {
                let (base, size) = self.partitions.get(&job).copied()?;
                if size == 0 {
                    return None;
                }
                Some(base + seq.0 % size)
            }
            _ => Some(agg_index(job, seq, self.pool_size())),
        }
    }

    /// Handles a gradient (level 0) or a first-level result arriving at the
    /// second level. Egress packets are appended to `out`.
    pub fn process_gradient(
        &mut self,
        pkt: GradientPacket,
        now: SimTime,
        out: &mut Vec<GradientPacket>,
        events: &mut Vec<SwitchEvent>,
    ) {
        let job = pkt.header.job;
        let seq = pkt.header.seq;
        let (Some(cfg), Some(index)) = (self.jobs.get(&job).copied(), self.index_for(job, seq)) else {
            self.counters.unregistered += 1;
            events.push(ev(SwitchEventKind::Unregistered, job, seq, 0, 0, 0));
            return;
        };
        let bit = if pkt.header.level == 0 { pkt.header.bitmap0 } else { pkt.header.bitmap1 };
        debug_assert_eq!(bit.count_ones(), 1, "contribution must set exactly one bit");
        let uses_priority = self.policy.uses_priority();
        let slot = &mut self.pool[index as usize];

        if !slot.occupied {
            Self::fill(slot, &pkt, &cfg, bit, uses_priority);
            self.counters.allocs += 1;
            events.push(ev(SwitchEventKind::Alloc, job, seq, index, 1, 0));
            if slot.counter == slot.active_fanin() {
                self.complete(index, &cfg, now, out, events);
            }
            return;
        }

        if slot.job == job && slot.seq == seq && slot.level == pkt.header.level {
            if slot.bitmap & bit != 0 {
                self.counters.duplicates += 1;
                events.push(ev(SwitchEventKind::Duplicate, job, seq, index, slot.counter, 0));
                return;
            }
            slot.value.add_assign(&pkt.payload);
            slot.bitmap |= bit;
            slot.counter += 1;
            if uses_priority {
                slot.priority = slot.priority.max(pkt.header.priority);
            }
            self.counters.aggregations += 1;
            events.push(ev(SwitchEventKind::Aggr, job, seq, index, slot.counter, 0));
            if slot.counter == slot.active_fanin() {
                self.complete(index, &cfg, now, out, events);
            }
            return;
        }

        let preempt = match self.policy {
            AllocationPolicy::EsaPreemptive => pkt.header.priority > slot.priority,
            AllocationPolicy::AtpFcfs | AllocationPolicy::SwitchMlStatic => false,
            AllocationPolicy::AlwaysPreempt => true,
            AllocationPolicy::CoinFlip(p) => self.coin.random::<f64>() < p,
        };

        if preempt {
            let evicted = std::mem::take(slot);
            Self::fill(slot, &pkt, &cfg, bit, uses_priority);
            let evicted_ps = self.jobs.get(&evicted.job).map(|c| c.ps).unwrap_or(cfg.ps);
            self.counters.preemptions += 1;
            events.push(ev(SwitchEventKind::PreemptSwap, job, seq, index, evicted.job.0, evicted.seq.0));
            out.push(Self::swap_out(pkt, evicted, evicted_ps, self.node, now));
            let slot = &self.pool[index as usize];
            if slot.counter == slot.active_fanin() {
                self.complete(index, &cfg, now, out, events);
            }
        } else {
            if uses_priority {
                let old = slot.priority;
                slot.priority = downgrade(old);
                self.counters.downgrades += 1;
                events.push(ev(SwitchEventKind::Downgrade, slot.job, slot.seq, index, slot.priority as u32, old as u32));
            }
            self.counters.forwarded_to_ps += 1;
            events.push(ev(SwitchEventKind::FwdPs, job, seq, index, 0, 0));
            let mut fwd = pkt;
            fwd.header.kind = PacketKind::PartialToPs;
            fwd.dst = Dest::Node(cfg.ps);
            fwd.src = self.node;
            fwd.sent_at = now;
            out.push(fwd);
        }
    }

    /// A reminder flushes a matching slot to the PS; anything else is a no-op.
    pub fn process_reminder(
        &mut self,
        pkt: &GradientPacket,
        now: SimTime,
        out: &mut Vec<GradientPacket>,
        events: &mut Vec<SwitchEvent>,
    ) {
        debug_assert_eq!(pkt.header.kind, PacketKind::Reminder);
        let job = pkt.header.job;
        let seq = pkt.header.seq;
        let Some(index) = self.index_for(job, seq) else {
            self.counters.reminder_misses += 1;
            events.push(ev(SwitchEventKind::ReminderMiss, job, seq, 0, 0, 0));
            return;
        };
        let slot = &self.pool[index as usize];
        if slot.occupied && slot.job == job && slot.seq == seq {
            let ps = self.jobs.get(&job).map(|c| c.ps).unwrap_or(pkt.src);
            let flushed = self.deallocate(index);
            self.counters.reminder_hits += 1;
            events.push(ev(SwitchEventKind::ReminderHit, job, seq, index, flushed.counter, 0));
            let mut header = PacketHeader::new(PacketKind::PartialToPs, job, seq);
            header.priority = flushed.priority;
            header.level = flushed.level;
            header.agg_index = index;
            if flushed.level == 0 {
                header.bitmap0 = flushed.bitmap;
            } else {
                header.bitmap1 = flushed.bitmap;
            }
            out.push(GradientPacket::new(header, flushed.value, self.node, Dest::Node(ps), now));
        } else {
            self.counters.reminder_misses += 1;
            events.push(ev(SwitchEventKind::ReminderMiss, job, seq, index, 0, 0));
        }
    }

    /// Clears a slot and returns its previous contents.
    ///
    /// # Panics
    /// If the slot is already free; that is a simulator bug.
    pub fn deallocate(&mut self, index: u32) -> Aggregator {
        let slot = &mut self.pool[index as usize];
        assert!(slot.occupied, "double deallocation of aggregator {index} on switch {}", self.id);
        std::mem::take(slot)
    }

    /// Verifies every slot's structural invariants.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (i, a) in self.pool.iter().enumerate() {
            if !a.occupied {
                if !a.is_cleared() {
                    return Err(format!("slot {i}: free but not cleared"));
                }
                continue;
            }
            if a.bitmap.count_ones() != a.counter {
                return Err(format!("slot {i}: popcount {} != counter {}", a.bitmap.count_ones(), a.counter));
            }
            if a.counter > a.active_fanin() {
                return Err(format!("slot {i}: counter {} exceeds fan-in {}", a.counter, a.active_fanin()));
            }
        }
        Ok(())
    }

    /// Contributions currently parked in aggregators, for conservation checks.
    pub fn parked(&self) -> impl Iterator<Item = (JobId, SeqNum, &Payload)> {
        self.pool.iter().filter(|a| a.occupied).map(|a| (a.job, a.seq, &a.value))
    }

    fn fill(slot: &mut Aggregator, pkt: &GradientPacket, cfg: &SwitchJob, bit: u32, uses_priority: bool) {
        slot.occupied = true;
        slot.job = pkt.header.job;
        slot.seq = pkt.header.seq;
        slot.level = pkt.header.level;
        slot.priority = if uses_priority { pkt.header.priority } else { 0 };
        slot.bitmap = bit;
        slot.counter = 1;
        slot.fanin_l1 = cfg.fanin_l1;
        slot.fanin_l2 = cfg.fanin_l2;
        slot.value = pkt.payload.clone();
    }

    fn swap_out(pkt: GradientPacket, evicted: Aggregator, ps: NodeId, node: NodeId, now: SimTime) -> GradientPacket {
        let mut out = pkt;
        out.header.kind = PacketKind::PartialToPs;
        out.header.job = evicted.job;
        out.header.seq = evicted.seq;
        out.header.priority = evicted.priority;
        out.header.level = evicted.level;
        if evicted.level == 0 {
            out.header.bitmap0 = evicted.bitmap;
        } else {
            out.header.bitmap1 = evicted.bitmap;
        }
        out.payload = evicted.value;
        out.src = node;
        out.dst = Dest::Node(ps);
        out.sent_at = now;
        out
    }

    fn complete(&mut self, index: u32, cfg: &SwitchJob, now: SimTime, out: &mut Vec<GradientPacket>, events: &mut Vec<SwitchEvent>) {
        let done = self.deallocate(index);
        self.counters.completions += 1;
        let mut header = PacketHeader::new(PacketKind::Result, done.job, done.seq);
        header.priority = done.priority;
        header.agg_index = index;
        match cfg.role {
            SwitchRole::Leaf { rack_bit } => {
                header.level = 1;
                header.bitmap0 = done.bitmap;
                header.bitmap1 = rack_bit;
                events.push(ev(SwitchEventKind::CompleteUpstream, done.job, done.seq, index, done.counter, 0));
                out.push(GradientPacket::new(header, done.value, self.node, Dest::Node(cfg.ps), now));
            }
            SwitchRole::Root => {
                header.level = done.level;
                if done.level == 0 {
                    header.bitmap0 = done.bitmap;
                } else {
                    header.bitmap1 = done.bitmap;
                }
                events.push(ev(SwitchEventKind::CompleteMulticast, done.job, done.seq, index, done.counter, 0));
                out.push(GradientPacket::new(header, done.value, self.node, Dest::Group(done.job), now));
            }
        }
    }
}

fn ev(kind: SwitchEventKind, job: JobId, seq: SeqNum, index: u32, arg: u32, arg2: u32) -> SwitchEvent {
    SwitchEvent { kind, job, seq, index, arg, arg2 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::WorkerId;

    const PS1: NodeId = NodeId(100);
    const PS2: NodeId = NodeId(101);

    fn switch(policy: AllocationPolicy, pool: u32) -> SwitchState {
        let mut sw = SwitchState::new(SwitchId(0), NodeId(50), pool, policy, 7).unwrap();
        sw.register_job(JobId(1), root_job(4, PS1));
        sw.register_job(JobId(2), root_job(2, PS2));
        sw
    }

    fn root_job(fan_in: u32, ps: NodeId) -> SwitchJob {
        SwitchJob { role: SwitchRole::Root, fan_in, level: 0, fanin_l1: fan_in, fanin_l2: 1, ps }
    }

    fn grad(job: u32, seq: u32, worker: u16, prio: u8) -> GradientPacket {
        let mut h = PacketHeader::new(PacketKind::Gradient, JobId(job), SeqNum(seq));
        h.priority = prio;
        h.bitmap0 = 1 << worker;
        h.bitmap1 = 1;
        GradientPacket::new(h, Payload::contribution(WorkerId(worker), 306), NodeId(worker as u32), Dest::Node(PS1), SimTime::ZERO)
    }

    fn run(sw: &mut SwitchState, pkt: GradientPacket) -> (Vec<GradientPacket>, Vec<SwitchEvent>) {
        let mut out = Vec::new();
        let mut evs = Vec::new();
        sw.process_gradient(pkt, SimTime::ZERO, &mut out, &mut evs);
        sw.check_invariants().unwrap();
        (out, evs)
    }

    #[test]
    fn mix64_zero_and_determinism() {
        assert_eq!(mix64(0), 0);
        assert_eq!(agg_index(JobId(0), SeqNum(0), 17), 0);
        assert_eq!(agg_index(JobId(3), SeqNum(9), 4096), agg_index(JobId(3), SeqNum(9), 4096));
    }

    // Reference values from tools/oracles/hash_spread.py.
    #[test]
    fn index_matches_reference_samples() {
        assert_eq!(agg_index(JobId(1), SeqNum(0), 4096), 3503);
        assert_eq!(agg_index(JobId(3), SeqNum(12345), 16339), 9366);
        assert_eq!(agg_index(JobId(7), SeqNum(999_999), 4096), 3616);
    }

    #[test]
    fn million_sequential_seqs_spread_evenly() {
        for (job, max_load) in [(0, 301), (7, 304)] {
            let mut counts = vec![0u32; 4096];
            for s in 0..1_000_000 {
                counts[agg_index(JobId(job), SeqNum(s), 4096) as usize] += 1;
            }
            let max = *counts.iter().max().unwrap();
            assert_eq!(max, max_load);
            assert!(max as f64 <= 1.3 * 1_000_000.0 / 4096.0);
        }
    }

    /// Pool of one slot so that every fragment collides deterministically.
    #[test]
    fn preemption_walkthrough() {
        let mut sw = switch(AllocationPolicy::EsaPreemptive, 1);
        // W1, W2 of job 1 occupy the slot.
        assert!(run(&mut sw, grad(1, 0, 0, 10)).0.is_empty());
        assert!(run(&mut sw, grad(1, 0, 1, 10)).0.is_empty());
        let a = sw.slot(0);
        assert_eq!((a.job, a.counter, a.bitmap), (JobId(1), 2, 0b11));

        // Higher-priority job 2 swaps job 1's partial out toward PS1.
        let (out, evs) = run(&mut sw, grad(2, 0, 0, 20));
        assert_eq!(evs[0].kind, SwitchEventKind::PreemptSwap);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].header.kind, PacketKind::PartialToPs);
        assert_eq!(out[0].header.job, JobId(1));
        assert_eq!(out[0].dst, Dest::Node(PS1));
        assert_eq!(out[0].payload, Payload::from_set([WorkerId(0), WorkerId(1)].into_iter().collect(), 306));
        assert_eq!((sw.slot(0).job, sw.slot(0).counter), (JobId(2), 1));

        // Second job-2 worker completes: multicast, slot freed.
        let (out, _) = run(&mut sw, grad(2, 0, 1, 20));
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].header.kind, PacketKind::Result);
        assert_eq!(out[0].dst, Dest::Group(JobId(2)));
        assert!(!sw.slot(0).occupied);
    }

    #[test]
    fn equal_priority_fails_and_downgrades() {
        let mut sw = switch(AllocationPolicy::EsaPreemptive, 1);
        run(&mut sw, grad(1, 0, 0, 8));
        let (out, evs) = run(&mut sw, grad(2, 0, 0, 8));
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].header.kind, PacketKind::PartialToPs);
        assert_eq!(out[0].header.job, JobId(2));
        assert_eq!(out[0].dst, Dest::Node(PS2));
        assert_eq!(sw.slot(0).priority, 4);
        assert!(evs.iter().any(|e| e.kind == SwitchEventKind::Downgrade));
    }

    #[test]
    fn priority_strictly_decreases_until_zero_then_yields() {
        let mut sw = switch(AllocationPolicy::EsaPreemptive, 1);
        run(&mut sw, grad(1, 0, 0, 200));
        let mut last = sw.slot(0).priority;
        let mut attempts = 0;
        while sw.slot(0).job == JobId(1) {
            run(&mut sw, grad(2, attempts, 0, 1));
            let p = sw.slot(0).priority;
            if sw.slot(0).job == JobId(1) {
                assert!(p < last || p == 0);
                last = p;
            }
            attempts += 1;
            assert!(attempts < 20);
        }
        assert_eq!(last, 0);
    }

    #[test]
    fn renewal_takes_max() {
        let mut sw = switch(AllocationPolicy::EsaPreemptive, 1);
        run(&mut sw, grad(1, 0, 0, 5));
        run(&mut sw, grad(1, 0, 1, 9));
        assert_eq!(sw.slot(0).priority, 9);
    }

    #[test]
    fn atp_never_preempts_or_touches_priority() {
        let mut sw = switch(AllocationPolicy::AtpFcfs, 1);
        run(&mut sw, grad(1, 0, 0, 1));
        assert_eq!(sw.slot(0).priority, 0);
        let (out, evs) = run(&mut sw, grad(2, 0, 0, 255));
        assert_eq!(out[0].header.job, JobId(2));
        assert!(evs.iter().all(|e| e.kind != SwitchEventKind::Downgrade));
        assert_eq!(sw.slot(0).job, JobId(1));
    }

    #[test]
    fn always_preempt_straw_man() {
        let mut sw = switch(AllocationPolicy::AlwaysPreempt, 1);
        run(&mut sw, grad(1, 0, 0, 255));
        let (out, _) = run(&mut sw, grad(2, 0, 0, 0));
        assert_eq!(out[0].header.job, JobId(1));
        assert_eq!(sw.slot(0).job, JobId(2));
    }

    #[test]
    fn reminder_hit_miss_and_empty() {
        let mut sw = switch(AllocationPolicy::EsaPreemptive, 1);
        let rem = |job, seq| GradientPacket::new(PacketHeader::reminder(JobId(job), SeqNum(seq)), Payload::empty(0), PS1, Dest::Node(NodeId(50)), SimTime::ZERO);
        let mut out = Vec::new();
        let mut evs = Vec::new();
        sw.process_reminder(&rem(1, 0), SimTime::ZERO, &mut out, &mut evs);
        assert!(out.is_empty());

        run(&mut sw, grad(2, 9, 0, 3));
        sw.process_reminder(&rem(1, 0), SimTime::ZERO, &mut out, &mut evs);
        assert!(out.is_empty());
        assert_eq!(sw.slot(0).job, JobId(2));

        run(&mut sw, grad(2, 9, 1, 3)); // completes, frees
        run(&mut sw, grad(1, 0, 1, 3));
        run(&mut sw, grad(1, 0, 2, 3));
        sw.process_reminder(&rem(1, 0), SimTime::ZERO, &mut out, &mut evs);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].payload.workers().len(), 2);
        assert!(!sw.slot(0).occupied);
        assert_eq!(evs.last().unwrap().kind, SwitchEventKind::ReminderHit);
    }

    #[test]
    #[should_panic(expected = "double deallocation")]
    fn double_deallocate_panics() {
        let mut sw = switch(AllocationPolicy::AtpFcfs, 4);
        sw.deallocate(0);
    }

    #[test]
    fn unregistered_job_is_counted() {
        let mut sw = switch(AllocationPolicy::AtpFcfs, 4);
        let (out, _) = run(&mut sw, grad(9, 0, 0, 1));
        assert!(out.is_empty());
        assert_eq!(sw.counters.unregistered, 1);
    }

    #[test]
    fn static_partitions_are_disjoint() {
        let parts = SwitchState::equal_partitions(10, &[JobId(1), JobId(2), JobId(3)]);
        let mut sw = switch(AllocationPolicy::SwitchMlStatic, 10);
        sw.set_partitions(parts).unwrap();
        assert_eq!(sw.index_for(JobId(2), SeqNum(4)), Some(3 + 4 % 3));
        let bad: FnvHashMap<_, _> = [(JobId(1), (0, 6)), (JobId(2), (5, 3))].into_iter().collect();
        assert!(matches!(sw.set_partitions(bad), Err(SwitchConfigError::OverlappingPartitions(..))));
    }

    #[test]
    fn leaf_completion_goes_upstream() {
        let mut sw = SwitchState::new(SwitchId(1), NodeId(60), 8, AllocationPolicy::EsaPreemptive, 1).unwrap();
        sw.register_job(JobId(1), SwitchJob { role: SwitchRole::Leaf { rack_bit: 0b100 }, fan_in: 2, level: 0, fanin_l1: 2, fanin_l2: 3, ps: PS1 });
        run(&mut sw, grad(1, 0, 0, 1));
        let (out, _) = run(&mut sw, grad(1, 0, 1, 1));
        assert_eq!(out[0].header.level, 1);
        assert_eq!(out[0].header.bitmap1, 0b100);
        assert_eq!(out[0].dst, Dest::Node(PS1));
    }
}
