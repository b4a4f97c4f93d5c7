//! Identifiers, the symbolic gradient payload, and the on-wire packet header.
//!
//! Gradient values are never materialised. A [`Payload`] records which
//! workers contributed to it and how many times, so that an aggregation
//! that double-counts or loses a contribution is directly observable.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::SimTime;

/// Maximum fan-in of one aggregation level (width of the header bitmaps).
pub const MAX_LEVEL_FANIN: usize = 32;

/// Maximum number of workers in one job (capacity of [`WorkerSet`]).
pub const MAX_JOB_WORKERS: usize = 256;

/// Encoded size of [`PacketHeader`] in bytes.
pub const HEADER_BYTES: usize = 23;

macro_rules! id_type {
    ($(#[$m:meta])* $name:ident($inner:ty)) => {
        $(#[$m])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(
    /// Job-local worker index; doubles as the contribution bit in a [`WorkerSet`].
    WorkerId(u16)
);
id_type!(JobId(u32));
id_type!(
    /// Per-job gradient fragment number, monotone across partitions and iterations.
    SeqNum(u32)
);
id_type!(SwitchId(u32));
id_type!(PsId(u32));
id_type!(
    /// Index of a node (worker, switch or PS) in the simulated topology.
    NodeId(u32)
);

/// Fixed-capacity set of job-local workers.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct WorkerSet([u64; MAX_JOB_WORKERS / 64]);

impl WorkerSet {
    pub const fn empty() -> Self {
        WorkerSet([0; MAX_JOB_WORKERS / 64])
    }

    /// The set `{0, 1, .., n-1}`.
    pub fn first_n(n: usize) -> Self {
        assert!(n <= MAX_JOB_WORKERS, "worker set capacity exceeded");
        let mut s = Self::empty();
        for (i, word) in s.0.iter_mut().enumerate() {
            let lo = i * 64;
            if n >= lo + 64 {
                *word = u64::MAX;
            } else if n > lo {
                *word = (1u64 << (n - lo)) - 1;
            }
        }
        s
    }

    pub fn single(w: WorkerId) -> Self {
        let mut s = Self::empty();
        s.insert(w);
        s
    }

    pub fn insert(&mut self, w: WorkerId) -> bool {
        let (i, b) = Self::slot(w);
        let fresh = self.0[i] & b == 0;
        self.0[i] |= b;
        fresh
    }

    pub fn remove(&mut self, w: WorkerId) {
        let (i, b) = Self::slot(w);
        self.0[i] &= !b;
    }

    pub fn contains(&self, w: WorkerId) -> bool {
        let (i, b) = Self::slot(w);
        self.0[i] & b != 0
    }

    pub fn len(&self) -> usize {
        self.0.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().all(|&w| w == 0)
    }

    pub fn union(&self, other: &Self) -> Self {
        let mut out = *self;
        for (a, b) in out.0.iter_mut().zip(other.0.iter()) {
            *a |= *b;
        }
        out
    }

    pub fn intersection(&self, other: &Self) -> Self {
        let mut out = *self;
        for (a, b) in out.0.iter_mut().zip(other.0.iter()) {
            *a &= *b;
        }
        out
    }

    pub fn difference(&self, other: &Self) -> Self {
        let mut out = *self;
        for (a, b) in out.0.iter_mut().zip(other.0.iter()) {
            *a &= !*b;
        }
        out
    }

    pub fn is_disjoint(&self, other: &Self) -> bool {
        self.intersection(other).is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = WorkerId> + '_ {
        self.0.iter().enumerate().flat_map(|(i, &word)| {
            let mut rest = word;
            std::iter::from_fn(move || {
                if rest == 0 {
                    return None;
                }
                let bit = rest.trailing_zeros();
                rest &= rest - 1;
                Some(WorkerId((i * 64) as u16 + bit as u16))
            })
        })
    }

    fn slot(w: WorkerId) -> (usize, u64) {
        let idx = w.0 as usize;
        assert!(idx < MAX_JOB_WORKERS, "worker id {idx} exceeds set capacity");
        (idx / 64, 1u64 << (idx % 64))
    }
}

impl fmt::Debug for WorkerSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter().map(|w| w.0)).finish()
    }
}

impl FromIterator<WorkerId> for WorkerSet {
    fn from_iter<I: IntoIterator<Item = WorkerId>>(iter: I) -> Self {
        let mut s = WorkerSet::empty();
        for w in iter {
            s.insert(w);
        }
        s
    }
}

/// Symbolic gradient value: a multiset of worker contributions.
///
/// Workers with multiplicity one live in a bitset; anything above one is
/// kept in a side map, which stays unallocated in every healthy run.
#[derive(Clone, PartialEq, Eq, Default)]
pub struct Payload {
    present: WorkerSet,
    overflow: Option<Box<BTreeMap<WorkerId, u32>>>,
    byte_size: u32,
}

impl Payload {
    pub fn empty(byte_size: u32) -> Self {
        Payload { present: WorkerSet::empty(), overflow: None, byte_size }
    }

    /// A single worker's gradient fragment.
    pub fn contribution(worker: WorkerId, byte_size: u32) -> Self {
        Payload { present: WorkerSet::single(worker), overflow: None, byte_size }
    }

    pub fn from_set(set: WorkerSet, byte_size: u32) -> Self {
        Payload { present: set, overflow: None, byte_size }
    }

    /// Builds a payload from explicit `(worker, multiplicity)` pairs.
    pub fn from_counts<I: IntoIterator<Item = (WorkerId, u32)>>(counts: I, byte_size: u32) -> Self {
        let mut p = Payload::empty(byte_size);
        for (w, m) in counts {
            if m == 0 {
                continue;
            }
            let total = p.multiplicity(w) + m;
            p.set_multiplicity(w, total);
        }
        p
    }

    pub fn byte_size(&self) -> u32 {
        self.byte_size
    }

    pub fn set_byte_size(&mut self, bytes: u32) {
        self.byte_size = bytes;
    }

    /// Workers with multiplicity of at least one.
    pub fn workers(&self) -> &WorkerSet {
        &self.present
    }

    pub fn is_empty(&self) -> bool {
        self.present.is_empty()
    }

    pub fn multiplicity(&self, w: WorkerId) -> u32 {
        if !self.present.contains(w) {
            return 0;
        }
        self.overflow.as_ref().and_then(|m| m.get(&w).copied()).unwrap_or(1)
    }

    /// True when some worker was counted more than once.
    pub fn has_duplicates(&self) -> bool {
        self.overflow.is_some()
    }

    /// Iterates `(worker, multiplicity)` in worker order.
    pub fn contributions(&self) -> impl Iterator<Item = (WorkerId, u32)> + '_ {
        self.present.iter().map(move |w| (w, self.multiplicity(w)))
    }

    fn set_multiplicity(&mut self, w: WorkerId, m: u32) {
        if m == 0 {
            self.present.remove(w);
        } else {
            self.present.insert(w);
        }
        if m >= 2 {
            self.overflow.get_or_insert_with(Default::default).insert(w, m);
        } else if let Some(map) = self.overflow.as_mut() {
            map.remove(&w);
            if map.is_empty() {
                self.overflow = None;
            }
        }
    }

    /// Adds `other` into `self` (multiset union).
    pub fn add_assign(&mut self, other: &Payload) {
        self.byte_size = self.byte_size.max(other.byte_size);
        let overlap = self.present.intersection(&other.present);
        if overlap.is_empty() && other.overflow.is_none() {
            self.present = self.present.union(&other.present);
            return;
        }
        for (w, m) in other.contributions() {
            let total = self.multiplicity(w) + m;
            self.set_multiplicity(w, total);
        }
    }
}

impl fmt::Debug for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map().entries(self.contributions().map(|(w, m)| (w.0, m))).finish()
    }
}

/// Multiset union of two payloads; `byte_size` is the larger of the two.
pub fn payload_add(a: &Payload, b: &Payload) -> Payload {
    let mut out = a.clone();
    out.add_assign(b);
    out
}

/// True iff `p` holds every worker in `workers` exactly once and nothing else.
pub fn is_complete(p: &Payload, workers: &WorkerSet) -> bool {
    debug_assert!(!workers.is_empty());
    !p.has_duplicates() && p.present == *workers
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum PacketKind {
    Gradient = 0,
    Result = 1,
    PartialToPs = 2,
    Reminder = 3,
    Query = 4,
    Retransmit = 5,
    QueryReply = 6,
    RetransmitRequest = 7,
}

impl PacketKind {
    pub fn from_tag(tag: u8) -> Option<Self> {
        use PacketKind::*;
        Some(match tag {
            0 => Gradient,
            1 => Result,
            2 => PartialToPs,
            3 => Reminder,
            4 => Query,
            5 => Retransmit,
            6 => QueryReply,
            7 => RetransmitRequest,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        use PacketKind::*;
        match self {
            Gradient => "gradient",
            Result => "result",
            PartialToPs => "partial_to_ps",
            Reminder => "reminder",
            Query => "query",
            Retransmit => "retransmit",
            QueryReply => "query_reply",
            RetransmitRequest => "retransmit_request",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PacketHeader {
    pub kind: PacketKind,
    pub job: JobId,
    pub seq: SeqNum,
    pub priority: u8,
    /// First-level contributions (worker position within its rack).
    pub bitmap0: u32,
    /// Second-level contributions (rack position within the job).
    pub bitmap1: u32,
    pub agg_index: u32,
    /// 0 for worker-to-first-switch traffic, 1 for first-to-second-level traffic.
    pub level: u8,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HeaderError {
    #[error("header needs {HEADER_BYTES} bytes, got {0}")]
    Truncated(usize),
    #[error("unknown packet kind tag {0}")]
    UnknownKind(u8),
    #[error("level must be 0 or 1, got {0}")]
    BadLevel(u8),
}

impl PacketHeader {
    pub fn new(kind: PacketKind, job: JobId, seq: SeqNum) -> Self {
        PacketHeader { kind, job, seq, priority: 0, bitmap0: 0, bitmap1: 0, agg_index: 0, level: 0 }
    }

    /// A reminder: every field except job and sequence number is zero.
    pub fn reminder(job: JobId, seq: SeqNum) -> Self {
        Self::new(PacketKind::Reminder, job, seq)
    }

    /// Canonical little-endian encoding used in trace dumps.
    pub fn encode(&self) -> [u8; HEADER_BYTES] {
        let mut out = [0u8; HEADER_BYTES];
        out[0] = self.kind as u8;
        out[1..5].copy_from_slice(&self.job.0.to_le_bytes());
        out[5..9].copy_from_slice(&self.seq.0.to_le_bytes());
        out[9] = self.priority;
        out[10] = self.level;
        out[11..15].copy_from_slice(&self.agg_index.to_le_bytes());
        out[15..19].copy_from_slice(&self.bitmap0.to_le_bytes());
        out[19..23].copy_from_slice(&self.bitmap1.to_le_bytes());
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, HeaderError> {
        if buf.len() < HEADER_BYTES {
            return Err(HeaderError::Truncated(buf.len()));
        }
        let u32_at = |i: usize| u32::from_le_bytes([buf[i], buf[i + 1], buf[i + 2], buf[i + 3]]);
        let kind = PacketKind::from_tag(buf[0]).ok_or(HeaderError::UnknownKind(buf[0]))?;
        if buf[10] > 1 {
            return Err(HeaderError::BadLevel(buf[10]));
        }
        Ok(PacketHeader {
            kind,
            job: JobId(u32_at(1)),
            seq: SeqNum(u32_at(5)),
            priority: buf[9],
            level: buf[10],
            agg_index: u32_at(11),
            bitmap0: u32_at(15),
            bitmap1: u32_at(19),
        })
    }
}

/// Where a packet is headed: one node, or every worker of a job.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dest {
    Node(NodeId),
    Group(JobId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientPacket {
    pub header: PacketHeader,
    pub payload: Payload,
    pub src: NodeId,
    pub dst: Dest,
    pub sent_at: SimTime,
    /// Carried by the lossless end-host channel.
    pub reliable: bool,
}

impl GradientPacket {
    pub fn new(header: PacketHeader, payload: Payload, src: NodeId, dst: Dest, sent_at: SimTime) -> Self {
        GradientPacket { header, payload, src, dst, sent_at, reliable: false }
    }

    pub fn reliable(mut self) -> Self {
        self.reliable = true;
        self
    }

    pub fn job(&self) -> JobId {
        self.header.job
    }

    pub fn seq(&self) -> SeqNum {
        self.header.seq
    }

    pub fn kind(&self) -> PacketKind {
        self.header.kind
    }

    /// Bytes put on the wire: the payload size, or a header-only frame for control packets.
    pub fn wire_bytes(&self, control_bytes: u32) -> u32 {
        self.payload.byte_size().max(control_bytes)
    }
}
