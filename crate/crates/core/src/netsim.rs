//! Discrete-event plumbing: a deterministic event queue, store-and-forward
//! links, a routed topology, and independent seeded RNG streams.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::types::NodeId;
use crate::SimTime;

/// Independent randomness consumers. Each gets its own ChaCha stream
/// under the run's root seed, so adding a consumer never shifts the
/// draws seen by another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum RngPurpose {
    Loss = 1,
    Jitter = 2,
    StartTime = 3,
    CoinFlip = 4,
}

pub fn rng_stream(root_seed: u64, purpose: RngPurpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(purpose as u64);
    rng
}

struct Entry<A> {
    at: SimTime,
    tiebreak: u64,
    action: A,
}

impl<A> PartialEq for Entry<A> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.tiebreak) == (other.at, other.tiebreak)
    }
}
impl<A> Eq for Entry<A> {}
impl<A> PartialOrd for Entry<A> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl<A> Ord for Entry<A> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.tiebreak).cmp(&(other.at, other.tiebreak))
    }
}

/// Min-queue of actions ordered by `(fire_at, insertion order)`.
pub struct EventQueue<A> {
    heap: BinaryHeap<Reverse<Entry<A>>>,
    next_tiebreak: u64,
    now: SimTime,
}

impl<A> Default for EventQueue<A> {
    fn default() -> Self {
        EventQueue { heap: BinaryHeap::new(), next_tiebreak: 0, now: SimTime::ZERO }
    }
}

impl<A> EventQueue<A> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Schedules `action` at `at`; times in the past are clamped to now.
    pub fn schedule(&mut self, at: SimTime, action: A) {
        let at = at.max(self.now);
        let tiebreak = self.next_tiebreak;
        self.next_tiebreak += 1;
        self.heap.push(Reverse(Entry { at, tiebreak, action }));
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|e| e.0.at)
    }

    /// Pops the earliest action and advances the clock to its time.
    pub fn pop(&mut self) -> Option<(SimTime, A)> {
        let Reverse(e) = self.heap.pop()?;
        debug_assert!(e.at >= self.now, "event queue went backwards");
        self.now = e.at;
        Some((e.at, e.action))
    }
}

pub type LinkId = usize;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LinkStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub bytes_sent: u64,
}

/// A directed link with serialization, propagation and Bernoulli loss.
///
/// Packets queue behind one another (FIFO), so the departure of each packet
/// is spaced by at least its own serialization time.
#[derive(Debug, Clone)]
pub struct Link {
    pub src: NodeId,
    pub dst: NodeId,
    pub bandwidth_bps: u64,
    pub latency: SimTime,
    pub loss_prob: f64,
    pub busy_until: SimTime,
    pub stats: LinkStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendOutcome {
    Deliver(SimTime),
    Dropped,
}

impl Link {
    pub fn new(src: NodeId, dst: NodeId, bandwidth_bps: u64, latency: SimTime, loss_prob: f64) -> Self {
        Link { src, dst, bandwidth_bps, latency, loss_prob, busy_until: SimTime::ZERO, stats: LinkStats::default() }
    }

    pub fn serialization(&self, bytes: u32) -> SimTime {
        // bytes * 8 bits / bw  [s] -> picoseconds, rounded to nearest.
        let bits = bytes as u128 * 8 * 1_000_000_000_000;
        let bw = self.bandwidth_bps as u128;
        SimTime(((bits + bw / 2) / bw) as u64)
    }

    /// Queues a packet at `now`. Loss is drawn here, so a seed fully
    /// determines which packets are lost; lost packets still occupy the wire.
    pub fn schedule_send<R: Rng>(&mut self, bytes: u32, now: SimTime, lossless: bool, rng: &mut R) -> SendOutcome {
        assert!(bytes > 0, "zero-length packet");
        let depart = now.max(self.busy_until);
        let done = depart + self.serialization(bytes);
        self.busy_until = done;
        self.stats.sent += 1;
        self.stats.bytes_sent += bytes as u64;
        let lost = !lossless && self.loss_prob > 0.0 && (self.loss_prob >= 1.0 || rng.random::<f64>() < self.loss_prob);
        if lost {
            self.stats.dropped += 1;
            SendOutcome::Dropped
        } else {
            self.stats.delivered += 1;
            SendOutcome::Deliver(done + self.latency)
        }
    }

    /// Like [`Link::schedule_send`] but always loses the packet.
    pub fn schedule_forced_drop(&mut self, bytes: u32, now: SimTime) -> SendOutcome {
        let depart = now.max(self.busy_until);
        self.busy_until = depart + self.serialization(bytes);
        self.stats.sent += 1;
        self.stats.bytes_sent += bytes as u64;
        self.stats.dropped += 1;
        SendOutcome::Dropped
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Worker,
    Switch,
    Ps,
}

/// Nodes, directed links and shortest-path next hops.
#[derive(Debug, Clone, Default)]
pub struct Topology {
    pub kinds: Vec<NodeKind>,
    pub links: Vec<(NodeId, NodeId)>,
    next_hop: Vec<Vec<Option<LinkId>>>,
}

impl Topology {
    pub fn add_node(&mut self, kind: NodeKind) -> NodeId {
        self.kinds.push(kind);
        NodeId(self.kinds.len() as u32 - 1)
    }

    /// Adds both directions; returns `(a->b, b->a)`.
    pub fn add_duplex(&mut self, a: NodeId, b: NodeId) -> (LinkId, LinkId) {
        self.links.push((a, b));
        self.links.push((b, a));
        (self.links.len() - 2, self.links.len() - 1)
    }

    /// Fills the next-hop table with BFS from every node.
    pub fn compute_routes(&mut self) {
        let n = self.kinds.len();
        let mut out: Vec<Vec<LinkId>> = vec![Vec::new(); n];
        for (id, &(a, _)) in self.links.iter().enumerate() {
            out[a.0 as usize].push(id);
        }
        self.next_hop = vec![vec![None; n]; n];
        for src in 0..n {
            let mut first: Vec<Option<LinkId>> = vec![None; n];
            let mut seen = vec![false; n];
            seen[src] = true;
            let mut q = VecDeque::from([src]);
            while let Some(u) = q.pop_front() {
                for &l in &out[u] {
                    let v = self.links[l].1 .0 as usize;
                    if !seen[v] {
                        seen[v] = true;
                        first[v] = if u == src { Some(l) } else { first[u] };
                        q.push_back(v);
                    }
                }
            }
            self.next_hop[src] = first;
        }
    }

    pub fn next_hop(&self, from: NodeId, to: NodeId) -> Option<LinkId> {
        self.next_hop.get(from.0 as usize)?.get(to.0 as usize).copied().flatten()
    }

    /// Node sequence from `from` to `to` (inclusive), if reachable.
    pub fn path(&self, from: NodeId, to: NodeId) -> Option<Vec<NodeId>> {
        let mut path = vec![from];
        let mut at = from;
        while at != to {
            let l = self.next_hop(at, to)?;
            at = self.links[l].1;
            path.push(at);
            if path.len() > self.kinds.len() {
                return None;
            }
        }
        Some(path)
    }

    pub fn node_count(&self) -> usize {
        self.kinds.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serialization_of_306_bytes_at_100g() {
        let l = Link::new(NodeId(0), NodeId(1), 100_000_000_000, SimTime::from_micros(5), 0.0);
        assert_eq!(l.serialization(306), SimTime::from_picos(24_480));
    }

    #[test]
    fn back_to_back_spacing() {
        let mut rng = rng_stream(1, RngPurpose::Loss);
        let mut l = Link::new(NodeId(0), NodeId(1), 100_000_000_000, SimTime::from_micros(5), 0.0);
        let SendOutcome::Deliver(a) = l.schedule_send(306, SimTime::ZERO, false, &mut rng) else { panic!() };
        let SendOutcome::Deliver(b) = l.schedule_send(306, SimTime::ZERO, false, &mut rng) else { panic!() };
        assert_eq!(b - a, SimTime::from_picos(24_480));
        assert_eq!(a, SimTime::from_picos(24_480) + SimTime::from_micros(5));
    }

    #[test]
    fn certain_loss_drops_everything_but_reliable() {
        let mut rng = rng_stream(1, RngPurpose::Loss);
        let mut l = Link::new(NodeId(0), NodeId(1), 1_000_000_000, SimTime::ZERO, 1.0);
        for _ in 0..10 {
            assert_eq!(l.schedule_send(100, SimTime::ZERO, false, &mut rng), SendOutcome::Dropped);
        }
        assert!(matches!(l.schedule_send(100, SimTime::ZERO, true, &mut rng), SendOutcome::Deliver(_)));
        assert_eq!(l.stats.sent, l.stats.delivered + l.stats.dropped);
    }

    #[test]
    fn queue_orders_by_time_then_insertion() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(5), 'a');
        q.schedule(SimTime(1), 'b');
        q.schedule(SimTime(5), 'c');
        q.schedule(SimTime(1), 'd');
        let order: Vec<char> = std::iter::from_fn(|| q.pop().map(|e| e.1)).collect();
        assert_eq!(order, vec!['b', 'd', 'a', 'c']);
    }

    #[test]
    fn streams_are_independent() {
        let mut a = rng_stream(9, RngPurpose::Loss);
        let mut b = rng_stream(9, RngPurpose::Jitter);
        let xa: u64 = a.random();
        let xb: u64 = b.random();
        assert_ne!(xa, xb);
        assert_eq!(xa, rng_stream(9, RngPurpose::Loss).random::<u64>());
    }

    #[test]
    fn routes_through_a_star() {
        let mut t = Topology::default();
        let sw = t.add_node(NodeKind::Switch);
        let a = t.add_node(NodeKind::Worker);
        let b = t.add_node(NodeKind::Ps);
        t.add_duplex(a, sw);
        t.add_duplex(b, sw);
        t.compute_routes();
        assert_eq!(t.path(a, b).unwrap(), vec![a, sw, b]);
    }
}
