use std::collections::HashMap;

use proptest::prelude::*;

use ina_sim::priority::{compute_priority, downgrade, quantize_priority, JobProfile, QuantScale, RawPriority};
use ina_sim::switchd::{agg_index, AllocationPolicy, SwitchEventKind, SwitchJob, SwitchRole, SwitchState};
use ina_sim::types::{
    payload_add, Dest, GradientPacket, JobId, NodeId, PacketHeader, PacketKind, Payload, SeqNum, SwitchId, WorkerId,
};
use ina_sim::SimTime;

fn payload() -> impl Strategy<Value = Payload> {
    prop::collection::vec((0u16..256, 1u32..4), 0..12)
        .prop_map(|c| Payload::from_counts(c.into_iter().map(|(w, n)| (WorkerId(w), n)), 306))
}

fn header() -> impl Strategy<Value = PacketHeader> {
    (0u8..8, any::<u32>(), any::<u32>(), any::<u8>(), any::<u32>(), any::<u32>(), any::<u32>(), 0u8..2).prop_map(
        |(kind, job, seq, priority, bitmap0, bitmap1, agg_index, level)| PacketHeader {
            kind: PacketKind::from_tag(kind).unwrap(),
            job: JobId(job),
            seq: SeqNum(seq),
            priority,
            bitmap0,
            bitmap1,
            agg_index,
            level,
        },
    )
}

proptest! {
    #[test]
    fn payload_add_is_commutative_and_associative(a in payload(), b in payload(), c in payload()) {
        prop_assert_eq!(payload_add(&a, &b), payload_add(&b, &a));
        prop_assert_eq!(payload_add(&payload_add(&a, &b), &c), payload_add(&a, &payload_add(&b, &c)));
        prop_assert_eq!(payload_add(&a, &Payload::empty(306)), a);
    }

    #[test]
    fn header_round_trips(h in header()) {
        let bytes = h.encode();
        prop_assert_eq!(PacketHeader::decode(&bytes).unwrap(), h);
    }

    #[test]
    fn quantization_never_inverts_order(a in -8.0f64..8.0, b in -8.0f64..8.0, k in 1.0f64..32.0, p_ref in 0.01f64..100.0) {
        let scale = QuantScale { k, p_ref, ..Default::default() };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let q = |e: f64| quantize_priority(RawPriority::new(p_ref * e.exp2()).unwrap(), scale);
        prop_assert!(q(lo) <= q(hi));
    }

    #[test]
    fn front_layers_rank_at_least_as_high(t in 1e-3f64..10.0, ratio in 0.1f64..10.0, layers in 2u32..16, l in 1u32..15) {
        prop_assume!(l < layers);
        let p = JobProfile { job: JobId(0), remaining_time: t, layer_count: layers, comm_overhead: ratio, comp_overhead: 1.0 };
        let scale = QuantScale::default();
        let front = quantize_priority(compute_priority(&p, l).unwrap(), scale);
        let back = quantize_priority(compute_priority(&p, l + 1).unwrap(), scale);
        prop_assert!(front >= back);
    }

    #[test]
    fn downgrading_reaches_zero_within_eight_steps(start in any::<u8>()) {
        let mut p = start;
        for _ in 0..8 {
            p = downgrade(p);
        }
        prop_assert_eq!(p, 0);
    }

    #[test]
    fn hash_stays_in_pool(job in any::<u32>(), seq in any::<u32>(), pool in 1u32..100_000) {
        prop_assert!(agg_index(JobId(job), SeqNum(seq), pool) < pool);
    }
}

/// Priority-free first-come-first-serve pool, written independently of the
/// switch model: a slot is taken by the first fragment to hash there and
/// freed when the fragment completes or is flushed.
#[derive(Default)]
struct FcfsOracle {
    slots: HashMap<u32, (u32, u32, u32)>,
}

#[derive(Debug, PartialEq)]
enum Outcome {
    Held,
    Done,
    ToPs,
    Dup,
    Flushed,
    Nothing,
}

impl FcfsOracle {
    fn gradient(&mut self, idx: u32, job: u32, seq: u32, worker: u32, fan_in: u32) -> Outcome {
        match self.slots.get_mut(&idx) {
            None => {
                if fan_in == 1 {
                    return Outcome::Done;
                }
                self.slots.insert(idx, (job, seq, 1 << worker));
                Outcome::Held
            }
            Some((j, s, bits)) if *j == job && *s == seq => {
                if *bits & (1 << worker) != 0 {
                    return Outcome::Dup;
                }
                *bits |= 1 << worker;
                if bits.count_ones() == fan_in {
                    self.slots.remove(&idx);
                    Outcome::Done
                } else {
                    Outcome::Held
                }
            }
            Some(_) => Outcome::ToPs,
        }
    }

    fn reminder(&mut self, idx: u32, job: u32, seq: u32) -> Outcome {
        match self.slots.get(&idx) {
            Some(&(j, s, _)) if j == job && s == seq => {
                self.slots.remove(&idx);
                Outcome::Flushed
            }
            _ => Outcome::Nothing,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Grad { job: u32, seq: u32, worker: u16, prio: u8 },
    Remind { job: u32, seq: u32 },
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        8 => (0u32..3, 0u32..24, 0u16..4, any::<u8>()).prop_map(|(job, seq, worker, prio)| Op::Grad { job, seq, worker, prio }),
        1 => (0u32..3, 0u32..24).prop_map(|(job, seq)| Op::Remind { job, seq }),
    ]
}

const FAN_IN: [u32; 3] = [4, 2, 3];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn atp_matches_fcfs_oracle(ops in prop::collection::vec(op(), 10_000)) {
        const POOL: u32 = 16;
        let mut sw = SwitchState::new(SwitchId(0), NodeId(99), POOL, AllocationPolicy::AtpFcfs, 1).unwrap();
        for (j, &fan_in) in FAN_IN.iter().enumerate() {
            sw.register_job(JobId(j as u32), SwitchJob { role: SwitchRole::Root, fan_in, level: 0, fanin_l1: fan_in, fanin_l2: 1, ps: NodeId(200 + j as u32) });
        }
        let mut oracle = FcfsOracle::default();
        let (mut out, mut evs) = (Vec::new(), Vec::new());
        for op in ops {
            out.clear();
            evs.clear();
            let expected = match op {
                Op::Grad { job, seq, worker, prio } => {
                    let worker = worker % FAN_IN[job as usize] as u16;
                    let mut h = PacketHeader::new(PacketKind::Gradient, JobId(job), SeqNum(seq));
                    h.priority = prio;
                    h.bitmap0 = 1 << worker;
                    let pkt = GradientPacket::new(h, Payload::contribution(WorkerId(worker), 306), NodeId(worker as u32), Dest::Node(NodeId(99)), SimTime::ZERO);
                    sw.process_gradient(pkt, SimTime::ZERO, &mut out, &mut evs);
                    oracle.gradient(agg_index(JobId(job), SeqNum(seq), POOL), job, seq, worker as u32, FAN_IN[job as usize])
                }
                Op::Remind { job, seq } => {
                    let pkt = GradientPacket::new(PacketHeader::reminder(JobId(job), SeqNum(seq)), Payload::empty(0), NodeId(200), Dest::Node(NodeId(99)), SimTime::ZERO);
                    sw.process_reminder(&pkt, SimTime::ZERO, &mut out, &mut evs);
                    oracle.reminder(agg_index(JobId(job), SeqNum(seq), POOL), job, seq)
                }
            };
            let kinds: Vec<SwitchEventKind> = evs.iter().map(|e| e.kind).collect();
            let got = match kinds.as_slice() {
                [SwitchEventKind::Alloc] | [SwitchEventKind::Aggr] => Outcome::Held,
                [SwitchEventKind::Alloc | SwitchEventKind::Aggr, SwitchEventKind::CompleteMulticast] => Outcome::Done,
                [SwitchEventKind::FwdPs] => Outcome::ToPs,
                [SwitchEventKind::Duplicate] => Outcome::Dup,
                [SwitchEventKind::ReminderHit] => Outcome::Flushed,
                [SwitchEventKind::ReminderMiss] => Outcome::Nothing,
                other => panic!("unexpected events {other:?}"),
            };
            prop_assert_eq!(got, expected);
            prop_assert_eq!(sw.counters.preemptions + sw.counters.downgrades, 0);
            for i in 0..POOL {
                prop_assert_eq!(sw.slot(i).priority, 0);
                prop_assert_eq!(sw.slot(i).occupied, oracle.slots.contains_key(&i));
            }
        }
    }
}
