//! Event trace: compact records, a running FNV digest, and CSV export.
//!
//! The digest covers every record whether or not the records themselves
//! are kept, so two runs can be compared without storing their traces.

use std::hash::Hasher;
use std::io::{self, Write};

use fnv::FnvHasher;
use serde::Serialize;

use crate::types::{JobId, NodeId, SeqNum};
use crate::SimTime;

pub const CSV_HEADER: &str = "time_ns,node,event,job,seq,detail";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TraceRecord {
    pub time: SimTime,
    pub node: NodeId,
    pub event: &'static str,
    pub job: JobId,
    pub seq: SeqNum,
    pub a: u64,
    pub b: u64,
}

impl TraceRecord {
    /// Human-readable detail column.
    pub fn detail(&self) -> String {
        let (a, b) = (self.a, self.b);
        match self.event {
            "ALLOC" | "AGGR" | "DUPLICATE" => format!("idx={a} count={b}"),
            "COMPLETE_MULTICAST" | "COMPLETE_UPSTREAM" | "REMINDER_HIT" => format!("idx={a} contributors={b}"),
            "PREEMPT_SWAP" => format!("idx={a} evicted={}/{}", b >> 32, b & 0xffff_ffff),
            "DOWNGRADE" => format!("idx={a} priority={}->{}", b >> 32, b & 0xffff_ffff),
            "FWD_PS" | "REMINDER_MISS" | "UNREGISTERED" => format!("idx={a}"),
            "PS_ENTRY" | "PS_MERGE" | "PS_MULTICAST" | "PS_REMINDER" | "PS_QUERY" | "PS_RETX_REQ" | "PS_LATE" | "ALARM"
            | "WORKER_REMINDER" => format!("held={a}"),
            "DROP" => format!("kind={} to={b}", kind_name(a)),
            "REMINDER" => (if a == 0 { "dupack" } else { "timeout" }).to_string(),
            "PUSH" | "COMP_DONE" => format!("iteration={a}"),
            "QUERY_REPLY" => (if a == 1 { "cached" } else { "empty" }).to_string(),
            "RESULT" | "DUP_RESULT" | "RETRANSMIT" => String::new(),
            _ => format!("a={a} b={b}"),
        }
    }

    /// Folds the record into a running digest. Event names are hashed once
    /// per distinct pointer, which is stable because they are static strings.
    fn fold(&self, h: u64, event_hash: u64) -> u64 {
        let mut h = h;
        for w in [
            self.time.as_picos(),
            ((self.node.0 as u64) << 32) | self.job.0 as u64,
            ((self.seq.0 as u64) << 32) ^ event_hash,
            self.a,
            self.b,
        ] {
            h = crate::switchd::mix64(h ^ w);
        }
        h
    }
}

fn kind_name(tag: u64) -> &'static str {
    crate::types::PacketKind::from_tag(tag as u8).map_or("?", |k| k.as_str())
}

/// Digest plus optional record buffer.
pub struct Tracer {
    state: u64,
    last_event: (&'static str, u64),
    keep: bool,
    records: Vec<TraceRecord>,
    count: u64,
}

impl Tracer {
    pub fn new(keep: bool) -> Self {
        Tracer { state: 0xcbf2_9ce4_8422_2325, last_event: ("", 0), keep, records: Vec::new(), count: 0 }
    }

    pub fn record(&mut self, r: TraceRecord) {
        if !std::ptr::eq(self.last_event.0, r.event) {
            let mut h = FnvHasher::default();
            h.write(r.event.as_bytes());
            self.last_event = (r.event, h.finish());
        }
        self.state = r.fold(self.state, self.last_event.1);
        self.count += 1;
        if self.keep {
            self.records.push(r);
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn digest(&self) -> String {
        format!("{:016x}", self.state)
    }

    pub fn into_records(self) -> Option<Vec<TraceRecord>> {
        self.keep.then_some(self.records)
    }
}

/// Writes the trace as CSV. `names` maps node ids to labels.
pub fn export_csv<W: Write>(records: &[TraceRecord], names: &[String], mut w: W) -> io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        let node = names.get(r.node.0 as usize).map_or_else(|| r.node.to_string(), |s| s.clone());
        writeln!(w, "{},{},{},{},{},{}", r.time.as_nanos(), node, r.event, r.job, r.seq, r.detail())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(event: &'static str, a: u64) -> TraceRecord {
        TraceRecord { time: SimTime::from_nanos(1500), node: NodeId(2), event, job: JobId(1), seq: SeqNum(0), a, b: 1 }
    }

    #[test]
    fn csv_shape() {
        let mut buf = Vec::new();
        export_csv(&[rec("ALLOC", 3)], &["w0".into(), "w1".into(), "sw0".into()], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "time_ns,node,event,job,seq,detail\n1500,sw0,ALLOC,1,0,idx=3 count=1\n");
    }

    #[test]
    fn digest_tracks_content_not_storage() {
        let mut a = Tracer::new(true);
        let mut b = Tracer::new(false);
        let mut c = Tracer::new(false);
        for t in [&mut a, &mut b] {
            t.record(rec("ALLOC", 0));
            t.record(rec("AGGR", 0));
        }
        c.record(rec("AGGR", 0));
        c.record(rec("ALLOC", 0));
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
        assert!(b.into_records().is_none());
        assert_eq!(a.into_records().unwrap().len(), 2);
    }
}
