//! Packet-level discrete-event simulator for in-network gradient aggregation.
//!
//! The switch keeps a pool of aggregators shared by every training job.
//! Several allocation policies are modelled: priority preemption with
//! downgrading, first-come-first-serve, equal static partitions, and two
//! straw-man preemption rules. Workers and per-job parameter servers
//! implement windowed pushing, result caching, PS-side merging of partial
//! aggregates, reminder packets and loss recovery, so every fragment is
//! delivered exactly once even when preemption splits it across the switch
//! and the PS.
//!
//! Module map:
//! - [`types`]: identifiers, symbolic payloads, packet header codec
//! - [`priority`]: priority score, 8-bit quantization, downgrading
//! - [`switchd`]: aggregator pool and allocation policies
//! - [`endhost`]: worker and PS state machines
//! - [`netsim`]: event queue, links, topology, seeded RNG streams
//! - [`workload`]: two-layer DNN jobs, JCT and utilization accounting
//! - [`sim`]: the event loop tying everything together
//! - [`trace`], [`config`], [`harness`]: trace export, scenario files, run matrices

use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use serde::{Deserialize, Serialize};

pub mod config;
pub mod endhost;
pub mod harness;
pub mod netsim;
pub mod priority;
pub mod scenarios;
pub mod sim;
pub mod switchd;
pub mod trace;
pub mod types;
pub mod workload;

pub use config::{ConfigError, ScenarioConfig};
pub use sim::{RunOutcome, Simulation};
pub use switchd::AllocationPolicy;

/// Simulated time with picosecond resolution.
///
/// Serialization of a 306-byte packet at 100 Gb/s takes 24.48 ns, so
/// nanoseconds alone would accumulate rounding drift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_picos(ps: u64) -> Self {
        SimTime(ps)
    }

    pub const fn from_nanos(ns: u64) -> Self {
        SimTime(ns * 1_000)
    }

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us * 1_000_000)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000_000_000)
    }

    pub fn from_secs_f64(s: f64) -> Self {
        SimTime((s * 1e12).round().max(0.0) as u64)
    }

    pub const fn as_picos(self) -> u64 {
        self.0
    }

    /// Whole nanoseconds, truncating.
    pub const fn as_nanos(self) -> u64 {
        self.0 / 1_000
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 * 1e-12
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }

    pub fn mul(self, k: u64) -> SimTime {
        SimTime(self.0.saturating_mul(k))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_add(rhs.0))
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        *self = *self + rhs;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.as_nanos())
    }
}
