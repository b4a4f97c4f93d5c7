//! Gradient priority: the per-layer score, its 8-bit wire encoding, and
//! the halving applied to an aggregator that fends off a collision.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::JobId;

/// Floor for the remaining-time estimate, in seconds.
pub const MIN_REMAINING_TIME: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum PriorityError {
    #[error("layer {layer} outside 1..={layers}")]
    LayerOutOfRange { layer: u32, layers: u32 },
    #[error("invalid job profile: {0}")]
    BadProfile(&'static str),
}

/// Per-job inputs to the priority score. Times are in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JobProfile {
    pub job: JobId,
    pub remaining_time: f64,
    pub layer_count: u32,
    pub comm_overhead: f64,
    pub comp_overhead: f64,
}

impl JobProfile {
    pub fn validate(&self) -> Result<(), PriorityError> {
        if !(self.remaining_time > 0.0) {
            return Err(PriorityError::BadProfile("remaining_time must be > 0"));
        }
        if self.layer_count == 0 {
            return Err(PriorityError::BadProfile("layer_count must be >= 1"));
        }
        if !(self.comm_overhead > 0.0) || !(self.comp_overhead > 0.0) {
            return Err(PriorityError::BadProfile("comm/comp overheads must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct RawPriority(f64);

impl RawPriority {
    pub fn new(value: f64) -> Option<Self> {
        (value > 0.0 && value.is_finite()).then_some(RawPriority(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// `(1 / T) * (L / l) * (comm / comp)`: shorter remaining time, front layers
/// and communication-heavy models all rank higher.
pub fn compute_priority(profile: &JobProfile, layer: u32) -> Result<RawPriority, PriorityError> {
    profile.validate()?;
    if layer == 0 || layer > profile.layer_count {
        return Err(PriorityError::LayerOutOfRange { layer, layers: profile.layer_count });
    }
    let value = (1.0 / profile.remaining_time)
        * (profile.layer_count as f64 / layer as f64)
        * (profile.comm_overhead / profile.comp_overhead);
    Ok(RawPriority(value))
}

/// How the score is squeezed into 8 bits. Both put `p_ref` at 128.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    /// Every doubling adds `k`.
    #[default]
    Log,
    /// Fixed-point, proportional to the score, so a right shift halves it.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantScale {
    #[serde(default)]
    pub mode: QuantMode,
    pub k: f64,
    pub p_ref: f64,
}

impl Default for QuantScale {
    fn default() -> Self {
        QuantScale { mode: QuantMode::Log, k: 16.0, p_ref: 1.0 }
    }
}

impl QuantScale {
    pub fn is_valid(&self) -> bool {
        self.k > 0.0 && self.p_ref > 0.0 && self.k.is_finite() && self.p_ref.is_finite()
    }
}

pub fn quantize_priority(raw: RawPriority, scale: QuantScale) -> u8 {
    let steps = match scale.mode {
        QuantMode::Log => (scale.k * (raw.0 / scale.p_ref).log2()).round() + 128.0,
        QuantMode::Linear => (128.0 * raw.0 / scale.p_ref).round(),
    };
    steps.clamp(0.0, 255.0) as u8
}

/// Halves a stored priority.
pub fn downgrade(stored: u8) -> u8 {
    stored >> 1
}

/// Remaining-time input for the score: the known estimate when there is one,
/// otherwise the service attained so far, floored at one millisecond.
pub fn estimate_remaining_time(known: Option<f64>, attained_service: f64) -> f64 {
    match known {
        Some(t) if t > 0.0 => t.max(MIN_REMAINING_TIME),
        _ => attained_service.max(MIN_REMAINING_TIME),
    }
}
