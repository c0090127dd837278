//! Unit normalization into integer base units.

use std::fmt;
use std::str::FromStr;

/// The physical quantity a magnitude measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnitKind {
    /// bytes
    Memory,
    /// bits per second
    Bandwidth,
    /// parts per million
    Loss,
    /// microseconds
    Latency,
}

impl FromStr for UnitKind {
    type Err = UnitError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "memory" => UnitKind::Memory,
            "bandwidth" => UnitKind::Bandwidth,
            "loss" => UnitKind::Loss,
            "latency" => UnitKind::Latency,
            other => return Err(UnitError::UnknownKind(other.to_string())),
        })
    }
}

impl fmt::Display for UnitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UnitKind::Memory => "memory",
            UnitKind::Bandwidth => "bandwidth",
            UnitKind::Loss => "loss",
            UnitKind::Latency => "latency",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum UnitError {
    #[error("unknown quantity {0:?}")]
    UnknownKind(String),
    #[error("unit {unit:?} is not a {kind} unit")]
    UnknownUnit { kind: UnitKind, unit: String },
    #[error("negative magnitude {0}")]
    Negative(i64),
    #[error("{magnitude} {unit} overflows the integer range")]
    Overflow { magnitude: i64, unit: String },
}

fn multiplier(kind: UnitKind, unit: &str) -> Option<i64> {
    Some(match (kind, unit) {
        (UnitKind::Memory, "B") => 1,
        (UnitKind::Memory, "kB") => 1 << 10,
        (UnitKind::Memory, "mB") => 1 << 20,
        (UnitKind::Memory, "gB") => 1 << 30,
        (UnitKind::Memory, "tB") => 1 << 40,
        (UnitKind::Bandwidth, "bps") => 1,
        (UnitKind::Bandwidth, "kbps") => 1_000,
        (UnitKind::Bandwidth, "mbps") => 1_000_000,
        (UnitKind::Bandwidth, "gbps") => 1_000_000_000,
        (UnitKind::Loss, "ppm") => 1,
        (UnitKind::Loss, "percent") => 10_000,
        (UnitKind::Latency, "us") => 1,
        (UnitKind::Latency, "ms") => 1_000,
        (UnitKind::Latency, "s") => 1_000_000,
        _ => return None,
    })
}

/// Converts `magnitude unit` into the integer base unit of `kind`.
pub fn normalize_unit(kind: UnitKind, magnitude: i64, unit: &str) -> Result<i64, UnitError> {
    let m = multiplier(kind, unit).ok_or_else(|| UnitError::UnknownUnit {
        kind,
        unit: unit.to_string(),
    })?;
    if magnitude < 0 {
        return Err(UnitError::Negative(magnitude));
    }
    magnitude.checked_mul(m).ok_or_else(|| UnitError::Overflow {
        magnitude,
        unit: unit.to_string(),
    })
}
