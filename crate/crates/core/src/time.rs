use std::fmt;

use serde::{Deserialize, Serialize};

const NANOS_PER_SEC: u64 = 1_000_000_000;

/// Capture timestamp in nanoseconds since the Unix epoch.
///
/// All interval arithmetic is done on the integer representation so that
/// replays bin packets identically regardless of float rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    pub fn from_secs_f64(secs: f64) -> Self {
        Timestamp((secs.max(0.0) * NANOS_PER_SEC as f64).round() as u64)
    }

    pub fn from_parts(secs: u64, nanos: u32) -> Self {
        Timestamp(secs * NANOS_PER_SEC + nanos as u64)
    }

    pub fn from_micros(micros: u64) -> Self {
        Timestamp(micros * 1_000)
    }

    pub fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / NANOS_PER_SEC as f64
    }

    pub fn secs(self) -> u64 {
        self.0 / NANOS_PER_SEC
    }

    pub fn subsec_nanos(self) -> u32 {
        (self.0 % NANOS_PER_SEC) as u32
    }

    /// Saturating difference in nanoseconds.
    pub fn nanos_since(self, earlier: Timestamp) -> u64 {
        self.0.saturating_sub(earlier.0)
    }

    pub fn secs_since(self, earlier: Timestamp) -> f64 {
        self.nanos_since(earlier) as f64 / NANOS_PER_SEC as f64
    }

    pub fn add_secs(self, secs: f64) -> Timestamp {
        Timestamp(self.0 + (secs.max(0.0) * NANOS_PER_SEC as f64).round() as u64)
    }

    pub fn add_nanos(self, nanos: u64) -> Timestamp {
        Timestamp(self.0 + nanos)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:09}", self.secs(), self.subsec_nanos())
    }
}

pub(crate) fn secs_to_nanos(secs: f64) -> u64 {
    (secs.max(0.0) * NANOS_PER_SEC as f64).round() as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parts_round_trip() {
        let t = Timestamp::from_parts(1_700_000_000, 123_456_789);
        assert_eq!(t.secs(), 1_700_000_000);
        assert_eq!(t.subsec_nanos(), 123_456_789);
        assert_eq!(t.to_string(), "1700000000.123456789");
    }

    #[test]
    fn differences_saturate() {
        let a = Timestamp(10);
        let b = Timestamp(25);
        assert_eq!(b.nanos_since(a), 15);
        assert_eq!(a.nanos_since(b), 0);
    }
}
