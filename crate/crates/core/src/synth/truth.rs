use std::net::IpAddr;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::flowtable::{DomainType, FlowKey};
use crate::session::StateLabel;

/// One scripted activity and how long it lasts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub state: StateLabel,
    pub secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowTruth {
    pub key: FlowKey,
    pub domain_type: DomainType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix: Option<String>,
    pub rtt_ms: f64,
    /// First and last packet.
    pub start: f64,
    pub end: f64,
}

impl FlowTruth {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// Ground truth of one generated session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSidecar {
    pub app: String,
    pub user: IpAddr,
    pub seed: u64,
    /// First packet of the script.
    pub script_start: f64,
    /// Packet that completes the initial prefix set.
    pub session_start: f64,
    /// End of the last scripted segment.
    pub session_end: f64,
    pub interval_len: f64,
    /// True state of each interval from `session_start`; the last one may
    /// be cut short by `session_end`.
    pub intervals: Vec<StateLabel>,
    pub segments: Vec<Segment>,
    pub flows: Vec<FlowTruth>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BackgroundTruth {
    pub tcp_flows: u64,
    pub udp_flows: u64,
    /// Flows built by changing one size of a real signature.
    pub near_misses: u64,
    /// Exact signature copies (only when collision exclusion is off).
    pub planted: Vec<FlowKey>,
}

impl BackgroundTruth {
    pub fn flows(&self) -> u64 {
        self.tcp_flows + self.udp_flows
    }
}

/// Truth file of a generated trace.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceTruth {
    pub sessions: Vec<GroundTruthSidecar>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<BackgroundTruth>,
}

impl TraceTruth {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("truth serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<TraceTruth, SynthError> {
        serde_json::from_str(text).map_err(|e| SynthError::BadTruth(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SynthError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<TraceTruth, SynthError> {
        TraceTruth::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn merge(&mut self, other: TraceTruth) {
        self.sessions.extend(other.sessions);
        match (&mut self.background, other.background) {
            (Some(a), Some(b)) => {
                a.tcp_flows += b.tcp_flows;
                a.udp_flows += b.udp_flows;
                a.near_misses += b.near_misses;
                a.planted.extend(b.planted);
            }
            (None, b) => self.background = b,
            _ => {}
        }
    }
}
