use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::session::StateLabel;

/// A scalar distribution as written in the profiles file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dist {
    Const(f64),
    Uniform { lo: f64, hi: f64 },
    /// Negative draws clamp to zero.
    Normal { mean: f64, sd: f64 },
    LogNormal { median: f64, sigma: f64 },
}

impl Dist {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let v = match *self {
            Dist::Const(v) => v,
            Dist::Uniform { lo, hi } if hi > lo => rng.random_range(lo..hi),
            Dist::Uniform { lo, .. } => lo,
            Dist::Normal { mean, sd } => match Normal::new(mean, sd) {
                Ok(d) => d.sample(rng),
                Err(_) => mean,
            },
            Dist::LogNormal { median, sigma } => match LogNormal::new(median.max(f64::MIN_POSITIVE).ln(), sigma) {
                Ok(d) => d.sample(rng),
                Err(_) => median,
            },
        };
        v.max(0.0)
    }

    /// Rounded non-negative integer draw.
    pub fn sample_count<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        self.sample(rng).round() as u64
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Dist::Const(v) => v,
            Dist::Uniform { lo, hi } => (lo + hi) / 2.0,
            Dist::Normal { mean, .. } => mean,
            Dist::LogNormal { median, sigma } => median * (sigma * sigma / 2.0).exp(),
        }
    }

    fn is_valid(&self) -> bool {
        match *self {
            Dist::Const(v) => v.is_finite() && v >= 0.0,
            Dist::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo >= 0.0 && hi >= lo,
            Dist::Normal { mean, sd } => mean.is_finite() && sd.is_finite() && sd >= 0.0,
            Dist::LogNormal { median, sigma } => median > 0.0 && sigma.is_finite() && sigma >= 0.0,
        }
    }
}

/// Poisson draw that tolerates a zero or tiny mean.
pub(crate) fn poisson<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|d| d.sample(rng) as u64).unwrap_or(0)
}

/// Extra download at the start of a state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryBurst {
    pub secs: Dist,
    pub flows: Dist,
    /// Per flow.
    pub down_bps: Dist,
}

/// Periodic upstream content uploads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UploadSpikes {
    /// Gap between spike starts.
    pub period_secs: Dist,
    pub secs: Dist,
    pub up_bps: Dist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimaryTcpProfile {
    /// Long-lived content flows opened when the state is entered.
    pub sustained_flows: Dist,
    /// Per sustained flow.
    pub sustained_down_bps: Dist,
    /// Short fetch flows started per 10 s, as a Poisson mean.
    pub new_flows_per_interval: Dist,
    pub flow_volume_bytes: Dist,
    pub flow_duration_secs: Dist,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry_burst: Option<EntryBurst>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upload_spikes: Option<UploadSpikes>,
}

impl PrimaryTcpProfile {
    pub fn burst_at_entry(&self) -> bool {
        self.entry_burst.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeCriticalProfile {
    pub active: bool,
    pub flows: Dist,
    pub upstream_pps: Dist,
    /// Upstream rate while the user is idle.
    pub idle_upstream_pps: Dist,
    /// Share of 10 s windows spent idle.
    pub idle_fraction: f64,
    /// Before crowd scaling.
    pub downstream_pps: Dist,
    /// Per-state multiplier on the downstream rate (number of nearby users).
    pub crowd_factor: Dist,
    pub up_size: Dist,
    pub down_size: Dist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateProfile {
    pub primary_tcp: PrimaryTcpProfile,
    pub time_critical_udp: TimeCriticalProfile,
    /// Used when scripts are drawn at random.
    pub duration: Dist,
}

/// Contents of a profiles file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profiles {
    #[serde(default)]
    pub note: String,
    /// Payload bytes per bulk TCP segment.
    pub mss: u32,
    /// Primary flows opened per initial prefix at session start.
    pub opening_flows_per_prefix: Dist,
    /// Upstream request size on content flows.
    pub request_size: Dist,
    pub states: BTreeMap<StateLabel, StateProfile>,
}

const DEFAULT_PROFILES: &str = include_str!("default_profiles.json");

impl Default for Profiles {
    fn default() -> Self {
        Profiles::from_json(DEFAULT_PROFILES).expect("bundled profiles are valid")
    }
}

impl Profiles {
    pub fn from_json(text: &str) -> Result<Profiles, SynthError> {
        let p: Profiles = serde_json::from_str(text).map_err(|e| SynthError::BadProfiles(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Profiles, SynthError> {
        Profiles::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("profiles serialize");
        s.push('\n');
        s
    }

    pub fn get(&self, state: StateLabel) -> Result<&StateProfile, SynthError> {
        self.states.get(&state).ok_or(SynthError::MissingProfile(state))
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::BadProfiles(m));
        if self.mss == 0 || self.mss > 65_000 {
            return bad(format!("mss {} out of range", self.mss));
        }
        if !self.opening_flows_per_prefix.is_valid() || !self.request_size.is_valid() {
            return bad("invalid global distribution".into());
        }
        for (state, p) in &self.states {
            let t = &p.primary_tcp;
            let u = &p.time_critical_udp;
            let mut dists = vec![
                t.sustained_flows,
                t.sustained_down_bps,
                t.new_flows_per_interval,
                t.flow_volume_bytes,
                t.flow_duration_secs,
                u.flows,
                u.upstream_pps,
                u.idle_upstream_pps,
                u.downstream_pps,
                u.crowd_factor,
                u.up_size,
                u.down_size,
                p.duration,
            ];
            if let Some(b) = &t.entry_burst {
                dists.extend([b.secs, b.flows, b.down_bps]);
            }
            if let Some(s) = &t.upload_spikes {
                dists.extend([s.period_secs, s.secs, s.up_bps]);
            }
            if dists.iter().any(|d| !d.is_valid()) {
                return bad(format!("{state}: invalid distribution"));
            }
            if !(0.0..=1.0).contains(&u.idle_fraction) {
                return bad(format!("{state}: idle_fraction outside [0, 1]"));
            }
        }
        Ok(())
    }
}
