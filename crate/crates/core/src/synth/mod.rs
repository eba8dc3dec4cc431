//! Labeled synthetic traffic: scripted metaverse sessions whose handshakes
//! carry the signature sizes and whose per-state volumes follow a profiles
//! file, plus non-metaverse background flows.

mod background;
mod gen;
mod packet;
mod profile;
mod truth;

use std::net::Ipv4Addr;

use ipnet::IpNet;
use rayon::prelude::*;
use thiserror::Error;

pub use background::{background_server_net, generate_background, BackgroundConfig};
pub use gen::{
    generate_session, primary_server_net, random_segments, time_critical_server_net, SessionScript,
    DEFAULT_TRACE_START,
};
pub use packet::{client_hello, emit_pcap, write_pcap, Content, SynthPacket, MAX_PAYLOAD};
pub use profile::{Dist, EntryBurst, PrimaryTcpProfile, Profiles, StateProfile, TimeCriticalProfile, UploadSpikes};
pub use truth::{BackgroundTruth, FlowTruth, GroundTruthSidecar, Segment, TraceTruth};

use crate::session::StateLabel;
use crate::signatures::SignatureSet;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("application {0} is not in the signature model")]
    UnknownApp(String),
    #[error("state {state} is not available in {app}")]
    UnknownStateForApp { app: String, state: StateLabel },
    #[error("no profile for state {0}")]
    MissingProfile(StateLabel),
    #[error("invalid script: {0}")]
    InvalidScript(String),
    #[error("invalid profiles: {0}")]
    BadProfiles(String),
    #[error("invalid truth file: {0}")]
    BadTruth(String),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    /// Interval length used to label the sidecar.
    pub interval_len: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { interval_len: 10.0 }
    }
}

/// Local network of generated session users.
pub fn session_users_net() -> IpNet {
    "10.0.0.0/8".parse().expect("valid prefix")
}

/// The `i`-th session user address, 10.0.x.y.
pub fn session_user(i: usize) -> Ipv4Addr {
    Ipv4Addr::new(10, 0, (i / 250) as u8, (i % 250 + 2) as u8)
}

/// `cidr,as_label` rows covering every server block the generator uses.
pub fn server_as_map(signatures: &SignatureSet) -> Vec<(IpNet, String)> {
    let mut rows = Vec::new();
    for (i, m) in signatures.metaverses.iter().enumerate() {
        rows.push((IpNet::V4(primary_server_net(i)), format!("{}-primary", m.name.replace(' ', ""))));
        rows.push((IpNet::V4(time_critical_server_net(i)), format!("{}-realtime", m.name.replace(' ', ""))));
    }
    rows.push((IpNet::V4(background_server_net()), "background".to_string()));
    rows
}

/// A merged trace and its truth.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub packets: Vec<SynthPacket>,
    pub truth: TraceTruth,
}

/// Generates every script (in parallel) and the optional background, then
/// merges the streams by timestamp. Equal timestamps keep script order,
/// then background.
pub fn generate_corpus(
    scripts: &[SessionScript],
    signatures: &SignatureSet,
    profiles: &Profiles,
    cfg: &SynthConfig,
    background: Option<(&BackgroundConfig, u64)>,
) -> Result<Corpus, SynthError> {
    let sessions: Vec<(Vec<SynthPacket>, GroundTruthSidecar)> =
        scripts.par_iter().map(|s| generate_session(s, signatures, profiles, cfg)).collect::<Result<_, _>>()?;
    let mut packets = Vec::with_capacity(sessions.iter().map(|(p, _)| p.len()).sum());
    let mut truth = TraceTruth::default();
    for (p, sidecar) in sessions {
        packets.extend(p);
        truth.sessions.push(sidecar);
    }
    if let Some((bcfg, seed)) = background {
        let (p, bt) = generate_background(bcfg, Some(signatures), seed);
        packets.extend(p);
        truth.background = Some(bt);
    }
    packets.sort_by_key(|p| p.ts);
    Ok(Corpus { packets, truth })
}
