//! Payload-size-sequence signatures: the model, its file format, the
//! exact-match runtime matcher and the offline training procedures.

mod builtin;
mod matcher;
mod train;

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use builtin::builtin_signature_set;
pub use matcher::{MatchOutcome, SignatureMatcher};
pub use train::{
    primary_session_prefixes, train_primary_signatures, train_udp_signatures, LabeledCapture, PrimaryTraining,
    UdpTrainingConfig,
};

use crate::flowtable::DEFAULT_K_MAX;

/// Current model file schema version.
pub const MODEL_VERSION: u32 = 1;

/// Ports watched for time-critical UDP flows unless configured otherwise.
pub const DEFAULT_UDP_PORTS: [u16; 3] = [5055, 5056, 5058];

#[derive(Debug, Error)]
pub enum SignatureError {
    #[error("no TLS flows toward primary domain '{0}' in the training captures")]
    NoPrimaryFlows(String),
    #[error("sessions of {metaverse} disagree on the required prefix set: {detail}")]
    InconsistentPrefixOrder { metaverse: String, detail: String },
    #[error("sequence {seq:?} on port {port} claimed by both {first} and {second}")]
    AmbiguousSignature { port: u16, seq: Vec<u32>, first: String, second: String },
    #[error("model schema version {found}, expected {expected}")]
    SchemaMismatch { found: u64, expected: u32 },
    #[error("corrupt model: {0}")]
    CorruptModel(String),
    #[error("model I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrimaryEntry {
    pub prefix: String,
    pub seq: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UdpEntry {
    pub port: u16,
    pub seq: Vec<u32>,
}

/// Everything the model knows about one metaverse application.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaverseSignatures {
    pub name: String,
    /// Primary domain label, e.g. `shapevrcloud`.
    pub domain: String,
    /// Prefixes that must all be seen before a session counts as started,
    /// in their usual order of appearance.
    pub initial_hs_prefixes: Vec<String>,
    pub primaries: Vec<PrimaryEntry>,
    #[serde(default)]
    pub udp: Vec<UdpEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrimarySignature<'a> {
    pub metaverse: &'a str,
    pub domain: &'a str,
    pub prefix: &'a str,
    pub size_seq: &'a [u32],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UdpSignature<'a> {
    pub metaverse: &'a str,
    pub port: u16,
    pub size_seq: &'a [u32],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignatureSet {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<String>,
    pub metaverses: Vec<MetaverseSignatures>,
}

impl Default for SignatureSet {
    fn default() -> Self {
        SignatureSet { version: MODEL_VERSION, created_at: None, metaverses: Vec::new() }
    }
}

impl SignatureSet {
    pub fn metaverse(&self, name: &str) -> Option<&MetaverseSignatures> {
        self.metaverses.iter().find(|m| m.name == name)
    }

    /// Adds a metaverse, replacing an existing entry of the same name.
    pub fn upsert(&mut self, entry: MetaverseSignatures) {
        match self.metaverses.iter_mut().find(|m| m.name == entry.name) {
            Some(slot) => *slot = entry,
            None => self.metaverses.push(entry),
        }
    }

    pub fn primaries(&self) -> impl Iterator<Item = PrimarySignature<'_>> {
        self.metaverses.iter().flat_map(|m| {
            m.primaries.iter().map(move |p| PrimarySignature {
                metaverse: &m.name,
                domain: &m.domain,
                prefix: &p.prefix,
                size_seq: &p.seq,
            })
        })
    }

    pub fn udp(&self) -> impl Iterator<Item = UdpSignature<'_>> {
        self.metaverses.iter().flat_map(|m| {
            m.udp.iter().map(move |u| UdpSignature { metaverse: &m.name, port: u.port, size_seq: &u.seq })
        })
    }

    /// Ports that carry at least one UDP signature, ascending.
    pub fn udp_ports(&self) -> Vec<u16> {
        let mut ports: Vec<u16> = self.udp().map(|u| u.port).collect();
        ports.sort_unstable();
        ports.dedup();
        ports
    }

    /// Checks the structural invariants of a model.
    pub fn validate(&self) -> Result<(), SignatureError> {
        let corrupt = |msg: String| Err(SignatureError::CorruptModel(msg));
        let mut names = HashSet::new();
        for m in &self.metaverses {
            if m.name.is_empty() || !names.insert(m.name.as_str()) {
                return corrupt(format!("missing or duplicate metaverse name '{}'", m.name));
            }
            for p in &m.initial_hs_prefixes {
                if !m.primaries.iter().any(|s| &s.prefix == p) {
                    return corrupt(format!("{}: initial prefix '{p}' has no signature", m.name));
                }
            }
        }
        let check_seq = |what: &str, seq: &[u32]| {
            if seq.is_empty() || seq.len() > DEFAULT_K_MAX || seq.contains(&0) {
                return corrupt(format!("{what}: unusable size sequence {seq:?}"));
            }
            Ok(())
        };
        let mut seen: Vec<(&[u32], &str)> = Vec::new();
        for p in self.primaries() {
            check_seq(p.metaverse, p.size_seq)?;
            if let Some((_, other)) = seen.iter().find(|(s, _)| *s == p.size_seq) {
                return corrupt(format!("primary sequence {:?} listed twice ({other}, {})", p.size_seq, p.metaverse));
            }
            seen.push((p.size_seq, p.metaverse));
        }
        let mut seen: Vec<(u16, &[u32], &str)> = Vec::new();
        for u in self.udp() {
            check_seq(u.metaverse, u.size_seq)?;
            if let Some((_, _, other)) = seen.iter().find(|(port, s, _)| *port == u.port && *s == u.size_seq) {
                return Err(SignatureError::AmbiguousSignature {
                    port: u.port,
                    seq: u.size_seq.to_vec(),
                    first: other.to_string(),
                    second: u.metaverse.to_string(),
                });
            }
            seen.push((u.port, u.size_seq, u.metaverse));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<SignatureSet, SignatureError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| SignatureError::CorruptModel(e.to_string()))?;
        let version = value
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| SignatureError::CorruptModel("missing version".into()))?;
        if version != MODEL_VERSION as u64 {
            return Err(SignatureError::SchemaMismatch { found: version, expected: MODEL_VERSION });
        }
        let set: SignatureSet =
            serde_json::from_value(value).map_err(|e| SignatureError::CorruptModel(e.to_string()))?;
        set.validate()?;
        Ok(set)
    }
}

pub fn save_model(set: &SignatureSet, path: impl AsRef<Path>) -> Result<(), SignatureError> {
    set.validate()?;
    fs::write(path, set.to_json())?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SignatureSet, SignatureError> {
    SignatureSet::from_json(&fs::read_to_string(path)?)
}
