//! Per-user, per-5-tuple flow accumulators for the detection stages.
//!
//! The table is two-level (user IP, then flow key) and is owned by exactly
//! one worker; sharding happens above it, by user IP.

use std::collections::HashMap;
use std::fmt;
use std::net::IpAddr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::{tcp_flags, Fragment, PacketRecord, RecordKind, Transport};
use crate::time::{secs_to_nanos, Timestamp};

/// Longest upstream size sequence kept per flow.
pub const DEFAULT_K_MAX: usize = 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FlowTableError {
    #[error("flow table capacity of {0} entries exceeded")]
    TableCapacityExceeded(usize),
    #[error("transport must be TCP or UDP")]
    UnsupportedTransport,
}

/// 5-tuple in canonical orientation: `src` is always the local (user) side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FlowKey {
    pub src_ip: IpAddr,
    pub dst_ip: IpAddr,
    pub src_port: u16,
    pub dst_port: u16,
    pub transport: Transport,
}

impl FlowKey {
    pub fn from_packet(pkt: &PacketRecord) -> Option<FlowKey> {
        if !matches!(pkt.transport, Transport::Tcp | Transport::Udp) {
            return None;
        }
        Some(if pkt.is_upstream() {
            FlowKey {
                src_ip: pkt.src_ip,
                dst_ip: pkt.dst_ip,
                src_port: pkt.src_port,
                dst_port: pkt.dst_port,
                transport: pkt.transport,
            }
        } else {
            FlowKey {
                src_ip: pkt.dst_ip,
                dst_ip: pkt.src_ip,
                src_port: pkt.dst_port,
                dst_port: pkt.src_port,
                transport: pkt.transport,
            }
        })
    }

    pub fn user(&self) -> IpAddr {
        self.src_ip
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let proto = match self.transport {
            Transport::Tcp => "tcp",
            Transport::Udp => "udp",
            Transport::Other => "ip",
        };
        let ep = |ip: &IpAddr, port: u16| match ip {
            IpAddr::V4(a) => format!("{a}:{port}"),
            IpAddr::V6(a) => format!("[{a}]:{port}"),
        };
        write!(f, "{proto} {}->{}", ep(&self.src_ip, self.src_port), ep(&self.dst_ip, self.dst_port))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DomainType {
    Primary,
    TimeCritical,
}

/// What a matched flow was identified as.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FlowLabel {
    pub metaverse: String,
    pub domain_type: DomainType,
    /// Service prefix, for primary-domain flows.
    pub prefix: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MatchStatus {
    Pending,
    Matched(FlowLabel),
    Rejected,
}

impl MatchStatus {
    pub fn is_pending(&self) -> bool {
        matches!(self, MatchStatus::Pending)
    }

    pub fn label(&self) -> Option<&FlowLabel> {
        match self {
            MatchStatus::Matched(l) => Some(l),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlowState {
    pub key: FlowKey,
    pub upstream_size_seq: Vec<u32>,
    match_status: MatchStatus,
    pub first_seen: Timestamp,
    pub last_seen: Timestamp,
    pub pkts_up: u64,
    pub pkts_down: u64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub next_expected_seq: Option<u32>,
    seen_seqs: Vec<u32>,
    syn_at: Option<Timestamp>,
    hello_at: Option<Timestamp>,
    handshake_rtt_ms: Option<f64>,
    hello_rtt_ms: Option<f64>,
}

impl FlowState {
    fn new(key: FlowKey, now: Timestamp) -> Self {
        FlowState {
            key,
            upstream_size_seq: Vec::new(),
            match_status: MatchStatus::Pending,
            first_seen: now,
            last_seen: now,
            pkts_up: 0,
            pkts_down: 0,
            bytes_up: 0,
            bytes_down: 0,
            next_expected_seq: None,
            seen_seqs: Vec::new(),
            syn_at: None,
            hello_at: None,
            handshake_rtt_ms: None,
            hello_rtt_ms: None,
        }
    }

    pub fn match_status(&self) -> &MatchStatus {
        &self.match_status
    }

    /// Moves a pending flow to matched or rejected. Returns false (and leaves
    /// the flow untouched) once a final status has been reached.
    pub fn resolve(&mut self, status: MatchStatus) -> bool {
        if !self.match_status.is_pending() || status.is_pending() {
            return false;
        }
        self.match_status = status;
        self.seen_seqs = Vec::new();
        true
    }

    /// Best current round-trip estimate in milliseconds.
    pub fn rtt_ms(&self) -> Option<f64> {
        match (self.handshake_rtt_ms, self.hello_rtt_ms) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    pub fn idle_secs(&self, now: Timestamp) -> f64 {
        now.secs_since(self.last_seen)
    }
}

/// Updates the flow's passive RTT estimate from one packet.
///
/// The estimate is the SYN to SYN-ACK gap seen at the vantage point, and
/// the client-hello to first-server-payload gap; the smaller one wins.
/// UDP flows never get an estimate.
pub fn estimate_rtt(flow: &mut FlowState, pkt: &PacketRecord) -> Option<f64> {
    if flow.key.transport != Transport::Tcp {
        return None;
    }
    let syn = pkt.has_flag(tcp_flags::SYN);
    let ack = pkt.has_flag(tcp_flags::ACK);
    if pkt.is_upstream() {
        if syn && !ack {
            flow.syn_at = Some(pkt.ts);
        }
        let is_hello = pkt.tls.as_ref().is_some_and(|t| t.record_kind == RecordKind::ClientHello);
        if is_hello && flow.hello_rtt_ms.is_none() {
            flow.hello_at = Some(pkt.ts);
        }
    } else {
        if syn && ack {
            if let Some(t0) = flow.syn_at.take() {
                flow.handshake_rtt_ms = Some(pkt.ts.nanos_since(t0) as f64 / 1e6);
            }
        }
        if pkt.payload_len > 0 {
            if let Some(t0) = flow.hello_at.take() {
                flow.hello_rtt_ms = Some(pkt.ts.nanos_since(t0) as f64 / 1e6);
            }
        }
    }
    flow.rtt_ms()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowUpdate {
    /// New entry; `appended` tells whether the packet also started the
    /// size sequence.
    Created { appended: bool },
    AppendedSize,
    CountedOnly,
    IgnoredRetransmit,
}

impl FlowUpdate {
    pub fn appended(self) -> bool {
        matches!(self, FlowUpdate::Created { appended: true } | FlowUpdate::AppendedSize)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowTableConfig {
    pub max_flows: usize,
    pub idle_timeout_candidate: f64,
    pub idle_timeout_tracked: f64,
    pub k_max: usize,
}

impl Default for FlowTableConfig {
    fn default() -> Self {
        FlowTableConfig {
            max_flows: 1_000_000,
            idle_timeout_candidate: 60.0,
            idle_timeout_tracked: 300.0,
            k_max: DEFAULT_K_MAX,
        }
    }
}

#[derive(Debug, Default)]
pub struct FlowTable {
    config: FlowTableConfig,
    users: HashMap<IpAddr, HashMap<FlowKey, FlowState>>,
    len: usize,
    dropped_new_flows: u64,
}

impl FlowTable {
    pub fn new(config: FlowTableConfig) -> Self {
        FlowTable { config, users: HashMap::new(), len: 0, dropped_new_flows: 0 }
    }

    pub fn config(&self) -> &FlowTableConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dropped_new_flows(&self) -> u64 {
        self.dropped_new_flows
    }

    pub fn contains(&self, key: &FlowKey) -> bool {
        self.users.get(&key.user()).is_some_and(|m| m.contains_key(key))
    }

    pub fn get(&self, key: &FlowKey) -> Option<&FlowState> {
        self.users.get(&key.user())?.get(key)
    }

    pub fn get_mut(&mut self, key: &FlowKey) -> Option<&mut FlowState> {
        self.users.get_mut(&key.user())?.get_mut(key)
    }

    pub fn user_flows(&self, user: &IpAddr) -> impl Iterator<Item = &FlowState> {
        self.users.get(user).into_iter().flat_map(|m| m.values())
    }

    /// Accounts one packet to its flow, creating the entry when needed.
    pub fn upsert_packet(&mut self, pkt: &PacketRecord) -> Result<FlowUpdate, FlowTableError> {
        let key = FlowKey::from_packet(pkt).ok_or(FlowTableError::UnsupportedTransport)?;
        let k_max = self.config.k_max;
        let mut created = false;
        let flows = self.users.entry(key.user()).or_default();
        if !flows.contains_key(&key) {
            if self.len >= self.config.max_flows {
                self.dropped_new_flows += 1;
                if flows.is_empty() {
                    self.users.remove(&key.user());
                }
                return Err(FlowTableError::TableCapacityExceeded(self.config.max_flows));
            }
            flows.insert(key, FlowState::new(key, pkt.ts));
            self.len += 1;
            created = true;
        }
        let flow = flows.get_mut(&key).expect("entry present");

        flow.last_seen = flow.last_seen.max(pkt.ts);
        let bytes = pkt.payload_len as u64;
        if pkt.is_upstream() {
            flow.pkts_up += 1;
            flow.bytes_up += bytes;
        } else {
            flow.pkts_down += 1;
            flow.bytes_down += bytes;
        }
        estimate_rtt(flow, pkt);

        let mut update = FlowUpdate::CountedOnly;
        if pkt.is_upstream() && key.transport == Transport::Tcp && pkt.has_flag(tcp_flags::SYN) {
            if let Some(seq) = pkt.tcp_seq {
                flow.next_expected_seq = Some(seq.wrapping_add(1));
            }
        }
        let sequence_candidate = pkt.is_upstream()
            && pkt.payload_len > 0
            && pkt.fragment != Fragment::Subsequent
            && flow.match_status.is_pending();
        if sequence_candidate {
            let duplicate = match (key.transport, pkt.tcp_seq) {
                (Transport::Tcp, Some(seq)) => {
                    if flow.seen_seqs.contains(&seq) {
                        true
                    } else {
                        flow.seen_seqs.push(seq);
                        flow.next_expected_seq = Some(seq.wrapping_add(pkt.payload_len));
                        false
                    }
                }
                _ => false,
            };
            if duplicate {
                update = FlowUpdate::IgnoredRetransmit;
            } else if flow.upstream_size_seq.len() < k_max {
                flow.upstream_size_seq.push(pkt.payload_len);
                update = FlowUpdate::AppendedSize;
            }
        }
        if created {
            return Ok(FlowUpdate::Created { appended: update == FlowUpdate::AppendedSize });
        }
        Ok(update)
    }

    /// Sets the final match status of a flow; see [`FlowState::resolve`].
    pub fn resolve(&mut self, key: &FlowKey, status: MatchStatus) -> bool {
        self.get_mut(key).is_some_and(|f| f.resolve(status))
    }

    /// Removes flows idle longer than their timeout. Pending and rejected
    /// flows use the candidate timeout, matched flows the tracked one.
    /// The result is ordered by (first_seen, key).
    pub fn evict_idle(&mut self, now: Timestamp) -> Vec<FlowState> {
        let candidate = secs_to_nanos(self.config.idle_timeout_candidate);
        let tracked = secs_to_nanos(self.config.idle_timeout_tracked);
        let mut evicted = Vec::new();
        self.users.retain(|_, flows| {
            flows.retain(|_, f| {
                let limit = match f.match_status {
                    MatchStatus::Matched(_) => tracked,
                    _ => candidate,
                };
                let keep = now.nanos_since(f.last_seen) <= limit;
                if !keep {
                    evicted.push(f.clone());
                }
                keep
            });
            !flows.is_empty()
        });
        self.len -= evicted.len();
        evicted.sort_by(|a, b| (a.first_seen, a.key).cmp(&(b.first_seen, b.key)));
        evicted
    }

    /// Removes everything (end of input), ordered like [`Self::evict_idle`].
    pub fn drain(&mut self) -> Vec<FlowState> {
        let mut all: Vec<FlowState> = self.users.drain().flat_map(|(_, m)| m.into_values()).collect();
        self.len = 0;
        all.sort_by(|a, b| (a.first_seen, a.key).cmp(&(b.first_seen, b.key)));
        all
    }
}
