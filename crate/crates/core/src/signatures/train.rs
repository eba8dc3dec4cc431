use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::IpAddr;

use log::{debug, warn};

use super::{MetaverseSignatures, PrimaryEntry, SignatureError, UdpEntry, DEFAULT_UDP_PORTS};
use crate::capture::{Fragment, PacketRecord, RecordKind, Transport};
use crate::flowtable::{FlowKey, DEFAULT_K_MAX};
use crate::time::Timestamp;

const MIN_UDP_LEN: usize = 4;
const MAX_UDP_LEN: usize = 7;

/// Ground-truth traffic of one application.
#[derive(Debug, Clone)]
pub struct LabeledCapture {
    pub metaverse: String,
    pub packets: Vec<PacketRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrimaryTraining {
    /// First label of the primary domain.
    pub domain: String,
    pub primaries: Vec<PrimaryEntry>,
    pub initial_hs_prefixes: Vec<String>,
}

impl PrimaryTraining {
    pub fn into_metaverse(self, name: &str, udp: Vec<UdpEntry>) -> MetaverseSignatures {
        MetaverseSignatures {
            name: name.to_string(),
            domain: self.domain,
            initial_hs_prefixes: self.initial_hs_prefixes,
            primaries: self.primaries,
            udp,
        }
    }
}

/// Service prefix of `sni` under `domain`, matched label-wise: `prod` for
/// `prod.shapevrcloud.com` under either `shapevrcloud` or
/// `shapevrcloud.com`.
fn sni_prefix(sni: &str, domain: &[&str]) -> Option<String> {
    let labels: Vec<&str> = sni.trim_end_matches('.').split('.').collect();
    (1..labels.len())
        .find(|&i| labels.len() >= i + domain.len() && labels[i..i + domain.len()] == *domain)
        .map(|i| labels[..i].join("."))
}

enum Collect {
    Open,
    Done,
    Dead,
}

struct PrimaryTrace {
    user: IpAddr,
    started: Timestamp,
    prefix: String,
    seq: Vec<u32>,
    seen: Vec<u32>,
    state: Collect,
}

struct SessionFlow {
    started: Timestamp,
    key: FlowKey,
    prefix: String,
    seq: Vec<u32>,
}

/// Primary-domain flows of every (capture, user) pair, each ordered by the
/// time of its client hello.
fn primary_flows(captures: &[LabeledCapture], domain: &[&str]) -> Vec<Vec<SessionFlow>> {
    let mut sessions = Vec::new();
    for cap in captures {
        let mut traces: HashMap<FlowKey, Option<PrimaryTrace>> = HashMap::new();
        for pkt in &cap.packets {
            if pkt.transport != Transport::Tcp
                || !pkt.is_upstream()
                || pkt.payload_len == 0
                || pkt.fragment == Fragment::Subsequent
            {
                continue;
            }
            let Some(key) = FlowKey::from_packet(pkt) else { continue };
            let kind = pkt.tls.as_ref().map_or(RecordKind::None, |t| t.record_kind);
            let slot = traces.entry(key).or_insert_with(|| {
                let sni = pkt.tls.as_ref().and_then(|t| t.sni.as_deref())?;
                if kind != RecordKind::ClientHello {
                    return None;
                }
                let prefix = sni_prefix(sni, domain)?;
                Some(PrimaryTrace {
                    user: pkt.local_ip(),
                    started: pkt.ts,
                    prefix,
                    seq: Vec::new(),
                    seen: Vec::new(),
                    state: Collect::Open,
                })
            });
            let Some(trace) = slot else { continue };
            if !matches!(trace.state, Collect::Open) {
                continue;
            }
            if let Some(seq) = pkt.tcp_seq {
                if trace.seen.contains(&seq) {
                    continue;
                }
                trace.seen.push(seq);
            }
            trace.seq.push(pkt.payload_len);
            if kind == RecordKind::AppData {
                trace.state = Collect::Done;
            } else if trace.seq.len() >= DEFAULT_K_MAX {
                debug!("{key}: no application data within {DEFAULT_K_MAX} packets");
                trace.state = Collect::Dead;
            }
        }
        let mut by_user: BTreeMap<IpAddr, Vec<SessionFlow>> = BTreeMap::new();
        for (key, trace) in traces {
            let Some(t) = trace else { continue };
            if matches!(t.state, Collect::Done) {
                by_user.entry(t.user).or_default().push(SessionFlow {
                    started: t.started,
                    key,
                    prefix: t.prefix,
                    seq: t.seq,
                });
            }
        }
        for (_, mut flows) in by_user {
            flows.sort_by(|a, b| (a.started, a.key).cmp(&(b.started, b.key)));
            sessions.push(flows);
        }
    }
    sessions
}

/// Distinct prefixes of one session in order of first appearance.
pub fn primary_session_prefixes(captures: &[LabeledCapture], primary_domain: &str) -> Vec<Vec<String>> {
    let domain = primary_domain.to_ascii_lowercase();
    let labels: Vec<&str> = domain.trim_matches('.').split('.').collect();
    primary_flows(captures, &labels).iter().map(|s| ordered_prefixes(s)).collect()
}

fn ordered_prefixes(flows: &[SessionFlow]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for f in flows {
        if !out.contains(&f.prefix) {
            out.push(f.prefix.clone());
        }
    }
    out
}

/// Extracts primary-domain signatures and the initial prefix order.
///
/// Each (capture, user) pair is one session. SNI is read here and only
/// here; the runtime matcher never sees it.
pub fn train_primary_signatures(
    captures: &[LabeledCapture],
    primary_domain: &str,
) -> Result<PrimaryTraining, SignatureError> {
    let domain = primary_domain.to_ascii_lowercase();
    let labels: Vec<&str> = domain.trim_matches('.').split('.').filter(|l| !l.is_empty()).collect();
    if labels.is_empty() {
        return Err(SignatureError::NoPrimaryFlows(primary_domain.to_string()));
    }
    let sessions = primary_flows(captures, &labels);
    if sessions.is_empty() {
        return Err(SignatureError::NoPrimaryFlows(primary_domain.to_string()));
    }
    let metaverse = captures.first().map(|c| c.metaverse.clone()).unwrap_or_default();

    let orders: Vec<Vec<String>> = sessions.iter().map(|s| ordered_prefixes(s)).collect();
    let reference: BTreeSet<&String> = orders[0].iter().collect();
    for (i, order) in orders.iter().enumerate().skip(1) {
        let set: BTreeSet<&String> = order.iter().collect();
        if set != reference {
            return Err(SignatureError::InconsistentPrefixOrder {
                metaverse,
                detail: format!("session 0 uses {:?}, session {i} uses {:?}", orders[0], order),
            });
        }
    }
    // Majority vote on the order; ties go to the earliest session.
    let mut votes: Vec<(&Vec<String>, usize)> = Vec::new();
    for order in &orders {
        match votes.iter_mut().find(|(o, _)| *o == order) {
            Some((_, n)) => *n += 1,
            None => votes.push((order, 1)),
        }
    }
    let best = votes.iter().map(|(_, n)| *n).max().unwrap_or(0);
    let initial = votes.iter().find(|(_, n)| *n == best).map(|(o, _)| (*o).clone()).unwrap_or_default();
    if votes.len() > 1 {
        warn!("{metaverse}: {} prefix orders seen, using {:?}", votes.len(), initial);
    }

    let rank = |p: &str| initial.iter().position(|q| q == p).unwrap_or(usize::MAX);
    let mut unique: BTreeSet<(usize, Vec<u32>, String)> = BTreeSet::new();
    for f in sessions.iter().flatten() {
        unique.insert((rank(&f.prefix), f.seq.clone(), f.prefix.clone()));
    }
    let primaries = unique.into_iter().map(|(_, seq, prefix)| PrimaryEntry { prefix, seq }).collect();
    Ok(PrimaryTraining { domain: labels[0].to_string(), primaries, initial_hs_prefixes: initial })
}

#[derive(Debug, Clone)]
pub struct UdpTrainingConfig {
    pub ports: Vec<u16>,
    /// Use exactly this many leading sizes instead of learning the length.
    pub fixed_len: Option<usize>,
}

impl Default for UdpTrainingConfig {
    fn default() -> Self {
        UdpTrainingConfig { ports: DEFAULT_UDP_PORTS.to_vec(), fixed_len: None }
    }
}

fn common_prefix_len(flows: &[Vec<u32>]) -> usize {
    let first = &flows[0];
    (0..first.len()).take_while(|&i| flows.iter().all(|f| f.get(i) == Some(&first[i]))).count()
}

/// Extracts time-critical UDP signatures, keyed by metaverse.
///
/// Flows are grouped by port, application and their first four sizes; a
/// group's signature is the longest prefix common to all of its flows
/// (between four and seven sizes). A lone flow gets the shortest prefix no
/// other application's flow on that port shares.
pub fn train_udp_signatures(
    captures: &[LabeledCapture],
    config: &UdpTrainingConfig,
) -> Result<BTreeMap<String, Vec<UdpEntry>>, SignatureError> {
    // port -> metaverse -> flows' leading sizes
    let mut flows: BTreeMap<u16, BTreeMap<String, Vec<Vec<u32>>>> = BTreeMap::new();
    let cap_len = config.fixed_len.unwrap_or(MAX_UDP_LEN).max(1);
    for cap in captures {
        let mut per_flow: HashMap<FlowKey, Vec<u32>> = HashMap::new();
        let mut order: Vec<FlowKey> = Vec::new();
        for pkt in &cap.packets {
            if pkt.transport != Transport::Udp
                || !pkt.is_upstream()
                || pkt.payload_len == 0
                || pkt.fragment == Fragment::Subsequent
                || !config.ports.contains(&pkt.dst_port)
            {
                continue;
            }
            let Some(key) = FlowKey::from_packet(pkt) else { continue };
            let sizes = per_flow.entry(key).or_insert_with(|| {
                order.push(key);
                Vec::new()
            });
            if sizes.len() < cap_len {
                sizes.push(pkt.payload_len);
            }
        }
        for key in order {
            let sizes = per_flow.remove(&key).unwrap_or_default();
            let min = config.fixed_len.unwrap_or(MIN_UDP_LEN);
            if sizes.len() < min {
                debug!("{key}: only {} sizes, skipped", sizes.len());
                continue;
            }
            flows.entry(key.dst_port).or_default().entry(cap.metaverse.clone()).or_default().push(sizes);
        }
    }

    let mut out: BTreeMap<String, Vec<UdpEntry>> = BTreeMap::new();
    for (port, by_app) in &flows {
        let mut sigs: Vec<(String, Vec<u32>)> = Vec::new();
        for (app, app_flows) in by_app {
            let mut groups: BTreeMap<Vec<u32>, Vec<Vec<u32>>> = BTreeMap::new();
            for f in app_flows {
                let head = f[..config.fixed_len.unwrap_or(MIN_UDP_LEN)].to_vec();
                groups.entry(head).or_default().push(f.clone());
            }
            for (head, group) in groups {
                let sig = if config.fixed_len.is_some() {
                    head
                } else if group.len() > 1 {
                    group[0][..common_prefix_len(&group).clamp(MIN_UDP_LEN, MAX_UDP_LEN)].to_vec()
                } else {
                    let lone = &group[0];
                    let others = by_app.iter().filter(|(a, _)| *a != app).flat_map(|(_, fs)| fs.iter());
                    let n = (MIN_UDP_LEN..=lone.len())
                        .find(|&n| others.clone().all(|o| !o.starts_with(&lone[..n])))
                        .unwrap_or(lone.len());
                    lone[..n].to_vec()
                };
                sigs.push((app.clone(), sig));
            }
        }
        // Across applications no signature may equal or prefix another.
        for (i, (a, sa)) in sigs.iter().enumerate() {
            for (b, sb) in &sigs[i + 1..] {
                if a != b && (sa.starts_with(sb) || sb.starts_with(sa)) {
                    return Err(SignatureError::AmbiguousSignature {
                        port: *port,
                        seq: if sa.len() <= sb.len() { sa.clone() } else { sb.clone() },
                        first: a.clone(),
                        second: b.clone(),
                    });
                }
            }
        }
        sigs.sort();
        for (app, seq) in sigs {
            let entries = out.entry(app).or_default();
            // Within one application a longer variant adds nothing.
            if entries.iter().any(|e| e.port == *port && seq.starts_with(&e.seq)) {
                continue;
            }
            entries.retain(|e| !(e.port == *port && e.seq.starts_with(&seq)));
            entries.push(UdpEntry { port: *port, seq });
        }
    }
    for entries in out.values_mut() {
        entries.sort_by(|a, b| (a.port, &a.seq).cmp(&(b.port, &b.seq)));
    }
    Ok(out)
}
