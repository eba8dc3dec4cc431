//! Session detection and per-interval state keeping.
//!
//! A session for (user, application) starts once matched primary flows cover
//! every initial prefix of that application. From then on its tracked flows
//! are accumulated into fixed-length intervals anchored at the session
//! start; each closed interval is turned into an attribute vector and handed
//! to the interval classifier.

mod attributes;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::net::IpAddr;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use attributes::{
    compute_attributes, median, population_std, AttributeVector, FlowClass, FlowIntervalStats, IntervalStats,
    ATTRIBUTE_NAMES, NUM_ATTRIBUTES,
};

use crate::capture::PacketRecord;
use crate::flowtable::{DomainType, FlowKey, FlowLabel};
use crate::signatures::SignatureSet;
use crate::time::{secs_to_nanos, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StateLabel {
    HS,
    MH,
    SUE,
    SPE,
    AT,
    CC,
    UNKNOWN,
}

impl StateLabel {
    /// Every label, in tie-break order.
    pub const ALL: [StateLabel; 7] = [
        StateLabel::HS,
        StateLabel::MH,
        StateLabel::SUE,
        StateLabel::SPE,
        StateLabel::AT,
        StateLabel::CC,
        StateLabel::UNKNOWN,
    ];

    pub const ACTIVITIES: [StateLabel; 6] =
        [StateLabel::HS, StateLabel::MH, StateLabel::SUE, StateLabel::SPE, StateLabel::AT, StateLabel::CC];

    pub fn as_str(self) -> &'static str {
        match self {
            StateLabel::HS => "HS",
            StateLabel::MH => "MH",
            StateLabel::SUE => "SUE",
            StateLabel::SPE => "SPE",
            StateLabel::AT => "AT",
            StateLabel::CC => "CC",
            StateLabel::UNKNOWN => "UNKNOWN",
        }
    }
}

impl fmt::Display for StateLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StateLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StateLabel::ALL
            .into_iter()
            .find(|l| l.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown state label '{s}'"))
    }
}

/// Activity states each studied application actually has. Unknown
/// applications may use all six.
pub fn allowed_states(app: &str) -> &'static [StateLabel] {
    use StateLabel::*;
    match app {
        "Multiverse" => &[HS, MH, SUE, SPE, AT],
        "VRChat" => &[HS, SUE],
        "Rec Room" => &[HS, MH, SUE, CC, AT],
        "AltSpaceVR" => &[HS, MH, SUE],
        _ => &StateLabel::ACTIVITIES,
    }
}

/// Whether flows without packets in an interval still enter its statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IdleFlowPolicy {
    #[default]
    Include,
    Exclude,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub interval_len: f64,
    pub idle_timeout: f64,
    /// Partial prefix sets are forgotten after this long without a new match.
    pub candidate_timeout: f64,
    pub past_states: usize,
    pub idle_flows: IdleFlowPolicy,
    /// Attach the raw interval statistics to every interval event.
    pub trace_intervals: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            interval_len: 10.0,
            idle_timeout: 120.0,
            candidate_timeout: 120.0,
            past_states: 5,
            idle_flows: IdleFlowPolicy::Include,
            trace_intervals: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Classification {
    pub state: StateLabel,
    pub confidence: f64,
    /// Decided by the attribute-only model.
    pub stateless: bool,
}

pub trait IntervalClassifier: Send + Sync {
    /// `past` holds previous states of the session, oldest first.
    fn classify(&self, app: &str, attrs: &AttributeVector, past: &[StateLabel]) -> Classification;
}

/// Labels every interval UNKNOWN; for feature extraction runs.
pub struct NoClassifier;

impl IntervalClassifier for NoClassifier {
    fn classify(&self, _: &str, _: &AttributeVector, _: &[StateLabel]) -> Classification {
        Classification { state: StateLabel::UNKNOWN, confidence: 0.0, stateless: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub interval: u64,
    pub state: StateLabel,
    pub confidence: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StateRollup {
    pub seconds: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowReport {
    pub key: FlowKey,
    pub domain_type: DomainType,
    pub rtt_ms: Option<f64>,
    pub as_label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub user: IpAddr,
    pub app: String,
    pub start: f64,
    pub end: f64,
    pub timeline: Vec<TimelineEntry>,
    pub per_state: BTreeMap<StateLabel, StateRollup>,
    pub flows: Vec<FlowReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRecord {
    pub user: IpAddr,
    pub app: String,
    pub index: u64,
    pub start: Timestamp,
    pub attributes: AttributeVector,
    pub state: StateLabel,
    pub confidence: f64,
    pub stateless: bool,
    pub stats: Option<IntervalStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SessionEvent {
    SessionStarted { user: IpAddr, app: String, ts: Timestamp },
    /// Packets of `key` count from packet ordinal `since` on.
    FlowAttached { user: IpAddr, app: String, key: FlowKey, domain_type: DomainType, ts: Timestamp, since: u64 },
    UdpOrphaned { user: IpAddr, app: String, key: FlowKey, ts: Timestamp },
    FlowDetached { user: IpAddr, app: String, key: FlowKey, ts: Timestamp },
    IntervalClosed(IntervalRecord),
    SessionClosed(SessionReport),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectionOutcome {
    None,
    SessionStarted,
    /// Flow joined an already running session.
    Attached,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UdpAttach {
    Tracked,
    Orphaned,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionCounters {
    pub sessions_started: u64,
    pub sessions_closed: u64,
    pub orphaned_udp: u64,
    pub intervals_closed: u64,
    pub stateless_decisions: u64,
    /// Stateless decisions taken although the past-state ring was full.
    pub fallbacks: u64,
}

#[derive(Debug, Clone, Default)]
struct Counters {
    bytes_up: u64,
    bytes_down: u64,
    pkts_up: u64,
    pkts_down: u64,
}

#[derive(Debug, Clone)]
struct TrackedFlow {
    domain_type: DomainType,
    attached_at: Timestamp,
    cur: Counters,
}

#[derive(Debug, Clone)]
struct Candidate {
    prefixes: BTreeSet<String>,
    flows: Vec<(FlowKey, Option<f64>)>,
    last: Timestamp,
}

type SessionId = (IpAddr, String);

/// Per-user, per-application detected session.
#[derive(Debug, Clone)]
pub struct SessionContext {
    pub user_ip: IpAddr,
    pub metaverse: String,
    pub active_prefixes: BTreeSet<String>,
    pub session_start: Timestamp,
    pub last_packet: Timestamp,
    interval_ns: u64,
    cur_index: u64,
    flows: BTreeMap<FlowKey, TrackedFlow>,
    flow_log: BTreeMap<FlowKey, (DomainType, Option<f64>)>,
    past_states: VecDeque<StateLabel>,
    timeline: Vec<TimelineEntry>,
    interval_bytes: Vec<(u64, u64)>,
}

impl SessionContext {
    fn new(user: IpAddr, app: &str, start: Timestamp, interval_ns: u64) -> Self {
        SessionContext {
            user_ip: user,
            metaverse: app.to_string(),
            active_prefixes: BTreeSet::new(),
            session_start: start,
            last_packet: start,
            interval_ns,
            cur_index: 0,
            flows: BTreeMap::new(),
            flow_log: BTreeMap::new(),
            past_states: VecDeque::new(),
            timeline: Vec::new(),
            interval_bytes: Vec::new(),
        }
    }

    pub fn interval_of(&self, ts: Timestamp) -> u64 {
        ts.nanos_since(self.session_start) / self.interval_ns
    }

    pub fn interval_start(&self, index: u64) -> Timestamp {
        self.session_start.add_nanos(index * self.interval_ns)
    }

    pub fn past_states(&self) -> impl Iterator<Item = &StateLabel> {
        self.past_states.iter()
    }

    pub fn timeline(&self) -> &[TimelineEntry] {
        &self.timeline
    }

    pub fn tracked_flows(&self) -> impl Iterator<Item = (&FlowKey, DomainType)> {
        self.flows.iter().map(|(k, f)| (k, f.domain_type))
    }

    fn attach(&mut self, key: FlowKey, domain_type: DomainType, ts: Timestamp, rtt: Option<f64>) {
        self.flows.entry(key).or_insert(TrackedFlow { domain_type, attached_at: ts, cur: Counters::default() });
        self.flow_log.entry(key).or_insert((domain_type, rtt));
    }

    fn interval_stats(&self, policy: IdleFlowPolicy) -> IntervalStats {
        let start = self.interval_start(self.cur_index);
        let flows = self
            .flows
            .iter()
            .filter(|(_, f)| policy == IdleFlowPolicy::Include || f.cur.pkts_up + f.cur.pkts_down > 0)
            .map(|(key, f)| FlowIntervalStats {
                key: *key,
                domain_type: f.domain_type,
                bytes_up: f.cur.bytes_up,
                bytes_down: f.cur.bytes_down,
                pkts_up: f.cur.pkts_up,
                pkts_down: f.cur.pkts_down,
                is_new: f.attached_at >= start,
            })
            .collect();
        IntervalStats { index: self.cur_index, flows }
    }

    fn close_interval(
        &mut self,
        cfg: &SessionConfig,
        classifier: &dyn IntervalClassifier,
        counters: &mut SessionCounters,
        out: &mut Vec<SessionEvent>,
    ) {
        let stats = self.interval_stats(cfg.idle_flows);
        let attributes = compute_attributes(&stats);
        let past: Vec<StateLabel> = self.past_states.iter().copied().collect();
        let c = classifier.classify(&self.metaverse, &attributes, &past);
        let (up, down) = self.flows.values().fold((0, 0), |(u, d), f| (u + f.cur.bytes_up, d + f.cur.bytes_down));
        for f in self.flows.values_mut() {
            f.cur = Counters::default();
        }
        self.timeline.push(TimelineEntry { interval: self.cur_index, state: c.state, confidence: c.confidence });
        self.interval_bytes.push((up, down));
        if cfg.past_states > 0 {
            if self.past_states.len() == cfg.past_states {
                self.past_states.pop_front();
            }
            self.past_states.push_back(c.state);
        }
        counters.intervals_closed += 1;
        counters.stateless_decisions += c.stateless as u64;
        counters.fallbacks += (c.stateless && past.len() >= cfg.past_states) as u64;
        out.push(SessionEvent::IntervalClosed(IntervalRecord {
            user: self.user_ip,
            app: self.metaverse.clone(),
            index: self.cur_index,
            start: self.interval_start(self.cur_index),
            attributes,
            state: c.state,
            confidence: c.confidence,
            stateless: c.stateless,
            stats: cfg.trace_intervals.then_some(stats),
        }));
        self.cur_index += 1;
    }

    /// Closes every interval that ends at or before `now`.
    fn advance_to(
        &mut self,
        now: Timestamp,
        cfg: &SessionConfig,
        classifier: &dyn IntervalClassifier,
        counters: &mut SessionCounters,
        out: &mut Vec<SessionEvent>,
    ) {
        while now >= self.interval_start(self.cur_index + 1) {
            self.close_interval(cfg, classifier, counters, out);
        }
    }

    fn into_report(mut self, cfg: &SessionConfig) -> SessionReport {
        let last = self.interval_of(self.last_packet);
        self.timeline.truncate(last as usize + 1);
        let mut per_state: BTreeMap<StateLabel, StateRollup> = BTreeMap::new();
        for (entry, (up, down)) in self.timeline.iter().zip(&self.interval_bytes) {
            let r = per_state.entry(entry.state).or_default();
            r.seconds += cfg.interval_len;
            r.bytes_up += up;
            r.bytes_down += down;
        }
        SessionReport {
            user: self.user_ip,
            app: self.metaverse,
            start: self.session_start.as_secs_f64(),
            end: self.last_packet.as_secs_f64(),
            timeline: self.timeline,
            per_state,
            flows: self
                .flow_log
                .into_iter()
                .map(|(key, (domain_type, rtt_ms))| FlowReport { key, domain_type, rtt_ms, as_label: None })
                .collect(),
        }
    }
}

/// All sessions and candidate prefix sets of one worker.
pub struct SessionEngine {
    config: SessionConfig,
    interval_ns: u64,
    initial_prefixes: HashMap<String, Vec<String>>,
    classifier: Arc<dyn IntervalClassifier>,
    candidates: BTreeMap<SessionId, Candidate>,
    sessions: BTreeMap<SessionId, SessionContext>,
    flow_index: HashMap<FlowKey, SessionId>,
    counters: SessionCounters,
    events: Vec<SessionEvent>,
}

impl SessionEngine {
    pub fn new(config: SessionConfig, signatures: &SignatureSet, classifier: Arc<dyn IntervalClassifier>) -> Self {
        let interval_ns = secs_to_nanos(config.interval_len).max(1);
        let initial_prefixes =
            signatures.metaverses.iter().map(|m| (m.name.clone(), m.initial_hs_prefixes.clone())).collect();
        SessionEngine {
            config,
            interval_ns,
            initial_prefixes,
            classifier,
            candidates: BTreeMap::new(),
            sessions: BTreeMap::new(),
            flow_index: HashMap::new(),
            counters: SessionCounters::default(),
            events: Vec::new(),
        }
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn counters(&self) -> SessionCounters {
        self.counters
    }

    pub fn session(&self, user: IpAddr, app: &str) -> Option<&SessionContext> {
        self.sessions.get(&(user, app.to_string()))
    }

    pub fn active_sessions(&self) -> usize {
        self.sessions.len()
    }

    pub fn drain_events(&mut self) -> Vec<SessionEvent> {
        std::mem::take(&mut self.events)
    }

    fn attach(&mut self, id: &SessionId, key: FlowKey, domain_type: DomainType, ts: Timestamp, since: u64, rtt: Option<f64>) {
        let s = self.sessions.get_mut(id).expect("session exists");
        s.attach(key, domain_type, ts, rtt);
        self.flow_index.insert(key, id.clone());
        self.events.push(SessionEvent::FlowAttached {
            user: id.0,
            app: id.1.clone(),
            key,
            domain_type,
            ts,
            since,
        });
    }

    /// A stage-one match. `ordinal` is the position of the detecting
    /// packet in the input.
    pub fn register_primary_detection(
        &mut self,
        user: IpAddr,
        label: &FlowLabel,
        key: FlowKey,
        ts: Timestamp,
        ordinal: u64,
        rtt: Option<f64>,
    ) -> DetectionOutcome {
        let id: SessionId = (user, label.metaverse.clone());
        let prefix = label.prefix.clone().unwrap_or_default();
        if let Some(s) = self.sessions.get_mut(&id) {
            s.advance_to(ts, &self.config, &*self.classifier, &mut self.counters, &mut self.events);
            s.active_prefixes.insert(prefix);
            self.attach(&id, key, DomainType::Primary, ts, ordinal, rtt);
            return DetectionOutcome::Attached;
        }
        let cand = self.candidates.entry(id.clone()).or_insert_with(|| Candidate {
            prefixes: BTreeSet::new(),
            flows: Vec::new(),
            last: ts,
        });
        cand.prefixes.insert(prefix);
        cand.flows.push((key, rtt));
        cand.last = ts;
        let required = self.initial_prefixes.get(&label.metaverse).map(Vec::as_slice).unwrap_or(&[]);
        if !required.iter().all(|p| cand.prefixes.contains(p)) {
            return DetectionOutcome::None;
        }
        let cand = self.candidates.remove(&id).expect("candidate present");
        let mut ctx = SessionContext::new(user, &label.metaverse, ts, self.interval_ns);
        ctx.active_prefixes = cand.prefixes;
        self.sessions.insert(id.clone(), ctx);
        self.counters.sessions_started += 1;
        self.events.push(SessionEvent::SessionStarted { user, app: label.metaverse.clone(), ts });
        for (k, r) in cand.flows {
            self.attach(&id, k, DomainType::Primary, ts, ordinal, r);
        }
        DetectionOutcome::SessionStarted
    }

    /// A stage-two match. Never creates a session.
    pub fn register_udp_detection(
        &mut self,
        user: IpAddr,
        app: &str,
        key: FlowKey,
        ts: Timestamp,
        ordinal: u64,
    ) -> UdpAttach {
        let id: SessionId = (user, app.to_string());
        match self.sessions.get_mut(&id) {
            Some(s) => {
                s.advance_to(ts, &self.config, &*self.classifier, &mut self.counters, &mut self.events);
                self.attach(&id, key, DomainType::TimeCritical, ts, ordinal, None);
                UdpAttach::Tracked
            }
            None => {
                self.counters.orphaned_udp += 1;
                self.events.push(SessionEvent::UdpOrphaned { user, app: app.to_string(), key, ts });
                UdpAttach::Orphaned
            }
        }
    }

    pub fn is_tracked(&self, key: &FlowKey) -> bool {
        self.flow_index.contains_key(key)
    }

    /// Counts a packet of a tracked flow; other packets are ignored.
    pub fn accumulate(&mut self, pkt: &PacketRecord, key: &FlowKey, rtt: Option<f64>) -> bool {
        let Some(id) = self.flow_index.get(key) else { return false };
        let s = self.sessions.get_mut(id).expect("indexed session exists");
        s.advance_to(pkt.ts, &self.config, &*self.classifier, &mut self.counters, &mut self.events);
        let f = s.flows.get_mut(key).expect("indexed flow tracked");
        let bytes = pkt.payload_len as u64;
        if pkt.is_upstream() {
            f.cur.pkts_up += 1;
            f.cur.bytes_up += bytes;
        } else {
            f.cur.pkts_down += 1;
            f.cur.bytes_down += bytes;
        }
        if rtt.is_some() {
            if let Some(entry) = s.flow_log.get_mut(key) {
                entry.1 = rtt;
            }
        }
        s.last_packet = s.last_packet.max(pkt.ts);
        true
    }

    /// A flow left the flow table.
    pub fn flow_evicted(&mut self, key: &FlowKey, now: Timestamp) {
        if let Some(id) = self.flow_index.remove(key) {
            if let Some(s) = self.sessions.get_mut(&id) {
                s.flows.remove(key);
                self.events.push(SessionEvent::FlowDetached { user: id.0, app: id.1, key: *key, ts: now });
            }
        }
        for cand in self.candidates.values_mut() {
            cand.flows.retain(|(k, _)| k != key);
        }
    }

    /// Advances every session to `now`, closing intervals, then closes
    /// idle sessions and forgets stale candidates.
    pub fn tick(&mut self, now: Timestamp) {
        for s in self.sessions.values_mut() {
            s.advance_to(now, &self.config, &*self.classifier, &mut self.counters, &mut self.events);
        }
        let idle = secs_to_nanos(self.config.idle_timeout);
        let expired: Vec<SessionId> =
            self.sessions.iter().filter(|(_, s)| now.nanos_since(s.last_packet) > idle).map(|(id, _)| id.clone()).collect();
        for id in expired {
            self.close(&id);
        }
        let stale = secs_to_nanos(self.config.candidate_timeout);
        self.candidates.retain(|_, c| now.nanos_since(c.last) <= stale);
    }

    fn close(&mut self, id: &SessionId) {
        let Some(mut s) = self.sessions.remove(id) else { return };
        let through = s.interval_start(s.interval_of(s.last_packet) + 1);
        s.advance_to(through, &self.config, &*self.classifier, &mut self.counters, &mut self.events);
        for key in s.flows.keys() {
            self.flow_index.remove(key);
        }
        self.counters.sessions_closed += 1;
        self.events.push(SessionEvent::SessionClosed(s.into_report(&self.config)));
    }

    /// End of input: closes every open session.
    pub fn finish(&mut self) {
        let ids: Vec<SessionId> = self.sessions.keys().cloned().collect();
        for id in ids {
            self.close(&id);
        }
        self.candidates.clear();
    }
}
