//! The real-time engine: capture feeds a per-user flow table, the
//! signature matcher decides flows, the session engine accumulates and
//! classifies, and closed sessions come out as reports.
//!
//! Packets are sharded by user address, so all stages of one user run on
//! one worker and no state is shared between workers.

mod bench;
mod evaluate;
mod report;

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::net::IpAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use crossbeam_channel::{bounded, unbounded, Sender, TrySendError};
use ipnet::IpNet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bench::{bench, BenchConfig, BenchReport, StageStat};
pub use evaluate::{
    evaluate, label_intervals, DurationBucket, Evaluation, LabeledInterval, RateCell, SessionMatch,
};
pub use report::{
    latency_bucket, read_reports, report_latency_by_as, write_interval_csvs, write_reports, AsMap, LatencyBucket,
    LatencyRow, LatencyTable, ReportLine, UNKNOWN_AS,
};

use crate::capture::{CaptureError, FrameSource, PacketParser, PacketRecord, Transport};
use crate::classifier::{ClassifierError, FeatureSpec, ForestModel, StateClassifier};
use crate::flowtable::{DomainType, FlowKey, FlowState, FlowTable, FlowTableConfig, FlowUpdate, MatchStatus};
use crate::session::{
    AttributeVector, Classification, IdleFlowPolicy, IntervalClassifier, IntervalRecord, NoClassifier, SessionConfig,
    SessionEngine, SessionEvent, SessionReport, StateLabel,
};
use crate::signatures::{builtin_signature_set, load_model, MatchOutcome, SignatureError, SignatureMatcher, SignatureSet};
use crate::synth::SynthError;
use crate::time::{secs_to_nanos, Timestamp};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Signatures(#[from] SignatureError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Capture(#[from] CaptureError),
    #[error("SIDE_CAR_MISMATCH: {0}")]
    SidecarMismatch(String),
    #[error("BAD_AS_MAP: {0}")]
    BadAsMap(String),
    #[error("bad report file: {0}")]
    BadReport(String),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// Signature or classifier model could not be loaded or used.
    pub fn is_model_error(&self) -> bool {
        matches!(self, PipelineError::Signatures(_) | PipelineError::Classifier(_))
    }
}

/// What the ingest thread does when a worker queue is full.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backpressure {
    /// Wait for the worker; nothing is lost.
    #[default]
    Block,
    /// Drop the packets of the batch and count them. Ticks are never dropped.
    Drop,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// Signature model; the built-in table when absent.
    pub signatures: Option<PathBuf>,
    pub stateless_models: Vec<PathBuf>,
    pub stateful_models: Vec<PathBuf>,
    pub interval_len: f64,
    pub past_states: usize,
    pub threshold: f64,
    /// TCP server ports that make a flow a primary-domain candidate.
    pub primary_ports: Vec<u16>,
    /// UDP server ports for the time-critical stage; the ports of the
    /// signature model when absent.
    pub udp_ports: Option<Vec<u16>>,
    pub udp_stage: bool,
    pub local_prefixes: Vec<IpNet>,
    pub shards: usize,
    /// Batches queued per worker.
    pub queue_capacity: usize,
    pub backpressure: Backpressure,
    pub flowtable: FlowTableConfig,
    pub session_idle_timeout: f64,
    pub candidate_timeout: f64,
    /// Trace-time period of housekeeping ticks, in seconds.
    pub tick_secs: f64,
    pub idle_flows: IdleFlowPolicy,
    pub as_map: Option<PathBuf>,
    pub report_sink: Option<PathBuf>,
    /// Keep every closed interval in the run output.
    pub collect_intervals: bool,
    /// Keep flow attach and detach events in the run output.
    pub trace_events: bool,
    /// Measure per-stage processing time.
    pub timing: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            signatures: None,
            stateless_models: Vec::new(),
            stateful_models: Vec::new(),
            interval_len: 10.0,
            past_states: crate::classifier::DEFAULT_PAST_STATES,
            threshold: crate::classifier::DEFAULT_THRESHOLD,
            primary_ports: vec![443],
            udp_ports: None,
            udp_stage: true,
            local_prefixes: vec!["10.0.0.0/8".parse().expect("valid prefix")],
            shards: 1,
            queue_capacity: 64,
            backpressure: Backpressure::Block,
            flowtable: FlowTableConfig::default(),
            session_idle_timeout: 120.0,
            candidate_timeout: 120.0,
            tick_secs: 1.0,
            idle_flows: IdleFlowPolicy::Include,
            as_map: None,
            report_sink: None,
            collect_intervals: false,
            trace_events: false,
            timing: false,
        }
    }
}

impl EngineConfig {
    pub fn from_json(text: &str) -> Result<EngineConfig, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(PipelineError::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        self.validate_runtime()
    }

    /// Checks everything except the classifier threshold, which belongs to
    /// the classifier once one is built.
    fn validate_runtime(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(self.interval_len > 0.0 && self.interval_len.is_finite()) {
            return bad(format!("interval length {} must be positive", self.interval_len));
        }
        if self.past_states < 1 {
            return bad("past states N must be at least 1".into());
        }
        if self.shards < 1 || self.queue_capacity < 1 {
            return bad("shards and queue capacity must be at least 1".into());
        }
        if !(self.tick_secs > 0.0 && self.tick_secs <= self.interval_len) {
            return bad(format!("tick period {} must be in (0, interval length]", self.tick_secs));
        }
        if self.local_prefixes.is_empty() {
            return bad("no local prefix configured".into());
        }
        if self.primary_ports.is_empty() {
            return bad("no primary port configured".into());
        }
        if self.flowtable.k_max == 0 {
            return bad("k_max must be at least 1".into());
        }
        for (name, v) in [
            ("session idle timeout", self.session_idle_timeout),
            ("candidate timeout", self.candidate_timeout),
            ("flow candidate timeout", self.flowtable.idle_timeout_candidate),
            ("flow tracked timeout", self.flowtable.idle_timeout_tracked),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} {v} must be non-negative"));
            }
        }
        Ok(())
    }

    fn session_config(&self) -> SessionConfig {
        SessionConfig {
            interval_len: self.interval_len,
            idle_timeout: self.session_idle_timeout,
            candidate_timeout: self.candidate_timeout,
            past_states: self.past_states,
            idle_flows: self.idle_flows,
            trace_intervals: false,
        }
    }
}

/// A flow the matcher identified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowDetection {
    pub key: FlowKey,
    pub app: String,
    pub domain_type: DomainType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix: Option<String>,
    pub detected_at: f64,
    pub first_seen: f64,
    /// Last packet before the flow left the table.
    pub last_seen: f64,
}

impl FlowDetection {
    pub fn duration(&self) -> f64 {
        self.last_seen - self.first_seen
    }
}

/// Processing time per stage, in milliseconds per session per interval.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub detection: f64,
    pub statistics: f64,
    pub classification: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EngineMetrics {
    pub frames: u64,
    pub packets_processed: u64,
    /// Packets no stage looks at (other ports, transit, non-IP).
    pub packets_filtered: u64,
    pub unparsed_frames: u64,
    pub flows_tracked: u64,
    pub flows_matched: u64,
    pub flows_rejected: u64,
    pub sessions_started: u64,
    pub sessions_closed: u64,
    /// Sessions still open when the counters were read.
    pub sessions_active: u64,
    pub intervals_classified: u64,
    pub stateless_decisions: u64,
    pub fallbacks: u64,
    pub orphaned_udp: u64,
    /// Packets dropped under backpressure.
    pub dropped_packets: u64,
    /// Packets of new flows refused by a full flow table.
    pub table_full_drops: u64,
    /// Only filled when timing is on.
    pub stage_ms: Option<StageTimes>,
}

#[derive(Debug, Clone, Copy, Default)]
struct WorkerStats {
    packets: u64,
    filtered: u64,
    flows_tracked: u64,
    flows_matched: u64,
    flows_rejected: u64,
    table_full: u64,
}

/// Everything a run produced, in a stable order.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub sessions: Vec<SessionReport>,
    pub detections: Vec<FlowDetection>,
    pub intervals: Vec<IntervalRecord>,
    pub events: Vec<SessionEvent>,
    pub metrics: EngineMetrics,
}

const DETECTION: usize = 0;
const STATISTICS: usize = 1;
const CLASSIFICATION: usize = 2;

/// Wraps a classifier and sums the time spent inside it.
struct TimedClassifier {
    inner: Arc<dyn IntervalClassifier>,
    nanos: AtomicU64,
}

impl TimedClassifier {
    fn nanos(&self) -> u64 {
        self.nanos.load(Ordering::Relaxed)
    }
}

impl IntervalClassifier for TimedClassifier {
    fn classify(&self, app: &str, attrs: &AttributeVector, past: &[StateLabel]) -> Classification {
        let t = Instant::now();
        let c = self.inner.classify(app, attrs, past);
        self.nanos.fetch_add(t.elapsed().as_nanos() as u64, Ordering::Relaxed);
        c
    }
}

/// Loaded models plus configuration; shared read-only by all workers.
pub struct Engine {
    config: EngineConfig,
    signatures: SignatureSet,
    matcher: Arc<SignatureMatcher>,
    classifier: Arc<dyn IntervalClassifier>,
    udp_ports: Vec<u16>,
    as_map: Option<Arc<AsMap>>,
}

impl Engine {
    /// Loads every model file named in the configuration.
    pub fn load(config: EngineConfig) -> Result<Engine, PipelineError> {
        config.validate()?;
        let signatures = match &config.signatures {
            Some(p) => load_model(p)?,
            None => builtin_signature_set(),
        };
        let mut models = Vec::new();
        for p in config.stateless_models.iter().chain(&config.stateful_models) {
            models.push(ForestModel::load(p)?);
        }
        let classifier: Arc<dyn IntervalClassifier> = if models.is_empty() {
            Arc::new(NoClassifier)
        } else {
            let stateful = models.iter().any(|m| matches!(m.feature_spec, FeatureSpec::Stateful { .. }));
            let c = StateClassifier::from_models(models, config.threshold)?;
            if stateful && c.past_states() != config.past_states {
                return Err(PipelineError::Config(format!(
                    "stateful models use N = {}, configuration says {}",
                    c.past_states(),
                    config.past_states
                )));
            }
            Arc::new(c)
        };
        let as_map = config.as_map.as_ref().map(AsMap::load).transpose()?;
        let mut engine = Engine::new(config, signatures, classifier)?;
        engine.as_map = as_map.map(Arc::new);
        Ok(engine)
    }

    pub fn new(
        config: EngineConfig,
        signatures: SignatureSet,
        classifier: Arc<dyn IntervalClassifier>,
    ) -> Result<Engine, PipelineError> {
        config.validate_runtime()?;
        signatures.validate()?;
        let udp_ports = config.udp_ports.clone().unwrap_or_else(|| signatures.udp_ports());
        Ok(Engine {
            matcher: Arc::new(SignatureMatcher::new(&signatures)),
            signatures,
            classifier,
            udp_ports,
            as_map: None,
            config,
        })
    }

    pub fn with_as_map(mut self, map: AsMap) -> Self {
        self.as_map = Some(Arc::new(map));
        self
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn signatures(&self) -> &SignatureSet {
        &self.signatures
    }

    /// A worker owning one shard of the flow table and sessions.
    pub fn worker(&self) -> Worker {
        Worker::new(self, None, self.config.timing)
    }

    /// Replays a frame source to the end and returns the sorted output.
    pub fn run<S: FrameSource>(&self, source: S) -> Result<RunOutput, PipelineError> {
        self.run_streaming(source, |_| {})
    }

    /// Like [`Engine::run`], also handing each report to `on_session` as
    /// soon as its session closes.
    pub fn run_streaming<S, F>(&self, mut source: S, mut on_session: F) -> Result<RunOutput, PipelineError>
    where
        S: FrameSource,
        F: FnMut(&SessionReport) + Send,
    {
        let mut parser = PacketParser::new(source.link_type(), self.config.local_prefixes.clone());
        let mut ticks = TickClock::new(secs_to_nanos(self.config.tick_secs).max(1));
        let mut ordinal = 0u64;
        let mut dropped = 0u64;

        let outputs = if self.config.shards == 1 {
            let (tx, rx) = unbounded();
            let mut w = Worker::new(self, Some(tx), self.config.timing);
            while let Some(frame) = source.next_frame() {
                let ord = ordinal;
                ordinal += 1;
                let Some(rec) = parser.parse(&frame) else { continue };
                ticks.advance(rec.ts, |t| w.tick(t));
                w.process(&rec, ord);
                for r in rx.try_iter() {
                    on_session(&r);
                }
            }
            let out = w.finish();
            for r in rx.try_iter() {
                on_session(&r);
            }
            vec![out]
        } else {
            let n = self.config.shards;
            std::thread::scope(|scope| -> Result<Vec<WorkerOutput>, PipelineError> {
                let (report_tx, report_rx) = unbounded::<SessionReport>();
                let mut queues = Vec::with_capacity(n);
                let mut handles = Vec::with_capacity(n);
                for _ in 0..n {
                    let (tx, rx) = bounded::<Vec<Msg>>(self.config.queue_capacity);
                    let mut w = Worker::new(self, Some(report_tx.clone()), self.config.timing);
                    handles.push(scope.spawn(move || {
                        for batch in rx {
                            for m in batch {
                                match m {
                                    Msg::Packet(p, o) => w.process(&p, o),
                                    Msg::Tick(t) => w.tick(t),
                                }
                            }
                        }
                        w.finish()
                    }));
                    queues.push(tx);
                }
                drop(report_tx);
                let writer = scope.spawn(move || {
                    for r in report_rx {
                        on_session(&r);
                    }
                });

                let mut batches: Vec<Vec<Msg>> = (0..n).map(|_| Vec::with_capacity(BATCH)).collect();
                let policy = self.config.backpressure;
                let send = |i: usize, batch: Vec<Msg>, dropped: &mut u64| -> Result<(), PipelineError> {
                    let gone = || PipelineError::Config("worker stopped early".into());
                    match policy {
                        Backpressure::Block => queues[i].send(batch).map_err(|_| gone()),
                        Backpressure::Drop => match queues[i].try_send(batch) {
                            Ok(()) => Ok(()),
                            Err(TrySendError::Full(batch)) => {
                                let (keep, lost): (Vec<Msg>, Vec<Msg>) =
                                    batch.into_iter().partition(|m| matches!(m, Msg::Tick(_)));
                                *dropped += lost.len() as u64;
                                if keep.is_empty() {
                                    Ok(())
                                } else {
                                    queues[i].send(keep).map_err(|_| gone())
                                }
                            }
                            Err(TrySendError::Disconnected(_)) => Err(gone()),
                        },
                    }
                };
                while let Some(frame) = source.next_frame() {
                    let ord = ordinal;
                    ordinal += 1;
                    let Some(rec) = parser.parse(&frame) else { continue };
                    let mut ticked = false;
                    ticks.advance(rec.ts, |t| {
                        ticked = true;
                        for b in batches.iter_mut() {
                            b.push(Msg::Tick(t));
                        }
                    });
                    if ticked {
                        for (i, b) in batches.iter_mut().enumerate() {
                            send(i, std::mem::replace(b, Vec::with_capacity(BATCH)), &mut dropped)?;
                        }
                    }
                    let i = shard_of(&rec.local_ip(), n);
                    batches[i].push(Msg::Packet(rec, ord));
                    if batches[i].len() >= BATCH {
                        send(i, std::mem::replace(&mut batches[i], Vec::with_capacity(BATCH)), &mut dropped)?;
                    }
                }
                for (i, b) in batches.into_iter().enumerate() {
                    if !b.is_empty() {
                        send(i, b, &mut dropped)?;
                    }
                }
                drop(queues);
                let outputs = handles.into_iter().map(|h| h.join().expect("worker panicked")).collect();
                writer.join().expect("report writer panicked");
                Ok(outputs)
            })?
        };

        let stats = parser.stats().clone();
        let mut out = merge_outputs(outputs, self.config.timing);
        out.metrics.frames = stats.frames + source.dropped_frames();
        out.metrics.unparsed_frames = stats.frames - stats.records + source.dropped_frames();
        out.metrics.packets_filtered += out.metrics.unparsed_frames;
        out.metrics.dropped_packets = dropped;
        Ok(out)
    }
}

const BATCH: usize = 256;

enum Msg {
    Packet(PacketRecord, u64),
    Tick(Timestamp),
}

/// Emits housekeeping ticks at whole multiples of the period, in trace
/// time, before the first packet at or past each tick.
struct TickClock {
    period: u64,
    next: Option<u64>,
}

impl TickClock {
    fn new(period: u64) -> Self {
        TickClock { period, next: None }
    }

    fn advance(&mut self, ts: Timestamp, mut emit: impl FnMut(Timestamp)) {
        let period = self.period;
        let next = self.next.get_or_insert_with(|| ts.0.div_ceil(period) * period);
        while *next <= ts.0 {
            emit(Timestamp(*next));
            *next += period;
        }
    }
}

fn shard_of(ip: &IpAddr, n: usize) -> usize {
    let mut h = DefaultHasher::new();
    ip.hash(&mut h);
    (h.finish() % n as u64) as usize
}

#[derive(Debug, Default)]
pub struct WorkerOutput {
    pub sessions: Vec<SessionReport>,
    pub detections: Vec<FlowDetection>,
    pub intervals: Vec<IntervalRecord>,
    pub events: Vec<SessionEvent>,
    metrics: EngineMetrics,
    stage_ns: [u64; 3],
}

fn event_ts(e: &SessionEvent) -> Timestamp {
    match e {
        SessionEvent::SessionStarted { ts, .. }
        | SessionEvent::FlowAttached { ts, .. }
        | SessionEvent::UdpOrphaned { ts, .. }
        | SessionEvent::FlowDetached { ts, .. } => *ts,
        SessionEvent::IntervalClosed(r) => r.start,
        SessionEvent::SessionClosed(r) => Timestamp::from_secs_f64(r.end),
    }
}

fn merge_outputs(outputs: Vec<WorkerOutput>, timing: bool) -> RunOutput {
    let mut run = RunOutput::default();
    let mut stage_ns = [0u64; 3];
    let m = &mut run.metrics;
    for o in outputs {
        run.sessions.extend(o.sessions);
        run.detections.extend(o.detections);
        run.intervals.extend(o.intervals);
        run.events.extend(o.events);
        let w = o.metrics;
        m.packets_processed += w.packets_processed;
        m.packets_filtered += w.packets_filtered;
        m.flows_tracked += w.flows_tracked;
        m.flows_matched += w.flows_matched;
        m.flows_rejected += w.flows_rejected;
        m.sessions_started += w.sessions_started;
        m.sessions_closed += w.sessions_closed;
        m.sessions_active += w.sessions_active;
        m.intervals_classified += w.intervals_classified;
        m.stateless_decisions += w.stateless_decisions;
        m.fallbacks += w.fallbacks;
        m.orphaned_udp += w.orphaned_udp;
        m.table_full_drops += w.table_full_drops;
        for (a, b) in stage_ns.iter_mut().zip(o.stage_ns) {
            *a += b;
        }
    }
    if timing {
        let cycles = m.intervals_classified.max(1) as f64;
        let ms = |ns: u64| ns as f64 / 1e6 / cycles;
        m.stage_ms = Some(StageTimes {
            detection: ms(stage_ns[DETECTION]),
            statistics: ms(stage_ns[STATISTICS]),
            classification: ms(stage_ns[CLASSIFICATION]),
        });
    }
    sort_output(&mut run);
    run
}

fn sort_output(run: &mut RunOutput) {
    run.sessions.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.user.cmp(&b.user)).then(a.app.cmp(&b.app)));
    run.detections.sort_by(|a, b| a.detected_at.total_cmp(&b.detected_at).then(a.key.cmp(&b.key)));
    run.intervals.sort_by(|a, b| (a.start, a.user, &a.app, a.index).cmp(&(b.start, b.user, &b.app, b.index)));
    run.events.sort_by_key(event_ts);
}

/// One shard: flow table, matcher and session engine for a set of users.
pub struct Worker {
    table: FlowTable,
    matcher: Arc<SignatureMatcher>,
    engine: SessionEngine,
    primary_ports: Vec<u16>,
    udp_ports: Vec<u16>,
    local: Vec<IpNet>,
    timer: Option<Arc<TimedClassifier>>,
    open: HashMap<FlowKey, FlowDetection>,
    out: WorkerOutput,
    stats: WorkerStats,
    stage_ns: [u64; 3],
    keep_intervals: bool,
    keep_events: bool,
    as_map: Option<Arc<AsMap>>,
    reports: Option<Sender<SessionReport>>,
}

impl Worker {
    fn new(engine: &Engine, reports: Option<Sender<SessionReport>>, timing: bool) -> Worker {
        let cfg = &engine.config;
        let timer = timing.then(|| Arc::new(TimedClassifier { inner: engine.classifier.clone(), nanos: AtomicU64::new(0) }));
        let classifier: Arc<dyn IntervalClassifier> = match &timer {
            Some(t) => t.clone(),
            None => engine.classifier.clone(),
        };
        Worker {
            table: FlowTable::new(cfg.flowtable.clone()),
            matcher: engine.matcher.clone(),
            engine: SessionEngine::new(cfg.session_config(), &engine.signatures, classifier),
            primary_ports: cfg.primary_ports.clone(),
            udp_ports: if cfg.udp_stage { engine.udp_ports.clone() } else { Vec::new() },
            local: cfg.local_prefixes.clone(),
            timer,
            open: HashMap::new(),
            out: WorkerOutput::default(),
            stats: WorkerStats::default(),
            stage_ns: [0; 3],
            keep_intervals: cfg.collect_intervals,
            keep_events: cfg.trace_events,
            as_map: engine.as_map.clone(),
            reports,
        }
    }

    pub fn active_sessions(&self) -> usize {
        self.engine.active_sessions()
    }

    /// Cumulative nanoseconds in detection, statistics and classification.
    pub fn stage_nanos(&self) -> [u64; 3] {
        self.stage_ns
    }

    fn clock(&self) -> Option<(Instant, u64)> {
        self.timer.as_ref().map(|t| (Instant::now(), t.nanos()))
    }

    /// Books elapsed time to `stage`, minus what the classifier used.
    fn charge(&mut self, stage: usize, start: Option<(Instant, u64)>) {
        if let (Some((t0, c0)), Some(t)) = (start, &self.timer) {
            let total = t0.elapsed().as_nanos() as u64;
            let inside = t.nanos() - c0;
            self.stage_ns[stage] += total.saturating_sub(inside);
            self.stage_ns[CLASSIFICATION] += inside;
        }
    }

    fn is_candidate(&self, key: &FlowKey) -> bool {
        let port_ok = match key.transport {
            Transport::Tcp => self.primary_ports.contains(&key.dst_port),
            Transport::Udp => self.udp_ports.contains(&key.dst_port),
            Transport::Other => false,
        };
        port_ok && self.local.iter().any(|n| n.contains(&key.src_ip))
    }

    /// One packet; `ordinal` is its frame position in the input.
    pub fn process(&mut self, pkt: &PacketRecord, ordinal: u64) {
        self.stats.packets += 1;
        let key = match FlowKey::from_packet(pkt) {
            Some(k) if self.is_candidate(&k) => k,
            _ => {
                self.stats.filtered += 1;
                return;
            }
        };
        let clock = self.clock();
        let update = match self.table.upsert_packet(pkt) {
            Ok(u) => u,
            Err(_) => {
                self.stats.table_full += 1;
                return;
            }
        };
        if matches!(update, FlowUpdate::Created { .. }) {
            self.stats.flows_tracked += 1;
        }
        if update.appended() {
            self.try_match(&key, pkt, ordinal);
        }
        self.charge(DETECTION, clock);

        let flow = self.table.get(&key).expect("flow just updated");
        if matches!(flow.match_status(), MatchStatus::Matched(_)) {
            let rtt = flow.rtt_ms();
            let clock = self.clock();
            self.engine.accumulate(pkt, &key, rtt);
            self.charge(STATISTICS, clock);
        }
        self.collect_events();
    }

    fn try_match(&mut self, key: &FlowKey, pkt: &PacketRecord, ordinal: u64) {
        let Some(flow) = self.table.get(key) else { return };
        if !flow.match_status().is_pending() {
            return;
        }
        let seq = &flow.upstream_size_seq;
        let outcome = match key.transport {
            Transport::Tcp => self.matcher.match_primary(seq),
            _ => self.matcher.match_udp(key.dst_port, seq),
        };
        let label = match outcome {
            MatchOutcome::Match(l) => l.clone(),
            MatchOutcome::Pending if seq.len() < self.table.config().k_max => return,
            _ => {
                self.table.resolve(key, MatchStatus::Rejected);
                self.stats.flows_rejected += 1;
                return;
            }
        };
        let rtt = flow.rtt_ms();
        let first_seen = flow.first_seen.as_secs_f64();
        self.table.resolve(key, MatchStatus::Matched(label.clone()));
        self.stats.flows_matched += 1;
        let detected_at = pkt.ts.as_secs_f64();
        self.open.insert(
            *key,
            FlowDetection {
                key: *key,
                app: label.metaverse.clone(),
                domain_type: label.domain_type,
                prefix: label.prefix.clone(),
                detected_at,
                first_seen,
                last_seen: detected_at,
            },
        );
        match label.domain_type {
            DomainType::Primary => {
                self.engine.register_primary_detection(key.user(), &label, *key, pkt.ts, ordinal, rtt);
            }
            DomainType::TimeCritical => {
                self.engine.register_udp_detection(key.user(), &label.metaverse, *key, pkt.ts, ordinal);
            }
        }
    }

    /// Housekeeping at trace time `now`: intervals that ended are closed
    /// first, then idle flows leave the table.
    pub fn tick(&mut self, now: Timestamp) {
        let clock = self.clock();
        self.engine.tick(now);
        for f in self.table.evict_idle(now) {
            self.engine.flow_evicted(&f.key, now);
            self.close_detection(&f);
        }
        self.charge(STATISTICS, clock);
        self.collect_events();
    }

    fn close_detection(&mut self, f: &FlowState) {
        if let Some(mut d) = self.open.remove(&f.key) {
            d.last_seen = f.last_seen.as_secs_f64();
            self.out.detections.push(d);
        }
    }

    fn collect_events(&mut self) {
        for ev in self.engine.drain_events() {
            match ev {
                SessionEvent::IntervalClosed(r) => {
                    if self.keep_intervals {
                        self.out.intervals.push(r);
                    }
                }
                SessionEvent::SessionClosed(mut r) => {
                    if let Some(map) = &self.as_map {
                        for f in &mut r.flows {
                            f.as_label = Some(map.lookup(f.key.dst_ip).unwrap_or(UNKNOWN_AS).to_string());
                        }
                    }
                    if let Some(tx) = &self.reports {
                        // the receiver only goes away when the run is over
                        let _ = tx.send(r.clone());
                    }
                    self.out.sessions.push(r);
                }
                other => {
                    if self.keep_events {
                        self.out.events.push(other);
                    }
                }
            }
        }
    }

    /// Counters so far; `stage_ms` is left empty.
    pub fn metrics(&self) -> EngineMetrics {
        let c = self.engine.counters();
        let s = self.stats;
        EngineMetrics {
            packets_processed: s.packets,
            packets_filtered: s.filtered,
            flows_tracked: s.flows_tracked,
            flows_matched: s.flows_matched,
            flows_rejected: s.flows_rejected,
            sessions_started: c.sessions_started,
            sessions_closed: c.sessions_closed,
            sessions_active: self.engine.active_sessions() as u64,
            intervals_classified: c.intervals_closed,
            stateless_decisions: c.stateless_decisions,
            fallbacks: c.fallbacks,
            orphaned_udp: c.orphaned_udp,
            table_full_drops: s.table_full,
            ..Default::default()
        }
    }

    /// End of input: closes all sessions and flows.
    pub fn finish(mut self) -> WorkerOutput {
        self.engine.finish();
        for f in self.table.drain() {
            self.close_detection(&f);
        }
        self.collect_events();
        self.out.metrics = self.metrics();
        self.out.stage_ns = self.stage_ns;
        self.out
    }
}
