//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::{BTreeMap, HashMap};
use std::net::IpAddr;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vrscope::capture::{LinkType, Transport, VecFrameSource};
use vrscope::classifier::{
    cross_validate_sessions, label_space_of, stateful_dataset, stateless_dataset, train_forest, AppModels, CvConfig,
    Dataset, FeatureSpec, ForestModel, Hyperparams, IntervalSample, LabeledSession, StateClassifier, TreeNode,
};
use vrscope::flowtable::{DomainType, FlowKey};
use vrscope::pipeline::{
    bench, evaluate, label_intervals, latency_bucket, report_latency_by_as, AsMap, BenchConfig, Engine, EngineConfig,
    LabeledInterval, LatencyBucket, RunOutput,
};
use vrscope::session::{
    IntervalClassifier, IntervalRecord, NoClassifier, SessionEvent, StateLabel, NUM_ATTRIBUTES,
};
use vrscope::signatures::{
    builtin_signature_set, MatchOutcome, MetaverseSignatures, PrimaryEntry, SignatureMatcher, SignatureSet,
};
use vrscope::synth::{
    generate_corpus, random_segments, server_as_map, session_user, BackgroundConfig, Corpus, Profiles, SessionScript,
    SynthConfig, SynthPacket, DEFAULT_TRACE_START,
};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const APPS: [&str; 4] = ["Multiverse", "VRChat", "Rec Room", "AltSpaceVR"];
const INTERVAL: f64 = 10.0;
const PAST: usize = 5;

fn main() -> ExitCode {
    let checks: [(&str, fn() -> Outcome); 10] = [
        ("1 signature fixtures", signature_fixtures),
        ("2 session detection round trip", session_round_trip),
        ("3 planted collisions", planted_collisions),
        ("4 attribute oracle", attribute_oracle),
        ("5 forest correctness", forest_correctness),
        ("6 stateful vs stateless", stateful_vs_stateless),
        ("7 fallback logic", fallback_logic),
        ("8 throughput", throughput),
        ("9 determinism", determinism),
        ("10 latency buckets", latency_buckets),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  criterion {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  criterion {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    println!("acceptance: {} of 10 criteria passed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------- helpers

fn source(packets: &[SynthPacket]) -> VecFrameSource {
    VecFrameSource::new(LinkType::Ethernet, packets.iter().map(|p| p.frame()).collect())
}

fn plain_engine(config: EngineConfig) -> Engine {
    Engine::new(config, builtin_signature_set(), Arc::new(NoClassifier)).expect("valid engine")
}

/// `per_app` random sessions of every application, users numbered from
/// `first_user`, starts spread over `stagger` seconds.
fn random_scripts(per_app: usize, secs: f64, stagger: f64, seed: u64, first_user: usize) -> Vec<SessionScript> {
    let profiles = Profiles::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scripts = Vec::new();
    for i in 0..per_app {
        for app in APPS {
            let n = scripts.len();
            let segments = random_segments(app, &profiles, secs, &mut rng);
            let mut s = SessionScript::new(app, segments, seed.wrapping_mul(1000).wrapping_add(n as u64), session_user(first_user + n));
            s.start = DEFAULT_TRACE_START + rng.random_range(0.0..stagger.max(1e-3)) + i as f64 * 1e-3;
            scripts.push(s);
        }
    }
    scripts
}

fn corpus(scripts: &[SessionScript], background: Option<(&BackgroundConfig, u64)>) -> Corpus {
    generate_corpus(scripts, &builtin_signature_set(), &Profiles::default(), &SynthConfig::default(), background)
        .expect("generation succeeds")
}

// ------------------------------------------------------- 1: fixtures

/// The measured signature tables, written out independently of the
/// built-in model.
fn table_fixtures() -> Vec<(&'static str, &'static str, &'static str, Vec<u32>)> {
    vec![
        ("Multiverse", "shapevrcloud", "prod", vec![414, 75, 6, 45, 338]),
        ("Multiverse", "shapevrcloud", "prod", vec![414, 75, 6, 45, 591]),
        ("Multiverse", "shapevrcloud", "prodblobs", vec![419, 75, 6, 45, 284]),
        ("VRChat", "vrchat", "api", vec![409, 75, 6, 45, 235]),
        ("VRChat", "vrchat", "pipeline", vec![244, 134, 490]),
        ("VRChat", "vrchat", "assets", vec![410, 75, 6, 45, 305]),
        ("Rec Room", "rec", "api", vec![148, 75, 51, 204]),
        ("Rec Room", "rec", "api", vec![148, 75, 51, 205]),
        ("Rec Room", "rec", "api", vec![148, 75, 51, 253]),
        ("Rec Room", "rec", "auth", vec![149, 75, 51, 216]),
        ("AltSpaceVR", "altvr", "config", vec![409, 75, 6, 45, 269]),
        ("AltSpaceVR", "altvr", "cdn-content-ingress", vec![422, 107, 6, 45, 276]),
        ("AltSpaceVR", "altvr", "account", vec![410, 107, 6, 45, 239]),
    ]
}

fn fixture_set() -> SignatureSet {
    let mut set = SignatureSet::default();
    for (app, domain, prefix, seq) in table_fixtures() {
        if set.metaverse(app).is_none() {
            set.upsert(MetaverseSignatures {
                name: app.into(),
                domain: domain.into(),
                initial_hs_prefixes: Vec::new(),
                primaries: Vec::new(),
                udp: Vec::new(),
            });
        }
        let mut m = set.metaverse(app).unwrap().clone();
        m.primaries.push(PrimaryEntry { prefix: prefix.into(), seq });
        if !m.initial_hs_prefixes.iter().any(|p| p == prefix) {
            m.initial_hs_prefixes.push(prefix.into());
        }
        set.upsert(m);
    }
    set
}

/// Linear scan over the fixtures: Some(index) on exact match, None when the
/// sequence is not even a prefix of one.
fn scan(seq: &[u32]) -> Result<Option<usize>, ()> {
    let fx = table_fixtures();
    if let Some(i) = fx.iter().position(|f| f.3 == seq) {
        return Ok(Some(i));
    }
    if fx.iter().any(|f| f.3.len() > seq.len() && f.3.starts_with(seq)) {
        Ok(None)
    } else {
        Err(())
    }
}

fn signature_fixtures() -> Outcome {
    let t = Instant::now();
    let fixtures = table_fixtures();
    let matcher = SignatureMatcher::new(&fixture_set());
    for (app, _, prefix, seq) in &fixtures {
        match matcher.match_primary(seq) {
            MatchOutcome::Match(l) => ensure!(
                l.metaverse == *app && l.prefix.as_deref() == Some(*prefix) && l.domain_type == DomainType::Primary,
                "{seq:?} labeled {l:?}"
            ),
            other => return Err(format!("{seq:?} gave {other:?}")),
        }
        for k in 1..seq.len() {
            ensure!(matcher.match_primary(&seq[..k]) == MatchOutcome::Pending, "prefix {:?} not pending", &seq[..k]);
        }
    }
    let mut mutations = 0;
    for (i, (_, _, _, seq)) in fixtures.iter().enumerate() {
        let pos = i % seq.len();
        let mutated = [1i64, -1, 2]
            .iter()
            .map(|d| {
                let mut m = seq.clone();
                m[pos] = (m[pos] as i64 + d) as u32;
                m
            })
            .find(|m| scan(m).is_err())
            .ok_or("no rejecting mutation")?;
        ensure!(matcher.match_primary(&mutated) == MatchOutcome::Reject, "mutation {mutated:?} not rejected");
        mutations += 1;
    }
    // the shipped model carries exactly these sequences
    let shipped: Vec<(String, String, Vec<u32>)> = builtin_signature_set()
        .primaries()
        .map(|p| (p.metaverse.to_string(), p.prefix.to_string(), p.size_seq.to_vec()))
        .collect();
    let want: Vec<(String, String, Vec<u32>)> =
        fixtures.iter().map(|(a, _, p, s)| (a.to_string(), p.to_string(), s.clone())).collect();
    ensure!(shipped == want, "built-in table differs from the fixtures");
    let ms = t.elapsed().as_secs_f64() * 1e3;
    ensure!(ms < 1000.0, "took {ms:.0} ms");
    Ok(format!("{} sequences matched, {mutations} mutations rejected in {ms:.1} ms", fixtures.len()))
}

// ------------------------------------------------- 2, 3: detection

fn session_round_trip() -> Outcome {
    let t = Instant::now();
    let scripts = random_scripts(20, 180.0, 300.0, 21, 0);
    let bg = BackgroundConfig { n_flows: 100_000, span_secs: 600.0, ..Default::default() };
    let c = corpus(&scripts, Some((&bg, 22)));
    let out = plain_engine(EngineConfig::default()).run(source(&c.packets)).map_err(|e| e.to_string())?;
    let ev = evaluate(&out.detections, &out.sessions, &c.truth, INTERVAL).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    ensure!(ev.sessions.positives == 80, "{} sessions in the truth", ev.sessions.positives);
    ensure!(ev.sessions.tp == 80 && ev.sessions.fp == 0, "session {}", ev.sessions.tp_fp());
    ensure!(secs < 60.0, "took {secs:.1} s");
    Ok(format!(
        "session {} over {} packets; flow {} ({} FP of {} background flows)",
        ev.sessions.tp_fp(),
        c.packets.len(),
        ev.flows.tp_fp(),
        ev.flows.fp,
        ev.flows.negatives.unwrap_or(0)
    ))
}

fn planted_collisions() -> Outcome {
    let scripts = random_scripts(3, 120.0, 60.0, 31, 0);
    let bg = BackgroundConfig {
        n_flows: 5000,
        span_secs: 300.0,
        exclude_collisions: false,
        planted: 10,
        ..Default::default()
    };
    let c = corpus(&scripts, Some((&bg, 32)));
    let planted = c.truth.background.as_ref().map(|b| b.planted.clone()).unwrap_or_default();
    ensure!(planted.len() == 10, "{} planted flows", planted.len());
    let out = plain_engine(EngineConfig::default()).run(source(&c.packets)).map_err(|e| e.to_string())?;
    let ev = evaluate(&out.detections, &out.sessions, &c.truth, INTERVAL).map_err(|e| e.to_string())?;
    let hit = planted.iter().filter(|k| out.detections.iter().any(|d| d.key == **k)).count();
    ensure!(ev.flows.fp > 0, "no flow-level false positive");
    ensure!(hit == 10, "{hit} of 10 planted flows detected");
    ensure!(ev.sessions.fp == 0, "{} false sessions", ev.sessions.fp);
    ensure!(ev.sessions.tp == ev.sessions.positives, "session {}", ev.sessions.tp_fp());
    Ok(format!("flow FP {} (all 10 planted matched), session {}", ev.flows.fp, ev.sessions.tp_fp()))
}

// ------------------------------------------------- 4: attributes

struct Attached {
    domain: DomainType,
    at: u64,
    since: u64,
    detached: Option<u64>,
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Welford's running variance; population σ.
fn sigma(v: &[f64]) -> f64 {
    let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
    for &x in v {
        n += 1.0;
        let d = x - mean;
        mean += d / n;
        m2 += d * (x - mean);
    }
    if n < 2.0 {
        0.0
    } else {
        (m2 / n).sqrt()
    }
}

/// Block of a flow class: TCP primary, TCP time-critical, UDP primary,
/// UDP time-critical.
fn class_of(t: Transport, d: DomainType) -> usize {
    match (t, d) {
        (Transport::Udp, DomainType::Primary) => 2,
        (Transport::Udp, DomainType::TimeCritical) => 3,
        (_, DomainType::Primary) => 0,
        (_, DomainType::TimeCritical) => 1,
    }
}

/// Recomputes one interval from raw packets.
fn brute_force(
    rec: &IntervalRecord,
    flows: &BTreeMap<FlowKey, Attached>,
    packets: &[SynthPacket],
    by_key: &HashMap<FlowKey, Vec<usize>>,
) -> [f64; NUM_ATTRIBUTES] {
    let start = rec.start.0;
    let end = start + (INTERVAL * 1e9) as u64;
    // per class: (volume, packets, mean size) per flow, and new-flow count
    let mut per: [Vec<(f64, f64, f64)>; 4] = Default::default();
    let mut new = [0.0; 4];
    for (key, f) in flows {
        if f.at >= end || f.detached.is_some_and(|d| d < end) {
            continue;
        }
        let (mut bytes, mut count) = (0u64, 0u64);
        for &i in by_key.get(key).map(Vec::as_slice).unwrap_or(&[]) {
            let p = &packets[i];
            if (i as u64) >= f.since && p.ts.0 >= start && p.ts.0 < end {
                bytes += p.payload_len as u64;
                count += 1;
            }
        }
        let c = class_of(key.transport, f.domain);
        let size = if count == 0 { 0.0 } else { bytes as f64 / count as f64 };
        per[c].push((bytes as f64, count as f64, size));
        if f.at >= start {
            new[c] += 1.0;
        }
    }
    let mut a = [0.0; NUM_ATTRIBUTES];
    for c in 0..4 {
        let rows = &per[c];
        if rows.is_empty() {
            continue;
        }
        let cols: [Vec<f64>; 3] = [
            rows.iter().map(|r| r.0).collect(),
            rows.iter().map(|r| r.1).collect(),
            rows.iter().map(|r| r.2).collect(),
        ];
        for (j, col) in cols.iter().enumerate() {
            a[6 * c + j] = median(&mut col.clone());
            a[6 * c + 3 + j] = sigma(col);
        }
        a[24 + 4 * c] = rows.len() as f64;
        a[24 + 4 * c + 1] = new[c];
        a[24 + 4 * c + 2] = cols[0].iter().sum();
        a[24 + 4 * c + 3] = cols[1].iter().sum();
    }
    a
}

fn is_sigma(i: usize) -> bool {
    i < 24 && i % 6 >= 3
}

fn attribute_oracle() -> Outcome {
    let scripts = random_scripts(13, 150.0, 120.0, 41, 0).into_iter().take(50).collect::<Vec<_>>();
    let c = corpus(&scripts, None);
    let cfg = EngineConfig { collect_intervals: true, trace_events: true, ..Default::default() };
    let out = plain_engine(cfg).run(source(&c.packets)).map_err(|e| e.to_string())?;
    ensure!(out.sessions.len() == 50, "{} sessions detected", out.sessions.len());

    let mut by_key: HashMap<FlowKey, Vec<usize>> = HashMap::new();
    for (i, p) in c.packets.iter().enumerate() {
        let up = FlowKey { src_ip: IpAddr::V4(p.src), dst_ip: IpAddr::V4(p.dst), src_port: p.src_port, dst_port: p.dst_port, transport: p.transport };
        let down = FlowKey { src_ip: up.dst_ip, dst_ip: up.src_ip, src_port: up.dst_port, dst_port: up.src_port, transport: up.transport };
        by_key.entry(up).or_default().push(i);
        by_key.entry(down).or_default().push(i);
    }
    let mut flows: HashMap<(IpAddr, String), BTreeMap<FlowKey, Attached>> = HashMap::new();
    let mut detaches = 0;
    for e in &out.events {
        match e {
            SessionEvent::FlowAttached { user, app, key, domain_type, ts, since } => {
                let prev = flows
                    .entry((*user, app.clone()))
                    .or_default()
                    .insert(*key, Attached { domain: *domain_type, at: ts.0, since: *since, detached: None });
                ensure!(prev.is_none(), "flow {key:?} attached twice");
            }
            SessionEvent::FlowDetached { user, app, key, ts } => {
                let f = flows.get_mut(&(*user, app.clone())).and_then(|m| m.get_mut(key));
                f.ok_or(format!("detach of unknown flow {key:?}"))?.detached = Some(ts.0);
                detaches += 1;
            }
            _ => {}
        }
    }

    let (mut exact, mut sigmas, mut worst) = (0u64, 0u64, 0.0f64);
    let mut multiverse = 0;
    let mut nonzero_tcp_primary = false;
    for rec in &out.intervals {
        let f = flows.get(&(rec.user, rec.app.clone())).ok_or("interval of a session without flows")?;
        let want = brute_force(rec, f, &c.packets, &by_key);
        for (i, (&got, &w)) in rec.attributes.as_slice().iter().zip(&want).enumerate() {
            if is_sigma(i) {
                let rel = if got == w { 0.0 } else { (got - w).abs() / got.abs().max(w.abs()) };
                ensure!(rel <= 1e-9, "{} interval {} A{}: {got} vs {w}", rec.app, rec.index, i + 1);
                worst = worst.max(rel);
                sigmas += 1;
            } else {
                ensure!(got == w, "{} interval {} A{}: {got} vs {w}", rec.app, rec.index, i + 1);
                exact += 1;
            }
        }
        if rec.app == "Multiverse" {
            multiverse += 1;
            let zero = (6..18).chain(28..36).all(|i| rec.attributes.0[i] == 0.0);
            ensure!(zero, "Multiverse interval {} has TCP time-critical or UDP primary traffic", rec.index);
            nonzero_tcp_primary |= rec.attributes.0[26] > 0.0;
        }
    }
    ensure!(multiverse > 0 && nonzero_tcp_primary, "no Multiverse traffic to check");
    Ok(format!(
        "{} intervals: {exact} sums/medians exact, {sigmas} σ within {worst:.1e}; {detaches} evictions; \
         20 zero attributes in all {multiverse} Multiverse intervals",
        out.intervals.len()
    ))
}

// ------------------------------------------------- 5: forest

/// Independent traversal and vote: walks the nodes by hand, then counts
/// leaf argmaxes with ties to the lower index.
fn manual_vote(model: &ForestModel, x: &[f64]) -> (usize, u32) {
    let mut votes = vec![0u32; model.label_space.len()];
    for tree in &model.trees {
        let mut node = tree;
        let counts = loop {
            match node {
                TreeNode::Split { feature, threshold, left, right } => {
                    node = if x[*feature] <= *threshold { left } else { right };
                }
                TreeNode::Leaf { counts } => break counts,
            }
        };
        let mut best = 0;
        for i in 1..counts.len() {
            if counts[i] > counts[best] {
                best = i;
            }
        }
        votes[best] += 1;
    }
    let mut best = 0;
    for i in 1..votes.len() {
        if votes[i] > votes[best] {
            best = i;
        }
    }
    (best, votes[best])
}

fn forest_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let labels = [StateLabel::HS, StateLabel::MH, StateLabel::SUE, StateLabel::CC];
    let mut data = Dataset::default();
    for _ in 0..800 {
        let x: Vec<f64> = (0..NUM_ATTRIBUTES).map(|_| rng.random_range(0.0..100.0)).collect();
        let score = x[0] + 0.5 * x[7] - 0.3 * x[21] + rng.random_range(-10.0..10.0);
        let y = labels[((score / 40.0).floor().clamp(0.0, 3.0)) as usize];
        data.push(x, y);
    }
    let hyper = Hyperparams { n_trees: 31, max_depth: 8, max_features: 6 };
    let model = train_forest(&data, &labels, FeatureSpec::Stateless, hyper, 7).map_err(|e| e.to_string())?;
    for _ in 0..1000 {
        let x: Vec<f64> = (0..NUM_ATTRIBUTES).map(|_| rng.random_range(-10.0..110.0)).collect();
        let p = model.predict(&x).map_err(|e| e.to_string())?;
        let (best, votes) = manual_vote(&model, &x);
        ensure!(p.label == model.label_space[best], "label {} vs {}", p.label, model.label_space[best]);
        ensure!(p.confidence == votes as f64 / model.trees.len() as f64, "confidence {}", p.confidence);
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    for threads in [1, 4] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| e.to_string())?;
        let m = pool.install(|| train_forest(&data, &labels, FeatureSpec::Stateless, hyper, 7)).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("model-{threads}.json"));
        m.save(&path).map_err(|e| e.to_string())?;
        files.push(std::fs::read(&path).map_err(|e| e.to_string())?);
    }
    ensure!(files[0] == files[1], "seeded models differ across thread counts");
    let other = train_forest(&data, &labels, FeatureSpec::Stateless, hyper, 8).map_err(|e| e.to_string())?;
    ensure!(other.to_json().as_bytes() != files[0].as_slice(), "seed has no effect");
    Ok(format!("1000 predictions equal manual traversal; model files bit-identical ({} bytes)", files[0].len()))
}

// ------------------------------------------------- 6, 7, 8: classifier

/// Labeled sessions per application from a feature-extraction replay.
struct Lab {
    sessions: BTreeMap<String, Vec<Vec<LabeledInterval>>>,
}

fn lab() -> &'static Lab {
    static LAB: OnceLock<Lab> = OnceLock::new();
    LAB.get_or_init(|| {
        let mut sessions = BTreeMap::new();
        for (a, app) in APPS.iter().enumerate() {
            let profiles = Profiles::default();
            let mut rng = ChaCha8Rng::seed_from_u64(60 + a as u64);
            let scripts: Vec<SessionScript> = (0..30)
                .map(|i| {
                    let segments = random_segments(app, &profiles, 900.0, &mut rng);
                    let mut s = SessionScript::new(app, segments, 1000 * (a as u64 + 1) + i as u64, session_user(i));
                    s.start += i as f64 * 3.0;
                    s
                })
                .collect();
            let c = corpus(&scripts, None);
            let cfg = EngineConfig { collect_intervals: true, ..Default::default() };
            let out = plain_engine(cfg).run(source(&c.packets)).expect("replay");
            let labeled = label_intervals(&out.intervals, &c.truth, INTERVAL).expect("labels");
            sessions.insert(app.to_string(), labeled);
        }
        Lab { sessions }
    })
}

fn labeled_sessions(app: &str) -> Vec<LabeledSession> {
    lab().sessions[app].iter().map(|s| s.iter().map(|r| (r.attrs, r.label)).collect()).collect()
}

/// Stateless and stateful models trained on every labeled session of `app`.
fn app_models(app: &str) -> Result<AppModels, String> {
    let mut rows = Vec::new();
    for s in &lab().sessions[app] {
        for (i, r) in s.iter().enumerate() {
            let past = s[i.saturating_sub(PAST)..i].iter().map(|p| p.label).collect();
            rows.push(IntervalSample { attrs: r.attrs, past, label: r.label });
        }
    }
    let labels: Vec<StateLabel> = rows.iter().map(|r| r.label).collect();
    let space = label_space_of(&labels);
    let hyper = Hyperparams::default();
    let mut sl = train_forest(&stateless_dataset(&rows), &space, FeatureSpec::Stateless, hyper, 1).map_err(|e| e.to_string())?;
    let mut sf = train_forest(&stateful_dataset(&rows, &space, PAST), &space, FeatureSpec::Stateful { past: PAST }, hyper, 2)
        .map_err(|e| e.to_string())?;
    sl.app = Some(app.to_string());
    sf.app = Some(app.to_string());
    Ok(AppModels { stateless: sl, stateful: Some(sf) })
}

fn stateful_vs_stateless() -> Outcome {
    let hyper = Hyperparams::default();
    let cfg = CvConfig { k: 10, stateless: hyper, stateful: hyper, past_states: PAST, threshold: 0.85, seed: 1 };
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for app in APPS {
        let sessions = labeled_sessions(app);
        let labels: Vec<StateLabel> = sessions.iter().flatten().map(|(_, l)| *l).collect();
        let space = label_space_of(&labels);
        let r = cross_validate_sessions(&sessions, &space, &cfg).map_err(|e| e.to_string())?;
        let mut parts = Vec::new();
        for label in &space {
            let (sf, sl) = (r.stateful.score(*label), r.stateless.score(*label));
            if matches!(label, StateLabel::MH | StateLabel::SPE | StateLabel::CC) {
                parts.push(format!("{label} {:.1}>={:.1}", 100.0 * sf.tp, 100.0 * sl.tp));
                if sf.tp < sl.tp {
                    failures.push(format!("{app} {label}: stateful TP {:.3} < stateless {:.3}", sf.tp, sl.tp));
                }
            }
            if sf.tp < 0.90 || sf.fp > 0.05 {
                failures.push(format!("{app} {label}: {}", sf.tp_fp()));
            }
        }
        let min_tp = space.iter().map(|l| r.stateful.score(*l).tp).fold(1.0, f64::min);
        let max_fp = space.iter().map(|l| r.stateful.score(*l).fp).fold(0.0, f64::max);
        lines.push(format!("{app} [{}] min TP {:.1}% max FP {:.1}%", parts.join(" "), 100.0 * min_tp, 100.0 * max_fp));
    }
    ensure!(failures.is_empty(), "{}", failures.join("; "));
    Ok(lines.join("; "))
}

fn classifier_for(app: &str, threshold: f64) -> Result<StateClassifier, String> {
    Ok(StateClassifier::new(PAST, threshold).with_app(app, app_models(app)?))
}

fn fallback_logic() -> Outcome {
    let app = "Multiverse";
    let profiles = Profiles::default();
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let scripts: Vec<SessionScript> = (0..6)
        .map(|i| SessionScript::new(app, random_segments(app, &profiles, 300.0, &mut rng), 7100 + i, session_user(i as usize)))
        .collect();
    let c = corpus(&scripts, None);
    let mut details = Vec::new();
    for threshold in [0.0, 1.5] {
        let classifier: Arc<dyn IntervalClassifier> = Arc::new(classifier_for(app, threshold)?);
        let cfg = EngineConfig { collect_intervals: true, threshold, ..Default::default() };
        let engine = Engine::new(cfg, builtin_signature_set(), classifier).map_err(|e| e.to_string())?;
        let out: RunOutput = engine.run(source(&c.packets)).map_err(|e| e.to_string())?;
        let m = &out.metrics;
        let young = out.intervals.iter().filter(|r| (r.index as usize) < PAST).count() as u64;
        ensure!(m.intervals_classified == out.intervals.len() as u64 && young > 0, "interval bookkeeping");
        ensure!(
            out.intervals.iter().filter(|r| (r.index as usize) < PAST - 1).all(|r| r.stateless),
            "T={threshold}: an interval among the first N-1 used the stateful model"
        );
        if threshold == 0.0 {
            ensure!(m.fallbacks == 0, "T=0: {} fallbacks with a warm ring", m.fallbacks);
            ensure!(m.stateless_decisions == young, "T=0: {} stateless decisions, {young} young intervals", m.stateless_decisions);
        } else {
            ensure!(
                m.stateless_decisions == m.intervals_classified,
                "T>1: {} stateless of {} intervals",
                m.stateless_decisions,
                m.intervals_classified
            );
            ensure!(m.fallbacks == m.intervals_classified - young, "T>1: {} warm fallbacks", m.fallbacks);
        }
        details.push(format!(
            "T={threshold}: {} stateless of {} ({} warm fallbacks)",
            m.stateless_decisions, m.intervals_classified, m.fallbacks
        ));
    }
    Ok(details.join("; "))
}

fn throughput() -> Outcome {
    let mut classifier = StateClassifier::new(PAST, 0.85);
    for app in APPS {
        classifier = classifier.with_app(app, app_models(app)?);
    }
    let engine = Engine::new(EngineConfig::default(), builtin_signature_set(), Arc::new(classifier)).map_err(|e| e.to_string())?;
    let r = bench(&engine, &BenchConfig::default()).map_err(|e| e.to_string())?;
    ensure!(r.classification.mean_ms > 0.0, "classification stage not exercised");
    ensure!(r.sessions_per_core >= 250.0, "{:.0} sessions per core", r.sessions_per_core);
    Ok(format!(
        "{:.0} sessions per core; per session per cycle: detection {:.3} ms, statistics {:.3} ms, classification {:.3} ms",
        r.sessions_per_core, r.detection.mean_ms, r.statistics.mean_ms, r.classification.mean_ms
    ))
}

// ------------------------------------------------- 9: determinism

fn vrscope(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_vrscope")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("vrscope {}: {}", args[0], String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let p = |name: &str| d.join(name).to_string_lossy().into_owned();
    let scripts = random_scripts(1, 200.0, 30.0, 91, 0);
    std::fs::write(d.join("scripts.json"), serde_json::to_string(&scripts).unwrap()).map_err(|e| e.to_string())?;
    for run in ["a", "b"] {
        vrscope(&[
            "synth", "--script", &p("scripts.json"), "--seed", "9", "--background", "2000",
            "--out", &p(&format!("{run}.pcap")), "--sidecar", &p(&format!("{run}.json")),
        ])?;
    }
    ensure!(read(&d.join("a.pcap"))? == read(&d.join("b.pcap"))?, "synth pcaps differ");
    ensure!(read(&d.join("a.json"))? == read(&d.join("b.json"))?, "sidecars differ");
    for (run, shards) in [("r1", "1"), ("r2", "1"), ("r3", "4")] {
        vrscope(&["analyze", "--in", &p("a.pcap"), "--out", &p(&format!("{run}.jsonl")), "--shards", shards])?;
    }
    let first = read(&d.join("r1.jsonl"))?;
    ensure!(first == read(&d.join("r2.jsonl"))?, "analyze outputs differ between runs");
    ensure!(first == read(&d.join("r3.jsonl"))?, "analyze output depends on the shard count");
    let sessions = first.split(|b| *b == b'\n').filter(|l| l.starts_with(b"{\"kind\":\"session\"")).count();
    ensure!(sessions == 4, "{sessions} sessions in the report");
    Ok(format!("pcap of {} bytes and reports of {} bytes reproduced exactly", read(&d.join("a.pcap"))?.len(), first.len()))
}

// ------------------------------------------------- 10: latency

fn latency_buckets() -> Outcome {
    let injected = [5.0, 15.0, 35.0, 80.0];
    let expected = [LatencyBucket::Under10, LatencyBucket::From10To20, LatencyBucket::From20To50, LatencyBucket::Over50];
    let profiles = Profiles::default();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let scripts: Vec<SessionScript> = APPS
        .iter()
        .zip(injected)
        .enumerate()
        .map(|(i, (app, rtt))| {
            let mut s = SessionScript::new(app, random_segments(app, &profiles, 120.0, &mut rng), 200 + i as u64, session_user(i));
            s.primary_rtt_ms = rtt;
            s.udp_rtt_ms = rtt;
            s
        })
        .collect();
    let c = corpus(&scripts, None);
    let out = plain_engine(EngineConfig::default()).run(source(&c.packets)).map_err(|e| e.to_string())?;
    ensure!(out.sessions.len() == 4, "{} sessions", out.sessions.len());
    let mut worst: f64 = 0.0;
    for (app, (rtt, bucket)) in APPS.iter().zip(injected.iter().zip(expected)) {
        let r = out.sessions.iter().find(|r| r.app == *app).ok_or(format!("no {app} session"))?;
        let measured: Vec<f64> = r.flows.iter().filter_map(|f| f.rtt_ms).collect();
        ensure!(!measured.is_empty(), "{app}: no RTT estimates");
        for ms in measured {
            ensure!((ms - rtt).abs() <= 1.0, "{app}: estimate {ms} for injected {rtt}");
            ensure!(latency_bucket(ms) == bucket, "{app}: {ms} ms in {:?}", latency_bucket(ms));
            worst = worst.max((ms - rtt).abs());
        }
    }
    let table = report_latency_by_as(&out.sessions, &AsMap::from_entries(server_as_map(&builtin_signature_set())));
    for (app, bucket) in APPS.iter().zip(expected) {
        let row = table.row(&format!("{}-primary", app.replace(' ', ""))).ok_or(format!("no row for {app}"))?;
        ensure!(
            row.counts[bucket as usize] == row.measured() && row.measured() > 0,
            "{app} row {:?}",
            row.counts
        );
    }
    Ok(format!(
        "{} measured flows, each in its bucket ({}), max error {worst:.3} ms",
        table.rows.iter().map(|r| r.measured()).sum::<u64>(),
        expected.iter().map(|b| b.label()).collect::<Vec<_>>().join(", ")
    ))
}

