use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vrscope::capture::{CaptureConfig, CaptureError, FrameSource, PacedSource, PcapReader, open_capture};
use vrscope::classifier::{
    default_grid, label_space_of, read_interval_csv, stateful_dataset, stateless_dataset, sweep_hyperparams,
    train_forest, ClassifierError, FeatureSpec, Hyperparams,
};
use vrscope::pipeline::{
    bench as run_bench, evaluate as score, label_intervals, read_reports, report_latency_by_as, write_interval_csvs,
    write_reports, AsMap, BenchConfig, Engine, EngineConfig, PipelineError, ReportLine,
};
use vrscope::signatures::{
    builtin_signature_set, load_model, save_model, train_primary_signatures, train_udp_signatures, LabeledCapture,
    SignatureError, SignatureSet, UdpTrainingConfig, DEFAULT_UDP_PORTS,
};
use vrscope::synth::{
    emit_pcap, generate_corpus, random_segments, server_as_map, session_user, BackgroundConfig, Profiles,
    SessionScript, SynthConfig, SynthError, TraceTruth,
};

use super::{
    AnalyzeArgs, BenchArgs, EngineArgs, EvaluateArgs, LiveArgs, Mode, ReportArgs, SynthArgs, TrainClassifierArgs,
    TrainSignaturesArgs,
};

/// A bad flag or configuration file.
#[derive(Debug)]
pub struct ConfigError(String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "configuration: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// A model file that is missing or unusable.
#[derive(Debug)]
pub struct ModelError(String);

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "model: {}", self.0)
    }
}

impl std::error::Error for ModelError {}

/// The error and its causes on one line, skipping causes whose text the
/// previous message already contains.
pub fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut prev = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !prev.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
        prev = text;
    }
    out
}

fn synth_code(e: &SynthError) -> u8 {
    match e {
        SynthError::Io(_) | SynthError::BadTruth(_) => 1,
        _ => 2,
    }
}

/// 2 for configuration errors, 3 for model errors, 1 for anything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(p) = cause.downcast_ref::<PipelineError>() {
            return match p {
                _ if p.is_model_error() => 3,
                PipelineError::Config(_) | PipelineError::BadAsMap(_) => 2,
                PipelineError::Capture(CaptureError::NoLocalPrefix) => 2,
                PipelineError::Synth(s) => synth_code(s),
                _ => 1,
            };
        }
        if cause.is::<SignatureError>() || cause.is::<ClassifierError>() || cause.is::<ModelError>() {
            return 3;
        }
        if let Some(s) = cause.downcast_ref::<SynthError>() {
            return synth_code(s);
        }
        if cause.is::<ConfigError>() || matches!(cause.downcast_ref::<CaptureError>(), Some(CaptureError::NoLocalPrefix)) {
            return 2;
        }
    }
    1
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

pub fn train_signatures(a: TrainSignaturesArgs) -> Result<()> {
    let cfg = CaptureConfig::new(a.local_prefixes)?;
    let mut captures = Vec::with_capacity(a.inputs.len());
    for p in &a.inputs {
        let packets = open_capture(p, &cfg).with_context(|| format!("reading {}", p.display()))?.collect();
        captures.push(LabeledCapture { metaverse: a.app.clone(), packets });
    }
    let primary = train_primary_signatures(&captures, &a.domain)?;
    let ports = if a.udp_ports.is_empty() { DEFAULT_UDP_PORTS.to_vec() } else { a.udp_ports };
    let mut udp = train_udp_signatures(&captures, &UdpTrainingConfig { ports, fixed_len: a.udp_len })?;
    let entry = primary.into_metaverse(&a.app, udp.remove(&a.app).unwrap_or_default());
    eprintln!(
        "{}: {} primary and {} UDP signatures, initial prefixes {:?}",
        entry.name,
        entry.primaries.len(),
        entry.udp.len(),
        entry.initial_hs_prefixes
    );
    let mut set = match &a.base {
        Some(p) => load_model(p)?,
        None => SignatureSet::default(),
    };
    set.upsert(entry);
    save_model(&set, &a.out)?;
    Ok(())
}

pub fn train_classifier(a: TrainClassifierArgs) -> Result<()> {
    let (rows, csv_past) = read_interval_csv(open(&a.input)?)?;
    let labels: Vec<_> = rows.iter().map(|r| r.label).collect();
    let space = label_space_of(&labels);
    let (data, spec) = match a.mode {
        Mode::Stateless => (stateless_dataset(&rows), FeatureSpec::Stateless),
        Mode::Stateful => {
            let n = a.past_states.unwrap_or(csv_past);
            if n == 0 {
                return Err(config_error("stateful training needs past-state columns or --past-states"));
            }
            (stateful_dataset(&rows, &space, n), FeatureSpec::Stateful { past: n })
        }
    };
    let mut hyper = Hyperparams::default();
    if a.sweep {
        let report = sweep_hyperparams(&data, &space, spec, &default_grid(), a.folds, a.seed)?;
        print!("{}", report.table());
        hyper = report.best;
    }
    hyper.n_trees = a.trees.unwrap_or(hyper.n_trees);
    hyper.max_depth = a.depth.unwrap_or(hyper.max_depth);
    hyper.max_features = a.max_features.unwrap_or(hyper.max_features);
    let mut model = train_forest(&data, &space, spec, hyper, a.seed)?;
    model.app = Some(a.app);
    model.save(&a.out)?;
    eprintln!(
        "trained {} trees (depth {}, {} features) on {} rows over {:?}",
        hyper.n_trees,
        hyper.max_depth,
        hyper.max_features,
        data.len(),
        space
    );
    Ok(())
}

fn read_scripts(path: &Path) -> Result<Vec<SessionScript>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| config_error(format!("script {}: {e}", path.display())))?;
    let scripts = if value.is_array() { serde_json::from_value(value) } else { serde_json::from_value(value).map(|s| vec![s]) };
    scripts.map_err(|e| config_error(format!("script {}: {e}", path.display())))
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let sigs = match &a.model {
        Some(p) => load_model(p)?,
        None => builtin_signature_set(),
    };
    let profiles = match &a.profiles {
        Some(p) => Profiles::load(p)?,
        None => Profiles::default(),
    };
    let scripts = match &a.script {
        Some(p) => {
            let mut scripts = read_scripts(p)?;
            for (i, s) in scripts.iter_mut().enumerate() {
                if s.metaverse.is_empty() {
                    s.metaverse = a.app.clone().ok_or_else(|| config_error("script names no application; pass --app"))?;
                }
                if let Some(seed) = a.seed {
                    s.seed = seed.wrapping_add(i as u64);
                }
            }
            scripts
        }
        None => {
            let app = a.app.as_deref().ok_or_else(|| config_error("pass --app or --script"))?;
            let seed = a.seed.unwrap_or(0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..a.sessions)
                .map(|i| {
                    let segments = random_segments(app, &profiles, a.secs, &mut rng);
                    SessionScript::new(app, segments, seed.wrapping_add(i as u64), session_user(i))
                })
                .collect()
        }
    };
    let background = (a.background > 0 || a.planted > 0).then(|| BackgroundConfig {
        n_flows: a.background,
        span_secs: scripts.iter().map(|s| s.total_secs()).fold(60.0, f64::max),
        exclude_collisions: a.planted == 0,
        planted: a.planted,
        ..Default::default()
    });
    let corpus = generate_corpus(
        &scripts,
        &sigs,
        &profiles,
        &SynthConfig { interval_len: a.interval_len },
        background.as_ref().map(|b| (b, a.seed.unwrap_or(0))),
    )?;
    emit_pcap(&corpus.packets, &a.out)?;
    corpus.truth.save(&a.sidecar)?;
    if let Some(p) = &a.as_map {
        std::fs::write(p, AsMap::from_entries(server_as_map(&sigs)).to_csv())
            .with_context(|| format!("writing {}", p.display()))?;
    }
    eprintln!("{} packets, {} sessions", corpus.packets.len(), corpus.truth.sessions.len());
    Ok(())
}

fn engine_config(a: &EngineArgs) -> Result<EngineConfig> {
    let mut c = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            EngineConfig::from_json(&text)?
        }
        None => EngineConfig::default(),
    };
    if a.model.is_some() {
        c.signatures = a.model.clone();
    }
    if !a.stateless.is_empty() {
        c.stateless_models = a.stateless.clone();
    }
    if !a.stateful.is_empty() {
        c.stateful_models = a.stateful.clone();
    }
    if !a.local_prefixes.is_empty() {
        c.local_prefixes = a.local_prefixes.clone();
    }
    if a.as_map.is_some() {
        c.as_map = a.as_map.clone();
    }
    c.threshold = a.threshold.unwrap_or(c.threshold);
    c.past_states = a.past_states.unwrap_or(c.past_states);
    c.interval_len = a.interval_len.unwrap_or(c.interval_len);
    c.shards = a.shards.unwrap_or(c.shards);
    c.udp_stage &= !a.no_udp;
    for p in c.signatures.iter().chain(&c.stateless_models).chain(&c.stateful_models) {
        if !p.is_file() {
            return Err(ModelError(format!("{} not found", p.display())).into());
        }
    }
    Ok(c)
}

fn pcap_source(path: &Path) -> Result<PcapReader<BufReader<File>>> {
    Ok(PcapReader::new(open(path)?).with_context(|| format!("reading {}", path.display()))?)
}

pub fn analyze(a: AnalyzeArgs) -> Result<()> {
    let mut config = engine_config(&a.engine)?;
    config.collect_intervals = a.intervals_dir.is_some();
    let engine = Engine::load(config)?;
    let out = engine.run(pcap_source(&a.input)?)?;
    write_reports(create(&a.out)?, &out.detections, &out.sessions).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(p) = &a.metrics {
        let mut w = create(p)?;
        serde_json::to_writer_pretty(&mut w, &out.metrics)?;
        writeln!(w)?;
    }
    if let (Some(dir), Some(truth)) = (&a.intervals_dir, &a.truth) {
        let truth = TraceTruth::load(truth)?;
        let interval_len = engine.config().interval_len;
        let labeled = label_intervals(&out.intervals, &truth, interval_len)?;
        for (app, path) in write_interval_csvs(dir, &labeled, engine.config().past_states)? {
            eprintln!("{app}: {}", path.display());
        }
    }
    let m = &out.metrics;
    eprintln!(
        "{} frames, {} packets processed, {} flows matched, {} sessions, {} intervals ({} stateless)",
        m.frames, m.packets_processed, m.flows_matched, m.sessions_closed, m.intervals_classified, m.stateless_decisions
    );
    Ok(())
}

fn live_run<S: FrameSource>(engine: &Engine, source: S, out: Box<dyn Write + Send>) -> Result<()> {
    let mut out = out;
    let mut failed: Option<std::io::Error> = None;
    let run = engine.run_streaming(source, |r| {
        if failed.is_some() {
            return;
        }
        let line = serde_json::to_string(&ReportLine::Session(r.clone())).expect("report serializes");
        if let Err(e) = writeln!(out, "{line}").and_then(|_| out.flush()) {
            failed = Some(e);
        }
    })?;
    if let Some(e) = failed {
        return Err(e).context("writing reports");
    }
    for d in &run.detections {
        writeln!(out, "{}", serde_json::to_string(&ReportLine::Flow(d.clone()))?)?;
    }
    out.flush()?;
    let m = &run.metrics;
    eprintln!(
        "{} packets processed, {} dropped, {} sessions, {} intervals",
        m.packets_processed, m.dropped_packets, m.sessions_closed, m.intervals_classified
    );
    Ok(())
}

pub fn live(a: LiveArgs) -> Result<()> {
    if !(a.speedup > 0.0) {
        return Err(config_error(format!("speedup {} must be positive", a.speedup)));
    }
    let engine = Engine::load(engine_config(&a.engine)?)?;
    let out: Box<dyn Write + Send> = match &a.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout()),
    };
    if a.iface == "-" {
        let reader = PcapReader::new(BufReader::new(std::io::stdin())).context("reading standard input")?;
        live_run(&engine, PacedSource::new(reader, a.speedup), out)
    } else {
        live_run(&engine, PacedSource::new(pcap_source(Path::new(&a.iface))?, a.speedup), out)
    }
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let (detections, sessions) = read_reports(open(&a.reports)?)?;
    let truth = TraceTruth::load(&a.truth)?;
    let ev = score(&detections, &sessions, &truth, a.interval_len)?;
    print!("{}", ev.table());
    Ok(())
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let engine = Engine::load(engine_config(&a.engine)?)?;
    let cfg = BenchConfig { n_sessions: a.sessions, secs: a.secs, seed: a.seed, ..Default::default() };
    let report = run_bench(&engine, &cfg)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.table());
    }
    Ok(())
}

pub fn report(a: ReportArgs) -> Result<()> {
    let map = AsMap::load(&a.as_map)?;
    let (_, sessions) = read_reports(open(&a.reports)?)?;
    let table = report_latency_by_as(&sessions, &map);
    if a.csv {
        print!("{}", table.to_csv());
    } else {
        print!("{}", table.table());
    }
    Ok(())
}
