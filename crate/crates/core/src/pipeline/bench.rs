use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Engine, PipelineError, TickClock, Worker, CLASSIFICATION, DETECTION, STATISTICS};
use crate::capture::{LinkType, PacketParser, PacketRecord};
use crate::session::population_std;
use crate::synth::{
    generate_corpus, random_segments, session_user, Profiles, SessionScript, SynthConfig, DEFAULT_TRACE_START,
};
use crate::time::secs_to_nanos;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub n_sessions: usize,
    /// Minimum scripted length of each session.
    pub secs: f64,
    /// Session starts are spread over this many seconds.
    pub stagger_secs: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { n_sessions: 250, secs: 120.0, stagger_secs: 10.0, seed: 1 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageStat {
    pub mean_ms: f64,
    pub sd_ms: f64,
}

impl StageStat {
    fn of(samples: &[f64]) -> StageStat {
        if samples.is_empty() {
            return StageStat::default();
        }
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        StageStat { mean_ms: mean, sd_ms: population_std(samples) }
    }
}

/// Milliseconds per session per inference cycle, on one worker.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub sessions: usize,
    pub cycles: usize,
    pub packets: u64,
    pub interval_len: f64,
    /// Frame parsing, outside the three stages.
    pub capture: StageStat,
    pub detection: StageStat,
    pub statistics: StageStat,
    pub classification: StageStat,
    pub total: StageStat,
    /// Concurrent sessions one worker keeps up with in real time.
    pub sessions_per_core: f64,
}

impl BenchReport {
    pub fn table(&self) -> String {
        let row = |name: &str, s: &StageStat| format!("{name:<16}{:>10.4} ms  (sd {:.4})\n", s.mean_ms, s.sd_ms);
        let mut s = format!(
            "{} sessions, {} cycles of {} s, {} packets\n",
            self.sessions, self.cycles, self.interval_len, self.packets
        );
        s.push_str(&row("capture", &self.capture));
        s.push_str(&row("detection", &self.detection));
        s.push_str(&row("statistics", &self.statistics));
        s.push_str(&row("classification", &self.classification));
        s.push_str(&row("total", &self.total));
        s.push_str(&format!("sessions per core: {:.0}\n", self.sessions_per_core));
        s
    }
}

/// Runs `n_sessions` concurrent synthetic sessions through one worker and
/// times each stage per session per interval.
pub fn bench(engine: &Engine, cfg: &BenchConfig) -> Result<BenchReport, PipelineError> {
    let interval_len = engine.config().interval_len;
    let sigs = engine.signatures();
    let apps: Vec<&str> = sigs.metaverses.iter().map(|m| m.name.as_str()).collect();
    if apps.is_empty() || cfg.n_sessions == 0 {
        return Err(PipelineError::Config("bench needs at least one session and one application".into()));
    }
    let profiles = Profiles::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scripts: Vec<SessionScript> = (0..cfg.n_sessions)
        .map(|i| {
            let app = apps[i % apps.len()];
            let segments = random_segments(app, &profiles, cfg.secs, &mut rng);
            let mut s = SessionScript::new(app, segments, cfg.seed.wrapping_add(i as u64), session_user(i));
            s.start = DEFAULT_TRACE_START + rng.random_range(0.0..cfg.stagger_secs.max(1e-3));
            s
        })
        .collect();
    let corpus = generate_corpus(&scripts, sigs, &profiles, &SynthConfig { interval_len }, None)?;
    let frames: Vec<_> = corpus.packets.iter().map(|p| p.frame()).collect();
    drop(corpus);

    let cycle_ns = secs_to_nanos(interval_len);
    let t0 = frames.first().map(|f| f.ts.0).unwrap_or(0);
    let cycle_of = |ts: u64| (ts - t0) / cycle_ns;

    // parse outside the stages, timed per cycle
    let mut parser = PacketParser::new(LinkType::Ethernet, engine.config().local_prefixes.clone());
    let mut records: Vec<(PacketRecord, u64)> = Vec::with_capacity(frames.len());
    let mut parse_ns: Vec<u64> = Vec::new();
    let mut i = 0;
    while i < frames.len() {
        let c = cycle_of(frames[i].ts.0);
        let t = Instant::now();
        while i < frames.len() && cycle_of(frames[i].ts.0) == c {
            if let Some(r) = parser.parse(&frames[i]) {
                records.push((r, i as u64));
            }
            i += 1;
        }
        parse_ns.resize(c as usize + 1, 0);
        parse_ns[c as usize] += t.elapsed().as_nanos() as u64;
    }

    let mut w = Worker::new(engine, None, true);
    let mut ticks = TickClock::new(secs_to_nanos(engine.config().tick_secs).max(1));
    let mut samples: [Vec<f64>; 5] = Default::default();
    let mut last = [0u64; 3];
    let mut cur = 0u64;
    let close_cycle = |w: &Worker, c: u64, samples: &mut [Vec<f64>; 5], last: &mut [u64; 3]| {
        let now = w.stage_nanos();
        let active = w.active_sessions();
        if active > 0 {
            let per = |ns: u64| ns as f64 / 1e6 / active as f64;
            let cap = per(parse_ns.get(c as usize).copied().unwrap_or(0));
            let d = per(now[DETECTION] - last[DETECTION]);
            let s = per(now[STATISTICS] - last[STATISTICS]);
            let k = per(now[CLASSIFICATION] - last[CLASSIFICATION]);
            for (v, x) in samples.iter_mut().zip([cap, d, s, k, cap + d + s + k]) {
                v.push(x);
            }
        }
        *last = now;
    };
    for (rec, ord) in &records {
        let c = cycle_of(rec.ts.0);
        if c != cur {
            close_cycle(&w, cur, &mut samples, &mut last);
            cur = c;
        }
        ticks.advance(rec.ts, |t| w.tick(t));
        w.process(rec, *ord);
    }
    close_cycle(&w, cur, &mut samples, &mut last);
    let packets = records.len() as u64;
    drop(w.finish());

    let [capture, detection, statistics, classification, total] = samples.map(|s| StageStat::of(&s));
    Ok(BenchReport {
        sessions: cfg.n_sessions,
        cycles: cur as usize + 1,
        packets,
        interval_len,
        capture,
        detection,
        statistics,
        classification,
        total,
        sessions_per_core: if total.mean_ms > 0.0 { interval_len * 1000.0 / total.mean_ms } else { f64::INFINITY },
    })
}
