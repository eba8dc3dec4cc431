use std::net::{IpAddr, Ipv4Addr};
use std::sync::Arc;

use ipnet::Ipv4Net;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::packet::{number_tcp, Content, SynthPacket};
use super::profile::{poisson, Profiles, StateProfile, TimeCriticalProfile};
use super::truth::{FlowTruth, GroundTruthSidecar, Segment};
use super::{SynthConfig, SynthError};
use crate::capture::tcp_flags::{ACK, PSH, SYN};
use crate::flowtable::{DomainType, FlowKey};
use crate::session::{allowed_states, StateLabel};
use crate::signatures::{MetaverseSignatures, SignatureSet};
use crate::time::{secs_to_nanos, Timestamp};
use crate::capture::Transport;

pub const DEFAULT_TRACE_START: f64 = 1_700_000_000.0;
const DEFAULT_RTT_MS: f64 = 20.0;
/// Client-side turnaround between consecutive packets.
const CLIENT_DELAY_NS: u64 = 200_000;
const UDP_SIG_GAP_NS: u64 = 33_000_000;
const SECOND_NS: u64 = 1_000_000_000;

fn default_start() -> f64 {
    DEFAULT_TRACE_START
}

fn default_rtt() -> f64 {
    DEFAULT_RTT_MS
}

fn default_user() -> Ipv4Addr {
    Ipv4Addr::new(10, 0, 0, 2)
}

/// What one simulated user does in one application.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionScript {
    #[serde(default)]
    pub metaverse: String,
    pub segments: Vec<Segment>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_user")]
    pub user_ip: Ipv4Addr,
    /// Trace time of the first packet, in seconds since the epoch.
    #[serde(default = "default_start")]
    pub start: f64,
    /// Round trip to the primary servers; every TCP flow uses it.
    #[serde(default = "default_rtt")]
    pub primary_rtt_ms: f64,
    #[serde(default = "default_rtt")]
    pub udp_rtt_ms: f64,
}

impl SessionScript {
    pub fn new(metaverse: &str, segments: Vec<Segment>, seed: u64, user_ip: Ipv4Addr) -> Self {
        SessionScript {
            metaverse: metaverse.to_string(),
            segments,
            seed,
            user_ip,
            start: DEFAULT_TRACE_START,
            primary_rtt_ms: DEFAULT_RTT_MS,
            udp_rtt_ms: DEFAULT_RTT_MS,
        }
    }

    pub fn total_secs(&self) -> f64 {
        self.segments.iter().map(|s| s.secs).sum()
    }

    pub fn validate(&self, app: &str) -> Result<(), SynthError> {
        let allowed = allowed_states(app);
        for s in &self.segments {
            if !allowed.contains(&s.state) {
                return Err(SynthError::UnknownStateForApp { app: app.to_string(), state: s.state });
            }
            if !s.secs.is_finite() || s.secs < 0.0 {
                return Err(SynthError::InvalidScript(format!("segment {} has duration {}", s.state, s.secs)));
            }
        }
        if let Some(first) = self.segments.first() {
            if first.state != StateLabel::HS {
                return Err(SynthError::InvalidScript(format!("script starts in {}, not HS", first.state)));
            }
        }
        for (name, v) in [("start", self.start), ("primary_rtt_ms", self.primary_rtt_ms), ("udp_rtt_ms", self.udp_rtt_ms)] {
            if !v.is_finite() || v < 0.0 {
                return Err(SynthError::InvalidScript(format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

/// Random walk over an application's states starting in HS, at least
/// `min_secs` long, without back-to-back repeats.
pub fn random_segments<R: Rng + ?Sized>(app: &str, profiles: &Profiles, min_secs: f64, rng: &mut R) -> Vec<Segment> {
    let states = allowed_states(app);
    let mut out = Vec::new();
    let mut total = 0.0;
    let mut cur = StateLabel::HS;
    loop {
        let secs = profiles.states.get(&cur).map(|p| p.duration.sample(rng)).unwrap_or(60.0).round().max(10.0);
        out.push(Segment { state: cur, secs });
        total += secs;
        if total >= min_secs {
            return out;
        }
        let next: Vec<StateLabel> = states.iter().copied().filter(|s| *s != cur).collect();
        match next.choose(rng) {
            Some(s) => cur = *s,
            None => continue,
        }
    }
}

/// Address block of an application's primary servers.
pub fn primary_server_net(app_index: usize) -> Ipv4Net {
    Ipv4Net::new(Ipv4Addr::new(52, 16 + app_index as u8, 0, 0), 16).expect("valid prefix")
}

pub fn time_critical_server_net(app_index: usize) -> Ipv4Net {
    Ipv4Net::new(Ipv4Addr::new(172, 64 + app_index as u8, 0, 0), 16).expect("valid prefix")
}

fn host_in(net: Ipv4Net, host: u32) -> Ipv4Addr {
    let span = (1u32 << (32 - net.prefix_len())) - 2;
    Ipv4Addr::from(u32::from(net.network()) + 1 + host % span)
}

struct TcpFlow {
    client: (Ipv4Addr, u16),
    server: (Ipv4Addr, u16),
    prefix: String,
    packets: Vec<SynthPacket>,
    matched_at: Timestamp,
    /// When content can start flowing.
    ready: Timestamp,
}

struct Gen<'a> {
    rng: ChaCha8Rng,
    app: &'a MetaverseSignatures,
    app_index: usize,
    profiles: &'a Profiles,
    user: Ipv4Addr,
    next_port: u16,
    tcp_rtt: u64,
    udp_rtt: u64,
    packets: Vec<SynthPacket>,
    flows: Vec<FlowTruth>,
}

fn at(t: Timestamp, secs: f64) -> Timestamp {
    t.add_nanos(secs_to_nanos(secs))
}

impl<'a> Gen<'a> {
    fn port(&mut self) -> u16 {
        let p = self.next_port;
        self.next_port = if p >= 60_999 { 32_768 } else { p + 1 };
        p
    }

    fn between(&mut self, from: Timestamp, to: Timestamp) -> Timestamp {
        if to.0 <= from.0 {
            return from;
        }
        Timestamp(self.rng.random_range(from.0..to.0))
    }

    fn open_tcp(&mut self, start: Timestamp, sig_index: usize) -> TcpFlow {
        let app: &'a MetaverseSignatures = self.app;
        let entry = &app.primaries[sig_index];
        let seq = entry.seq.clone();
        let sni: Arc<str> = if entry.prefix.is_empty() {
            format!("{}.com", app.domain).into()
        } else {
            format!("{}.{}.com", entry.prefix, app.domain).into()
        };
        let host = self.rng.random_range(0..64);
        let client = (self.user, self.port());
        let server = (host_in(primary_server_net(self.app_index), host), 443);
        let (r, d) = (self.tcp_rtt, CLIENT_DELAY_NS);
        let up = |ts, flags, len, c| SynthPacket::tcp(ts, client, server, flags, len, c);
        let down = |ts, flags, len, c| SynthPacket::tcp(ts, server, client, flags, len, c);

        let mut p = Vec::with_capacity(16);
        p.push(up(start, SYN, 0, Content::Opaque));
        let synack = start.add_nanos(r);
        p.push(down(synack, SYN | ACK, 0, Content::Opaque));
        p.push(up(synack.add_nanos(d), ACK, 0, Content::Opaque));
        let hello = synack.add_nanos(2 * d);
        p.push(up(hello, PSH | ACK, seq[0], Content::ClientHello(sni)));
        let server_hello = hello.add_nanos(r);
        let rest = self.rng.random_range(1000..2800);
        p.push(down(server_hello, ACK, 1448, Content::TlsRecord(0x16)));
        p.push(down(server_hello.add_nanos(10_000), PSH | ACK, rest, Content::Opaque));
        let mut matched = hello;
        if seq.len() >= 2 {
            let mut t = server_hello.add_nanos(10_000 + d);
            let middle = &seq[1..seq.len() - 1];
            for (i, &sz) in middle.iter().enumerate() {
                let ct = match i {
                    1 => 0x14,
                    _ => 0x16,
                };
                p.push(up(t, PSH | ACK, sz, Content::TlsRecord(ct)));
                t = t.add_nanos(d);
            }
            if !middle.is_empty() {
                let finished = t.add_nanos(r - d.min(r));
                p.push(down(finished, PSH | ACK, 51, Content::TlsRecord(0x14)));
                t = finished.add_nanos(d);
            }
            p.push(up(t, PSH | ACK, seq[seq.len() - 1], Content::TlsRecord(0x17)));
            matched = t;
        }
        let ready = matched.add_nanos(r);
        let resp = self.rng.random_range(100..600);
        p.push(down(ready, PSH | ACK, resp, Content::TlsRecord(0x17)));
        TcpFlow { client, server, prefix: entry.prefix.clone(), packets: p, matched_at: matched, ready }
    }

    /// `bytes` downstream over `[from, to)`, after one request.
    fn download(&mut self, f: &mut TcpFlow, from: Timestamp, to: Timestamp, bytes: u64) {
        let from = from.max(f.ready);
        let first = from.add_nanos(self.tcp_rtt);
        if bytes == 0 || first >= to {
            return;
        }
        let req = self.profiles.request_size.sample(&mut self.rng).round().max(1.0) as u32;
        f.packets.push(SynthPacket::tcp(from, f.client, f.server, PSH | ACK, req, Content::TlsRecord(0x17)));
        let mss = self.profiles.mss as u64;
        let n = bytes.div_ceil(mss);
        let span = to.0 - first.0;
        for i in 0..n {
            let u: f64 = self.rng.random();
            let ts = Timestamp(first.0 + ((i as f64 + u) / n as f64 * span as f64) as u64).min(Timestamp(to.0 - 1));
            let len = if i + 1 == n { bytes - (n - 1) * mss } else { mss };
            f.packets.push(SynthPacket::tcp(ts, f.server, f.client, ACK, len as u32, Content::Opaque));
            let ack = ts.add_nanos(CLIENT_DELAY_NS);
            if i % 2 == 1 && ack < to {
                f.packets.push(SynthPacket::tcp(ack, f.client, f.server, ACK, 0, Content::Opaque));
            }
        }
    }

    /// `bytes` upstream over `[from, to)`.
    fn upload(&mut self, f: &mut TcpFlow, from: Timestamp, to: Timestamp, bytes: u64) {
        let from = from.max(f.ready);
        if bytes == 0 || from >= to {
            return;
        }
        let mss = self.profiles.mss as u64;
        let n = bytes.div_ceil(mss);
        let span = to.0 - from.0;
        for i in 0..n {
            let u: f64 = self.rng.random();
            let ts = Timestamp(from.0 + ((i as f64 + u) / n as f64 * span as f64) as u64).min(Timestamp(to.0 - 1));
            let len = if i + 1 == n { bytes - (n - 1) * mss } else { mss };
            f.packets.push(SynthPacket::tcp(ts, f.client, f.server, ACK, len as u32, Content::Opaque));
            let ack = ts.add_nanos(self.tcp_rtt);
            if i % 2 == 1 && ack < to {
                f.packets.push(SynthPacket::tcp(ack, f.server, f.client, ACK, 0, Content::Opaque));
            }
        }
    }

    /// Per-second download at a jittered constant rate.
    fn sustained(&mut self, f: &mut TcpFlow, from: Timestamp, to: Timestamp, bps: f64) {
        let mut w = from.max(f.ready);
        while w < to {
            let w_end = w.add_nanos(SECOND_NS).min(to);
            let frac = (w_end.0 - w.0) as f64 / SECOND_NS as f64;
            let bytes = (bps / 8.0 * frac * self.rng.random_range(0.6..1.4)).round() as u64;
            self.download(f, w, w_end, bytes);
            w = w_end;
        }
    }

    fn finish_tcp(&mut self, mut f: TcpFlow) {
        f.packets.sort_by_key(|p| p.ts);
        let isn = (self.rng.random(), self.rng.random());
        number_tcp(&mut f.packets, f.client.0, isn);
        let key = FlowKey {
            src_ip: IpAddr::V4(f.client.0),
            dst_ip: IpAddr::V4(f.server.0),
            src_port: f.client.1,
            dst_port: f.server.1,
            transport: Transport::Tcp,
        };
        self.flows.push(FlowTruth {
            key,
            domain_type: DomainType::Primary,
            prefix: Some(f.prefix),
            rtt_ms: self.tcp_rtt as f64 / 1e6,
            start: f.packets[0].ts.as_secs_f64(),
            end: f.packets[f.packets.len() - 1].ts.as_secs_f64(),
        });
        self.packets.append(&mut f.packets);
    }

    fn udp_flow(&mut self, start: Timestamp, to: Timestamp, tc: &TimeCriticalProfile, crowd: f64) {
        let Some(entry) = self.app.udp.choose(&mut self.rng).cloned() else { return };
        let host = self.rng.random_range(0..16);
        let client = (self.user, self.port());
        let server = (host_in(time_critical_server_net(self.app_index), host), entry.port);
        let mut p = Vec::new();
        for (i, &sz) in entry.seq.iter().enumerate() {
            let t = start.add_nanos(i as u64 * UDP_SIG_GAP_NS);
            p.push(SynthPacket::udp(t, client, server, sz));
            let resp = tc.down_size.sample(&mut self.rng).round().max(1.0) as u32;
            p.push(SynthPacket::udp(t.add_nanos(self.udp_rtt), server, client, resp));
        }
        let mut w = start.add_nanos(entry.seq.len() as u64 * UDP_SIG_GAP_NS);
        let mut walk = crowd;
        let mut idle = false;
        let mut second = 0u64;
        while w < to {
            let w_end = w.add_nanos(SECOND_NS).min(to);
            let frac = (w_end.0 - w.0) as f64 / SECOND_NS as f64;
            if second % 10 == 0 {
                idle = self.rng.random_bool(tc.idle_fraction);
            }
            second += 1;
            let up_rate = if idle { tc.idle_upstream_pps } else { tc.upstream_pps }.sample(&mut self.rng);
            walk = (walk * self.rng.random_range(0.95..1.05)).clamp(0.5 * crowd, 1.5 * crowd);
            let down_rate = tc.downstream_pps.sample(&mut self.rng) * walk;
            for _ in 0..poisson(&mut self.rng, up_rate * frac) {
                let ts = self.between(w, w_end);
                let sz = tc.up_size.sample(&mut self.rng).round().max(1.0) as u32;
                p.push(SynthPacket::udp(ts, client, server, sz));
            }
            for _ in 0..poisson(&mut self.rng, down_rate * frac) {
                let ts = self.between(w, w_end);
                let sz = tc.down_size.sample(&mut self.rng).round().max(1.0) as u32;
                p.push(SynthPacket::udp(ts, server, client, sz));
            }
            w = w_end;
        }
        p.sort_by_key(|x| x.ts);
        let key = FlowKey {
            src_ip: IpAddr::V4(client.0),
            dst_ip: IpAddr::V4(server.0),
            src_port: client.1,
            dst_port: server.1,
            transport: Transport::Udp,
        };
        self.flows.push(FlowTruth {
            key,
            domain_type: DomainType::TimeCritical,
            prefix: None,
            rtt_ms: self.udp_rtt as f64 / 1e6,
            start: p[0].ts.as_secs_f64(),
            end: p[p.len() - 1].ts.as_secs_f64(),
        });
        self.packets.append(&mut p);
    }

    fn any_primary(&mut self) -> usize {
        self.rng.random_range(0..self.app.primaries.len())
    }

    /// Handshake plus settling time; flows that cannot open before the
    /// segment ends are skipped.
    fn fits(&self, start: Timestamp, end: Timestamp) -> bool {
        start.add_nanos(5 * self.tcp_rtt + 10_000_000) < end
    }

    fn segment(&mut self, p: &StateProfile, a: Timestamp, b: Timestamp) {
        let t = &p.primary_tcp;
        let mut sustained = Vec::new();
        for _ in 0..t.sustained_flows.sample_count(&mut self.rng) {
            let start = self.between(a, at(a, 0.5));
            if !self.fits(start, b) {
                continue;
            }
            let idx = self.any_primary();
            let mut f = self.open_tcp(start, idx);
            let bps = t.sustained_down_bps.sample(&mut self.rng);
            self.sustained(&mut f, a, b, bps);
            sustained.push(f);
        }
        if let Some(burst) = &t.entry_burst {
            let until = at(a, burst.secs.sample(&mut self.rng)).min(b);
            for _ in 0..burst.flows.sample_count(&mut self.rng) {
                let start = self.between(a, at(a, 1.0));
                if !self.fits(start, until) {
                    continue;
                }
                let idx = self.any_primary();
                let mut f = self.open_tcp(start, idx);
                let bps = burst.down_bps.sample(&mut self.rng);
                self.sustained(&mut f, a, until, bps);
                self.finish_tcp(f);
            }
        }
        if let Some(spikes) = &t.upload_spikes {
            let mut s = at(a, self.rng.random_range(0.0..1.0) * spikes.period_secs.sample(&mut self.rng));
            while s < b {
                let end = at(s, spikes.secs.sample(&mut self.rng)).min(b);
                let bps = spikes.up_bps.sample(&mut self.rng);
                let secs = end.secs_since(s);
                match sustained.first_mut() {
                    Some(f) => self.upload(f, s, end, (bps / 8.0 * secs) as u64),
                    None if self.fits(s, end) => {
                        let idx = self.any_primary();
                        let mut f = self.open_tcp(s, idx);
                        self.upload(&mut f, s, end, (bps / 8.0 * secs) as u64);
                        self.finish_tcp(f);
                    }
                    None => {}
                }
                s = at(s, spikes.period_secs.sample(&mut self.rng).max(1.0));
            }
        }
        for f in sustained {
            self.finish_tcp(f);
        }
        let mut w = a;
        while w < b {
            let w_end = at(w, 10.0).min(b);
            let frac = w_end.secs_since(w) / 10.0;
            let rate = t.new_flows_per_interval.sample(&mut self.rng);
            for _ in 0..poisson(&mut self.rng, rate * frac) {
                let start = self.between(w, w_end);
                if !self.fits(start, b) {
                    continue;
                }
                let idx = self.any_primary();
                let mut f = self.open_tcp(start, idx);
                let vol = t.flow_volume_bytes.sample(&mut self.rng) as u64;
                let until = at(f.ready, t.flow_duration_secs.sample(&mut self.rng)).min(b);
                let from = f.ready;
                self.download(&mut f, from, until, vol);
                self.finish_tcp(f);
            }
            w = w_end;
        }

        let u = &p.time_critical_udp;
        if u.active {
            let crowd = u.crowd_factor.sample(&mut self.rng);
            for _ in 0..u.flows.sample_count(&mut self.rng).max(1) {
                let start = self.between(at(a, 0.2), at(a, 2.0));
                if start < b {
                    self.udp_flow(start, b, u, crowd);
                }
            }
        }
    }
}

/// State covering most of `[s, e)`; ties go to the earlier segment.
fn majority_state(bounds: &[(Timestamp, Timestamp, StateLabel)], s: Timestamp, e: Timestamp) -> StateLabel {
    let mut best = (0u64, StateLabel::UNKNOWN);
    for &(a, b, state) in bounds {
        let overlap = b.min(e).0.saturating_sub(a.max(s).0);
        if overlap > best.0 {
            best = (overlap, state);
        }
    }
    best.1
}

/// Generates one scripted session: the opening handshakes of every initial
/// prefix, then each segment's primary and time-critical traffic.
pub fn generate_session(
    script: &SessionScript,
    signatures: &SignatureSet,
    profiles: &Profiles,
    cfg: &SynthConfig,
) -> Result<(Vec<SynthPacket>, GroundTruthSidecar), SynthError> {
    let app_index = signatures
        .metaverses
        .iter()
        .position(|m| m.name == script.metaverse)
        .ok_or_else(|| SynthError::UnknownApp(script.metaverse.clone()))?;
    let app = &signatures.metaverses[app_index];
    if app.primaries.is_empty() {
        return Err(SynthError::UnknownApp(script.metaverse.clone()));
    }
    script.validate(&app.name)?;
    for s in &script.segments {
        profiles.get(s.state)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(script.seed);
    let next_port = rng.random_range(32_768..52_000);
    let mut g = Gen {
        rng,
        app,
        app_index,
        profiles,
        user: script.user_ip,
        next_port,
        tcp_rtt: secs_to_nanos(script.primary_rtt_ms / 1e3),
        udp_rtt: secs_to_nanos(script.udp_rtt_ms / 1e3),
        packets: Vec::new(),
        flows: Vec::new(),
    };
    let t0 = Timestamp::from_secs_f64(script.start);
    let end = at(t0, script.total_secs());

    // opening: every initial prefix, in order
    let hs = profiles.states.get(&StateLabel::HS);
    let mut cursor = t0;
    let mut session_start = t0;
    for prefix in &app.initial_hs_prefixes {
        let candidates: Vec<usize> = (0..app.primaries.len()).filter(|&i| &app.primaries[i].prefix == prefix).collect();
        let n = profiles.opening_flows_per_prefix.sample_count(&mut g.rng).max(1);
        let mut first_match: Option<Timestamp> = None;
        for _ in 0..n {
            let Some(&idx) = candidates.choose(&mut g.rng) else { break };
            let mut f = g.open_tcp(cursor, idx);
            first_match = Some(first_match.map_or(f.matched_at, |m| m.min(f.matched_at)));
            if let Some(hs) = hs {
                let vol = hs.primary_tcp.flow_volume_bytes.sample(&mut g.rng) as u64;
                let until = at(f.ready, hs.primary_tcp.flow_duration_secs.sample(&mut g.rng)).min(end);
                let from = f.ready;
                g.download(&mut f, from, until, vol);
            }
            g.finish_tcp(f);
            cursor = at(cursor, g.rng.random_range(0.05..0.3));
        }
        if let Some(m) = first_match {
            session_start = session_start.max(m);
        }
    }

    let mut bounds = Vec::new();
    let mut a = t0;
    for seg in &script.segments {
        let b = at(a, seg.secs);
        bounds.push((a, b, seg.state));
        let p = profiles.get(seg.state)?;
        g.segment(p, a, b);
        a = b;
    }

    let interval_ns = secs_to_nanos(cfg.interval_len).max(1);
    let mut intervals = Vec::new();
    let mut s = session_start;
    while s < end {
        let e = s.add_nanos(interval_ns).min(end);
        intervals.push(majority_state(&bounds, s, e));
        s = s.add_nanos(interval_ns);
    }

    let mut packets = g.packets;
    packets.sort_by_key(|p| p.ts);
    let mut flows = g.flows;
    flows.sort_by(|x, y| x.start.total_cmp(&y.start).then(x.key.cmp(&y.key)));
    let sidecar = GroundTruthSidecar {
        app: app.name.clone(),
        user: IpAddr::V4(script.user_ip),
        seed: script.seed,
        script_start: t0.as_secs_f64(),
        session_start: session_start.as_secs_f64(),
        session_end: end.max(session_start).as_secs_f64(),
        interval_len: cfg.interval_len,
        intervals,
        segments: script.segments.clone(),
        flows,
    };
    Ok((packets, sidecar))
}
