use std::net::{IpAddr, Ipv4Addr};
use std::sync::Arc;

use ipnet::Ipv4Net;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gen::DEFAULT_TRACE_START;
use super::packet::{number_tcp, Content, SynthPacket};
use super::truth::BackgroundTruth;
use crate::capture::tcp_flags::{ACK, PSH, SYN};
use crate::capture::Transport;
use crate::flowtable::FlowKey;
use crate::signatures::{MatchOutcome, SignatureMatcher, SignatureSet, DEFAULT_UDP_PORTS};
use crate::time::{secs_to_nanos, Timestamp};

pub fn background_server_net() -> Ipv4Net {
    Ipv4Net::new(Ipv4Addr::new(198, 18, 0, 0), 15).expect("valid prefix")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundConfig {
    pub n_flows: usize,
    pub start: f64,
    /// Flow start times are spread over this many seconds.
    pub span_secs: f64,
    pub users: Ipv4Net,
    pub udp_fraction: f64,
    pub near_miss_fraction: f64,
    /// Resample any sequence the signature model would match.
    pub exclude_collisions: bool,
    /// Extra flows that copy a real primary signature, each from its own
    /// user. Only honored with collision exclusion off.
    pub planted: usize,
    pub planted_users: Ipv4Net,
}

impl Default for BackgroundConfig {
    fn default() -> Self {
        BackgroundConfig {
            n_flows: 0,
            start: DEFAULT_TRACE_START,
            span_secs: 600.0,
            users: Ipv4Net::new(Ipv4Addr::new(10, 1, 0, 0), 16).expect("valid prefix"),
            udp_fraction: 0.3,
            near_miss_fraction: 0.1,
            exclude_collisions: true,
            planted: 0,
            planted_users: Ipv4Net::new(Ipv4Addr::new(10, 2, 0, 0), 16).expect("valid prefix"),
        }
    }
}

fn random_host<R: Rng>(net: Ipv4Net, rng: &mut R) -> Ipv4Addr {
    let span = (1u32 << (32 - net.prefix_len())).saturating_sub(2).max(1);
    Ipv4Addr::from(u32::from(net.network()) + 1 + rng.random_range(0..span))
}

struct Bg<'a> {
    rng: ChaCha8Rng,
    cfg: &'a BackgroundConfig,
    matcher: Option<SignatureMatcher>,
    primaries: Vec<Vec<u32>>,
    udp_sigs: Vec<(u16, Vec<u32>)>,
    listed_ports: Vec<u16>,
    packets: Vec<SynthPacket>,
    truth: BackgroundTruth,
}

impl Bg<'_> {
    fn collides_primary(&self, seq: &[u32]) -> bool {
        let Some(m) = &self.matcher else { return false };
        (1..=seq.len()).any(|k| matches!(m.match_primary(&seq[..k]), MatchOutcome::Match(_)))
    }

    fn collides_udp(&self, port: u16, seq: &[u32]) -> bool {
        let Some(m) = &self.matcher else { return false };
        (1..=seq.len()).any(|k| matches!(m.match_udp(port, &seq[..k]), MatchOutcome::Match(_)))
    }

    /// A real signature with one size nudged.
    fn mutate(&mut self, sig: &[u32]) -> Vec<u32> {
        let mut s = sig.to_vec();
        let pos = self.rng.random_range(0..s.len());
        let delta = self.rng.random_range(1..=3);
        s[pos] = if self.rng.random_bool(0.5) || s[pos] <= delta { s[pos] + delta } else { s[pos] - delta };
        s
    }

    fn tcp_sequence(&mut self) -> (Vec<u32>, bool) {
        loop {
            let near = !self.primaries.is_empty() && self.rng.random_bool(self.cfg.near_miss_fraction);
            let seq = if near {
                let sig = self.primaries.choose(&mut self.rng).cloned().unwrap_or_default();
                self.mutate(&sig)
            } else {
                let n = self.rng.random_range(3..=7);
                let mut s = vec![self.rng.random_range(100..600)];
                s.extend((1..n - 1).map(|_| self.rng.random_range(6..200)));
                s.push(self.rng.random_range(20..1400));
                s
            };
            if !self.cfg.exclude_collisions || !self.collides_primary(&seq) {
                return (seq, near);
            }
        }
    }

    fn udp_sequence(&mut self, port: u16, listed: bool) -> (Vec<u32>, bool) {
        loop {
            let sigs: Vec<Vec<u32>> = self.udp_sigs.iter().filter(|(p, _)| *p == port).map(|(_, s)| s.clone()).collect();
            let near = listed && !sigs.is_empty() && self.rng.random_bool(self.cfg.near_miss_fraction);
            let seq = if near {
                let sig = sigs.choose(&mut self.rng).cloned().unwrap_or_default();
                self.mutate(&sig)
            } else {
                let n = self.rng.random_range(4..=8);
                (0..n).map(|_| self.rng.random_range(20..1300)).collect()
            };
            if !self.cfg.exclude_collisions || !self.collides_udp(port, &seq) {
                return (seq, near);
            }
        }
    }

    fn tcp_flow(&mut self, user: Ipv4Addr, start: Timestamp, seq: &[u32]) -> FlowKey {
        let client = (user, self.rng.random_range(20_000..61_000));
        let server = (random_host(background_server_net(), &mut self.rng), 443);
        let r = secs_to_nanos(self.rng.random_range(0.005..0.150));
        let d = 200_000;
        let sni: Arc<str> = format!("www.site{}.example", self.rng.random_range(0..10_000)).into();
        let up = |ts, flags, len, c| SynthPacket::tcp(ts, client, server, flags, len, c);
        let down = |ts, flags, len, c| SynthPacket::tcp(ts, server, client, flags, len, c);
        let mut p = vec![up(start, SYN, 0, Content::Opaque)];
        let mut t = start.add_nanos(r);
        p.push(down(t, SYN | ACK, 0, Content::Opaque));
        t = t.add_nanos(d);
        p.push(up(t, ACK, 0, Content::Opaque));
        for (i, &sz) in seq.iter().enumerate() {
            t = t.add_nanos(d);
            let content = match i {
                0 => Content::ClientHello(sni.clone()),
                _ if i + 1 == seq.len() => Content::TlsRecord(0x17),
                _ => Content::TlsRecord(0x16),
            };
            p.push(up(t, PSH | ACK, sz, content));
            t = t.add_nanos(r);
            let resp = self.rng.random_range(40..1448);
            p.push(down(t, PSH | ACK, resp, Content::Opaque));
        }
        let isn = (self.rng.random(), self.rng.random());
        number_tcp(&mut p, user, isn);
        self.packets.append(&mut p);
        self.truth.tcp_flows += 1;
        FlowKey {
            src_ip: IpAddr::V4(client.0),
            dst_ip: IpAddr::V4(server.0),
            src_port: client.1,
            dst_port: server.1,
            transport: Transport::Tcp,
        }
    }

    fn udp_flow(&mut self, user: Ipv4Addr, start: Timestamp) {
        let listed = !self.listed_ports.is_empty() && self.rng.random_bool(0.5);
        let port = if listed {
            *self.listed_ports.choose(&mut self.rng).expect("non-empty")
        } else {
            loop {
                let p = self.rng.random_range(1024..65_535);
                if !self.listed_ports.contains(&p) {
                    break p;
                }
            }
        };
        let (seq, near) = self.udp_sequence(port, listed);
        self.truth.near_misses += near as u64;
        let client = (user, self.rng.random_range(20_000..61_000));
        let server = (random_host(background_server_net(), &mut self.rng), port);
        let r = secs_to_nanos(self.rng.random_range(0.005..0.150));
        let mut t = start;
        for &sz in &seq {
            self.packets.push(SynthPacket::udp(t, client, server, sz));
            let resp = self.rng.random_range(20..1300);
            self.packets.push(SynthPacket::udp(t.add_nanos(r), server, client, resp));
            t = t.add_nanos(secs_to_nanos(self.rng.random_range(0.01..0.2)));
        }
        self.truth.udp_flows += 1;
    }
}

/// Non-metaverse traffic: TLS flows to port 443 with random handshake
/// sizes and UDP flows on listed and other ports. With a signature set,
/// some flows are one-size mutations of real signatures.
pub fn generate_background(
    cfg: &BackgroundConfig,
    signatures: Option<&SignatureSet>,
    seed: u64,
) -> (Vec<SynthPacket>, BackgroundTruth) {
    let mut bg = Bg {
        rng: ChaCha8Rng::seed_from_u64(seed),
        cfg,
        matcher: signatures.map(SignatureMatcher::new),
        primaries: signatures.map(|s| s.primaries().map(|p| p.size_seq.to_vec()).collect()).unwrap_or_default(),
        udp_sigs: signatures.map(|s| s.udp().map(|u| (u.port, u.size_seq.to_vec())).collect()).unwrap_or_default(),
        listed_ports: signatures.map(|s| s.udp_ports()).unwrap_or_else(|| DEFAULT_UDP_PORTS.to_vec()),
        packets: Vec::new(),
        truth: BackgroundTruth::default(),
    };
    let t0 = Timestamp::from_secs_f64(cfg.start);
    let span = secs_to_nanos(cfg.span_secs).max(1);
    for _ in 0..cfg.n_flows {
        let start = t0.add_nanos(bg.rng.random_range(0..span));
        let user = random_host(cfg.users, &mut bg.rng);
        if bg.rng.random_bool(cfg.udp_fraction) {
            bg.udp_flow(user, start);
        } else {
            let (seq, near) = bg.tcp_sequence();
            bg.truth.near_misses += near as u64;
            bg.tcp_flow(user, start, &seq);
        }
    }
    if !cfg.exclude_collisions {
        if let Some(sig) = bg.primaries.first().cloned() {
            for i in 0..cfg.planted {
                let start = t0.add_nanos(bg.rng.random_range(0..span));
                let user = Ipv4Addr::from(u32::from(cfg.planted_users.network()) + 1 + i as u32);
                let key = bg.tcp_flow(user, start, &sig);
                bg.truth.planted.push(key);
            }
        }
    }
    let mut packets = bg.packets;
    packets.sort_by_key(|p| p.ts);
    (packets, bg.truth)
}
