use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::Ipv4Addr;
use std::path::Path;
use std::sync::Arc;

use super::SynthError;
use crate::capture::{tcp_flags, Frame, LinkType, PcapWriter, TimestampPrecision, Transport};
use crate::time::Timestamp;

const ETH_LEN: usize = 14;
const IPV4_LEN: usize = 20;
const TCP_LEN: usize = 20;
const UDP_LEN: usize = 8;
/// Largest payload that fits an IPv4 total-length field.
pub const MAX_PAYLOAD: u32 = 65_535 - (IPV4_LEN + TCP_LEN) as u32;

/// What the captured part of a payload holds. Everything past it is cut by
/// the snap length, so bulk payloads cost no file space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Content {
    /// Nothing captured.
    Opaque,
    /// A TLS record header of the given content type.
    TlsRecord(u8),
    /// A complete client hello carrying this server name.
    ClientHello(Arc<str>),
}

/// One generated packet, before framing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthPacket {
    pub ts: Timestamp,
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub transport: Transport,
    pub payload_len: u32,
    pub tcp_seq: u32,
    pub tcp_ack: u32,
    pub tcp_flags: u8,
    pub content: Content,
}

impl SynthPacket {
    pub fn udp(ts: Timestamp, src: (Ipv4Addr, u16), dst: (Ipv4Addr, u16), payload_len: u32) -> Self {
        SynthPacket {
            ts,
            src: src.0,
            dst: dst.0,
            src_port: src.1,
            dst_port: dst.1,
            transport: Transport::Udp,
            payload_len,
            tcp_seq: 0,
            tcp_ack: 0,
            tcp_flags: 0,
            content: Content::Opaque,
        }
    }

    /// TCP packet; sequence numbers are filled in later by the flow builder.
    pub fn tcp(ts: Timestamp, src: (Ipv4Addr, u16), dst: (Ipv4Addr, u16), flags: u8, payload_len: u32, content: Content) -> Self {
        SynthPacket {
            ts,
            src: src.0,
            dst: dst.0,
            src_port: src.1,
            dst_port: dst.1,
            transport: Transport::Tcp,
            payload_len,
            tcp_seq: 0,
            tcp_ack: 0,
            tcp_flags: flags,
            content,
        }
    }

    /// Captured payload bytes.
    fn head(&self) -> Vec<u8> {
        let len = self.payload_len as usize;
        match &self.content {
            Content::Opaque => Vec::new(),
            Content::TlsRecord(ct) => {
                let body = len.saturating_sub(5) as u16;
                let mut h = vec![*ct, 3, 3, (body >> 8) as u8, body as u8];
                h.truncate(len);
                h
            }
            Content::ClientHello(sni) => {
                let mut h = client_hello(sni, len);
                h.truncate(len);
                h
            }
        }
    }

    /// Ethernet/IPv4 frame; the captured length stops after the payload
    /// head, the original length covers the whole payload.
    pub fn frame(&self) -> Frame {
        let l4 = match self.transport {
            Transport::Tcp => TCP_LEN,
            _ => UDP_LEN,
        };
        let head = self.head();
        let total_ip = IPV4_LEN + l4 + self.payload_len as usize;
        let mut d = Vec::with_capacity(ETH_LEN + IPV4_LEN + l4 + head.len());
        d.extend_from_slice(&[0x02, 0, 0, 0, 0, 0x02, 0x02, 0, 0, 0, 0, 0x01, 0x08, 0x00]);
        let proto = if self.transport == Transport::Tcp { 6 } else { 17 };
        let mut ip = [0u8; IPV4_LEN];
        ip[0] = 0x45;
        ip[2..4].copy_from_slice(&(total_ip as u16).to_be_bytes());
        ip[6] = 0x40; // DF
        ip[8] = 64;
        ip[9] = proto;
        ip[12..16].copy_from_slice(&self.src.octets());
        ip[16..20].copy_from_slice(&self.dst.octets());
        let csum = ipv4_checksum(&ip);
        ip[10..12].copy_from_slice(&csum.to_be_bytes());
        d.extend_from_slice(&ip);
        d.extend_from_slice(&self.src_port.to_be_bytes());
        d.extend_from_slice(&self.dst_port.to_be_bytes());
        match self.transport {
            Transport::Tcp => {
                d.extend_from_slice(&self.tcp_seq.to_be_bytes());
                d.extend_from_slice(&self.tcp_ack.to_be_bytes());
                d.push(0x50);
                d.push(self.tcp_flags);
                d.extend_from_slice(&65535u16.to_be_bytes());
                d.extend_from_slice(&[0, 0, 0, 0]);
            }
            _ => {
                d.extend_from_slice(&((UDP_LEN + self.payload_len as usize) as u16).to_be_bytes());
                d.extend_from_slice(&[0, 0]);
            }
        }
        d.extend_from_slice(&head);
        Frame { ts: self.ts, data: d, orig_len: (ETH_LEN + total_ip) as u32 }
    }
}

fn ipv4_checksum(hdr: &[u8]) -> u16 {
    let mut sum: u32 = hdr.chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as u32).sum();
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

/// TLS 1.2 client hello record of exactly `size` bytes when `size` leaves
/// room for the server name; shorter targets get the minimal record.
pub fn client_hello(sni: &str, size: usize) -> Vec<u8> {
    let build = |session_id: usize, padding: Option<usize>| {
        let mut sni_ext = Vec::new();
        sni_ext.extend_from_slice(&((sni.len() + 3) as u16).to_be_bytes());
        sni_ext.push(0);
        sni_ext.extend_from_slice(&(sni.len() as u16).to_be_bytes());
        sni_ext.extend_from_slice(sni.as_bytes());
        let mut exts = Vec::new();
        exts.extend_from_slice(&0u16.to_be_bytes());
        exts.extend_from_slice(&(sni_ext.len() as u16).to_be_bytes());
        exts.extend_from_slice(&sni_ext);
        exts.extend_from_slice(&[0x00, 0x0a, 0, 4, 0, 2, 0, 0x1d]); // supported_groups: x25519
        if let Some(p) = padding {
            exts.extend_from_slice(&21u16.to_be_bytes());
            exts.extend_from_slice(&(p as u16).to_be_bytes());
            exts.resize(exts.len() + p, 0);
        }
        let mut body = vec![3, 3];
        body.extend_from_slice(&[0x5a; 32]);
        body.push(session_id as u8);
        body.resize(body.len() + session_id, 0x11);
        body.extend_from_slice(&[0, 4, 0xc0, 0x2f, 0x13, 0x01, 1, 0]);
        body.extend_from_slice(&(exts.len() as u16).to_be_bytes());
        body.extend_from_slice(&exts);
        let mut rec = vec![22, 3, 1];
        rec.extend_from_slice(&((body.len() + 4) as u16).to_be_bytes());
        rec.push(1);
        rec.extend_from_slice(&(body.len() as u32).to_be_bytes()[1..]);
        rec.extend_from_slice(&body);
        rec
    };
    let base = build(0, None);
    let need = size.saturating_sub(base.len());
    match need {
        0 => base,
        1..=3 => build(need, None),
        _ => build(0, Some(need - 4)),
    }
}

/// Writes the stream as a nanosecond pcap.
pub fn write_pcap<W: Write>(packets: &[SynthPacket], w: W) -> Result<W, SynthError> {
    let mut out = PcapWriter::new(w, LinkType::Ethernet, TimestampPrecision::Nanos)?;
    for p in packets {
        let f = p.frame();
        out.write_frame(f.ts, &f.data, f.orig_len)?;
    }
    Ok(out.into_inner()?)
}

pub fn emit_pcap(packets: &[SynthPacket], path: impl AsRef<Path>) -> Result<(), SynthError> {
    let f = BufWriter::new(File::create(path)?);
    write_pcap(packets, f)?;
    Ok(())
}

/// Assigns TCP sequence and acknowledgment numbers along a flow whose
/// packets are in time order; `up` tells which side each packet is from.
pub(crate) fn number_tcp(packets: &mut [SynthPacket], client: Ipv4Addr, isn: (u32, u32)) {
    let (mut up_seq, mut down_seq) = isn;
    for p in packets.iter_mut() {
        let up = p.src == client;
        let (seq, ack) = if up { (&mut up_seq, down_seq) } else { (&mut down_seq, up_seq) };
        p.tcp_seq = *seq;
        p.tcp_ack = if p.tcp_flags & tcp_flags::ACK != 0 { ack } else { 0 };
        let mut adv = p.payload_len;
        if p.tcp_flags & (tcp_flags::SYN | tcp_flags::FIN) != 0 {
            adv += 1;
        }
        *seq = seq.wrapping_add(adv);
    }
}
