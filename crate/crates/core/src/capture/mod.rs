//! Packet ingest: pcap files or any other source of timestamped raw frames,
//! parsed into normalized [`PacketRecord`]s.
//!
//! Payload sizes are measured per transport segment (no TLS record
//! reassembly), which is the granularity the size-sequence signatures are
//! defined at.

mod parse;
mod pcap;
mod tls;

use std::fs::File;
use std::io::BufReader;
use std::net::IpAddr;
use std::path::Path;

use ipnet::IpNet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use parse::{classify_direction, PacketParser, ParseStats};
pub use pcap::{LinkType, PcapReader, PcapWriter, TimestampPrecision};
pub use tls::parse_tls_client_hello;

use crate::time::Timestamp;

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("malformed pcap global header: {0}")]
    MalformedGlobalHeader(String),
    #[error("unsupported link type {0}")]
    UnsupportedLinkType(u32),
    #[error("no local prefix configured")]
    NoLocalPrefix,
    #[error("capture I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Transport {
    Tcp,
    Udp,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Direction {
    Upstream,
    Downstream,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RecordKind {
    ClientHello,
    OtherHandshake,
    AppData,
    None,
}

/// What the first bytes of a TCP payload look like as a TLS record.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TlsMeta {
    pub record_kind: RecordKind,
    /// Only ever `Some` (and non-empty) for a client hello.
    pub sni: Option<String>,
}

impl TlsMeta {
    pub fn none() -> Self {
        TlsMeta { record_kind: RecordKind::None, sni: None }
    }
}

/// IP fragmentation position of a packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fragment {
    Whole,
    First,
    /// A non-first fragment. Ports come from the first fragment when it was
    /// seen; the packet counts toward volume but never toward signatures.
    Subsequent,
}

pub mod tcp_flags {
    pub const FIN: u8 = 0x01;
    pub const SYN: u8 = 0x02;
    pub const RST: u8 = 0x04;
    pub const PSH: u8 = 0x08;
    pub const ACK: u8 = 0x10;
}

/// One parsed packet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketRecord {
    pub ts: Timestamp,
    pub src_ip: IpAddr,
    pub dst_ip: IpAddr,
    pub src_port: u16,
    pub dst_port: u16,
    pub transport: Transport,
    pub direction: Direction,
    /// Both endpoints are local.
    pub internal: bool,
    /// Transport payload bytes; excludes link, IP and transport headers.
    pub payload_len: u32,
    pub tcp_seq: Option<u32>,
    pub tcp_flags: u8,
    pub fragment: Fragment,
    pub tls: Option<TlsMeta>,
}

impl PacketRecord {
    pub fn is_upstream(&self) -> bool {
        self.direction == Direction::Upstream
    }

    pub fn has_flag(&self, flag: u8) -> bool {
        self.tcp_flags & flag != 0
    }

    /// Local (user) side of the packet.
    pub fn local_ip(&self) -> IpAddr {
        match self.direction {
            Direction::Upstream => self.src_ip,
            Direction::Downstream => self.dst_ip,
        }
    }
}

/// A raw captured frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub ts: Timestamp,
    pub data: Vec<u8>,
    /// Length on the wire; may exceed `data.len()` when the snaplen cut it.
    pub orig_len: u32,
}

/// Anything that yields timestamped raw frames: capture files, in-memory
/// traces, or a live tap behind an adapter.
pub trait FrameSource: Send {
    fn link_type(&self) -> LinkType;
    fn next_frame(&mut self) -> Option<Frame>;
    /// Frames the source had to give up on (truncation, I/O).
    fn dropped_frames(&self) -> u64 {
        0
    }
}

/// In-memory frame list, used for generated traces.
pub struct VecFrameSource {
    link_type: LinkType,
    frames: std::vec::IntoIter<Frame>,
}

impl VecFrameSource {
    pub fn new(link_type: LinkType, frames: Vec<Frame>) -> Self {
        VecFrameSource { link_type, frames: frames.into_iter() }
    }
}

impl FrameSource for VecFrameSource {
    fn link_type(&self) -> LinkType {
        self.link_type
    }

    fn next_frame(&mut self) -> Option<Frame> {
        self.frames.next()
    }
}

/// Replays another source with real-time pacing, honoring the inter-frame
/// gaps of the original timestamps. Stands in for a mirror port.
pub struct PacedSource<S> {
    inner: S,
    speedup: f64,
    anchor: Option<(Timestamp, std::time::Instant)>,
}

impl<S: FrameSource> PacedSource<S> {
    pub fn new(inner: S, speedup: f64) -> Self {
        PacedSource { inner, speedup: speedup.max(1e-6), anchor: None }
    }
}

impl<S: FrameSource> FrameSource for PacedSource<S> {
    fn link_type(&self) -> LinkType {
        self.inner.link_type()
    }

    fn next_frame(&mut self) -> Option<Frame> {
        let frame = self.inner.next_frame()?;
        let (t0, wall0) = *self.anchor.get_or_insert((frame.ts, std::time::Instant::now()));
        let due = std::time::Duration::from_secs_f64(frame.ts.secs_since(t0) / self.speedup);
        let elapsed = wall0.elapsed();
        if due > elapsed {
            std::thread::sleep(due - elapsed);
        }
        Some(frame)
    }

    fn dropped_frames(&self) -> u64 {
        self.inner.dropped_frames()
    }
}

/// Where packets come from and how to tell users from servers.
#[derive(Debug, Clone)]
pub struct CaptureConfig {
    pub local_prefixes: Vec<IpNet>,
}

impl CaptureConfig {
    pub fn new(local_prefixes: Vec<IpNet>) -> Result<Self, CaptureError> {
        if local_prefixes.is_empty() {
            return Err(CaptureError::NoLocalPrefix);
        }
        Ok(CaptureConfig { local_prefixes })
    }
}

/// Iterator of parsed packet records over a frame source.
pub struct Capture<S> {
    source: S,
    parser: PacketParser,
}

impl<S: FrameSource> Capture<S> {
    pub fn new(source: S, config: &CaptureConfig) -> Self {
        let parser = PacketParser::new(source.link_type(), config.local_prefixes.clone());
        Capture { source, parser }
    }

    pub fn stats(&self) -> ParseStats {
        let mut stats = self.parser.stats().clone();
        stats.truncated_frames += self.source.dropped_frames();
        stats
    }

    pub fn into_parts(self) -> (S, PacketParser) {
        (self.source, self.parser)
    }
}

impl<S: FrameSource> Iterator for Capture<S> {
    type Item = PacketRecord;

    fn next(&mut self) -> Option<PacketRecord> {
        loop {
            let frame = self.source.next_frame()?;
            if let Some(rec) = self.parser.parse(&frame) {
                return Some(rec);
            }
        }
    }
}

/// Opens a pcap file for reading as a record iterator.
pub fn open_capture(
    path: impl AsRef<Path>,
    config: &CaptureConfig,
) -> Result<Capture<PcapReader<BufReader<File>>>, CaptureError> {
    let file = File::open(path)?;
    let reader = PcapReader::new(BufReader::new(file))?;
    Ok(Capture::new(reader, config))
}

/// Reads every frame of a pcap file into memory.
pub fn read_frames(path: impl AsRef<Path>) -> Result<(LinkType, Vec<Frame>), CaptureError> {
    let file = File::open(path)?;
    let mut reader = PcapReader::new(BufReader::new(file))?;
    let link = reader.link_type();
    let mut frames = Vec::new();
    while let Some(f) = reader.next_frame() {
        frames.push(f);
    }
    Ok((link, frames))
}
