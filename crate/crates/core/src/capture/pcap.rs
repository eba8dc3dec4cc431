use std::io::{self, Read, Write};

use log::warn;

use super::{CaptureError, Frame, FrameSource};
use crate::time::Timestamp;

const MAGIC_MICROS: u32 = 0xA1B2_C3D4;
const MAGIC_NANOS: u32 = 0xA1B2_3C4D;
const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;
/// Upper bound on a single record; anything larger is a corrupt header.
const MAX_RECORD_LEN: u32 = 256 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkType {
    Ethernet,
    RawIp,
}

impl LinkType {
    pub fn from_code(code: u32) -> Result<Self, CaptureError> {
        match code {
            1 => Ok(LinkType::Ethernet),
            // LINKTYPE_RAW, plus the historical DLT_RAW values.
            101 | 12 | 14 => Ok(LinkType::RawIp),
            other => Err(CaptureError::UnsupportedLinkType(other)),
        }
    }

    pub fn code(self) -> u32 {
        match self {
            LinkType::Ethernet => 1,
            LinkType::RawIp => 101,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimestampPrecision {
    Micros,
    Nanos,
}

/// Classic libpcap file reader (both byte orders, micro- and nanosecond
/// timestamp variants).
pub struct PcapReader<R> {
    inner: R,
    big_endian: bool,
    precision: TimestampPrecision,
    link_type: LinkType,
    truncated: u64,
    done: bool,
}

impl<R: Read> PcapReader<R> {
    pub fn new(mut inner: R) -> Result<Self, CaptureError> {
        let mut hdr = [0u8; GLOBAL_HEADER_LEN];
        read_full(&mut inner, &mut hdr)
            .map_err(|e| CaptureError::MalformedGlobalHeader(e.to_string()))
            .and_then(|n| {
                if n == GLOBAL_HEADER_LEN {
                    Ok(())
                } else {
                    Err(CaptureError::MalformedGlobalHeader(format!("short header: {n} bytes")))
                }
            })?;

        let le = u32::from_le_bytes([hdr[0], hdr[1], hdr[2], hdr[3]]);
        let be = u32::from_be_bytes([hdr[0], hdr[1], hdr[2], hdr[3]]);
        let (big_endian, precision) = match (le, be) {
            (MAGIC_MICROS, _) => (false, TimestampPrecision::Micros),
            (MAGIC_NANOS, _) => (false, TimestampPrecision::Nanos),
            (_, MAGIC_MICROS) => (true, TimestampPrecision::Micros),
            (_, MAGIC_NANOS) => (true, TimestampPrecision::Nanos),
            _ => return Err(CaptureError::MalformedGlobalHeader(format!("bad magic {le:#010x}"))),
        };
        let rd32 = |b: &[u8]| {
            let a = [b[0], b[1], b[2], b[3]];
            if big_endian {
                u32::from_be_bytes(a)
            } else {
                u32::from_le_bytes(a)
            }
        };
        let network = rd32(&hdr[20..24]) & 0x0FFF_FFFF;
        let link_type = LinkType::from_code(network)?;

        Ok(PcapReader { inner, big_endian, precision, link_type, truncated: 0, done: false })
    }

    pub fn precision(&self) -> TimestampPrecision {
        self.precision
    }

    fn rd32(&self, b: &[u8]) -> u32 {
        let a = [b[0], b[1], b[2], b[3]];
        if self.big_endian {
            u32::from_be_bytes(a)
        } else {
            u32::from_le_bytes(a)
        }
    }

    fn truncate(&mut self, what: &str) -> Option<Frame> {
        warn!("TRUNCATED_FRAME: {what}; stopping at last complete record");
        self.truncated += 1;
        self.done = true;
        None
    }

    fn read_record(&mut self) -> Option<Frame> {
        if self.done {
            return None;
        }
        let mut hdr = [0u8; RECORD_HEADER_LEN];
        match read_full(&mut self.inner, &mut hdr) {
            Ok(0) => {
                self.done = true;
                return None;
            }
            Ok(n) if n < RECORD_HEADER_LEN => return self.truncate("partial record header"),
            Ok(_) => {}
            Err(e) => return self.truncate(&e.to_string()),
        }
        let secs = self.rd32(&hdr[0..4]) as u64;
        let frac = self.rd32(&hdr[4..8]);
        let incl = self.rd32(&hdr[8..12]);
        let orig = self.rd32(&hdr[12..16]);
        if incl > MAX_RECORD_LEN {
            return self.truncate("record length exceeds bound");
        }
        let nanos = match self.precision {
            TimestampPrecision::Micros => frac.saturating_mul(1_000),
            TimestampPrecision::Nanos => frac,
        };
        let mut data = vec![0u8; incl as usize];
        match read_full(&mut self.inner, &mut data) {
            Ok(n) if n == incl as usize => {}
            Ok(_) => return self.truncate("partial record body"),
            Err(e) => return self.truncate(&e.to_string()),
        }
        Some(Frame { ts: Timestamp::from_parts(secs, nanos), data, orig_len: orig.max(incl) })
    }
}

impl<R: Read + Send> FrameSource for PcapReader<R> {
    fn link_type(&self) -> LinkType {
        self.link_type
    }

    fn next_frame(&mut self) -> Option<Frame> {
        self.read_record()
    }

    fn dropped_frames(&self) -> u64 {
        self.truncated
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(n)
}

/// Little-endian classic pcap writer.
pub struct PcapWriter<W: Write> {
    inner: W,
    precision: TimestampPrecision,
}

impl<W: Write> PcapWriter<W> {
    pub fn new(mut inner: W, link_type: LinkType, precision: TimestampPrecision) -> io::Result<Self> {
        let magic = match precision {
            TimestampPrecision::Micros => MAGIC_MICROS,
            TimestampPrecision::Nanos => MAGIC_NANOS,
        };
        let mut hdr = Vec::with_capacity(GLOBAL_HEADER_LEN);
        hdr.extend_from_slice(&magic.to_le_bytes());
        hdr.extend_from_slice(&2u16.to_le_bytes());
        hdr.extend_from_slice(&4u16.to_le_bytes());
        hdr.extend_from_slice(&0i32.to_le_bytes());
        hdr.extend_from_slice(&0u32.to_le_bytes());
        hdr.extend_from_slice(&65535u32.to_le_bytes());
        hdr.extend_from_slice(&link_type.code().to_le_bytes());
        inner.write_all(&hdr)?;
        Ok(PcapWriter { inner, precision })
    }

    pub fn write_frame(&mut self, ts: Timestamp, data: &[u8], orig_len: u32) -> io::Result<()> {
        let frac = match self.precision {
            TimestampPrecision::Micros => ts.subsec_nanos() / 1_000,
            TimestampPrecision::Nanos => ts.subsec_nanos(),
        };
        let mut hdr = [0u8; RECORD_HEADER_LEN];
        hdr[0..4].copy_from_slice(&(ts.secs() as u32).to_le_bytes());
        hdr[4..8].copy_from_slice(&frac.to_le_bytes());
        hdr[8..12].copy_from_slice(&(data.len() as u32).to_le_bytes());
        hdr[12..16].copy_from_slice(&orig_len.max(data.len() as u32).to_le_bytes());
        self.inner.write_all(&hdr)?;
        self.inner.write_all(data)
    }

    pub fn into_inner(mut self) -> io::Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: [u8; 4], link: u32, big: bool) -> Vec<u8> {
        let mut h = magic.to_vec();
        let put16 = |v: u16| if big { v.to_be_bytes() } else { v.to_le_bytes() };
        let put32 = |v: u32| if big { v.to_be_bytes() } else { v.to_le_bytes() };
        h.extend_from_slice(&put16(2));
        h.extend_from_slice(&put16(4));
        h.extend_from_slice(&put32(0));
        h.extend_from_slice(&put32(0));
        h.extend_from_slice(&put32(65535));
        h.extend_from_slice(&put32(link));
        h
    }

    #[test]
    fn empty_capture_yields_nothing() {
        let mut w = PcapWriter::new(Vec::new(), LinkType::Ethernet, TimestampPrecision::Micros).unwrap();
        let buf = std::mem::take(&mut w.inner);
        assert_eq!(buf.len(), GLOBAL_HEADER_LEN);
        let mut r = PcapReader::new(&buf[..]).unwrap();
        assert!(r.next_frame().is_none());
        assert_eq!(r.dropped_frames(), 0);
    }

    #[test]
    fn big_endian_nanos_header() {
        let mut buf = header([0xA1, 0xB2, 0x3C, 0x4D], 101, true);
        buf.extend_from_slice(&7u32.to_be_bytes());
        buf.extend_from_slice(&5u32.to_be_bytes());
        buf.extend_from_slice(&3u32.to_be_bytes());
        buf.extend_from_slice(&3u32.to_be_bytes());
        buf.extend_from_slice(&[0x45, 0, 0]);
        let mut r = PcapReader::new(&buf[..]).unwrap();
        assert_eq!(r.link_type(), LinkType::RawIp);
        assert_eq!(r.precision(), TimestampPrecision::Nanos);
        let f = r.next_frame().unwrap();
        assert_eq!(f.ts, Timestamp::from_parts(7, 5));
        assert_eq!(f.data, vec![0x45, 0, 0]);
    }

    #[test]
    fn bad_magic_and_link_type() {
        let buf = header([0, 1, 2, 3], 1, false);
        assert!(matches!(PcapReader::new(&buf[..]), Err(CaptureError::MalformedGlobalHeader(_))));
        let buf = header([0xD4, 0xC3, 0xB2, 0xA1], 105, false);
        assert!(matches!(PcapReader::new(&buf[..]), Err(CaptureError::UnsupportedLinkType(105))));
        assert!(matches!(PcapReader::new(&buf[..10]), Err(CaptureError::MalformedGlobalHeader(_))));
    }

    #[test]
    fn truncated_tail_is_not_fatal() {
        let mut w = PcapWriter::new(Vec::new(), LinkType::RawIp, TimestampPrecision::Micros).unwrap();
        for i in 0..3u64 {
            w.write_frame(Timestamp::from_micros(i), &[i as u8; 40], 40).unwrap();
        }
        let mut buf = w.into_inner().unwrap();
        buf.truncate(buf.len() - 7);
        let mut r = PcapReader::new(&buf[..]).unwrap();
        let mut n = 0;
        while r.next_frame().is_some() {
            n += 1;
        }
        assert_eq!(n, 2);
        assert_eq!(r.dropped_frames(), 1);
    }
}
