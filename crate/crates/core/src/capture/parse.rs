use std::collections::HashMap;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};

use ipnet::IpNet;

use super::{
    parse_tls_client_hello, Direction, Fragment, Frame, LinkType, PacketRecord, Transport,
};

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_IPV6: u16 = 0x86DD;
const ETHERTYPE_VLAN: u16 = 0x8100;
const ETHERTYPE_QINQ: u16 = 0x88A8;
const PROTO_TCP: u8 = 6;
const PROTO_UDP: u8 = 17;
const MAX_PENDING_FRAGMENTS: usize = 4096;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseStats {
    pub frames: u64,
    pub records: u64,
    pub non_ip: u64,
    pub malformed: u64,
    /// Frames with stacked VLAN tags (only one tag is stripped).
    pub unsupported_vlan: u64,
    pub orphan_fragments: u64,
    pub truncated_frames: u64,
}

/// Direction of a packet relative to the monitored user population.
///
/// Returns the direction and whether both ends are local. Local-to-local
/// traffic is labeled upstream by the monitor-side convention.
pub fn classify_direction(src: IpAddr, dst: IpAddr, local_prefixes: &[IpNet]) -> (Direction, bool) {
    let src_local = local_prefixes.iter().any(|n| n.contains(&src));
    if src_local {
        let dst_local = local_prefixes.iter().any(|n| n.contains(&dst));
        (Direction::Upstream, dst_local)
    } else {
        (Direction::Downstream, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct FragKey {
    src: IpAddr,
    dst: IpAddr,
    proto: u8,
    id: u32,
}

struct IpLayer<'a> {
    src: IpAddr,
    dst: IpAddr,
    proto: u8,
    /// Transport bytes as captured.
    body: &'a [u8],
    /// Transport length according to the IP header.
    body_len: usize,
    fragment: Fragment,
    frag_key: Option<FragKey>,
}

/// Stateful frame parser. The only state kept across frames is the port
/// lookup for IP fragments.
pub struct PacketParser {
    link_type: LinkType,
    local_prefixes: Vec<IpNet>,
    fragments: HashMap<FragKey, (u16, u16)>,
    stats: ParseStats,
}

impl PacketParser {
    pub fn new(link_type: LinkType, local_prefixes: Vec<IpNet>) -> Self {
        PacketParser { link_type, local_prefixes, fragments: HashMap::new(), stats: ParseStats::default() }
    }

    pub fn stats(&self) -> &ParseStats {
        &self.stats
    }

    pub fn local_prefixes(&self) -> &[IpNet] {
        &self.local_prefixes
    }

    /// Parses one frame; `None` for anything that is not TCP/UDP/other over IP.
    pub fn parse(&mut self, frame: &Frame) -> Option<PacketRecord> {
        self.stats.frames += 1;
        let ip_bytes = match self.link_type {
            LinkType::Ethernet => self.strip_ethernet(&frame.data)?,
            LinkType::RawIp => &frame.data[..],
        };
        let Some(ip) = parse_ip(ip_bytes) else {
            self.stats.malformed += 1;
            return None;
        };
        let rec = self.transport(frame, ip);
        if rec.is_some() {
            self.stats.records += 1;
        }
        rec
    }

    fn strip_ethernet<'a>(&mut self, data: &'a [u8]) -> Option<&'a [u8]> {
        if data.len() < 14 {
            self.stats.malformed += 1;
            return None;
        }
        let mut ethertype = u16::from_be_bytes([data[12], data[13]]);
        let mut offset = 14;
        if ethertype == ETHERTYPE_VLAN || ethertype == ETHERTYPE_QINQ {
            if data.len() < 18 {
                self.stats.malformed += 1;
                return None;
            }
            ethertype = u16::from_be_bytes([data[16], data[17]]);
            offset = 18;
            if ethertype == ETHERTYPE_VLAN || ethertype == ETHERTYPE_QINQ {
                self.stats.unsupported_vlan += 1;
                return None;
            }
        }
        match ethertype {
            ETHERTYPE_IPV4 | ETHERTYPE_IPV6 => Some(&data[offset..]),
            _ => {
                self.stats.non_ip += 1;
                None
            }
        }
    }

    fn transport(&mut self, frame: &Frame, ip: IpLayer<'_>) -> Option<PacketRecord> {
        let (direction, internal) = classify_direction(ip.src, ip.dst, &self.local_prefixes);
        let mut rec = PacketRecord {
            ts: frame.ts,
            src_ip: ip.src,
            dst_ip: ip.dst,
            src_port: 0,
            dst_port: 0,
            transport: match ip.proto {
                PROTO_TCP => Transport::Tcp,
                PROTO_UDP => Transport::Udp,
                _ => Transport::Other,
            },
            direction,
            internal,
            payload_len: 0,
            tcp_seq: None,
            tcp_flags: 0,
            fragment: ip.fragment,
            tls: None,
        };

        if ip.fragment == Fragment::Subsequent {
            let key = ip.frag_key.expect("fragments carry a key");
            match self.fragments.get(&key) {
                Some(&(sp, dp)) => {
                    rec.src_port = sp;
                    rec.dst_port = dp;
                }
                None => self.stats.orphan_fragments += 1,
            }
            rec.payload_len = ip.body_len as u32;
            return Some(rec);
        }

        match rec.transport {
            Transport::Tcp => {
                let b = ip.body;
                if b.len() < 20 {
                    self.stats.malformed += 1;
                    return None;
                }
                let hdr_len = ((b[12] >> 4) as usize) * 4;
                if hdr_len < 20 || ip.body_len < hdr_len {
                    self.stats.malformed += 1;
                    return None;
                }
                rec.src_port = u16::from_be_bytes([b[0], b[1]]);
                rec.dst_port = u16::from_be_bytes([b[2], b[3]]);
                rec.tcp_seq = Some(u32::from_be_bytes([b[4], b[5], b[6], b[7]]));
                rec.tcp_flags = b[13];
                rec.payload_len = (ip.body_len - hdr_len) as u32;
                if rec.payload_len > 0 && b.len() > hdr_len {
                    let end = b.len().min(ip.body_len);
                    rec.tls = Some(parse_tls_client_hello(&b[hdr_len..end]));
                }
            }
            Transport::Udp => {
                let b = ip.body;
                if b.len() < 8 || ip.body_len < 8 {
                    self.stats.malformed += 1;
                    return None;
                }
                rec.src_port = u16::from_be_bytes([b[0], b[1]]);
                rec.dst_port = u16::from_be_bytes([b[2], b[3]]);
                rec.payload_len = (ip.body_len - 8) as u32;
            }
            Transport::Other => {
                rec.payload_len = ip.body_len as u32;
            }
        }

        if ip.fragment == Fragment::First && rec.transport != Transport::Other {
            if self.fragments.len() >= MAX_PENDING_FRAGMENTS {
                self.fragments.clear();
            }
            if let Some(key) = ip.frag_key {
                self.fragments.insert(key, (rec.src_port, rec.dst_port));
            }
        }
        Some(rec)
    }
}

fn parse_ip(data: &[u8]) -> Option<IpLayer<'_>> {
    match data.first()? >> 4 {
        4 => parse_ipv4(data),
        6 => parse_ipv6(data),
        _ => None,
    }
}

fn parse_ipv4(data: &[u8]) -> Option<IpLayer<'_>> {
    if data.len() < 20 {
        return None;
    }
    let ihl = ((data[0] & 0x0F) as usize) * 4;
    let total = u16::from_be_bytes([data[2], data[3]]) as usize;
    if ihl < 20 || total < ihl || data.len() < ihl {
        return None;
    }
    let id = u16::from_be_bytes([data[4], data[5]]) as u32;
    let flags_off = u16::from_be_bytes([data[6], data[7]]);
    let more_fragments = flags_off & 0x2000 != 0;
    let offset = flags_off & 0x1FFF;
    let proto = data[9];
    let src = IpAddr::V4(Ipv4Addr::new(data[12], data[13], data[14], data[15]));
    let dst = IpAddr::V4(Ipv4Addr::new(data[16], data[17], data[18], data[19]));
    let fragment = match (offset, more_fragments) {
        (0, false) => Fragment::Whole,
        (0, true) => Fragment::First,
        _ => Fragment::Subsequent,
    };
    let end = total.min(data.len());
    Some(IpLayer {
        src,
        dst,
        proto,
        body: &data[ihl..end],
        body_len: total - ihl,
        fragment,
        frag_key: (fragment != Fragment::Whole).then_some(FragKey { src, dst, proto, id }),
    })
}

fn parse_ipv6(data: &[u8]) -> Option<IpLayer<'_>> {
    if data.len() < 40 {
        return None;
    }
    let payload_len = u16::from_be_bytes([data[4], data[5]]) as usize;
    let mut next = data[6];
    let mut src = [0u8; 16];
    let mut dst = [0u8; 16];
    src.copy_from_slice(&data[8..24]);
    dst.copy_from_slice(&data[24..40]);
    let src = IpAddr::V6(Ipv6Addr::from(src));
    let dst = IpAddr::V6(Ipv6Addr::from(dst));

    let mut pos = 40usize;
    let end_declared = 40 + payload_len;
    let mut fragment = Fragment::Whole;
    let mut frag_id = 0u32;
    loop {
        match next {
            // hop-by-hop, routing, destination options
            0 | 43 | 60 => {
                let h = data.get(pos..pos + 2)?;
                next = h[0];
                pos += (h[1] as usize + 1) * 8;
            }
            44 => {
                let h = data.get(pos..pos + 8)?;
                next = h[0];
                let off_flags = u16::from_be_bytes([h[2], h[3]]);
                let offset = off_flags >> 3;
                let more = off_flags & 1 != 0;
                frag_id = u32::from_be_bytes([h[4], h[5], h[6], h[7]]);
                fragment = match (offset, more) {
                    (0, false) => Fragment::Whole,
                    (0, true) => Fragment::First,
                    _ => Fragment::Subsequent,
                };
                pos += 8;
            }
            _ => break,
        }
        if pos > end_declared {
            return None;
        }
    }
    let end = end_declared.min(data.len());
    if pos > end {
        return None;
    }
    Some(IpLayer {
        src,
        dst,
        proto: next,
        body: &data[pos..end],
        body_len: end_declared - pos,
        fragment,
        frag_key: (fragment != Fragment::Whole).then_some(FragKey { src, dst, proto: next, id: frag_id }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::Timestamp;

    fn nets(s: &[&str]) -> Vec<IpNet> {
        s.iter().map(|p| p.parse().unwrap()).collect()
    }

    fn ipv4_udp(src: [u8; 4], dst: [u8; 4], payload: usize, frag: u16, id: u16) -> Vec<u8> {
        let total = 20 + 8 + payload;
        let mut p = vec![0x45, 0];
        p.extend_from_slice(&(total as u16).to_be_bytes());
        p.extend_from_slice(&id.to_be_bytes());
        p.extend_from_slice(&frag.to_be_bytes());
        p.extend_from_slice(&[64, PROTO_UDP, 0, 0]);
        p.extend_from_slice(&src);
        p.extend_from_slice(&dst);
        p.extend_from_slice(&40000u16.to_be_bytes());
        p.extend_from_slice(&5055u16.to_be_bytes());
        p.extend_from_slice(&((8 + payload) as u16).to_be_bytes());
        p.extend_from_slice(&[0, 0]);
        p.resize(total, 0xAB);
        p
    }

    fn frame(data: Vec<u8>) -> Frame {
        let orig_len = data.len() as u32;
        Frame { ts: Timestamp(1), data, orig_len }
    }

    #[test]
    fn direction_examples() {
        let local = nets(&["10.0.0.0/8"]);
        let a: IpAddr = "10.0.0.5".parse().unwrap();
        let b: IpAddr = "52.1.2.3".parse().unwrap();
        assert_eq!(classify_direction(a, b, &local), (Direction::Upstream, false));
        assert_eq!(classify_direction(b, a, &local), (Direction::Downstream, false));
        let c: IpAddr = "10.9.9.9".parse().unwrap();
        assert_eq!(classify_direction(a, c, &local), (Direction::Upstream, true));
    }

    #[test]
    fn raw_udp_payload_length() {
        let mut p = PacketParser::new(LinkType::RawIp, nets(&["10.0.0.0/8"]));
        let r = p.parse(&frame(ipv4_udp([10, 0, 0, 1], [1, 2, 3, 4], 56, 0, 1))).unwrap();
        assert_eq!(r.transport, Transport::Udp);
        assert_eq!(r.payload_len, 56);
        assert_eq!(r.dst_port, 5055);
        assert!(r.is_upstream());
    }

    #[test]
    fn vlan_and_non_ip_frames() {
        let mut p = PacketParser::new(LinkType::Ethernet, nets(&["10.0.0.0/8"]));
        let ip = ipv4_udp([10, 0, 0, 1], [1, 2, 3, 4], 13, 0, 1);
        let mut eth = vec![0u8; 12];
        eth.extend_from_slice(&ETHERTYPE_VLAN.to_be_bytes());
        eth.extend_from_slice(&[0, 7]);
        eth.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
        eth.extend_from_slice(&ip);
        assert_eq!(p.parse(&frame(eth)).unwrap().payload_len, 13);

        let mut arp = vec![0u8; 12];
        arp.extend_from_slice(&0x0806u16.to_be_bytes());
        arp.extend_from_slice(&[0u8; 28]);
        assert!(p.parse(&frame(arp)).is_none());

        let mut qinq = vec![0u8; 12];
        qinq.extend_from_slice(&ETHERTYPE_QINQ.to_be_bytes());
        qinq.extend_from_slice(&[0, 1]);
        qinq.extend_from_slice(&ETHERTYPE_VLAN.to_be_bytes());
        qinq.extend_from_slice(&[0, 2, 8, 0]);
        qinq.extend_from_slice(&ip);
        assert!(p.parse(&frame(qinq)).is_none());
        assert_eq!(p.stats().non_ip, 1);
        assert_eq!(p.stats().unsupported_vlan, 1);
    }

    #[test]
    fn fragments_inherit_ports() {
        let mut p = PacketParser::new(LinkType::RawIp, nets(&["10.0.0.0/8"]));
        let first = p.parse(&frame(ipv4_udp([10, 0, 0, 1], [1, 2, 3, 4], 1472, 0x2000, 9))).unwrap();
        assert_eq!(first.fragment, Fragment::First);
        // Subsequent fragment: no UDP header, offset 185 (1480 bytes).
        let mut tail = ipv4_udp([10, 0, 0, 1], [1, 2, 3, 4], 0, 185, 9);
        tail.truncate(20);
        tail.extend_from_slice(&[0u8; 100]);
        tail[2..4].copy_from_slice(&120u16.to_be_bytes());
        let rest = p.parse(&frame(tail)).unwrap();
        assert_eq!(rest.fragment, Fragment::Subsequent);
        assert_eq!(rest.dst_port, 5055);
        assert_eq!(rest.payload_len, 100);
    }
}
