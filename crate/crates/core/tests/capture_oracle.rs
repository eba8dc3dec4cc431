//! Generated traces read back through third-party pcap and header parsers
//! must agree field by field with our reader and parser.

use std::io::Cursor;
use std::net::IpAddr;

use etherparse::{LaxNetSlice, LaxSlicedPacket, TransportSlice};
use pcap_parser::traits::PcapReaderIterator;
use pcap_parser::{LegacyPcapReader, PcapBlockOwned, PcapError};

use vrscope::capture::{tcp_flags, FrameSource, PacketParser, PcapReader, Transport};
use vrscope::signatures::builtin_signature_set;
use vrscope::synth::{
    generate_corpus, session_user, write_pcap, BackgroundConfig, Profiles, Segment, SessionScript, SynthConfig,
};
use vrscope::session::StateLabel;

struct Oracle {
    ts_ns: u64,
    orig_len: u32,
    src: IpAddr,
    dst: IpAddr,
    src_port: u16,
    dst_port: u16,
    transport: Transport,
    payload_len: u32,
    tcp_seq: Option<u32>,
    flags: u8,
}

fn trace() -> Vec<u8> {
    let scripts: Vec<SessionScript> = ["Multiverse", "VRChat", "Rec Room", "AltSpaceVR"]
        .iter()
        .enumerate()
        .map(|(i, app)| {
            let segments = vec![Segment { state: StateLabel::HS, secs: 30.0 }, Segment { state: StateLabel::SUE, secs: 30.0 }];
            SessionScript::new(app, segments, 40 + i as u64, session_user(i))
        })
        .collect();
    let bg = BackgroundConfig { n_flows: 300, span_secs: 60.0, ..Default::default() };
    let c = generate_corpus(&scripts, &builtin_signature_set(), &Profiles::default(), &SynthConfig::default(), Some((&bg, 3)))
        .unwrap();
    write_pcap(&c.packets, Vec::new()).unwrap()
}

fn oracle(bytes: &[u8]) -> Vec<Oracle> {
    let mut reader = LegacyPcapReader::new(1 << 16, Cursor::new(bytes)).unwrap();
    let mut nanos = false;
    let mut out = Vec::new();
    loop {
        match reader.next() {
            Ok((offset, block)) => {
                match block {
                    PcapBlockOwned::LegacyHeader(h) => nanos = h.is_nanosecond_precision(),
                    PcapBlockOwned::Legacy(b) => {
                        let frac = if nanos { b.ts_usec as u64 } else { b.ts_usec as u64 * 1000 };
                        // frames carry headers only, so payload sizes come
                        // from the length fields
                        let pkt = LaxSlicedPacket::from_ethernet(b.data).unwrap();
                        let Some(LaxNetSlice::Ipv4(ip)) = pkt.net else { panic!("non-IPv4 frame") };
                        let h = ip.header();
                        let l4_len = h.total_len() as usize - h.slice().len();
                        let (src, dst) = (IpAddr::V4(h.source_addr()), IpAddr::V4(h.destination_addr()));
                        let rec = match pkt.transport {
                            Some(TransportSlice::Tcp(t)) => {
                                let flags = (t.fin() as u8 * tcp_flags::FIN)
                                    | (t.syn() as u8 * tcp_flags::SYN)
                                    | (t.rst() as u8 * tcp_flags::RST)
                                    | (t.psh() as u8 * tcp_flags::PSH)
                                    | (t.ack() as u8 * tcp_flags::ACK);
                                (t.source_port(), t.destination_port(), Transport::Tcp, l4_len - t.header_len(), Some(t.sequence_number()), flags)
                            }
                            Some(TransportSlice::Udp(u)) => {
                                (u.source_port(), u.destination_port(), Transport::Udp, u.length() as usize - 8, None, 0)
                            }
                            _ => panic!("unexpected transport"),
                        };
                        out.push(Oracle {
                            ts_ns: b.ts_sec as u64 * 1_000_000_000 + frac,
                            orig_len: b.origlen,
                            src,
                            dst,
                            src_port: rec.0,
                            dst_port: rec.1,
                            transport: rec.2,
                            payload_len: rec.3 as u32,
                            tcp_seq: rec.4,
                            flags: rec.5,
                        });
                    }
                    PcapBlockOwned::NG(_) => panic!("pcapng block in a legacy file"),
                }
                reader.consume(offset);
            }
            Err(PcapError::Eof) => break,
            Err(PcapError::Incomplete(_)) => reader.refill().unwrap(),
            Err(e) => panic!("{e:?}"),
        }
    }
    out
}

#[test]
fn pcap_round_trip_matches_independent_parsers() {
    let bytes = trace();
    let want = oracle(&bytes);
    assert!(want.len() > 1000);

    let mut src = PcapReader::new(Cursor::new(bytes)).unwrap();
    let mut parser = PacketParser::new(src.link_type(), vec!["10.0.0.0/8".parse().unwrap()]);
    let mut n = 0;
    let (mut tcp, mut udp) = (0, 0);
    while let Some(frame) = src.next_frame() {
        let o = &want[n];
        assert_eq!(frame.ts.as_nanos(), o.ts_ns, "frame {n}");
        assert_eq!(frame.orig_len, o.orig_len, "frame {n}");
        let r = parser.parse(&frame).unwrap_or_else(|| panic!("frame {n} unparsed"));
        assert_eq!((r.src_ip, r.dst_ip, r.src_port, r.dst_port), (o.src, o.dst, o.src_port, o.dst_port), "frame {n}");
        assert_eq!(r.transport, o.transport, "frame {n}");
        assert_eq!(r.payload_len, o.payload_len, "frame {n}");
        assert_eq!(r.tcp_seq, o.tcp_seq, "frame {n}");
        assert_eq!(r.tcp_flags, o.flags, "frame {n}");
        match r.transport {
            Transport::Tcp => tcp += 1,
            Transport::Udp => udp += 1,
            Transport::Other => panic!("frame {n}: unexpected transport"),
        }
        n += 1;
    }
    assert_eq!(n, want.len());
    assert_eq!(src.dropped_frames(), 0);
    assert!(tcp > 0 && udp > 0);
}
