use super::{RecordKind, TlsMeta};

const CONTENT_CHANGE_CIPHER_SPEC: u8 = 20;
const CONTENT_ALERT: u8 = 21;
const CONTENT_HANDSHAKE: u8 = 22;
const CONTENT_APP_DATA: u8 = 23;
const HANDSHAKE_CLIENT_HELLO: u8 = 1;
const EXT_SERVER_NAME: u16 = 0;

/// Classifies a TCP payload by its leading TLS record and pulls the SNI out
/// of a client hello. Never fails: anything unparseable degrades to the
/// record kind implied by the first byte, or `None`.
pub fn parse_tls_client_hello(payload: &[u8]) -> TlsMeta {
    let Some(&content_type) = payload.first() else {
        return TlsMeta::none();
    };
    // A plausible record header has a 3.x version.
    let versioned = payload.len() < 2 || payload[1] == 3;
    let kind = match content_type {
        CONTENT_HANDSHAKE if versioned => {
            if payload.len() > 5 && payload[5] == HANDSHAKE_CLIENT_HELLO {
                RecordKind::ClientHello
            } else {
                RecordKind::OtherHandshake
            }
        }
        CONTENT_CHANGE_CIPHER_SPEC | CONTENT_ALERT if versioned => RecordKind::OtherHandshake,
        CONTENT_APP_DATA if versioned => RecordKind::AppData,
        _ => RecordKind::None,
    };
    if kind != RecordKind::ClientHello {
        return TlsMeta { record_kind: kind, sni: None };
    }
    TlsMeta { record_kind: RecordKind::ClientHello, sni: extract_sni(payload) }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn u8(&mut self) -> Option<u8> {
        let v = *self.buf.get(self.pos)?;
        self.pos += 1;
        Some(v)
    }

    fn u16(&mut self) -> Option<u16> {
        let b = self.take(2)?;
        Some(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u24(&mut self) -> Option<usize> {
        let b = self.take(3)?;
        Some(((b[0] as usize) << 16) | ((b[1] as usize) << 8) | b[2] as usize)
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn skip(&mut self, n: usize) -> Option<()> {
        self.take(n).map(|_| ())
    }
}

fn extract_sni(payload: &[u8]) -> Option<String> {
    let mut c = Cursor { buf: payload, pos: 0 };
    c.skip(3)?; // content type + version
    let record_len = c.u16()? as usize;
    // The hello may spill over into the next segment; parse what is here.
    let record_end = (5 + record_len).min(payload.len());
    let mut c = Cursor { buf: &payload[..record_end], pos: 5 };
    if c.u8()? != HANDSHAKE_CLIENT_HELLO {
        return None;
    }
    c.u24()?;
    c.skip(2 + 32)?; // legacy version + random
    let sid = c.u8()? as usize;
    c.skip(sid)?;
    let suites = c.u16()? as usize;
    c.skip(suites)?;
    let comp = c.u8()? as usize;
    c.skip(comp)?;
    let ext_total = c.u16()? as usize;
    let ext_end = c.pos.saturating_add(ext_total).min(c.buf.len());
    while c.pos + 4 <= ext_end {
        let ext_type = c.u16()?;
        let ext_len = c.u16()? as usize;
        let body = c.take(ext_len)?;
        if ext_type != EXT_SERVER_NAME {
            continue;
        }
        let mut e = Cursor { buf: body, pos: 0 };
        let list_len = e.u16()? as usize;
        let list_end = (2 + list_len).min(body.len());
        while e.pos + 3 <= list_end {
            let name_type = e.u8()?;
            let len = e.u16()? as usize;
            let name = e.take(len)?;
            if name_type == 0 && !name.is_empty() {
                return std::str::from_utf8(name)
                    .ok()
                    .filter(|s| s.bytes().all(|b| b.is_ascii_graphic()))
                    .map(str::to_ascii_lowercase);
            }
        }
        return None;
    }
    None
}
