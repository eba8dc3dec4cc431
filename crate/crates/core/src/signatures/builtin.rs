use super::{MetaverseSignatures, PrimaryEntry, SignatureSet, UdpEntry};

fn entry(
    name: &str,
    domain: &str,
    initial: &[&str],
    primaries: &[(&str, &[u32])],
    udp: &[(u16, &[u32])],
) -> MetaverseSignatures {
    MetaverseSignatures {
        name: name.to_string(),
        domain: domain.to_string(),
        initial_hs_prefixes: initial.iter().map(|s| s.to_string()).collect(),
        primaries: primaries.iter().map(|(p, s)| PrimaryEntry { prefix: p.to_string(), seq: s.to_vec() }).collect(),
        udp: udp.iter().map(|(port, s)| UdpEntry { port: *port, seq: s.to_vec() }).collect(),
    }
}

/// Signatures measured for the four studied applications. Used as the
/// default model and as the generator's ground truth.
pub fn builtin_signature_set() -> SignatureSet {
    SignatureSet {
        metaverses: vec![
            entry(
                "Multiverse",
                "shapevrcloud",
                &["prod", "prodblobs"],
                &[
                    ("prod", &[414, 75, 6, 45, 338]),
                    ("prod", &[414, 75, 6, 45, 591]),
                    ("prodblobs", &[419, 75, 6, 45, 284]),
                ],
                &[(5055, &[56, 86, 32, 143]), (5056, &[56, 56, 85, 159]), (5058, &[56, 86, 159, 174])],
            ),
            entry(
                "VRChat",
                "vrchat",
                &["api", "pipeline", "assets"],
                &[
                    ("api", &[409, 75, 6, 45, 235]),
                    ("pipeline", &[244, 134, 490]),
                    ("assets", &[410, 75, 6, 45, 305]),
                ],
                &[(5055, &[60, 60, 34, 69]), (5056, &[60, 89, 163, 36, 1200]), (5058, &[60, 89, 163, 68])],
            ),
            entry(
                "Rec Room",
                "rec",
                &["api", "auth"],
                &[
                    ("api", &[148, 75, 51, 204]),
                    ("api", &[148, 75, 51, 205]),
                    ("api", &[148, 75, 51, 253]),
                    ("auth", &[149, 75, 51, 216]),
                ],
                &[(5055, &[13, 13, 13, 13, 13]), (5056, &[56, 32, 65, 65]), (5058, &[56, 32, 65, 32])],
            ),
            entry(
                "AltSpaceVR",
                "altvr",
                &["config", "cdn-content-ingress", "account"],
                &[
                    ("config", &[409, 75, 6, 45, 269]),
                    ("cdn-content-ingress", &[422, 107, 6, 45, 276]),
                    ("account", &[410, 107, 6, 45, 239]),
                ],
                &[(5055, &[56, 85, 32, 143, 32, 1196]), (5056, &[56, 85, 163, 44, 1196])],
            ),
        ],
        ..SignatureSet::default()
    }
}
