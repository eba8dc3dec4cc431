use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::net::IpAddr;
use std::path::{Path, PathBuf};

use ipnet::IpNet;
use serde::{Deserialize, Serialize};

use super::evaluate::{to_samples, LabeledInterval};
use super::{FlowDetection, PipelineError};
use crate::classifier::write_interval_csv;
use crate::session::SessionReport;

/// One line of a report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReportLine {
    Flow(FlowDetection),
    Session(SessionReport),
}

/// JSON lines: flow detections first, then sessions, each in the order
/// given (run output is already sorted).
pub fn write_reports<W: Write>(mut w: W, detections: &[FlowDetection], sessions: &[SessionReport]) -> std::io::Result<()> {
    for d in detections {
        serde_json::to_writer(&mut w, &ReportLine::Flow(d.clone()))?;
        w.write_all(b"\n")?;
    }
    for s in sessions {
        serde_json::to_writer(&mut w, &ReportLine::Session(s.clone()))?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_reports<R: BufRead>(r: R) -> Result<(Vec<FlowDetection>, Vec<SessionReport>), PipelineError> {
    let mut flows = Vec::new();
    let mut sessions = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line).map_err(|e| PipelineError::BadReport(format!("line {}: {e}", i + 1)))? {
            ReportLine::Flow(d) => flows.push(d),
            ReportLine::Session(s) => sessions.push(s),
        }
    }
    Ok((flows, sessions))
}

/// Label for flows whose server address is not in the map.
pub const UNKNOWN_AS: &str = "UNKNOWN_AS";

/// CIDR to AS label, longest prefix wins.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AsMap {
    entries: Vec<(IpNet, String)>,
}

impl AsMap {
    pub fn from_entries(entries: impl IntoIterator<Item = (IpNet, String)>) -> AsMap {
        let mut entries: Vec<(IpNet, String)> = entries.into_iter().map(|(n, l)| (n.trunc(), l)).collect();
        entries.sort_by(|a, b| b.0.prefix_len().cmp(&a.0.prefix_len()).then(a.0.cmp(&b.0)));
        AsMap { entries }
    }

    /// CSV `cidr,as_label`; a `cidr,as_label` header line is optional.
    pub fn from_csv<R: std::io::Read>(r: R) -> Result<AsMap, PipelineError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).flexible(true).from_reader(r);
        let mut entries = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| PipelineError::BadAsMap(e.to_string()))?;
            let line = i + 1;
            if rec.len() == 1 && rec[0].is_empty() {
                continue;
            }
            if rec.len() != 2 {
                return Err(PipelineError::BadAsMap(format!("line {line}: expected 2 fields, found {}", rec.len())));
            }
            if i == 0 && rec[0].eq_ignore_ascii_case("cidr") {
                continue;
            }
            let net: IpNet = match rec[0].parse() {
                Ok(n) => n,
                Err(_) => match rec[0].parse::<IpAddr>() {
                    Ok(ip) => IpNet::from(ip),
                    Err(_) => return Err(PipelineError::BadAsMap(format!("line {line}: '{}' is not a CIDR", &rec[0]))),
                },
            };
            if rec[1].is_empty() {
                return Err(PipelineError::BadAsMap(format!("line {line}: empty AS label")));
            }
            entries.push((net, rec[1].to_string()));
        }
        Ok(AsMap::from_entries(entries))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<AsMap, PipelineError> {
        let f = std::fs::File::open(path.as_ref())
            .map_err(|e| PipelineError::BadAsMap(format!("{}: {e}", path.as_ref().display())))?;
        AsMap::from_csv(std::io::BufReader::new(f))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("cidr,as_label\n");
        for (n, l) in &self.entries {
            let _ = writeln!(s, "{n},{l}");
        }
        s
    }

    pub fn lookup(&self, ip: IpAddr) -> Option<&str> {
        self.entries.iter().find(|(n, _)| n.contains(&ip)).map(|(_, l)| l.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LatencyBucket {
    Under10,
    From10To20,
    From20To50,
    Over50,
}

impl LatencyBucket {
    pub const ALL: [LatencyBucket; 4] =
        [LatencyBucket::Under10, LatencyBucket::From10To20, LatencyBucket::From20To50, LatencyBucket::Over50];

    pub fn label(self) -> &'static str {
        match self {
            LatencyBucket::Under10 => "<10ms",
            LatencyBucket::From10To20 => "10-20ms",
            LatencyBucket::From20To50 => "20-50ms",
            LatencyBucket::Over50 => ">=50ms",
        }
    }
}

/// Lower bounds are inclusive: 10 ms goes to 10-20, 50 ms to the top one.
pub fn latency_bucket(rtt_ms: f64) -> LatencyBucket {
    if rtt_ms < 10.0 {
        LatencyBucket::Under10
    } else if rtt_ms < 20.0 {
        LatencyBucket::From10To20
    } else if rtt_ms < 50.0 {
        LatencyBucket::From20To50
    } else {
        LatencyBucket::Over50
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub as_label: String,
    /// Flows per bucket, in [`LatencyBucket::ALL`] order.
    pub counts: [u64; 4],
    /// Flows without an RTT estimate.
    pub unmeasured: u64,
}

impl LatencyRow {
    pub fn measured(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyTable {
    pub rows: Vec<LatencyRow>,
}

impl LatencyTable {
    pub fn row(&self, as_label: &str) -> Option<&LatencyRow> {
        self.rows.iter().find(|r| r.as_label == as_label)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("as_label");
        for b in LatencyBucket::ALL {
            s.push(',');
            s.push_str(b.label());
        }
        s.push_str(",unmeasured\n");
        for r in &self.rows {
            s.push_str(&r.as_label);
            for c in r.counts {
                let _ = write!(s, ",{c}");
            }
            let _ = writeln!(s, ",{}", r.unmeasured);
        }
        s
    }

    /// Counts with their share of the row's measured flows.
    pub fn table(&self) -> String {
        let mut s = format!("{:<24}", "AS");
        for b in LatencyBucket::ALL {
            let _ = write!(s, "{:>16}", b.label());
        }
        let _ = writeln!(s, "{:>12}", "unmeasured");
        for r in &self.rows {
            let _ = write!(s, "{:<24}", r.as_label);
            let total = r.measured().max(1) as f64;
            for c in r.counts {
                let _ = write!(s, "{:>16}", format!("{c} ({:.1}%)", 100.0 * c as f64 / total));
            }
            let _ = writeln!(s, "{:>12}", r.unmeasured);
        }
        s
    }
}

/// Flow counts per (AS of the server address, RTT bucket) over every flow
/// of every report.
pub fn report_latency_by_as(reports: &[SessionReport], as_map: &AsMap) -> LatencyTable {
    let mut rows: BTreeMap<String, LatencyRow> = BTreeMap::new();
    for f in reports.iter().flat_map(|r| &r.flows) {
        let label = as_map.lookup(f.key.dst_ip).unwrap_or(UNKNOWN_AS);
        let row = rows.entry(label.to_string()).or_insert_with(|| LatencyRow { as_label: label.to_string(), ..Default::default() });
        match f.rtt_ms {
            Some(ms) => row.counts[latency_bucket(ms) as usize] += 1,
            None => row.unmeasured += 1,
        }
    }
    LatencyTable { rows: rows.into_values().collect() }
}

fn file_stem_of(app: &str) -> String {
    app.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' }).collect()
}

/// Writes one training CSV per application (`<dir>/<app>.csv`, lower
/// case, spaces as dashes) and returns the paths.
pub fn write_interval_csvs(
    dir: impl AsRef<Path>,
    sessions: &[Vec<LabeledInterval>],
    n_past: usize,
) -> Result<Vec<(String, PathBuf)>, PipelineError> {
    std::fs::create_dir_all(dir.as_ref())?;
    let mut by_app: BTreeMap<&str, Vec<crate::classifier::IntervalSample>> = BTreeMap::new();
    for s in sessions {
        if let Some(first) = s.first() {
            by_app.entry(&first.app).or_default().extend(to_samples(s, n_past));
        }
    }
    let mut out = Vec::new();
    for (app, rows) in by_app {
        let path = dir.as_ref().join(format!("{}.csv", file_stem_of(app)));
        let f = std::io::BufWriter::new(std::fs::File::create(&path)?);
        write_interval_csv(f, &rows, n_past)?;
        out.push((app.to_string(), path));
    }
    Ok(out)
}
