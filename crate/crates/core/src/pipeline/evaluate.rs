use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::net::IpAddr;

use serde::{Deserialize, Serialize};

use super::{FlowDetection, PipelineError};
use crate::classifier::{Confusion, IntervalSample};
use crate::flowtable::{DomainType, FlowKey};
use crate::session::{AttributeVector, IntervalRecord, SessionReport, StateLabel};
use crate::synth::{GroundTruthSidecar, TraceTruth};
use crate::time::secs_to_nanos;

/// Flow duration classes. Boundaries are half-open: 30.0 s is long,
/// 10.0 s is medium.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DurationBucket {
    Long,
    Med,
    Short,
}

impl DurationBucket {
    pub const ALL: [DurationBucket; 3] = [DurationBucket::Long, DurationBucket::Med, DurationBucket::Short];

    pub fn of(secs: f64) -> DurationBucket {
        if secs >= 30.0 {
            DurationBucket::Long
        } else if secs >= 10.0 {
            DurationBucket::Med
        } else {
            DurationBucket::Short
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            DurationBucket::Long => "Long",
            DurationBucket::Med => "Med.",
            DurationBucket::Short => "Short",
        }
    }
}

/// True positives out of the positives, false positives out of the
/// negatives when their number is known.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RateCell {
    pub tp: u64,
    pub positives: u64,
    pub fp: u64,
    pub negatives: Option<u64>,
}

impl RateCell {
    pub fn tp_rate(&self) -> Option<f64> {
        (self.positives > 0).then(|| self.tp as f64 / self.positives as f64)
    }

    pub fn fp_rate(&self) -> Option<f64> {
        self.negatives.map(|n| if n == 0 { 0.0 } else { self.fp as f64 / n as f64 })
    }

    /// `TP|FP`, with FP as a rate when negatives are known and as a count
    /// otherwise.
    pub fn tp_fp(&self) -> String {
        let tp = match self.tp_rate() {
            Some(r) => format!("{:.0}%", 100.0 * r),
            None => "-".into(),
        };
        match self.fp_rate() {
            Some(r) => format!("{tp}|{:.0}%", 100.0 * r),
            None => format!("{tp}|{}", self.fp),
        }
    }
}

/// A report paired with the ground-truth session it covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMatch {
    pub sidecar: usize,
    pub report: usize,
    /// Report start minus true session start, seconds.
    pub start_offset: f64,
    /// Every labeled interval agrees with the report timeline.
    pub timeline_exact: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Evaluation {
    /// Positives are the true sessions; FP counts reports that cover none.
    pub sessions: RateCell,
    pub flows: RateCell,
    pub flows_by_duration: BTreeMap<DurationBucket, RateCell>,
    pub intervals: Confusion,
    /// Labeled intervals after the end of the matching report.
    pub uncovered_intervals: u64,
    pub matches: Vec<SessionMatch>,
}

impl Evaluation {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "session  {}", self.sessions.tp_fp());
        let _ = writeln!(s, "flow     All {}  ({} FP)", self.flows.tp_fp(), self.flows.fp);
        for b in DurationBucket::ALL {
            if let Some(c) = self.flows_by_duration.get(&b) {
                let _ = writeln!(s, "flow     {} {}", b.label(), c.tp_fp());
            }
        }
        let exact = self.matches.iter().filter(|m| m.timeline_exact).count();
        let _ = writeln!(s, "timelines exact {exact}/{}, uncovered intervals {}", self.matches.len(), self.uncovered_intervals);
        if self.intervals.total() > 0 {
            s.push_str(&self.intervals.table());
        }
        s
    }
}

/// Sidecar index of an interval that starts at `start`, by its midpoint.
fn sidecar_index(side: &GroundTruthSidecar, start: f64, len: f64) -> Option<usize> {
    let idx = ((start + len / 2.0 - side.session_start) / len).floor();
    (idx >= 0.0 && (idx as usize) < side.intervals.len()).then_some(idx as usize)
}

fn overlaps(r: &SessionReport, s: &GroundTruthSidecar, slack: f64) -> bool {
    r.start <= s.session_end + slack && r.end >= s.script_start
}

fn check_interval_len(truth: &TraceTruth, interval_len: f64) -> Result<(), PipelineError> {
    for s in &truth.sessions {
        if (s.interval_len - interval_len).abs() > 1e-9 {
            return Err(PipelineError::SidecarMismatch(format!(
                "sidecar of {} {} uses {} s intervals, reports use {interval_len} s",
                s.app, s.user, s.interval_len
            )));
        }
    }
    Ok(())
}

/// Scores reports and flow detections against the truth of the trace.
///
/// A report of a (user, application) pair that has sidecars but overlaps
/// none of them means the truth does not belong to this run and fails with
/// a mismatch; any other unmatched report is a false positive.
pub fn evaluate(
    detections: &[FlowDetection],
    reports: &[SessionReport],
    truth: &TraceTruth,
    interval_len: f64,
) -> Result<Evaluation, PipelineError> {
    check_interval_len(truth, interval_len)?;
    let mut ev = Evaluation::default();

    let mut used = vec![false; reports.len()];
    let mut order: Vec<usize> = (0..truth.sessions.len()).collect();
    order.sort_by(|&a, &b| truth.sessions[a].session_start.total_cmp(&truth.sessions[b].session_start));
    for si in order {
        let side = &truth.sessions[si];
        let best = reports
            .iter()
            .enumerate()
            .filter(|(ri, r)| !used[*ri] && r.user == side.user && r.app == side.app && overlaps(r, side, interval_len))
            .min_by(|a, b| {
                (a.1.start - side.session_start).abs().total_cmp(&(b.1.start - side.session_start).abs())
            });
        let Some((ri, r)) = best else { continue };
        used[ri] = true;
        let mut exact = true;
        let mut covered = vec![false; side.intervals.len()];
        for e in &r.timeline {
            let start = r.start + e.interval as f64 * interval_len;
            let Some(idx) = sidecar_index(side, start, interval_len) else {
                exact = false;
                continue;
            };
            covered[idx] = true;
            ev.intervals.add(side.intervals[idx], e.state);
            exact &= side.intervals[idx] == e.state;
        }
        let missing = covered.iter().filter(|c| !**c).count() as u64;
        ev.uncovered_intervals += missing;
        ev.matches.push(SessionMatch {
            sidecar: si,
            report: ri,
            start_offset: r.start - side.session_start,
            timeline_exact: exact && missing == 0,
        });
    }
    ev.sessions.positives = truth.sessions.len() as u64;
    ev.sessions.tp = ev.matches.len() as u64;
    for (ri, r) in reports.iter().enumerate() {
        if used[ri] {
            continue;
        }
        let same_pair: Vec<&GroundTruthSidecar> =
            truth.sessions.iter().filter(|s| s.user == r.user && s.app == r.app).collect();
        if !same_pair.is_empty() && !same_pair.iter().any(|s| overlaps(r, s, interval_len)) {
            return Err(PipelineError::SidecarMismatch(format!(
                "{} session of {} at {:.3} is not covered by any sidecar",
                r.app, r.user, r.start
            )));
        }
        ev.sessions.fp += 1;
    }

    // flows
    let mut truth_flows: HashMap<FlowKey, (&GroundTruthSidecar, usize)> = HashMap::new();
    for s in &truth.sessions {
        for (i, f) in s.flows.iter().enumerate() {
            truth_flows.insert(f.key, (s, i));
        }
    }
    let mut by_key: HashMap<FlowKey, Vec<&FlowDetection>> = HashMap::new();
    for d in detections {
        by_key.entry(d.key).or_default().push(d);
    }
    let negatives = truth.background.as_ref().map(|b| b.flows());
    ev.flows.negatives = negatives;
    for b in DurationBucket::ALL {
        ev.flows_by_duration.insert(b, RateCell::default());
    }
    for (key, (side, i)) in &truth_flows {
        let f = &side.flows[*i];
        let hit = by_key.get(key).is_some_and(|ds| {
            ds.iter().any(|d| {
                d.app == side.app
                    && d.domain_type == f.domain_type
                    && (f.domain_type == DomainType::TimeCritical || d.prefix == f.prefix)
            })
        });
        let bucket = ev.flows_by_duration.get_mut(&DurationBucket::of(f.duration())).expect("all buckets present");
        bucket.positives += 1;
        ev.flows.positives += 1;
        if hit {
            bucket.tp += 1;
            ev.flows.tp += 1;
        }
    }
    for d in detections {
        let correct = truth_flows.get(&d.key).is_some_and(|(side, i)| {
            let f = &side.flows[*i];
            d.app == side.app && d.domain_type == f.domain_type
        });
        if !correct {
            ev.flows.fp += 1;
            ev.flows_by_duration.get_mut(&DurationBucket::of(d.duration())).expect("all buckets present").fp += 1;
        }
    }
    Ok(ev)
}

/// One classified interval with its true state.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledInterval {
    pub app: String,
    pub user: IpAddr,
    pub session_start: f64,
    pub index: u64,
    pub attrs: AttributeVector,
    pub label: StateLabel,
    pub predicted: StateLabel,
}

/// Attaches sidecar labels to closed intervals, grouped per session in
/// interval order. Intervals of sessions without a sidecar, or outside the
/// labeled span, are left out.
pub fn label_intervals(
    records: &[IntervalRecord],
    truth: &TraceTruth,
    interval_len: f64,
) -> Result<Vec<Vec<LabeledInterval>>, PipelineError> {
    check_interval_len(truth, interval_len)?;
    let step = secs_to_nanos(interval_len);
    let mut groups: BTreeMap<(IpAddr, &str, u64), Vec<&IntervalRecord>> = BTreeMap::new();
    for r in records {
        let start = r.start.0 - r.index * step;
        groups.entry((r.user, &r.app, start)).or_default().push(r);
    }
    let mut out = Vec::new();
    for ((user, app, start_ns), mut recs) in groups {
        recs.sort_by_key(|r| r.index);
        let start = start_ns as f64 / 1e9;
        let side = truth
            .sessions
            .iter()
            .filter(|s| s.user == user && s.app == app && start >= s.script_start - interval_len && start <= s.session_end)
            .min_by(|a, b| (a.session_start - start).abs().total_cmp(&(b.session_start - start).abs()));
        let Some(side) = side else { continue };
        let session: Vec<LabeledInterval> = recs
            .into_iter()
            .filter_map(|r| {
                let idx = sidecar_index(side, r.start.as_secs_f64(), interval_len)?;
                Some(LabeledInterval {
                    app: app.to_string(),
                    user,
                    session_start: start,
                    index: r.index,
                    attrs: r.attributes.clone(),
                    label: side.intervals[idx],
                    predicted: r.state,
                })
            })
            .collect();
        if !session.is_empty() {
            out.push(session);
        }
    }
    Ok(out)
}

/// Training rows of one session; the past states are the true ones.
pub(crate) fn to_samples(session: &[LabeledInterval], n_past: usize) -> Vec<IntervalSample> {
    session
        .iter()
        .enumerate()
        .map(|(i, r)| IntervalSample {
            attrs: r.attrs.clone(),
            past: session[i.saturating_sub(n_past)..i].iter().map(|p| p.label).collect(),
            label: r.label,
        })
        .collect()
}
