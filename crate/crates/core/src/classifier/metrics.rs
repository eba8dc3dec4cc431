use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::session::StateLabel;

/// Per-class true- and false-positive rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub label: StateLabel,
    /// Share of this class's samples predicted as this class.
    pub tp: f64,
    /// Share of other classes' samples predicted as this class.
    pub fp: f64,
    pub support: u64,
}

impl ClassScore {
    /// `TP%|FP%`, the customary way of reporting detection accuracy.
    pub fn tp_fp(&self) -> String {
        format!("{:.1}%|{:.1}%", self.tp * 100.0, self.fp * 100.0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    /// (actual, predicted) -> count
    counts: BTreeMap<(StateLabel, StateLabel), u64>,
}

impl Confusion {
    pub fn add(&mut self, actual: StateLabel, predicted: StateLabel) {
        *self.counts.entry((actual, predicted)).or_default() += 1;
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (k, v) in &other.counts {
            *self.counts.entry(*k).or_default() += v;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn count(&self, actual: StateLabel, predicted: StateLabel) -> u64 {
        self.counts.get(&(actual, predicted)).copied().unwrap_or(0)
    }

    /// Labels occurring as actual classes.
    pub fn classes(&self) -> Vec<StateLabel> {
        let mut v: Vec<StateLabel> = self.counts.keys().map(|(a, _)| *a).collect();
        v.dedup();
        v
    }

    pub fn accuracy(&self) -> f64 {
        let correct: u64 = self.counts.iter().filter(|((a, p), _)| a == p).map(|(_, v)| v).sum();
        match self.total() {
            0 => 0.0,
            t => correct as f64 / t as f64,
        }
    }

    pub fn score(&self, label: StateLabel) -> ClassScore {
        let mut support = 0;
        let mut hit = 0;
        let mut others = 0;
        let mut false_pos = 0;
        for (&(a, p), &n) in &self.counts {
            if a == label {
                support += n;
                if p == label {
                    hit += n;
                }
            } else {
                others += n;
                if p == label {
                    false_pos += n;
                }
            }
        }
        let ratio = |x: u64, y: u64| if y == 0 { 0.0 } else { x as f64 / y as f64 };
        ClassScore { label, tp: ratio(hit, support), fp: ratio(false_pos, others), support }
    }

    pub fn scores(&self) -> Vec<ClassScore> {
        self.classes().into_iter().map(|l| self.score(l)).collect()
    }

    pub fn mean_tp(&self) -> f64 {
        mean(self.scores().iter().map(|s| s.tp))
    }

    pub fn mean_fp(&self) -> f64 {
        mean(self.scores().iter().map(|s| s.fp))
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        for s in self.scores() {
            let _ = writeln!(out, "{:<8}{:>16}  n={}", s.label.as_str(), s.tp_fp(), s.support);
        }
        out
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
