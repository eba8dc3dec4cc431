//! Per-application activity-state classification: a bagged CART forest
//! over the interval attributes (stateless), a second forest that also sees
//! the session's previous states (stateful), and the confidence fallback
//! between the two.

mod dataset;
mod forest;
mod metrics;
mod sweep;
mod tree;

use std::collections::BTreeMap;

use thiserror::Error;

pub use dataset::{read_interval_csv, stateful_dataset, stateless_dataset, write_interval_csv, IntervalSample};
pub use forest::{
    label_space_of, train_forest, Dataset, FeatureSpec, ForestModel, Hyperparams, Prediction, DEPTH_RANGE,
    FOREST_MODEL_VERSION, MAX_FEATURES_RANGE, N_TREES_RANGE,
};
pub use metrics::{ClassScore, Confusion};
pub use sweep::{
    cross_validate_sessions, default_grid, stratified_folds, sweep_hyperparams, ClosedLoopResult, CvConfig,
    LabeledSession, SweepCell, SweepReport,
};
pub use tree::TreeNode;

use crate::session::{AttributeVector, Classification, IntervalClassifier, StateLabel};

/// Confidence threshold below which the stateful answer is discarded.
pub const DEFAULT_THRESHOLD: f64 = 0.85;
/// Threshold preset that scored best in the hyperparameter study.
pub const TUNED_THRESHOLD: f64 = 0.80;
pub const DEFAULT_PAST_STATES: usize = 5;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("label {0} is outside the model's label space")]
    LabelOutsideSpace(StateLabel),
    #[error("feature vector has {found} entries, model expects {expected}")]
    FeatureDimMismatch { expected: usize, found: usize },
    #[error("hyperparameters out of range: {0:?}")]
    InvalidHyperparams(Hyperparams),
    #[error("class {label} has {count} samples, fewer than the {k} folds")]
    InsufficientSamples { label: StateLabel, count: usize, k: usize },
    #[error("classifier model schema version {0:?} not supported")]
    SchemaMismatch(Option<u64>),
    #[error("corrupt classifier model: {0}")]
    CorruptModel(String),
    #[error("bad dataset: {0}")]
    BadDataset(String),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Stateful feature row: attributes, then one one-hot block per past
/// state, oldest first. Only the newest `n` states are used; missing ones
/// leave their block at zero.
pub fn stateful_features(attrs: &[f64], past: &[StateLabel], label_space: &[StateLabel], n: usize) -> Vec<f64> {
    let width = label_space.len();
    let mut row = Vec::with_capacity(attrs.len() + n * width);
    row.extend_from_slice(attrs);
    row.resize(attrs.len() + n * width, 0.0);
    let recent = &past[past.len().saturating_sub(n)..];
    let offset = n - recent.len();
    for (slot, state) in recent.iter().enumerate() {
        if let Some(j) = label_space.iter().position(|l| l == state) {
            row[attrs.len() + (offset + slot) * width + j] = 1.0;
        }
    }
    row
}

#[derive(Debug, Clone)]
pub struct AppModels {
    pub stateless: ForestModel,
    pub stateful: Option<ForestModel>,
}

/// The runtime classifier: per-application model pairs plus the fallback
/// rule.
#[derive(Debug, Clone)]
pub struct StateClassifier {
    models: BTreeMap<String, AppModels>,
    past_states: usize,
    threshold: f64,
}

impl StateClassifier {
    pub fn new(past_states: usize, threshold: f64) -> Self {
        StateClassifier { models: BTreeMap::new(), past_states, threshold }
    }

    pub fn with_app(mut self, app: &str, models: AppModels) -> Self {
        self.models.insert(app.to_string(), models);
        self
    }

    /// Groups loaded models by their `app` field and feature spec.
    pub fn from_models(models: Vec<ForestModel>, threshold: f64) -> Result<Self, ClassifierError> {
        let mut stateless: BTreeMap<String, ForestModel> = BTreeMap::new();
        let mut stateful: BTreeMap<String, ForestModel> = BTreeMap::new();
        let mut past = DEFAULT_PAST_STATES;
        for m in models {
            let app = m.app.clone().ok_or_else(|| ClassifierError::CorruptModel("model has no app".into()))?;
            match m.feature_spec {
                FeatureSpec::Stateless => {
                    stateless.insert(app, m);
                }
                FeatureSpec::Stateful { past: n } => {
                    past = n;
                    stateful.insert(app, m);
                }
            }
        }
        let mut out = StateClassifier::new(past, threshold);
        for (app, sl) in stateless {
            let sf = stateful.remove(&app);
            out.models.insert(app, AppModels { stateless: sl, stateful: sf });
        }
        if let Some(app) = stateful.keys().next() {
            return Err(ClassifierError::CorruptModel(format!("stateful model for {app} has no stateless partner")));
        }
        Ok(out)
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn past_states(&self) -> usize {
        self.past_states
    }

    pub fn apps(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }

    fn stateless(&self, m: &AppModels, attrs: &AttributeVector) -> Classification {
        match m.stateless.predict(attrs.as_slice()) {
            Ok(p) => Classification { state: p.label, confidence: p.confidence, stateless: true },
            Err(_) => Classification { state: StateLabel::UNKNOWN, confidence: 0.0, stateless: true },
        }
    }
}

impl IntervalClassifier for StateClassifier {
    fn classify(&self, app: &str, attrs: &AttributeVector, past: &[StateLabel]) -> Classification {
        let Some(m) = self.models.get(app) else {
            return Classification { state: StateLabel::UNKNOWN, confidence: 0.0, stateless: true };
        };
        let Some(sf) = &m.stateful else { return self.stateless(m, attrs) };
        if past.len() < self.past_states {
            return self.stateless(m, attrs);
        }
        let row = stateful_features(attrs.as_slice(), past, &sf.label_space, self.past_states);
        match sf.predict(&row) {
            Ok(p) if p.confidence >= self.threshold => {
                Classification { state: p.label, confidence: p.confidence, stateless: false }
            }
            _ => self.stateless(m, attrs),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_model(spec: FeatureSpec, n_features: usize, space: Vec<StateLabel>, votes: &[usize]) -> ForestModel {
        let width = space.len();
        ForestModel {
            version: FOREST_MODEL_VERSION,
            app: Some("Multiverse".into()),
            feature_spec: spec,
            n_features,
            label_space: space,
            hyperparams: Hyperparams { n_trees: votes.len().max(5), max_depth: 1, max_features: 2 },
            seed: 0,
            trees: votes
                .iter()
                .map(|&v| {
                    let mut counts = vec![0; width];
                    counts[v] = 1;
                    TreeNode::Leaf { counts }
                })
                .collect(),
        }
    }

    fn pair(stateful_votes: &[usize]) -> StateClassifier {
        let space = vec![StateLabel::HS, StateLabel::MH, StateLabel::SUE];
        let sl = leaf_model(FeatureSpec::Stateless, 40, space.clone(), &[0, 0, 0, 0, 0]);
        let sf = leaf_model(FeatureSpec::Stateful { past: 5 }, 40 + 15, space, stateful_votes);
        StateClassifier::from_models(vec![sl, sf], DEFAULT_THRESHOLD).unwrap()
    }

    #[test]
    fn one_hot_layout() {
        let space = [StateLabel::HS, StateLabel::MH, StateLabel::AT];
        let row = stateful_features(&[7.0], &[StateLabel::HS, StateLabel::AT, StateLabel::MH], &space, 2);
        assert_eq!(row, vec![7.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let padded = stateful_features(&[7.0], &[StateLabel::MH], &space, 2);
        assert_eq!(padded, vec![7.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn insufficient_history_uses_stateless() {
        let c = pair(&[2; 10]);
        let attrs = AttributeVector::default();
        let r = c.classify("Multiverse", &attrs, &[]);
        assert!(r.stateless);
        assert_eq!(r.state, StateLabel::HS);
        let r = c.classify("Multiverse", &attrs, &[StateLabel::HS; 4]);
        assert!(r.stateless);
    }

    #[test]
    fn confident_stateful_answer_is_used() {
        // 9 of 10 trees: 0.90 >= 0.85
        let c = pair(&[2, 2, 2, 2, 2, 2, 2, 2, 2, 1]);
        let r = c.classify("Multiverse", &AttributeVector::default(), &[StateLabel::MH; 5]);
        assert_eq!((r.state, r.stateless), (StateLabel::SUE, false));
        assert_eq!(r.confidence, 0.9);
    }

    #[test]
    fn unsure_stateful_answer_falls_back() {
        // 6 of 10 trees: 0.60 < 0.85
        let c = pair(&[2, 2, 2, 2, 2, 2, 1, 1, 1, 1]);
        let r = c.classify("Multiverse", &AttributeVector::default(), &[StateLabel::MH; 5]);
        let direct = c.models["Multiverse"].stateless.predict(&[0.0; 40]).unwrap();
        assert!(r.stateless);
        assert_eq!(r.state, direct.label);
    }

    #[test]
    fn thresholds_at_the_extremes() {
        let mut c = pair(&[2, 2, 1, 1, 0]);
        c.threshold = 0.0;
        assert!(!c.classify("Multiverse", &AttributeVector::default(), &[StateLabel::HS; 5]).stateless);
        c.threshold = 1.01;
        let mut all_agree = pair(&[2; 5]);
        all_agree.threshold = 1.01;
        assert!(c.classify("Multiverse", &AttributeVector::default(), &[StateLabel::HS; 5]).stateless);
        assert!(all_agree.classify("Multiverse", &AttributeVector::default(), &[StateLabel::HS; 5]).stateless);
    }

    #[test]
    fn unknown_app_is_unknown() {
        let c = pair(&[2; 5]);
        assert_eq!(c.classify("Nope", &AttributeVector::default(), &[]).state, StateLabel::UNKNOWN);
    }
}
