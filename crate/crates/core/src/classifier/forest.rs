use std::fs;
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{argmax, grow, TreeNode, TreeParams};
use super::ClassifierError;
use crate::session::StateLabel;

pub const FOREST_MODEL_VERSION: u32 = 1;

pub const N_TREES_RANGE: (usize, usize) = (5, 300);
pub const DEPTH_RANGE: (usize, usize) = (1, 16);
pub const MAX_FEATURES_RANGE: (usize, usize) = (2, 40);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Hyperparams {
    pub n_trees: usize,
    pub max_depth: usize,
    /// Features drawn as split candidates at each node.
    pub max_features: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams { n_trees: 50, max_depth: 10, max_features: 8 }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        let within = |v: usize, (lo, hi): (usize, usize)| (lo..=hi).contains(&v);
        if within(self.n_trees, N_TREES_RANGE)
            && within(self.max_depth, DEPTH_RANGE)
            && within(self.max_features, MAX_FEATURES_RANGE)
        {
            Ok(())
        } else {
            Err(ClassifierError::InvalidHyperparams(*self))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSpec {
    /// The forty interval attributes.
    Stateless,
    /// Attributes followed by `past` one-hot blocks over the label space.
    Stateful { past: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub label: StateLabel,
    /// Share of trees voting for `label`.
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub app: Option<String>,
    pub feature_spec: FeatureSpec,
    pub n_features: usize,
    /// Label order of leaf histograms; also the tie-break order.
    pub label_space: Vec<StateLabel>,
    pub hyperparams: Hyperparams,
    pub seed: u64,
    pub trees: Vec<TreeNode>,
}

/// Feature rows with their labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<StateLabel>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn push(&mut self, x: Vec<f64>, y: StateLabel) {
        self.x.push(x);
        self.y.push(y);
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset { x: idx.iter().map(|&i| self.x[i].clone()).collect(), y: idx.iter().map(|&i| self.y[i]).collect() }
    }
}

/// Sorted, de-duplicated labels of a dataset.
pub fn label_space_of(labels: &[StateLabel]) -> Vec<StateLabel> {
    let mut space = labels.to_vec();
    space.sort();
    space.dedup();
    space
}

/// Bagged CART forest. Tree `i` is grown from the `i`-th seed drawn from
/// the master seed, so the result does not depend on thread scheduling.
pub fn train_forest(
    data: &Dataset,
    label_space: &[StateLabel],
    feature_spec: FeatureSpec,
    hyper: Hyperparams,
    seed: u64,
) -> Result<ForestModel, ClassifierError> {
    if data.is_empty() {
        return Err(ClassifierError::EmptyDataset);
    }
    hyper.validate()?;
    let n_features = data.x[0].len();
    if let Some(bad) = data.x.iter().find(|r| r.len() != n_features) {
        return Err(ClassifierError::FeatureDimMismatch { expected: n_features, found: bad.len() });
    }
    let mut space = label_space.to_vec();
    space.sort();
    space.dedup();
    let y: Vec<usize> = data
        .y
        .iter()
        .map(|l| space.binary_search(l).map_err(|_| ClassifierError::LabelOutsideSpace(*l)))
        .collect::<Result<_, _>>()?;
    if label_space_of(&data.y).len() == 1 {
        warn!("SINGLE_CLASS_DATASET: every sample is {}; the model is constant", data.y[0]);
    }

    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let tree_seeds: Vec<u64> = (0..hyper.n_trees).map(|_| master.random()).collect();
    let params = TreeParams {
        max_depth: hyper.max_depth,
        max_features: hyper.max_features.min(n_features),
        n_labels: space.len(),
    };
    let n = data.len();
    let trees = tree_seeds
        .par_iter()
        .map(|&s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut samples: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            grow(&data.x, &y, &mut samples, &params, 0, &mut rng)
        })
        .collect();
    Ok(ForestModel {
        version: FOREST_MODEL_VERSION,
        app: None,
        feature_spec,
        n_features,
        label_space: space,
        hyperparams: hyper,
        seed,
        trees,
    })
}

impl ForestModel {
    /// Per-label vote counts.
    pub fn votes(&self, x: &[f64]) -> Result<Vec<u32>, ClassifierError> {
        if x.len() != self.n_features {
            return Err(ClassifierError::FeatureDimMismatch { expected: self.n_features, found: x.len() });
        }
        let mut votes = vec![0u32; self.label_space.len()];
        for t in &self.trees {
            votes[t.vote(x)] += 1;
        }
        Ok(votes)
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction, ClassifierError> {
        let votes = self.votes(x)?;
        let best = argmax(&votes);
        Ok(Prediction {
            label: self.label_space[best],
            confidence: votes[best] as f64 / self.trees.len().max(1) as f64,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("forest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<ForestModel, ClassifierError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ClassifierError::CorruptModel(e.to_string()))?;
        let version = value.get("version").and_then(|v| v.as_u64());
        if version != Some(FOREST_MODEL_VERSION as u64) {
            return Err(ClassifierError::SchemaMismatch(version));
        }
        let model: ForestModel =
            serde_json::from_value(value).map_err(|e| ClassifierError::CorruptModel(e.to_string()))?;
        model.check()?;
        Ok(model)
    }

    fn check(&self) -> Result<(), ClassifierError> {
        let mut problem = None;
        for t in &self.trees {
            t.visit(&mut |n| match n {
                TreeNode::Split { feature, .. } if *feature >= self.n_features => {
                    problem = Some(format!("split on feature {feature} of {}", self.n_features))
                }
                TreeNode::Leaf { counts } if counts.len() != self.label_space.len() => {
                    problem = Some("leaf histogram does not match the label space".into())
                }
                _ => {}
            });
        }
        if self.trees.is_empty() || self.label_space.is_empty() {
            problem = Some("empty forest".into());
        }
        match problem {
            Some(p) => Err(ClassifierError::CorruptModel(p)),
            None => Ok(()),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ClassifierError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ForestModel, ClassifierError> {
        ForestModel::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn blobs(seed: u64, n: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut d = Dataset::default();
        for i in 0..n {
            let (c, label) = if i % 2 == 0 { (-5.0, StateLabel::HS) } else { (5.0, StateLabel::SUE) };
            d.push(vec![c + noise.sample(&mut rng), c + noise.sample(&mut rng), noise.sample(&mut rng)], label);
        }
        d
    }

    #[test]
    fn separable_blobs_fit_perfectly() {
        let d = blobs(3, 200);
        let space = label_space_of(&d.y);
        let hyper = Hyperparams { n_trees: 50, max_depth: 8, max_features: 2 };
        let m = train_forest(&d, &space, FeatureSpec::Stateless, hyper, 11).unwrap();
        // nearest-centroid reference
        let centroid = |l: StateLabel| {
            let rows: Vec<&Vec<f64>> = d.x.iter().zip(&d.y).filter(|(_, y)| **y == l).map(|(x, _)| x).collect();
            (0..3).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64).collect::<Vec<_>>()
        };
        let (ch, cs) = (centroid(StateLabel::HS), centroid(StateLabel::SUE));
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        for (x, y) in d.x.iter().zip(&d.y) {
            let nearest = if dist(x, &ch) < dist(x, &cs) { StateLabel::HS } else { StateLabel::SUE };
            assert_eq!(nearest, *y);
            assert_eq!(m.predict(x).unwrap().label, *y);
        }
    }

    #[test]
    fn single_class_is_constant() {
        let mut d = Dataset::default();
        for i in 0..10 {
            d.push(vec![i as f64, 1.0], StateLabel::AT);
        }
        let m = train_forest(&d, &[StateLabel::AT], FeatureSpec::Stateless, Hyperparams { n_trees: 5, max_depth: 3, max_features: 2 }, 1)
            .unwrap();
        for v in [-100.0, 3.0, 1e9] {
            assert_eq!(m.predict(&[v, 0.0]).unwrap(), Prediction { label: StateLabel::AT, confidence: 1.0 });
        }
    }

    #[test]
    fn errors() {
        let d = Dataset::default();
        assert!(matches!(
            train_forest(&d, &[StateLabel::HS], FeatureSpec::Stateless, Hyperparams::default(), 0),
            Err(ClassifierError::EmptyDataset)
        ));
        let d = blobs(1, 10);
        assert!(matches!(
            train_forest(&d, &[StateLabel::HS], FeatureSpec::Stateless, Hyperparams::default(), 0),
            Err(ClassifierError::LabelOutsideSpace(StateLabel::SUE))
        ));
        let bad = Hyperparams { n_trees: 301, ..Hyperparams::default() };
        assert!(matches!(
            train_forest(&d, &label_space_of(&d.y), FeatureSpec::Stateless, bad, 0),
            Err(ClassifierError::InvalidHyperparams(_))
        ));
        let m = train_forest(&d, &label_space_of(&d.y), FeatureSpec::Stateless, Hyperparams::default(), 0).unwrap();
        assert!(matches!(m.predict(&[1.0]), Err(ClassifierError::FeatureDimMismatch { expected: 3, found: 1 })));
    }

    #[test]
    fn seeded_training_is_reproducible_and_round_trips() {
        let d = blobs(5, 120);
        let space = label_space_of(&d.y);
        let a = train_forest(&d, &space, FeatureSpec::Stateless, Hyperparams::default(), 99).unwrap();
        let b = train_forest(&d, &space, FeatureSpec::Stateless, Hyperparams::default(), 99).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let back = ForestModel::from_json(&a.to_json()).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.to_json(), a.to_json());
        let bumped = a.to_json().replacen("\"version\":1", "\"version\":7", 1);
        assert!(matches!(ForestModel::from_json(&bumped), Err(ClassifierError::SchemaMismatch(Some(7)))));
    }

    #[test]
    fn vote_share_arithmetic() {
        // 17 of 20 single-leaf trees vote SUE
        let leaf = |l: usize| TreeNode::Leaf { counts: if l == 0 { vec![1, 0] } else { vec![0, 1] } };
        let trees = (0..20).map(|i| leaf((i >= 3) as usize)).collect();
        let m = ForestModel {
            version: FOREST_MODEL_VERSION,
            app: None,
            feature_spec: FeatureSpec::Stateless,
            n_features: 1,
            label_space: vec![StateLabel::HS, StateLabel::SUE],
            hyperparams: Hyperparams { n_trees: 20, max_depth: 1, max_features: 2 },
            seed: 0,
            trees,
        };
        assert_eq!(m.predict(&[0.0]).unwrap(), Prediction { label: StateLabel::SUE, confidence: 0.85 });
    }

    #[test]
    fn even_split_goes_to_earlier_label() {
        let leaf = |l: usize| TreeNode::Leaf { counts: if l == 0 { vec![1, 0] } else { vec![0, 1] } };
        let m = ForestModel {
            version: FOREST_MODEL_VERSION,
            app: None,
            feature_spec: FeatureSpec::Stateless,
            n_features: 1,
            label_space: vec![StateLabel::MH, StateLabel::AT],
            hyperparams: Hyperparams { n_trees: 5, max_depth: 1, max_features: 2 },
            seed: 0,
            trees: vec![leaf(1), leaf(0), leaf(1), leaf(0)],
        };
        assert_eq!(m.predict(&[0.0]).unwrap().label, StateLabel::MH);
    }
}
