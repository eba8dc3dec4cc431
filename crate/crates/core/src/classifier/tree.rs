use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// A CART node. `x[feature] <= threshold` goes left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "lowercase")]
pub enum TreeNode {
    Split { feature: usize, threshold: f64, left: Box<TreeNode>, right: Box<TreeNode> },
    /// Training samples per label index that reached this leaf.
    Leaf { counts: Vec<u32> },
}

impl TreeNode {
    pub fn leaf<'a>(&'a self, x: &[f64]) -> &'a [u32] {
        let mut node = self;
        loop {
            match node {
                TreeNode::Split { feature, threshold, left, right } => {
                    node = if x[*feature] <= *threshold { left } else { right };
                }
                TreeNode::Leaf { counts } => return counts,
            }
        }
    }

    /// The label index this tree votes for; ties go to the lower index.
    pub fn vote(&self, x: &[f64]) -> usize {
        argmax(self.leaf(x))
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
            TreeNode::Leaf { .. } => 0,
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a TreeNode)) {
        f(self);
        if let TreeNode::Split { left, right, .. } = self {
            left.visit(f);
            right.visit(f);
        }
    }
}

pub(crate) fn argmax(counts: &[u32]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

pub(crate) struct TreeParams {
    pub max_depth: usize,
    pub max_features: usize,
    pub n_labels: usize,
}

/// Grows one tree on the given sample indices (duplicates allowed).
pub(crate) fn grow<R: Rng>(
    x: &[Vec<f64>],
    y: &[usize],
    samples: &mut [usize],
    params: &TreeParams,
    depth: usize,
    rng: &mut R,
) -> TreeNode {
    let mut counts = vec![0u32; params.n_labels];
    for &i in samples.iter() {
        counts[y[i]] += 1;
    }
    let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
    if pure || depth >= params.max_depth || samples.len() < 2 {
        return TreeNode::Leaf { counts };
    }
    let Some((feature, threshold)) = best_split(x, y, samples, &counts, params, rng) else {
        return TreeNode::Leaf { counts };
    };
    // Stable partition keeps the training deterministic.
    let (mut left, mut right): (Vec<usize>, Vec<usize>) =
        samples.iter().partition(|&&i| x[i][feature] <= threshold);
    let l = grow(x, y, &mut left, params, depth + 1, rng);
    let r = grow(x, y, &mut right, params, depth + 1, rng);
    TreeNode::Split { feature, threshold, left: Box::new(l), right: Box::new(r) }
}

/// Gini-optimal split over a random feature order. At least
/// `max_features` features are inspected, more if none of those admits a
/// split at all.
fn best_split<R: Rng>(
    x: &[Vec<f64>],
    y: &[usize],
    samples: &[usize],
    parent: &[u32],
    params: &TreeParams,
    rng: &mut R,
) -> Option<(usize, f64)> {
    let n_features = x[samples[0]].len();
    let mut order: Vec<usize> = (0..n_features).collect();
    order.shuffle(rng);

    let n = samples.len() as f64;
    let mut best: Option<(f64, usize, f64)> = None;
    let mut column: Vec<(f64, usize)> = Vec::with_capacity(samples.len());
    let mut left = vec![0u32; params.n_labels];
    for (inspected, &f) in order.iter().enumerate() {
        if inspected >= params.max_features && best.is_some() {
            break;
        }
        column.clear();
        column.extend(samples.iter().map(|&i| (x[i][f], y[i])));
        column.sort_by(|a, b| a.0.total_cmp(&b.0));
        if column[0].0 == column[column.len() - 1].0 {
            continue;
        }
        left.iter_mut().for_each(|c| *c = 0);
        // Maximizing sum(l_c^2)/n_l + sum(r_c^2)/n_r minimizes weighted Gini.
        let mut sq_left = 0.0f64;
        let mut sq_right: f64 = parent.iter().map(|&c| (c as f64) * (c as f64)).sum();
        for k in 0..column.len() - 1 {
            let c = column[k].1;
            let l_before = left[c] as f64;
            let r_before = (parent[c] - left[c]) as f64;
            left[c] += 1;
            sq_left += 2.0 * l_before + 1.0;
            sq_right -= 2.0 * r_before - 1.0;
            let (a, b) = (column[k].0, column[k + 1].0);
            if a == b {
                continue;
            }
            let nl = (k + 1) as f64;
            let score = sq_left / nl + sq_right / (n - nl);
            if best.is_none_or(|(s, _, _)| score > s) {
                let mid = a + (b - a) / 2.0;
                let threshold = if mid < b { mid } else { a };
                best = Some((score, f, threshold));
            }
        }
    }
    best.map(|(_, f, t)| (f, t))
}
