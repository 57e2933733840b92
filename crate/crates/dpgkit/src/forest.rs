//! Random forests over CART trees with axis-aligned splits: Gini impurity
//! for binary classification, variance reduction for regression.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ForestError {
    #[error("need at least 2 training rows, got {0}")]
    TooFewRows(usize),
    #[error("row {row} has {got} features, expected {expected}")]
    RaggedRows {
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("non-finite feature value in row {0}")]
    NonFinite(usize),
}

/// Forest hyperparameters. `features_per_split = None` means `ceil(sqrt(F))`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RfParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for RfParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 12,
            min_leaf: 2,
            features_per_split: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    /// Class probabilities (classification) or `[mean]` (regression).
    Leaf(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    nodes: Vec<TreeNode>,
}

impl DecisionTree {
    /// Walks the tree; `x[feature] <= threshold` goes left.
    pub fn eval(&self, x: &[f64]) -> &[f64] {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                TreeNode::Leaf(v) => return v,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    idx = if x[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ForestKind {
    Classifier,
    Regressor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RandomForest {
    trees: Vec<DecisionTree>,
    pub n_features: usize,
    pub kind: ForestKind,
    /// Set when the training data had a single class (or constant target);
    /// the forest then predicts a constant.
    pub degenerate: bool,
    pub params: RfParams,
}

impl RandomForest {
    /// Mean over trees of the leaf value: P(positive) for classifiers, the
    /// leaf mean target for regressors.
    pub fn predict(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.n_features);
        let sum: f64 = self
            .trees
            .iter()
            .map(|t| {
                let leaf = t.eval(x);
                match self.kind {
                    ForestKind::Classifier => leaf[1],
                    ForestKind::Regressor => leaf[0],
                }
            })
            .sum();
        sum / self.trees.len() as f64
    }

    /// Full leaf distribution averaged over trees (classification).
    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let width = match self.kind {
            ForestKind::Classifier => 2,
            ForestKind::Regressor => 1,
        };
        let mut acc = vec![0.0; width];
        for t in &self.trees {
            for (a, v) in acc.iter_mut().zip(t.eval(x)) {
                *a += v;
            }
        }
        for a in &mut acc {
            *a /= self.trees.len() as f64;
        }
        acc
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }
}

fn validate_rows(features: &[Vec<f64>], n_targets: usize) -> Result<usize, ForestError> {
    if features.len() < 2 || n_targets != features.len() {
        return Err(ForestError::TooFewRows(features.len().min(n_targets)));
    }
    let width = features[0].len();
    for (row, f) in features.iter().enumerate() {
        if f.len() != width {
            return Err(ForestError::RaggedRows {
                row,
                expected: width,
                got: f.len(),
            });
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(ForestError::NonFinite(row));
        }
    }
    Ok(width)
}

/// Per-tree rng seed; decouples tree identity from thread scheduling.
fn tree_seed(seed: u64, tree_idx: usize) -> u64 {
    crate::rngutil::derive_seed(seed, tree_idx as u64)
}

/// Trains a binary classifier: each tree fits a bootstrap resample, splits
/// minimize Gini impurity among a random feature subset.
pub fn train_classifier(
    features: &[Vec<f64>],
    labels: &[bool],
    params: &RfParams,
) -> Result<RandomForest, ForestError> {
    let n_features = validate_rows(features, labels.len())?;
    let targets: Vec<f64> = labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let degenerate = labels.iter().all(|&l| l) || labels.iter().all(|&l| !l);
    train_inner(
        features,
        &targets,
        params,
        n_features,
        ForestKind::Classifier,
        degenerate,
    )
}

/// Trains a regression forest: leaves hold mean targets, splits minimize
/// the summed squared deviation of the children.
pub fn train_regressor(
    features: &[Vec<f64>],
    targets: &[f64],
    params: &RfParams,
) -> Result<RandomForest, ForestError> {
    let n_features = validate_rows(features, targets.len())?;
    let first = targets[0];
    let degenerate = targets.iter().all(|&t| t == first);
    train_inner(
        features,
        targets,
        params,
        n_features,
        ForestKind::Regressor,
        degenerate,
    )
}

fn train_inner(
    features: &[Vec<f64>],
    targets: &[f64],
    params: &RfParams,
    n_features: usize,
    kind: ForestKind,
    degenerate: bool,
) -> Result<RandomForest, ForestError> {
    let mtry = params
        .features_per_split
        .unwrap_or_else(|| (n_features as f64).sqrt().ceil() as usize)
        .clamp(1, n_features);

    let trees: Vec<DecisionTree> = (0..params.n_trees.max(1))
        .into_par_iter()
        .map(|tree_idx| {
            let mut rng = StdRng::seed_from_u64(tree_seed(params.seed, tree_idx));
            let rows: Vec<usize> = if params.bootstrap {
                (0..features.len())
                    .map(|_| rng.random_range(0..features.len()))
                    .collect()
            } else {
                (0..features.len()).collect()
            };
            let mut builder = TreeBuilder {
                features,
                targets,
                kind,
                mtry,
                max_depth: params.max_depth,
                min_leaf: params.min_leaf.max(1),
                n_features,
                nodes: Vec::new(),
            };
            builder.grow(rows, 0, &mut rng);
            DecisionTree {
                nodes: builder.nodes,
            }
        })
        .collect();

    Ok(RandomForest {
        trees,
        n_features,
        kind,
        degenerate,
        params: params.clone(),
    })
}

struct TreeBuilder<'a> {
    features: &'a [Vec<f64>],
    targets: &'a [f64],
    kind: ForestKind,
    mtry: usize,
    max_depth: usize,
    min_leaf: usize,
    n_features: usize,
    nodes: Vec<TreeNode>,
}

impl TreeBuilder<'_> {
    fn leaf_value(&self, rows: &[usize]) -> Vec<f64> {
        match self.kind {
            ForestKind::Classifier => {
                let pos = rows.iter().filter(|&&r| self.targets[r] > 0.5).count() as f64;
                let n = rows.len() as f64;
                vec![(n - pos) / n, pos / n]
            }
            ForestKind::Regressor => {
                let mean = rows.iter().map(|&r| self.targets[r]).sum::<f64>() / rows.len() as f64;
                vec![mean]
            }
        }
    }

    /// Node impurity times node size: Gini weight or squared deviations.
    fn weighted_impurity(&self, count: f64, sum: f64, sum_sq: f64) -> f64 {
        if count == 0.0 {
            return 0.0;
        }
        match self.kind {
            // 2 * n * p * (1-p) written via sums (targets are 0/1).
            ForestKind::Classifier => 2.0 * sum * (count - sum) / count,
            ForestKind::Regressor => sum_sq - sum * sum / count,
        }
    }

    fn grow(&mut self, rows: Vec<usize>, depth: usize, rng: &mut StdRng) -> usize {
        let node_idx = self.nodes.len();
        self.nodes.push(TreeNode::Leaf(Vec::new())); // placeholder

        let split = if depth < self.max_depth && rows.len() >= 2 * self.min_leaf {
            self.best_split(&rows, rng)
        } else {
            None
        };

        match split {
            None => {
                self.nodes[node_idx] = TreeNode::Leaf(self.leaf_value(&rows));
            }
            Some((feature, threshold)) => {
                let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
                    .into_iter()
                    .partition(|&r| self.features[r][feature] <= threshold);
                let left = self.grow(left_rows, depth + 1, rng);
                let right = self.grow(right_rows, depth + 1, rng);
                self.nodes[node_idx] = TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                };
            }
        }
        node_idx
    }

    fn best_split(&self, rows: &[usize], rng: &mut StdRng) -> Option<(usize, f64)> {
        let mut candidates: Vec<usize> =
            rand::seq::index::sample(rng, self.n_features, self.mtry).into_vec();
        candidates.sort_unstable();

        let parent = {
            let count = rows.len() as f64;
            let sum: f64 = rows.iter().map(|&r| self.targets[r]).sum();
            let sum_sq: f64 = rows.iter().map(|&r| self.targets[r].powi(2)).sum();
            self.weighted_impurity(count, sum, sum_sq)
        };

        let mut best: Option<(f64, usize, f64)> = None; // (impurity, feature, threshold)
        for &feature in &candidates {
            let mut order: Vec<usize> = rows.to_vec();
            order.sort_by(|&a, &b| {
                self.features[a][feature]
                    .partial_cmp(&self.features[b][feature])
                    .expect("finite features")
            });

            let total_count = order.len() as f64;
            let total_sum: f64 = order.iter().map(|&r| self.targets[r]).sum();
            let total_sq: f64 = order.iter().map(|&r| self.targets[r].powi(2)).sum();

            let mut left_count = 0.0;
            let mut left_sum = 0.0;
            let mut left_sq = 0.0;
            for window in 0..order.len() - 1 {
                let r = order[window];
                left_count += 1.0;
                left_sum += self.targets[r];
                left_sq += self.targets[r].powi(2);

                let value = self.features[r][feature];
                let next_value = self.features[order[window + 1]][feature];
                if value == next_value {
                    continue;
                }
                let left_n = window + 1;
                let right_n = order.len() - left_n;
                if left_n < self.min_leaf || right_n < self.min_leaf {
                    continue;
                }
                let impurity = self.weighted_impurity(left_count, left_sum, left_sq)
                    + self.weighted_impurity(
                        total_count - left_count,
                        total_sum - left_sum,
                        total_sq - left_sq,
                    );
                let threshold = (value + next_value) / 2.0;
                let better = match best {
                    None => impurity < parent - 1e-12,
                    Some((b, _, _)) => impurity < b - 1e-12,
                };
                if better {
                    best = Some((impurity, feature, threshold));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(n_trees: usize, bootstrap: bool) -> RfParams {
        RfParams {
            n_trees,
            bootstrap,
            seed: 7,
            ..RfParams::default()
        }
    }

    #[test]
    fn all_positive_labels_give_constant_one() {
        let features = vec![vec![0.1], vec![0.5], vec![0.9]];
        let labels = vec![true, true, true];
        let forest = train_classifier(&features, &labels, &params(10, true)).unwrap();
        assert!(forest.degenerate);
        assert_eq!(forest.predict(&[0.3]), 1.0);
        assert_eq!(forest.predict(&[0.99]), 1.0);
    }

    #[test]
    fn single_split_matches_hand_traced_cart() {
        // Four 1-D points: {0.0, 0.1} negative, {0.9, 1.0} positive. Gini
        // is minimized at the midpoint threshold (0.1+0.9)/2 = 0.5 with
        // pure leaves, so p(positive) is 0 left of it and 1 right of it.
        let features = vec![vec![0.0], vec![0.1], vec![0.9], vec![1.0]];
        let labels = vec![false, false, true, true];
        let p = RfParams {
            n_trees: 1,
            max_depth: 1,
            min_leaf: 1,
            features_per_split: Some(1),
            bootstrap: false,
            seed: 0,
        };
        let forest = train_classifier(&features, &labels, &p).unwrap();
        assert_eq!(forest.predict(&[0.3]), 0.0);
        assert_eq!(forest.predict(&[0.5]), 0.0); // boundary goes left
        assert_eq!(forest.predict(&[0.7]), 1.0);
    }

    fn separable_blobs(seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
        // Two uniform square blobs with a 0.2 margin between them.
        let mut rng = StdRng::seed_from_u64(seed);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            let positive = i % 2 == 0;
            let (lo, hi) = if positive { (0.6, 0.95) } else { (0.05, 0.4) };
            features.push(vec![
                rng.random_range(lo..hi),
                rng.random_range(lo..hi),
            ]);
            labels.push(positive);
        }
        (features, labels)
    }

    fn accuracy(forest: &RandomForest, features: &[Vec<f64>], labels: &[bool]) -> f64 {
        let correct = features
            .iter()
            .zip(labels)
            .filter(|(f, &l)| (forest.predict(f) > 0.5) == l)
            .count();
        correct as f64 / labels.len() as f64
    }

    /// Exhaustive depth-2 CART: brute-force every (feature, threshold) at
    /// the root and the best single split in each child.
    fn depth2_oracle_accuracy(features: &[Vec<f64>], labels: &[bool]) -> f64 {
        let n = labels.len();
        let thresholds = |rows: &[usize], f: usize| -> Vec<f64> {
            let mut vals: Vec<f64> = rows.iter().map(|&r| features[r][f]).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            vals.dedup();
            vals.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect()
        };
        let majority_correct = |rows: &[usize]| -> usize {
            let pos = rows.iter().filter(|&&r| labels[r]).count();
            pos.max(rows.len() - pos)
        };
        let best_single = |rows: &[usize]| -> usize {
            let mut best = majority_correct(rows);
            for f in 0..features[0].len() {
                for t in thresholds(rows, f) {
                    let (l, r): (Vec<usize>, Vec<usize>) =
                        rows.iter().partition(|&&row| features[row][f] <= t);
                    best = best.max(majority_correct(&l) + majority_correct(&r));
                }
            }
            best
        };
        let all: Vec<usize> = (0..n).collect();
        let mut best = best_single(&all);
        for f in 0..features[0].len() {
            for t in thresholds(&all, f) {
                let (l, r): (Vec<usize>, Vec<usize>) =
                    all.iter().partition(|&&row| features[row][f] <= t);
                if l.is_empty() || r.is_empty() {
                    continue;
                }
                best = best.max(best_single(&l) + best_single(&r));
            }
        }
        best as f64 / n as f64
    }

    #[test]
    fn separable_blobs_train_to_high_accuracy() {
        let (features, labels) = separable_blobs(42);
        let forest = train_classifier(&features, &labels, &params(100, true)).unwrap();
        let rf_acc = accuracy(&forest, &features, &labels);
        let oracle_acc = depth2_oracle_accuracy(&features, &labels);
        assert_eq!(oracle_acc, 1.0, "data is separable by construction");
        assert!(rf_acc >= 0.95, "rf accuracy {rf_acc}");
    }

    #[test]
    fn predictions_stay_normalized() {
        let (features, labels) = separable_blobs(3);
        let forest = train_classifier(&features, &labels, &params(25, true)).unwrap();
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..200 {
            let x = vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            let proba = forest.predict_proba(&x);
            assert!((proba[0] + proba[1] - 1.0).abs() < 1e-12);
            let p = forest.predict(&x);
            assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn regressor_recovers_leaf_means() {
        let features: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64 / 100.0]).collect();
        let targets: Vec<f64> = (0..100)
            .map(|i| if i < 50 { 0.2 } else { 0.8 })
            .collect();
        let p = RfParams {
            n_trees: 20,
            bootstrap: false,
            seed: 1,
            ..RfParams::default()
        };
        let forest = train_regressor(&features, &targets, &p).unwrap();
        assert!((forest.predict(&[0.25]) - 0.2).abs() < 1e-9);
        assert!((forest.predict(&[0.75]) - 0.8).abs() < 1e-9);
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let (features, labels) = separable_blobs(5);
        let a = train_classifier(&features, &labels, &params(10, true)).unwrap();
        let b = train_classifier(&features, &labels, &params(10, true)).unwrap();
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..50 {
            let x = vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            assert_eq!(a.predict(&x), b.predict(&x));
        }
    }

    #[test]
    fn too_few_rows_is_an_error() {
        let err = train_classifier(&[vec![0.0]], &[true], &params(5, true));
        assert!(matches!(err, Err(ForestError::TooFewRows(_))));
    }
}
