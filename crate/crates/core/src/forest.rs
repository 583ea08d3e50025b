//! Random forests for binary classification and regression.
//!
//! Each tree is grown on a bootstrap resample drawn from its own RNG stream
//! (`SplitMix64::stream(seed, tree_index)`). At every node a subset of
//! features is drawn without replacement and the split with the largest
//! impurity decrease wins (Gini for classification, variance for regression).
//! Candidate thresholds are midpoints between consecutive distinct values.
//! Ties go to the lowest feature index, then the lowest threshold.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::rng::SplitMix64;
use crate::{Error, Result};

/// Impurity decreases at or below this are not worth a split.
const MIN_GAIN: f64 = 1e-12;
/// Relative gain difference below which two splits count as equal.
const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForestKind {
    Classifier,
    Regressor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxFeatures {
    /// `max(1, floor(sqrt(p)))` candidates per node.
    Sqrt,
    All,
}

impl MaxFeatures {
    fn count(self, p: usize) -> usize {
        match self {
            MaxFeatures::Sqrt => (libm::floor(libm::sqrt(p as f64)) as usize).max(1),
            MaxFeatures::All => p,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub min_samples_leaf: usize,
    pub max_features: MaxFeatures,
    pub max_depth: Option<usize>,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self::classifier(0)
    }
}

impl ForestParams {
    /// 100 trees, at least 10 samples per leaf.
    pub fn classifier(seed: u64) -> Self {
        Self {
            n_trees: 100,
            min_samples_leaf: 10,
            max_features: MaxFeatures::Sqrt,
            max_depth: None,
            seed,
        }
    }

    /// 100 trees, at least 5 samples per leaf.
    pub fn regressor(seed: u64) -> Self {
        Self {
            min_samples_leaf: 5,
            ..Self::classifier(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::arg("n_trees must be at least 1"));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::arg("min_samples_leaf must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    /// `value` is the positive fraction (classifier) or the mean target.
    Leaf { value: f64, n: usize },
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    fn leaf_value(&self, row: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                Node::Leaf { value, .. } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => node = if row[*feature] <= *threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    /// Sizes of every leaf, left to right.
    pub fn leaf_sizes(&self) -> Vec<usize> {
        let mut out = Vec::new();
        fn walk(n: &Node, out: &mut Vec<usize>) {
            match n {
                Node::Leaf { n, .. } => out.push(*n),
                Node::Split { left, right, .. } => {
                    walk(left, out);
                    walk(right, out);
                }
            }
        }
        walk(self, &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub kind: ForestKind,
    pub feature_names: Vec<String>,
    pub params: ForestParams,
    pub trees: Vec<Node>,
    /// Per-tree impurity decrease by feature, each row normalised to sum 1
    /// (all zeros for a tree that never split).
    tree_importances: Vec<Vec<f64>>,
}

fn validate_matrix(x: &[Vec<f64>], n_features: Option<usize>) -> Result<usize> {
    let p = match (x.first(), n_features) {
        (None, _) => return Err(Error::Insufficient("empty feature matrix".into())),
        (Some(r), None) => r.len(),
        (Some(_), Some(p)) => p,
    };
    if p == 0 {
        return Err(Error::arg("feature matrix has no columns"));
    }
    for (i, row) in x.iter().enumerate() {
        if row.len() != p {
            return Err(Error::arg(format!("row {i} has {} features, expected {p}", row.len())));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg(format!("row {i} has a non-finite feature")));
        }
    }
    Ok(p)
}

/// Running sums for a node's targets; impurity times count ("total impurity")
/// is what splits compare.
#[derive(Clone, Copy, Default)]
struct Acc {
    n: f64,
    s: f64,
    ss: f64,
}

impl Acc {
    fn push(&mut self, y: f64) {
        self.n += 1.0;
        self.s += y;
        self.ss += y * y;
    }

    fn pop(&mut self, y: f64) {
        self.n -= 1.0;
        self.s -= y;
        self.ss -= y * y;
    }

    fn total_impurity(&self, kind: ForestKind) -> f64 {
        if self.n == 0.0 {
            return 0.0;
        }
        match kind {
            // n * (1 - p^2 - (1-p)^2) = 2 * pos * neg / n
            ForestKind::Classifier => 2.0 * self.s * (self.n - self.s) / self.n,
            ForestKind::Regressor => (self.ss - self.s * self.s / self.n).max(0.0),
        }
    }

    fn value(&self) -> f64 {
        self.s / self.n
    }
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    kind: ForestKind,
    params: &'a ForestParams,
    n_candidates: usize,
    importance: Vec<f64>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
    n_left: usize,
}

impl Builder<'_> {
    fn grow(&mut self, rows: &mut [usize], depth: usize, rng: &mut SplitMix64) -> Node {
        let mut acc = Acc::default();
        for &r in rows.iter() {
            acc.push(self.y[r]);
        }
        let leaf = Node::Leaf {
            value: acc.value(),
            n: rows.len(),
        };
        let leaf_min = self.params.min_samples_leaf;
        if rows.len() < 2 * leaf_min || self.params.max_depth.is_some_and(|d| depth >= d) {
            return leaf;
        }
        let parent = acc.total_impurity(self.kind);
        if parent <= MIN_GAIN {
            return leaf;
        }

        let p = self.x[0].len();
        // Candidates are scanned in random order and only a clear gain
        // replaces the incumbent, so features that induce the same partition
        // share splits instead of the lowest index taking them all.
        let features = rng.sample_indices(p, self.n_candidates);

        let mut best: Option<BestSplit> = None;
        for &f in &features {
            rows.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            let mut left = Acc::default();
            let mut right = acc;
            for k in 0..rows.len() - 1 {
                let y = self.y[rows[k]];
                left.push(y);
                right.pop(y);
                let n_left = k + 1;
                let (v, next) = (self.x[rows[k]][f], self.x[rows[k + 1]][f]);
                if v == next || n_left < leaf_min || rows.len() - n_left < leaf_min {
                    continue;
                }
                let gain = parent - left.total_impurity(self.kind) - right.total_impurity(self.kind);
                if best.as_ref().map_or(true, |b| gain > b.gain + TIE_TOLERANCE * b.gain.abs()) {
                    best = Some(BestSplit {
                        feature: f,
                        threshold: v + (next - v) / 2.0,
                        gain,
                        n_left,
                    });
                }
            }
        }

        let Some(split) = best.filter(|b| b.gain / rows.len() as f64 > MIN_GAIN) else {
            return leaf;
        };
        self.importance[split.feature] += split.gain;
        let f = split.feature;
        rows.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
        let (l, r) = rows.split_at_mut(split.n_left);
        Node::Split {
            feature: f,
            threshold: split.threshold,
            left: Box::new(self.grow(l, depth + 1, rng)),
            right: Box::new(self.grow(r, depth + 1, rng)),
        }
    }
}

/// Grow one tree of the ensemble; exposed so callers can train trees in
/// parallel and assemble them with [`Forest::from_trees`].
pub fn fit_tree(
    x: &[Vec<f64>],
    y: &[f64],
    kind: ForestKind,
    params: &ForestParams,
    tree_index: usize,
) -> (Node, Vec<f64>) {
    let n = x.len();
    let p = x[0].len();
    let mut rng = SplitMix64::stream(params.seed, tree_index as u64);
    let mut rows: Vec<usize> = (0..n).map(|_| rng.below(n)).collect();
    let mut builder = Builder {
        x,
        y,
        kind,
        params,
        n_candidates: params.max_features.count(p),
        importance: alloc::vec![0.0; p],
    };
    let tree = builder.grow(&mut rows, 0, &mut rng);
    let mut imp = builder.importance;
    let total: f64 = imp.iter().sum();
    if total > 0.0 {
        imp.iter_mut().for_each(|v| *v /= total);
    }
    (tree, imp)
}

fn check_targets(y: &[f64], n: usize, kind: ForestKind) -> Result<()> {
    if y.len() != n {
        return Err(Error::LengthMismatch { expected: n, actual: y.len() });
    }
    match kind {
        ForestKind::Classifier if y.iter().any(|&v| v != 0.0 && v != 1.0) => {
            Err(Error::arg("classifier labels must be 0 or 1"))
        }
        _ if y.iter().any(|v| !v.is_finite()) => Err(Error::arg("targets must be finite")),
        _ => Ok(()),
    }
}

/// Train a forest. Classifier labels are 0.0 (negative) or 1.0 (positive).
pub fn fit_forest(
    x: &[Vec<f64>],
    y: &[f64],
    kind: ForestKind,
    params: &ForestParams,
    feature_names: Vec<String>,
) -> Result<Forest> {
    params.validate()?;
    let p = validate_matrix(x, None)?;
    check_targets(y, x.len(), kind)?;
    if x.len() < 2 * params.min_samples_leaf {
        return Err(Error::Insufficient(format!(
            "{} rows cannot fill two leaves of {}",
            x.len(),
            params.min_samples_leaf
        )));
    }
    if !feature_names.is_empty() && feature_names.len() != p {
        return Err(Error::arg("feature_names length differs from feature count"));
    }
    let (trees, imps) = (0..params.n_trees).map(|t| fit_tree(x, y, kind, params, t)).unzip();
    Forest::from_trees(kind, *params, feature_names, p, trees, imps)
}

impl Forest {
    pub fn from_trees(
        kind: ForestKind,
        params: ForestParams,
        mut feature_names: Vec<String>,
        n_features: usize,
        trees: Vec<Node>,
        tree_importances: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if trees.is_empty() || trees.len() != tree_importances.len() {
            return Err(Error::arg("a forest needs one importance vector per tree"));
        }
        if feature_names.is_empty() {
            feature_names = (0..n_features).map(|i| format!("x{i}")).collect();
        }
        Ok(Self {
            kind,
            feature_names,
            params,
            trees,
            tree_importances,
        })
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    fn check_row(&self, row: &[f64]) -> Result<()> {
        if row.len() != self.n_features() {
            return Err(Error::arg(format!(
                "row has {} features, forest expects {}",
                row.len(),
                self.n_features()
            )));
        }
        Ok(())
    }

    /// Fraction of trees whose leaf votes positive. A leaf with an exactly
    /// even class split votes positive.
    pub fn predict_proba(&self, row: &[f64]) -> Result<f64> {
        if self.kind != ForestKind::Classifier {
            return Err(Error::arg("predict_proba needs a classifier"));
        }
        self.check_row(row)?;
        let votes = self.trees.iter().filter(|t| t.leaf_value(row) >= 0.5).count();
        Ok(votes as f64 / self.trees.len() as f64)
    }

    /// Majority vote (classifier, ties positive) or mean leaf value
    /// (regressor).
    pub fn predict(&self, row: &[f64]) -> Result<f64> {
        match self.kind {
            ForestKind::Classifier => Ok(if self.predict_proba(row)? >= 0.5 { 1.0 } else { 0.0 }),
            ForestKind::Regressor => {
                self.check_row(row)?;
                let s: f64 = self.trees.iter().map(|t| t.leaf_value(row)).sum();
                Ok(s / self.trees.len() as f64)
            }
        }
    }

    /// Mean decrease in impurity, averaged over trees and normalised to sum
    /// to 1. A forest that never split reports uniform importance.
    pub fn feature_importance(&self) -> Result<Vec<f64>> {
        if self.trees.is_empty() {
            return Err(Error::arg("forest has no trees"));
        }
        let p = self.n_features();
        let mut imp = alloc::vec![0.0; p];
        for t in &self.tree_importances {
            for (a, b) in imp.iter_mut().zip(t) {
                *a += b;
            }
        }
        let total: f64 = imp.iter().sum();
        if total > 0.0 {
            imp.iter_mut().for_each(|v| *v /= total);
        } else {
            imp.iter_mut().for_each(|v| *v = 1.0 / p as f64);
        }
        Ok(imp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn separable(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = SplitMix64::new(seed);
        let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)]).collect();
        let y = x.iter().map(|r| f64::from(u8::from(r[0] > 0.5))).collect();
        (x, y)
    }

    #[test]
    fn separable_threshold_is_learned() {
        let (x, y) = separable(200, 1);
        let (xt, yt) = separable(200, 2);
        let f = fit_forest(&x, &y, ForestKind::Classifier, &ForestParams::classifier(3), vec![]).unwrap();
        let hits = xt.iter().zip(&yt).filter(|(r, &t)| f.predict(r).unwrap() == t).count();
        // Points within a hair of the boundary can land on either side of a
        // midpoint threshold; allow a couple.
        assert!(hits >= 197, "accuracy {}", hits as f64 / 200.0);
    }

    #[test]
    fn single_class_is_certain() {
        let x: Vec<Vec<f64>> = (0..30).map(|i| vec![f64::from(i)]).collect();
        let f = fit_forest(&x, &[1.0; 30], ForestKind::Classifier, &ForestParams::classifier(0), vec![]).unwrap();
        assert_eq!(f.predict_proba(&[3.0]).unwrap(), 1.0);
        assert_eq!(f.feature_importance().unwrap(), vec![1.0]);
    }

    #[test]
    fn informative_feature_dominates_regression() {
        let mut rng = SplitMix64::new(5);
        let x: Vec<Vec<f64>> = (0..300).map(|_| (0..5).map(|_| rng.next_f64()).collect()).collect();
        let y: Vec<f64> = x.iter().map(|r| if r[3] > 0.4 { 10.0 } else { 0.0 }).collect();
        let f = fit_forest(&x, &y, ForestKind::Regressor, &ForestParams::regressor(1), vec![]).unwrap();
        let imp = f.feature_importance().unwrap();
        assert!(imp[3] >= 0.8, "{imp:?}");
        assert!((imp.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_input() {
        let p = ForestParams::classifier(0);
        assert!(fit_forest(&[], &[], ForestKind::Classifier, &p, vec![]).is_err());
        let x: Vec<Vec<f64>> = (0..30).map(|i| vec![f64::from(i)]).collect();
        assert!(fit_forest(&x, &[2.0; 30], ForestKind::Classifier, &p, vec![]).is_err());
        assert!(fit_forest(&x[..15], &[1.0; 15], ForestKind::Classifier, &p, vec![]).is_err());
        let f = fit_forest(&x, &[1.0; 30], ForestKind::Classifier, &p, vec![]).unwrap();
        assert!(f.predict_proba(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn tied_features_share_splits() {
        // Two identical columns: every split on column 1 ties one on column 0.
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![f64::from(i), f64::from(i)]).collect();
        let y: Vec<f64> = (0..40).map(|i| f64::from(u8::from(i >= 20))).collect();
        let params = ForestParams { max_features: MaxFeatures::All, min_samples_leaf: 1, ..ForestParams::classifier(4) };
        let f = fit_forest(&x, &y, ForestKind::Classifier, &params, vec![]).unwrap();
        let imp = f.feature_importance().unwrap();
        assert!(imp[0] > 0.3 && imp[1] > 0.3, "{imp:?}");
        assert!((imp[0] + imp[1] - 1.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn deterministic_and_well_formed(seed in any::<u64>(), leaf in 1usize..8) {
            let mut rng = SplitMix64::new(seed);
            let x: Vec<Vec<f64>> = (0..60).map(|_| (0..3).map(|_| libm::round(rng.uniform(0.0, 8.0))).collect()).collect();
            let y: Vec<f64> = x.iter().map(|r| f64::from(u8::from(r[0] + rng.normal() > 4.0))).collect();
            let params = ForestParams { n_trees: 10, min_samples_leaf: leaf, ..ForestParams::classifier(seed) };
            let a = fit_forest(&x, &y, ForestKind::Classifier, &params, vec![]).unwrap();
            let b = fit_forest(&x, &y, ForestKind::Classifier, &params, vec![]).unwrap();
            prop_assert_eq!(&a, &b);
            for t in &a.trees {
                prop_assert!(t.leaf_sizes().iter().all(|&s| s >= leaf));
            }
            let imp = a.feature_importance().unwrap();
            prop_assert!(imp.iter().all(|&v| v >= 0.0));
            prop_assert!((imp.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for r in &x {
                let p = a.predict_proba(r).unwrap();
                prop_assert!((0.0..=1.0).contains(&p));
                prop_assert_eq!(libm::round(p * 10.0), p * 10.0);
            }
        }
    }
}
