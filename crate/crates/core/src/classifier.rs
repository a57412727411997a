//! CART decision tree for binary islanding classification.
//!
//! Splits minimise weighted Gini impurity. Candidate thresholds are the
//! midpoints between consecutive distinct feature values and samples with
//! `x <= threshold` go left. Among equally good splits the lowest feature
//! index wins, then the lowest threshold. A split with zero gain is still
//! taken when nothing better exists, which lets the tree solve XOR-like
//! problems whose first split only pays off one level down.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics_sim::ScenarioRecord;
use crate::error::{Error, Result};
use crate::features::{self, FeatureOptions, FeatureVector};
use crate::measurement::{self, ChannelErrorModel};
use crate::seed;
use crate::stats;

const GAIN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl TreeParams {
    pub fn new(max_depth: usize) -> Self {
        TreeParams {
            max_depth,
            min_leaf: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
    Leaf {
        label: u8,
        /// Training samples per class, `[label 0, label 1]`.
        counts: [usize; 2],
    },
}

impl Node {
    fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    fn leaves(&self) -> usize {
        match self {
            Node::Leaf { .. } => 1,
            Node::Split { left, right, .. } => left.leaves() + right.leaves(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub params: TreeParams,
    pub n_features: usize,
    pub feature_names: Vec<String>,
    pub root: Node,
}

/// Gini impurity of a node with class counts `(a, b)`.
pub fn gini(a: usize, b: usize) -> f64 {
    let n = (a + b) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let (pa, pb) = (a as f64 / n, b as f64 / n);
    1.0 - pa * pa - pb * pb
}

fn class_counts(y: &[u8], idx: &[usize]) -> [usize; 2] {
    let ones = idx.iter().filter(|&&i| y[i] != 0).count();
    [idx.len() - ones, ones]
}

fn leaf(counts: [usize; 2]) -> Node {
    // Ties go to label 0.
    Node::Leaf {
        label: u8::from(counts[1] > counts[0]),
        counts,
    }
}

struct Best {
    gain: f64,
    feature: usize,
    threshold: f64,
}

fn best_split(x: &[Vec<f64>], y: &[u8], idx: &[usize], counts: [usize; 2], min_leaf: usize) -> Option<Best> {
    let n = idx.len();
    let parent = gini(counts[0], counts[1]);
    let mut best: Option<Best> = None;
    let mut order: Vec<(f64, u8)> = Vec::with_capacity(n);
    for f in 0..x[idx[0]].len() {
        order.clear();
        order.extend(idx.iter().map(|&i| (x[i][f], y[i])));
        order.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut left = [0usize; 2];
        for k in 0..n - 1 {
            left[usize::from(order[k].1 != 0)] += 1;
            let (lo, hi) = (order[k].0, order[k + 1].0);
            if lo == hi {
                continue;
            }
            let nl = k + 1;
            let nr = n - nl;
            if nl < min_leaf || nr < min_leaf {
                continue;
            }
            let right = [counts[0] - left[0], counts[1] - left[1]];
            let child = (nl as f64 * gini(left[0], left[1]) + nr as f64 * gini(right[0], right[1])) / n as f64;
            let gain = parent - child;
            if best.as_ref().is_none_or(|b| gain > b.gain + GAIN_EPS) {
                best = Some(Best {
                    gain,
                    feature: f,
                    threshold: lo + (hi - lo) / 2.0,
                });
            }
        }
    }
    best
}

fn grow(x: &[Vec<f64>], y: &[u8], idx: &[usize], depth: usize, params: &TreeParams) -> Node {
    let counts = class_counts(y, idx);
    if depth >= params.max_depth || counts[0] == 0 || counts[1] == 0 || idx.len() < 2 * params.min_leaf {
        return leaf(counts);
    }
    let Some(b) = best_split(x, y, idx, counts, params.min_leaf) else {
        return leaf(counts);
    };
    let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| x[i][b.feature] <= b.threshold);
    Node::Split {
        feature: b.feature,
        threshold: b.threshold,
        left: Box::new(grow(x, y, &l, depth + 1, params)),
        right: Box::new(grow(x, y, &r, depth + 1, params)),
    }
}

/// Fits a tree. Training is deterministic, so no seed is taken.
pub fn train_cart(x: &[Vec<f64>], y: &[u8], params: TreeParams) -> Result<DecisionTree> {
    if x.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    let d = x[0].len();
    if let Some(row) = x.iter().find(|r| r.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: row.len(),
        });
    }
    if params.min_leaf == 0 {
        return Err(Error::Config("min_leaf must be at least 1".into()));
    }
    let idx: Vec<usize> = (0..x.len()).collect();
    Ok(DecisionTree {
        params,
        n_features: d,
        feature_names: (0..d).map(|f| format!("f{f}")).collect(),
        root: grow(x, y, &idx, 0, &params),
    })
}

/// Fits a tree on feature vectors, naming features after their bus pairs.
pub fn train_on_features(fvs: &[FeatureVector], labels: &[u8], params: TreeParams) -> Result<DecisionTree> {
    let x: Vec<Vec<f64>> = fvs.iter().map(|f| f.values.clone()).collect();
    let mut tree = train_cart(&x, labels, params)?;
    if let Some(first) = fvs.first() {
        tree.feature_names = first.pairs.iter().map(|(a, b)| format!("{a}-{b}")).collect();
    }
    Ok(tree)
}

impl DecisionTree {
    pub fn predict(&self, x: &[f64]) -> Result<u8> {
        if x.len() != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                got: x.len(),
            });
        }
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf { label, .. } => return Ok(*label),
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => node = if x[*feature] <= *threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    pub fn leaves(&self) -> usize {
        self.root.leaves()
    }

    /// Fraction of correctly classified rows, 0..=1.
    pub fn accuracy(&self, x: &[Vec<f64>], y: &[u8]) -> Result<f64> {
        let mut ok = 0;
        for (row, &label) in x.iter().zip(y) {
            ok += usize::from(self.predict(row)? == label);
        }
        Ok(ok as f64 / x.len().max(1) as f64)
    }
}

/// Counts over all trials: `[[true 0, predicted 1 for 0], [predicted 0 for 1, true 1]]`.
pub type Confusion = [[usize; 2]; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percent.
    pub mean_accuracy: f64,
    /// Percent.
    pub ci95_halfwidth: f64,
    pub per_trial: Vec<f64>,
    pub depth: usize,
    pub confusion: Confusion,
}

impl EvalReport {
    pub fn from_trials(per_trial: Vec<f64>, depth: usize, confusion: Confusion) -> Self {
        EvalReport {
            mean_accuracy: stats::mean(&per_trial),
            ci95_halfwidth: stats::ci95_halfwidth(&per_trial),
            per_trial,
            depth,
            confusion,
        }
    }
}

/// Seed for trial `trial` of scenario `id`; independent of the error level.
pub fn trial_seed(master: u64, trial: usize, id: usize) -> u64 {
    seed::derive(master, &[seed::TAG_TRIAL, trial as u64, id as u64])
}

/// Scores `tree` over `trials` fresh corruptions of `test_base`.
///
/// Each trial draws new offsets and noise for every scenario, re-extracts
/// features and records the accuracy in percent.
pub fn evaluate_repeated(
    tree: &DecisionTree,
    test_base: &[ScenarioRecord],
    model: &ChannelErrorModel,
    opts: &FeatureOptions,
    trials: usize,
    seed_value: u64,
) -> Result<EvalReport> {
    let mut r = evaluate_multi(&[(*opts, tree)], test_base, model, trials, seed_value)?;
    Ok(r.pop().expect("one model"))
}

/// [`evaluate_repeated`] for several (features, tree) models at once. Every
/// model sees the same corrupted measurements in a given trial.
pub fn evaluate_multi(
    models: &[(FeatureOptions, &DecisionTree)],
    test_base: &[ScenarioRecord],
    model: &ChannelErrorModel,
    trials: usize,
    seed_value: u64,
) -> Result<Vec<EvalReport>> {
    if test_base.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let opts: Vec<FeatureOptions> = models.iter().map(|m| m.0).collect();
    let mut per_trial = vec![Vec::with_capacity(trials); models.len()];
    let mut confusion = vec![[[0usize; 2]; 2]; models.len()];
    for t in 0..trials {
        let preds: Vec<Vec<u8>> = test_base
            .par_iter()
            .map(|rec| {
                let ms = measurement::inject_errors(rec, model, trial_seed(seed_value, t, rec.id));
                features::features_many(&ms.traces, &opts)
                    .iter()
                    .zip(models)
                    .map(|(fv, (_, tree))| tree.predict(&fv.values))
                    .collect()
            })
            .collect::<Result<_>>()?;
        for m in 0..models.len() {
            let mut ok = 0;
            for (rec, p) in test_base.iter().zip(&preds) {
                confusion[m][usize::from(rec.label != 0)][usize::from(p[m] != 0)] += 1;
                ok += usize::from(rec.label == p[m]);
            }
            per_trial[m].push(100.0 * ok as f64 / test_base.len() as f64);
        }
    }
    Ok(per_trial
        .into_iter()
        .zip(confusion)
        .zip(models)
        .map(|((acc, conf), (_, tree))| EvalReport::from_trials(acc, tree.depth(), conf))
        .collect())
}

/// Clean (error-free) feature matrix of `records`.
pub fn clean_features(records: &[ScenarioRecord], opts: &FeatureOptions) -> (Vec<FeatureVector>, Vec<u8>) {
    let fvs = records
        .par_iter()
        .map(|r| features::features_from_traces(&r.traces, opts))
        .collect();
    (fvs, records.iter().map(|r| r.label).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gini_hand_values() {
        assert_eq!(gini(1, 1), 0.5);
        assert_eq!(gini(2, 0), 0.0);
        assert!((gini(1, 2) - 4.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn separable_one_split() {
        let x: Vec<Vec<f64>> = [-3.0, -2.0, -1.0, 1.0, 2.0].iter().map(|&v| vec![v]).collect();
        let y = [0, 0, 0, 1, 1];
        let t = train_cart(&x, &y, TreeParams::new(4)).unwrap();
        assert_eq!(t.depth(), 1);
        assert_eq!(t.accuracy(&x, &y).unwrap(), 1.0);
        match &t.root {
            Node::Split { threshold, .. } => assert_eq!(*threshold, 0.0),
            n => panic!("{n:?}"),
        }
    }

    #[test]
    fn single_class_is_leaf() {
        let x = vec![vec![1.0], vec![2.0]];
        let t = train_cart(&x, &[1, 1], TreeParams::new(3)).unwrap();
        assert_eq!(t.root, Node::Leaf { label: 1, counts: [0, 2] });
        assert_eq!(t.predict(&[100.0]).unwrap(), 1);
    }

    #[test]
    fn threshold_boundary_goes_left() {
        let x = vec![vec![0.0], vec![2.0]];
        let t = train_cart(&x, &[0, 1], TreeParams::new(1)).unwrap();
        assert_eq!(t.predict(&[1.0]).unwrap(), 0);
        assert_eq!(t.predict(&[1.0 + 1e-9]).unwrap(), 1);
    }

    #[test]
    fn dimension_mismatch() {
        let t = train_cart(&[vec![0.0, 1.0], vec![1.0, 0.0]], &[0, 1], TreeParams::new(1)).unwrap();
        assert!(matches!(t.predict(&[0.0]), Err(Error::DimensionMismatch { expected: 2, got: 1 })));
    }

    fn xor() -> (Vec<Vec<f64>>, Vec<u8>) {
        let x = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]];
        (x, vec![0, 1, 1, 0])
    }

    /// Best training accuracy over every depth-2 tree with midpoint thresholds.
    fn brute_force_depth2(x: &[Vec<f64>], y: &[u8]) -> f64 {
        let d = x[0].len();
        let mut cands: Vec<(usize, f64)> = Vec::new();
        for f in 0..d {
            let mut v: Vec<f64> = x.iter().map(|r| r[f]).collect();
            v.sort_by(f64::total_cmp);
            v.dedup();
            cands.extend(v.windows(2).map(|w| (f, (w[0] + w[1]) / 2.0)));
        }
        let mut best = 0.0f64;
        for &(f0, t0) in &cands {
            for &(fl, tl) in &cands {
                for &(fr, tr) in &cands {
                    for labels in 0..16u8 {
                        let ok = x
                            .iter()
                            .zip(y)
                            .filter(|(r, &lab)| {
                                let leaf = if r[f0] <= t0 {
                                    usize::from(r[fl] > tl)
                                } else {
                                    2 + usize::from(r[fr] > tr)
                                };
                                (labels >> leaf) & 1 == lab
                            })
                            .count();
                        best = best.max(ok as f64 / x.len() as f64);
                    }
                }
            }
        }
        best
    }

    #[test]
    fn xor_depth_two() {
        let (x, y) = xor();
        assert_eq!(brute_force_depth2(&x, &y), 1.0);
        let t = train_cart(&x, &y, TreeParams::new(2)).unwrap();
        assert_eq!(t.accuracy(&x, &y).unwrap(), 1.0);
        let shallow = train_cart(&x, &y, TreeParams::new(1)).unwrap();
        assert!(shallow.accuracy(&x, &y).unwrap() < 1.0);
    }

    #[test]
    fn min_leaf_respected() {
        let x: Vec<Vec<f64>> = (0..10).map(|v| vec![v as f64]).collect();
        let y = [0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
        let t = train_cart(&x, &y, TreeParams { max_depth: 8, min_leaf: 3 }).unwrap();
        fn check(n: &Node) {
            match n {
                Node::Leaf { counts, .. } => assert!(counts[0] + counts[1] >= 3),
                Node::Split { left, right, .. } => {
                    check(left);
                    check(right);
                }
            }
        }
        check(&t.root);
    }

    #[test]
    fn json_roundtrip() {
        let (x, y) = xor();
        let t = train_cart(&x, &y, TreeParams::new(2)).unwrap();
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<DecisionTree>(&s).unwrap(), t);
    }

    fn dataset() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<u8>)> {
        proptest::collection::vec((proptest::collection::vec(-5i32..5, 3), 0u8..2), 2..40).prop_map(|rows| {
            let (x, y): (Vec<_>, Vec<_>) = rows
                .into_iter()
                .map(|(r, l)| (r.into_iter().map(f64::from).collect::<Vec<f64>>(), l))
                .unzip();
            (x, y)
        })
    }

    proptest! {
        #[test]
        fn accuracy_monotone_in_depth((x, y) in dataset()) {
            let mut prev = 0.0;
            for depth in 0..6 {
                let t = train_cart(&x, &y, TreeParams::new(depth)).unwrap();
                prop_assert!(t.depth() <= depth);
                let acc = t.accuracy(&x, &y).unwrap();
                prop_assert!(acc + 1e-12 >= prev);
                prev = acc;
            }
        }

        #[test]
        fn training_is_deterministic((x, y) in dataset()) {
            let a = train_cart(&x, &y, TreeParams::new(4)).unwrap();
            let b = train_cart(&x, &y, TreeParams::new(4)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
