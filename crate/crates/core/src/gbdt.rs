//! Score fusion: a from-scratch gradient-boosted regression-tree model
//! maps the eight metrics onto the 0-10 slide score pathologists use, and
//! a threshold rule turns the score plus per-metric alerts into an
//! archive / re-prepare / re-scan decision.
//!
//! Training is second-order boosting with a squared-error objective:
//! per-sample gradient `g = prediction - label`, hessian `h = 1`, split
//! gain `[G_L^2/(H_L+l) + G_R^2/(H_R+l) - G^2/(H+l)]/2 - gamma`, leaf
//! weight `-G/(H+l)`, exact greedy splits over sorted feature values.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{Metric, MetricVector, METRIC_COUNT};
use crate::num::Real;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GbdtError {
    #[error("empty training set")]
    EmptyDataset,
    #[error("training needs at least {need} samples, got {got}")]
    TooFewSamples { got: usize, need: usize },
    #[error("feature count {0} does not match {METRIC_COUNT}")]
    BadFeatureCount(usize),
}

/// Minimum training-set size.
pub const TRAIN_MIN_SAMPLES: usize = 10;

/// Scores strictly above this are archived.
pub const ARCHIVE_THRESHOLD: f64 = 6.0;
/// Metrics strictly below this are flagged as the faulty inputs behind a
/// low score.
pub const FAULT_THRESHOLD: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig<R> {
    pub rounds: usize,
    pub max_depth: usize,
    pub eta: R,
    pub lambda: R,
    pub gamma: R,
}

impl<R: Real> Default for TrainConfig<R> {
    fn default() -> Self {
        TrainConfig {
            rounds: 100,
            max_depth: 3,
            eta: R::of(0.1),
            lambda: R::of(1.0),
            gamma: R::zero(),
        }
    }
}

/// One tree node. `Split` sends `x[feat] < thr` left; `Leaf` carries the
/// unscaled weight (the shrinkage factor is applied at prediction time).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreeNode<R> {
    Split { feat: usize, thr: R, left: usize, right: usize },
    Leaf { leaf: R },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree<R> {
    pub nodes: Vec<TreeNode<R>>,
}

impl<R: Real> RegressionTree<R> {
    pub fn predict(&self, x: &[R; METRIC_COUNT]) -> R {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                TreeNode::Leaf { leaf } => return *leaf,
                TreeNode::Split { feat, thr, left, right } => {
                    at = if x[*feat] < *thr { *left } else { *right };
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel<R> {
    pub base_score: R,
    pub eta: R,
    pub lambda: R,
    pub gamma: R,
    pub trees: Vec<RegressionTree<R>>,
    pub feature_names: Vec<String>,
}

impl<R: Real> GbdtModel<R> {
    /// Raw additive prediction: `base + eta * sum(trees)`.
    pub fn predict_raw(&self, x: &[R; METRIC_COUNT]) -> R {
        let sum = self.trees.iter().fold(R::zero(), |a, t| a + t.predict(x));
        self.base_score + self.eta * sum
    }

    /// Slide score on the 0-10 scale. Not-evaluable metrics are imputed
    /// to 1.0 by [`MetricVector::imputed`].
    pub fn predict_score(&self, q: &MetricVector<R>) -> R {
        self.predict_raw(&q.imputed()).max(R::zero()).min(R::of(10.0))
    }
}

impl<R: Real + Serialize + for<'de> Deserialize<'de>> GbdtModel<R> {
    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).map_err(std::io::Error::other)?)
    }
}

#[derive(Debug)]
pub struct TrainReport<R> {
    pub model: GbdtModel<R>,
    /// Training RMSE after each boosting round.
    pub rmse_history: Vec<R>,
    /// Features that never vary in the training set.
    pub constant_features: Vec<usize>,
}

/// Fit a model on (metric vector, 0-10 label) pairs.
pub fn train_gbdt<R: Real>(
    dataset: &[([R; METRIC_COUNT], R)],
    config: &TrainConfig<R>,
) -> Result<TrainReport<R>, GbdtError> {
    let n = dataset.len();
    if n == 0 {
        return Err(GbdtError::EmptyDataset);
    }
    if n < TRAIN_MIN_SAMPLES {
        return Err(GbdtError::TooFewSamples { got: n, need: TRAIN_MIN_SAMPLES });
    }
    let constant_features = (0..METRIC_COUNT)
        .filter(|&f| dataset.windows(2).all(|w| w[0].0[f] == w[1].0[f]))
        .collect();

    let labels: Vec<R> = dataset.iter().map(|(_, y)| *y).collect();
    let base_score = labels.iter().fold(R::zero(), |a, &b| a + b) / R::of_usize(n);
    let mut predictions = vec![base_score; n];
    let mut trees = Vec::with_capacity(config.rounds);
    let mut rmse_history = Vec::with_capacity(config.rounds);

    for _round in 0..config.rounds {
        let gradients: Vec<R> =
            predictions.iter().zip(&labels).map(|(&p, &y)| p - y).collect();
        let mut nodes = Vec::new();
        let all: Vec<usize> = (0..n).collect();
        build_node(dataset, &gradients, &all, config, 0, &mut nodes);
        let tree = RegressionTree { nodes };
        for (k, (x, _)) in dataset.iter().enumerate() {
            predictions[k] += config.eta * tree.predict(x);
        }
        trees.push(tree);
        let sse = predictions
            .iter()
            .zip(&labels)
            .fold(R::zero(), |a, (&p, &y)| a + (p - y) * (p - y));
        rmse_history.push((sse / R::of_usize(n)).sqrt());
    }

    Ok(TrainReport {
        model: GbdtModel {
            base_score,
            eta: config.eta,
            lambda: config.lambda,
            gamma: config.gamma,
            trees,
            feature_names: Metric::ALL.iter().map(|m| m.feature_name().to_string()).collect(),
        },
        rmse_history,
        constant_features,
    })
}

fn leaf_weight<R: Real>(g_sum: R, h_sum: R, lambda: R) -> R {
    -g_sum / (h_sum + lambda)
}

/// Recursively grow one tree; returns the index of the created node.
fn build_node<R: Real>(
    dataset: &[([R; METRIC_COUNT], R)],
    gradients: &[R],
    samples: &[usize],
    config: &TrainConfig<R>,
    depth: usize,
    nodes: &mut Vec<TreeNode<R>>,
) -> usize {
    let g_sum = samples.iter().fold(R::zero(), |a, &k| a + gradients[k]);
    let h_sum = R::of_usize(samples.len());
    let this = nodes.len();
    nodes.push(TreeNode::Leaf { leaf: leaf_weight(g_sum, h_sum, config.lambda) });
    if depth >= config.max_depth || samples.len() < 2 {
        return this;
    }

    let half = R::of(0.5);
    let parent_obj = g_sum * g_sum / (h_sum + config.lambda);
    let mut best: Option<(R, usize, R)> = None; // (gain, feature, threshold)
    for feat in 0..METRIC_COUNT {
        let mut order: Vec<usize> = samples.to_vec();
        order.sort_by(|&a, &b| {
            dataset[a].0[feat]
                .partial_cmp(&dataset[b].0[feat])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut gl = R::zero();
        let mut hl = R::zero();
        for w in 0..order.len() - 1 {
            gl += gradients[order[w]];
            hl += R::one();
            let v = dataset[order[w]].0[feat];
            let v_next = dataset[order[w + 1]].0[feat];
            if v == v_next {
                continue; // can only split between distinct values
            }
            let gr = g_sum - gl;
            let hr = h_sum - hl;
            let gain = half
                * (gl * gl / (hl + config.lambda) + gr * gr / (hr + config.lambda)
                    - parent_obj)
                - config.gamma;
            if gain > R::zero() && best.map(|(bg, _, _)| gain > bg).unwrap_or(true) {
                best = Some((gain, feat, (v + v_next) * half));
            }
        }
    }

    let Some((_, feat, thr)) = best else {
        return this; // no positive-gain split: stay a leaf
    };
    let (left_samples, right_samples): (Vec<usize>, Vec<usize>) =
        samples.iter().partition(|&&k| dataset[k].0[feat] < thr);
    let left = build_node(dataset, gradients, &left_samples, config, depth + 1, nodes);
    let right = build_node(dataset, gradients, &right_samples, config, depth + 1, nodes);
    nodes[this] = TreeNode::Split { feat, thr, left, right };
    this
}

/// What to do with an evaluated slide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Archive,
    RePrepare,
    ReScan,
    RePrepareAndScan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideDecision<R> {
    pub score: R,
    pub action: Action,
    /// Metrics below the fault threshold, in feature order.
    pub reasons: Vec<Metric>,
}

/// Archive when the score clears [`ARCHIVE_THRESHOLD`]; otherwise
/// attribute the failure to scanning (q1/q2), preparation (q3-q8) or
/// both. A low score with no metric below the fault threshold defaults to
/// re-preparation.
pub fn decide<R: Real>(score: R, q: &MetricVector<R>) -> SlideDecision<R> {
    let dense = q.imputed();
    let reasons: Vec<Metric> = Metric::ALL
        .into_iter()
        .filter(|m| dense[m.index()] < R::of(FAULT_THRESHOLD))
        .collect();
    if score > R::of(ARCHIVE_THRESHOLD) {
        return SlideDecision { score, action: Action::Archive, reasons };
    }
    let scanning = reasons.iter().any(|m| m.is_scanning_fault());
    let preparation = reasons.iter().any(|m| !m.is_scanning_fault());
    let action = match (scanning, preparation) {
        (true, true) => Action::RePrepareAndScan,
        (true, false) => Action::ReScan,
        _ => Action::RePrepare,
    };
    SlideDecision { score, action, reasons }
}

/// Weights of the documented synthetic labeling rubric. The label of a
/// metric vector is `10 * dot(w, q) / sum(w)`: heaviest on focus and cell
/// count, lighter on grid and cell-mass burden. Purely synthetic, not a
/// clinical calibration.
pub const RUBRIC_WEIGHTS: [f64; METRIC_COUNT] = [0.8, 1.5, 1.0, 1.0, 1.2, 1.5, 0.8, 1.2];

pub fn rubric_label<R: Real>(q: &[R; METRIC_COUNT]) -> R {
    let wsum: f64 = RUBRIC_WEIGHTS.iter().sum();
    let mut acc = R::zero();
    for (k, &w) in RUBRIC_WEIGHTS.iter().enumerate() {
        acc += R::of(w) * q[k];
    }
    acc * R::of(10.0 / wsum)
}

/// Deterministic synthetic training set drawn from the rubric labeler.
pub fn rubric_training_set<R: Real>(n: usize, seed: u64) -> Vec<([R; METRIC_COUNT], R)> {
    use rand::prelude::*;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let q: [R; METRIC_COUNT] = std::array::from_fn(|_| {
                // skew towards healthy slides, with a degraded tail
                let u: f64 = rng.random_range(0.0..1.0);
                R::of(1.0 - u * u)
            });
            let label = rubric_label(&q);
            (q, label)
        })
        .collect()
}

/// The shipped default score model: trained on first use from the
/// documented synthetic rubric, deterministically seeded. Marked
/// non-clinical; reports carry a warning whenever it is used.
pub fn default_model<R: Real>() -> GbdtModel<R> {
    let dataset = rubric_training_set(512, 0x5157_4331);
    train_gbdt(&dataset, &TrainConfig::default())
        .expect("default model training is infallible")
        .model
}
