//! Multiclass gradient-boosted regression trees used as a post-filter over
//! neural class probabilities plus tract covariates.
//!
//! Softmax objective, one tree per class per round, exact greedy splits with
//! second-order gain and L2-regularized leaf weights.

use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TractRecord;
use crate::error::{Error, Result};
use crate::race::{RaceClass, RaceDistribution, NUM_CLASSES};

pub const NUM_FEATURES: usize = 11;

pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "prob_white",
    "prob_black",
    "prob_hispanic",
    "prob_asian",
    "prob_other",
    "tract_white",
    "tract_black",
    "tract_hispanic",
    "tract_asian",
    "tract_other",
    "income_decile",
];

/// Five model probabilities, five tract shares, scaled income decile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterFeatures(pub [f64; NUM_FEATURES]);

pub fn build_filter_features(probs: &RaceDistribution, tract: &TractRecord) -> FilterFeatures {
    filter_features_from_parts(probs, &tract.composition, tract.scaled_decile())
}

pub fn filter_features_from_parts(
    probs: &RaceDistribution,
    composition: &RaceDistribution,
    scaled_decile: f64,
) -> FilterFeatures {
    let mut f = [0.0; NUM_FEATURES];
    f[..5].copy_from_slice(probs.probs());
    f[5..10].copy_from_slice(composition.probs());
    f[10] = scaled_decile;
    FilterFeatures(f)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbdtConfig {
    pub num_rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    /// Minimum hessian sum in each child.
    pub min_child_weight: f64,
    pub l2_lambda: f64,
    /// Row fraction drawn per round, shared by the five class trees.
    pub subsample: f64,
    pub seed: u64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        GbdtConfig {
            num_rounds: 50,
            learning_rate: 0.1,
            max_depth: 3,
            min_child_weight: 1.0,
            l2_lambda: 1.0,
            subsample: 1.0,
            seed: 0,
        }
    }
}

impl GbdtConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.num_rounds >= 1
            && self.learning_rate > 0.0
            && self.learning_rate <= 1.0
            && self.max_depth >= 1
            && self.min_child_weight >= 0.0
            && self.l2_lambda >= 0.0
            && self.subsample > 0.0
            && self.subsample <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(alloc::format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        /// Where rows with a NaN feature value go.
        default_left: bool,
        left: usize,
        right: usize,
    },
    Leaf {
        weight: f64,
    },
}

/// Nodes in creation order; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64; NUM_FEATURES]) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { weight } => return *weight,
                Node::Split {
                    feature,
                    threshold,
                    default_left,
                    left,
                    right,
                } => {
                    let v = x[*feature];
                    let go_left = if v.is_nan() { *default_left } else { v < *threshold };
                    at = if go_left { *left } else { *right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match &nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }

    fn split_features(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Split { feature, .. } => Some(*feature),
            Node::Leaf { .. } => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub config: GbdtConfig,
    pub base_score: [f64; NUM_CLASSES],
    /// `rounds[r][class]`
    pub rounds: Vec<[Tree; NUM_CLASSES]>,
    /// Cumulative split gain per feature.
    pub gain: [f64; NUM_FEATURES],
}

impl GbdtModel {
    pub fn empty(config: GbdtConfig) -> Self {
        GbdtModel {
            config,
            base_score: [0.0; NUM_CLASSES],
            rounds: Vec::new(),
            gain: [0.0; NUM_FEATURES],
        }
    }

    pub fn margins(&self, x: &FilterFeatures) -> [f64; NUM_CLASSES] {
        let mut m = self.base_score;
        for round in &self.rounds {
            for (k, tree) in round.iter().enumerate() {
                m[k] += tree.predict(&x.0);
            }
        }
        m
    }

    pub fn predict(&self, x: &FilterFeatures) -> RaceDistribution {
        RaceDistribution::softmax(&self.margins(x))
    }

    /// Features ordered by total gain, descending; ties by feature index.
    pub fn feature_importance(&self) -> Vec<(&'static str, f64)> {
        let mut order: Vec<usize> = (0..NUM_FEATURES).collect();
        order.sort_by(|&a, &b| self.gain[b].total_cmp(&self.gain[a]).then(a.cmp(&b)));
        order.into_iter().map(|i| (FEATURE_NAMES[i], self.gain[i])).collect()
    }

    pub fn check_invariants(&self) -> Result<()> {
        for round in &self.rounds {
            for tree in round {
                if tree.split_features().any(|f| f >= NUM_FEATURES) {
                    return Err(Error::Invariant("split feature index out of range".into()));
                }
                if tree.depth() > self.config.max_depth {
                    return Err(Error::Invariant("tree deeper than max_depth".into()));
                }
            }
        }
        Ok(())
    }
}

pub fn predict(model: &GbdtModel, features: &FilterFeatures) -> RaceDistribution {
    model.predict(features)
}

pub fn feature_importance(model: &GbdtModel) -> Vec<(&'static str, f64)> {
    model.feature_importance()
}

struct SplitChoice {
    feature: usize,
    threshold: f64,
    default_left: bool,
    gain: f64,
    left: Vec<usize>,
    right: Vec<usize>,
}

struct TreeBuilder<'a> {
    x: &'a [FilterFeatures],
    grad: &'a [f64],
    hess: &'a [f64],
    config: &'a GbdtConfig,
    nodes: Vec<Node>,
    gain: [f64; NUM_FEATURES],
}

fn leaf_score(g: f64, h: f64, lambda: f64) -> f64 {
    g * g / (h + lambda)
}

impl<'a> TreeBuilder<'a> {
    fn sums(&self, rows: &[usize]) -> (f64, f64) {
        rows.iter()
            .fold((0.0, 0.0), |(g, h), &i| (g + self.grad[i], h + self.hess[i]))
    }

    fn leaf(&mut self, rows: &[usize]) -> usize {
        let (g, h) = self.sums(rows);
        let weight = -g / (h + self.config.l2_lambda) * self.config.learning_rate;
        self.nodes.push(Node::Leaf { weight });
        self.nodes.len() - 1
    }

    fn best_split(&self, rows: &[usize]) -> Option<SplitChoice> {
        let lambda = self.config.l2_lambda;
        let mcw = self.config.min_child_weight;
        let (g_total, h_total) = self.sums(rows);
        let parent = leaf_score(g_total, h_total, lambda);
        let mut best: Option<(usize, f64, bool, f64)> = None;

        for feature in 0..NUM_FEATURES {
            let mut present: Vec<usize> = rows
                .iter()
                .copied()
                .filter(|&i| !self.x[i].0[feature].is_nan())
                .collect();
            if present.len() < 2 {
                continue;
            }
            present.sort_by(|&a, &b| self.x[a].0[feature].total_cmp(&self.x[b].0[feature]));
            let (g_present, h_present) = self.sums(&present);
            let (g_missing, h_missing) = (g_total - g_present, h_total - h_present);
            let has_missing = present.len() < rows.len();

            let mut g_left = 0.0;
            let mut h_left = 0.0;
            for w in 0..present.len() - 1 {
                let i = present[w];
                g_left += self.grad[i];
                h_left += self.hess[i];
                let v = self.x[i].0[feature];
                let next = self.x[present[w + 1]].0[feature];
                if !(next > v) {
                    continue;
                }
                let directions: &[bool] = if has_missing { &[true, false] } else { &[true] };
                for &missing_left in directions {
                    let (gl, hl) = if missing_left {
                        (g_left + g_missing, h_left + h_missing)
                    } else {
                        (g_left, h_left)
                    };
                    let (gr, hr) = (g_total - gl, h_total - hl);
                    if hl < mcw || hr < mcw {
                        continue;
                    }
                    let gain = 0.5 * (leaf_score(gl, hl, lambda) + leaf_score(gr, hr, lambda) - parent);
                    if gain > 1e-12 && best.is_none_or(|b| gain > b.3) {
                        let threshold = v + (next - v) / 2.0;
                        best = Some((feature, threshold, missing_left, gain));
                    }
                }
            }
        }

        let (feature, threshold, default_left, gain) = best?;
        let (left, right) = rows.iter().partition(|&&i| {
            let v = self.x[i].0[feature];
            if v.is_nan() {
                default_left
            } else {
                v < threshold
            }
        });
        Some(SplitChoice {
            feature,
            threshold,
            default_left,
            gain,
            left,
            right,
        })
    }

    fn grow(&mut self, rows: &[usize], depth: usize) -> usize {
        if depth >= self.config.max_depth {
            return self.leaf(rows);
        }
        let Some(choice) = self.best_split(rows) else {
            return self.leaf(rows);
        };
        self.gain[choice.feature] += choice.gain;
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf { weight: 0.0 });
        let left = self.grow(&choice.left, depth + 1);
        let right = self.grow(&choice.right, depth + 1);
        self.nodes[at] = Node::Split {
            feature: choice.feature,
            threshold: choice.threshold,
            default_left: choice.default_left,
            left,
            right,
        };
        at
    }
}

/// Mean cross-entropy of `labels` under softmax(`margins`).
pub fn cross_entropy(margins: &[[f64; NUM_CLASSES]], labels: &[RaceClass]) -> f64 {
    let total: f64 = margins
        .iter()
        .zip(labels)
        .map(|(m, y)| {
            let max = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(m.iter().map(|z| libm::exp(z - max)).sum::<f64>());
            lse - m[y.code()]
        })
        .sum();
    total / margins.len().max(1) as f64
}

/// Fits the ensemble. `on_round` receives the round index and the training
/// cross-entropy after that round.
pub fn fit_with_observer(
    features: &[FilterFeatures],
    labels: &[RaceClass],
    config: &GbdtConfig,
    mut on_round: impl FnMut(usize, f64),
) -> Result<GbdtModel> {
    config.validate()?;
    if features.len() != labels.len() {
        return Err(Error::LengthMismatch {
            preds: features.len(),
            labels: labels.len(),
        });
    }
    let first = *labels.first().ok_or(Error::Empty)?;
    if labels.iter().all(|l| *l == first) {
        return Err(Error::DegenerateLabels(first));
    }
    if features.iter().any(|f| f.0.iter().any(|v| v.is_infinite())) {
        return Err(Error::Invariant("filter features must be finite".into()));
    }

    let n = features.len();
    let mut model = GbdtModel::empty(*config);
    let mut margins = alloc::vec![model.base_score; n];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut grad = alloc::vec![0.0; n];
    let mut hess = alloc::vec![0.0; n];
    let sample_size = (libm::round(n as f64 * config.subsample) as usize).clamp(1, n);

    for round in 0..config.num_rounds {
        let probs: Vec<RaceDistribution> = margins.iter().map(RaceDistribution::softmax).collect();
        let mut rows: Vec<usize> = if sample_size == n {
            (0..n).collect()
        } else {
            sample(&mut rng, n, sample_size).into_vec()
        };
        rows.sort_unstable();

        let mut trees: [Option<Tree>; NUM_CLASSES] = Default::default();
        for (k, slot) in trees.iter_mut().enumerate() {
            for i in 0..n {
                let p = probs[i].probs()[k];
                let y = if labels[i].code() == k { 1.0 } else { 0.0 };
                grad[i] = p - y;
                hess[i] = p * (1.0 - p);
            }
            let mut builder = TreeBuilder {
                x: features,
                grad: &grad,
                hess: &hess,
                config,
                nodes: Vec::new(),
                gain: [0.0; NUM_FEATURES],
            };
            builder.grow(&rows, 0);
            for (total, g) in model.gain.iter_mut().zip(builder.gain) {
                *total += g;
            }
            *slot = Some(Tree {
                nodes: builder.nodes,
            });
        }
        let trees = trees.map(|t| t.expect("tree built for every class"));
        for (m, x) in margins.iter_mut().zip(features) {
            for (k, tree) in trees.iter().enumerate() {
                m[k] += tree.predict(&x.0);
            }
        }
        model.rounds.push(trees);
        on_round(round, cross_entropy(&margins, labels));
    }
    Ok(model)
}

pub fn fit(features: &[FilterFeatures], labels: &[RaceClass], config: &GbdtConfig) -> Result<GbdtModel> {
    fit_with_observer(features, labels, config, |_, _| {})
}

pub fn accuracy(model: &GbdtModel, features: &[FilterFeatures], labels: &[RaceClass]) -> f64 {
    let hits = features
        .iter()
        .zip(labels)
        .filter(|(x, y)| model.predict(x).classify() == **y)
        .count();
    hits as f64 / features.len().max(1) as f64
}

/// The grid searched when tuning the filter: rounds × depth × learning rate.
pub fn default_grid(base: &GbdtConfig) -> Vec<GbdtConfig> {
    let mut grid = Vec::new();
    for num_rounds in [50, 200] {
        for max_depth in [3, 6] {
            for learning_rate in [0.1, 0.3] {
                grid.push(GbdtConfig {
                    num_rounds,
                    max_depth,
                    learning_rate,
                    ..*base
                });
            }
        }
    }
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub config: GbdtConfig,
    pub selection_accuracy: f64,
}

/// Fits every grid point on `fit_set`, scores it on `select_set`, and returns
/// the best configuration (first in grid order on ties) with all scores.
pub fn grid_search(
    grid: &[GbdtConfig],
    fit_set: (&[FilterFeatures], &[RaceClass]),
    select_set: (&[FilterFeatures], &[RaceClass]),
) -> Result<(GbdtConfig, Vec<GridResult>)> {
    let mut results = Vec::with_capacity(grid.len());
    let mut best: Option<(GbdtConfig, f64)> = None;
    for config in grid {
        let model = fit(fit_set.0, fit_set.1, config)?;
        let acc = accuracy(&model, select_set.0, select_set.1);
        results.push(GridResult {
            config: *config,
            selection_accuracy: acc,
        });
        if best.is_none_or(|(_, b)| acc > b) {
            best = Some((*config, acc));
        }
    }
    let (config, _) = best.ok_or(Error::Empty)?;
    Ok((config, results))
}
