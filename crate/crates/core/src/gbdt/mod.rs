//! Second-order gradient-boosted decision trees for binary classification.

mod format;
pub mod histogram;
pub mod partition;
pub mod smote;
pub mod suite;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{read_model, write_model};
pub use partition::{split_data, Partition, SplitSpec};
pub use smote::{interpolate, smote_oversample};
pub use suite::{run_pairwise_suite, Imbalance, PairModel, PairSpec, SuiteConfig, SuiteResult, PAIRS};
pub use train::{train, TrainLogRow};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    /// Rows with `x < threshold` go left; non-finite values follow `missing_left`.
    Split {
        feature: usize,
        threshold: f64,
        missing_left: bool,
        left: usize,
        right: usize,
        cover: f64,
    },
    Leaf {
        value: f64,
        cover: f64,
    },
}

impl Node {
    pub fn cover(&self) -> f64 {
        match self {
            Node::Split { cover, .. } | Node::Leaf { cover, .. } => *cover,
        }
    }
}

/// Flat binary tree; node 0 is the root. Cover is the training hessian sum
/// reaching the node.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(value: f64, cover: f64) -> Tree {
        Tree { nodes: vec![Node::Leaf { value, cover }] }
    }

    pub fn leaf_index(&self, row: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { .. } => return i,
                Node::Split { feature, threshold, missing_left, left, right, .. } => {
                    let x = row[*feature];
                    let go_left = if !x.is_finite() { *missing_left } else { x < *threshold };
                    i = if go_left { *left } else { *right };
                }
            }
        }
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        match &self.nodes[self.leaf_index(row)] {
            Node::Leaf { value, .. } => *value,
            Node::Split { .. } => unreachable!(),
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
            }
        }
        go(self, 0)
    }

    pub fn scale_leaves(&mut self, factor: f64) {
        for n in &mut self.nodes {
            if let Node::Leaf { value, .. } = n {
                *value *= factor;
            }
        }
    }

    pub fn features_used(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self
            .nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .collect();
        f.sort_unstable();
        f.dedup();
        f
    }
}

/// Margin = base score + learning rate × Σ tree outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub base_score: f64,
    pub learning_rate: f64,
    pub feature_names: Vec<String>,
    pub trees: Vec<Tree>,
}

impl Ensemble {
    pub fn check_arity(&self, row: &[f64]) -> Result<()> {
        if row.len() == self.feature_names.len() {
            Ok(())
        } else {
            Err(Error::ArityMismatch { expected: self.feature_names.len(), got: row.len() })
        }
    }

    pub fn predict_margin(&self, row: &[f64]) -> Result<f64> {
        self.check_arity(row)?;
        Ok(self.margin_unchecked(row))
    }

    pub fn predict_proba(&self, row: &[f64]) -> Result<f64> {
        self.predict_margin(row).map(sigmoid)
    }

    pub(crate) fn margin_unchecked(&self, row: &[f64]) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict(row)).sum();
        self.base_score + self.learning_rate * sum
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PositiveWeight {
    /// `#negatives / #positives` of the training rows.
    Auto(AutoTag),
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

impl PositiveWeight {
    pub const AUTO: PositiveWeight = PositiveWeight::Auto(AutoTag::Auto);

    pub fn resolve(self, labels: &[bool]) -> f64 {
        match self {
            PositiveWeight::Fixed(w) => w,
            PositiveWeight::Auto(_) => {
                let pos = labels.iter().filter(|y| **y).count();
                let neg = labels.len() - pos;
                if pos == 0 {
                    1.0
                } else {
                    neg as f64 / pos as f64
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_depth: usize,
    pub rounds: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub min_child_hessian: f64,
    pub positive_weight: PositiveWeight,
    /// Rounds without validation-AUC improvement before stopping; 0 disables.
    pub patience: usize,
    pub bins: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_depth: 4,
            rounds: 200,
            learning_rate: 0.1,
            l2: 1.0,
            min_child_hessian: 1.0,
            positive_weight: PositiveWeight::AUTO,
            patience: 20,
            bins: 256,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train config: {m}")));
        if self.max_depth == 0 {
            return bad("max_depth must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.l2 >= 0.0) || !(self.min_child_hessian >= 0.0) {
            return bad("l2 and min_child_hessian must be non-negative");
        }
        if let PositiveWeight::Fixed(w) = self.positive_weight {
            if !(w > 0.0 && w.is_finite()) {
                return bad("positive_weight must be positive or \"auto\"");
            }
        }
        if self.bins < 2 || self.bins > usize::from(u16::MAX) {
            return bad("bins must be in 2..=65535");
        }
        Ok(())
    }
}

/// Row-major feature matrix with binary labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
}

impl Dataset {
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<bool>) -> Self {
        assert_eq!(rows.len(), labels.len(), "rows and labels differ in length");
        Dataset { rows, labels }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            rows: idx.iter().map(|i| self.rows[*i].clone()).collect(),
            labels: idx.iter().map(|i| self.labels[*i]).collect(),
        }
    }
}

/// Weighted mean logistic loss of margins against labels.
pub fn logistic_loss(margins: &[f64], labels: &[bool], weights: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut wsum = 0.0;
    for ((m, y), w) in margins.iter().zip(labels).zip(weights) {
        // log(1 + e^m) - y m, computed stably
        let softplus = if *m > 0.0 { m + (-m).exp().ln_1p() } else { m.exp().ln_1p() };
        total += w * (softplus - if *y { *m } else { 0.0 });
        wsum += w;
    }
    if wsum > 0.0 {
        total / wsum
    } else {
        0.0
    }
}
