//! The six pairwise likelihood-group classifiers.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::partition::{split_data, Partition};
use super::{smote_oversample, train, Dataset, Ensemble, PositiveWeight, TrainConfig, TrainLogRow};
use crate::cohort::Cohort;
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, BinaryMetrics, DEFAULT_THRESHOLD};
use crate::risk::Likelihood;

/// Label pairs in tenths, lower group first.
pub const PAIRS: [(u8, u8); 6] = [(0, 2), (2, 4), (4, 6), (6, 8), (8, 10), (2, 6)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PairSpec {
    pub negative: Likelihood,
    /// The higher-likelihood group.
    pub positive: Likelihood,
}

impl PairSpec {
    pub fn all() -> Vec<PairSpec> {
        PAIRS
            .iter()
            .map(|(a, b)| PairSpec {
                negative: Likelihood::from_tenths(*a).unwrap(),
                positive: Likelihood::from_tenths(*b).unwrap(),
            })
            .collect()
    }

    /// File-name form, e.g. `0.0_vs_0.2`.
    pub fn id(&self) -> String {
        format!("{}_vs_{}", self.negative, self.positive)
    }
}

impl fmt::Display for PairSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} vs {}", self.negative, self.positive)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Imbalance {
    /// Positive rows weighted by `positive_weight` (auto by default).
    Weight,
    /// Minority training rows oversampled to the majority count, unweighted.
    Smote,
    /// Unweighted, no resampling.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub train: TrainConfig,
    pub imbalance: Imbalance,
    pub smote_k: usize,
    pub threshold: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            train: TrainConfig::default(),
            imbalance: Imbalance::Weight,
            smote_k: 5,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairModel {
    pub pair: PairSpec,
    pub ensemble: Ensemble,
    pub log: Vec<TrainLogRow>,
    /// `[negatives, positives]` per train, validation, test.
    pub split_counts: [[usize; 2]; 3],
    pub positive_weight: f64,
    pub smote_rows: usize,
    /// Cohort row indices of the test partition, with their data and scores.
    pub test_rows: Vec<usize>,
    pub test: Dataset,
    pub test_scores: Vec<f64>,
    pub metrics: BinaryMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub models: Vec<PairModel>,
    pub skipped: Vec<(PairSpec, String)>,
}

fn pair_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.gen()
}

pub fn train_pair(cohort: &Cohort, pair: PairSpec, index: usize, config: &SuiteConfig) -> Result<PairModel> {
    let rows: Vec<usize> =
        (0..cohort.rows.len()).filter(|i| [pair.negative, pair.positive].contains(&cohort.rows[*i].label)).collect();
    let labels: Vec<bool> = rows.iter().map(|i| cohort.rows[*i].label == pair.positive).collect();
    let seed = pair_seed(config.train.seed, index);
    let split = split_data(&labels, seed, [&pair.negative.to_string(), &pair.positive.to_string()])?;

    let data = Dataset::new(rows.iter().map(|i| cohort.rows[*i].features.clone()).collect(), labels);
    let part = |p: Partition| split.indices(p);
    let (train_idx, valid_idx, test_idx) = (part(Partition::Train), part(Partition::Validation), part(Partition::Test));
    let mut train_set = data.subset(&train_idx);
    let valid_set = data.subset(&valid_idx);
    let test = data.subset(&test_idx);
    let count = |d: &Dataset| {
        let pos = d.labels.iter().filter(|y| **y).count();
        [d.len() - pos, pos]
    };
    let split_counts = [count(&train_set), count(&valid_set), count(&test)];

    let mut cfg = config.train.clone();
    cfg.seed = seed;
    let mut smote_rows = 0;
    match config.imbalance {
        Imbalance::Weight => {}
        Imbalance::None => cfg.positive_weight = PositiveWeight::Fixed(1.0),
        Imbalance::Smote => {
            cfg.positive_weight = PositiveWeight::Fixed(1.0);
            let [neg, pos] = split_counts[0];
            let minority_label = pos < neg;
            let minority: Vec<Vec<f64>> = train_set
                .rows
                .iter()
                .zip(&train_set.labels)
                .filter(|(_, y)| **y == minority_label)
                .map(|(r, _)| r.clone())
                .collect();
            let synthetic = smote_oversample(&minority, config.smote_k, neg.max(pos) - neg.min(pos), seed);
            smote_rows = synthetic.len();
            train_set.labels.extend(std::iter::repeat_n(minority_label, synthetic.len()));
            train_set.rows.extend(synthetic);
        }
    }
    let positive_weight = cfg.positive_weight.resolve(&train_set.labels);

    let (ensemble, log) = train(&train_set, Some(&valid_set), &cohort.feature_names, &cfg)?;
    let test_scores: Vec<f64> = test.rows.iter().map(|r| super::sigmoid(ensemble.margin_unchecked(r))).collect();
    let metrics = compute_metrics(&test.labels, &test_scores, config.threshold);
    Ok(PairModel {
        pair,
        ensemble,
        log,
        split_counts,
        positive_weight,
        smote_rows,
        test_rows: test_idx.iter().map(|i| rows[*i]).collect(),
        test,
        test_scores,
        metrics,
    })
}

/// Trains every pair; pairs with an empty or too-small class are skipped and
/// reported rather than failing the suite.
pub fn run_pairwise_suite(cohort: &Cohort, config: &SuiteConfig) -> Result<SuiteResult> {
    config.train.validate()?;
    if !(0.0..=1.0).contains(&config.threshold) {
        return Err(Error::Config("threshold must be in [0, 1]".into()));
    }
    let outcomes: Vec<(PairSpec, Result<PairModel>)> = PairSpec::all()
        .into_par_iter()
        .enumerate()
        .map(|(i, pair)| (pair, train_pair(cohort, pair, i, config)))
        .collect();
    let mut models = Vec::new();
    let mut skipped = Vec::new();
    for (pair, outcome) in outcomes {
        match outcome {
            Ok(m) => models.push(m),
            Err(e @ (Error::TooFewRows { .. } | Error::SingleClass)) => {
                log::warn!("skipping pair {pair}: {e}");
                skipped.push((pair, e.to_string()));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(SuiteResult { models, skipped })
}
