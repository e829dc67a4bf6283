//! Newton boosting loop with a monotone-loss guard and early stopping.

use super::histogram::{best_split, BinnedMatrix, SplitParams};
use super::{logistic_loss, sigmoid, Dataset, Ensemble, Node, TrainConfig, Tree};
use crate::error::{Error, Result};
use crate::metrics::auc;

/// Halvings tried before a loss-increasing tree is discarded.
const MAX_HALVINGS: u32 = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    /// Trees in the model after this round; 0 is the base score alone.
    pub round: usize,
    pub train_loss: f64,
    pub valid_auc: Option<f64>,
    pub leaves: usize,
    /// Factor applied to the round's leaf values by the loss guard.
    pub step: f64,
}

impl TrainLogRow {
    pub const HEADER: &'static str = "round,train_loss,valid_auc,leaves,step";

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.round,
            self.train_loss,
            self.valid_auc.map_or_else(String::new, |a| a.to_string()),
            self.leaves,
            self.step
        )
    }
}

struct Grower<'a> {
    rows: &'a [Vec<f64>],
    matrix: &'a BinnedMatrix,
    grad: &'a [f64],
    hess: &'a [f64],
    params: SplitParams,
    max_depth: usize,
    nodes: Vec<Node>,
}

impl Grower<'_> {
    fn grow(&mut self, idx: Vec<usize>, depth: usize) -> usize {
        let (g, h) = idx.iter().fold((0.0, 0.0), |(g, h), &i| (g + self.grad[i], h + self.hess[i]));
        let id = self.nodes.len();
        let leaf = Node::Leaf { value: -g / (h + self.params.l2), cover: h };
        self.nodes.push(leaf.clone());
        if depth >= self.max_depth || idx.len() < 2 {
            return id;
        }
        let Some(split) = best_split(self.matrix, &idx, self.grad, self.hess, &self.params) else {
            return id;
        };
        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| {
            let x = self.rows[i][split.feature];
            if x.is_finite() {
                x < split.threshold
            } else {
                split.missing_left
            }
        });
        let left = self.grow(left_idx, depth + 1);
        let right = self.grow(right_idx, depth + 1);
        self.nodes[id] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            missing_left: split.missing_left,
            left,
            right,
            cover: h,
        };
        id
    }
}

fn check_rows(data: &Dataset, arity: usize) -> Result<()> {
    match data.rows.iter().find(|r| r.len() != arity) {
        Some(r) => Err(Error::ArityMismatch { expected: arity, got: r.len() }),
        None => Ok(()),
    }
}

/// Fits an ensemble on `train`. With a two-class `valid` set, boosting stops
/// after `patience` rounds without AUC improvement and the model is cut back
/// to its best validation round.
pub fn train(
    train: &Dataset,
    valid: Option<&Dataset>,
    feature_names: &[String],
    config: &TrainConfig,
) -> Result<(Ensemble, Vec<TrainLogRow>)> {
    config.validate()?;
    let nf = feature_names.len();
    check_rows(train, nf)?;
    if let Some(v) = valid {
        check_rows(v, nf)?;
    }
    let pos = train.labels.iter().filter(|y| **y).count();
    if pos == 0 || pos == train.len() {
        return Err(Error::SingleClass);
    }

    let w_pos = config.positive_weight.resolve(&train.labels);
    let weights: Vec<f64> = train.labels.iter().map(|y| if *y { w_pos } else { 1.0 }).collect();
    let (wp, wn) =
        train.labels.iter().zip(&weights).fold((0.0, 0.0), |(p, n), (y, w)| if *y { (p + w, n) } else { (p, n + w) });
    let base_score = (wp / wn).ln();

    let matrix = BinnedMatrix::new(&train.rows, nf, config.bins);
    let params = SplitParams { l2: config.l2, min_child_hessian: config.min_child_hessian };
    let mut margins = vec![base_score; train.len()];
    let mut valid_margins = valid.map(|v| vec![base_score; v.len()]);
    let valid_auc = |m: &Option<Vec<f64>>| match (valid, m) {
        (Some(v), Some(m)) => auc(&v.labels, m),
        _ => None,
    };

    let mut loss = logistic_loss(&margins, &train.labels, &weights);
    let mut log =
        vec![TrainLogRow { round: 0, train_loss: loss, valid_auc: valid_auc(&valid_margins), leaves: 0, step: 0.0 }];
    let mut best: Option<(f64, usize)> = log[0].valid_auc.map(|a| (a, 0));
    let mut trees: Vec<Tree> = Vec::new();
    let mut grad = vec![0.0; train.len()];
    let mut hess = vec![0.0; train.len()];

    for round in 1..=config.rounds {
        for i in 0..train.len() {
            let p = sigmoid(margins[i]);
            let y = if train.labels[i] { 1.0 } else { 0.0 };
            grad[i] = weights[i] * (p - y);
            hess[i] = weights[i] * p * (1.0 - p);
        }
        let mut grower = Grower {
            rows: &train.rows,
            matrix: &matrix,
            grad: &grad,
            hess: &hess,
            params,
            max_depth: config.max_depth,
            nodes: Vec::new(),
        };
        grower.grow((0..train.len()).collect(), 0);
        let mut tree = Tree { nodes: grower.nodes };
        if tree.nodes.len() == 1 {
            if round == 1 {
                log::warn!("no valid split at the root; model is the base score only");
            }
            break;
        }

        let delta: Vec<f64> = train.rows.iter().map(|r| config.learning_rate * tree.predict(r)).collect();
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let candidate: Vec<f64> = margins.iter().zip(&delta).map(|(m, d)| m + step * d).collect();
            let l = logistic_loss(&candidate, &train.labels, &weights);
            if l <= loss {
                accepted = Some((candidate, l));
                break;
            }
            step *= 0.5;
        }
        let Some((candidate, new_loss)) = accepted else {
            log::debug!("round {round}: no step reduced the training loss; stopping");
            break;
        };
        if step < 1.0 {
            tree.scale_leaves(step);
        }
        margins = candidate;
        loss = new_loss;
        if let (Some(v), Some(vm)) = (valid, valid_margins.as_mut()) {
            for (m, r) in vm.iter_mut().zip(&v.rows) {
                *m += config.learning_rate * tree.predict(r);
            }
        }
        let leaves = tree.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count();
        trees.push(tree);
        let va = valid_auc(&valid_margins);
        log.push(TrainLogRow { round, train_loss: loss, valid_auc: va, leaves, step });

        if let (Some(a), Some((best_auc, _))) = (va, best) {
            if a > best_auc {
                best = Some((a, trees.len()));
            }
        }
        if let Some((_, best_round)) = best {
            if config.patience > 0 && trees.len() - best_round >= config.patience {
                break;
            }
        }
    }

    if let Some((_, best_round)) = best {
        trees.truncate(best_round);
        log.truncate(best_round + 1);
    }
    let ensemble =
        Ensemble { base_score, learning_rate: config.learning_rate, feature_names: feature_names.to_vec(), trees };
    Ok((ensemble, log))
}
