//! Path-dependent TreeSHAP, a brute-force Shapley oracle and global
//! importance summaries.
//!
//! Both methods use the same value function: for a coalition `S`, walk the
//! tree following the row on features in `S` and averaging children by
//! training cover everywhere else. Child weights are `cover(child) /
//! (cover(left) + cover(right))`, so they sum to exactly one at every split.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gbdt::{Ensemble, Node, Tree};

pub const MAX_ORACLE_FEATURES: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapAttribution {
    /// Cover-weighted expected margin.
    pub base: f64,
    pub contributions: Vec<f64>,
}

impl ShapAttribution {
    pub fn total(&self) -> f64 {
        self.base + self.contributions.iter().sum::<f64>()
    }
}

/// `(feature, left, right, left weight, right weight)` of a split node.
fn children(tree: &Tree, node: usize) -> Option<(usize, usize, usize, f64, f64)> {
    match &tree.nodes[node] {
        Node::Leaf { .. } => None,
        Node::Split { feature, left, right, .. } => {
            let (cl, cr) = (tree.nodes[*left].cover(), tree.nodes[*right].cover());
            // a zero-cover child would make the path weights singular
            let (wl, wr) = if cl > 0.0 && cr > 0.0 { (cl / (cl + cr), cr / (cl + cr)) } else { (0.5, 0.5) };
            Some((*feature, *left, *right, wl, wr))
        }
    }
}

fn goes_left(tree: &Tree, node: usize, row: &[f64]) -> bool {
    match &tree.nodes[node] {
        Node::Split { feature, threshold, missing_left, .. } => {
            let x = row[*feature];
            if x.is_finite() {
                x < *threshold
            } else {
                *missing_left
            }
        }
        Node::Leaf { .. } => unreachable!("leaves have no branch"),
    }
}

/// Cover-weighted mean leaf value of a tree.
pub fn expected_value(tree: &Tree) -> f64 {
    fn go(t: &Tree, n: usize) -> f64 {
        match (&t.nodes[n], children(t, n)) {
            (Node::Leaf { value, .. }, _) => *value,
            (_, Some((_, l, r, wl, wr))) => wl * go(t, l) + wr * go(t, r),
            _ => unreachable!(),
        }
    }
    go(tree, 0)
}

#[derive(Debug, Clone, Copy)]
struct PathElement {
    feature: Option<usize>,
    zero: f64,
    one: f64,
    weight: f64,
}

fn extend(path: &mut Vec<PathElement>, zero: f64, one: f64, feature: Option<usize>) {
    let depth = path.len();
    path.push(PathElement { feature, zero, one, weight: if depth == 0 { 1.0 } else { 0.0 } });
    let d = depth as f64;
    for i in (0..depth).rev() {
        let w = path[i].weight;
        path[i + 1].weight += one * w * (i as f64 + 1.0) / (d + 1.0);
        path[i].weight = zero * w * (d - i as f64) / (d + 1.0);
    }
}

fn unwind(path: &mut Vec<PathElement>, index: usize) {
    let depth = path.len() - 1;
    let d = depth as f64;
    let (one, zero) = (path[index].one, path[index].zero);
    let mut next = path[depth].weight;
    for i in (0..depth).rev() {
        if one != 0.0 {
            let tmp = path[i].weight;
            path[i].weight = next * (d + 1.0) / ((i as f64 + 1.0) * one);
            next = tmp - path[i].weight * zero * (d - i as f64) / (d + 1.0);
        } else {
            path[i].weight = path[i].weight * (d + 1.0) / (zero * (d - i as f64));
        }
    }
    for i in index..depth {
        path[i].feature = path[i + 1].feature;
        path[i].zero = path[i + 1].zero;
        path[i].one = path[i + 1].one;
    }
    path.pop();
}

fn unwound_sum(path: &[PathElement], index: usize) -> f64 {
    let depth = path.len() - 1;
    let d = depth as f64;
    let (one, zero) = (path[index].one, path[index].zero);
    let mut next = path[depth].weight;
    let mut total = 0.0;
    for i in (0..depth).rev() {
        if one != 0.0 {
            let tmp = next * (d + 1.0) / ((i as f64 + 1.0) * one);
            total += tmp;
            next = path[i].weight - tmp * zero * (d - i as f64) / (d + 1.0);
        } else if zero != 0.0 {
            total += path[i].weight / zero / ((d - i as f64) / (d + 1.0));
        }
    }
    total
}

fn recurse(
    tree: &Tree,
    row: &[f64],
    phi: &mut [f64],
    node: usize,
    mut path: Vec<PathElement>,
    zero: f64,
    one: f64,
    feature: Option<usize>,
) {
    extend(&mut path, zero, one, feature);
    match (&tree.nodes[node], children(tree, node)) {
        (Node::Leaf { value, .. }, _) => {
            for i in 1..path.len() {
                let w = unwound_sum(&path, i);
                let el = path[i];
                phi[el.feature.expect("only the root element lacks a feature")] += w * (el.one - el.zero) * value;
            }
        }
        (_, Some((f, left, right, wl, wr))) => {
            let left_hot = goes_left(tree, node, row);
            let (hot, cold, w_hot, w_cold) = if left_hot { (left, right, wl, wr) } else { (right, left, wr, wl) };
            let (mut in_zero, mut in_one) = (1.0, 1.0);
            if let Some(k) = (1..path.len()).find(|k| path[*k].feature == Some(f)) {
                in_zero = path[k].zero;
                in_one = path[k].one;
                unwind(&mut path, k);
            }
            recurse(tree, row, phi, hot, path.clone(), w_hot * in_zero, in_one, Some(f));
            recurse(tree, row, phi, cold, path, w_cold * in_zero, 0.0, Some(f));
        }
        _ => unreachable!(),
    }
}

/// Attributions of one tree's raw output (no learning-rate scaling).
pub fn tree_shap_single(tree: &Tree, row: &[f64], n_features: usize) -> ShapAttribution {
    let mut phi = vec![0.0; n_features];
    recurse(tree, row, &mut phi, 0, Vec::with_capacity(tree.depth() + 2), 1.0, 1.0, None);
    ShapAttribution { base: expected_value(tree), contributions: phi }
}

/// Ensemble attributions in margin units: per-tree values summed, scaled by
/// the learning rate, plus the base score.
pub fn tree_shap(model: &Ensemble, row: &[f64]) -> Result<ShapAttribution> {
    model.check_arity(row)?;
    let nf = model.feature_names.len();
    let mut total = ShapAttribution { base: 0.0, contributions: vec![0.0; nf] };
    for t in &model.trees {
        let a = tree_shap_single(t, row, nf);
        total.base += a.base;
        for (c, v) in total.contributions.iter_mut().zip(a.contributions) {
            *c += v;
        }
    }
    total.base = model.base_score + model.learning_rate * total.base;
    total.contributions.iter_mut().for_each(|c| *c *= model.learning_rate);
    Ok(total)
}

pub fn tree_shap_rows(model: &Ensemble, rows: &[Vec<f64>]) -> Result<Vec<ShapAttribution>> {
    rows.par_iter().map(|r| tree_shap(model, r)).collect()
}

/// Tree-conditional expectation with the features in `known` fixed to `row`.
pub fn conditional_value(tree: &Tree, row: &[f64], known: &[bool]) -> f64 {
    fn go(t: &Tree, row: &[f64], known: &[bool], n: usize) -> f64 {
        match (&t.nodes[n], children(t, n)) {
            (Node::Leaf { value, .. }, _) => *value,
            (_, Some((f, l, r, wl, wr))) => {
                if known[f] {
                    go(t, row, known, if goes_left(t, n, row) { l } else { r })
                } else {
                    wl * go(t, row, known, l) + wr * go(t, row, known, r)
                }
            }
            _ => unreachable!(),
        }
    }
    go(tree, row, known, 0)
}

/// Classical Shapley values over the features the tree splits on, by
/// enumerating every coalition. Features absent from the tree get zero.
pub fn brute_force_shap(tree: &Tree, row: &[f64], n_features: usize) -> Result<Vec<f64>> {
    let used = tree.features_used();
    let m = used.len();
    if m > MAX_ORACLE_FEATURES {
        return Err(Error::TooManyFeatures(m));
    }
    let mut fact = vec![1.0f64; m + 1];
    for i in 1..=m {
        fact[i] = fact[i - 1] * i as f64;
    }
    let value = |mask: u32| {
        let mut known = vec![false; n_features];
        for (b, f) in used.iter().enumerate() {
            known[*f] = mask & (1 << b) != 0;
        }
        conditional_value(tree, row, &known)
    };
    let values: Vec<f64> = (0..(1u32 << m)).map(value).collect();
    let mut phi = vec![0.0; n_features];
    for (b, f) in used.iter().enumerate() {
        let bit = 1u32 << b;
        let mut sum = 0.0;
        for mask in 0..(1u32 << m) {
            if mask & bit != 0 {
                continue;
            }
            let s = mask.count_ones() as usize;
            let w = fact[s] * fact[m - s - 1] / fact[m];
            sum += w * (values[(mask | bit) as usize] - values[mask as usize]);
        }
        phi[*f] = sum;
    }
    Ok(phi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature: String,
    pub mean_abs: f64,
    /// 1-based.
    pub rank: usize,
}

/// Features by descending mean |contribution|, ties by name; at most `k`.
pub fn summarize(feature_names: &[String], attributions: &[ShapAttribution], k: usize) -> Vec<FeatureImportance> {
    let n = attributions.len().max(1) as f64;
    let mut items: Vec<(String, f64)> = feature_names
        .iter()
        .enumerate()
        .map(|(j, name)| (name.clone(), attributions.iter().map(|a| a.contributions[j].abs()).sum::<f64>() / n))
        .collect();
    items.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    items
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (feature, mean_abs))| FeatureImportance { feature, mean_abs, rank: i + 1 })
        .collect()
}

pub fn importance_csv(items: &[FeatureImportance]) -> String {
    let mut out = String::from("feature,mean_abs_contribution,rank\n");
    for i in items {
        out.push_str(&format!("{},{},{}\n", i.feature, i.mean_abs, i.rank));
    }
    out
}

/// Long-format `(row id, feature, value, contribution)` export; also serves
/// as the point set for summary plots.
pub fn attributions_csv(
    feature_names: &[String],
    row_ids: &[String],
    rows: &[Vec<f64>],
    attributions: &[ShapAttribution],
) -> String {
    let mut out = String::from("row_id,feature,feature_value,contribution\n");
    for ((id, row), a) in row_ids.iter().zip(rows).zip(attributions) {
        for (j, name) in feature_names.iter().enumerate() {
            out.push_str(&format!("{id},{name},{},{}\n", row[j], a.contributions[j]));
        }
    }
    out
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|a, b| values[*b].partial_cmp(&values[*a]).unwrap());
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation of two importance vectors over the same features,
/// with average ranks for ties. `None` when either vector is constant.
pub fn rank_correlation(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

/// Mean |contribution| per feature, in feature order.
pub fn mean_abs(attributions: &[ShapAttribution], n_features: usize) -> Vec<f64> {
    let n = attributions.len().max(1) as f64;
    (0..n_features).map(|j| attributions.iter().map(|a| a.contributions[j].abs()).sum::<f64>() / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random complete-ish tree over binary features with positive covers.
    pub(crate) fn random_tree(rng: &mut ChaCha8Rng, depth: usize, n_features: usize) -> Tree {
        fn build(rng: &mut ChaCha8Rng, nodes: &mut Vec<Node>, depth: usize, nf: usize) -> (usize, f64) {
            let id = nodes.len();
            if depth == 0 || rng.gen_bool(0.2) {
                let cover = rng.gen_range(0.5..10.0);
                nodes.push(Node::Leaf { value: rng.gen_range(-2.0..2.0), cover });
                return (id, cover);
            }
            nodes.push(Node::Leaf { value: 0.0, cover: 0.0 });
            let feature = rng.gen_range(0..nf);
            let (left, cl) = build(rng, nodes, depth - 1, nf);
            let (right, cr) = build(rng, nodes, depth - 1, nf);
            nodes[id] =
                Node::Split { feature, threshold: 0.5, missing_left: rng.gen_bool(0.5), left, right, cover: cl + cr };
            (id, cl + cr)
        }
        let mut nodes = Vec::new();
        build(rng, &mut nodes, depth, n_features);
        Tree { nodes }
    }

    #[test]
    fn leaf_only_tree() {
        let t = Tree::leaf(1.5, 3.0);
        let a = tree_shap_single(&t, &[0.0, 1.0], 2);
        assert_eq!(a.contributions, vec![0.0, 0.0]);
        assert_eq!(a.base, 1.5);
        assert_eq!(brute_force_shap(&t, &[0.0, 1.0], 2).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_split_only_touches_its_feature() {
        let t = Tree {
            nodes: vec![
                Node::Split { feature: 1, threshold: 0.5, missing_left: true, left: 1, right: 2, cover: 4.0 },
                Node::Leaf { value: -1.0, cover: 3.0 },
                Node::Leaf { value: 3.0, cover: 1.0 },
            ],
        };
        let a = tree_shap_single(&t, &[9.0, 1.0, 9.0], 3);
        assert_eq!(a.contributions[0], 0.0);
        assert_eq!(a.contributions[2], 0.0);
        assert!((a.base - 0.0).abs() < 1e-15);
        assert!((a.contributions[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_features_share_credit() {
        // f(x) = 1 iff x0 = 1 and x1 = 1, balanced covers
        let t = Tree {
            nodes: vec![
                Node::Split { feature: 0, threshold: 0.5, missing_left: true, left: 1, right: 2, cover: 4.0 },
                Node::Leaf { value: 0.0, cover: 2.0 },
                Node::Split { feature: 1, threshold: 0.5, missing_left: true, left: 3, right: 4, cover: 2.0 },
                Node::Leaf { value: 0.0, cover: 1.0 },
                Node::Leaf { value: 1.0, cover: 1.0 },
            ],
        };
        let phi = brute_force_shap(&t, &[1.0, 1.0], 2).unwrap();
        assert!((phi[0] - phi[1]).abs() < 1e-12);
        let a = tree_shap_single(&t, &[1.0, 1.0], 2);
        assert!((a.contributions[0] - phi[0]).abs() < 1e-12);
    }

    #[test]
    fn oracle_equivalence_on_random_trees() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let t = random_tree(&mut rng, 3, 6);
            let row: Vec<f64> =
                (0..6).map(|_| if rng.gen_bool(0.1) { f64::NAN } else { f64::from(rng.gen_range(0..2u8)) }).collect();
            let a = tree_shap_single(&t, &row, 6);
            let b = brute_force_shap(&t, &row, 6).unwrap();
            for (x, y) in a.contributions.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
            }
            assert!((a.total() - t.predict(&row)).abs() <= 1e-9);
        }
    }

    #[test]
    fn too_many_features_refused() {
        // chain: split f -> (leaf, split f + 1), thirteen distinct features
        let mut fixed = Vec::new();
        let n = 13;
        for f in 0..n {
            let split = 2 * f;
            let right = if f + 1 < n { 2 * (f + 1) } else { 2 * n };
            fixed.push(Node::Split {
                feature: f,
                threshold: 0.5,
                missing_left: true,
                left: split + 1,
                right,
                cover: 2.0,
            });
            fixed.push(Node::Leaf { value: 0.0, cover: 1.0 });
        }
        fixed.push(Node::Leaf { value: 1.0, cover: 1.0 });
        let t = Tree { nodes: fixed };
        assert!(matches!(brute_force_shap(&t, &[0.0; 13], 13), Err(Error::TooManyFeatures(13))));
    }

    proptest! {
        #[test]
        fn linearity_and_local_accuracy(seed in any::<u64>(), lr in 0.01f64..1.0, base in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t1 = random_tree(&mut rng, 3, 5);
            let t2 = random_tree(&mut rng, 3, 5);
            let row: Vec<f64> = (0..5).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
            let model = Ensemble {
                base_score: base,
                learning_rate: lr,
                feature_names: (0..5).map(|i| format!("f{i}")).collect(),
                trees: vec![t1.clone(), t2.clone()],
            };
            let a = tree_shap(&model, &row).unwrap();
            let a1 = tree_shap_single(&t1, &row, 5);
            let a2 = tree_shap_single(&t2, &row, 5);
            for j in 0..5 {
                prop_assert!((a.contributions[j] - lr * (a1.contributions[j] + a2.contributions[j])).abs() < 1e-12);
            }
            prop_assert!((a.total() - model.predict_margin(&row).unwrap()).abs() <= 1e-9);
            let unused: Vec<usize> = (0..5).filter(|f| !t1.features_used().contains(f) && !t2.features_used().contains(f)).collect();
            for f in unused {
                prop_assert_eq!(a.contributions[f], 0.0);
            }
        }
    }

    #[test]
    fn summary_ranking() {
        let names: Vec<String> = vec!["b".into(), "a".into(), "c".into()];
        let zero = vec![ShapAttribution { base: 0.0, contributions: vec![0.0; 3] }];
        let s = summarize(&names, &zero, 10);
        assert_eq!(s.iter().map(|i| i.feature.as_str()).collect::<Vec<_>>(), vec!["a", "b", "c"]);
        let attrs = vec![
            ShapAttribution { base: 0.0, contributions: vec![0.1, -0.5, 0.2] },
            ShapAttribution { base: 0.0, contributions: vec![-0.1, 0.3, 0.0] },
        ];
        let s = summarize(&names, &attrs, 2);
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].feature.as_str(), s[0].rank), ("a", 1));
        assert!((s[0].mean_abs - 0.4).abs() < 1e-12);
    }

    #[test]
    fn spearman() {
        assert_eq!(rank_correlation(&[3.0, 2.0, 1.0], &[30.0, 20.0, 10.0]), Some(1.0));
        assert_eq!(rank_correlation(&[3.0, 2.0, 1.0], &[1.0, 2.0, 3.0]), Some(-1.0));
        assert_eq!(rank_correlation(&[1.0, 1.0], &[1.0, 2.0]), None);
    }
}
