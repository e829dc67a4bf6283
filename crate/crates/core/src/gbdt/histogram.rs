//! Feature binning and histogram split search.

use rayon::prelude::*;

pub const MISSING_BIN: u16 = u16::MAX;

/// A value strictly above `a` and at most `b`, so `a` routes left and `b`
/// routes right under `x < threshold`.
fn cut_between(a: f64, b: f64) -> f64 {
    let m = a / 2.0 + b / 2.0;
    if m > a && m <= b {
        m
    } else {
        b
    }
}

/// Thresholds between distinct finite values: every gap when there are at
/// most `max_bins` distinct values, otherwise gaps at count quantiles.
pub fn thresholds_for(values: &[f64], max_bins: usize) -> Vec<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut distinct: Vec<(f64, usize)> = Vec::new();
    for x in v.iter() {
        match distinct.last_mut() {
            Some((d, c)) if *d == *x => *c += 1,
            _ => distinct.push((*x, 1)),
        }
    }
    if distinct.len() <= max_bins {
        return distinct.windows(2).map(|w| cut_between(w[0].0, w[1].0)).collect();
    }
    let n = v.len();
    let mut cuts = Vec::new();
    let mut cumulative = 0usize;
    let mut k = 1usize;
    for i in 0..distinct.len() - 1 {
        cumulative += distinct[i].1;
        if k < max_bins && cumulative * max_bins >= k * n {
            cuts.push(cut_between(distinct[i].0, distinct[i + 1].0));
            while k < max_bins && cumulative * max_bins >= k * n {
                k += 1;
            }
        }
    }
    cuts
}

pub fn bin_of(thresholds: &[f64], x: f64) -> u16 {
    if !x.is_finite() {
        MISSING_BIN
    } else {
        thresholds.partition_point(|t| *t <= x) as u16
    }
}

/// Column-major bin indices for one training matrix.
#[derive(Debug, Clone)]
pub struct BinnedMatrix {
    pub thresholds: Vec<Vec<f64>>,
    pub bins: Vec<Vec<u16>>,
}

impl BinnedMatrix {
    pub fn new(rows: &[Vec<f64>], n_features: usize, max_bins: usize) -> Self {
        let (thresholds, bins) = (0..n_features)
            .into_par_iter()
            .map(|f| {
                let column: Vec<f64> = rows.iter().map(|r| r[f]).collect();
                let t = thresholds_for(&column, max_bins);
                let b = column.iter().map(|x| bin_of(&t, *x)).collect();
                (t, b)
            })
            .unzip();
        BinnedMatrix { thresholds, bins }
    }

    pub fn n_features(&self) -> usize {
        self.thresholds.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitParams {
    pub l2: f64,
    pub min_child_hessian: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    pub missing_left: bool,
    pub gain: f64,
}

pub fn leaf_score(g: f64, h: f64, l2: f64) -> f64 {
    g * g / (h + l2)
}

/// Regularized second-order gain of splitting a node into two children.
///
/// Expanding the weighted log loss to second order around the current margins,
/// a leaf holding gradient sum `G` and hessian sum `H` takes value `-G/(H+l2)`
/// and lowers the loss by `G²/(2(H+l2))`. The gain is the children's reduction
/// minus the parent's.
pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, l2: f64) -> f64 {
    0.5 * (leaf_score(gl, hl, l2) + leaf_score(gr, hr, l2) - leaf_score(gl + gr, hl + hr, l2))
}

#[derive(Debug, Clone, Copy, Default)]
struct Bucket {
    g: f64,
    h: f64,
    n: usize,
}

impl Bucket {
    fn add(&mut self, o: &Bucket) {
        self.g += o.g;
        self.h += o.h;
        self.n += o.n;
    }
}

fn feature_best(
    matrix: &BinnedMatrix,
    f: usize,
    idx: &[usize],
    grad: &[f64],
    hess: &[f64],
    p: &SplitParams,
) -> Option<SplitCandidate> {
    let t = &matrix.thresholds[f];
    if t.is_empty() {
        return None;
    }
    let mut hist = vec![Bucket::default(); t.len() + 1];
    let mut missing = Bucket::default();
    let col = &matrix.bins[f];
    for &i in idx {
        let b = col[i];
        let slot = if b == MISSING_BIN { &mut missing } else { &mut hist[usize::from(b)] };
        slot.g += grad[i];
        slot.h += hess[i];
        slot.n += 1;
    }
    let mut total = Bucket::default();
    hist.iter().for_each(|b| total.add(b));

    let ok = |b: &Bucket| b.n > 0 && b.h >= p.min_child_hessian;
    let mut best: Option<SplitCandidate> = None;
    let mut left = Bucket::default();
    for (b, bucket) in hist.iter().enumerate().take(t.len()) {
        left.add(bucket);
        let right = Bucket { g: total.g - left.g, h: total.h - left.h, n: total.n - left.n };
        if left.n == 0 || right.n == 0 {
            continue;
        }
        for missing_left in [true, false] {
            let (mut l, mut r) = (left, right);
            if missing_left {
                l.add(&missing);
            } else {
                r.add(&missing);
            }
            if !ok(&l) || !ok(&r) {
                continue;
            }
            let gain = split_gain(l.g, l.h, r.g, r.h, p.l2);
            if gain > 0.0 && best.is_none_or(|c| gain > c.gain) {
                best = Some(SplitCandidate { feature: f, threshold: t[b], missing_left, gain });
            }
        }
    }
    best
}

/// Highest-gain split over all features for the rows in `idx`. Ties keep the
/// lowest feature index, then the lowest threshold, then missing-left.
pub fn best_split(
    matrix: &BinnedMatrix,
    idx: &[usize],
    grad: &[f64],
    hess: &[f64],
    params: &SplitParams,
) -> Option<SplitCandidate> {
    let per_feature: Vec<Option<SplitCandidate>> =
        (0..matrix.n_features()).into_par_iter().map(|f| feature_best(matrix, f, idx, grad, hess, params)).collect();
    per_feature.into_iter().flatten().fold(None, |best: Option<SplitCandidate>, c| match best {
        Some(b) if b.gain >= c.gain => Some(b),
        _ => Some(c),
    })
}
