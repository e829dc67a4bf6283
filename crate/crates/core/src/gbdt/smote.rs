//! SMOTE minority oversampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `x + u (nn - x)`; a non-finite coordinate on either side keeps `x`'s value.
pub fn interpolate(x: &[f64], nn: &[f64], u: f64) -> Vec<f64> {
    x.iter().zip(nn).map(|(a, b)| if a.is_finite() && b.is_finite() { a + u * (b - a) } else { *a }).collect()
}

fn standardize(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let nf = rows.first().map_or(0, Vec::len);
    let mut scaled = rows.to_vec();
    for f in 0..nf {
        let vals: Vec<f64> = rows.iter().map(|r| r[f]).filter(|v| v.is_finite()).collect();
        if vals.is_empty() {
            continue;
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for r in &mut scaled {
            r[f] = (r[f] - mean) / sd;
        }
    }
    scaled
}

fn distance2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| x.is_finite() && y.is_finite()).map(|(x, y)| (x - y).powi(2)).sum()
}

/// `target` synthetic rows interpolated between minority rows and one of
/// their `k` nearest minority neighbours (Euclidean over standardized
/// features, ties by row order). Base rows are visited round-robin.
pub fn smote_oversample(minority: &[Vec<f64>], k: usize, target: usize, seed: u64) -> Vec<Vec<f64>> {
    let n = minority.len();
    if n == 0 || target == 0 {
        return Vec::new();
    }
    let k = if n <= k {
        log::warn!("minority has {n} rows; reducing SMOTE neighbours from {k} to {}", n - 1);
        n - 1
    } else {
        k
    };
    let scaled = standardize(minority);
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut others: Vec<(f64, usize)> =
                (0..n).filter(|j| *j != i).map(|j| (distance2(&scaled[i], &scaled[j]), j)).collect();
            others.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            others.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..target)
        .map(|s| {
            let i = s % n;
            if neighbours[i].is_empty() {
                return minority[i].clone();
            }
            let j = neighbours[i][rng.gen_range(0..neighbours[i].len())];
            let u: f64 = rng.gen();
            interpolate(&minority[i], &minority[j], u)
        })
        .collect()
}
