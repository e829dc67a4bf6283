//! Binary classification metrics, ROC points and cohort demographic summaries.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::cohort::CohortRow;
use crate::events::{Comorbidity, LivingFlag, Sex};
use crate::risk::Likelihood;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Ascending score order with NaN treated as the lowest score.
fn score_order(a: f64, b: f64) -> Ordering {
    match (a.is_nan(), b.is_nan()) {
        (true, true) => Ordering::Equal,
        (true, false) => Ordering::Less,
        (false, true) => Ordering::Greater,
        _ => a.partial_cmp(&b).unwrap(),
    }
}

/// Tie groups in descending score order as (positives, negatives).
fn tie_groups(labels: &[bool], scores: &[f64]) -> Vec<(u64, u64)> {
    assert_eq!(labels.len(), scores.len(), "labels and scores differ in length");
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|a, b| score_order(scores[*b], scores[*a]));
    let mut groups: Vec<(u64, u64)> = Vec::new();
    let mut prev: Option<f64> = None;
    for i in idx {
        let s = scores[i];
        let same = prev.is_some_and(|p| score_order(p, s) == Ordering::Equal);
        if !same {
            groups.push((0, 0));
        }
        let g = groups.last_mut().unwrap();
        if labels[i] {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
        prev = Some(s);
    }
    groups
}

/// Rank-statistic AUC with half credit for tied positive/negative pairs.
/// `None` when either class is absent.
pub fn auc(labels: &[bool], scores: &[f64]) -> Option<f64> {
    let groups = tie_groups(labels, scores);
    let pos: u64 = groups.iter().map(|g| g.0).sum();
    let neg: u64 = groups.iter().map(|g| g.1).sum();
    if pos == 0 || neg == 0 {
        return None;
    }
    // twice the concordance count keeps the half credits integral
    let mut twice = 0u128;
    let mut neg_below = neg;
    for (p, n) in groups {
        neg_below -= n;
        twice += 2 * u128::from(p) * u128::from(neg_below) + u128::from(p) * u128::from(n);
    }
    Some(twice as f64 / (2.0 * pos as f64 * neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores at or above this are called positive; infinite for the origin.
    pub threshold: f64,
}

/// One point per distinct score plus the origin. Tied scores move diagonally,
/// so the trapezoid area equals [`auc`].
pub fn roc_points(labels: &[bool], scores: &[f64]) -> Option<Vec<RocPoint>> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|a, b| score_order(scores[*b], scores[*a]));
    let groups = tie_groups(labels, scores);
    let pos: u64 = groups.iter().map(|g| g.0).sum();
    let neg: u64 = groups.iter().map(|g| g.1).sum();
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY }];
    let (mut tp, mut fp, mut at) = (0u64, 0u64, 0usize);
    for (p, n) in groups {
        tp += p;
        fp += n;
        at += (p + n) as usize;
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: scores[idx[at - 1]],
        });
    }
    Some(points)
}

pub fn trapezoid_area(points: &[RocPoint]) -> f64 {
    points.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub n: usize,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
}

/// Confusion-based metrics call a row positive when `score >= threshold`.
pub fn compute_metrics(labels: &[bool], scores: &[f64], threshold: f64) -> BinaryMetrics {
    assert_eq!(labels.len(), scores.len(), "labels and scores differ in length");
    let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    for (y, s) in labels.iter().zip(scores) {
        match (*y, *s >= threshold) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |a: u64, b: u64| (b > 0).then(|| a as f64 / b as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    BinaryMetrics {
        n: labels.len(),
        tp,
        fp,
        tn,
        fn_,
        accuracy: ratio(tp + tn, labels.len() as u64),
        precision,
        recall,
        f1,
        auc: auc(labels, scores),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

pub const METRICS_HEADER: &str = "model,accuracy,precision,recall,f1,auc_roc,n_test,tp,fp,tn,fn";

pub fn metrics_row(model: &str, m: &BinaryMetrics) -> String {
    format!(
        "{model},{},{},{},{},{},{},{},{},{},{}",
        fmt_opt(m.accuracy),
        fmt_opt(m.precision),
        fmt_opt(m.recall),
        fmt_opt(m.f1),
        fmt_opt(m.auc),
        m.n,
        m.tp,
        m.fp,
        m.tn,
        m.fn_
    )
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("fpr,tpr,threshold\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.fpr, p.tpr, p.threshold));
    }
    out
}

pub const AGE_BANDS: [(&str, u32, u32); 5] =
    [("18-24", 18, 24), ("25-44", 25, 44), ("45-64", 45, 64), ("65-84", 65, 84), ("85+", 85, u32::MAX)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryLine {
    pub section: String,
    pub category: String,
    /// Percent of each group's rows, aligned with [`CohortSummary::groups`].
    pub percents: Vec<f64>,
}

/// Table-1-shaped demographic summary: control, UTI overall, then each
/// positive likelihood level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub groups: Vec<String>,
    pub counts: Vec<usize>,
    pub lines: Vec<SummaryLine>,
}

pub fn cohort_summary(rows: &[CohortRow]) -> CohortSummary {
    let levels: Vec<Likelihood> = Likelihood::ALL.iter().copied().filter(|l| l.is_positive()).collect();
    let mut groups = vec!["control".to_string(), "uti_overall".to_string()];
    groups.extend(levels.iter().map(|l| l.to_string()));
    let members: Vec<Vec<&CohortRow>> = {
        let mut m: Vec<Vec<&CohortRow>> = vec![Vec::new(); groups.len()];
        for r in rows {
            if r.label.is_positive() {
                m[1].push(r);
                let i = levels.iter().position(|l| *l == r.label).expect("positive level");
                m[2 + i].push(r);
            } else {
                m[0].push(r);
            }
        }
        m
    };
    let mut lines = Vec::new();
    let mut line = |section: &str, category: &str, pred: &dyn Fn(&CohortRow) -> bool| {
        let percents =
            members
                .iter()
                .map(|g| {
                    if g.is_empty() {
                        0.0
                    } else {
                        100.0 * g.iter().filter(|r| pred(r)).count() as f64 / g.len() as f64
                    }
                })
                .collect();
        lines.push(SummaryLine { section: section.into(), category: category.into(), percents });
    };
    for (name, lo, hi) in AGE_BANDS {
        line("age", name, &|r| (lo..=hi).contains(&r.demographics.age));
    }
    for sex in [Sex::Male, Sex::Female] {
        line("sex", sex.token(), &|r| r.demographics.sex == sex);
    }
    for c in Comorbidity::ALL {
        line("comorbidity", c.token(), &|r| r.demographics.comorbidities.contains(c));
    }
    for f in LivingFlag::ALL {
        line("living", f.token(), &|r| r.demographics.living.contains(f));
    }
    CohortSummary { counts: members.iter().map(Vec::len).collect(), groups, lines }
}

impl CohortSummary {
    pub fn to_csv(&self) -> String {
        let mut out = format!("section,category,{}\n", self.groups.join(","));
        let counts: Vec<String> = self.counts.iter().map(|c| c.to_string()).collect();
        out.push_str(&format!("count,n,{}\n", counts.join(",")));
        for l in &self.lines {
            let vals: Vec<String> = l.percents.iter().map(|p| format!("{p:.1}")).collect();
            out.push_str(&format!("{},{},{}\n", l.section, l.category, vals.join(",")));
        }
        out
    }
}
