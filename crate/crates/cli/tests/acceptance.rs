//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N: PASS|FAIL ...` line. Run with
//! `cargo test -p utirisk-cli --test acceptance -- --nocapture --test-threads 1`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use utirisk::cohort::{extract_features, FeatureContext};
use utirisk::events::{
    group_by_patient, AdmissionEvent, AstResultEvent, Comorbidity, CultureResult, DemographicSnapshot,
    DispensationEvent, DrugClass, LivingFlag, Route, Sex, Susceptibility, UrineCultureEvent,
};
use utirisk::explain::{
    brute_force_shap, mean_abs, rank_correlation, summarize, tree_shap, tree_shap_rows, tree_shap_single,
};
use utirisk::gbdt::{
    read_model, sigmoid, suite::train_pair, train, write_model, Imbalance, Node, PairSpec, PositiveWeight, SuiteConfig,
    Tree,
};
use utirisk::metrics::{auc, compute_metrics, roc_points, trapezoid_area};
use utirisk::normalize::{infer_duration_days, AntibioticCategory, BacteriaAssociation};
use utirisk::risk::{apply_extensions, extend_dispensation, extend_specimen, score_patient, scoring_tensor};
use utirisk::synth::{generate, GeneratorConfig};
use utirisk::tensor::{build_tensor, columns};
use utirisk::{
    Cohort, CohortRow, Dataset, FeatureSpec, Likelihood, LikelihoodTable, MappingTables, PatientId, PipelineConfig,
    RawEvent, StudyCalendar, TrainConfig,
};

fn report(n: u32, pass: bool, detail: impl std::fmt::Display) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
}

// Independent copy of the default table, rows by antibiotic level, columns by association level.
const TABLE_TENTHS: [[u8; 4]; 4] = [[0, 2, 4, 6], [2, 2, 4, 6], [4, 4, 4, 8], [6, 6, 8, 8]];

fn pid(s: &str) -> PatientId {
    PatientId::new(s).unwrap()
}

#[test]
fn criterion_01_framework_table_conformance() {
    let start = Instant::now();
    let cal = StudyCalendar::default();
    let custom = [[0, 0, 2, 4], [0, 2, 2, 6], [2, 4, 6, 8], [4, 6, 8, 8]];
    let mut mismatches = Vec::new();
    let mut checked = 0;
    // the override table arrives through the pipeline config, as a user would supply it
    let toml_rows: Vec<String> = custom
        .iter()
        .map(|r| {
            format!("[{}]", r.iter().map(|t| format!("{:.1}", f64::from(*t) / 10.0)).collect::<Vec<_>>().join(", "))
        })
        .collect();
    let configured =
        PipelineConfig::from_toml_str(&format!("likelihood = [{}]\n", toml_rows.join(", ")), Path::new("."))
            .unwrap()
            .likelihood;
    for (tenths, table) in [(TABLE_TENTHS, LikelihoodTable::default()), (custom, configured)] {
        let p = pid("p");
        for a in AntibioticCategory::ALL {
            for u in BacteriaAssociation::ALL {
                for n39 in [false, true] {
                    let expected = if n39 { 10 } else { tenths[a.level() as usize][u.level() as usize] };
                    // direct lookup and the per-day scoring path over a tensor
                    let mut tensor = utirisk::SparseDayTensor::empty(cal);
                    tensor.write_span(&p, &columns::snapshot(), 0, 0, 1);
                    tensor.write_span(&p, &columns::extended_antibiotic(), 10, 10, u16::from(a.level()));
                    tensor.write_span(&p, &columns::extended_association(), 10, 10, u16::from(u.level()));
                    if n39 {
                        tensor.write_span(&p, &columns::n39(), 10, 10, 1);
                    }
                    let scored = score_patient(&tensor, &p, &table)[10].likelihood.tenths();
                    let looked_up = table.lookup(a, u, n39).tenths();
                    checked += 1;
                    if looked_up != expected || scored != expected {
                        mismatches.push(format!("({a},{u},{n39}) -> {looked_up}/{scored}, want {expected}"));
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = mismatches.is_empty() && checked == 64 && elapsed < Duration::from_secs(1);
    report(1, pass, format!("{checked} combinations over 2 tables, {} mismatches, {elapsed:?}", mismatches.len()));
    assert!(pass, "{mismatches:?}");
}

#[test]
fn criterion_02_extension_arithmetic() {
    let start = Instant::now();
    let cal = StudyCalendar::default();
    let tables = MappingTables::default();
    let last = i64::from(cal.last_day());
    let mut runner = TestRunner::new(PropConfig { cases: 2000, ..PropConfig::default() });
    let drugs = ["trimethoprim", "amoxicillin", "doxycycline", "nitrofurantoin", "azithromycin"];
    let result = runner.run(
        &(0..cal.total_days(), 0usize..drugs.len(), 1.0f64..1000.0, 1u32..60, 0..cal.total_days(), 0..cal.total_days()),
        |(day, drug, dose, qty, spec_day, ast_day)| {
            let p = pid("p");
            let disp = DispensationEvent {
                patient: p.clone(),
                day,
                drug: drugs[drug].into(),
                dosage_mg: dose,
                quantity: qty,
                class: DrugClass::Antibiotic,
                route: Route::Oral,
            };
            let l = i64::from(infer_duration_days(&disp, &tables));
            let d = i64::from(day);
            let expect_disp: BTreeSet<i64> = ((d - 3).max(0)..=(d + l - 1).min(last)).collect();
            let r = extend_dispensation(day, l as u32, &cal).unwrap();
            prop_assert_eq!(r.days().map(i64::from).collect::<BTreeSet<_>>(), expect_disp.clone());
            let s = i64::from(spec_day);
            let expect_spec: BTreeSet<i64> = ((s - 7).max(0)..=(s + 7).min(last)).collect();
            let r = extend_specimen(spec_day, &cal).unwrap();
            prop_assert_eq!(r.days().map(i64::from).collect::<BTreeSet<_>>(), expect_spec.clone());

            // marked days in the tensor, and idempotence of re-application
            let culture = UrineCultureEvent {
                patient: p.clone(),
                day: spec_day,
                result: CultureResult::NoGrowth,
                organism: None,
                specimen_source: "msu".into(),
            };
            let ast = AstResultEvent {
                patient: p.clone(),
                day: ast_day,
                organism: "escherichia coli".into(),
                antibiotic: "trimethoprim".into(),
                susceptibility: Susceptibility::Resistant,
                specimen_source: "msu".into(),
            };
            let events = vec![RawEvent::Dispensation(disp), RawEvent::UrineCulture(culture), RawEvent::AstResult(ast)];
            let mut t = build_tensor(&events, &tables, &cal);
            apply_extensions(&mut t, &events, &tables);
            let abx = t.column_id(&columns::extended_antibiotic());
            let marked: BTreeSet<i64> = (0..=cal.last_day())
                .filter(|day| abx.is_some_and(|c| t.value_at(&p, c, *day) > 0))
                .map(i64::from)
                .collect();
            let category_positive = events_category_positive(&events[0], &tables);
            prop_assert_eq!(marked, if category_positive { expect_disp } else { BTreeSet::new() });
            let assoc = t.column_id(&columns::extended_association()).unwrap();
            let a = i64::from(ast_day);
            let expect_assoc: BTreeSet<i64> =
                expect_spec.union(&((a - 7).max(0)..=(a + 7).min(last)).collect()).copied().collect();
            let marked: BTreeSet<i64> =
                (0..=cal.last_day()).filter(|day| t.value_at(&p, assoc, *day) > 0).map(i64::from).collect();
            prop_assert_eq!(marked, expect_assoc);
            let once = t.dump();
            apply_extensions(&mut t, &events, &tables);
            prop_assert_eq!(once, t.dump());
            Ok(())
        },
    );
    let elapsed = start.elapsed();
    let pass = result.is_ok() && elapsed < Duration::from_secs(5);
    report(2, pass, format!("2000 random cases, {elapsed:?}, {:?}", result.as_ref().err()));
    assert!(pass);
}

fn events_category_positive(e: &RawEvent, tables: &MappingTables) -> bool {
    match e {
        RawEvent::Dispensation(d) => tables.antibiotic(&d.drug).is_some_and(|c| c > AntibioticCategory::None),
        _ => false,
    }
}

#[test]
fn criterion_03_calendar() {
    let cal = StudyCalendar::default();
    let date = |y, m, d| chrono::NaiveDate::from_ymd_opt(y, m, d).unwrap();
    let leap = cal.day_index(date(2020, 2, 29));
    let pass = cal.total_days() == 1005
        && cal.day_index(date(2019, 10, 1)) == Some(0)
        && cal.day_index(date(2022, 7, 1)) == Some(1004)
        && cal.day_index(date(2022, 7, 2)).is_none()
        && leap.is_some()
        && cal.day_index(date(2020, 3, 1)) == leap.map(|d| d + 1)
        && leap.map(|d| cal.date(d)) == Some(date(2020, 2, 29));
    report(3, pass, format!("{} days, leap day index {:?}", cal.total_days(), leap));
    assert!(pass);
}

/// Events that can only ever land at or after `day`.
fn injected_event(rng: &mut ChaCha8Rng, p: &PatientId, day: u32, cal: &StudyCalendar) -> Option<RawEvent> {
    let last = cal.last_day();
    Some(match rng.gen_range(0..6) {
        0 => RawEvent::Dispensation(DispensationEvent {
            patient: p.clone(),
            day,
            drug: ["trimethoprim", "nitrofurantoin", "amoxicillin"][rng.gen_range(0..3)].into(),
            dosage_mg: 200.0,
            quantity: rng.gen_range(1..30),
            class: DrugClass::Antibiotic,
            route: Route::Oral,
        }),
        1 => RawEvent::UrineCulture(UrineCultureEvent {
            patient: p.clone(),
            day,
            result: CultureResult::ReferToAst,
            organism: Some("escherichia coli".into()),
            specimen_source: "msu".into(),
        }),
        2 => RawEvent::AstResult(AstResultEvent {
            patient: p.clone(),
            day,
            organism: "escherichia coli".into(),
            antibiotic: "trimethoprim".into(),
            susceptibility: Susceptibility::Resistant,
            specimen_source: "msu".into(),
        }),
        3 => RawEvent::Admission(AdmissionEvent {
            patient: p.clone(),
            entry: day,
            discharge: (day + rng.gen_range(0..6)).min(last),
            icd10: ["N39.0".to_string()].into(),
            opcs: BTreeSet::new(),
        }),
        4 => RawEvent::Dispensation(DispensationEvent {
            patient: p.clone(),
            day,
            drug: "urinary catheter".into(),
            dosage_mg: 1.0,
            quantity: 10,
            class: DrugClass::CatheterSupply,
            route: Route::Other,
        }),
        _ => {
            // a snapshot for the first month starting on or after `day`
            let month = (0..cal.total_months()).find(|m| cal.month_days(*m).unwrap().first >= day)?;
            RawEvent::Demographic(DemographicSnapshot {
                patient: p.clone(),
                month,
                age: 90,
                sex: Sex::Male,
                death_date: None,
                living: [LivingFlag::Homeless].into(),
                comorbidities: [Comorbidity::Dementia, Comorbidity::IncontinentUrinary].into(),
                lsoa: "E01999999".into(),
            })
        }
    })
}

fn features_for(
    events: &[RawEvent],
    p: &PatientId,
    index: u32,
    spec: &FeatureSpec,
    tables: &MappingTables,
) -> Vec<u64> {
    let cal = StudyCalendar::default();
    let tensor = scoring_tensor(events, tables, &cal);
    let grouped = group_by_patient(events);
    let likelihood = LikelihoodTable::default();
    let ctx = FeatureContext { tensor: &tensor, events: &grouped, tables, likelihood: &likelihood };
    extract_features(&ctx, p, index, spec).iter().map(|v| v.to_bits()).collect()
}

#[test]
fn criterion_04_no_leakage() {
    let cal = StudyCalendar::default();
    let tables = MappingTables::default();
    let spec = FeatureSpec::default();
    let cfg = GeneratorConfig { seed: 11, patients: 1000, ..Default::default() };
    let data = generate(&cfg, &cal).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut leaks = Vec::new();
    let mut checked = 0;
    for patient in &data.patients {
        let index = rng.gen_range(0..=cal.last_day());
        let day = rng.gen_range(index..=cal.last_day());
        let Some(extra) = injected_event(&mut rng, &patient.id, day, &cal) else {
            continue;
        };
        let before = features_for(&patient.events, &patient.id, index, &spec, &tables);
        let mut with = patient.events.clone();
        with.push(extra);
        let after = features_for(&with, &patient.id, index, &spec, &tables);
        checked += 1;
        if before != after {
            leaks.push(patient.id.to_string());
        }
    }
    let pass = leaks.is_empty() && checked >= 950;
    report(4, pass, format!("{checked} patients injected, {} feature vectors changed", leaks.len()));
    assert!(pass, "{leaks:?}");
}

/// Random tree of depth ≤ `depth` over `nf` features with consistent covers.
fn random_tree(rng: &mut ChaCha8Rng, depth: usize, nf: usize) -> Tree {
    fn grow(rng: &mut ChaCha8Rng, nodes: &mut Vec<Node>, depth: usize, nf: usize) -> (usize, f64) {
        let id = nodes.len();
        nodes.push(Node::Leaf { value: 0.0, cover: 0.0 });
        if depth == 0 || rng.gen_bool(0.2) {
            let cover = rng.gen_range(0.5..20.0);
            nodes[id] = Node::Leaf { value: rng.gen_range(-2.0..2.0), cover };
            return (id, cover);
        }
        let feature = rng.gen_range(0..nf);
        let threshold = rng.gen_range(0.0..1.0);
        let missing_left = rng.gen_bool(0.5);
        let (left, cl) = grow(rng, nodes, depth - 1, nf);
        let (right, cr) = grow(rng, nodes, depth - 1, nf);
        nodes[id] = Node::Split { feature, threshold, missing_left, left, right, cover: cl + cr };
        (id, cl + cr)
    }
    let mut nodes = Vec::new();
    grow(rng, &mut nodes, depth, nf);
    Tree { nodes }
}

#[test]
fn criterion_05_treeshap_oracle_and_local_accuracy() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut max_err = 0.0f64;
    for _ in 0..200 {
        let nf = rng.gen_range(1..=8);
        let depth = rng.gen_range(1..=3);
        let tree = random_tree(&mut rng, depth, nf);
        for _ in 0..4 {
            let row: Vec<f64> =
                (0..nf).map(|_| if rng.gen_bool(0.1) { f64::NAN } else { rng.gen_range(0.0..1.0) }).collect();
            let fast = tree_shap_single(&tree, &row, nf);
            let slow = brute_force_shap(&tree, &row, nf).unwrap();
            for (a, b) in fast.contributions.iter().zip(&slow) {
                max_err = max_err.max((a - b).abs());
            }
        }
    }

    // local accuracy on every cohort row of every model from the planted run
    let run = planted_run();
    let cohort = Cohort::from_csv(&std::fs::read_to_string(run.dir.join("cohort/cohort.csv")).unwrap()).unwrap();
    let rows: Vec<Vec<f64>> = cohort.rows.iter().map(|r| r.features.clone()).collect();
    let mut max_local = 0.0f64;
    let mut models = 0;
    for (_, file) in model_manifest(&run.dir) {
        let model = read_model(&std::fs::read_to_string(run.dir.join("models").join(file)).unwrap()).unwrap();
        models += 1;
        for (row, attr) in rows.iter().zip(tree_shap_rows(&model, &rows).unwrap()) {
            max_local = max_local.max((model.predict_margin(row).unwrap() - attr.total()).abs());
        }
    }
    let pass = max_err <= 1e-9 && max_local <= 1e-6 && models == 6;
    report(
        5,
        pass,
        format!(
            "200 random trees max |tree_shap - brute_force| = {max_err:.3e}; local accuracy max error {max_local:.3e} over {} rows x {models} models",
            rows.len()
        ),
    );
    assert!(pass);
}

/// Best regularized gain over every midpoint of every feature and both
/// missing directions, computed from the raw rows.
fn exhaustive_root_gain(rows: &[Vec<f64>], labels: &[bool], w_pos: f64, cfg: &TrainConfig) -> Option<f64> {
    let w: Vec<f64> = labels.iter().map(|y| if *y { w_pos } else { 1.0 }).collect();
    let wp: f64 = labels.iter().zip(&w).filter(|(y, _)| **y).map(|(_, w)| w).sum();
    let wn: f64 = labels.iter().zip(&w).filter(|(y, _)| !**y).map(|(_, w)| w).sum();
    let p = sigmoid((wp / wn).ln());
    let g: Vec<f64> = labels.iter().zip(&w).map(|(y, w)| w * (p - f64::from(u8::from(*y)))).collect();
    let h: Vec<f64> = w.iter().map(|w| w * p * (1.0 - p)).collect();
    let score = |g: f64, h: f64| g * g / (h + cfg.l2);
    let (gt, ht): (f64, f64) = (g.iter().sum(), h.iter().sum());
    let mut best: Option<f64> = None;
    for f in 0..rows[0].len() {
        let mut vals: Vec<f64> = rows.iter().map(|r| r[f]).filter(|v| v.is_finite()).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vals.dedup();
        for pair in vals.windows(2) {
            let thr = (pair[0] + pair[1]) / 2.0;
            for missing_left in [true, false] {
                let (mut gl, mut hl, mut nl) = (0.0, 0.0, 0);
                for (i, r) in rows.iter().enumerate() {
                    let left = if r[f].is_finite() { r[f] < thr } else { missing_left };
                    if left {
                        gl += g[i];
                        hl += h[i];
                        nl += 1;
                    }
                }
                let (gr, hr) = (gt - gl, ht - hl);
                if nl == 0 || nl == rows.len() || hl < cfg.min_child_hessian || hr < cfg.min_child_hessian {
                    continue;
                }
                let gain = 0.5 * (score(gl, hl) + score(gr, hr) - score(gt, ht));
                if gain > 0.0 && best.is_none_or(|b| gain > b) {
                    best = Some(gain);
                }
            }
        }
    }
    best
}

fn random_dataset(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<bool>) {
    let n = rng.gen_range(8..=64);
    let nf = rng.gen_range(1..=5);
    let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.35)).collect();
    labels[0] = true;
    labels[1] = false;
    let rows = (0..n)
        .map(|i| {
            (0..nf)
                .map(|_| {
                    if rng.gen_bool(0.08) {
                        f64::NAN
                    } else {
                        f64::from(rng.gen_range(0..12)) + if labels[i] { rng.gen_range(0.0..3.0) } else { 0.0 }
                    }
                })
                .collect()
        })
        .collect();
    (rows, labels)
}

#[test]
fn criterion_06_gbdt_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut root_mismatch = 0;
    let mut loss_increases = 0;
    let mut nondeterministic = 0;
    for case in 0..100 {
        let (rows, labels) = random_dataset(&mut rng);
        let names: Vec<String> = (0..rows[0].len()).map(|i| format!("f{i}")).collect();
        let w_pos = rng.gen_range(0.5..4.0);
        let cfg = TrainConfig {
            rounds: 20,
            max_depth: 3,
            min_child_hessian: 0.1,
            positive_weight: PositiveWeight::Fixed(w_pos),
            seed: case,
            ..TrainConfig::default()
        };
        let data = Dataset::new(rows.clone(), labels.clone());
        let (model, log) = train(&data, None, &names, &cfg).unwrap();

        let oracle = exhaustive_root_gain(&rows, &labels, w_pos, &cfg);
        let chosen = model.trees.first().and_then(|t| match &t.nodes[0] {
            Node::Split { feature, threshold, missing_left, .. } => Some((*feature, *threshold, *missing_left)),
            Node::Leaf { .. } => None,
        });
        let chosen_gain = chosen.map(|(f, thr, ml)| {
            let sub: Vec<Vec<f64>> = rows.iter().map(|r| vec![r[f]]).collect();
            split_gain_of(&sub, &labels, w_pos, &cfg, thr, ml)
        });
        let agree = match (oracle, chosen_gain) {
            (None, None) => true,
            (Some(o), Some(c)) => (o - c).abs() <= 1e-9 * o.abs().max(1.0),
            _ => false,
        };
        if !agree {
            root_mismatch += 1;
            println!("case {case}: oracle {oracle:?} chosen {chosen_gain:?}");
        }
        if log.windows(2).any(|w| w[1].train_loss > w[0].train_loss) {
            loss_increases += 1;
        }
        let (again, _) = train(&data, None, &names, &cfg).unwrap();
        if write_model(&model) != write_model(&again) {
            nondeterministic += 1;
        }
    }
    let pass = root_mismatch == 0 && loss_increases == 0 && nondeterministic == 0;
    report(
        6,
        pass,
        format!("100 datasets: {root_mismatch} root-split mismatches, {loss_increases} loss increases, {nondeterministic} non-reproducible models"),
    );
    assert!(pass);
}

/// Gain of one given split of a single-feature matrix at the base margin.
fn split_gain_of(
    rows: &[Vec<f64>],
    labels: &[bool],
    w_pos: f64,
    cfg: &TrainConfig,
    thr: f64,
    missing_left: bool,
) -> f64 {
    let w: Vec<f64> = labels.iter().map(|y| if *y { w_pos } else { 1.0 }).collect();
    let wp: f64 = labels.iter().zip(&w).filter(|(y, _)| **y).map(|(_, w)| w).sum();
    let wn: f64 = labels.iter().zip(&w).filter(|(y, _)| !**y).map(|(_, w)| w).sum();
    let p = sigmoid((wp / wn).ln());
    let (mut gl, mut hl, mut gr, mut hr) = (0.0, 0.0, 0.0, 0.0);
    for (i, r) in rows.iter().enumerate() {
        let g = w[i] * (p - f64::from(u8::from(labels[i])));
        let h = w[i] * p * (1.0 - p);
        if if r[0].is_finite() { r[0] < thr } else { missing_left } {
            gl += g;
            hl += h;
        } else {
            gr += g;
            hr += h;
        }
    }
    let score = |g: f64, h: f64| g * g / (h + cfg.l2);
    0.5 * (score(gl, hl) + score(gr, hr) - score(gl + gr, hl + hr))
}

fn pair_counting_auc(labels: &[bool], scores: &[f64]) -> Option<f64> {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, yi) in labels.iter().enumerate() {
        for (j, yj) in labels.iter().enumerate() {
            if *yi && !*yj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| num / pairs)
}

#[test]
fn criterion_07_metrics_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    let mut sets = 0;
    while sets < 1000 {
        let n = rng.gen_range(2..=30);
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        // few distinct values so ties are common
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..6)) / 5.0).collect();
        let Some(oracle) = pair_counting_auc(&labels, &scores) else { continue };
        sets += 1;
        let got = auc(&labels, &scores).unwrap();
        let area = trapezoid_area(&roc_points(&labels, &scores).unwrap());
        if got != oracle || (area - oracle).abs() > 1e-12 {
            mismatches += 1;
        }
    }
    let hand = auc(&[true, true, false, false], &[0.9, 0.4, 0.6, 0.1]);
    let hand_metrics = compute_metrics(&[true, true, false, false], &[0.9, 0.4, 0.6, 0.1], 0.5);
    let pass = mismatches == 0 && hand == Some(0.75) && hand_metrics.auc == Some(0.75);
    report(7, pass, format!("{sets} random sets, {mismatches} mismatches; hand case AUC {hand:?}"));
    assert!(pass);
}

struct PlantedRun {
    dir: PathBuf,
    elapsed: Duration,
    success: bool,
    stderr: String,
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// One 10k-patient `pipeline` run on the planted-catheter config, shared by
/// the criteria that inspect its output.
fn planted_run() -> &'static PlantedRun {
    static RUN: OnceLock<PlantedRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_planted");
        let _ = std::fs::remove_dir_all(&dir);
        let config = workspace_root().join("configs/planted_catheter.toml");
        let start = Instant::now();
        let out = Command::new(env!("CARGO_BIN_EXE_utirisk"))
            .args(["pipeline", "--config", config.to_str().unwrap(), "--out", dir.to_str().unwrap()])
            .env("RUST_LOG", "warn")
            .output()
            .expect("binary runs");
        PlantedRun {
            dir,
            elapsed: start.elapsed(),
            success: out.status.success(),
            stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        }
    })
}

fn model_manifest(dir: &Path) -> Vec<(Vec<String>, String)> {
    let text = std::fs::read_to_string(dir.join("models/manifest.tsv")).unwrap();
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<String> = l.split('\t').map(str::to_string).collect();
            let file = f[13].clone();
            (f, file)
        })
        .collect()
}

#[test]
fn criterion_08_planted_signal_recovery() {
    let run = planted_run();
    assert!(run.success, "{}", run.stderr);
    let drivers = std::fs::read_to_string(run.dir.join("data/drivers.csv")).unwrap();
    let patients = drivers.lines().count() - 1;
    let carriers = drivers.lines().skip(1).filter(|l| l.ends_with(",catheter")).count();

    let metrics = std::fs::read_to_string(run.dir.join("report/metrics.csv")).unwrap();
    let row = metrics.lines().find(|l| l.starts_with("0.8 vs 1.0,")).expect("0.8 vs 1.0 metrics row");
    let test_auc: f64 = row.split(',').nth(5).unwrap().parse().unwrap();
    let importance = std::fs::read_to_string(run.dir.join("explain/0.8_vs_1.0_importance.csv")).unwrap();
    let top5: Vec<&str> = importance.lines().skip(1).take(5).map(|l| l.split(',').next().unwrap()).collect();
    let rank = top5.iter().position(|f| *f == "n_catheter_dispensations").map(|i| i + 1);

    let pass = patients == 10_000 && test_auc >= 0.85 && rank.is_some() && run.elapsed < Duration::from_secs(120);
    report(
        8,
        pass,
        format!(
            "{patients} patients ({carriers} driver carriers); 0.8 vs 1.0 test AUC {test_auc:.4}; n_catheter_dispensations rank {rank:?} in top-5 {top5:?}; pipeline {:.1?}",
            run.elapsed
        ),
    );
    assert!(pass);
}

/// 1:20 benchmark as a two-group cohort: two informative features, four noise.
fn imbalanced_cohort(seed: u64) -> Cohort {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> =
        ["signal_a", "signal_b", "noise_a", "noise_b", "noise_c", "noise_d"].iter().map(|s| s.to_string()).collect();
    let template = |i: usize, label: Likelihood, features: Vec<f64>| CohortRow {
        patient: pid(&format!("B{i:05}")),
        index_day: 400,
        label,
        demographics: utirisk::cohort::DemographicsAtIndex {
            age: 50,
            sex: Sex::Female,
            living: BTreeSet::new(),
            comorbidities: BTreeSet::new(),
        },
        features,
    };
    let rows = (0..6300)
        .map(|i| {
            let positive = i % 21 == 0;
            let shift = if positive { 1.2 } else { 0.0 };
            let normal = |rng: &mut ChaCha8Rng| {
                // Box-Muller
                let (u1, u2): (f64, f64) = (rng.gen_range(1e-12..1.0), rng.gen());
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            };
            let features = vec![
                normal(&mut rng) + shift,
                normal(&mut rng) + 0.7 * shift,
                normal(&mut rng),
                normal(&mut rng),
                f64::from(rng.gen_range(0..5)),
                normal(&mut rng),
            ];
            template(i, if positive { Likelihood::from_tenths(2).unwrap() } else { Likelihood::ZERO }, features)
        })
        .collect();
    Cohort { feature_names: names, rows }
}

#[test]
fn criterion_09_imbalance_handling() {
    let cohort = imbalanced_cohort(9);
    let pair = PairSpec::all()[0];
    let base =
        SuiteConfig { train: TrainConfig { rounds: 100, seed: 9, ..TrainConfig::default() }, ..SuiteConfig::default() };
    let fit = |imbalance| train_pair(&cohort, pair, 0, &SuiteConfig { imbalance, ..base.clone() }).unwrap();
    let weighted = fit(Imbalance::Weight);
    let plain = fit(Imbalance::None);
    let smote = fit(Imbalance::Smote);

    let importance = |m: &utirisk::gbdt::PairModel| {
        let attrs: Vec<_> = m.test.rows.iter().map(|r| tree_shap(&m.ensemble, r).unwrap()).collect();
        mean_abs(&attrs, cohort.feature_names.len())
    };
    let (iw, ip, is) = (importance(&weighted), importance(&plain), importance(&smote));
    let rho_wp = rank_correlation(&iw, &ip);
    let rho_ws = rank_correlation(&iw, &is);
    let rho_ps = rank_correlation(&ip, &is);
    let top = |m: &utirisk::gbdt::PairModel| {
        let attrs: Vec<_> = m.test.rows.iter().map(|r| tree_shap(&m.ensemble, r).unwrap()).collect();
        summarize(&cohort.feature_names, &attrs, 2).into_iter().map(|f| f.feature).collect::<Vec<_>>()
    };

    let (rw, rp, rs) = (weighted.metrics.recall, plain.metrics.recall, smote.metrics.recall);
    let pass = matches!((rw, rp), (Some(w), Some(p)) if w > p);
    let soft = [rho_wp, rho_ws, rho_ps].iter().all(|r| r.is_some_and(|r| r >= 0.8));
    report(
        9,
        pass,
        format!(
            "recall weighted {rw:?} vs unweighted {rp:?} (smote {rs:?}); mean|SHAP| rank correlation w/none {rho_wp:?}, w/smote {rho_ws:?}, none/smote {rho_ps:?} -> soft check {}; top-2 weighted {:?}",
            if soft { "met" } else { "not met (reported only)" },
            top(&weighted)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_pairwise_suite_shape() {
    let run = planted_run();
    assert!(run.success, "{}", run.stderr);
    let rows = model_manifest(&run.dir);
    let expected = [(0, 2), (2, 4), (4, 6), (6, 8), (8, 10), (2, 6)];
    let mut problems = Vec::new();
    if rows.len() != 6 {
        problems.push(format!("{} models", rows.len()));
    }
    for ((fields, file), (neg, pos)) in rows.iter().zip(expected) {
        let tenths = |s: &str| (s.parse::<f64>().unwrap() * 10.0).round() as u8;
        if (tenths(&fields[1]), tenths(&fields[2])) != (neg, pos) {
            problems.push(format!("pair {} out of order", fields[0]));
        }
        if fields[3] != fields[2] {
            problems.push(format!("{}: positive class {} is not the higher label", fields[0], fields[3]));
        }
        let model = read_model(&std::fs::read_to_string(run.dir.join("models").join(file)).unwrap());
        if model.is_err() {
            problems.push(format!("{file} unreadable"));
        }
        let counts: Vec<usize> = fields[4..10].iter().map(|c| c.parse().unwrap()).collect();
        if counts.contains(&0) {
            problems.push(format!("{}: empty class in a split {counts:?}", fields[0]));
        }
    }
    let pass = problems.is_empty();
    let ids: Vec<&str> = rows.iter().map(|(f, _)| f[0].as_str()).collect();
    report(10, pass, format!("models {ids:?}; {problems:?}"));
    assert!(pass);
}
