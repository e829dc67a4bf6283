//! The seven pipeline stages. Each reads the previous stages' files under
//! the output directory, checks their manifests, and writes its own
//! directory plus `manifest.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use utirisk::cohort::{build_cohort, FeatureContext};
use utirisk::events::{group_by_patient, parse_text, sort_events, ParseReport};
use utirisk::explain::{attributions_csv, importance_csv, summarize, tree_shap_rows};
use utirisk::gbdt::{read_model, run_pairwise_suite, write_model, TrainLogRow};
use utirisk::metrics::{cohort_summary, compute_metrics, metrics_row, roc_csv, roc_points, METRICS_HEADER};
use utirisk::normalize::NormalizeReport;
use utirisk::risk::{episodes_from_csv, episodes_to_csv, score_all, scoring_tensor};
use utirisk::synth;
use utirisk::{Cohort, FeatureSpec, LikelihoodEpisode, MappingTables, PatientId, PipelineConfig, RawEvent, SourceKind};

use crate::failure::Failure;
use crate::manifest::{chain_digest, Manifest, Recorder};

pub const STAGES: [&str; 7] = ["generate", "ingest", "score", "cohort", "train", "explain", "report"];

pub const MODEL_MANIFEST: &str = "manifest.tsv";
const MODEL_MANIFEST_HEADER: &str = "pair\tnegative\tpositive\tpositive_class\ttrain_neg\ttrain_pos\tvalid_neg\tvalid_pos\ttest_neg\ttest_pos\tpositive_weight\tsmote_rows\ttrees\tmodel_file";
const PREDICTIONS_HEADER: &str = "row,patient_id,index_day,label,positive,score";

/// Output subdirectory of each stage.
pub fn stage_dir_name(stage: &str) -> &'static str {
    match stage {
        "generate" => "data",
        "ingest" => "ingest",
        "score" => "score",
        "cohort" => "cohort",
        "train" => "models",
        "explain" => "explain",
        "report" => "report",
        other => panic!("unknown stage {other}"),
    }
}

fn json<T: Serialize + ?Sized>(value: &T) -> String {
    serde_json::to_string(value).expect("config sections serialize")
}

pub struct Run {
    pub config: PipelineConfig,
    pub out: PathBuf,
    tables: MappingTables,
    spec: FeatureSpec,
    digests: BTreeMap<&'static str, String>,
}

impl Run {
    pub fn new(config: PipelineConfig, out: PathBuf) -> Result<Run, Failure> {
        config.validate()?;
        let tables = config.mapping_tables().map_err(|e| Failure::Config(e.to_string()))?;
        let spec = config.feature_spec()?;
        let mut run = Run { config, out, tables, spec, digests: BTreeMap::new() };
        run.digests = run.compute_digests()?;
        Ok(run)
    }

    fn compute_digests(&self) -> Result<BTreeMap<&'static str, String>, Failure> {
        let c = &self.config;
        let mut d = BTreeMap::new();
        let generate =
            chain_digest("generate", None, &[("calendar", json(&c.calendar)), ("generator", json(&c.generator))]);
        let sources: Vec<(String, PathBuf)> =
            self.sources()?.into_iter().map(|(k, p)| (k.file_name().to_string(), p)).collect();
        let ingest = chain_digest(
            "ingest",
            self.uses_generated().then_some(generate.as_str()),
            &[
                ("calendar", json(&c.calendar)),
                ("inputs", if self.uses_generated() { String::new() } else { json(&sources) }),
                ("tables", json(&self.tables)),
            ],
        );
        let score = chain_digest(
            "score",
            Some(&ingest),
            &[("likelihood", json(&c.likelihood)), ("tensor_dump", json(&c.tensor_dump))],
        );
        let cohort = chain_digest(
            "cohort",
            Some(&score),
            &[("cohort", json(&c.cohort)), ("features", json(&self.spec.to_config())), ("seed", json(&c.seed))],
        );
        let train = chain_digest("train", Some(&cohort), &[("model", json(&c.model))]);
        let explain = chain_digest("explain", Some(&train), &[("explain", json(&c.explain))]);
        let report = chain_digest("report", Some(&train), &[]);
        for (k, v) in [
            ("generate", generate),
            ("ingest", ingest),
            ("score", score),
            ("cohort", cohort),
            ("train", train),
            ("explain", explain),
            ("report", report),
        ] {
            d.insert(k, v);
        }
        Ok(d)
    }

    pub fn digest(&self, stage: &str) -> &str {
        &self.digests[stage]
    }

    pub fn dir(&self, stage: &str) -> PathBuf {
        self.out.join(stage_dir_name(stage))
    }

    /// True when ingest reads the generator's output rather than configured files.
    pub fn uses_generated(&self) -> bool {
        self.config.inputs.is_empty()
    }

    fn sources(&self) -> Result<Vec<(SourceKind, PathBuf)>, Failure> {
        let inputs = &self.config.inputs;
        SourceKind::ALL
            .iter()
            .map(|&kind| {
                if self.uses_generated() {
                    return Ok((kind, self.dir("generate").join(kind.file_name())));
                }
                match (inputs.explicit(kind), &inputs.dir) {
                    (Some(p), _) => Ok((kind, p.clone())),
                    (None, Some(d)) => Ok((kind, d.join(kind.file_name()))),
                    (None, None) => {
                        Err(Failure::Config(format!("inputs: no path for {} and no inputs.dir", kind.file_name())))
                    }
                }
            })
            .collect()
    }

    fn require(&self, stage: &str) -> Result<Manifest, Failure> {
        Manifest::require(&self.dir(stage), stage, self.digest(stage))
    }

    fn finish(&self, stage: &str, rec: Recorder, upstream: &[&Manifest]) -> Result<Manifest, Failure> {
        let m = rec.finish(
            stage,
            self.digest(stage).to_string(),
            self.config.seed,
            upstream.iter().map(|m| m.reference()).collect(),
        );
        m.write(&self.dir(stage))?;
        log::info!("{stage}: wrote {} files to {}", m.outputs.len(), self.dir(stage).display());
        Ok(m)
    }

    fn load_ingested(&self, rec: &mut Recorder) -> Result<Vec<RawEvent>, Failure> {
        let cal = &self.config.calendar;
        let mut events = Vec::new();
        for kind in SourceKind::ALL {
            let path = self.dir("ingest").join(kind.file_name());
            let text = rec.read(&path)?;
            let (evs, report) = parse_text(kind, &text, cal)?;
            if let Some(e) = report.errors.first() {
                return Err(Failure::Data(format!(
                    "{} line {}: {}; rerun `utirisk ingest`",
                    path.display(),
                    e.line,
                    e.reason
                )));
            }
            events.extend(evs);
        }
        sort_events(&mut events, cal);
        Ok(events)
    }

    fn load_cohort(&self, rec: &mut Recorder) -> Result<Cohort, Failure> {
        let text = rec.read(&self.dir("cohort").join("cohort.csv"))?;
        Ok(Cohort::from_csv(&text)?)
    }
}

pub fn generate(run: &Run) -> Result<Manifest, Failure> {
    let cal = &run.config.calendar;
    let data = synth::generate(&run.config.generator, cal)?;
    let dir = run.dir("generate");
    let mut rec = Recorder::new(&run.out);
    for (kind, text) in data.files(cal) {
        rec.write(&dir.join(kind.file_name()), &text)?;
    }
    rec.write(&dir.join(synth::MANIFEST_FILE), &data.manifest())?;
    log::info!("generate: {} patients", data.patients.len());
    run.finish("generate", rec, &[])
}

pub fn ingest(run: &Run) -> Result<Manifest, Failure> {
    let upstream = if run.uses_generated() { Some(run.require("generate")?) } else { None };
    let cal = &run.config.calendar;
    let mut rec = Recorder::new(&run.out);
    let mut events = Vec::new();
    let mut report = ParseReport::default();
    for (kind, path) in run.sources()? {
        let text = rec.read(&path)?;
        let (evs, r) = parse_text(kind, &text, cal)?;
        report.merge(r);
        events.extend(evs);
    }
    sort_events(&mut events, cal);

    let dir = run.dir("ingest");
    for kind in SourceKind::ALL {
        let mut text = format!("{}\n", kind.header());
        for e in events.iter().filter(|e| e.kind() == kind) {
            text.push_str(&e.to_line(cal));
            text.push('\n');
        }
        rec.write(&dir.join(kind.file_name()), &text)?;
    }
    rec.write(&dir.join("parse_errors.tsv"), &report.to_tsv())?;
    rec.write(&dir.join("normalize_report.tsv"), &NormalizeReport::audit(&events, &run.tables).to_tsv())?;
    log::info!(
        "ingest: {} lines, {} events, {} rejected ({} out of range), {} admissions clipped",
        report.lines,
        report.parsed,
        report.errors.len(),
        report.out_of_range,
        report.clipped
    );
    run.finish("ingest", rec, &upstream.iter().collect::<Vec<_>>())
}

pub fn score(run: &Run) -> Result<Manifest, Failure> {
    let up = run.require("ingest")?;
    let mut rec = Recorder::new(&run.out);
    let events = run.load_ingested(&mut rec)?;
    let cal = &run.config.calendar;
    let tensor = scoring_tensor(&events, &run.tables, cal);
    let episodes = score_all(&tensor, &run.config.likelihood);
    let dir = run.dir("score");
    rec.write(&dir.join("episodes.csv"), &episodes_to_csv(&episodes, cal))?;
    if run.config.tensor_dump {
        rec.write(&dir.join("tensor_dump.tsv"), &tensor.dump())?;
    }
    log::info!(
        "score: {} patients, {} episodes",
        tensor.patient_count(),
        episodes.values().map(Vec::len).sum::<usize>()
    );
    run.finish("score", rec, &[&up])
}

pub fn cohort(run: &Run) -> Result<Manifest, Failure> {
    let up = run.require("score")?;
    let mut rec = Recorder::new(&run.out);
    let events = run.load_ingested(&mut rec)?;
    let cal = &run.config.calendar;
    let tensor = scoring_tensor(&events, &run.tables, cal);
    let mut episodes: BTreeMap<PatientId, Vec<LikelihoodEpisode>> = BTreeMap::new();
    for e in episodes_from_csv(&rec.read(&run.dir("score").join("episodes.csv"))?)? {
        episodes.entry(e.patient.clone()).or_default().push(e);
    }
    let grouped = group_by_patient(&events);
    let ctx =
        FeatureContext { tensor: &tensor, events: &grouped, tables: &run.tables, likelihood: &run.config.likelihood };
    let (cohort, report) = build_cohort(&ctx, &episodes, &run.spec, &run.config.cohort, run.config.seed);

    let dir = run.dir("cohort");
    rec.write(&dir.join("cohort.csv"), &cohort.to_csv(cal))?;
    rec.write(&dir.join("exclusions.tsv"), &report.exclusions.to_tsv())?;
    rec.write(
        &dir.join("cohort_report.json"),
        &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"),
    )?;
    log::info!("cohort: {} rows, labels {:?}", cohort.rows.len(), report.label_counts);
    run.finish("cohort", rec, &[&up])
}

pub fn train(run: &Run) -> Result<Manifest, Failure> {
    let up = run.require("cohort")?;
    let mut rec = Recorder::new(&run.out);
    let cohort = run.load_cohort(&mut rec)?;
    let suite = run_pairwise_suite(&cohort, &run.config.model)?;
    let dir = run.dir("train");

    let mut manifest = format!("{MODEL_MANIFEST_HEADER}\n");
    for m in &suite.models {
        let id = m.pair.id();
        let file = format!("{id}.model");
        rec.write(&dir.join(&file), &write_model(&m.ensemble))?;
        let mut log = format!("{}\n", TrainLogRow::HEADER);
        for row in &m.log {
            log.push_str(&row.to_csv_line());
            log.push('\n');
        }
        rec.write(&dir.join(format!("{id}_log.csv")), &log)?;

        let mut preds = format!("{PREDICTIONS_HEADER}\n");
        for ((row, y), s) in m.test_rows.iter().zip(&m.test.labels).zip(&m.test_scores) {
            let r = &cohort.rows[*row];
            preds.push_str(&format!("{row},{},{},{},{},{s}\n", r.patient, r.index_day, r.label, u8::from(*y)));
        }
        rec.write(&dir.join(format!("predictions_{id}.csv")), &preds)?;

        let c = m.split_counts;
        manifest.push_str(&format!(
            "{id}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{file}\n",
            m.pair.negative,
            m.pair.positive,
            m.pair.positive,
            c[0][0],
            c[0][1],
            c[1][0],
            c[1][1],
            c[2][0],
            c[2][1],
            m.positive_weight,
            m.smote_rows,
            m.ensemble.trees.len()
        ));
        log::info!("train: {} trees={} test auc={:?}", m.pair, m.ensemble.trees.len(), m.metrics.auc);
    }
    rec.write(&dir.join(MODEL_MANIFEST), &manifest)?;
    let mut skipped = String::from("pair\treason\n");
    for (pair, reason) in &suite.skipped {
        skipped.push_str(&format!("{}\t{reason}\n", pair.id()));
    }
    rec.write(&dir.join("skipped.tsv"), &skipped)?;
    run.finish("train", rec, &[&up])
}

/// `(pair id, model file)` for every trained pair, in manifest order.
pub fn read_model_manifest(text: &str) -> Result<Vec<(String, String)>, Failure> {
    let mut lines = text.lines();
    if lines.next() != Some(MODEL_MANIFEST_HEADER) {
        return Err(Failure::Data("models/manifest.tsv has an unexpected header".into()));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            match (f.first(), f.last()) {
                (Some(id), Some(file)) if f.len() == 14 => Ok((id.to_string(), file.to_string())),
                _ => Err(Failure::Data(format!("models/manifest.tsv: malformed line `{l}`"))),
            }
        })
        .collect()
}

pub struct Prediction {
    pub row: usize,
    pub positive: bool,
    pub score: f64,
}

pub fn read_predictions(text: &str) -> Result<Vec<Prediction>, Failure> {
    let mut lines = text.lines();
    if lines.next() != Some(PREDICTIONS_HEADER) {
        return Err(Failure::Data("predictions file has an unexpected header".into()));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let bad = || Failure::Data(format!("predictions line {}: malformed", i + 2));
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            Ok(Prediction {
                row: f[0].parse().map_err(|_| bad())?,
                positive: match f[4] {
                    "1" => true,
                    "0" => false,
                    _ => return Err(bad()),
                },
                score: f[5].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

fn trained_pairs(run: &Run, rec: &mut Recorder) -> Result<Vec<(String, String)>, Failure> {
    read_model_manifest(&rec.read(&run.dir("train").join(MODEL_MANIFEST))?)
}

pub fn explain(run: &Run) -> Result<Manifest, Failure> {
    let cohort_m = run.require("cohort")?;
    let train_m = run.require("train")?;
    let mut rec = Recorder::new(&run.out);
    let cohort = run.load_cohort(&mut rec)?;
    let models = run.dir("train");
    let dir = run.dir("explain");
    for (id, file) in trained_pairs(run, &mut rec)? {
        let model = read_model(&rec.read(&models.join(&file))?)?;
        if model.feature_names != cohort.feature_names {
            return Err(Failure::Data(format!("{file}: feature names differ from cohort.csv")));
        }
        let preds = read_predictions(&rec.read(&models.join(format!("predictions_{id}.csv")))?)?;
        let mut rows = Vec::with_capacity(preds.len());
        for p in &preds {
            let r = cohort
                .rows
                .get(p.row)
                .ok_or_else(|| Failure::Data(format!("predictions_{id}.csv: row {} not in cohort", p.row)))?;
            rows.push(r.features.clone());
        }
        let attrs = tree_shap_rows(&model, &rows)?;
        let ids: Vec<String> = preds.iter().map(|p| p.row.to_string()).collect();
        rec.write(
            &dir.join(format!("{id}_attributions.csv")),
            &attributions_csv(&cohort.feature_names, &ids, &rows, &attrs),
        )?;
        let top = summarize(&cohort.feature_names, &attrs, run.config.explain.top_k);
        rec.write(&dir.join(format!("{id}_importance.csv")), &importance_csv(&top))?;
        if let Some(first) = top.first() {
            log::info!("explain: {id} top feature {} ({:.4})", first.feature, first.mean_abs);
        }
    }
    run.finish("explain", rec, &[&cohort_m, &train_m])
}

pub fn report(run: &Run) -> Result<Manifest, Failure> {
    let cohort_m = run.require("cohort")?;
    let train_m = run.require("train")?;
    let mut rec = Recorder::new(&run.out);
    let cohort = run.load_cohort(&mut rec)?;
    let dir = run.dir("report");
    let mut metrics = format!("{METRICS_HEADER}\n");
    for (id, _) in trained_pairs(run, &mut rec)? {
        let preds = read_predictions(&rec.read(&run.dir("train").join(format!("predictions_{id}.csv")))?)?;
        let labels: Vec<bool> = preds.iter().map(|p| p.positive).collect();
        let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
        let m = compute_metrics(&labels, &scores, run.config.model.threshold);
        metrics.push_str(&metrics_row(&id.replace('_', " "), &m));
        metrics.push('\n');
        match roc_points(&labels, &scores) {
            Some(points) => rec.write(&dir.join(format!("roc_{id}.csv")), &roc_csv(&points))?,
            None => log::warn!("report: {id} test split has one class; no ROC curve"),
        }
    }
    rec.write(&dir.join("metrics.csv"), &metrics)?;
    rec.write(&dir.join("cohort_summary.csv"), &cohort_summary(&cohort.rows).to_csv())?;
    run.finish("report", rec, &[&cohort_m, &train_m])
}

pub fn run_stage(run: &Run, stage: &str) -> Result<Manifest, Failure> {
    let dir = run.dir(stage);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| Failure::Other(format!("cannot clear {}: {e}", dir.display())))?;
    }
    match stage {
        "generate" => generate(run),
        "ingest" => ingest(run),
        "score" => score(run),
        "cohort" => cohort(run),
        "train" => train(run),
        "explain" => explain(run),
        "report" => report(run),
        other => Err(Failure::Other(format!("unknown stage {other}"))),
    }
}

/// Every stage in order; `generate` is skipped when inputs are configured.
pub fn pipeline(run: &Run) -> Result<Vec<Manifest>, Failure> {
    STAGES.iter().filter(|s| **s != "generate" || run.uses_generated()).map(|s| run_stage(run, s)).collect()
}

pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig, Failure> {
    let mut config = match path {
        Some(p) => PipelineConfig::load(p).map_err(|e| match e {
            utirisk::Error::Io { .. } => Failure::Config(e.to_string()),
            other => other.into(),
        })?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        config.set_seed(s);
    }
    Ok(config)
}
