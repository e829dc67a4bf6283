//! Modeling dataset: index-event selection, 12-month lookback features,
//! exclusions and temporally matched controls.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calendar::{Day, StudyCalendar};
use crate::error::{Error, Result};
use crate::events::{Comorbidity, LivingFlag, PatientId, RawEvent, Sex};
use crate::normalize::MappingTables;
use crate::risk::{apply_extensions, extract_episodes, score_patient, Likelihood, LikelihoodEpisode, LikelihoodTable};
use crate::tensor::{build_tensor, columns, ColumnAggregate, ColumnId, FeatureId, Namespace, SparseDayTensor};

pub const LOOKBACK_DAYS: u32 = 365;
pub const MIN_AGE: u32 = 18;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEvent {
    pub patient: PatientId,
    pub index_day: Day,
    pub label: Likelihood,
}

/// Highest-peak episode, ties broken towards the latest start. The index day
/// is that episode's start day.
pub fn select_index_events(episodes: &[LikelihoodEpisode]) -> Option<IndexEvent> {
    episodes.iter().max_by_key(|e| (e.peak, e.start)).map(|e| IndexEvent {
        patient: e.patient.clone(),
        index_day: e.start,
        label: e.peak,
    })
}

/// Largest-remainder apportionment of `total` across `weights`; remainders tie
/// towards the lower index.
pub fn apportion(total: usize, weights: &[u64]) -> Vec<usize> {
    let sum: u64 = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let total_u = total as u128;
    let mut alloc: Vec<usize> = Vec::with_capacity(weights.len());
    let mut remainders: Vec<(u128, usize)> = Vec::with_capacity(weights.len());
    for (i, w) in weights.iter().enumerate() {
        let num = total_u * u128::from(*w);
        alloc.push((num / u128::from(sum)) as usize);
        remainders.push((num % u128::from(sum), i));
    }
    let mut left = total - alloc.iter().sum::<usize>();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, i) in remainders {
        if left == 0 {
            break;
        }
        alloc[i] += 1;
        left -= 1;
    }
    alloc
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlSample {
    pub assignments: Vec<(PatientId, Day)>,
    /// Set when fewer eligible controls existed than were requested.
    pub shortfall: Option<(usize, usize)>,
}

/// Draws `requested` controls whose index-day month histogram is
/// proportional to the UTI group's. Each control's day is drawn from the UTI
/// index days of its assigned month.
pub fn sample_controls(
    eligible: &[PatientId],
    uti_index_days: &[Day],
    requested: usize,
    calendar: &StudyCalendar,
    seed: u64,
) -> ControlSample {
    let mut by_month: BTreeMap<u32, Vec<Day>> = BTreeMap::new();
    for d in uti_index_days {
        by_month.entry(calendar.month_of_day(*d)).or_default().push(*d);
    }
    for days in by_month.values_mut() {
        days.sort_unstable();
    }
    let total = requested.min(eligible.len());
    let shortfall = (total < requested).then(|| {
        log::warn!("requested {requested} controls but only {} are eligible", eligible.len());
        (requested, eligible.len())
    });
    if by_month.is_empty() {
        return ControlSample { assignments: Vec::new(), shortfall };
    }

    let weights: Vec<u64> = by_month.values().map(|d| d.len() as u64).collect();
    let quotas = apportion(total, &weights);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<PatientId> = eligible.to_vec();
    pool.sort();
    pool.shuffle(&mut rng);

    let mut assignments = Vec::with_capacity(total);
    let mut next = pool.into_iter();
    for (days, quota) in by_month.values().zip(quotas) {
        for _ in 0..quota {
            let patient = next.next().expect("quota never exceeds pool");
            let day = days[rng.gen_range(0..days.len())];
            assignments.push((patient, day));
        }
    }
    ControlSample { assignments, shortfall }
}

/// Demographics from the nearest snapshot before a day.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemographicsAtIndex {
    pub age: u32,
    pub sex: Sex,
    pub living: BTreeSet<LivingFlag>,
    pub comorbidities: BTreeSet<Comorbidity>,
}

/// Latest snapshot on a day in `[earliest, before)`, read from the broadcast
/// demographic columns.
pub fn demographics_before(
    tensor: &SparseDayTensor,
    patient: &PatientId,
    before: i64,
    earliest: Option<i64>,
) -> Option<DemographicsAtIndex> {
    let grid = tensor.patient(patient)?;
    let snap = grid.column(tensor.column_id(&columns::snapshot())?)?;
    let cap = before - 1;
    let run = snap.runs().iter().rev().find(|r| i64::from(r.first) <= cap)?;
    let day = i64::from(run.last).min(cap);
    if earliest.is_some_and(|e| day < e) {
        return None;
    }
    let day = day as Day;
    let at = |id: FeatureId| tensor.column_id(&id).map_or(0, |c| tensor.value_at(patient, c, day));
    let sex = [Sex::Female, Sex::Male, Sex::Unknown]
        .into_iter()
        .find(|s| at(FeatureId::new(Namespace::Demographic, format!("sex/{}", s.token()))) > 0)
        .unwrap_or(Sex::Unknown);
    Some(DemographicsAtIndex {
        age: u32::from(at(columns::age())),
        sex,
        living: LivingFlag::ALL
            .iter()
            .copied()
            .filter(|f| at(FeatureId::new(Namespace::Living, f.token())) > 0)
            .collect(),
        comorbidities: Comorbidity::ALL
            .iter()
            .copied()
            .filter(|f| at(FeatureId::new(Namespace::Comorbidity, f.token())) > 0)
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExclusionReason {
    ShortObservationWindow,
    UnderAge,
    UnknownSex,
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExclusionReason::ShortObservationWindow => "short-observation-window",
            ExclusionReason::UnderAge => "under-18",
            ExclusionReason::UnknownSex => "unknown-sex",
        })
    }
}

/// A row before exclusions and feature extraction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateRow {
    pub patient: PatientId,
    pub index_day: Day,
    pub label: Likelihood,
    pub demographics: Option<DemographicsAtIndex>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionReport {
    pub input: usize,
    pub retained: usize,
    pub excluded: BTreeMap<ExclusionReason, usize>,
}

impl ExclusionReport {
    pub fn merge(&mut self, other: &ExclusionReport) {
        self.input += other.input;
        self.retained += other.retained;
        for (k, v) in &other.excluded {
            *self.excluded.entry(*k).or_default() += v;
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("reason\tcount\ninput\t{}\n", self.input);
        for r in [ExclusionReason::ShortObservationWindow, ExclusionReason::UnderAge, ExclusionReason::UnknownSex] {
            out.push_str(&format!("{r}\t{}\n", self.excluded.get(&r).copied().unwrap_or(0)));
        }
        out.push_str(&format!("retained\t{}\n", self.retained));
        out
    }
}

/// First failing check wins: window, then age, then sex. Rows without any
/// demographic snapshot count as unknown sex.
pub fn exclusion_reason(row: &CandidateRow) -> Option<ExclusionReason> {
    if i64::from(row.index_day) - i64::from(LOOKBACK_DAYS) < 0 {
        return Some(ExclusionReason::ShortObservationWindow);
    }
    match &row.demographics {
        Some(d) if d.age < MIN_AGE => Some(ExclusionReason::UnderAge),
        Some(d) if d.sex == Sex::Unknown => Some(ExclusionReason::UnknownSex),
        None => Some(ExclusionReason::UnknownSex),
        Some(_) => None,
    }
}

pub fn apply_exclusions(rows: Vec<CandidateRow>) -> (Vec<CandidateRow>, ExclusionReport) {
    let mut report = ExclusionReport { input: rows.len(), ..Default::default() };
    let kept: Vec<CandidateRow> = rows
        .into_iter()
        .filter(|r| match exclusion_reason(r) {
            Some(reason) => {
                *report.excluded.entry(reason).or_default() += 1;
                false
            }
            None => true,
        })
        .collect();
    report.retained = kept.len();
    (kept, report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    Count,
    Any,
    Last,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemographicField {
    Age,
    /// 1 for female, 0 otherwise.
    Sex,
    Living(LivingFlag),
    Comorbidity(Comorbidity),
    /// 1 when no snapshot falls inside the lookback window.
    Missing,
}

impl DemographicField {
    pub fn parse(text: &str) -> Option<Self> {
        match text {
            "age" => Some(DemographicField::Age),
            "sex" => Some(DemographicField::Sex),
            "missing" => Some(DemographicField::Missing),
            _ => {
                let (ns, flag) = text.split_once(':')?;
                match ns {
                    "living" => LivingFlag::parse(flag).map(DemographicField::Living),
                    "comorbidity" => Comorbidity::parse(flag).map(DemographicField::Comorbidity),
                    _ => None,
                }
            }
        }
    }

    pub fn token(&self) -> String {
        match self {
            DemographicField::Age => "age".into(),
            DemographicField::Sex => "sex".into(),
            DemographicField::Missing => "missing".into(),
            DemographicField::Living(f) => format!("living:{}", f.token()),
            DemographicField::Comorbidity(f) => format!("comorbidity:{}", f.token()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FeatureSource {
    Tensor {
        selectors: Vec<String>,
        aggregate: Aggregate,
    },
    Demographic(DemographicField),
    /// Earlier episodes reaching `min_peak`, scored from pre-index evidence only.
    PriorEpisodes {
        min_peak: Likelihood,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureDef {
    pub name: String,
    pub source: FeatureSource,
}

/// Config-file shape of one feature definition; exactly one of `columns`,
/// `demographic` or `prior_episodes_min_peak` is set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureDefConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub columns: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregate: Option<Aggregate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demographic: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_episodes_min_peak: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSpec {
    features: Vec<FeatureDef>,
}

impl FeatureSpec {
    pub fn new(features: Vec<FeatureDef>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for f in &features {
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Config(format!("duplicate feature name `{}`", f.name)));
            }
            if f.name.is_empty() || f.name.contains(',') {
                return Err(Error::Config(format!("invalid feature name `{}`", f.name)));
            }
        }
        Ok(FeatureSpec { features })
    }

    pub fn features(&self) -> &[FeatureDef] {
        &self.features
    }

    pub fn names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }

    pub fn from_config(defs: &[FeatureDefConfig]) -> Result<Self> {
        let features = defs
            .iter()
            .map(|d| {
                let bad = |why: &str| Error::Config(format!("feature `{}`: {why}", d.name));
                let source = match (&d.columns, &d.demographic, d.prior_episodes_min_peak) {
                    (Some(cols), None, None) => {
                        if cols.is_empty() {
                            return Err(bad("empty column list"));
                        }
                        for c in cols {
                            let ns = c.split_once(':').map(|(ns, _)| ns);
                            if ns.and_then(Namespace::parse).is_none() {
                                return Err(bad(&format!("bad selector `{c}`")));
                            }
                        }
                        FeatureSource::Tensor {
                            selectors: cols.clone(),
                            aggregate: d.aggregate.ok_or_else(|| bad("missing aggregate"))?,
                        }
                    }
                    (None, Some(field), None) => FeatureSource::Demographic(
                        DemographicField::parse(field).ok_or_else(|| bad("unknown demographic field"))?,
                    ),
                    (None, None, Some(peak)) => FeatureSource::PriorEpisodes {
                        min_peak: Likelihood::from_f64(peak).ok_or_else(|| bad("bad min peak"))?,
                    },
                    _ => return Err(bad("set exactly one of columns, demographic, prior_episodes_min_peak")),
                };
                Ok(FeatureDef { name: d.name.clone(), source })
            })
            .collect::<Result<Vec<_>>>()?;
        FeatureSpec::new(features)
    }

    pub fn to_config(&self) -> Vec<FeatureDefConfig> {
        self.features
            .iter()
            .map(|f| {
                let mut c = FeatureDefConfig { name: f.name.clone(), ..Default::default() };
                match &f.source {
                    FeatureSource::Tensor { selectors, aggregate } => {
                        c.columns = Some(selectors.clone());
                        c.aggregate = Some(*aggregate);
                    }
                    FeatureSource::Demographic(d) => c.demographic = Some(d.token()),
                    FeatureSource::PriorEpisodes { min_peak } => c.prior_episodes_min_peak = Some(min_peak.as_f64()),
                }
                c
            })
            .collect()
    }
}

impl Default for FeatureSpec {
    fn default() -> Self {
        let tensor = |name: &str, cols: &[&str], aggregate| FeatureDef {
            name: name.into(),
            source: FeatureSource::Tensor { selectors: cols.iter().map(|c| c.to_string()).collect(), aggregate },
        };
        let demo = |name: &str, field| FeatureDef { name: name.into(), source: FeatureSource::Demographic(field) };
        use DemographicField as D;
        let features = vec![
            tensor("n_antibiotics_dispensed", &["drug:antibiotic/*"], Aggregate::Count),
            tensor("n_uti_regular_antibiotics", &["antibiotic-category:regularly"], Aggregate::Count),
            tensor("n_urine_specimens", &["culture:specimen/*"], Aggregate::Count),
            tensor(
                "n_positive_cultures",
                &["culture:association/sometimes", "culture:association/regularly"],
                Aggregate::Count,
            ),
            tensor("n_resistant_results", &["ast-pair:resistant/*"], Aggregate::Count),
            tensor("n_hospital_admissions", &["admission:entry"], Aggregate::Count),
            tensor("n_catheter_dispensations", &["catheter:*"], Aggregate::Count),
            FeatureDef {
                name: "prior_uti_episodes".into(),
                source: FeatureSource::PriorEpisodes { min_peak: Likelihood::from_tenths(6).unwrap() },
            },
            demo("age", D::Age),
            demo("sex", D::Sex),
            demo("housebound", D::Living(LivingFlag::Housebound)),
            demo("nursing_or_care_home", D::Living(LivingFlag::NursingOrCareHome)),
            demo("homeless", D::Living(LivingFlag::Homeless)),
            demo("dementia", D::Comorbidity(Comorbidity::Dementia)),
            demo("incontinent_urinary", D::Comorbidity(Comorbidity::IncontinentUrinary)),
            demo("covid_high_risk", D::Comorbidity(Comorbidity::CovidHighRisk)),
            demo("covid_increased_risk", D::Comorbidity(Comorbidity::CovidIncreasedRisk)),
            demo("organ_transplant", D::Comorbidity(Comorbidity::OrganTransplant)),
            demo("demographics_missing", D::Missing),
        ];
        FeatureSpec::new(features).expect("default names are unique")
    }
}

/// Everything feature extraction reads. Only events strictly before the index
/// day ever reach the prior-episode rescoring.
pub struct FeatureContext<'a> {
    pub tensor: &'a SparseDayTensor,
    pub events: &'a BTreeMap<PatientId, Vec<RawEvent>>,
    pub tables: &'a MappingTables,
    pub likelihood: &'a LikelihoodTable,
}

enum Resolved {
    Tensor(Vec<ColumnId>, Aggregate),
    Demographic(DemographicField),
    PriorEpisodes(Likelihood),
}

fn resolve(spec: &FeatureSpec, tensor: &SparseDayTensor) -> Vec<Resolved> {
    spec.features
        .iter()
        .map(|f| match &f.source {
            FeatureSource::Tensor { selectors, aggregate } => {
                let mut cols: Vec<ColumnId> = selectors.iter().flat_map(|s| tensor.select(s)).collect();
                cols.sort_unstable();
                cols.dedup();
                Resolved::Tensor(cols, *aggregate)
            }
            FeatureSource::Demographic(d) => Resolved::Demographic(d.clone()),
            FeatureSource::PriorEpisodes { min_peak } => Resolved::PriorEpisodes(*min_peak),
        })
        .collect()
}

fn combine(aggs: &[ColumnAggregate], aggregate: Aggregate) -> f64 {
    match aggregate {
        // integer sums, so an empty selection is +0.0 rather than the float sum's -0.0
        Aggregate::Count => aggs.iter().map(|a| u64::from(a.count)).sum::<u64>() as f64,
        Aggregate::Sum => aggs.iter().map(|a| a.sum).sum::<u64>() as f64,
        Aggregate::Any => f64::from(u8::from(aggs.iter().any(ColumnAggregate::any))),
        Aggregate::Last => {
            aggs.iter().filter_map(|a| a.last_day.map(|d| (d, a.last))).max().map_or(0.0, |(_, v)| f64::from(v))
        }
    }
}

/// Episodes scored from the patient's evidence dated before `index_day`,
/// with every day from `index_day` on forced to zero.
pub fn episodes_before(ctx: &FeatureContext<'_>, patient: &PatientId, index_day: Day) -> Vec<LikelihoodEpisode> {
    let Some(events) = ctx.events.get(patient) else {
        return Vec::new();
    };
    let calendar = ctx.tensor.calendar();
    let before: Vec<RawEvent> = events
        .iter()
        .filter_map(|e| match e {
            RawEvent::Demographic(_) => None,
            RawEvent::Admission(a) if a.entry < index_day => {
                let mut a = a.clone();
                a.discharge = a.discharge.min(index_day - 1);
                Some(RawEvent::Admission(a))
            }
            RawEvent::Admission(_) => None,
            other if other.first_day(calendar) < index_day => Some(other.clone()),
            _ => None,
        })
        .collect();
    if before.is_empty() {
        return Vec::new();
    }
    let mut mini = build_tensor(&before, ctx.tables, calendar);
    apply_extensions(&mut mini, &before, ctx.tables);
    let mut days = score_patient(&mini, patient, ctx.likelihood);
    days.truncate(index_day as usize);
    extract_episodes(patient, &days)
}

/// Feature vector over the half-open window `[index - 365, index)`.
pub fn extract_features(ctx: &FeatureContext<'_>, patient: &PatientId, index_day: Day, spec: &FeatureSpec) -> Vec<f64> {
    extract_resolved(ctx, patient, index_day, &resolve(spec, ctx.tensor))
}

fn extract_resolved(ctx: &FeatureContext<'_>, patient: &PatientId, index_day: Day, resolved: &[Resolved]) -> Vec<f64> {
    let end = i64::from(index_day);
    let start = end - i64::from(LOOKBACK_DAYS);
    let demo = demographics_before(ctx.tensor, patient, end, Some(start));
    let mut prior: Option<Vec<LikelihoodEpisode>> = None;
    resolved
        .iter()
        .map(|r| match r {
            Resolved::Tensor(cols, aggregate) => {
                let aggs: Vec<ColumnAggregate> =
                    cols.iter().map(|c| ctx.tensor.aggregate(patient, *c, end, LOOKBACK_DAYS)).collect();
                combine(&aggs, *aggregate)
            }
            Resolved::Demographic(field) => match (&demo, field) {
                (None, DemographicField::Missing) => 1.0,
                (None, _) => 0.0,
                (Some(_), DemographicField::Missing) => 0.0,
                (Some(d), DemographicField::Age) => f64::from(d.age),
                (Some(d), DemographicField::Sex) => f64::from(u8::from(d.sex == Sex::Female)),
                (Some(d), DemographicField::Living(f)) => f64::from(u8::from(d.living.contains(f))),
                (Some(d), DemographicField::Comorbidity(f)) => f64::from(u8::from(d.comorbidities.contains(f))),
            },
            Resolved::PriorEpisodes(min_peak) => {
                let eps = prior.get_or_insert_with(|| episodes_before(ctx, patient, index_day));
                eps.iter().filter(|e| i64::from(e.start) >= start && e.peak >= *min_peak).count() as f64
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortRow {
    pub patient: PatientId,
    pub index_day: Day,
    pub label: Likelihood,
    pub demographics: DemographicsAtIndex,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub feature_names: Vec<String>,
    pub rows: Vec<CohortRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    /// Controls requested per retained UTI row.
    pub control_ratio: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig { control_ratio: 4.0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortReport {
    pub uti_candidates: usize,
    pub uti_exclusions: ExclusionReport,
    pub control_eligible: usize,
    pub controls_requested: usize,
    pub control_exclusions: ExclusionReport,
    pub exclusions: ExclusionReport,
    pub label_counts: BTreeMap<String, usize>,
}

/// Builds the full cohort: UTI rows from index events, then matched controls,
/// exclusions on both, then features.
pub fn build_cohort(
    ctx: &FeatureContext<'_>,
    episodes: &BTreeMap<PatientId, Vec<LikelihoodEpisode>>,
    spec: &FeatureSpec,
    config: &CohortConfig,
    seed: u64,
) -> (Cohort, CohortReport) {
    let tensor = ctx.tensor;
    let candidate = |patient: &PatientId, index_day: Day, label: Likelihood| CandidateRow {
        patient: patient.clone(),
        index_day,
        label,
        demographics: demographics_before(tensor, patient, i64::from(index_day), None),
    };

    let uti: Vec<CandidateRow> = episodes
        .values()
        .filter_map(|eps| select_index_events(eps))
        .map(|ix| candidate(&ix.patient, ix.index_day, ix.label))
        .collect();
    let uti_candidates = uti.len();
    let (uti, uti_exclusions) = apply_exclusions(uti);

    let eligible: Vec<PatientId> =
        tensor.patients().map(|(p, _)| p).filter(|p| episodes.get(*p).is_none_or(|e| e.is_empty())).cloned().collect();
    let requested = (config.control_ratio * uti.len() as f64).round() as usize;
    let days: Vec<Day> = uti.iter().map(|r| r.index_day).collect();
    let sample = sample_controls(&eligible, &days, requested, tensor.calendar(), seed);
    let controls: Vec<CandidateRow> =
        sample.assignments.iter().map(|(p, d)| candidate(p, *d, Likelihood::ZERO)).collect();
    let (controls, control_exclusions) = apply_exclusions(controls);

    let mut exclusions = uti_exclusions.clone();
    exclusions.merge(&control_exclusions);

    let mut retained: Vec<CandidateRow> = uti.into_iter().chain(controls).collect();
    retained.sort_by(|a, b| (&a.patient, a.index_day).cmp(&(&b.patient, b.index_day)));

    let resolved = resolve(spec, tensor);
    let rows: Vec<CohortRow> = retained
        .into_par_iter()
        .map(|r| CohortRow {
            features: extract_resolved(ctx, &r.patient, r.index_day, &resolved),
            demographics: r.demographics.expect("exclusions drop rows without demographics"),
            patient: r.patient,
            index_day: r.index_day,
            label: r.label,
        })
        .collect();

    let mut label_counts = BTreeMap::new();
    for r in &rows {
        *label_counts.entry(r.label.to_string()).or_default() += 1;
    }
    let report = CohortReport {
        uti_candidates,
        uti_exclusions,
        control_eligible: eligible.len(),
        controls_requested: requested,
        control_exclusions,
        exclusions,
        label_counts,
    };
    (Cohort { feature_names: spec.names(), rows }, report)
}

fn split_set(s: &str) -> impl Iterator<Item = &str> {
    s.split(';').filter(|t| !t.is_empty())
}

const FIXED_COLUMNS: [&str; 8] =
    ["patient_id", "index_date", "index_day", "label", "demo_age", "demo_sex", "demo_living", "demo_comorbidities"];

impl Cohort {
    pub fn to_csv(&self, calendar: &StudyCalendar) -> String {
        let mut out = FIXED_COLUMNS.join(",");
        for n in &self.feature_names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for r in &self.rows {
            let join = |it: Vec<&str>| it.join(";");
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}",
                r.patient,
                calendar.date(r.index_day),
                r.index_day,
                r.label,
                r.demographics.age,
                r.demographics.sex,
                join(r.demographics.living.iter().map(|f| f.token()).collect()),
                join(r.demographics.comorbidities.iter().map(|f| f.token()).collect()),
            ));
            for v in &r.features {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: Vec<&str> =
            lines.next().ok_or(Error::CohortFormat { line: 1, reason: "empty file".into() })?.split(',').collect();
        if header.len() < FIXED_COLUMNS.len() || header[..FIXED_COLUMNS.len()] != FIXED_COLUMNS {
            return Err(Error::CohortFormat { line: 1, reason: "unexpected header".into() });
        }
        let feature_names: Vec<String> = header[FIXED_COLUMNS.len()..].iter().map(|s| s.to_string()).collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let bad = |reason: String| Error::CohortFormat { line: i + 2, reason };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != header.len() {
                return Err(bad(format!("expected {} fields, got {}", header.len(), f.len())));
            }
            rows.push(CohortRow {
                patient: PatientId::new(f[0]).ok_or_else(|| bad("empty patient".into()))?,
                index_day: f[2].parse().map_err(|_| bad("bad index_day".into()))?,
                label: f[3].parse().map_err(bad)?,
                demographics: DemographicsAtIndex {
                    age: f[4].parse().map_err(|_| bad("bad age".into()))?,
                    sex: Sex::parse(f[5]).ok_or_else(|| bad("bad sex".into()))?,
                    living: split_set(f[6])
                        .map(|t| LivingFlag::parse(t).ok_or_else(|| bad(format!("bad flag {t}"))))
                        .collect::<Result<_>>()?,
                    comorbidities: split_set(f[7])
                        .map(|t| Comorbidity::parse(t).ok_or_else(|| bad(format!("bad flag {t}"))))
                        .collect::<Result<_>>()?,
                },
                features: f[FIXED_COLUMNS.len()..]
                    .iter()
                    .map(|v| v.parse::<f64>().map_err(|_| bad(format!("bad value `{v}`"))))
                    .collect::<Result<_>>()?,
            });
        }
        Ok(Cohort { feature_names, rows })
    }
}
