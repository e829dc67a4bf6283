//! Seeded synthetic EHR generator emitting the five ingest files plus a
//! planted-driver manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calendar::{Day, StudyCalendar};
use crate::error::{Error, Result};
use crate::events::{
    AdmissionEvent, AstResultEvent, Comorbidity, CultureResult, DemographicSnapshot, DispensationEvent, DrugClass,
    LivingFlag, PatientId, RawEvent, Route, Sex, SourceKind, Susceptibility, UrineCultureEvent,
};

pub const MANIFEST_FILE: &str = "drivers.csv";
pub const MANIFEST_HEADER: &str = "patient_id,drivers";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgeBand {
    pub min: u32,
    pub max: u32,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SexWeights {
    pub female: f64,
    pub male: f64,
    pub unknown: f64,
}

impl Default for SexWeights {
    fn default() -> Self {
        SexWeights { female: 0.5, male: 0.49, unknown: 0.01 }
    }
}

/// Daily probabilities of events that never raise the likelihood score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackgroundRates {
    /// Antibiotics with no UTI relevance.
    pub unrelated_antibiotic: f64,
    pub steroid: f64,
    pub hormone: f64,
    /// Admissions without N39.0.
    pub admission: f64,
}

impl Default for BackgroundRates {
    fn default() -> Self {
        BackgroundRates { unrelated_antibiotic: 4e-4, steroid: 2e-4, hormone: 3e-4, admission: 1e-4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Raise,
    Lower,
}

/// A hidden per-patient trait that changes episode rates and leaves an
/// observable marker in the records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedDriver {
    pub name: String,
    /// `catheter`, `comorbidity:<flag>` or `living:<flag>`.
    pub marker: String,
    pub prevalence: f64,
    pub direction: Direction,
    /// Rate multiplier is `1 + strength` (raise) or `1 / (1 + strength)` (lower).
    pub strength: f64,
    /// Restricts the effect to episodes of this likelihood; all episodes when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
}

impl PlantedDriver {
    pub fn multiplier(&self) -> f64 {
        match self.direction {
            Direction::Raise => 1.0 + self.strength,
            Direction::Lower => 1.0 / (1.0 + self.strength),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Marker {
    Catheter,
    Comorbidity(Comorbidity),
    Living(LivingFlag),
}

impl Marker {
    fn parse(text: &str) -> Option<Marker> {
        if text == "catheter" {
            return Some(Marker::Catheter);
        }
        match text.split_once(':')? {
            ("comorbidity", f) => Comorbidity::parse(f).map(Marker::Comorbidity),
            ("living", f) => LivingFlag::parse(f).map(Marker::Living),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub patients: usize,
    pub sex: SexWeights,
    /// Age at the start of the study period.
    pub age_bands: Vec<AgeBand>,
    /// Daily probability of starting an episode scripted to peak at
    /// 0.2, 0.4, 0.6, 0.8 and 1.0 respectively.
    pub episode_rates: [f64; 5],
    pub background: BackgroundRates,
    pub female_multiplier: f64,
    pub elderly_multiplier: f64,
    pub elderly_age: u32,
    /// Chance that an AST result reports resistance.
    pub resistance_probability: f64,
    /// Chance that a monthly demographic snapshot is absent.
    pub missing_snapshot_probability: f64,
    pub death_probability: f64,
    /// Keys are `living:<flag>` or `comorbidity:<flag>`.
    pub prevalence: BTreeMap<String, f64>,
    pub drivers: Vec<PlantedDriver>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let band = |min, max, weight| AgeBand { min, max, weight };
        let prevalence = [
            ("living:housebound", 0.03),
            ("living:nursing-or-care-home", 0.02),
            ("living:homeless", 0.005),
            ("comorbidity:incontinent-urinary", 0.04),
            ("comorbidity:dementia", 0.03),
            ("comorbidity:covid-high-risk", 0.05),
            ("comorbidity:covid-increased-risk", 0.1),
            ("comorbidity:organ-transplant", 0.005),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        GeneratorConfig {
            seed: 1,
            patients: 1000,
            sex: SexWeights::default(),
            age_bands: vec![
                band(10, 17, 0.08),
                band(18, 24, 0.1),
                band(25, 44, 0.3),
                band(45, 64, 0.27),
                band(65, 84, 0.2),
                band(85, 99, 0.05),
            ],
            episode_rates: [6e-5, 4e-5, 5e-5, 3e-5, 6e-6],
            background: BackgroundRates::default(),
            female_multiplier: 2.0,
            elderly_multiplier: 1.5,
            elderly_age: 65,
            resistance_probability: 0.2,
            missing_snapshot_probability: 0.02,
            death_probability: 0.01,
            prevalence,
            drivers: Vec::new(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Config(what));
        let prob = |name: &str, p: f64| -> Result<()> {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be a probability, got {p}")))
            }
        };
        for (i, r) in self.episode_rates.iter().enumerate() {
            prob(&format!("episode_rates[{i}]"), *r)?;
        }
        let b = &self.background;
        for (n, r) in [
            ("unrelated_antibiotic", b.unrelated_antibiotic),
            ("steroid", b.steroid),
            ("hormone", b.hormone),
            ("admission", b.admission),
        ] {
            prob(n, r)?;
        }
        prob("resistance_probability", self.resistance_probability)?;
        prob("missing_snapshot_probability", self.missing_snapshot_probability)?;
        prob("death_probability", self.death_probability)?;
        for (k, p) in &self.prevalence {
            if marker_flag(k).is_none() {
                return bad(format!("unknown prevalence key `{k}`"));
            }
            prob(k, *p)?;
        }
        let sw = [self.sex.female, self.sex.male, self.sex.unknown];
        if sw.iter().any(|w| !(*w >= 0.0)) || sw.iter().sum::<f64>() <= 0.0 {
            return bad("sex weights must be non-negative with a positive sum".into());
        }
        if self.age_bands.is_empty()
            || self.age_bands.iter().any(|a| a.min > a.max || !(a.weight >= 0.0))
            || self.age_bands.iter().map(|a| a.weight).sum::<f64>() <= 0.0
        {
            return bad("age bands need min <= max and non-negative weights with a positive sum".into());
        }
        if !(self.female_multiplier >= 0.0) || !(self.elderly_multiplier >= 0.0) {
            return bad("rate multipliers must be non-negative".into());
        }
        let mut names = BTreeSet::new();
        for d in &self.drivers {
            if d.name.is_empty() || d.name.contains([',', ';']) || !names.insert(d.name.as_str()) {
                return bad(format!("invalid or duplicate driver name `{}`", d.name));
            }
            if Marker::parse(&d.marker).is_none() {
                return bad(format!("driver `{}`: unknown marker `{}`", d.name, d.marker));
            }
            prob(&format!("driver `{}` prevalence", d.name), d.prevalence)?;
            if !(d.strength >= 0.0) || !d.strength.is_finite() {
                return bad(format!("driver `{}`: strength must be >= 0", d.name));
            }
            if let Some(t) = d.target {
                if scenario_index(t).is_none() {
                    return bad(format!("driver `{}`: target must be one of 0.2..1.0", d.name));
                }
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: GeneratorConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn marker_flag(key: &str) -> Option<Marker> {
    Marker::parse(key).filter(|m| !matches!(m, Marker::Catheter))
}

fn scenario_index(likelihood: f64) -> Option<usize> {
    let tenths = (likelihood * 10.0).round();
    ((likelihood * 10.0 - tenths).abs() < 1e-9 && [2.0, 4.0, 6.0, 8.0, 10.0].contains(&tenths))
        .then(|| (tenths as usize) / 2 - 1)
}

/// Generated records in ingest order, one vector per patient.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPatient {
    pub id: PatientId,
    pub drivers: Vec<String>,
    pub events: Vec<RawEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub patients: Vec<SyntheticPatient>,
}

pub fn patient_id(index: usize, count: usize) -> PatientId {
    let width = count.to_string().len().max(6);
    PatientId::new(format!("P{index:0width$}")).expect("non-empty")
}

pub fn generate(config: &GeneratorConfig, calendar: &StudyCalendar) -> Result<SyntheticData> {
    config.validate()?;
    let patients = (0..config.patients).into_par_iter().map(|i| generate_patient(config, calendar, i)).collect();
    Ok(SyntheticData { patients })
}

const REGULAR_ABX: [(&str, f64, u32); 3] =
    [("trimethoprim", 200.0, 6), ("nitrofurantoin", 100.0, 6), ("pivmecillinam", 400.0, 9)];
const SOMETIMES_ABX: [(&str, f64, u32); 3] =
    [("amoxicillin", 500.0, 15), ("co-amoxiclav", 625.0, 15), ("cefuroxime", 250.0, 14)];
const RARELY_ABX: [(&str, f64, u32); 3] =
    [("doxycycline", 100.0, 7), ("clarithromycin", 500.0, 14), ("flucloxacillin", 500.0, 28)];
const UNRELATED_ABX: [(&str, f64, u32); 2] = [("azithromycin", 500.0, 3), ("clindamycin", 300.0, 28)];
const STEROIDS: [(&str, f64, u32); 2] = [("prednisolone", 5.0, 28), ("hydrocortisone", 10.0, 30)];
const HORMONES: [(&str, f64, u32); 2] = [("levothyroxine", 0.1, 28), ("estradiol", 1.0, 28)];
const REGULAR_ORGANISMS: [&str; 3] = ["escherichia coli", "klebsiella pneumoniae", "proteus mirabilis"];
const AST_PANEL: [&str; 3] = ["trimethoprim", "nitrofurantoin", "cefalexin"];
const OTHER_ICD10: [&str; 5] = ["I10", "J18.9", "K35.8", "S72.0", "E11.9"];
const OPCS: [&str; 3] = ["W38.1", "H01.1", "M45.9"];

struct PatientRng<'a> {
    rng: ChaCha8Rng,
    id: &'a PatientId,
}

impl PatientRng<'_> {
    fn pick<T: Copy>(&mut self, items: &[T]) -> T {
        items[self.rng.gen_range(0..items.len())]
    }

    fn dispense(&mut self, day: Day, (drug, dose, qty): (&str, f64, u32), class: DrugClass) -> RawEvent {
        RawEvent::Dispensation(DispensationEvent {
            patient: self.id.clone(),
            day,
            drug: drug.into(),
            dosage_mg: dose,
            quantity: qty,
            class,
            route: if class == DrugClass::CatheterSupply { Route::Other } else { Route::Oral },
        })
    }

    fn culture(&mut self, day: Day, result: CultureResult, organism: Option<&str>) -> RawEvent {
        let source = self.pick(&["msu", "msu", "msu", "csu", "urine"]);
        RawEvent::UrineCulture(UrineCultureEvent {
            patient: self.id.clone(),
            day,
            result,
            organism: organism.map(str::to_string),
            specimen_source: source.into(),
        })
    }
}

fn weighted_index(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

fn generate_patient(config: &GeneratorConfig, calendar: &StudyCalendar, index: usize) -> SyntheticPatient {
    let id = patient_id(index, config.patients);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let mut p = PatientRng { rng, id: &id };

    let sex = [Sex::Female, Sex::Male, Sex::Unknown]
        [weighted_index(&mut p.rng, &[config.sex.female, config.sex.male, config.sex.unknown])];
    let weights: Vec<f64> = config.age_bands.iter().map(|a| a.weight).collect();
    let band = &config.age_bands[weighted_index(&mut p.rng, &weights)];
    let age0 = p.rng.gen_range(band.min..=band.max);
    let birthday_offset = p.rng.gen_range(0..12u32);
    let lsoa = format!("E01{:06}", p.rng.gen_range(0..2000u32));

    let mut living = BTreeSet::new();
    let mut comorbidities = BTreeSet::new();
    for (key, prob) in &config.prevalence {
        if p.rng.gen::<f64>() < *prob {
            match marker_flag(key) {
                Some(Marker::Living(f)) => {
                    living.insert(f);
                }
                Some(Marker::Comorbidity(f)) => {
                    comorbidities.insert(f);
                }
                _ => {}
            }
        }
    }

    let mut multipliers = [1.0f64; 5];
    let mut active = Vec::new();
    let mut catheter = false;
    for d in &config.drivers {
        if p.rng.gen::<f64>() >= d.prevalence {
            continue;
        }
        active.push(d.name.clone());
        match Marker::parse(&d.marker).expect("validated") {
            Marker::Catheter => catheter = true,
            Marker::Comorbidity(f) => {
                comorbidities.insert(f);
            }
            Marker::Living(f) => {
                living.insert(f);
            }
        }
        match d.target.and_then(scenario_index) {
            Some(s) => multipliers[s] *= d.multiplier(),
            None => multipliers.iter_mut().for_each(|m| *m *= d.multiplier()),
        }
    }
    if sex == Sex::Female {
        multipliers.iter_mut().for_each(|m| *m *= config.female_multiplier);
    }
    if age0 >= config.elderly_age {
        multipliers.iter_mut().for_each(|m| *m *= config.elderly_multiplier);
    }
    let episode_p: Vec<f64> = config.episode_rates.iter().zip(multipliers).map(|(r, m)| (r * m).min(1.0)).collect();

    let last = calendar.last_day();
    let death_day = (p.rng.gen::<f64>() < config.death_probability).then(|| p.rng.gen_range(0..=last));
    let alive_until = death_day.unwrap_or(last);

    let mut events = Vec::new();
    let month_age = |m: u32| age0 + (m + birthday_offset) / 12;
    let death_month = death_day.map(|d| calendar.month_of_day(d));
    let mut snapshots = Vec::new();
    for m in 0..calendar.total_months() {
        let first = calendar.month_days(m).expect("month in range").first;
        if first > alive_until {
            break;
        }
        if p.rng.gen::<f64>() < config.missing_snapshot_probability {
            continue;
        }
        snapshots.push(RawEvent::Demographic(DemographicSnapshot {
            patient: id.clone(),
            month: m,
            age: month_age(m),
            sex,
            death_date: death_day.filter(|_| death_month == Some(m)).map(|d| calendar.date(d)),
            living: living.clone(),
            comorbidities: comorbidities.clone(),
            lsoa: lsoa.clone(),
        }));
    }

    let catheter_offset = p.rng.gen_range(0..28u32);
    let bg = &config.background;
    for day in 0..=alive_until {
        if catheter && day % 28 == catheter_offset {
            events.push(p.dispense(day, ("urinary catheter", 1.0, 10), DrugClass::CatheterSupply));
        }
        for (s, prob) in episode_p.iter().enumerate() {
            if p.rng.gen::<f64>() < *prob {
                emit_episode(&mut p, config, calendar, day, s, &mut events);
            }
        }
        if p.rng.gen::<f64>() < bg.unrelated_antibiotic {
            let drug = p.pick(&UNRELATED_ABX);
            events.push(p.dispense(day, drug, DrugClass::Antibiotic));
        }
        if p.rng.gen::<f64>() < bg.steroid {
            let drug = p.pick(&STEROIDS);
            events.push(p.dispense(day, drug, DrugClass::Steroid));
        }
        if p.rng.gen::<f64>() < bg.hormone {
            let drug = p.pick(&HORMONES);
            events.push(p.dispense(day, drug, DrugClass::Hormone));
        }
        if p.rng.gen::<f64>() < bg.admission {
            let los = p.rng.gen_range(0..10u32);
            let mut icd10: BTreeSet<String> = [p.pick(&OTHER_ICD10).to_string()].into();
            if p.rng.gen_bool(0.3) {
                icd10.insert(p.pick(&OTHER_ICD10).to_string());
            }
            let opcs = if p.rng.gen_bool(0.4) { [p.pick(&OPCS).to_string()].into() } else { BTreeSet::new() };
            events.push(RawEvent::Admission(AdmissionEvent {
                patient: id.clone(),
                entry: day,
                discharge: (day + los).min(last),
                icd10,
                opcs,
            }));
        }
    }
    snapshots.extend(events);
    SyntheticPatient { id: id.clone(), drivers: active, events: snapshots }
}

/// Scripted evidence whose framework score peaks at `(s + 1) * 0.2`.
fn emit_episode(
    p: &mut PatientRng<'_>,
    config: &GeneratorConfig,
    calendar: &StudyCalendar,
    day: Day,
    s: usize,
    out: &mut Vec<RawEvent>,
) {
    match s {
        0 => {
            if p.rng.gen_bool(0.5) {
                let drug = p.pick(&RARELY_ABX);
                out.push(p.dispense(day, drug, DrugClass::Antibiotic));
            } else {
                let result = p.pick(&[CultureResult::NoGrowth, CultureResult::NoSignificantGrowth]);
                out.push(p.culture(day, result, None));
            }
        }
        1 => {
            let drug = p.pick(&SOMETIMES_ABX);
            out.push(p.dispense(day, drug, DrugClass::Antibiotic));
            if p.rng.gen_bool(0.5) {
                out.push(p.culture(day, CultureResult::NoSignificantGrowth, None));
            }
        }
        2 => {
            if p.rng.gen_bool(0.7) {
                let drug = p.pick(&REGULAR_ABX);
                out.push(p.dispense(day, drug, DrugClass::Antibiotic));
            } else {
                let organism = p.pick(&REGULAR_ORGANISMS);
                out.push(p.culture(day, CultureResult::MixedGrowth, Some(organism)));
            }
        }
        _ => {
            let drug = p.pick(&REGULAR_ABX);
            out.push(p.dispense(day, drug, DrugClass::Antibiotic));
            let organism = p.pick(&REGULAR_ORGANISMS);
            out.push(p.culture(day, CultureResult::ReferToAst, Some(organism)));
            for antibiotic in AST_PANEL {
                let susceptibility = if p.rng.gen::<f64>() < config.resistance_probability {
                    Susceptibility::Resistant
                } else {
                    Susceptibility::Susceptible
                };
                out.push(RawEvent::AstResult(AstResultEvent {
                    patient: p.id.clone(),
                    day,
                    organism: organism.into(),
                    antibiotic: antibiotic.into(),
                    susceptibility,
                    specimen_source: "msu".into(),
                }));
            }
            if s == 4 {
                let los = p.rng.gen_range(1..=5u32);
                out.push(RawEvent::Admission(AdmissionEvent {
                    patient: p.id.clone(),
                    entry: day,
                    discharge: (day + los).min(calendar.last_day()),
                    icd10: ["N39.0".to_string()].into(),
                    opcs: BTreeSet::new(),
                }));
            }
        }
    }
}

impl SyntheticData {
    /// Each source file's full text, header included, in patient order.
    pub fn files(&self, calendar: &StudyCalendar) -> BTreeMap<SourceKind, String> {
        let mut files: BTreeMap<SourceKind, String> =
            SourceKind::ALL.iter().map(|k| (*k, format!("{}\n", k.header()))).collect();
        for patient in &self.patients {
            for e in &patient.events {
                let text = files.get_mut(&e.kind()).expect("all kinds present");
                text.push_str(&e.to_line(calendar));
                text.push('\n');
            }
        }
        files
    }

    pub fn manifest(&self) -> String {
        let mut out = format!("{MANIFEST_HEADER}\n");
        for p in &self.patients {
            out.push_str(&format!("{},{}\n", p.id, p.drivers.join(";")));
        }
        out
    }

    pub fn events(&self) -> Vec<RawEvent> {
        self.patients.iter().flat_map(|p| p.events.iter().cloned()).collect()
    }

    pub fn write_to_dir(&self, dir: &Path, calendar: &StudyCalendar) -> Result<BTreeMap<String, usize>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut counts = BTreeMap::new();
        for (kind, text) in self.files(calendar) {
            let path = dir.join(kind.file_name());
            std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
            counts.insert(kind.file_name().to_string(), text.lines().count() - 1);
        }
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.manifest()).map_err(|e| Error::io(&path, e))?;
        counts.insert(MANIFEST_FILE.to_string(), self.patients.len());
        Ok(counts)
    }
}

/// Parses a driver manifest into patient → active driver names.
pub fn read_manifest(text: &str) -> Result<BTreeMap<PatientId, Vec<String>>> {
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::Config("driver manifest has an unexpected header".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let (id, drivers) = line
                .split_once(',')
                .ok_or_else(|| Error::Config(format!("driver manifest line {}: missing comma", i + 2)))?;
            let id =
                PatientId::new(id).ok_or_else(|| Error::Config(format!("driver manifest line {}: empty id", i + 2)))?;
            let drivers = drivers.split(';').filter(|d| !d.is_empty()).map(str::to_string).collect();
            Ok((id, drivers))
        })
        .collect()
}
