//! Canonical event records and the line-delimited ingest format.
//!
//! Each source is a comma-separated text file with a fixed one-line header.
//! Fields never contain commas; sets are `;`-joined tokens and dates are
//! ISO-8601. See [`SourceKind::header`] for the exact field order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Read;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calendar::{Day, DayRange, StudyCalendar};
use crate::error::{Error, Result};

/// Pseudo-anonymized patient identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PatientId(String);

impl PatientId {
    pub fn new(id: impl Into<String>) -> Option<Self> {
        let id = id.into();
        let trimmed = id.trim();
        (!trimmed.is_empty()).then(|| PatientId(trimmed.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for PatientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Case-folds and trims free-text names (drugs, organisms, specimen sources).
pub fn normalize_name(raw: &str) -> String {
    raw.trim().to_lowercase()
}

/// Upper-cases a diagnosis or procedure code and inserts the dot after the
/// three-character category when it was omitted (`n390` -> `N39.0`).
pub fn normalize_code(raw: &str) -> String {
    let code = raw.trim().to_uppercase();
    if code.len() > 3 && !code.contains('.') && code.is_ascii() {
        format!("{}.{}", &code[..3], &code[3..])
    } else {
        code
    }
}

macro_rules! token_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $token:literal $(| $alias:literal)*),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn token(self) -> &'static str {
                match self { $($name::$variant => $token),+ }
            }

            pub fn parse(raw: &str) -> Option<Self> {
                let t = raw.trim().to_lowercase();
                match t.as_str() {
                    $($token $(| $alias)* => Some($name::$variant),)+
                    _ => None,
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.token())
            }
        }
    };
}

token_enum!(DrugClass {
    Antibiotic => "antibiotic",
    Steroid => "steroid",
    Hormone => "hormone",
    CatheterSupply => "catheter-supply" | "catheter",
});

token_enum!(Route {
    Oral => "oral",
    Topical => "topical",
    Other => "other",
});

token_enum!(CultureResult {
    NoSignificantGrowth => "no-significant-growth",
    NoGrowth => "no-growth",
    MixedGrowth => "mixed-growth",
    Invalid => "invalid",
    OtherNonAst => "other",
    ReferToAst => "refer-to-ast",
});

impl CultureResult {
    /// Whether an organism may be reported alongside this result.
    pub fn implies_growth(self) -> bool {
        matches!(self, CultureResult::MixedGrowth | CultureResult::OtherNonAst | CultureResult::ReferToAst)
    }
}

token_enum!(Susceptibility {
    Susceptible => "susceptible" | "s",
    Intermediate => "intermediate" | "i",
    Resistant => "resistant" | "r",
});

token_enum!(Sex {
    Male => "male" | "m",
    Female => "female" | "f",
    Unknown => "unknown" | "u" | "unspecified",
});

token_enum!(LivingFlag {
    Housebound => "housebound",
    NursingOrCareHome => "nursing-or-care-home",
    Homeless => "homeless",
});

token_enum!(Comorbidity {
    IncontinentUrinary => "incontinent-urinary",
    Dementia => "dementia",
    CovidHighRisk => "covid-high-risk",
    CovidIncreasedRisk => "covid-increased-risk",
    OrganTransplant => "organ-transplant",
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispensationEvent {
    pub patient: PatientId,
    pub day: Day,
    pub drug: String,
    pub dosage_mg: f64,
    pub quantity: u32,
    pub class: DrugClass,
    pub route: Route,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UrineCultureEvent {
    pub patient: PatientId,
    pub day: Day,
    pub result: CultureResult,
    pub organism: Option<String>,
    /// Raw (case-folded) specimen source; standardized by `normalize`.
    pub specimen_source: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AstResultEvent {
    pub patient: PatientId,
    pub day: Day,
    pub organism: String,
    pub antibiotic: String,
    pub susceptibility: Susceptibility,
    pub specimen_source: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdmissionEvent {
    pub patient: PatientId,
    pub entry: Day,
    pub discharge: Day,
    pub icd10: BTreeSet<String>,
    pub opcs: BTreeSet<String>,
}

impl AdmissionEvent {
    pub fn stay(&self) -> DayRange {
        DayRange::new(self.entry, self.discharge)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemographicSnapshot {
    pub patient: PatientId,
    pub month: u32,
    pub age: u32,
    pub sex: Sex,
    pub death_date: Option<NaiveDate>,
    pub living: BTreeSet<LivingFlag>,
    pub comorbidities: BTreeSet<Comorbidity>,
    pub lsoa: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RawEvent {
    Dispensation(DispensationEvent),
    UrineCulture(UrineCultureEvent),
    AstResult(AstResultEvent),
    Admission(AdmissionEvent),
    Demographic(DemographicSnapshot),
}

impl RawEvent {
    pub fn patient(&self) -> &PatientId {
        match self {
            RawEvent::Dispensation(e) => &e.patient,
            RawEvent::UrineCulture(e) => &e.patient,
            RawEvent::AstResult(e) => &e.patient,
            RawEvent::Admission(e) => &e.patient,
            RawEvent::Demographic(e) => &e.patient,
        }
    }

    pub fn kind(&self) -> SourceKind {
        match self {
            RawEvent::Dispensation(_) => SourceKind::Dispensations,
            RawEvent::UrineCulture(_) => SourceKind::UrineCultures,
            RawEvent::AstResult(_) => SourceKind::AstResults,
            RawEvent::Admission(_) => SourceKind::Admissions,
            RawEvent::Demographic(_) => SourceKind::Demographics,
        }
    }

    /// First day the event touches (admission entry, month start for snapshots).
    pub fn first_day(&self, calendar: &StudyCalendar) -> Day {
        match self {
            RawEvent::Dispensation(e) => e.day,
            RawEvent::UrineCulture(e) => e.day,
            RawEvent::AstResult(e) => e.day,
            RawEvent::Admission(e) => e.entry,
            RawEvent::Demographic(e) => calendar.month_days(e.month).map(|r| r.first).unwrap_or(0),
        }
    }

    /// Encodes the event as one line of its source file (no trailing newline).
    pub fn to_line(&self, calendar: &StudyCalendar) -> String {
        let date = |d: Day| calendar.date(d).to_string();
        match self {
            RawEvent::Dispensation(e) => format!(
                "{},{},{},{},{},{},{}",
                e.patient,
                date(e.day),
                e.drug,
                e.dosage_mg,
                e.quantity,
                e.class,
                e.route
            ),
            RawEvent::UrineCulture(e) => format!(
                "{},{},{},{},{}",
                e.patient,
                date(e.day),
                e.result,
                e.organism.as_deref().unwrap_or(""),
                e.specimen_source
            ),
            RawEvent::AstResult(e) => format!(
                "{},{},{},{},{},{}",
                e.patient,
                date(e.day),
                e.organism,
                e.antibiotic,
                e.susceptibility,
                e.specimen_source
            ),
            RawEvent::Admission(e) => format!(
                "{},{},{},{},{}",
                e.patient,
                date(e.entry),
                date(e.discharge),
                join_set(e.icd10.iter().map(String::as_str)),
                join_set(e.opcs.iter().map(String::as_str)),
            ),
            RawEvent::Demographic(e) => {
                let month_start = calendar.date(calendar.month_days(e.month).unwrap().first);
                format!(
                    "{},{},{},{},{},{},{},{}",
                    e.patient,
                    month_start.format("%Y-%m"),
                    e.age,
                    e.sex,
                    e.death_date.map(|d| d.to_string()).unwrap_or_default(),
                    join_set(e.living.iter().map(|f| f.token())),
                    join_set(e.comorbidities.iter().map(|f| f.token())),
                    e.lsoa
                )
            }
        }
    }
}

fn join_set<'a>(items: impl Iterator<Item = &'a str>) -> String {
    items.collect::<Vec<_>>().join(";")
}

/// One ingest source file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SourceKind {
    Dispensations,
    UrineCultures,
    AstResults,
    Admissions,
    Demographics,
}

impl SourceKind {
    pub const ALL: [SourceKind; 5] = [
        SourceKind::Dispensations,
        SourceKind::UrineCultures,
        SourceKind::AstResults,
        SourceKind::Admissions,
        SourceKind::Demographics,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            SourceKind::Dispensations => "dispensations.csv",
            SourceKind::UrineCultures => "urine_cultures.csv",
            SourceKind::AstResults => "ast_results.csv",
            SourceKind::Admissions => "admissions.csv",
            SourceKind::Demographics => "demographics.csv",
        }
    }

    pub fn header(self) -> &'static str {
        match self {
            SourceKind::Dispensations => "patient_id,date,drug_name,dosage_mg,quantity,drug_class,route",
            SourceKind::UrineCultures => "patient_id,date,result,organism,specimen_source",
            SourceKind::AstResults => "patient_id,date,organism,antibiotic,susceptibility,specimen_source",
            SourceKind::Admissions => "patient_id,entry_date,discharge_date,icd10_codes,opcs_codes",
            SourceKind::Demographics => "patient_id,month,age,sex,death_date,living_flags,comorbidity_flags,lsoa",
        }
    }

    fn field_count(self) -> usize {
        self.header().split(',').count()
    }
}

/// A rejected input line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseIssue {
    pub line: usize,
    pub source: SourceKind,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    /// Data lines seen (header excluded).
    pub lines: usize,
    pub parsed: usize,
    pub errors: Vec<ParseIssue>,
    /// Point events dated outside the calendar (also present in `errors`).
    pub out_of_range: usize,
    /// Admissions partially outside the calendar, kept after clipping.
    pub clipped: usize,
}

impl ParseReport {
    pub fn merge(&mut self, other: ParseReport) {
        self.lines += other.lines;
        self.parsed += other.parsed;
        self.errors.extend(other.errors);
        self.out_of_range += other.out_of_range;
        self.clipped += other.clipped;
    }

    /// Line-delimited error report: `line<TAB>source<TAB>reason`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("line\tsource\treason\n");
        for e in &self.errors {
            out.push_str(&format!("{}\t{}\t{}\n", e.line, e.source.file_name(), e.reason));
        }
        out
    }
}

enum LineOutcome {
    Event(RawEvent, bool),
    Rejected(String, bool),
}

/// Parses one source stream. Each data line yields exactly one event or one
/// entry in the report's error list.
pub fn parse_events<R: Read>(
    kind: SourceKind,
    mut input: R,
    calendar: &StudyCalendar,
) -> Result<(Vec<RawEvent>, ParseReport)> {
    let mut buf = Vec::new();
    input
        .read_to_end(&mut buf)
        .map_err(|e| Error::UnreadableStream { source_name: kind.file_name().into(), reason: e.to_string() })?;
    let text = String::from_utf8(buf).map_err(|e| Error::UnreadableStream {
        source_name: kind.file_name().into(),
        reason: format!("invalid UTF-8: {e}"),
    })?;
    parse_text(kind, &text, calendar)
}

pub fn parse_text(kind: SourceKind, text: &str, calendar: &StudyCalendar) -> Result<(Vec<RawEvent>, ParseReport)> {
    let mut lines: Vec<&str> = text.split('\n').collect();
    if lines.last() == Some(&"") {
        lines.pop();
    }
    let mut report = ParseReport::default();
    let Some((header, body)) = lines.split_first() else {
        return Ok((Vec::new(), report));
    };
    if header.trim_end_matches('\r').trim() != kind.header() {
        return Err(Error::UnreadableStream {
            source_name: kind.file_name().into(),
            reason: format!("expected header `{}`", kind.header()),
        });
    }

    let outcomes: Vec<LineOutcome> =
        body.par_iter().map(|line| parse_line(kind, line.trim_end_matches('\r'), calendar)).collect();

    let mut events = Vec::with_capacity(outcomes.len());
    for (i, outcome) in outcomes.into_iter().enumerate() {
        report.lines += 1;
        match outcome {
            LineOutcome::Event(ev, clipped) => {
                report.parsed += 1;
                report.clipped += usize::from(clipped);
                events.push(ev);
            }
            LineOutcome::Rejected(reason, out_of_range) => {
                report.out_of_range += usize::from(out_of_range);
                report.errors.push(ParseIssue { line: i + 2, source: kind, reason });
            }
        }
    }
    Ok((events, report))
}

/// Events grouped per patient, each group in input order.
pub fn group_by_patient(events: &[RawEvent]) -> BTreeMap<PatientId, Vec<RawEvent>> {
    let mut out: BTreeMap<PatientId, Vec<RawEvent>> = BTreeMap::new();
    for e in events {
        out.entry(e.patient().clone()).or_default().push(e.clone());
    }
    out
}

/// Sorts events into the canonical order `(patient, day, kind)`; the sort is
/// stable so events of one kind keep their input line order.
pub fn sort_events(events: &mut [RawEvent], calendar: &StudyCalendar) {
    events.sort_by(|a, b| {
        (a.patient(), a.first_day(calendar), a.kind()).cmp(&(b.patient(), b.first_day(calendar), b.kind()))
    });
}

fn parse_line(kind: SourceKind, line: &str, calendar: &StudyCalendar) -> LineOutcome {
    match parse_fields(kind, line, calendar) {
        Ok(outcome) => outcome,
        Err(reason) => LineOutcome::Rejected(reason, false),
    }
}

fn parse_fields(kind: SourceKind, line: &str, calendar: &StudyCalendar) -> std::result::Result<LineOutcome, String> {
    if line.trim().is_empty() {
        return Err("empty line".into());
    }
    let f: Vec<&str> = line.split(',').map(str::trim).collect();
    if f.len() != kind.field_count() {
        return Err(format!("expected {} fields, found {}", kind.field_count(), f.len()));
    }
    let patient = PatientId::new(f[0]).ok_or("empty patient_id")?;

    let point_day = |raw: &str| -> std::result::Result<std::result::Result<Day, String>, String> {
        let date = parse_date(raw)?;
        Ok(calendar.day_index(date).ok_or_else(|| format!("date {date} outside study calendar")))
    };

    let event = match kind {
        SourceKind::Dispensations => {
            let day = match point_day(f[1])? {
                Ok(d) => d,
                Err(r) => return Ok(LineOutcome::Rejected(r, true)),
            };
            let drug = normalize_name(f[2]);
            if drug.is_empty() {
                return Err("empty drug_name".into());
            }
            let dosage_mg: f64 = f[3].parse().map_err(|_| format!("invalid dosage_mg `{}`", f[3]))?;
            if !dosage_mg.is_finite() || dosage_mg < 0.0 {
                return Err(format!("dosage_mg must be >= 0, got `{}`", f[3]));
            }
            let quantity: u32 = f[4].parse().map_err(|_| format!("invalid quantity `{}`", f[4]))?;
            if quantity == 0 {
                return Err("quantity must be > 0".into());
            }
            let class = DrugClass::parse(f[5]).ok_or_else(|| format!("unknown drug_class `{}`", f[5]))?;
            let route = Route::parse(f[6]).ok_or_else(|| format!("unknown route `{}`", f[6]))?;
            RawEvent::Dispensation(DispensationEvent { patient, day, drug, dosage_mg, quantity, class, route })
        }
        SourceKind::UrineCultures => {
            let day = match point_day(f[1])? {
                Ok(d) => d,
                Err(r) => return Ok(LineOutcome::Rejected(r, true)),
            };
            let result = CultureResult::parse(f[2]).ok_or_else(|| format!("unknown result `{}`", f[2]))?;
            let organism = (!f[3].is_empty()).then(|| normalize_name(f[3]));
            if organism.is_some() && !result.implies_growth() {
                return Err(format!("organism reported with result `{result}`"));
            }
            RawEvent::UrineCulture(UrineCultureEvent {
                patient,
                day,
                result,
                organism,
                specimen_source: normalize_name(f[4]),
            })
        }
        SourceKind::AstResults => {
            let day = match point_day(f[1])? {
                Ok(d) => d,
                Err(r) => return Ok(LineOutcome::Rejected(r, true)),
            };
            let organism = normalize_name(f[2]);
            let antibiotic = normalize_name(f[3]);
            if organism.is_empty() || antibiotic.is_empty() {
                return Err("AST row needs organism and antibiotic".into());
            }
            let susceptibility =
                Susceptibility::parse(f[4]).ok_or_else(|| format!("unknown susceptibility `{}`", f[4]))?;
            RawEvent::AstResult(AstResultEvent {
                patient,
                day,
                organism,
                antibiotic,
                susceptibility,
                specimen_source: normalize_name(f[5]),
            })
        }
        SourceKind::Admissions => {
            let entry = calendar.offset(parse_date(f[1])?);
            let discharge = calendar.offset(parse_date(f[2])?);
            if discharge < entry {
                return Err("discharge_date precedes entry_date".into());
            }
            let Some(stay) = DayRange::clipped(entry, discharge, calendar) else {
                return Ok(LineOutcome::Rejected("admission entirely outside study calendar".into(), true));
            };
            let clipped = i64::from(stay.first) != entry || i64::from(stay.last) != discharge;
            let ev = RawEvent::Admission(AdmissionEvent {
                patient,
                entry: stay.first,
                discharge: stay.last,
                icd10: split_set(f[3]).map(normalize_code).collect(),
                opcs: split_set(f[4]).map(normalize_code).collect(),
            });
            return Ok(LineOutcome::Event(ev, clipped));
        }
        SourceKind::Demographics => {
            let (year, month) = parse_month(f[1])?;
            let Some(month) = calendar.month_index(year, month) else {
                return Ok(LineOutcome::Rejected(format!("month {} outside study calendar", f[1]), true));
            };
            let age: u32 = f[2].parse().map_err(|_| format!("invalid age `{}`", f[2]))?;
            let sex = Sex::parse(f[3]).ok_or_else(|| format!("unknown sex `{}`", f[3]))?;
            let death_date = if f[4].is_empty() { None } else { Some(parse_date(f[4])?) };
            let living = split_set(f[5])
                .map(|t| LivingFlag::parse(t).ok_or_else(|| format!("unknown living flag `{t}`")))
                .collect::<std::result::Result<_, _>>()?;
            let comorbidities = split_set(f[6])
                .map(|t| Comorbidity::parse(t).ok_or_else(|| format!("unknown comorbidity `{t}`")))
                .collect::<std::result::Result<_, _>>()?;
            RawEvent::Demographic(DemographicSnapshot {
                patient,
                month,
                age,
                sex,
                death_date,
                living,
                comorbidities,
                lsoa: f[7].to_string(),
            })
        }
    };
    Ok(LineOutcome::Event(event, false))
}

fn split_set(raw: &str) -> impl Iterator<Item = &str> {
    raw.split(';').map(str::trim).filter(|t| !t.is_empty())
}

fn parse_date(raw: &str) -> std::result::Result<NaiveDate, String> {
    NaiveDate::parse_from_str(raw, "%Y-%m-%d").map_err(|_| format!("invalid date `{raw}`"))
}

fn parse_month(raw: &str) -> std::result::Result<(i32, u32), String> {
    let bad = || format!("invalid month `{raw}` (expected YYYY-MM)");
    let (y, m) = raw.split_once('-').ok_or_else(bad)?;
    let y: i32 = y.parse().map_err(|_| bad())?;
    let m: u32 = m.parse().map_err(|_| bad())?;
    if !(1..=12).contains(&m) {
        return Err(bad());
    }
    Ok((y, m))
}
