//! Day-level UTI likelihood: temporal extensions, table lookup, episodes.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::calendar::{Day, DayRange, StudyCalendar};
use crate::error::{Error, Result};
use crate::events::{AdmissionEvent, DrugClass, PatientId, RawEvent};
use crate::normalize::{
    classify_antibiotic, classify_ast_organism, classify_culture, infer_duration_days, AntibioticCategory,
    BacteriaAssociation, MappingTables,
};
use crate::tensor::{build_tensor, columns, SparseDayTensor};

/// Days before a dispensation that inherit its antibiotic category.
pub const PRE_DISPENSATION_DAYS: i64 = 3;
/// Days either side of a specimen that inherit its association level.
pub const SPECIMEN_HALF_WINDOW: i64 = 7;
pub const N39_CODE: &str = "N39.0";

/// Discrete likelihood stored in tenths: 0, 2, 4, 6, 8 or 10.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Likelihood(u8);

impl Likelihood {
    pub const ZERO: Likelihood = Likelihood(0);
    pub const CERTAIN: Likelihood = Likelihood(10);
    pub const ALL: [Likelihood; 6] =
        [Likelihood(0), Likelihood(2), Likelihood(4), Likelihood(6), Likelihood(8), Likelihood(10)];

    pub fn from_tenths(tenths: u8) -> Option<Self> {
        (tenths <= 10 && tenths.is_multiple_of(2)).then_some(Likelihood(tenths))
    }

    /// Accepts only values within 1e-9 of a multiple of 0.2 in [0, 1].
    pub fn from_f64(value: f64) -> Option<Self> {
        let tenths = (value * 10.0).round();
        if (value * 10.0 - tenths).abs() > 1e-6 || !(0.0..=10.0).contains(&tenths) {
            return None;
        }
        Self::from_tenths(tenths as u8)
    }

    pub fn tenths(self) -> u8 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.0) / 10.0
    }

    pub fn is_positive(self) -> bool {
        self.0 > 0
    }
}

impl fmt::Display for Likelihood {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.0 / 10, self.0 % 10)
    }
}

impl std::str::FromStr for Likelihood {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let v: f64 = s.trim().parse().map_err(|_| format!("invalid likelihood `{s}`"))?;
        Likelihood::from_f64(v).ok_or_else(|| format!("likelihood `{s}` is not one of 0,0.2,...,1"))
    }
}

impl Serialize for Likelihood {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_f64())
    }
}

impl<'de> Deserialize<'de> for Likelihood {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        Likelihood::from_f64(v).ok_or_else(|| serde::de::Error::custom(format!("bad likelihood {v}")))
    }
}

/// (antibiotic level, association level) -> likelihood, with the N39.0
/// override pinned at 1.0. Rows are antibiotic levels, columns association levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LikelihoodTable {
    cells: [[Likelihood; 4]; 4],
}

impl Default for LikelihoodTable {
    /// max level 0 -> 0, 1 -> 0.2, 2 -> 0.4; max 3 -> 0.6, or 0.8 when the
    /// other source is also at least level 2.
    fn default() -> Self {
        let mut cells = [[Likelihood::ZERO; 4]; 4];
        for (a, row) in cells.iter_mut().enumerate() {
            for (u, cell) in row.iter_mut().enumerate() {
                let (hi, lo) = (a.max(u), a.min(u));
                *cell = match hi {
                    0 => Likelihood(0),
                    1 => Likelihood(2),
                    2 => Likelihood(4),
                    _ if lo >= 2 => Likelihood(8),
                    _ => Likelihood(6),
                };
            }
        }
        LikelihoodTable { cells }
    }
}

impl LikelihoodTable {
    pub fn new(cells: [[Likelihood; 4]; 4]) -> Result<Self> {
        let t = LikelihoodTable { cells };
        t.validate()?;
        Ok(t)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() != 4 || rows.iter().any(|r| r.len() != 4) {
            return Err(Error::LikelihoodTable("expected 4 rows of 4 values".into()));
        }
        let mut cells = [[Likelihood::ZERO; 4]; 4];
        for (a, row) in rows.iter().enumerate() {
            for (u, v) in row.iter().enumerate() {
                cells[a][u] = Likelihood::from_f64(*v)
                    .ok_or_else(|| Error::LikelihoodTable(format!("cell ({a},{u}) = {v} is not a multiple of 0.2")))?;
            }
        }
        Self::new(cells)
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.cells.iter().map(|r| r.iter().map(|l| l.as_f64()).collect()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells[0][0] != Likelihood::ZERO {
            return Err(Error::LikelihoodTable("L(0,0) must be 0".into()));
        }
        for a in 0..4 {
            for u in 0..4 {
                let v = self.cells[a][u];
                if v > Likelihood(8) {
                    return Err(Error::LikelihoodTable(format!("cell ({a},{u}) = {v}; 1.0 is reserved for N39.0")));
                }
                if a > 0 && self.cells[a - 1][u] > v {
                    return Err(Error::LikelihoodTable(format!("not monotone in antibiotic level at ({a},{u})")));
                }
                if u > 0 && self.cells[a][u - 1] > v {
                    return Err(Error::LikelihoodTable(format!("not monotone in association level at ({a},{u})")));
                }
            }
        }
        Ok(())
    }

    pub fn lookup(&self, a: AntibioticCategory, u: BacteriaAssociation, n39: bool) -> Likelihood {
        if n39 {
            Likelihood::CERTAIN
        } else {
            self.cells[usize::from(a.level())][usize::from(u.level())]
        }
    }
}

impl Serialize for LikelihoodTable {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for LikelihoodTable {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        LikelihoodTable::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DayRisk {
    pub day: Day,
    pub antibiotic: AntibioticCategory,
    pub association: BacteriaAssociation,
    pub n39: bool,
    pub likelihood: Likelihood,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LikelihoodEpisode {
    pub patient: PatientId,
    pub start: Day,
    pub end: Day,
    pub peak: Likelihood,
}

/// Days carrying a dispensation's category: `[day - 3, day + duration - 1]`, clipped.
pub fn extend_dispensation(day: Day, duration: u32, calendar: &StudyCalendar) -> Option<DayRange> {
    assert!(duration >= 1, "duration must be at least one day");
    let d = i64::from(day);
    DayRange::clipped(d - PRE_DISPENSATION_DAYS, d + i64::from(duration) - 1, calendar)
}

/// Days carrying a specimen's association: `[day - 7, day + 7]`, clipped.
pub fn extend_specimen(day: Day, calendar: &StudyCalendar) -> Option<DayRange> {
    let d = i64::from(day);
    DayRange::clipped(d - SPECIMEN_HALF_WINDOW, d + SPECIMEN_HALF_WINDOW, calendar)
}

/// The stay itself when it carries N39.0; admissions are never extended.
pub fn admission_n390_days(event: &AdmissionEvent) -> Option<DayRange> {
    event.icd10.contains(N39_CODE).then(|| event.stay())
}

/// Writes the extended antibiotic and association columns for `events` into
/// the tensor. N39.0 days come from the tensor's `icd10:N39.0` column.
pub fn apply_extensions(tensor: &mut SparseDayTensor, events: &[RawEvent], tables: &MappingTables) {
    let calendar = *tensor.calendar();
    let abx = columns::extended_antibiotic();
    let assoc = columns::extended_association();
    for ev in events {
        let (column, range, level) = match ev {
            RawEvent::Dispensation(d) if d.class == DrugClass::Antibiotic => {
                let cat = classify_antibiotic(&d.drug, tables);
                let duration = infer_duration_days(d, tables);
                (&abx, extend_dispensation(d.day, duration, &calendar), cat.level())
            }
            RawEvent::UrineCulture(c) => {
                (&assoc, extend_specimen(c.day, &calendar), classify_culture(c, tables).level())
            }
            RawEvent::AstResult(a) => {
                (&assoc, extend_specimen(a.day, &calendar), classify_ast_organism(&a.organism, tables).level())
            }
            _ => continue,
        };
        if let Some(r) = range {
            tensor.write_span(ev.patient(), column, i64::from(r.first), i64::from(r.last), u16::from(level));
        }
    }
}

/// The tensor the framework scores: raw columns plus both extensions.
pub fn scoring_tensor(events: &[RawEvent], tables: &MappingTables, calendar: &StudyCalendar) -> SparseDayTensor {
    let mut tensor = build_tensor(events, tables, calendar);
    apply_extensions(&mut tensor, events, tables);
    tensor
}

/// Scores aligned per-day streams. Overlapping evidence was already combined
/// by max when the extensions were written.
pub fn score_days(
    antibiotic: &[AntibioticCategory],
    association: &[BacteriaAssociation],
    n39: &[bool],
    table: &LikelihoodTable,
) -> Vec<DayRisk> {
    assert!(antibiotic.len() == association.len() && association.len() == n39.len());
    (0..antibiotic.len())
        .map(|i| DayRisk {
            day: i as Day,
            antibiotic: antibiotic[i],
            association: association[i],
            n39: n39[i],
            likelihood: table.lookup(antibiotic[i], association[i], n39[i]),
        })
        .collect()
}

/// Reads the three evidence streams for one patient out of an extended tensor.
pub fn score_patient(tensor: &SparseDayTensor, patient: &PatientId, table: &LikelihoodTable) -> Vec<DayRisk> {
    let n = tensor.calendar().total_days() as usize;
    let mut a = vec![AntibioticCategory::None; n];
    let mut u = vec![BacteriaAssociation::None; n];
    let mut flag = vec![false; n];
    if let Some(grid) = tensor.patient(patient) {
        let fill = |id: &crate::tensor::FeatureId, f: &mut dyn FnMut(usize, u16)| {
            if let Some(runs) = tensor.column_id(id).and_then(|c| grid.column(c)) {
                for r in runs.runs() {
                    for d in r.first..=r.last {
                        f(d as usize, r.value);
                    }
                }
            }
        };
        fill(&columns::extended_antibiotic(), &mut |d, v| {
            a[d] = AntibioticCategory::from_level(v.min(3) as u8).unwrap_or_default()
        });
        fill(&columns::extended_association(), &mut |d, v| {
            u[d] = BacteriaAssociation::from_level(v.min(3) as u8).unwrap_or_default()
        });
        fill(&columns::n39(), &mut |d, _| flag[d] = true);
    }
    score_days(&a, &u, &flag, table)
}

/// Maximal runs of positive likelihood; the peak is the run's max.
pub fn extract_episodes(patient: &PatientId, days: &[DayRisk]) -> Vec<LikelihoodEpisode> {
    let mut out: Vec<LikelihoodEpisode> = Vec::new();
    let mut open: Option<LikelihoodEpisode> = None;
    for d in days {
        match (&mut open, d.likelihood.is_positive()) {
            (Some(ep), true) if ep.end + 1 == d.day => {
                ep.end = d.day;
                ep.peak = ep.peak.max(d.likelihood);
            }
            (_, true) => {
                if let Some(ep) = open.take() {
                    out.push(ep);
                }
                open =
                    Some(LikelihoodEpisode { patient: patient.clone(), start: d.day, end: d.day, peak: d.likelihood });
            }
            (_, false) => {
                if let Some(ep) = open.take() {
                    out.push(ep);
                }
            }
        }
    }
    out.extend(open);
    out
}

/// Episodes for every patient in an already-extended tensor.
pub fn score_all(tensor: &SparseDayTensor, table: &LikelihoodTable) -> BTreeMap<PatientId, Vec<LikelihoodEpisode>> {
    let patients: Vec<&PatientId> = tensor.patients().map(|(p, _)| p).collect();
    patients
        .par_iter()
        .map(|p| {
            let days = score_patient(tensor, p, table);
            ((*p).clone(), extract_episodes(p, &days))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

/// Episodes file: `patient_id,start_date,end_date,start_day,end_day,peak`.
pub fn episodes_to_csv(episodes: &BTreeMap<PatientId, Vec<LikelihoodEpisode>>, calendar: &StudyCalendar) -> String {
    let mut out = String::from("patient_id,start_date,end_date,start_day,end_day,peak\n");
    for eps in episodes.values() {
        for e in eps {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.patient,
                calendar.date(e.start),
                calendar.date(e.end),
                e.start,
                e.end,
                e.peak
            ));
        }
    }
    out
}

pub fn episodes_from_csv(text: &str) -> Result<Vec<LikelihoodEpisode>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = |reason: String| Error::CohortFormat { line: i + 1, reason };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(format!("expected 6 fields, got {}", f.len())));
        }
        out.push(LikelihoodEpisode {
            patient: PatientId::new(f[0]).ok_or_else(|| bad("empty patient".into()))?,
            start: f[3].parse().map_err(|_| bad("bad start_day".into()))?,
            end: f[4].parse().map_err(|_| bad("bad end_day".into()))?,
            peak: f[5].parse().map_err(bad)?,
        });
    }
    Ok(out)
}
