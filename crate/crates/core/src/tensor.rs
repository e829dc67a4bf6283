//! Day-level sparse patient x feature x day structure.
//!
//! Each (patient, column) holds a sorted list of non-overlapping day runs, so
//! monthly demographics broadcast to every day cost one run, not thirty.
//! Every write combines with existing cells by `max`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calendar::{Day, DayRange, StudyCalendar};
use crate::events::{DrugClass, PatientId, RawEvent};
use crate::normalize::{
    classify_antibiotic, classify_ast_organism, classify_culture, merge_susceptibility, standardize_specimen,
    BacteriaAssociation, MappingTables,
};

pub type ColumnId = u32;
pub type CellValue = u16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Namespace {
    Icd10,
    Opcs,
    AntibioticCategory,
    Drug,
    Culture,
    AstPair,
    Demographic,
    Living,
    Comorbidity,
    Catheter,
    Admission,
}

impl Namespace {
    pub const ALL: [Namespace; 11] = [
        Namespace::Icd10,
        Namespace::Opcs,
        Namespace::AntibioticCategory,
        Namespace::Drug,
        Namespace::Culture,
        Namespace::AstPair,
        Namespace::Demographic,
        Namespace::Living,
        Namespace::Comorbidity,
        Namespace::Catheter,
        Namespace::Admission,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Namespace::Icd10 => "icd10",
            Namespace::Opcs => "opcs",
            Namespace::AntibioticCategory => "antibiotic-category",
            Namespace::Drug => "drug",
            Namespace::Culture => "culture",
            Namespace::AstPair => "ast-pair",
            Namespace::Demographic => "demographic",
            Namespace::Living => "living",
            Namespace::Comorbidity => "comorbidity",
            Namespace::Catheter => "catheter",
            Namespace::Admission => "admission",
        }
    }

    pub fn parse(token: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|n| n.token() == token)
    }
}

/// A tensor column: `(namespace, key)`, written `namespace:key`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FeatureId {
    pub namespace: Namespace,
    pub key: String,
}

impl FeatureId {
    pub fn new(namespace: Namespace, key: impl Into<String>) -> Self {
        FeatureId { namespace, key: key.into() }
    }

    pub fn parse(text: &str) -> Option<Self> {
        let (ns, key) = text.split_once(':')?;
        Some(FeatureId::new(Namespace::parse(ns)?, key))
    }
}

impl fmt::Display for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.namespace.token(), self.key)
    }
}

/// Well-known columns shared by the risk framework and the cohort builder.
pub mod columns {
    use super::{FeatureId, Namespace};

    pub fn n39() -> FeatureId {
        FeatureId::new(Namespace::Icd10, "N39.0")
    }
    pub fn extended_antibiotic() -> FeatureId {
        FeatureId::new(Namespace::AntibioticCategory, "extended")
    }
    pub fn extended_association() -> FeatureId {
        FeatureId::new(Namespace::Culture, "extended-association")
    }
    pub fn snapshot() -> FeatureId {
        FeatureId::new(Namespace::Demographic, "snapshot")
    }
    pub fn age() -> FeatureId {
        FeatureId::new(Namespace::Demographic, "age")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Run {
    pub first: Day,
    pub last: Day,
    pub value: CellValue,
}

impl Run {
    fn len(&self) -> u32 {
        self.last - self.first + 1
    }
}

/// Canonical run-length column: sorted, disjoint, non-zero, and adjacent runs
/// never share a value.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ColumnRuns {
    runs: Vec<Run>,
}

impl ColumnRuns {
    pub fn runs(&self) -> &[Run] {
        &self.runs
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    /// Max-combines `value` into every day of `range`.
    pub fn write(&mut self, range: DayRange, value: CellValue) {
        if value == 0 {
            return;
        }
        let (a, b) = (range.first, range.last);
        // Untouched prefix and suffix; only runs overlapping [a, b] are rebuilt.
        let start = self.runs.partition_point(|r| r.last < a);
        let end = self.runs.partition_point(|r| r.first <= b);
        let mut mid = Vec::with_capacity(end - start + 2);
        let mut cursor = a;
        for r in &self.runs[start..end] {
            if r.first < a {
                mid.push(Run { first: r.first, last: a - 1, value: r.value });
            }
            let lo = r.first.max(a);
            let hi = r.last.min(b);
            if cursor < lo {
                mid.push(Run { first: cursor, last: lo - 1, value });
            }
            mid.push(Run { first: lo, last: hi, value: value.max(r.value) });
            cursor = hi + 1;
            if r.last > b {
                mid.push(Run { first: b + 1, last: r.last, value: r.value });
            }
        }
        if cursor <= b {
            mid.push(Run { first: cursor, last: b, value });
        }
        self.runs.splice(start..end, mid);
        self.coalesce(start.saturating_sub(1));
    }

    fn coalesce(&mut self, from: usize) {
        let mut out: Vec<Run> = self.runs.drain(from..).collect::<Vec<_>>();
        let mut merged: Vec<Run> = Vec::with_capacity(out.len());
        for r in out.drain(..) {
            match merged.last_mut() {
                Some(prev) if prev.last + 1 == r.first && prev.value == r.value => prev.last = r.last,
                _ => merged.push(r),
            }
        }
        self.runs.extend(merged);
    }

    pub fn value_at(&self, day: Day) -> CellValue {
        let i = self.runs.partition_point(|r| r.last < day);
        match self.runs.get(i) {
            Some(r) if r.first <= day => r.value,
            _ => 0,
        }
    }

    /// Number of non-zero cells.
    pub fn cells(&self) -> u64 {
        self.runs.iter().map(|r| u64::from(r.len())).sum()
    }

    pub fn aggregate(&self, window: Option<DayRange>) -> ColumnAggregate {
        let mut agg = ColumnAggregate::default();
        let Some(w) = window else { return agg };
        let start = self.runs.partition_point(|r| r.last < w.first);
        for r in &self.runs[start..] {
            if r.first > w.last {
                break;
            }
            let len = r.last.min(w.last) - r.first.max(w.first) + 1;
            agg.count += len;
            agg.sum += u64::from(len) * u64::from(r.value);
            agg.max = agg.max.max(r.value);
            agg.last = r.value;
            agg.last_day = Some(r.last.min(w.last));
        }
        agg
    }
}

/// Per-column summary over a window of days.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ColumnAggregate {
    /// Days with a non-zero cell.
    pub count: u32,
    pub sum: u64,
    pub max: CellValue,
    /// Value on the latest non-zero day.
    pub last: CellValue,
    pub last_day: Option<Day>,
}

impl ColumnAggregate {
    pub fn any(&self) -> bool {
        self.count > 0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PatientGrid {
    columns: BTreeMap<ColumnId, ColumnRuns>,
}

impl PatientGrid {
    pub fn column(&self, col: ColumnId) -> Option<&ColumnRuns> {
        self.columns.get(&col)
    }

    pub fn columns(&self) -> impl Iterator<Item = (ColumnId, &ColumnRuns)> {
        self.columns.iter().map(|(c, r)| (*c, r))
    }

    fn write(&mut self, col: ColumnId, range: DayRange, value: CellValue) {
        if value == 0 {
            return;
        }
        self.columns.entry(col).or_default().write(range, value);
    }

    pub fn cells(&self) -> u64 {
        self.columns.values().map(ColumnRuns::cells).sum()
    }
}

/// Aggregates over a half-open lookback window `[end - length, end)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowSlice {
    /// False when the window reaches before the calendar start.
    pub eligible: bool,
    pub window: Option<DayRange>,
    pub columns: BTreeMap<ColumnId, ColumnAggregate>,
}

#[derive(Debug, Clone)]
pub struct SparseDayTensor {
    calendar: StudyCalendar,
    dictionary: Vec<FeatureId>,
    index: HashMap<FeatureId, ColumnId>,
    patients: BTreeMap<PatientId, PatientGrid>,
}

impl PartialEq for SparseDayTensor {
    fn eq(&self, other: &Self) -> bool {
        self.calendar == other.calendar && self.dictionary == other.dictionary && self.patients == other.patients
    }
}

impl SparseDayTensor {
    pub fn empty(calendar: StudyCalendar) -> Self {
        SparseDayTensor { calendar, dictionary: Vec::new(), index: HashMap::new(), patients: BTreeMap::new() }
    }

    pub fn calendar(&self) -> &StudyCalendar {
        &self.calendar
    }

    pub fn dictionary(&self) -> &[FeatureId] {
        &self.dictionary
    }

    pub fn column_id(&self, id: &FeatureId) -> Option<ColumnId> {
        self.index.get(id).copied()
    }

    pub fn feature(&self, col: ColumnId) -> &FeatureId {
        &self.dictionary[col as usize]
    }

    /// Columns matching a selector `namespace:key`, where a trailing `*` on the
    /// key matches any suffix.
    pub fn select(&self, selector: &str) -> Vec<ColumnId> {
        let Some((ns, pattern)) = selector.split_once(':') else {
            return Vec::new();
        };
        let Some(ns) = Namespace::parse(ns) else {
            return Vec::new();
        };
        let prefix = pattern.strip_suffix('*');
        self.dictionary
            .iter()
            .enumerate()
            .filter(|(_, f)| {
                f.namespace == ns
                    && match prefix {
                        Some(p) => f.key.starts_with(p),
                        None => f.key == pattern,
                    }
            })
            .map(|(i, _)| i as ColumnId)
            .collect()
    }

    /// Appends a column to the dictionary if absent.
    pub fn ensure_column(&mut self, id: &FeatureId) -> ColumnId {
        if let Some(c) = self.index.get(id) {
            return *c;
        }
        let c = self.dictionary.len() as ColumnId;
        self.dictionary.push(id.clone());
        self.index.insert(id.clone(), c);
        c
    }

    pub fn patients(&self) -> impl Iterator<Item = (&PatientId, &PatientGrid)> {
        self.patients.iter()
    }

    pub fn patient(&self, patient: &PatientId) -> Option<&PatientGrid> {
        self.patients.get(patient)
    }

    pub fn patient_count(&self) -> usize {
        self.patients.len()
    }

    pub fn cells(&self) -> u64 {
        self.patients.values().map(PatientGrid::cells).sum()
    }

    pub fn value_at(&self, patient: &PatientId, col: ColumnId, day: Day) -> CellValue {
        self.patients.get(patient).and_then(|g| g.column(col)).map_or(0, |c| c.value_at(day))
    }

    /// Max-combines `value` over the signed day range `[lo, hi]` after
    /// clipping to the calendar. Returns the written range, if any.
    pub fn write_span(
        &mut self,
        patient: &PatientId,
        column: &FeatureId,
        lo: i64,
        hi: i64,
        value: CellValue,
    ) -> Option<DayRange> {
        let range = DayRange::clipped(lo, hi, &self.calendar)?;
        if value == 0 {
            return None;
        }
        let col = self.ensure_column(column);
        self.patients.entry(patient.clone()).or_default().write(col, range, value);
        Some(range)
    }

    /// Clipped half-open window `[end - length, end)`.
    pub fn window(&self, end_exclusive: i64, length: u32) -> Option<DayRange> {
        DayRange::clipped(end_exclusive - i64::from(length), end_exclusive - 1, &self.calendar)
    }

    pub fn aggregate(&self, patient: &PatientId, col: ColumnId, end_exclusive: i64, length: u32) -> ColumnAggregate {
        let window = self.window(end_exclusive, length);
        self.patients
            .get(patient)
            .and_then(|g| g.column(col))
            .map_or_else(ColumnAggregate::default, |c| c.aggregate(window))
    }

    /// Per-column aggregates for every column the patient has.
    pub fn slice_window(&self, patient: &PatientId, end_exclusive: i64, length: u32) -> WindowSlice {
        assert!(length > 0, "window length must be positive");
        let window = self.window(end_exclusive, length);
        let eligible = end_exclusive - i64::from(length) >= 0;
        let mut columns = BTreeMap::new();
        if let Some(grid) = self.patients.get(patient) {
            for (col, runs) in grid.columns() {
                let agg = runs.aggregate(window);
                if agg.any() {
                    columns.insert(col, agg);
                }
            }
        }
        WindowSlice { eligible, window, columns }
    }

    /// Debug dump: `patient<TAB>day<TAB>namespace<TAB>key<TAB>value`, one line per cell.
    pub fn dump(&self) -> String {
        let mut out = String::from("patient\tday\tnamespace\tkey\tvalue\n");
        for (pid, grid) in &self.patients {
            let mut cells: Vec<(Day, &FeatureId, CellValue)> = Vec::new();
            for (col, runs) in grid.columns() {
                for r in runs.runs() {
                    for d in r.first..=r.last {
                        cells.push((d, self.feature(col), r.value));
                    }
                }
            }
            cells.sort();
            for (d, f, v) in cells {
                out.push_str(&format!("{pid}\t{d}\t{}\t{}\t{v}\n", f.namespace.token(), f.key));
            }
        }
        out
    }
}

/// One cell write produced by an event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellWrite {
    pub feature: FeatureId,
    pub range: DayRange,
    pub value: CellValue,
}

/// The cells an event sets before any temporal extension.
pub fn expand_event(event: &RawEvent, tables: &MappingTables, calendar: &StudyCalendar) -> Vec<CellWrite> {
    let point = |ns: Namespace, key: String, day: Day| CellWrite {
        feature: FeatureId::new(ns, key),
        range: DayRange::new(day, day),
        value: 1,
    };
    let mut out = Vec::new();
    match event {
        RawEvent::Dispensation(d) => match d.class {
            DrugClass::CatheterSupply => out.push(point(Namespace::Catheter, d.drug.clone(), d.day)),
            class => {
                out.push(point(Namespace::Drug, format!("{}/{}", class.token(), d.drug), d.day));
                if class == DrugClass::Antibiotic {
                    let cat = classify_antibiotic(&d.drug, tables);
                    out.push(point(Namespace::AntibioticCategory, cat.name().into(), d.day));
                }
            }
        },
        RawEvent::UrineCulture(c) => {
            out.push(point(Namespace::Culture, format!("result/{}", c.result.token()), c.day));
            let src = standardize_specimen(&c.specimen_source, tables);
            out.push(point(Namespace::Culture, format!("specimen/{}", src.name()), c.day));
            if let Some(o) = &c.organism {
                out.push(point(Namespace::Culture, format!("organism/{o}"), c.day));
            }
            let level = classify_culture(c, tables);
            if level > BacteriaAssociation::None {
                out.push(point(Namespace::Culture, format!("association/{}", level.name()), c.day));
            }
        }
        RawEvent::AstResult(a) => {
            let s = merge_susceptibility(a.susceptibility);
            out.push(point(Namespace::AstPair, format!("{}/{}/{}", s.name(), a.organism, a.antibiotic), a.day));
            let level = classify_ast_organism(&a.organism, tables);
            out.push(point(Namespace::Culture, format!("association/{}", level.name()), a.day));
        }
        RawEvent::Admission(a) => {
            let stay = a.stay();
            for code in &a.icd10 {
                out.push(CellWrite { feature: FeatureId::new(Namespace::Icd10, code.clone()), range: stay, value: 1 });
            }
            for code in &a.opcs {
                out.push(CellWrite { feature: FeatureId::new(Namespace::Opcs, code.clone()), range: stay, value: 1 });
            }
            out.push(point(Namespace::Admission, "entry".into(), a.entry));
        }
        RawEvent::Demographic(s) => {
            let Some(month) = calendar.month_days(s.month) else {
                return out;
            };
            let span = |feature: FeatureId, value: CellValue| CellWrite { feature, range: month, value };
            out.push(span(columns::snapshot(), 1));
            out.push(span(columns::age(), s.age.min(u32::from(CellValue::MAX)) as CellValue));
            out.push(span(FeatureId::new(Namespace::Demographic, format!("sex/{}", s.sex.token())), 1));
            for f in &s.living {
                out.push(span(FeatureId::new(Namespace::Living, f.token()), 1));
            }
            for f in &s.comorbidities {
                out.push(span(FeatureId::new(Namespace::Comorbidity, f.token()), 1));
            }
            if !s.lsoa.is_empty() {
                out.push(span(FeatureId::new(Namespace::Demographic, format!("lsoa/{}", s.lsoa)), 1));
            }
        }
    }
    out.retain(|w| w.value > 0);
    out
}

/// Builds the tensor from parsed events. The dictionary is sorted by
/// `FeatureId`, so the result does not depend on event order.
pub fn build_tensor(events: &[RawEvent], tables: &MappingTables, calendar: &StudyCalendar) -> SparseDayTensor {
    let mut by_patient: BTreeMap<&PatientId, Vec<&RawEvent>> = BTreeMap::new();
    for ev in events {
        by_patient.entry(ev.patient()).or_default().push(ev);
    }
    let groups: Vec<(&PatientId, Vec<&RawEvent>)> = by_patient.into_iter().collect();

    let expanded: Vec<(PatientId, Vec<CellWrite>)> = groups
        .par_iter()
        .map(|(pid, evs)| {
            let writes = evs.iter().flat_map(|e| expand_event(e, tables, calendar)).collect();
            ((*pid).clone(), writes)
        })
        .collect();

    let features: BTreeSet<&FeatureId> = expanded.iter().flat_map(|(_, ws)| ws.iter().map(|w| &w.feature)).collect();
    let mut tensor = SparseDayTensor::empty(*calendar);
    for f in features {
        tensor.ensure_column(f);
    }

    let grids: Vec<(PatientId, PatientGrid)> = expanded
        .into_par_iter()
        .map(|(pid, writes)| {
            let mut grid = PatientGrid::default();
            for w in writes {
                grid.write(tensor.index[&w.feature], w.range, w.value);
            }
            (pid, grid)
        })
        .collect();
    tensor.patients = grids.into_iter().collect();
    tensor
}
