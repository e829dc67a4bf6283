//! Cleaning taxonomies: antibiotic relevance, culture association, AST merge,
//! treatment-duration inference and specimen-source standardization.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{
    normalize_name, CultureResult, DispensationEvent, DrugClass, RawEvent, Susceptibility, UrineCultureEvent,
};

/// Relevance of a dispensed antibiotic to UTI treatment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AntibioticCategory {
    #[default]
    None = 0,
    Rarely = 1,
    Sometimes = 2,
    Regularly = 3,
}

/// Association of a urine culture finding with UTI.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BacteriaAssociation {
    #[default]
    None = 0,
    #[serde(alias = "rarely", alias = "no-growth")]
    NoGrowthOrRarely = 1,
    Sometimes = 2,
    Regularly = 3,
}

macro_rules! level_impl {
    ($t:ty, [$($v:ident),+], [$($name:literal),+]) => {
        impl $t {
            pub const ALL: [$t; 4] = [$(<$t>::$v),+];

            pub fn level(self) -> u8 {
                self as u8
            }

            pub fn from_level(level: u8) -> Option<Self> {
                Self::ALL.get(usize::from(level)).copied()
            }

            pub fn name(self) -> &'static str {
                [$($name),+][self as usize]
            }
        }

        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

level_impl!(AntibioticCategory, [None, Rarely, Sometimes, Regularly], ["none", "rarely", "sometimes", "regularly"]);
level_impl!(
    BacteriaAssociation,
    [None, NoGrowthOrRarely, Sometimes, Regularly],
    ["none", "no-growth-or-rarely", "sometimes", "regularly"]
);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpecimenSource {
    CatheterStream,
    MidStream,
    Other,
}

impl SpecimenSource {
    pub fn name(self) -> &'static str {
        match self {
            SpecimenSource::CatheterStream => "catheter-stream",
            SpecimenSource::MidStream => "mid-stream",
            SpecimenSource::Other => "other",
        }
    }
}

/// Binary susceptibility after merging intermediate into resistant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BinarySusceptibility {
    Susceptible,
    Resistant,
}

impl BinarySusceptibility {
    pub fn name(self) -> &'static str {
        match self {
            BinarySusceptibility::Susceptible => "susceptible",
            BinarySusceptibility::Resistant => "resistant",
        }
    }
}

pub const DEFAULT_TABLES_TOML: &str = include_str!("../config/default_tables.toml");

/// Editable lookup tables. Keys are stored case-folded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingTables {
    pub fallback_duration_days: u32,
    #[serde(default)]
    pub antibiotics: BTreeMap<String, AntibioticCategory>,
    #[serde(default)]
    pub organisms: BTreeMap<String, BacteriaAssociation>,
    #[serde(default)]
    pub ddd_mg_per_day: BTreeMap<String, f64>,
    #[serde(default)]
    pub specimen_sources: BTreeMap<String, SpecimenSource>,
}

impl Default for MappingTables {
    fn default() -> Self {
        MappingTables::from_toml_str(DEFAULT_TABLES_TOML).expect("bundled tables are valid")
    }
}

impl MappingTables {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: MappingTables = toml::from_str(text).map_err(|e| Error::Config(format!("mapping tables: {e}")))?;
        raw.normalized()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Case-folds keys and validates values.
    pub fn normalized(self) -> Result<Self> {
        fn fold<V: Clone>(map: BTreeMap<String, V>, what: &str) -> Result<BTreeMap<String, V>> {
            let mut out = BTreeMap::new();
            for (k, v) in map {
                let key = normalize_name(&k);
                if out.insert(key.clone(), v).is_some() {
                    return Err(Error::Config(format!("duplicate {what} key `{key}`")));
                }
            }
            Ok(out)
        }
        if self.fallback_duration_days == 0 {
            return Err(Error::Config("fallback_duration_days must be >= 1".into()));
        }
        let ddd = fold(self.ddd_mg_per_day, "ddd")?;
        if let Some((k, v)) = ddd.iter().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Config(format!("ddd for `{k}` must be > 0, got {v}")));
        }
        Ok(MappingTables {
            fallback_duration_days: self.fallback_duration_days,
            antibiotics: fold(self.antibiotics, "antibiotic")?,
            organisms: fold(self.organisms, "organism")?,
            ddd_mg_per_day: ddd,
            specimen_sources: fold(self.specimen_sources, "specimen source")?,
        })
    }

    pub fn antibiotic(&self, name: &str) -> Option<AntibioticCategory> {
        self.antibiotics.get(&normalize_name(name)).copied()
    }

    pub fn organism(&self, name: &str) -> Option<BacteriaAssociation> {
        self.organisms.get(&normalize_name(name)).copied()
    }

    pub fn ddd(&self, drug: &str) -> Option<f64> {
        self.ddd_mg_per_day.get(&normalize_name(drug)).copied()
    }
}

pub fn classify_antibiotic(drug: &str, tables: &MappingTables) -> AntibioticCategory {
    tables.antibiotic(drug).unwrap_or_else(|| {
        log::debug!("unmapped antibiotic `{drug}` classified as none");
        AntibioticCategory::None
    })
}

pub fn merge_susceptibility(raw: Susceptibility) -> BinarySusceptibility {
    match raw {
        Susceptibility::Susceptible => BinarySusceptibility::Susceptible,
        Susceptibility::Intermediate | Susceptibility::Resistant => BinarySusceptibility::Resistant,
    }
}

fn organism_association(organism: &str, tables: &MappingTables) -> BacteriaAssociation {
    tables.organism(organism).unwrap_or_else(|| {
        log::debug!("unmapped organism `{organism}` classified as none");
        BacteriaAssociation::None
    })
}

/// Association level carried by a urine culture row.
///
/// No-growth style results sit at level 1: a specimen was taken, so suspicion
/// is non-zero. `refer-to-ast` rows carry nothing; their AST rows do.
pub fn classify_culture(event: &UrineCultureEvent, tables: &MappingTables) -> BacteriaAssociation {
    match event.result {
        CultureResult::ReferToAst => BacteriaAssociation::None,
        CultureResult::NoGrowth | CultureResult::NoSignificantGrowth => BacteriaAssociation::NoGrowthOrRarely,
        CultureResult::MixedGrowth | CultureResult::Invalid | CultureResult::OtherNonAst => event
            .organism
            .as_deref()
            .map(|o| organism_association(o, tables))
            .unwrap_or_default()
            .max(BacteriaAssociation::NoGrowthOrRarely),
    }
}

/// Association level carried by an AST row: the organism's table entry, at
/// least level 1 since the row implies a specimen.
pub fn classify_ast_organism(organism: &str, tables: &MappingTables) -> BacteriaAssociation {
    organism_association(organism, tables).max(BacteriaAssociation::NoGrowthOrRarely)
}

pub fn standardize_specimen(raw: &str, tables: &MappingTables) -> SpecimenSource {
    tables.specimen_sources.get(&normalize_name(raw)).copied().unwrap_or(SpecimenSource::Other)
}

/// Treatment duration in days: `ceil(quantity * dosage / DDD)`, the configured
/// fallback when the drug has no DDD, never less than one day.
pub fn infer_duration_days(event: &DispensationEvent, tables: &MappingTables) -> u32 {
    let Some(ddd) = tables.ddd(&event.drug) else {
        return tables.fallback_duration_days;
    };
    let days = (f64::from(event.quantity) * event.dosage_mg / ddd - 1e-9).ceil();
    if days < 1.0 {
        log::debug!(
            "non-positive duration for `{}` (quantity {}, dosage {}); clamped to 1 day",
            event.drug,
            event.quantity,
            event.dosage_mg
        );
        1
    } else {
        days.min(f64::from(u16::MAX)) as u32
    }
}

/// Counts of keys that fell through to table defaults.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizeReport {
    pub unmapped_antibiotics: BTreeMap<String, u64>,
    pub unmapped_organisms: BTreeMap<String, u64>,
    pub missing_ddd: BTreeMap<String, u64>,
    pub unmapped_specimen_sources: BTreeMap<String, u64>,
    pub clamped_durations: u64,
}

impl NormalizeReport {
    pub fn audit(events: &[RawEvent], tables: &MappingTables) -> Self {
        let mut r = NormalizeReport::default();
        let bump = |m: &mut BTreeMap<String, u64>, k: &str| *m.entry(k.to_string()).or_default() += 1;
        let check_specimen = |r: &mut NormalizeReport, src: &str| {
            if !tables.specimen_sources.contains_key(src) {
                bump(&mut r.unmapped_specimen_sources, src);
            }
        };
        for ev in events {
            match ev {
                RawEvent::Dispensation(d) if d.class == DrugClass::Antibiotic => {
                    if tables.antibiotic(&d.drug).is_none() {
                        bump(&mut r.unmapped_antibiotics, &d.drug);
                    }
                    match tables.ddd(&d.drug) {
                        None => bump(&mut r.missing_ddd, &d.drug),
                        Some(ddd) if f64::from(d.quantity) * d.dosage_mg / ddd <= 0.0 => r.clamped_durations += 1,
                        Some(_) => {}
                    }
                }
                RawEvent::UrineCulture(c) => {
                    if let Some(o) = &c.organism {
                        if tables.organism(o).is_none() {
                            bump(&mut r.unmapped_organisms, o);
                        }
                    }
                    check_specimen(&mut r, &c.specimen_source);
                }
                RawEvent::AstResult(a) => {
                    if tables.organism(&a.organism).is_none() {
                        bump(&mut r.unmapped_organisms, &a.organism);
                    }
                    check_specimen(&mut r, &a.specimen_source);
                }
                _ => {}
            }
        }
        r
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("table\tkey\tcount\n");
        for (name, map) in [
            ("antibiotics", &self.unmapped_antibiotics),
            ("organisms", &self.unmapped_organisms),
            ("ddd_mg_per_day", &self.missing_ddd),
            ("specimen_sources", &self.unmapped_specimen_sources),
        ] {
            for (k, v) in map {
                out.push_str(&format!("{name}\t{k}\t{v}\n"));
            }
        }
        out.push_str(&format!("clamped_durations\t-\t{}\n", self.clamped_durations));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{PatientId, Route};

    fn dispensation(drug: &str, dosage: f64, quantity: u32) -> DispensationEvent {
        DispensationEvent {
            patient: PatientId::new("p").unwrap(),
            day: 100,
            drug: drug.into(),
            dosage_mg: dosage,
            quantity,
            class: DrugClass::Antibiotic,
            route: Route::Oral,
        }
    }

    fn culture(result: CultureResult, organism: Option<&str>) -> UrineCultureEvent {
        UrineCultureEvent {
            patient: PatientId::new("p").unwrap(),
            day: 10,
            result,
            organism: organism.map(String::from),
            specimen_source: "msu".into(),
        }
    }

    #[test]
    fn antibiotic_lookup() {
        let t = MappingTables::default();
        assert_eq!(classify_antibiotic("trimethoprim", &t), AntibioticCategory::Regularly);
        assert_eq!(classify_antibiotic("TriMethoprim ", &t), AntibioticCategory::Regularly);
        assert_eq!(classify_antibiotic("", &t), AntibioticCategory::None);
        assert_eq!(classify_antibiotic("unobtainium", &t), AntibioticCategory::None);
    }

    #[test]
    fn susceptibility_merge() {
        use BinarySusceptibility as B;
        assert_eq!(merge_susceptibility(Susceptibility::Intermediate), B::Resistant);
        assert_eq!(merge_susceptibility(Susceptibility::Susceptible), B::Susceptible);
        assert_eq!(merge_susceptibility(Susceptibility::Resistant), B::Resistant);
    }

    #[test]
    fn culture_levels() {
        let t = MappingTables::default();
        use BacteriaAssociation as U;
        assert_eq!(classify_culture(&culture(CultureResult::NoGrowth, None), &t), U::NoGrowthOrRarely);
        assert_eq!(classify_culture(&culture(CultureResult::NoSignificantGrowth, None), &t), U::NoGrowthOrRarely);
        assert_eq!(classify_culture(&culture(CultureResult::Invalid, None), &t), U::NoGrowthOrRarely);
        assert_eq!(classify_culture(&culture(CultureResult::OtherNonAst, Some("escherichia coli")), &t), U::Regularly);
        assert_eq!(
            classify_culture(&culture(CultureResult::MixedGrowth, Some("mystery bug")), &t),
            U::NoGrowthOrRarely
        );
        assert_eq!(classify_culture(&culture(CultureResult::ReferToAst, Some("escherichia coli")), &t), U::None);
        assert_eq!(classify_ast_organism("proteus mirabilis", &t), U::Regularly);
        assert_eq!(classify_ast_organism("mystery bug", &t), U::NoGrowthOrRarely);
    }

    #[test]
    fn duration_inference() {
        let mut t = MappingTables::default();
        t.ddd_mg_per_day.insert("trimethoprim".into(), 2000.0);
        assert_eq!(infer_duration_days(&dispensation("trimethoprim", 500.0, 28), &t), 7);
        assert_eq!(infer_duration_days(&dispensation("trimethoprim", 2000.0, 1), &t), 1);
        assert_eq!(infer_duration_days(&dispensation("unobtainium", 100.0, 10), &t), 7);
        assert_eq!(infer_duration_days(&dispensation("trimethoprim", 0.0, 10), &t), 1);
        // partial days round up
        assert_eq!(infer_duration_days(&dispensation("trimethoprim", 500.0, 29), &t), 8);
    }

    #[test]
    fn default_ddd_durations() {
        let t = MappingTables::default();
        // 200 mg twice daily for three days
        assert_eq!(infer_duration_days(&dispensation("trimethoprim", 200.0, 6), &t), 3);
        assert_eq!(infer_duration_days(&dispensation("nitrofurantoin", 100.0, 6), &t), 3);
    }

    #[test]
    fn specimen_standardization() {
        let t = MappingTables::default();
        assert_eq!(standardize_specimen("CSU", &t), SpecimenSource::CatheterStream);
        assert_eq!(standardize_specimen("mid-stream urine", &t), SpecimenSource::MidStream);
        assert_eq!(standardize_specimen("blood", &t), SpecimenSource::Other);
    }

    #[test]
    fn table_loading_rejects_bad_values() {
        assert!(MappingTables::from_toml_str("fallback_duration_days = 0").is_err());
        assert!(MappingTables::from_toml_str("fallback_duration_days = 7\n[ddd_mg_per_day]\nx = 0").is_err());
        assert!(MappingTables::from_toml_str(
            "fallback_duration_days = 7\n[antibiotics]\nX = \"rarely\"\nx = \"sometimes\""
        )
        .is_err());
        let t = MappingTables::from_toml_str("fallback_duration_days = 5\n[antibiotics]\nFoo = \"rarely\"").unwrap();
        assert_eq!(classify_antibiotic("foo", &t), AntibioticCategory::Rarely);
    }

    #[test]
    fn swapping_an_entry_only_affects_that_key() {
        let base = MappingTables::default();
        let mut edited = base.clone();
        edited.antibiotics.insert("amoxicillin".into(), AntibioticCategory::Regularly);
        for name in base.antibiotics.keys() {
            if name != "amoxicillin" {
                assert_eq!(classify_antibiotic(name, &base), classify_antibiotic(name, &edited));
            }
        }
        assert_ne!(classify_antibiotic("amoxicillin", &base), classify_antibiotic("amoxicillin", &edited));
    }

    #[test]
    fn audit_counts_unmapped() {
        let t = MappingTables::default();
        let events = vec![
            RawEvent::Dispensation(dispensation("unobtainium", 1.0, 1)),
            RawEvent::UrineCulture(culture(CultureResult::MixedGrowth, Some("mystery bug"))),
        ];
        let r = NormalizeReport::audit(&events, &t);
        assert_eq!(r.unmapped_antibiotics["unobtainium"], 1);
        assert_eq!(r.missing_ddd["unobtainium"], 1);
        assert_eq!(r.unmapped_organisms["mystery bug"], 1);
        assert!(r.unmapped_specimen_sources.is_empty());
    }
}
