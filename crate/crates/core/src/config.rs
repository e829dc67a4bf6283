//! Run configuration covering every pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calendar::StudyCalendar;
use crate::cohort::{CohortConfig, FeatureDefConfig, FeatureSpec};
use crate::error::{Error, Result};
use crate::events::SourceKind;
use crate::gbdt::SuiteConfig;
use crate::normalize::MappingTables;
use crate::risk::LikelihoodTable;
use crate::synth::GeneratorConfig;

/// Where the five ingest files live. `dir` supplies any file not set
/// individually; with nothing set the generator's output is used.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputsConfig {
    pub dir: Option<PathBuf>,
    pub dispensations: Option<PathBuf>,
    pub urine_cultures: Option<PathBuf>,
    pub ast_results: Option<PathBuf>,
    pub admissions: Option<PathBuf>,
    pub demographics: Option<PathBuf>,
}

impl InputsConfig {
    pub fn is_empty(&self) -> bool {
        *self == InputsConfig::default()
    }

    pub fn explicit(&self, kind: SourceKind) -> Option<&PathBuf> {
        match kind {
            SourceKind::Dispensations => self.dispensations.as_ref(),
            SourceKind::UrineCultures => self.urine_cultures.as_ref(),
            SourceKind::AstResults => self.ast_results.as_ref(),
            SourceKind::Admissions => self.admissions.as_ref(),
            SourceKind::Demographics => self.demographics.as_ref(),
        }
    }

    /// Path for one source, falling back to `dir` and then `default_dir`.
    pub fn path_for(&self, kind: SourceKind, default_dir: &Path) -> PathBuf {
        self.explicit(kind)
            .cloned()
            .unwrap_or_else(|| self.dir.as_deref().unwrap_or(default_dir).join(kind.file_name()))
    }

    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.dir,
            &mut self.dispensations,
            &mut self.urine_cultures,
            &mut self.ast_results,
            &mut self.admissions,
            &mut self.demographics,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub top_k: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig { top_k: 15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Drives every random choice: generation, control sampling, data
    /// splits and oversampling. Overrides `generator.seed` and
    /// `model.train.seed`.
    pub seed: u64,
    pub calendar: StudyCalendar,
    pub inputs: InputsConfig,
    /// Mapping-tables TOML; the bundled defaults when unset.
    pub tables: Option<PathBuf>,
    pub likelihood: LikelihoodTable,
    pub generator: GeneratorConfig,
    pub cohort: CohortConfig,
    /// Feature definitions; the default spec when unset.
    pub features: Option<Vec<FeatureDefConfig>>,
    pub model: SuiteConfig,
    pub explain: ExplainConfig,
    /// Also write the sparse tensor as a per-cell dump during scoring.
    pub tensor_dump: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut cfg = PipelineConfig {
            seed: 0,
            calendar: StudyCalendar::default(),
            inputs: InputsConfig::default(),
            tables: None,
            likelihood: LikelihoodTable::default(),
            generator: GeneratorConfig::default(),
            cohort: CohortConfig::default(),
            features: None,
            model: SuiteConfig::default(),
            explain: ExplainConfig::default(),
            tensor_dump: false,
        };
        cfg.set_seed(1);
        cfg
    }
}

impl PipelineConfig {
    /// Parses TOML, resolving relative paths against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.inputs.resolve(base_dir);
        if let Some(t) = cfg.tables.as_mut() {
            if t.is_relative() {
                *t = base_dir.join(&*t);
            }
        }
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PipelineConfig::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.generator.seed = seed;
        self.model.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        StudyCalendar::new(self.calendar.start, self.calendar.end)?;
        self.generator.validate()?;
        self.likelihood.validate()?;
        self.model.train.validate()?;
        self.feature_spec()?;
        if !(self.cohort.control_ratio >= 0.0 && self.cohort.control_ratio.is_finite()) {
            return Err(Error::Config("cohort.control_ratio must be non-negative".into()));
        }
        if self.explain.top_k == 0 {
            return Err(Error::Config("explain.top_k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn feature_spec(&self) -> Result<FeatureSpec> {
        match &self.features {
            Some(defs) => FeatureSpec::from_config(defs),
            None => Ok(FeatureSpec::default()),
        }
    }

    pub fn mapping_tables(&self) -> Result<MappingTables> {
        match &self.tables {
            Some(p) => MappingTables::load(p),
            None => Ok(MappingTables::default()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        let cfg = PipelineConfig::from_toml_str("", Path::new(".")).unwrap();
        assert_eq!(cfg, PipelineConfig::default());
    }

    #[test]
    fn seed_propagates_and_paths_resolve() {
        let text = "seed = 9\n[inputs]\ndir = \"raw\"\n[cohort]\ncontrol_ratio = 2.0\n";
        let cfg = PipelineConfig::from_toml_str(text, Path::new("/cfg")).unwrap();
        assert_eq!((cfg.generator.seed, cfg.model.train.seed), (9, 9));
        assert_eq!(cfg.inputs.path_for(SourceKind::Admissions, Path::new("/x")), Path::new("/cfg/raw/admissions.csv"));
        assert_eq!(cfg.cohort.control_ratio, 2.0);
    }

    #[test]
    fn invalid_sections_rejected() {
        for bad in [
            "[likelihood]\nrows = 1",
            "likelihood = [[0.0, 0.2, 0.4, 0.6], [0.2, 0.2, 0.4, 0.6], [0.4, 0.4, 0.4, 0.8], [0.6, 0.6, 0.8, 0.9]]",
            "[model.train]\nbins = 1",
            "[calendar]\nstart = \"2022-01-01\"\nend = \"2021-01-01\"",
            "[[features]]\nname = \"x\"",
            "unknown_key = 3",
        ] {
            assert!(PipelineConfig::from_toml_str(bad, Path::new(".")).is_err(), "{bad}");
        }
    }
}
