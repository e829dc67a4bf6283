pub mod calendar;
pub mod cohort;
pub mod config;
pub mod error;
pub mod events;
pub mod explain;
pub mod gbdt;
pub mod metrics;
pub mod normalize;
pub mod risk;
pub mod synth;
pub mod tensor;

pub use calendar::{Day, DayRange, StudyCalendar};
pub use cohort::{Cohort, CohortConfig, CohortRow, FeatureSpec};
pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use events::{PatientId, RawEvent, SourceKind};
pub use gbdt::{Dataset, Ensemble, TrainConfig};
pub use normalize::MappingTables;
pub use risk::{Likelihood, LikelihoodEpisode, LikelihoodTable};
pub use tensor::SparseDayTensor;
