//! Factor-conditioned program evolution engine.

pub mod archive;
pub mod config;
pub mod editor;
pub mod evaluator;
pub mod feasibility;
pub mod locality;
pub mod metrics;
pub mod operators;
pub mod program;
pub mod search;
pub mod simulate;

pub use archive::{Archive, ArchiveConfig, BinningSpec, CellKey, Descriptor, Elite, InsertOutcome};
pub use config::RunConfig;
pub use editor::{ChatBackend, HttpBackend, ScriptedBackend, StochasticBackend};
pub use evaluator::{CommandEvaluator, Evaluation, Evaluator, Stage, SyntheticTask};
pub use feasibility::{check_feasible, Failure, FailureType, HookKind, Scope, ValidatorHook};
pub use locality::{check_factor_local, LocalityVerdict, RegionSet};
pub use metrics::{MetricsSeries, Summary};
pub use program::{Factor, Region, TagConfig, TaggedProgram};
pub use search::{RunMode, Search, SearchSettings, TraceRecord};
