//! Contextual-integrity norm auditing for language models.
//!
//! The crate generates factorial CI vignettes from parameter catalogs, renders
//! them through a set of prompt variants, queries model backends, parses the
//! Likert verdicts out of free text and aggregates them into per-flow encoded
//! norms. The `stats` and `report` modules compare models and render SVG
//! heatmaps; `pipeline` wires every stage into resumable runs.

pub mod assessment;
pub mod catalog;
pub mod cleanup;
pub mod digest;
pub mod inference;
pub mod pipeline;
pub mod prompting;
pub mod report;
pub mod scale;
pub mod stats;

pub use assessment::{AssessmentPolicy, MajorityKind, NormMatrix, NormRecord, NormStatus};
pub use catalog::{ContextCatalog, Vignette};
pub use cleanup::{InvalidCategory, ParserRules, Verdict};
pub use inference::{ModelSpec, RawResponse, SamplingParams};
pub use prompting::{ChatTemplateKind, PromptVariant, PromptVariantSet};
pub use scale::{LikertLevel, LikertScale};
