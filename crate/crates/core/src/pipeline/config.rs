//! Run configuration loaded from one JSON file.
//!
//! Relative paths are resolved against the directory holding the config file.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::assessment::{default_min_valid, AssessmentPolicy, MajorityKind};
use crate::digest::FieldHasher;
use crate::inference::{BackendSpec, ModelSpec, RunOptions};
use crate::stats::{WilcoxonMode, DEFAULT_EXACT_MAX_N};

use super::PipelineError;

/// Majority rule shared by every model. `min_valid` defaults per model to
/// all-but-one of the variants it is queried with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    #[serde(default = "default_majority")]
    pub majority: MajorityKind,
    #[serde(default)]
    pub min_valid: Option<usize>,
}

fn default_majority() -> MajorityKind {
    MajorityKind::Simple
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            majority: MajorityKind::Simple,
            min_valid: None,
        }
    }
}

impl PolicyConfig {
    pub fn for_variants(&self, variants: usize) -> AssessmentPolicy {
        AssessmentPolicy {
            majority: self.majority,
            min_valid: self.min_valid.unwrap_or_else(|| default_min_valid(variants)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOpts {
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_timeout_secs")]
    pub request_timeout_secs: u64,
    /// Response cache; defaults to `response_cache.jsonl` in the output dir.
    #[serde(default)]
    pub cache_path: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_in_flight() -> usize {
    8
}
fn default_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    1000
}
fn default_timeout_secs() -> u64 {
    60
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for RunOpts {
    fn default() -> Self {
        Self {
            max_in_flight: default_in_flight(),
            max_retries: default_retries(),
            backoff_ms: default_backoff_ms(),
            request_timeout_secs: default_timeout_secs(),
            cache_path: None,
            output_dir: default_output_dir(),
        }
    }
}

impl RunOpts {
    pub fn dispatch_options(&self) -> RunOptions {
        RunOptions {
            max_in_flight: self.max_in_flight,
            max_retries: self.max_retries,
            backoff: Duration::from_millis(self.backoff_ms),
            request_timeout: Duration::from_secs(self.request_timeout_secs),
        }
    }

    pub fn cache_file(&self) -> PathBuf {
        self.cache_path
            .clone()
            .unwrap_or_else(|| self.output_dir.join("response_cache.jsonl"))
    }
}

/// What the report stage draws.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportTargets {
    /// Sender indices (catalog order) to plot.
    #[serde(default = "default_senders")]
    pub senders: Vec<usize>,
    /// Model quadruples, ordered top, right, bottom, left.
    #[serde(default)]
    pub comparisons: Vec<Vec<String>>,
    #[serde(default = "default_true")]
    pub distribution: bool,
}

fn default_senders() -> Vec<usize> {
    vec![0]
}
fn default_true() -> bool {
    true
}

impl Default for ReportTargets {
    fn default() -> Self {
        Self {
            senders: default_senders(),
            comparisons: Vec::new(),
            distribution: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsInput {
    /// Modal codes of vignettes both models answered consistently.
    #[default]
    Consistent,
    /// Per-prompt codes where both models gave a valid answer.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    #[serde(default)]
    pub stats_input: StatsInput,
    #[serde(default)]
    pub wilcoxon_mode: WilcoxonMode,
    #[serde(default = "default_exact_max_n")]
    pub exact_max_n: usize,
}

fn default_exact_max_n() -> usize {
    DEFAULT_EXACT_MAX_N
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            stats_input: StatsInput::Consistent,
            wilcoxon_mode: WilcoxonMode::Auto,
            exact_max_n: DEFAULT_EXACT_MAX_N,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub catalog_path: PathBuf,
    pub variants_path: PathBuf,
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub run_opts: RunOpts,
    #[serde(default)]
    pub report: ReportTargets,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    /// When set, every mock model's seed is derived from this and its name.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub parser_rules_path: Option<PathBuf>,
    /// Manual verdict corrections applied after parsing.
    #[serde(default)]
    pub overrides_path: Option<PathBuf>,
}

/// Command-line adjustments applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct ConfigOverrides {
    pub models: Option<Vec<String>>,
    pub majority: Option<MajorityKind>,
    pub min_valid: Option<usize>,
    pub variant_ids: Option<Vec<u32>>,
    pub output_dir: Option<PathBuf>,
    pub cache_path: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// Per-model mock seed derived from a run seed.
pub fn derive_seed(run_seed: u64, model_name: &str) -> u64 {
    let bytes = FieldHasher::new()
        .field("cinorms-model-seed")
        .field(run_seed.to_le_bytes())
        .field(model_name)
        .finish_bytes();
    u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?;
        resolve(base_dir, &mut cfg.catalog_path);
        resolve(base_dir, &mut cfg.variants_path);
        resolve(base_dir, &mut cfg.run_opts.output_dir);
        for p in [
            cfg.run_opts.cache_path.as_mut(),
            cfg.parser_rules_path.as_mut(),
            cfg.overrides_path.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            resolve(base_dir, p);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base)
    }

    /// Apply command-line overrides. Paths given here are taken as-is
    /// (relative to the working directory).
    pub fn apply(&mut self, o: &ConfigOverrides) -> Result<(), PipelineError> {
        if let Some(names) = &o.models {
            for n in names {
                if !self.models.iter().any(|m| &m.name == n) {
                    return Err(PipelineError::ConfigInvalid(format!("unknown model {n:?}")));
                }
            }
            self.models.retain(|m| names.contains(&m.name));
            self.report
                .comparisons
                .retain(|quad| quad.iter().all(|n| names.contains(n)));
        }
        if let Some(k) = o.majority {
            self.policy.majority = k;
        }
        if let Some(n) = o.min_valid {
            self.policy.min_valid = Some(n);
        }
        if let Some(ids) = &o.variant_ids {
            for m in &mut self.models {
                m.variant_ids = Some(ids.clone());
            }
        }
        if let Some(d) = &o.output_dir {
            self.run_opts.output_dir = d.clone();
        }
        if let Some(c) = &o.cache_path {
            self.run_opts.cache_path = Some(c.clone());
        }
        if let Some(s) = o.seed {
            self.seed = Some(s);
        }
        Ok(())
    }

    /// Mock profiles with the run seed folded in.
    pub fn effective_models(&self) -> Vec<ModelSpec> {
        self.models
            .iter()
            .map(|m| {
                let mut m = m.clone();
                if let (Some(seed), BackendSpec::Mock { profile }) = (self.seed, &mut m.backend) {
                    profile.seed = derive_seed(seed, &m.name);
                }
                m
            })
            .collect()
    }

    /// Structural checks that need no network access.
    pub fn validate(&self, all_variant_ids: &[u32]) -> Result<(), PipelineError> {
        let bad = |msg: String| Err(PipelineError::ConfigInvalid(msg));
        if self.models.is_empty() {
            return bad("at least one model is required".into());
        }
        let mut names = HashSet::new();
        for m in &self.models {
            if m.name.is_empty() {
                return bad("model names must be non-empty".into());
            }
            if !names.insert(m.name.as_str()) {
                return bad(format!("duplicate model name {:?}", m.name));
            }
            let variants = self.variant_ids_for(m, all_variant_ids);
            if variants.is_empty() {
                return bad(format!("model {:?} selects no prompt variants", m.name));
            }
            if let Some(v) = variants.iter().find(|v| !all_variant_ids.contains(v)) {
                return bad(format!("model {:?} selects unknown variant {v}", m.name));
            }
            if let BackendSpec::Mock { profile } = &m.backend {
                profile
                    .validate()
                    .map_err(|e| PipelineError::ConfigInvalid(format!("model {:?}: {e}", m.name)))?;
            }
            self.policy
                .for_variants(variants.len())
                .validate(variants.len())
                .map_err(|e| PipelineError::ConfigInvalid(format!("model {:?}: {e}", m.name)))?;
        }
        for quad in &self.report.comparisons {
            if quad.len() != 4 {
                return bad(format!("comparison {quad:?} must name exactly 4 models"));
            }
            if let Some(n) = quad.iter().find(|n| !names.contains(n.as_str())) {
                return bad(format!("comparison names unknown model {n:?}"));
            }
        }
        if self.run_opts.max_in_flight == 0 {
            return bad("max_in_flight must be at least 1".into());
        }
        for p in [Some(&self.catalog_path), Some(&self.variants_path)]
            .into_iter()
            .chain([self.parser_rules_path.as_ref(), self.overrides_path.as_ref()])
            .flatten()
        {
            if !p.is_file() {
                return bad(format!("file not found: {}", p.display()));
            }
        }
        Ok(())
    }

    pub fn variant_ids_for(&self, model: &ModelSpec, all_variant_ids: &[u32]) -> Vec<u32> {
        let mut ids = model
            .variant_ids
            .clone()
            .unwrap_or_else(|| all_variant_ids.to_vec());
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}
