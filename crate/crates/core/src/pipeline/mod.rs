//! Stage wiring: generate, prompt, dispatch, clean, assess, analyze, report.
//!
//! Every stage reads its inputs from the output directory and writes its
//! artifacts back there, so any stage can be re-run on its own once its
//! predecessor's files exist. `manifest.json` records, per stage, a digest of
//! the inputs and of the outputs.

pub mod config;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::assessment::{
    assess_rows, build_norm_matrix, read_norms_jsonl, write_norms_csv, write_norms_jsonl, NormRecord, NormStatus,
};
use crate::catalog::{generate_vignettes, load_catalog, read_vignettes, write_vignettes, ContextCatalog};
use crate::cleanup::{clean_run, read_verdicts, write_verdicts, CleanStats, Overrides, ParserRules};
use crate::digest::{file_sha256_hex, FieldHasher};
use crate::inference::{
    backend_for, dispatch, BackendSpec, ModelSpec, PromptItem, RawResponse, ResponseCache,
};
use crate::prompting::{apply_chat_template, build_prompt, load_variants, PromptVariantSet};
use crate::report::{render_comparison_heatmap, render_distribution_chart, render_norm_heatmap, Palette};
use crate::scale::{LikertLevel, LikertScale};
use crate::stats::{
    agreement_count, distribution_summary, friedman_test, wilcoxon_from_differences, OutcomeCounts, PairedSample,
    TestMethod,
};

pub use config::{
    derive_seed, AnalysisConfig, ConfigOverrides, PolicyConfig, ReportTargets, RunConfig, RunOpts, StatsInput,
};

pub const VIGNETTES_FILE: &str = "vignettes.csv";
pub const PROMPTS_FILE: &str = "prompts.jsonl";
pub const RESPONSES_FILE: &str = "responses.jsonl";
/// Attempts, cache flags and timestamps; not part of the manifest.
pub const DISPATCH_LOG_FILE: &str = "dispatch_log.jsonl";
pub const VERDICTS_FILE: &str = "verdicts.csv";
pub const CLEAN_STATS_FILE: &str = "clean_stats.json";
pub const NORMS_JSONL_FILE: &str = "norms.jsonl";
pub const NORMS_CSV_FILE: &str = "norms.csv";
pub const STATS_FILE: &str = "stats.json";
pub const AGREEMENT_FILE: &str = "agreement.csv";
pub const DISTRIBUTION_FILE: &str = "distribution.csv";
pub const FIGURES_DIR: &str = "figures";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generate,
    Prompt,
    Dispatch,
    Clean,
    Assess,
    Analyze,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Generate,
        Stage::Prompt,
        Stage::Dispatch,
        Stage::Clean,
        Stage::Assess,
        Stage::Analyze,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Prompt => "prompt",
            Stage::Dispatch => "dispatch",
            Stage::Clean => "clean",
            Stage::Assess => "assess",
            Stage::Analyze => "analyze",
            Stage::Report => "report",
        }
    }

    pub fn parse_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.as_str() == s.trim())
    }

    /// Comma-separated stage names, or `all`. Output is in pipeline order.
    pub fn parse_list(s: &str) -> Result<Vec<Stage>, PipelineError> {
        if s.trim() == "all" {
            return Ok(Self::ALL.to_vec());
        }
        let mut out = Vec::new();
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            let st = Self::parse_name(part)
                .ok_or_else(|| PipelineError::ConfigInvalid(format!("unknown stage {part:?}")))?;
            out.push(st);
        }
        if out.is_empty() {
            return Err(PipelineError::ConfigInvalid("no stages selected".into()));
        }
        out.sort();
        out.dedup();
        Ok(out)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("model {model:?} reads its API key from {var}, which is not set")]
    MissingApiKey { model: String, var: String },
    #[error("stage {stage} failed: {cause:#}")]
    StageFailure { stage: Stage, cause: anyhow::Error },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactDigest {
    /// Path relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub input_digest: String,
    pub output_digest: String,
    pub outputs: Vec<ArtifactDigest>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> io::Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }

    pub fn get(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == stage)
    }

    fn upsert(&mut self, rec: StageRecord) {
        self.stages.retain(|r| r.stage != rec.stage);
        self.stages.push(rec);
        self.stages.sort_by_key(|r| r.stage);
    }
}

/// One line of `prompts.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub model: String,
    pub vignette_id: String,
    pub variant_id: u32,
    pub wire_text: String,
}

/// One line of `responses.jsonl`: only the fields that are a pure function
/// of the configuration and the backend's answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub model: String,
    pub vignette_id: String,
    pub variant_id: u32,
    pub raw_text: String,
}

#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub manifest: Manifest,
    pub stages_run: Vec<Stage>,
    /// Backend attempts made by the dispatch stage, retries included.
    pub backend_calls: usize,
    pub cache_hits: usize,
}

struct Ctx {
    cfg: RunConfig,
    models: Vec<ModelSpec>,
    variants: PromptVariantSet,
    scale: LikertScale,
    out: PathBuf,
}

struct StageOutput {
    input_digest: String,
    outputs: Vec<String>,
}

/// Run `stages` (in pipeline order) for `cfg`.
pub async fn run_pipeline(cfg: RunConfig, stages: &[Stage]) -> Result<RunSummary, PipelineError> {
    let variants = load_variants(&cfg.variants_path)
        .map_err(|e| PipelineError::ConfigInvalid(format!("{}: {e}", cfg.variants_path.display())))?;
    cfg.validate(&variants.ids())?;
    let models = cfg.effective_models();
    let mut stages = stages.to_vec();
    stages.sort();
    stages.dedup();

    if stages.contains(&Stage::Dispatch) {
        check_api_keys(&models)?;
    }

    let out = cfg.run_opts.output_dir.clone();
    fs::create_dir_all(&out)
        .map_err(|e| PipelineError::ConfigInvalid(format!("cannot create {}: {e}", out.display())))?;
    let ctx = Ctx {
        cfg,
        models,
        variants,
        scale: LikertScale::default(),
        out,
    };

    let manifest_path = ctx.out.join(MANIFEST_FILE);
    let mut summary = RunSummary {
        manifest: Manifest::load(&manifest_path).unwrap_or_default(),
        ..Default::default()
    };

    for stage in stages {
        tracing::info!(%stage, "running stage");
        let result = match stage {
            Stage::Generate => stage_generate(&ctx),
            Stage::Prompt => stage_prompt(&ctx),
            Stage::Dispatch => stage_dispatch(&ctx, &mut summary).await,
            Stage::Clean => stage_clean(&ctx),
            Stage::Assess => stage_assess(&ctx),
            Stage::Analyze => stage_analyze(&ctx),
            Stage::Report => stage_report(&ctx),
        };
        let produced = result
            .and_then(|o| record_stage(&ctx.out, stage, o))
            .map_err(|cause| PipelineError::StageFailure { stage, cause })?;
        summary.manifest.upsert(produced);
        summary.stages_run.push(stage);
        write_json(&manifest_path, &summary.manifest).map_err(|cause| PipelineError::StageFailure { stage, cause })?;
    }
    Ok(summary)
}

/// Fails with `MissingApiKey` for the first HTTP model whose key variable
/// is unset.
pub fn check_api_keys(models: &[ModelSpec]) -> Result<(), PipelineError> {
    for m in models {
        if let BackendSpec::Http { api_key_env, .. } = &m.backend {
            if std::env::var_os(api_key_env).is_none() {
                return Err(PipelineError::MissingApiKey {
                    model: m.name.clone(),
                    var: api_key_env.clone(),
                });
            }
        }
    }
    Ok(())
}

fn record_stage(out: &Path, stage: Stage, o: StageOutput) -> anyhow::Result<StageRecord> {
    let mut outputs = Vec::with_capacity(o.outputs.len());
    let mut h = FieldHasher::new().field(stage.as_str());
    for rel in o.outputs {
        let sha = file_sha256_hex(&out.join(&rel)).with_context(|| format!("hashing {rel}"))?;
        h = h.field(&rel).field(&sha);
        outputs.push(ArtifactDigest { path: rel, sha256: sha });
    }
    Ok(StageRecord {
        stage,
        input_digest: o.input_digest,
        output_digest: h.finish_hex(),
        outputs,
    })
}

fn input_path(ctx: &Ctx, name: &str, producer: Stage) -> anyhow::Result<PathBuf> {
    let p = ctx.out.join(name);
    if !p.is_file() {
        bail!("missing input artifact {}; run the {producer} stage first", p.display());
    }
    Ok(p)
}

fn file_digest(p: &Path) -> anyhow::Result<String> {
    file_sha256_hex(p).with_context(|| format!("hashing {}", p.display()))
}

fn json_digest<T: Serialize>(v: &T) -> String {
    crate::digest::sha256_hex(serde_json::to_vec(v).expect("config values serialize"))
}

fn create(p: &Path) -> anyhow::Result<BufWriter<fs::File>> {
    if let Some(dir) = p.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
    ))
}

fn write_json<T: Serialize>(p: &Path, v: &T) -> anyhow::Result<()> {
    let mut w = create(p)?;
    serde_json::to_writer_pretty(&mut w, v)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_jsonl<T: Serialize>(p: &Path, items: &[T]) -> anyhow::Result<()> {
    let mut w = create(p)?;
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(p: &Path) -> anyhow::Result<Vec<T>> {
    let f = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{} line {}", p.display(), i + 1))?);
    }
    Ok(out)
}

fn open(p: &Path) -> anyhow::Result<BufReader<fs::File>> {
    Ok(BufReader::new(
        fs::File::open(p).with_context(|| format!("opening {}", p.display()))?,
    ))
}

fn load_catalog_ctx(ctx: &Ctx) -> anyhow::Result<ContextCatalog> {
    load_catalog(&ctx.cfg.catalog_path).with_context(|| format!("loading {}", ctx.cfg.catalog_path.display()))
}

fn stage_generate(ctx: &Ctx) -> anyhow::Result<StageOutput> {
    let catalog = load_catalog_ctx(ctx)?;
    let vignettes = generate_vignettes(&catalog);
    let mut w = create(&ctx.out.join(VIGNETTES_FILE))?;
    write_vignettes(&vignettes, &mut w)?;
    w.flush()?;
    tracing::info!(count = vignettes.len(), dataset = %catalog.dataset_id, "generated vignettes");
    Ok(StageOutput {
        input_digest: FieldHasher::new()
            .field("generate")
            .field(file_digest(&ctx.cfg.catalog_path)?)
            .finish_hex(),
        outputs: vec![VIGNETTES_FILE.into()],
    })
}

#[derive(Serialize)]
struct PromptSpec<'a> {
    name: &'a str,
    chat_template_kind: &'a str,
    variant_ids: Vec<u32>,
}

fn stage_prompt(ctx: &Ctx) -> anyhow::Result<StageOutput> {
    let vin = input_path(ctx, VIGNETTES_FILE, Stage::Generate)?;
    let vignettes = read_vignettes(open(&vin)?)?;
    let all_ids = ctx.variants.ids();
    let mut specs = Vec::new();
    let mut records = Vec::new();
    for m in &ctx.models {
        let ids = ctx.cfg.variant_ids_for(m, &all_ids);
        let chosen = ctx.variants.select(&ids)?;
        for v in &vignettes {
            for variant in &chosen {
                records.push(PromptRecord {
                    model: m.name.clone(),
                    vignette_id: v.id.clone(),
                    variant_id: variant.id,
                    wire_text: apply_chat_template(&build_prompt(v, variant, &ctx.scale), m.chat_template_kind),
                });
            }
        }
        specs.push(PromptSpec {
            name: &m.name,
            chat_template_kind: m.chat_template_kind.as_str(),
            variant_ids: ids,
        });
    }
    write_jsonl(&ctx.out.join(PROMPTS_FILE), &records)?;
    Ok(StageOutput {
        input_digest: FieldHasher::new()
            .field("prompt")
            .field(file_digest(&vin)?)
            .field(file_digest(&ctx.cfg.variants_path)?)
            .field(json_digest(&specs))
            .finish_hex(),
        outputs: vec![PROMPTS_FILE.into()],
    })
}

async fn stage_dispatch(ctx: &Ctx, summary: &mut RunSummary) -> anyhow::Result<StageOutput> {
    let pin = input_path(ctx, PROMPTS_FILE, Stage::Prompt)?;
    let prompts: Vec<PromptRecord> = read_jsonl(&pin)?;
    let mut by_model: HashMap<&str, Vec<PromptItem>> = HashMap::new();
    for p in &prompts {
        by_model.entry(p.model.as_str()).or_default().push(PromptItem {
            vignette_id: p.vignette_id.clone(),
            variant_id: p.variant_id,
            wire_text: p.wire_text.clone(),
        });
    }
    let opts = ctx.cfg.run_opts.dispatch_options();
    // build every backend first so configuration problems surface before
    // any request is sent
    let mut backends = Vec::with_capacity(ctx.models.len());
    for m in &ctx.models {
        if !by_model.contains_key(m.name.as_str()) {
            bail!("{} has no prompts for model {:?}; re-run the prompt stage", pin.display(), m.name);
        }
        backends.push(backend_for(m, &opts)?);
    }
    let cache_path = ctx.cfg.run_opts.cache_file();
    let cache = ResponseCache::open(&cache_path).with_context(|| format!("opening cache {}", cache_path.display()))?;

    let mut records = Vec::with_capacity(prompts.len());
    let mut log: Vec<RawResponse> = Vec::with_capacity(prompts.len());
    for (m, backend) in ctx.models.iter().zip(&backends) {
        let items = &by_model[m.name.as_str()];
        let outcome = dispatch(items, m, backend.as_ref(), Some(&cache), &opts)
            .await
            .with_context(|| format!("model {:?}", m.name))?;
        tracing::info!(
            model = %m.name,
            responses = outcome.responses.len(),
            calls = outcome.backend_calls,
            cache_hits = outcome.cache_hits,
            "dispatched"
        );
        summary.backend_calls += outcome.backend_calls;
        summary.cache_hits += outcome.cache_hits;
        records.extend(outcome.responses.iter().map(|r| ResponseRecord {
            model: r.model_name.clone(),
            vignette_id: r.vignette_id.clone(),
            variant_id: r.variant_id,
            raw_text: r.raw_text.clone(),
        }));
        log.extend(outcome.responses);
    }
    write_jsonl(&ctx.out.join(RESPONSES_FILE), &records)?;
    write_jsonl(&ctx.out.join(DISPATCH_LOG_FILE), &log)?;

    let backends_json: Vec<_> = ctx
        .models
        .iter()
        .map(|m| (&m.name, &m.backend, &m.sampling, m.chat_template_kind))
        .collect();
    Ok(StageOutput {
        input_digest: FieldHasher::new()
            .field("dispatch")
            .field(file_digest(&pin)?)
            .field(json_digest(&backends_json))
            .finish_hex(),
        outputs: vec![RESPONSES_FILE.into()],
    })
}

#[derive(Serialize, Deserialize)]
struct CleanReport {
    overall: CleanStats,
    per_model: Vec<ModelCleanStats>,
    overrides_applied: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelCleanStats {
    model: String,
    stats: CleanStats,
}

fn stage_clean(ctx: &Ctx) -> anyhow::Result<StageOutput> {
    let rin = input_path(ctx, RESPONSES_FILE, Stage::Dispatch)?;
    let records: Vec<ResponseRecord> = read_jsonl(&rin)?;
    let responses: Vec<RawResponse> = records
        .into_iter()
        .map(|r| RawResponse {
            vignette_id: r.vignette_id,
            variant_id: r.variant_id,
            model_name: r.model,
            raw_text: r.raw_text,
            attempts: 0,
            from_cache: false,
            timestamp: String::new(),
        })
        .collect();
    let rules = match &ctx.cfg.parser_rules_path {
        Some(p) => ParserRules::load(p)?,
        None => ParserRules::shared_default().clone(),
    };
    let (mut rows, _) = clean_run(&responses, &ctx.scale, &rules);
    let mut h = FieldHasher::new()
        .field("clean")
        .field(file_digest(&rin)?)
        .field(json_digest(&rules));
    let mut overrides_applied = 0;
    if let Some(p) = &ctx.cfg.overrides_path {
        overrides_applied = Overrides::load(p)?.apply(&mut rows);
        h = h.field(file_digest(p)?);
    }
    let overall = CleanStats::from_rows(&rows);
    let mut model_order: Vec<&str> = Vec::new();
    for r in &rows {
        if !model_order.contains(&r.model.as_str()) {
            model_order.push(&r.model);
        }
    }
    let per_model = model_order
        .iter()
        .map(|m| {
            let subset: Vec<_> = rows.iter().filter(|r| r.model == *m).cloned().collect();
            ModelCleanStats {
                model: m.to_string(),
                stats: CleanStats::from_rows(&subset),
            }
        })
        .collect();
    tracing::info!(total = overall.total, invalid_rate = overall.invalid_rate, "cleaned responses");

    let mut w = create(&ctx.out.join(VERDICTS_FILE))?;
    write_verdicts(&rows, &mut w)?;
    w.flush()?;
    write_json(
        &ctx.out.join(CLEAN_STATS_FILE),
        &CleanReport {
            overall,
            per_model,
            overrides_applied,
        },
    )?;
    Ok(StageOutput {
        input_digest: h.finish_hex(),
        outputs: vec![VERDICTS_FILE.into(), CLEAN_STATS_FILE.into()],
    })
}

fn stage_assess(ctx: &Ctx) -> anyhow::Result<StageOutput> {
    let vin = input_path(ctx, VERDICTS_FILE, Stage::Clean)?;
    let rows = read_verdicts(open(&vin)?)?;
    let all_ids = ctx.variants.ids();
    let policies: BTreeMap<&str, _> = ctx
        .models
        .iter()
        .map(|m| {
            let n = ctx.cfg.variant_ids_for(m, &all_ids).len();
            (m.name.as_str(), ctx.cfg.policy.for_variants(n))
        })
        .collect();
    if let Some(r) = rows.iter().find(|r| !policies.contains_key(r.model.as_str())) {
        bail!("{} has verdicts for model {:?}, which is not configured", vin.display(), r.model);
    }
    let records = assess_rows(&rows, |m| policies[m])?;
    write_norms_jsonl(&records, create(&ctx.out.join(NORMS_JSONL_FILE))?)?;
    let mut w = create(&ctx.out.join(NORMS_CSV_FILE))?;
    write_norms_csv(&records, &mut w)?;
    w.flush()?;
    Ok(StageOutput {
        input_digest: FieldHasher::new()
            .field("assess")
            .field(file_digest(&vin)?)
            .field(json_digest(&policies))
            .finish_hex(),
        outputs: vec![NORMS_JSONL_FILE.into(), NORMS_CSV_FILE.into()],
    })
}

type GroupedNorms = Vec<(String, Vec<NormRecord>)>;

fn read_norms(ctx: &Ctx) -> anyhow::Result<(PathBuf, GroupedNorms)> {
    let nin = input_path(ctx, NORMS_JSONL_FILE, Stage::Assess)?;
    let records = read_norms_jsonl(open(&nin)?)?;
    let mut grouped: Vec<(String, Vec<NormRecord>)> = ctx.models.iter().map(|m| (m.name.clone(), Vec::new())).collect();
    for r in records {
        match grouped.iter_mut().find(|(m, _)| *m == r.model_name) {
            Some((_, v)) => v.push(r),
            None => bail!("{} has norms for unconfigured model {:?}", nin.display(), r.model_name),
        }
    }
    grouped.retain(|(_, v)| !v.is_empty());
    Ok((nin, grouped))
}

/// Outcome of one pairwise Wilcoxon comparison; `error` is set instead of the
/// numbers when the test is undefined for the pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseResult {
    pub model_a: String,
    pub model_b: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_effective: Option<usize>,
    #[serde(rename = "W", skip_serializing_if = "Option::is_none")]
    pub statistic: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<TestMethod>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FriedmanResult {
    pub models: Vec<String>,
    /// Vignettes every model answered consistently.
    pub n_blocks: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chi_square: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub analysis: AnalysisConfig,
    pub pairwise: Vec<PairwiseResult>,
    pub friedman: Option<FriedmanResult>,
}

fn pairwise(a: &[NormRecord], b: &[NormRecord], cfg: &AnalysisConfig) -> Result<crate::stats::TestResult, String> {
    let sample = match cfg.stats_input {
        StatsInput::Consistent => PairedSample::from_consistent(a, b),
        StatsInput::Raw => PairedSample::from_raw(a, b),
    }
    .map_err(|e| e.to_string())?;
    wilcoxon_from_differences(&sample.differences(), cfg.wilcoxon_mode, cfg.exact_max_n).map_err(|e| e.to_string())
}

fn friedman_blocks(groups: &[(String, Vec<NormRecord>)]) -> Vec<Vec<f64>> {
    let maps: Vec<HashMap<&str, LikertLevel>> = groups
        .iter()
        .map(|(_, recs)| {
            recs.iter()
                .filter_map(|r| r.norm().map(|l| (r.vignette_id.as_str(), l)))
                .collect()
        })
        .collect();
    groups[0]
        .1
        .iter()
        .filter_map(|r| {
            maps.iter()
                .map(|m| m.get(r.vignette_id.as_str()).map(|l| f64::from(l.code())))
                .collect::<Option<Vec<f64>>>()
        })
        .collect()
}

fn stage_analyze(ctx: &Ctx) -> anyhow::Result<StageOutput> {
    let (nin, groups) = read_norms(ctx)?;
    let cfg = ctx.cfg.analysis;
    let mut results = Vec::new();
    for i in 0..groups.len() {
        for j in i + 1..groups.len() {
            let (name_a, a) = &groups[i];
            let (name_b, b) = &groups[j];
            let mut res = PairwiseResult {
                model_a: name_a.clone(),
                model_b: name_b.clone(),
                n_effective: None,
                statistic: None,
                p_value: None,
                method: None,
                error: None,
            };
            match pairwise(a, b, &cfg) {
                Ok(t) => {
                    res.n_effective = Some(t.n_effective);
                    res.statistic = Some(t.statistic);
                    res.p_value = Some(t.p_value);
                    res.method = Some(t.method);
                }
                Err(e) => res.error = Some(e),
            }
            results.push(res);
        }
    }
    let friedman = (groups.len() >= 3).then(|| {
        let blocks = friedman_blocks(&groups);
        let mut res = FriedmanResult {
            models: groups.iter().map(|(n, _)| n.clone()).collect(),
            n_blocks: blocks.len(),
            chi_square: None,
            p_value: None,
            error: None,
        };
        match friedman_test(&blocks) {
            Ok(t) => {
                res.chi_square = Some(t.statistic);
                res.p_value = Some(t.p_value);
            }
            Err(e) => res.error = Some(e.to_string()),
        }
        res
    });
    write_json(
        &ctx.out.join(STATS_FILE),
        &StatsReport {
            analysis: cfg,
            pairwise: results,
            friedman,
        },
    )?;

    let names: Vec<&str> = groups.iter().map(|(n, _)| n.as_str()).collect();
    let mut w = csv::Writer::from_writer(create(&ctx.out.join(AGREEMENT_FILE))?);
    w.write_record(std::iter::once("model").chain(names.iter().copied()))?;
    for (name, a) in &groups {
        let mut row = vec![name.clone()];
        row.extend(groups.iter().map(|(_, b)| agreement_count(a, b).to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(create(&ctx.out.join(DISTRIBUTION_FILE))?);
    let mut header = vec!["model"];
    header.extend(LikertLevel::ALL.iter().map(|l| l.as_str()));
    header.extend(["no_answer", "total"]);
    w.write_record(&header)?;
    for (name, recs) in &groups {
        let d = distribution_summary(recs);
        let mut row = vec![name.clone()];
        row.extend(d.levels.iter().map(usize::to_string));
        row.push(d.no_answer.to_string());
        row.push(d.total().to_string());
        w.write_record(&row)?;
    }
    w.flush()?;

    Ok(StageOutput {
        input_digest: FieldHasher::new()
            .field("analyze")
            .field(file_digest(&nin)?)
            .field(json_digest(&cfg))
            .finish_hex(),
        outputs: vec![STATS_FILE.into(), AGREEMENT_FILE.into(), DISTRIBUTION_FILE.into()],
    })
}

/// File-name-safe form of a model name.
pub fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

fn stage_report(ctx: &Ctx) -> anyhow::Result<StageOutput> {
    let (nin, groups) = read_norms(ctx)?;
    let catalog = load_catalog_ctx(ctx)?;
    let palette = Palette::default();
    let targets = &ctx.cfg.report;
    let mut outputs = Vec::new();
    let mut emit = |rel: String, svg: String| -> anyhow::Result<()> {
        let mut w = create(&ctx.out.join(&rel))?;
        w.write_all(svg.as_bytes())?;
        w.flush()?;
        outputs.push(rel);
        Ok(())
    };

    for &s in &targets.senders {
        if s >= catalog.senders.len() {
            bail!("report sender index {s} outside the {} catalog senders", catalog.senders.len());
        }
        let mut matrices = HashMap::new();
        for (name, recs) in &groups {
            let m = build_norm_matrix(&catalog, name, s, recs)?;
            emit(
                format!("{FIGURES_DIR}/heatmap_{}_s{s}.svg", file_stem(name)),
                render_norm_heatmap(&m, &palette)?,
            )?;
            matrices.insert(name.as_str(), m);
        }
        for (k, quad) in targets.comparisons.iter().enumerate() {
            let four = quad
                .iter()
                .map(|n| {
                    matrices
                        .get(n.as_str())
                        .cloned()
                        .with_context(|| format!("no norms for model {n:?}"))
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            emit(
                format!("{FIGURES_DIR}/comparison_{k}_s{s}.svg"),
                render_comparison_heatmap(&four, &palette)?,
            )?;
        }
    }
    if targets.distribution {
        let summaries: Vec<(String, OutcomeCounts)> = groups
            .iter()
            .map(|(n, recs)| (n.clone(), distribution_summary(recs)))
            .collect();
        emit(
            format!("{FIGURES_DIR}/distribution.svg"),
            render_distribution_chart(&summaries, &palette)?,
        )?;
    }
    Ok(StageOutput {
        input_digest: FieldHasher::new()
            .field("report")
            .field(file_digest(&nin)?)
            .field(file_digest(&ctx.cfg.catalog_path)?)
            .field(json_digest(targets))
            .finish_hex(),
        outputs,
    })
}

/// Number of records per status, for log lines and summaries.
pub fn status_counts(records: &[NormRecord]) -> BTreeMap<NormStatus, usize> {
    let mut out = BTreeMap::new();
    for r in records {
        *out.entry(r.status).or_default() += 1;
    }
    out
}
