use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use cinorms::catalog::{export_vignettes, generate_vignettes, load_catalog};
use cinorms::pipeline::{run_pipeline, ConfigOverrides, PipelineError, RunConfig, Stage};
use cinorms::MajorityKind;

#[derive(Parser)]
#[command(name = "cinorms", version, about = "Audit the privacy norms encoded in language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Expand the catalog into vignettes.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Catalog to expand without a config file; writes to --out.
        #[arg(long, conflicts_with = "config")]
        catalog: Option<PathBuf>,
    },
    /// Render prompts and query every configured model.
    Run(Common),
    /// Parse raw responses into verdicts.
    Clean(Common),
    /// Aggregate verdicts into encoded norms.
    Assess(Common),
    /// Pairwise and omnibus tests, agreement and distribution tables.
    Analyze(Common),
    /// Render SVG figures.
    Report(Common),
    /// Run a list of stages in order.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Comma-separated stages, or `all`.
        #[arg(long, default_value = "all")]
        stages: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Simple,
    Super,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Only use these models (comma-separated names).
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
    #[arg(long, value_enum)]
    policy: Option<PolicyArg>,
    #[arg(long)]
    min_valid: Option<usize>,
    /// Query every model with these prompt variants (comma-separated ids).
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<u32>>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Response cache file.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Run seed; mock model seeds are derived from it.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, PipelineError> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| PipelineError::ConfigInvalid("--config is required".into()))?;
        let mut cfg = RunConfig::load(path)?;
        cfg.apply(&ConfigOverrides {
            models: self.models.clone(),
            majority: self.policy.map(|p| match p {
                PolicyArg::Simple => MajorityKind::Simple,
                PolicyArg::Super => MajorityKind::Super,
            }),
            min_valid: self.min_valid,
            variant_ids: self.variants.clone(),
            output_dir: self.out.clone(),
            cache_path: self.cache.clone(),
            seed: self.seed,
        })?;
        Ok(cfg)
    }
}

fn exit_code(e: &PipelineError) -> u8 {
    match e {
        PipelineError::StageFailure { .. } => 1,
        PipelineError::ConfigInvalid(_) => 2,
        PipelineError::MissingApiKey { .. } => 3,
    }
}

async fn run_stages(common: &Common, stages: &[Stage]) -> Result<(), PipelineError> {
    let cfg = common.load()?;
    let out = cfg.run_opts.output_dir.clone();
    let summary = run_pipeline(cfg, stages).await?;
    for rec in &summary.manifest.stages {
        if summary.stages_run.contains(&rec.stage) {
            println!("{:<9} {}", rec.stage.as_str(), &rec.output_digest[..16]);
        }
    }
    if summary.stages_run.contains(&Stage::Dispatch) {
        println!(
            "backend calls: {}, cache hits: {}",
            summary.backend_calls, summary.cache_hits
        );
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

fn generate_standalone(catalog: &std::path::Path, out: Option<&PathBuf>) -> anyhow::Result<()> {
    let catalog = load_catalog(catalog).with_context(|| format!("loading {}", catalog.display()))?;
    let vignettes = generate_vignettes(&catalog);
    let dir = out.cloned().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(cinorms::pipeline::VIGNETTES_FILE);
    export_vignettes(&vignettes, &path)?;
    println!("{} vignettes written to {}", vignettes.len(), path.display());
    Ok(())
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();

    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate {
            common,
            catalog: Some(path),
        } => {
            return match generate_standalone(path, common.out.as_ref()) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(1)
                }
            };
        }
        Command::Generate { common, catalog: None } => run_stages(common, &[Stage::Generate]).await,
        Command::Run(c) => run_stages(c, &[Stage::Prompt, Stage::Dispatch]).await,
        Command::Clean(c) => run_stages(c, &[Stage::Clean]).await,
        Command::Assess(c) => run_stages(c, &[Stage::Assess]).await,
        Command::Analyze(c) => run_stages(c, &[Stage::Analyze]).await,
        Command::Report(c) => run_stages(c, &[Stage::Report]).await,
        Command::Pipeline { common, stages } => match Stage::parse_list(stages) {
            Ok(list) => run_stages(common, &list).await,
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
