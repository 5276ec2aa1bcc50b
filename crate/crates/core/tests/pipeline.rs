mod common;

use std::fs;
use std::path::Path;

use cinorms::pipeline::{
    run_pipeline, ConfigOverrides, Manifest, PipelineError, RunConfig, Stage, MANIFEST_FILE, RESPONSES_FILE,
};

fn manifest_bytes(dir: &Path) -> Vec<u8> {
    fs::read(dir.join(MANIFEST_FILE)).unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn full_run_is_deterministic_and_resumable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let variants = Some(vec![0, 1, 2]);

    let first = run_pipeline(common::mock_config("coppa.json", a.path(), variants.clone(), 11), &Stage::ALL)
        .await
        .unwrap();
    assert_eq!(first.manifest.stages.len(), 7);
    assert_eq!(first.backend_calls, 4 * 1800 * 3);
    assert_eq!(first.cache_hits, 0);
    let stages: Vec<Stage> = first.manifest.stages.iter().map(|r| r.stage).collect();
    assert_eq!(stages, Stage::ALL);

    let second = run_pipeline(common::mock_config("coppa.json", b.path(), variants.clone(), 11), &Stage::ALL)
        .await
        .unwrap();
    assert_eq!(manifest_bytes(a.path()), manifest_bytes(b.path()));
    assert_eq!(second.backend_calls, first.backend_calls);

    let warm = run_pipeline(common::mock_config("coppa.json", a.path(), variants, 11), &Stage::ALL)
        .await
        .unwrap();
    assert_eq!(warm.backend_calls, 0);
    assert_eq!(warm.cache_hits, 4 * 1800 * 3);
    assert_eq!(manifest_bytes(a.path()), manifest_bytes(b.path()));

    // every artifact listed in the manifest exists, including the figures
    for rec in &warm.manifest.stages {
        assert!(!rec.outputs.is_empty(), "{:?}", rec.stage);
        for o in &rec.outputs {
            assert!(a.path().join(&o.path).is_file(), "{}", o.path);
        }
    }
    let report = warm.manifest.get(Stage::Report).unwrap();
    // 4 heatmaps and 1 comparison per sender, plus the distribution chart
    assert_eq!(report.outputs.len(), 2 * 5 + 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn stages_rerun_from_disk_alone() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::mock_config("coppa.json", dir.path(), Some(vec![3, 4, 5]), 3);
    let full = run_pipeline(cfg.clone(), &Stage::ALL).await.unwrap();

    // remove everything downstream of dispatch and rebuild it stage by stage
    for rec in &full.manifest.stages {
        if rec.stage > Stage::Dispatch {
            for o in &rec.outputs {
                fs::remove_file(dir.path().join(&o.path)).unwrap();
            }
        }
    }
    for stage in [Stage::Clean, Stage::Assess, Stage::Analyze, Stage::Report] {
        let s = run_pipeline(cfg.clone(), &[stage]).await.unwrap();
        assert_eq!(s.backend_calls, 0);
        assert_eq!(s.manifest.get(stage), full.manifest.get(stage), "{stage}");
    }
    let on_disk = Manifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(on_disk, full.manifest);
}

#[tokio::test(flavor = "multi_thread")]
async fn seed_changes_mock_answers() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let stages = [Stage::Generate, Stage::Prompt, Stage::Dispatch];
    run_pipeline(common::mock_config("coppa.json", a.path(), Some(vec![0]), 1), &stages)
        .await
        .unwrap();
    run_pipeline(common::mock_config("coppa.json", b.path(), Some(vec![0]), 2), &stages)
        .await
        .unwrap();
    assert_ne!(
        fs::read(a.path().join(RESPONSES_FILE)).unwrap(),
        fs::read(b.path().join(RESPONSES_FILE)).unwrap()
    );
}

#[tokio::test]
async fn missing_predecessor_is_a_stage_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::mock_config("coppa.json", dir.path(), None, 1);
    let err = run_pipeline(cfg, &[Stage::Clean]).await.unwrap_err();
    match err {
        PipelineError::StageFailure { stage, cause } => {
            assert_eq!(stage, Stage::Clean);
            assert!(format!("{cause:#}").contains("dispatch"), "{cause:#}");
        }
        other => panic!("unexpected {other}"),
    }
}

#[tokio::test]
async fn partial_artifacts_survive_a_failure() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::mock_config("coppa.json", dir.path(), Some(vec![0]), 1);
    cfg.report.senders = vec![99];
    let err = run_pipeline(cfg, &Stage::ALL).await.unwrap_err();
    assert!(matches!(err, PipelineError::StageFailure { stage: Stage::Report, .. }), "{err}");
    let m = Manifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.stages.len(), 6);
    assert!(dir.path().join("norms.jsonl").is_file());
}

fn invalid(cfg: RunConfig) -> String {
    let variants = cinorms::prompting::load_variants(&cfg.variants_path).unwrap();
    match cfg.validate(&variants.ids()) {
        Err(PipelineError::ConfigInvalid(msg)) => msg,
        other => panic!("expected ConfigInvalid, got {other:?}"),
    }
}

#[test]
fn config_validation() {
    let dir = tempfile::tempdir().unwrap();
    let base = common::mock_config("coppa.json", dir.path(), None, 1);

    let mut c = base.clone();
    c.models.clear();
    assert!(invalid(c).contains("at least one model"));

    let mut c = base.clone();
    c.models[1].name = c.models[0].name.clone();
    assert!(invalid(c).contains("duplicate"));

    let mut c = base.clone();
    c.models[0].variant_ids = Some(vec![0, 42]);
    assert!(invalid(c).contains("42"));

    let mut c = base.clone();
    c.report.comparisons = vec![vec!["m-a".into(), "m-b".into(), "m-c".into()]];
    assert!(invalid(c).contains("exactly 4"));

    let mut c = base.clone();
    c.catalog_path = dir.path().join("nope.json");
    assert!(invalid(c).contains("not found"));

    let mut c = base.clone();
    c.policy.min_valid = Some(12);
    assert!(invalid(c).contains("min_valid"));

    let mut c = base.clone();
    let err = c
        .apply(&ConfigOverrides {
            models: Some(vec!["ghost".into()]),
            ..Default::default()
        })
        .unwrap_err();
    assert!(matches!(err, PipelineError::ConfigInvalid(_)));

    let mut c = base;
    c.apply(&ConfigOverrides {
        models: Some(vec!["m-a".into(), "m-c".into()]),
        min_valid: Some(2),
        variant_ids: Some(vec![0, 1, 2]),
        ..Default::default()
    })
    .unwrap();
    assert_eq!(c.models.len(), 2);
    assert!(c.report.comparisons.is_empty());
    assert!(c.models.iter().all(|m| m.variant_ids == Some(vec![0, 1, 2])));
}

#[test]
fn relative_paths_resolve_against_config_dir() {
    let cfg = RunConfig::load(&common::crate_dir().join("configs/mock_coppa.json")).unwrap();
    assert!(cfg.catalog_path.is_file());
    assert!(cfg.variants_path.is_file());
    let variants = cinorms::prompting::load_variants(&cfg.variants_path).unwrap();
    cfg.validate(&variants.ids()).unwrap();
}

#[test]
fn stage_lists() {
    assert_eq!(Stage::parse_list("all").unwrap(), Stage::ALL);
    assert_eq!(
        Stage::parse_list("report,clean").unwrap(),
        [Stage::Clean, Stage::Report]
    );
    assert!(Stage::parse_list("clean,bogus").is_err());
}
