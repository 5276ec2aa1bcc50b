//! Fixture loading and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use cinorms::cleanup::{InvalidCategory, Verdict};
use cinorms::LikertLevel;

pub fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn data_path(name: &str) -> PathBuf {
    crate_dir().join("data").join(name)
}

#[derive(Debug, serde::Deserialize)]
pub struct ParserCase {
    pub group: String,
    pub text: String,
    pub expected: String,
}

/// Expected outcome of a fixture: a level, or an invalid category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expected {
    Level(LikertLevel),
    Invalid(InvalidCategory),
}

impl ParserCase {
    pub fn expected(&self) -> Expected {
        match self.expected.strip_prefix("invalid:") {
            Some(cat) => Expected::Invalid(InvalidCategory::parse_name(cat).expect("known category")),
            None => Expected::Level(LikertLevel::parse_name(&self.expected).expect("known level")),
        }
    }

    pub fn matches(&self, verdict: &Verdict) -> bool {
        match (self.expected(), verdict) {
            (Expected::Level(l), Verdict::Level { level, .. }) => l == *level,
            (Expected::Invalid(c), Verdict::Invalid(got)) => c == *got,
            _ => false,
        }
    }
}

pub fn parser_cases() -> Vec<ParserCase> {
    let text = std::fs::read_to_string(crate_dir().join("tests/fixtures/parser_cases.jsonl")).unwrap();
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Two-sided signed-rank p by listing all 2^n sign patterns of the non-zero
/// differences' averaged ranks. Returns (W, p).
pub fn wilcoxon_enumeration(diffs: &[f64]) -> (f64, f64) {
    let nz: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    let n = nz.len();
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let ranks: Vec<f64> = abs
        .iter()
        .map(|a| {
            let below = abs.iter().filter(|b| *b < a).count() as f64;
            let equal = abs.iter().filter(|b| *b == a).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let total: f64 = ranks.iter().sum();
    let plus: f64 = nz.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let w = plus.min(total - plus);
    let mut extreme = 0u64;
    for mask in 0u64..(1u64 << n) {
        let p: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if p.min(total - p) <= w + 1e-9 {
            extreme += 1;
        }
    }
    (w, extreme as f64 / (1u64 << n) as f64)
}

/// P(X >= k) for X ~ Binomial(n, p), summed term by term.
pub fn binomial_upper_tail(n: u32, p: f64, k: u32) -> f64 {
    let choose = |n: u32, r: u32| -> f64 { (0..r).fold(1.0, |acc, i| acc * f64::from(n - i) / f64::from(i + 1)) };
    (k..=n)
        .map(|r| choose(n, r) * p.powi(r as i32) * (1.0 - p).powi((n - r) as i32))
        .sum()
}

/// Probability that `n` independent uniform draws over `levels` categories
/// have a unique mode reaching `threshold * n`, by enumerating every count
/// vector.
pub fn uniform_majority_probability(n: u32, levels: u32, threshold: f64) -> f64 {
    fn compositions(n: u32, parts: u32) -> Vec<Vec<u32>> {
        if parts == 1 {
            return vec![vec![n]];
        }
        (0..=n)
            .flat_map(|first| {
                compositions(n - first, parts - 1).into_iter().map(move |mut rest| {
                    rest.insert(0, first);
                    rest
                })
            })
            .collect()
    }
    let factorial = |k: u32| -> f64 { (1..=k).map(f64::from).product() };
    let mut total = 0.0;
    for counts in compositions(n, levels) {
        let max = *counts.iter().max().unwrap();
        let unique = counts.iter().filter(|c| **c == max).count() == 1;
        if unique && f64::from(max) / f64::from(n) >= threshold {
            let ways = factorial(n) / counts.iter().map(|c| factorial(*c)).product::<f64>();
            total += ways / f64::from(levels).powi(n as i32);
        }
    }
    total
}

/// Four mock models over a shipped catalog, writing to `out_dir`.
pub fn mock_config(
    catalog: &str,
    out_dir: &std::path::Path,
    variant_ids: Option<Vec<u32>>,
    seed: u64,
) -> cinorms::pipeline::RunConfig {
    let model = |name: &str, template: &str, consistency: f64, invalid: f64, verbose: bool| {
        serde_json::json!({
            "name": name,
            "chat_template_kind": template,
            "variant_ids": variant_ids,
            "backend": {"kind": "mock", "profile": {
                "consistency": consistency,
                "invalid_rate": invalid,
                "verbosity": if verbose { "verbose" } else { "bare" }
            }}
        })
    };
    let text = serde_json::json!({
        "catalog_path": data_path(catalog),
        "variants_path": data_path("variants.json"),
        "seed": seed,
        "run_opts": {"output_dir": out_dir, "max_in_flight": 32},
        "report": {"senders": [0, 1], "comparisons": [["m-a", "m-b", "m-c", "m-d"]]},
        "models": [
            model("m-a", "inst_wrap", 0.9, 0.05, false),
            model("m-b", "role_tags", 0.7, 0.1, true),
            model("m-c", "plain", 0.5, 0.0, false),
            model("m-d", "inst_wrap", 1.0, 0.2, true),
        ]
    })
    .to_string();
    cinorms::pipeline::RunConfig::from_json(&text, out_dir).unwrap()
}

/// Query a mock profile with every variant for the first `n_vignettes` IoT
/// vignettes and return the assessed records and parsed rows.
pub async fn run_mock_profile(
    profile: cinorms::inference::MockProfile,
    n_vignettes: usize,
) -> (Vec<cinorms::NormRecord>, Vec<cinorms::cleanup::VerdictRow>) {
    use cinorms::inference::{dispatch, BackendSpec, MockBackend, ModelSpec, PromptItem, RunOptions};
    use cinorms::prompting::{apply_chat_template, build_prompt, load_variants};

    let catalog = cinorms::catalog::load_catalog(&data_path("iot.json")).unwrap();
    let variants = load_variants(&data_path("variants.json")).unwrap();
    let scale = cinorms::LikertScale::default();
    let vignettes: Vec<_> = cinorms::catalog::generate_vignettes(&catalog)
        .into_iter()
        .take(n_vignettes)
        .collect();
    let spec = ModelSpec {
        name: "mock".into(),
        capacity_label: String::new(),
        optimization_tags: Default::default(),
        chat_template_kind: cinorms::ChatTemplateKind::Plain,
        backend: BackendSpec::Mock { profile: profile.clone() },
        sampling: Default::default(),
        variant_ids: None,
    };
    let prompts: Vec<PromptItem> = vignettes
        .iter()
        .flat_map(|v| {
            variants.iter().map(|var| PromptItem {
                vignette_id: v.id.clone(),
                variant_id: var.id,
                wire_text: apply_chat_template(&build_prompt(v, var, &scale), spec.chat_template_kind),
            })
        })
        .collect();
    let backend = MockBackend::new(profile).unwrap();
    let opts = RunOptions {
        max_in_flight: 64,
        ..Default::default()
    };
    let out = dispatch(&prompts, &spec, &backend, None, &opts).await.unwrap();
    let (rows, _) = cinorms::cleanup::clean_run(&out.responses, &scale, cinorms::ParserRules::shared_default());
    let policy = cinorms::AssessmentPolicy::default_for(variants.len());
    let records = cinorms::assessment::assess_rows(&rows, |_| policy).unwrap();
    (records, rows)
}

pub fn mock_profile(seed: u64, consistency: f64, invalid_rate: f64) -> cinorms::inference::MockProfile {
    cinorms::inference::MockProfile {
        seed,
        consistency,
        invalid_rate,
        bias: [0.2; 5],
        verbosity: cinorms::inference::Verbosity::Bare,
    }
}
