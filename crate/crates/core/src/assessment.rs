//! Multi-prompt norm assessment.
//!
//! Each vignette is asked through several prompt variants. The variant
//! verdicts are folded into one [`NormRecord`]: invalid responses are dropped,
//! too few valid responses make the record `Insufficient`, and otherwise the
//! modal level becomes the encoded norm when it is unique and its share of the
//! valid responses reaches the policy threshold. Everything else is `Held`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io;

use serde::{Deserialize, Serialize};

use crate::catalog::{compare_vignette_ids, ContextCatalog, FlowIndex};
use crate::cleanup::{Verdict, VerdictRow};
use crate::scale::LikertLevel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MajorityKind {
    /// At least 50% of valid responses.
    Simple,
    /// At least 67% of valid responses.
    Super,
    Custom(f64),
}

impl MajorityKind {
    pub fn threshold(self) -> f64 {
        match self {
            MajorityKind::Simple => 0.50,
            MajorityKind::Super => 0.67,
            MajorityKind::Custom(t) => t,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AssessmentError {
    #[error("no verdicts to aggregate")]
    NoVerdicts,
    #[error("majority threshold {0} outside (0, 1]")]
    BadThreshold(f64),
    #[error("min_valid {min_valid} must be between 1 and the {variants} variants queried")]
    BadMinValid { min_valid: usize, variants: usize },
    #[error("record {vignette_id} does not fit the catalog axes: {reason}")]
    AxisMismatch { vignette_id: String, reason: String },
    #[error("two records for cell {0}")]
    DuplicateCell(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssessmentPolicy {
    pub majority: MajorityKind,
    pub min_valid: usize,
}

impl AssessmentPolicy {
    /// The mode must always be unique; a tie never yields a norm.
    pub const REQUIRE_UNIQUE_MODE: bool = true;

    pub fn simple(min_valid: usize) -> Self {
        Self {
            majority: MajorityKind::Simple,
            min_valid,
        }
    }

    pub fn super_majority(min_valid: usize) -> Self {
        Self {
            majority: MajorityKind::Super,
            min_valid,
        }
    }

    /// Simple majority with [`default_min_valid`] for `variants` prompts.
    pub fn default_for(variants: usize) -> Self {
        Self::simple(default_min_valid(variants))
    }

    pub fn threshold(&self) -> f64 {
        self.majority.threshold()
    }

    pub fn validate(&self, variants: usize) -> Result<(), AssessmentError> {
        let t = self.threshold();
        if !(t > 0.0 && t <= 1.0) {
            return Err(AssessmentError::BadThreshold(t));
        }
        if self.min_valid == 0 || self.min_valid > variants {
            return Err(AssessmentError::BadMinValid {
                min_valid: self.min_valid,
                variants,
            });
        }
        Ok(())
    }
}

/// All but one valid response for full variant sets; every response for
/// small (three-variant) sets.
pub fn default_min_valid(variants: usize) -> usize {
    if variants <= 3 {
        variants.max(1)
    } else {
        variants - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormStatus {
    Consistent,
    Held,
    Insufficient,
}

impl NormStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            NormStatus::Consistent => "consistent",
            NormStatus::Held => "held",
            NormStatus::Insufficient => "insufficient",
        }
    }

    pub fn parse_name(s: &str) -> Option<Self> {
        [Self::Consistent, Self::Held, Self::Insufficient]
            .into_iter()
            .find(|x| x.as_str() == s)
    }
}

impl fmt::Display for NormStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What a heatmap cell or distribution bar shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Level(LikertLevel),
    NoAnswer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormRecord {
    pub model_name: String,
    pub vignette_id: String,
    pub verdicts: BTreeMap<u32, Verdict>,
    pub valid_count: usize,
    /// Present whenever the mode over valid verdicts is unique.
    pub modal_level: Option<LikertLevel>,
    pub modal_count: usize,
    pub status: NormStatus,
    /// `modal_count / valid_count`; absent when nothing was valid.
    pub consistency_ratio: Option<f64>,
    pub variance: Option<f64>,
}

impl NormRecord {
    /// The encoded norm, if the record is consistent.
    pub fn norm(&self) -> Option<LikertLevel> {
        match self.status {
            NormStatus::Consistent => self.modal_level,
            _ => None,
        }
    }

    pub fn outcome(&self) -> Outcome {
        self.norm().map_or(Outcome::NoAnswer, Outcome::Level)
    }
}

pub fn aggregate_vignette(
    model_name: &str,
    vignette_id: &str,
    verdicts: &BTreeMap<u32, Verdict>,
    policy: &AssessmentPolicy,
) -> Result<NormRecord, AssessmentError> {
    if verdicts.is_empty() {
        return Err(AssessmentError::NoVerdicts);
    }
    let mut counts = [0usize; 5];
    for v in verdicts.values() {
        if let Some(level) = v.level() {
            counts[level.index()] += 1;
        }
    }
    let valid_count: usize = counts.iter().sum();
    let modal_count = counts.iter().copied().max().unwrap_or(0);
    let modes: Vec<LikertLevel> = LikertLevel::ALL
        .into_iter()
        .filter(|l| modal_count > 0 && counts[l.index()] == modal_count)
        .collect();
    let modal_level = match modes.as_slice() {
        [only] => Some(*only),
        _ => None,
    };
    let consistency_ratio = (valid_count > 0).then(|| modal_count as f64 / valid_count as f64);

    let status = if valid_count < policy.min_valid {
        NormStatus::Insufficient
    } else if modal_level.is_none() {
        NormStatus::Held
    } else if consistency_ratio.is_some_and(|r| r >= policy.threshold()) {
        NormStatus::Consistent
    } else {
        NormStatus::Held
    };

    Ok(NormRecord {
        model_name: model_name.to_string(),
        vignette_id: vignette_id.to_string(),
        verdicts: verdicts.clone(),
        valid_count,
        modal_level,
        modal_count,
        status,
        consistency_ratio,
        variance: response_variance(verdicts),
    })
}

/// Population variance of the 1..5 codes over valid verdicts; needs at least
/// two of them.
pub fn response_variance(verdicts: &BTreeMap<u32, Verdict>) -> Option<f64> {
    let codes: Vec<f64> = verdicts
        .values()
        .filter_map(|v| v.level())
        .map(|l| f64::from(l.code()))
        .collect();
    if codes.len() < 2 {
        return None;
    }
    let n = codes.len() as f64;
    let mean = codes.iter().sum::<f64>() / n;
    Some(codes.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n)
}

/// Group parsed rows by (model, vignette) and aggregate each group. Records
/// come out in first-seen model order, then vignette order.
pub fn assess_rows(
    rows: &[VerdictRow],
    policy_for: impl Fn(&str) -> AssessmentPolicy,
) -> Result<Vec<NormRecord>, AssessmentError> {
    let mut model_order: Vec<&str> = Vec::new();
    let mut groups: HashMap<(&str, &str), BTreeMap<u32, Verdict>> = HashMap::new();
    for row in rows {
        if !model_order.contains(&row.model.as_str()) {
            model_order.push(&row.model);
        }
        groups
            .entry((&row.model, &row.vignette_id))
            .or_default()
            .insert(row.variant_id, row.verdict);
    }
    let mut keys: Vec<(&str, &str)> = groups.keys().copied().collect();
    keys.sort_by(|a, b| {
        let ma = model_order.iter().position(|m| *m == a.0);
        let mb = model_order.iter().position(|m| *m == b.0);
        ma.cmp(&mb).then_with(|| compare_vignette_ids(a.1, b.1))
    });
    let mut policies: HashMap<&str, AssessmentPolicy> = HashMap::new();
    keys.into_iter()
        .map(|(model, vignette)| {
            let policy = *policies.entry(model).or_insert_with(|| policy_for(model));
            aggregate_vignette(model, vignette, &groups[&(model, vignette)], &policy)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatrixCell {
    pub status: Option<NormStatus>,
    pub level: Option<LikertLevel>,
}

impl MatrixCell {
    pub fn outcome(&self) -> Outcome {
        match (self.status, self.level) {
            (Some(NormStatus::Consistent), Some(level)) => Outcome::Level(level),
            _ => Outcome::NoAnswer,
        }
    }

    /// Grey in the heatmaps: held, insufficient or missing.
    pub fn is_grey(&self) -> bool {
        self.outcome() == Outcome::NoAnswer
    }
}

/// Norms of one model for one sender: rows are (recipient, transmission
/// principle) in catalog order, columns are attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormMatrix {
    pub dataset: String,
    pub model: String,
    pub sender: String,
    pub row_labels: Vec<(String, String)>,
    pub col_labels: Vec<String>,
    pub cells: Vec<Vec<MatrixCell>>,
}

/// Label used for the null transmission principle.
pub const NULL_TP_LABEL: &str = "(no condition)";

impl NormMatrix {
    pub fn rows(&self) -> usize {
        self.row_labels.len()
    }

    pub fn cols(&self) -> usize {
        self.col_labels.len()
    }

    pub fn same_axes(&self, other: &NormMatrix) -> bool {
        self.row_labels == other.row_labels && self.col_labels == other.col_labels
    }

    pub fn iter_cells(&self) -> impl Iterator<Item = &MatrixCell> {
        self.cells.iter().flatten()
    }
}

/// Lay out `records` of `model` for the sender at `sender_index`. Records for
/// other senders or models are skipped; records that do not fit the catalog
/// are an error.
pub fn build_norm_matrix(
    catalog: &ContextCatalog,
    model: &str,
    sender_index: usize,
    records: &[NormRecord],
) -> Result<NormMatrix, AssessmentError> {
    let sender = catalog
        .senders
        .get(sender_index)
        .ok_or_else(|| AssessmentError::AxisMismatch {
            vignette_id: String::new(),
            reason: format!("sender index {sender_index} out of range"),
        })?;
    let tps = catalog.tp_slot_values();
    let mut row_labels = Vec::with_capacity(catalog.recipients.len() * tps.len());
    for r in &catalog.recipients {
        for tp in &tps {
            row_labels.push((r.clone(), tp.unwrap_or(NULL_TP_LABEL).to_string()));
        }
    }
    let mut cells = vec![vec![MatrixCell::default(); catalog.attributes.len()]; row_labels.len()];

    for rec in records.iter().filter(|r| r.model_name == model) {
        let mismatch = |reason: &str| AssessmentError::AxisMismatch {
            vignette_id: rec.vignette_id.clone(),
            reason: reason.to_string(),
        };
        let (dataset, idx) =
            FlowIndex::parse_id(&rec.vignette_id).ok_or_else(|| mismatch("unparseable id"))?;
        if dataset != catalog.dataset_id {
            return Err(mismatch("dataset differs from catalog"));
        }
        if idx.sender >= catalog.senders.len()
            || idx.recipient >= catalog.recipients.len()
            || idx.attribute >= catalog.attributes.len()
        {
            return Err(mismatch("index outside catalog"));
        }
        let tp_slot = match idx.tp {
            Some(t) if t < catalog.transmission_principles.len() => t,
            None if catalog.include_null_tp => catalog.transmission_principles.len(),
            _ => return Err(mismatch("transmission principle outside catalog")),
        };
        if idx.sender != sender_index {
            continue;
        }
        let row = idx.recipient * tps.len() + tp_slot;
        let cell = &mut cells[row][idx.attribute];
        if cell.status.is_some() {
            return Err(AssessmentError::DuplicateCell(rec.vignette_id.clone()));
        }
        *cell = MatrixCell {
            status: Some(rec.status),
            level: rec.norm(),
        };
    }

    Ok(NormMatrix {
        dataset: catalog.dataset_id.clone(),
        model: model.to_string(),
        sender: sender.clone(),
        row_labels,
        col_labels: catalog.attributes.clone(),
        cells,
    })
}

fn fmt_opt_f64(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Summary CSV: one line per record, no per-variant detail.
pub fn write_norms_csv<W: io::Write>(records: &[NormRecord], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "model",
        "vignette_id",
        "status",
        "modal_level",
        "valid_count",
        "modal_count",
        "consistency_ratio",
        "variance",
    ])?;
    for r in records {
        w.write_record([
            r.model_name.as_str(),
            r.vignette_id.as_str(),
            r.status.as_str(),
            r.modal_level.map(LikertLevel::as_str).unwrap_or(""),
            &r.valid_count.to_string(),
            &r.modal_count.to_string(),
            &fmt_opt_f64(r.consistency_ratio),
            &fmt_opt_f64(r.variance),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Full-fidelity JSONL, one record per line, per-variant verdicts included.
pub fn write_norms_jsonl<W: io::Write>(records: &[NormRecord], mut out: W) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_norms_jsonl<R: io::BufRead>(input: R) -> io::Result<Vec<NormRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
