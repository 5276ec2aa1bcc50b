//! Extraction of Likert verdicts from free-text model responses.
//!
//! Parsing works on a normalized copy of the response (lowercased, whitespace
//! collapsed, surrounding punctuation stripped). A scale phrase that directly
//! follows an answer cue such as `the answer is:` wins outright. Otherwise the
//! distinct scale phrases present in the text decide: one phrase gives a level,
//! several give [`InvalidCategory::AmbiguousMultiple`], none falls through to
//! keyword-based invalid classification.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::inference::RawResponse;
use crate::scale::{LikertLevel, LikertScale};

const DEFAULT_RULES: &str = include_str!("../data/parser_rules.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidCategory {
    RequestForContext,
    LimitationAcknowledgment,
    Nonsensical,
    AmbiguousMultiple,
    Empty,
}

impl InvalidCategory {
    pub const ALL: [InvalidCategory; 5] = [
        InvalidCategory::RequestForContext,
        InvalidCategory::LimitationAcknowledgment,
        InvalidCategory::Nonsensical,
        InvalidCategory::AmbiguousMultiple,
        InvalidCategory::Empty,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InvalidCategory::RequestForContext => "request_for_context",
            InvalidCategory::LimitationAcknowledgment => "limitation_acknowledgment",
            InvalidCategory::Nonsensical => "nonsensical",
            InvalidCategory::AmbiguousMultiple => "ambiguous_multiple",
            InvalidCategory::Empty => "empty",
        }
    }

    pub fn parse_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

impl fmt::Display for InvalidCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Byte range of the matched phrase within the normalized response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.start, self.end)
    }
}

impl Span {
    pub fn parse(s: &str) -> Option<Self> {
        let (a, b) = s.split_once(':')?;
        Some(Span {
            start: a.parse().ok()?,
            end: b.parse().ok()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Level {
        level: LikertLevel,
        span: Option<Span>,
    },
    Invalid(InvalidCategory),
}

impl Verdict {
    pub fn level(&self) -> Option<LikertLevel> {
        match self {
            Verdict::Level { level, .. } => Some(*level),
            Verdict::Invalid(_) => None,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.level().is_some()
    }

    /// 1..=5, or 0 for invalid.
    pub fn code(&self) -> u8 {
        self.level().map_or(0, LikertLevel::code)
    }
}

/// Cue patterns and invalid-category keyword lists, all lowercase.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParserRules {
    pub cues: Vec<String>,
    pub request_for_context: Vec<String>,
    pub limitation_acknowledgment: Vec<String>,
}

impl Default for ParserRules {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_RULES).expect("bundled parser rules are valid")
    }
}

impl ParserRules {
    pub fn load(path: &Path) -> Result<Self, CleanupError> {
        let mut rules: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        for list in [
            &mut rules.cues,
            &mut rules.request_for_context,
            &mut rules.limitation_acknowledgment,
        ] {
            for entry in list.iter_mut() {
                *entry = entry.to_lowercase();
            }
            list.retain(|e| !e.trim().is_empty());
        }
        Ok(rules)
    }

    pub fn shared_default() -> &'static ParserRules {
        static RULES: OnceLock<ParserRules> = OnceLock::new();
        RULES.get_or_init(ParserRules::default)
    }

    /// Classify a response that contains no scale phrase.
    pub fn classify_invalid(&self, raw_text: &str) -> InvalidCategory {
        let text = normalize(raw_text);
        if self.request_for_context.iter().any(|k| text.contains(k.as_str())) {
            InvalidCategory::RequestForContext
        } else if self
            .limitation_acknowledgment
            .iter()
            .any(|k| text.contains(k.as_str()))
        {
            InvalidCategory::LimitationAcknowledgment
        } else if text.is_empty() {
            InvalidCategory::Empty
        } else {
            InvalidCategory::Nonsensical
        }
    }

    pub fn parse(&self, raw_text: &str, scale: &LikertScale) -> Verdict {
        let text = normalize(raw_text);
        let matches = find_scale_phrases(&text, scale);

        let mut cued: Vec<&PhraseMatch> = Vec::new();
        for cue in &self.cues {
            for (pos, _) in text.match_indices(cue.as_str()) {
                let after = skip_filler(&text, pos + cue.len());
                if let Some(m) = matches.iter().find(|m| m.start == after) {
                    cued.push(m);
                }
            }
        }
        if let Some(first) = cued.iter().min_by_key(|m| m.start) {
            if cued.iter().all(|m| m.level == first.level) {
                return Verdict::Level {
                    level: first.level,
                    span: Some(first.span()),
                };
            }
        }

        let mut distinct: Vec<LikertLevel> = matches.iter().map(|m| m.level).collect();
        distinct.sort();
        distinct.dedup();
        match distinct.len() {
            0 => Verdict::Invalid(self.classify_invalid(&text)),
            1 => Verdict::Level {
                level: matches[0].level,
                span: Some(matches[0].span()),
            },
            _ => Verdict::Invalid(InvalidCategory::AmbiguousMultiple),
        }
    }
}

/// Lowercase, collapse whitespace runs to one space, strip leading and
/// trailing punctuation.
pub fn normalize(text: &str) -> String {
    let lowered = text.to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_string()
}

pub fn parse_response(raw_text: &str, scale: &LikertScale) -> Verdict {
    ParserRules::shared_default().parse(raw_text, scale)
}

pub fn classify_invalid(raw_text: &str) -> InvalidCategory {
    ParserRules::shared_default().classify_invalid(raw_text)
}

#[derive(Debug)]
struct PhraseMatch {
    level: LikertLevel,
    start: usize,
    end: usize,
}

impl PhraseMatch {
    fn span(&self) -> Span {
        Span {
            start: self.start,
            end: self.end,
        }
    }
}

fn is_word_char(c: Option<char>) -> bool {
    c.is_some_and(char::is_alphanumeric)
}

/// Left-to-right scan; at each position the longest scale phrase wins and the
/// scan resumes after it. Phrases must sit on word boundaries.
fn find_scale_phrases(text: &str, scale: &LikertScale) -> Vec<PhraseMatch> {
    let mut phrases: Vec<(LikertLevel, &str)> = scale.levels().collect();
    phrases.sort_by_key(|(_, p)| std::cmp::Reverse(p.len()));

    let mut out = Vec::new();
    let mut pos = 0;
    while pos < text.len() {
        let before = text[..pos].chars().next_back();
        let hit = if is_word_char(before) {
            None
        } else {
            phrases.iter().find(|(_, p)| {
                text[pos..].starts_with(p) && !is_word_char(text[pos + p.len()..].chars().next())
            })
        };
        match hit {
            Some((level, p)) => {
                out.push(PhraseMatch {
                    level: *level,
                    start: pos,
                    end: pos + p.len(),
                });
                pos += p.len();
            }
            None => {
                pos += text[pos..].chars().next().map_or(1, char::len_utf8);
            }
        }
    }
    out
}

/// Skip whitespace, quotes and markup between an answer cue and the phrase.
fn skip_filler(text: &str, from: usize) -> usize {
    let rest = &text[from..];
    let trimmed = rest.trim_start_matches(|c: char| {
        c.is_whitespace() || matches!(c, ':' | '"' | '\'' | '*' | '`' | '[' | '(' | '-' | '“' | '‘')
    });
    from + (rest.len() - trimmed.len())
}

#[derive(Debug, thiserror::Error)]
pub enum CleanupError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row}: {message}")]
    BadRow { row: usize, message: String },
}

/// One parsed response, keyed like the raw response it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerdictRow {
    pub model: String,
    pub vignette_id: String,
    pub variant_id: u32,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanStats {
    pub total: usize,
    pub invalid_count: usize,
    pub invalid_rate: f64,
    pub per_category: BTreeMap<InvalidCategory, usize>,
}

impl CleanStats {
    pub fn from_rows(rows: &[VerdictRow]) -> Self {
        let mut per_category: BTreeMap<InvalidCategory, usize> =
            InvalidCategory::ALL.iter().map(|c| (*c, 0)).collect();
        for row in rows {
            if let Verdict::Invalid(c) = row.verdict {
                *per_category.entry(c).or_default() += 1;
            }
        }
        let invalid_count = per_category.values().sum();
        let total = rows.len();
        Self {
            total,
            invalid_count,
            invalid_rate: if total == 0 {
                0.0
            } else {
                invalid_count as f64 / total as f64
            },
            per_category,
        }
    }
}

pub fn clean_run(
    responses: &[RawResponse],
    scale: &LikertScale,
    rules: &ParserRules,
) -> (Vec<VerdictRow>, CleanStats) {
    let rows: Vec<VerdictRow> = responses
        .iter()
        .map(|r| VerdictRow {
            model: r.model_name.clone(),
            vignette_id: r.vignette_id.clone(),
            variant_id: r.variant_id,
            verdict: rules.parse(&r.raw_text, scale),
        })
        .collect();
    let stats = CleanStats::from_rows(&rows);
    (rows, stats)
}

#[derive(Debug, Serialize, Deserialize)]
struct VerdictCsvRow {
    model: String,
    vignette_id: String,
    variant_id: u32,
    verdict_code: u8,
    invalid_category: String,
    matched_span: String,
}

pub fn write_verdicts<W: io::Write>(rows: &[VerdictRow], out: W) -> Result<(), CleanupError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "model",
        "vignette_id",
        "variant_id",
        "verdict_code",
        "invalid_category",
        "matched_span",
    ])?;
    for row in rows {
        let (category, span) = match row.verdict {
            Verdict::Level { span, .. } => (String::new(), span.map(|s| s.to_string())),
            Verdict::Invalid(c) => (c.to_string(), None),
        };
        w.write_record([
            row.model.as_str(),
            row.vignette_id.as_str(),
            &row.variant_id.to_string(),
            &row.verdict.code().to_string(),
            &category,
            &span.unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_verdicts<R: io::Read>(input: R) -> Result<Vec<VerdictRow>, CleanupError> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (i, rec) in r.deserialize::<VerdictCsvRow>().enumerate() {
        let rec = rec?;
        let bad = |message: String| CleanupError::BadRow { row: i + 1, message };
        let verdict = if rec.verdict_code == 0 {
            let category = InvalidCategory::parse_name(&rec.invalid_category)
                .ok_or_else(|| bad(format!("unknown category {:?}", rec.invalid_category)))?;
            Verdict::Invalid(category)
        } else {
            let level = LikertLevel::from_code(rec.verdict_code)
                .ok_or_else(|| bad(format!("verdict code {} out of range", rec.verdict_code)))?;
            let span = if rec.matched_span.is_empty() {
                None
            } else {
                Some(
                    Span::parse(&rec.matched_span)
                        .ok_or_else(|| bad(format!("bad span {:?}", rec.matched_span)))?,
                )
            };
            Verdict::Level { level, span }
        };
        out.push(VerdictRow {
            model: rec.model,
            vignette_id: rec.vignette_id,
            variant_id: rec.variant_id,
            verdict,
        });
    }
    Ok(out)
}

/// Manual corrections: `(model, vignette_id, variant_id) -> verdict code`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Overrides {
    entries: HashMap<(String, String, u32), u8>,
}

#[derive(Debug, Deserialize)]
struct OverrideRow {
    model: String,
    vignette_id: String,
    variant_id: u32,
    verdict_code: u8,
}

impl Overrides {
    pub fn read<R: io::Read>(input: R) -> Result<Self, CleanupError> {
        let mut r = csv::Reader::from_reader(input);
        let mut entries = HashMap::new();
        for (i, rec) in r.deserialize::<OverrideRow>().enumerate() {
            let rec = rec?;
            if rec.verdict_code > 5 {
                return Err(CleanupError::BadRow {
                    row: i + 1,
                    message: format!("verdict code {} out of range", rec.verdict_code),
                });
            }
            entries.insert((rec.model, rec.vignette_id, rec.variant_id), rec.verdict_code);
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, CleanupError> {
        Self::read(io::BufReader::new(fs::File::open(path)?))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Returns the number of rows changed. A code of 0 marks the response
    /// invalid, keeping the parsed category if it already was.
    pub fn apply(&self, rows: &mut [VerdictRow]) -> usize {
        let mut applied = 0;
        for row in rows.iter_mut() {
            let key = (row.model.clone(), row.vignette_id.clone(), row.variant_id);
            let Some(&code) = self.entries.get(&key) else {
                continue;
            };
            row.verdict = match (LikertLevel::from_code(code), row.verdict) {
                (Some(level), _) => Verdict::Level { level, span: None },
                (None, Verdict::Invalid(c)) => Verdict::Invalid(c),
                (None, Verdict::Level { .. }) => Verdict::Invalid(InvalidCategory::Nonsensical),
            };
            applied += 1;
        }
        applied
    }
}
