//! The five-point acceptability scale shared by prompting and parsing.

use std::fmt;

use serde::{Deserialize, Serialize};

/// One level of the acceptability scale, coded 1..=5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikertLevel {
    StronglyUnacceptable = 1,
    SomewhatUnacceptable = 2,
    Neutral = 3,
    SomewhatAcceptable = 4,
    StronglyAcceptable = 5,
}

impl LikertLevel {
    pub const ALL: [LikertLevel; 5] = [
        LikertLevel::StronglyUnacceptable,
        LikertLevel::SomewhatUnacceptable,
        LikertLevel::Neutral,
        LikertLevel::SomewhatAcceptable,
        LikertLevel::StronglyAcceptable,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1..=5 => Some(Self::ALL[usize::from(code) - 1]),
            _ => None,
        }
    }

    /// Zero-based position, handy for indexing per-level arrays.
    pub fn index(self) -> usize {
        usize::from(self.code()) - 1
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LikertLevel::StronglyUnacceptable => "strongly_unacceptable",
            LikertLevel::SomewhatUnacceptable => "somewhat_unacceptable",
            LikertLevel::Neutral => "neutral",
            LikertLevel::SomewhatAcceptable => "somewhat_acceptable",
            LikertLevel::StronglyAcceptable => "strongly_acceptable",
        }
    }

    pub fn parse_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.as_str() == name)
    }
}

impl fmt::Display for LikertLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ScaleError {
    #[error("scale needs exactly 5 levels, got {0}")]
    WrongLength(usize),
    #[error("scale phrase {0:?} is not lowercase")]
    NotLowercase(String),
    #[error("scale phrase {0:?} is duplicated")]
    Duplicate(String),
    #[error("scale phrase may not be empty")]
    Empty,
}

/// The phrases presented to the model, ordered from code 1 to code 5.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LikertScale {
    phrases: [String; 5],
}

impl Default for LikertScale {
    fn default() -> Self {
        Self {
            phrases: [
                "strongly unacceptable".into(),
                "somewhat unacceptable".into(),
                "neutral".into(),
                "somewhat acceptable".into(),
                "strongly acceptable".into(),
            ],
        }
    }
}

impl LikertScale {
    pub fn new(phrases: Vec<String>) -> Result<Self, ScaleError> {
        let n = phrases.len();
        let phrases: [String; 5] = phrases
            .try_into()
            .map_err(|_| ScaleError::WrongLength(n))?;
        for (i, p) in phrases.iter().enumerate() {
            if p.trim().is_empty() {
                return Err(ScaleError::Empty);
            }
            if p.to_lowercase() != *p {
                return Err(ScaleError::NotLowercase(p.clone()));
            }
            if phrases[..i].contains(p) {
                return Err(ScaleError::Duplicate(p.clone()));
            }
        }
        Ok(Self { phrases })
    }

    pub fn phrase(&self, level: LikertLevel) -> &str {
        &self.phrases[level.index()]
    }

    pub fn levels(&self) -> impl Iterator<Item = (LikertLevel, &str)> {
        LikertLevel::ALL
            .into_iter()
            .map(move |l| (l, self.phrases[l.index()].as_str()))
    }

    /// `[strongly unacceptable, somewhat unacceptable, ...]`
    pub fn render_list(&self) -> String {
        format!("[{}]", self.phrases.join(", "))
    }
}
