//! Deterministic stand-in for a language model.
//!
//! The mock draws one "shared" verdict per vignette and, with probability
//! `consistency`, answers every variant of that vignette with it; otherwise
//! each prompt draws its own verdict. Independently, each response is replaced
//! by a canned invalid reply with probability `invalid_rate`. All randomness is
//! derived from SHA-256 of the seed and the request, so output is stable across
//! runs and platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::digest::FieldHasher;
use crate::scale::{LikertLevel, LikertScale};

/// Canned replies that never contain a scale phrase (or contain all of them).
pub const INVALID_CORPUS: &[&str] = &[
    "Based on the information provided, it is difficult to determine the acceptability of the scenario without further context.",
    "As an AI language model, I cannot provide a personal opinion or additional text.",
    "s",
    "smoothly acceptable",
    "strictly acceptable",
    "",
    "I'm sorry, but I am unable to rate this scenario.",
    "[strongly unacceptable, somewhat unacceptable, neutral, somewhat acceptable, strongly acceptable]",
];

const FILLER: &[&str] = &[
    "The flow depends on how the recipient uses the data.",
    "Whether this is appropriate hinges on the expectations of the people involved.",
    "Devices that collect personal data should be transparent about where it goes.",
    "It is important to weigh the purpose of the transfer against the privacy of the owner.",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verbosity {
    #[default]
    Bare,
    Verbose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockProfile {
    #[serde(default)]
    pub seed: u64,
    pub consistency: f64,
    #[serde(default)]
    pub invalid_rate: f64,
    /// Weights over the five levels, code 1 first.
    #[serde(default = "uniform_bias")]
    pub bias: [f64; 5],
    #[serde(default)]
    pub verbosity: Verbosity,
}

fn uniform_bias() -> [f64; 5] {
    [0.2; 5]
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MockProfileError {
    #[error("{field} must lie in [0, 1], got {value}")]
    OutOfRange { field: &'static str, value: f64 },
    #[error("bias weights must be non-negative and sum to 1, got sum {0}")]
    BadBias(f64),
}

impl MockProfile {
    pub fn validate(&self) -> Result<(), MockProfileError> {
        for (field, value) in [
            ("consistency", self.consistency),
            ("invalid_rate", self.invalid_rate),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(MockProfileError::OutOfRange { field, value });
            }
        }
        let sum: f64 = self.bias.iter().sum();
        if self.bias.iter().any(|w| w.is_nan() || *w < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(MockProfileError::BadBias(sum));
        }
        Ok(())
    }

    fn draw_level(&self, rng: &mut ChaCha8Rng) -> LikertLevel {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, w) in self.bias.iter().enumerate() {
            acc += w;
            if u < acc {
                return LikertLevel::ALL[i];
            }
        }
        // rounding left u above the cumulative total; take the last weighted level
        let last = self.bias.iter().rposition(|w| *w > 0.0).unwrap_or(2);
        LikertLevel::ALL[last]
    }
}

fn rng_for(parts: &[&[u8]]) -> ChaCha8Rng {
    let mut h = FieldHasher::new();
    for p in parts {
        h = h.field(p);
    }
    ChaCha8Rng::from_seed(h.finish_bytes())
}

/// Mock answer for one prompt. `vignette_key` groups the variants of one
/// vignette; responses are a pure function of `(profile, vignette_key, prompt)`.
pub fn mock_complete(prompt: &str, vignette_key: &str, profile: &MockProfile) -> String {
    let seed = profile.seed.to_le_bytes();
    let mut shared = rng_for(&[b"vignette", &seed, vignette_key.as_bytes()]);
    let agree = shared.random::<f64>() < profile.consistency;
    let shared_level = profile.draw_level(&mut shared);

    let mut own = rng_for(&[b"prompt", &seed, vignette_key.as_bytes(), prompt.as_bytes()]);
    if own.random::<f64>() < profile.invalid_rate {
        return INVALID_CORPUS[own.random_range(0..INVALID_CORPUS.len())].to_string();
    }
    let level = if agree {
        shared_level
    } else {
        profile.draw_level(&mut own)
    };
    let phrase = LikertScale::default().phrase(level).to_string();
    match profile.verbosity {
        Verbosity::Bare => phrase,
        Verbosity::Verbose => {
            let filler = FILLER[own.random_range(0..FILLER.len())];
            format!("Based on the scenario provided, the answer is: {phrase}. {filler}")
        }
    }
}
