//! Charset codec and ground-truth normalization.

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, DEFAULT_CHARSET};
use crate::error::{Error, Result};

/// Lowercases `raw` and drops every character outside the charset.
///
/// May return an empty string; callers decide whether such a sample is usable.
pub fn normalize_text(raw: &str) -> String {
    raw.chars()
        .flat_map(char::to_lowercase)
        .filter(|c| DEFAULT_CHARSET.contains(*c))
        .collect()
}

/// Class index of `c` under `charset` (1-based; 0 is the blank).
pub fn class_index(charset: &str, c: char) -> Option<u32> {
    charset.chars().position(|x| x == c).map(|p| p as u32 + 1)
}

/// Maps class indices back to characters. Blank and out-of-range indices are skipped.
pub fn decode_indices(indices: &[u32], cfg: &ModelConfig) -> String {
    let chars: Vec<char> = cfg.charset.chars().collect();
    indices
        .iter()
        .filter(|&&i| i != cfg.blank_index as u32)
        .filter_map(|&i| chars.get(i as usize - 1).copied())
        .collect()
}

/// Minimum number of frames a CTC alignment of `indices` needs: one per
/// character plus a separating blank between each pair of equal neighbours.
pub fn ctc_min_frames(indices: &[u32]) -> usize {
    let repeats = indices.windows(2).filter(|w| w[0] == w[1]).count();
    indices.len() + repeats
}

/// A normalized ground-truth string with its class indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub text: String,
    pub indices: Vec<u32>,
}

impl Label {
    /// Normalizes `raw`, encodes it, and applies the CTC length guard for `cfg.tokens` frames.
    pub fn from_raw(raw: &str, cfg: &ModelConfig) -> Result<Self> {
        let text = normalize_text(raw);
        if text.is_empty() {
            return Err(Error::Label(format!("{raw:?} has no charset characters")));
        }
        let label = encode_text(&text, cfg)?;
        let need = ctc_min_frames(&label.indices);
        if need > cfg.tokens {
            return Err(Error::Label(format!(
                "{text:?} needs {need} CTC frames but only {} are available",
                cfg.tokens
            )));
        }
        Ok(label)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Encodes an already-normalized string. Does not apply the length guard.
pub fn encode_text(text: &str, cfg: &ModelConfig) -> Result<Label> {
    let indices = text
        .chars()
        .map(|c| class_index(&cfg.charset, c).ok_or(Error::UnknownChar(c)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Label {
        text: text.to_string(),
        indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_text("Hello!"), "hello");
        assert_eq!(normalize_text("abc123"), "abc123");
        assert_eq!(normalize_text("¿@#"), "");
        assert_eq!(normalize_text("Don't STOP-9"), "dontstop9");
    }

    #[test]
    fn encoding_examples() {
        let cfg = ModelConfig::default();
        assert_eq!(encode_text("ab1", &cfg).unwrap().indices, vec![1, 2, 28]);
        assert_eq!(encode_text("z", &cfg).unwrap().indices, vec![26]);
        assert_eq!(encode_text("09", &cfg).unwrap().indices, vec![27, 36]);
        let err = encode_text("a?", &cfg).unwrap_err();
        assert_eq!(err.to_string(), "unknown character '?'");
    }

    #[test]
    fn length_guard_counts_repeats() {
        let cfg = ModelConfig::default();
        assert_eq!(ctc_min_frames(&[1, 1, 2]), 4);
        assert_eq!(ctc_min_frames(&[]), 0);
        // 16 'a's need 31 frames, 17 need 33.
        assert!(Label::from_raw(&"a".repeat(16), &cfg).is_ok());
        assert!(Label::from_raw(&"a".repeat(17), &cfg).is_err());
        assert!(Label::from_raw(&"ab".repeat(16), &cfg).is_ok());
        assert!(Label::from_raw("!!", &cfg).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(s in "[a-z0-9]{1,20}") {
            let cfg = ModelConfig::default();
            let label = encode_text(&s, &cfg).unwrap();
            prop_assert!(label.indices.iter().all(|&i| (1..=36).contains(&i)));
            prop_assert_eq!(decode_indices(&label.indices, &cfg), s);
        }

        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once), once.clone());
            prop_assert!(once.chars().all(|c| DEFAULT_CHARSET.contains(c)));
        }
    }
}
