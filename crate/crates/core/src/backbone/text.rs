//! Closed-vocabulary text tokenization: subject names, attribute keywords,
//! the synonym closure, and a pad/empty token. Fixed length 8.

use crate::taxonomy::Taxonomy;
use crate::{Error, Result};
use std::collections::HashMap;

pub const MAX_TEXT_LEN: usize = 8;
pub const PAD_TOKEN: u32 = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextTokens(pub [u32; MAX_TEXT_LEN]);

impl TextTokens {
    pub fn empty() -> Self {
        TextTokens([PAD_TOKEN; MAX_TEXT_LEN])
    }

    pub fn ids(&self) -> &[u32; MAX_TEXT_LEN] {
        &self.0
    }
}

#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Deterministic vocabulary: pad token first, then the taxonomy's word
    /// list in its canonical order.
    pub fn build(tax: &Taxonomy) -> Vocab {
        let mut words = vec!["<pad>".to_string()];
        words.extend(tax.vocabulary());
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Split on commas/whitespace; every word must be in the vocabulary.
    /// The empty string tokenizes to all-pad (the unconditional prompt).
    pub fn tokenize(&self, text: &str) -> Result<TextTokens> {
        let mut out = [PAD_TOKEN; MAX_TEXT_LEN];
        let words: Vec<&str> = text
            .split([',', ' '])
            .map(str::trim)
            .filter(|w| !w.is_empty())
            .collect();
        if words.len() > MAX_TEXT_LEN {
            return Err(Error::Contract(format!(
                "text `{text}` has {} words, max {MAX_TEXT_LEN}",
                words.len()
            )));
        }
        for (i, w) in words.iter().enumerate() {
            out[i] = *self.index.get(*w).ok_or_else(|| {
                Error::Contract(format!("word `{w}` not in the closed vocabulary"))
            })?;
        }
        Ok(TextTokens(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_round_trip_and_errors() {
        let tax = Taxonomy::load_default().unwrap();
        let vocab = Vocab::build(&tax);
        assert!(vocab.len() > 20);
        let t = vocab.tokenize("hue_red, circle").unwrap();
        assert_ne!(t.ids()[0], PAD_TOKEN);
        assert_ne!(t.ids()[1], PAD_TOKEN);
        assert_eq!(t.ids()[2], PAD_TOKEN);
        assert_eq!(vocab.tokenize("").unwrap(), TextTokens::empty());
        assert!(vocab.tokenize("not_a_word").is_err());
        assert!(vocab
            .tokenize("circle circle circle circle circle circle circle circle circle")
            .is_err());
    }

    #[test]
    fn every_prompt_text_tokenizes() {
        let tax = Taxonomy::load_default().unwrap();
        let vocab = Vocab::build(&tax);
        let mut rng = crate::rng::rng_seeded(11);
        for _ in 0..200 {
            let n = rand::Rng::gen_range(&mut rng, 1..=3);
            let p = tax.build_prompt(n, &mut rng).unwrap();
            vocab.tokenize(&p.text).unwrap();
        }
    }
}
