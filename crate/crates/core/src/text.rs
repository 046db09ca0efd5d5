//! Tokenizer, vocabulary and slot-keyed token features for the text encoder.
//!
//! Descriptions spell numbers digit by digit, so a plain bag of token
//! embeddings cannot tell which digit belongs to which value. Each token is
//! therefore keyed by its structural slot before the embedding lookup:
//! words by sentence index, digits by (sentence, number-in-sentence, decimal
//! place). Mean pooling runs over these keyed features, which keeps the
//! encoder order-free within a slot while letting values be read linearly.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{ClspError, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

pub const MAX_SENTENCES: usize = 16;
pub const MAX_NUMBERS: usize = 8;
/// Decimal places -2..=5.
pub const PLACES: usize = 8;
const PLACE_OFFSET: i64 = 2;

/// Lowercases and splits on whitespace and punctuation. Punctuation is kept,
/// and every digit becomes its own token.
pub fn tokenize(text: &str) -> Result<Vec<String>> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, tokens: &mut Vec<String>| {
        if !word.is_empty() {
            tokens.push(std::mem::take(word));
        }
    };
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            flush(&mut word, &mut tokens);
        } else if ch.is_ascii_digit() || ch.is_ascii_punctuation() || (!ch.is_alphanumeric()) {
            flush(&mut word, &mut tokens);
            tokens.push(ch.to_string());
        } else {
            word.push(ch);
        }
    }
    flush(&mut word, &mut tokens);
    if tokens.is_empty() {
        return Err(ClspError::EmptyTokens(text.to_string()));
    }
    Ok(tokens)
}

/// Token to id map with reserved ids 0 = PAD, 1 = UNK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD_ID] != PAD || tokens[UNK_ID] != UNK {
            return Err(ClspError::Config(
                "vocabulary must start with <pad> and <unk>".into(),
            ));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(ClspError::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    /// Sorted unique tokens of `texts` after the reserved entries.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for t in texts {
            seen.extend(tokenize(t)?);
        }
        seen.remove(PAD);
        seen.remove(UNK);
        let mut tokens = vec![PAD.to_string(), UNK.to_string()];
        tokens.extend(seen);
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        Ok(tokenize(text)?.iter().map(|t| self.id(t)).collect())
    }

    /// One token per line; line number is the id.
    pub fn write(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| ClspError::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for t in &self.tokens {
            writeln!(w, "{t}").map_err(|e| ClspError::io(path, e))?;
        }
        w.flush().map_err(|e| ClspError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| ClspError::io(path, e))?;
        let tokens = std::io::BufReader::new(file)
            .lines()
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| ClspError::io(path, e))?;
        Self::from_tokens(tokens)
    }

    /// Rows needed in the slot-keyed embedding table.
    pub fn feature_rows(&self) -> usize {
        MAX_SENTENCES * self.len() + MAX_SENTENCES * MAX_NUMBERS * PLACES * 10
    }

    /// Slot-keyed feature ids for `text`, one per token.
    pub fn features(&self, text: &str) -> Result<Vec<usize>> {
        let tokens = tokenize(text)?;
        Ok(keyed_features(&tokens, |t| self.id(t), self.len()))
    }
}

/// Number slots: one per (sentence, number-in-sentence).
pub const NUMBER_SLOTS: usize = MAX_SENTENCES * MAX_NUMBERS;

/// A digit feature split into its number slot, decimal place and digit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DigitFeature {
    pub slot: usize,
    pub place: i64,
    pub digit: usize,
}

impl DigitFeature {
    /// Contribution of this digit to the number's value.
    pub fn value(self) -> f64 {
        self.digit as f64 * 10f64.powi(self.place as i32)
    }
}

/// Decodes a feature id produced by [`keyed_features`]; `None` for word features.
pub fn decode_digit_feature(id: usize, vocab: usize) -> Option<DigitFeature> {
    let base = MAX_SENTENCES * vocab;
    if id < base || id >= base + NUMBER_SLOTS * PLACES * 10 {
        return None;
    }
    let rel = id - base;
    Some(DigitFeature {
        slot: rel / (PLACES * 10),
        place: ((rel / 10) % PLACES) as i64 - PLACE_OFFSET,
        digit: rel % 10,
    })
}

/// Largest absolute number seen in each slot across `texts`.
pub fn slot_maxima<'a>(vocab: &Vocabulary, texts: impl IntoIterator<Item = &'a str>) -> Result<Vec<f64>> {
    let mut max = vec![0f64; NUMBER_SLOTS];
    for text in texts {
        let mut values = vec![0f64; NUMBER_SLOTS];
        for id in vocab.features(text)? {
            if let Some(f) = decode_digit_feature(id, vocab.len()) {
                values[f.slot] += f.value();
            }
        }
        for (m, v) in max.iter_mut().zip(values) {
            *m = m.max(v);
        }
    }
    Ok(max)
}

fn is_digit(token: &str) -> bool {
    token.len() == 1 && token.as_bytes()[0].is_ascii_digit()
}

/// Maps tokens to slot-keyed feature ids.
///
/// Word feature: `sentence * vocab + id`. Digit feature:
/// `MAX_SENTENCES * vocab + ((sentence * MAX_NUMBERS + number) * PLACES + place) * 10 + digit`.
/// A "." between two digits is a decimal point; any other "." ends a sentence.
pub fn keyed_features(tokens: &[String], id_of: impl Fn(&str) -> usize, vocab: usize) -> Vec<usize> {
    let digit_base = MAX_SENTENCES * vocab;
    let mut out = Vec::with_capacity(tokens.len());
    let mut sentence = 0usize;
    let mut number = 0usize;
    let mut i = 0;
    while i < tokens.len() {
        if is_digit(&tokens[i]) {
            let start = i;
            while i < tokens.len() && is_digit(&tokens[i]) {
                i += 1;
            }
            let int_len = i - start;
            let mut frac = Vec::new();
            if i + 1 < tokens.len() && tokens[i] == "." && is_digit(&tokens[i + 1]) {
                let point = i;
                i += 1;
                while i < tokens.len() && is_digit(&tokens[i]) {
                    frac.push(i);
                    i += 1;
                }
                out.push(sentence.min(MAX_SENTENCES - 1) * vocab + id_of(&tokens[point]));
            }
            let s = sentence.min(MAX_SENTENCES - 1);
            let n = number.min(MAX_NUMBERS - 1);
            let places = (0..int_len)
                .map(|k| (start + k, (int_len - 1 - k) as i64))
                .chain(frac.iter().enumerate().map(|(k, &pos)| (pos, -(k as i64) - 1)));
            for (pos, place) in places {
                let digit = (tokens[pos].as_bytes()[0] - b'0') as usize;
                let p = (place + PLACE_OFFSET).clamp(0, PLACES as i64 - 1) as usize;
                out.push(digit_base + ((s * MAX_NUMBERS + n) * PLACES + p) * 10 + digit);
            }
            number += 1;
            continue;
        }
        let token = &tokens[i];
        out.push(sentence.min(MAX_SENTENCES - 1) * vocab + id_of(token));
        if token == "." {
            sentence += 1;
            number = 0;
        }
        i += 1;
    }
    out
}
