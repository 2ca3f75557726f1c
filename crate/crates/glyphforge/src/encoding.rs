//! Character-separated tokenization and the per-token text encoder.
//!
//! Every character of the prompt becomes one token carrying its
//! character id, its position, and a real/pad flag. Tokens are encoded
//! independently — no attention, no recurrence — so a character's
//! embedding row is bit-identical across prompts that share it at the
//! same position.

use std::collections::HashMap;

use candle_core::Tensor;
use candle_nn::{LayerNorm, Linear, Module};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{self, ParamStore};
use crate::rngutil::RngStream;

/// An ordered character set. The newline token is an ordinary member
/// (multi-line prompts treat it as an independent special token); the
/// pad id is reserved one past the last character.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    chars: Vec<char>,
    index: HashMap<char, u32>,
}

impl Alphabet {
    pub fn new(chars: Vec<char>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, &ch) in chars.iter().enumerate() {
            if index.insert(ch, i as u32).is_some() {
                return Err(Error::Config(format!("duplicate alphabet char {ch:?}")));
            }
        }
        if chars.is_empty() {
            return Err(Error::Config("empty alphabet".into()));
        }
        Ok(Alphabet { chars, index })
    }

    /// A–Z, 0–9, space, newline.
    pub fn default_latin() -> Self {
        let chars: Vec<char> = ('A'..='Z').chain('0'..='9').chain([' ', '\n']).collect();
        Alphabet::new(chars).expect("default alphabet is duplicate-free")
    }

    /// Parses one character per line; space and newline are written as
    /// the escapes `\s` and `\n`.
    pub fn from_lines(text: &str) -> Result<Self> {
        let mut chars = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let ch = match line {
                "\\s" => ' ',
                "\\n" => '\n',
                other => {
                    let mut it = other.chars();
                    match (it.next(), it.next()) {
                        (Some(c), None) => c,
                        _ => {
                            return Err(Error::Config(format!(
                                "alphabet line {}: expected one char, got {other:?}",
                                lineno + 1
                            )))
                        }
                    }
                }
            };
            chars.push(ch);
        }
        Alphabet::new(chars)
    }

    /// Inverse of [`from_lines`](Self::from_lines).
    pub fn to_lines(&self) -> String {
        self.chars
            .iter()
            .map(|&c| match c {
                ' ' => "\\s".to_string(),
                '\n' => "\\n".to_string(),
                other => other.to_string(),
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn contains(&self, ch: char) -> bool {
        self.index.contains_key(&ch)
    }

    pub fn id_of(&self, ch: char) -> Option<u32> {
        self.index.get(&ch).copied()
    }

    pub fn char_of(&self, id: u32) -> Option<char> {
        self.chars.get(id as usize).copied()
    }

    /// Reserved id for padding tokens.
    pub fn pad_id(&self) -> u32 {
        self.chars.len() as u32
    }

    /// Alphabet size including the pad id.
    pub fn vocab_size(&self) -> usize {
        self.chars.len() + 1
    }

    /// Content hash binding checkpoints to the alphabet they were
    /// trained on.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_lines().as_bytes());
        hex::encode(h.finalize())
    }

    /// Errors with the deduplicated offender list when `text` contains
    /// characters outside the alphabet.
    pub fn validate_text(&self, text: &str) -> Result<()> {
        let mut offenders = Vec::new();
        for ch in text.chars() {
            if !self.contains(ch) && !offenders.contains(&ch) {
                offenders.push(ch);
            }
        }
        if offenders.is_empty() {
            Ok(())
        } else {
            Err(Error::UnknownChars(offenders))
        }
    }
}

/// One prompt character (or padding slot) as the encoder sees it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharToken {
    pub char_id: u32,
    pub position_index: u32,
    pub is_pad: bool,
}

/// A prompt padded to exactly `K_max` tokens, real tokens first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    tokens: Vec<CharToken>,
}

impl TokenSequence {
    pub fn tokens(&self) -> &[CharToken] {
        &self.tokens
    }

    pub fn k_max(&self) -> usize {
        self.tokens.len()
    }

    /// Number of non-pad tokens.
    pub fn real_len(&self) -> usize {
        self.tokens.iter().filter(|t| !t.is_pad).count()
    }
}

/// Splits `prompt` into one token per character, padded to `k_max`.
pub fn tokenize_chars(prompt: &str, alphabet: &Alphabet, k_max: usize) -> Result<TokenSequence> {
    let n = prompt.chars().count();
    if n > k_max {
        return Err(Error::invalid(format!(
            "prompt has {n} characters, maximum is {k_max}"
        )));
    }
    alphabet.validate_text(prompt)?;
    let mut tokens = Vec::with_capacity(k_max);
    for (i, ch) in prompt.chars().enumerate() {
        tokens.push(CharToken {
            char_id: alphabet.id_of(ch).expect("validated above"),
            position_index: i as u32,
            is_pad: false,
        });
    }
    for i in n..k_max {
        tokens.push(CharToken {
            char_id: alphabet.pad_id(),
            position_index: i as u32,
            is_pad: true,
        });
    }
    Ok(TokenSequence { tokens })
}

/// The learned per-token map producing the text condition: embedding
/// sums fed through a residual MLP, applied to each token in isolation.
pub struct TextEncoder {
    char_table: Tensor,
    pos_table: Tensor,
    pad_table: Tensor,
    ln: LayerNorm,
    w1: Linear,
    w2: Linear,
    pub k_max: usize,
    pub d_model: usize,
}

impl TextEncoder {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut RngStream,
        alphabet: &Alphabet,
        k_max: usize,
        d_model: usize,
    ) -> Result<Self> {
        let vocab = alphabet.vocab_size();
        let char_table = nn::embedding_table(ps, rng, "text_encoder.char_emb", vocab, d_model)?;
        let pos_table = nn::embedding_table(ps, rng, "text_encoder.pos_emb", k_max, d_model)?;
        let pad_table = nn::embedding_table(ps, rng, "text_encoder.pad_emb", 2, d_model)?;
        let ln = nn::layer_norm(ps, rng, "text_encoder.ln", d_model)?;
        let w1 = nn::linear(ps, rng, "text_encoder.mlp1", d_model, d_model * 2)?;
        let w2 = nn::linear(ps, rng, "text_encoder.mlp2", d_model * 2, d_model)?;
        Ok(TextEncoder {
            char_table,
            pos_table,
            pad_table,
            ln,
            w1,
            w2,
            k_max,
            d_model,
        })
    }

    /// Encodes one sequence to a `[K_max, D]` condition matrix.
    pub fn encode(&self, seq: &TokenSequence) -> Result<Tensor> {
        if seq.k_max() != self.k_max {
            return Err(Error::invalid(format!(
                "sequence length {} != K_max {}",
                seq.k_max(),
                self.k_max
            )));
        }
        let char_ids: Vec<u32> = seq.tokens().iter().map(|t| t.char_id).collect();
        let pos_ids: Vec<u32> = seq.tokens().iter().map(|t| t.position_index).collect();
        let pad_ids: Vec<u32> = seq.tokens().iter().map(|t| t.is_pad as u32).collect();
        let h = nn::embed(&self.char_table, &char_ids)?
            .add(&nn::embed(&self.pos_table, &pos_ids)?)?
            .add(&nn::embed(&self.pad_table, &pad_ids)?)?;
        let mlp = self
            .w2
            .forward(&candle_nn::ops::silu(&self.w1.forward(&self.ln.forward(&h)?)?)?)?;
        Ok(h.add(&mlp)?)
    }

    /// Encodes a batch to `[B, K_max, D]`.
    pub fn encode_batch(&self, seqs: &[TokenSequence]) -> Result<Tensor> {
        let rows: Vec<Tensor> = seqs
            .iter()
            .map(|s| self.encode(s))
            .collect::<Result<_>>()?;
        Ok(Tensor::stack(&rows, 0)?)
    }
}
