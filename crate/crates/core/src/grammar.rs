//! The alternating arithmetic grammar: `x op x op ... x` over the
//! vocabulary `x + - * /`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const TOKENS: [char; 5] = ['x', '+', '-', '*', '/'];
pub const VOCAB_SIZE: usize = TOKENS.len();
pub const X: usize = 0;

pub fn is_operator(token: usize) -> bool {
    (1..VOCAB_SIZE).contains(&token)
}

pub fn token_index(ch: char) -> Option<usize> {
    TOKENS.iter().position(|&t| t == ch)
}

pub fn encode(text: &str) -> Result<Vec<usize>> {
    text.chars()
        .enumerate()
        .map(|(position, ch)| token_index(ch).ok_or(Error::UnknownToken { ch, position }))
        .collect()
}

pub fn decode(indices: &[usize]) -> Result<String> {
    indices
        .iter()
        .map(|&index| TOKENS.get(index).copied().ok_or(Error::TokenOutOfRange { index, vocab: VOCAB_SIZE }))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrammarDataset {
    pub seq_len: usize,
    pub sequences: Vec<Vec<usize>>,
    /// Generation seed; `None` when loaded from disk.
    pub seed: Option<u64>,
}

impl GrammarDataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// `n` sequences of odd length `seq_len`: `x` at even positions and a
/// uniformly drawn operator at odd positions.
pub fn generate_dataset(n: usize, seq_len: usize, seed: u64) -> Result<GrammarDataset> {
    if n == 0 {
        return Err(Error::EmptyBatch("generate_dataset"));
    }
    if seq_len < 3 {
        return Err(Error::InvalidLength { len: seq_len, reason: "grammar sequences need length >= 3" });
    }
    if seq_len % 2 == 0 {
        return Err(Error::InvalidLength { len: seq_len, reason: "grammar sequences must have odd length" });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sequences = (0..n)
        .map(|_| {
            (0..seq_len)
                .map(|pos| if pos % 2 == 0 { X } else { rng.gen_range(1..VOCAB_SIZE) })
                .collect()
        })
        .collect();
    Ok(GrammarDataset { seq_len, sequences, seed: Some(seed) })
}

/// Number of length-3 windows shaped `x op x` or `op x op`.
pub fn goodness_score(sequence: &[usize]) -> Result<usize> {
    if sequence.len() < 3 {
        return Err(Error::InvalidLength { len: sequence.len(), reason: "goodness needs length >= 3" });
    }
    let score = sequence
        .windows(3)
        .filter(|w| match (w[0], w[1], w[2]) {
            (X, op, X) => is_operator(op),
            (a, X, b) => is_operator(a) && is_operator(b),
            _ => false,
        })
        .count();
    Ok(score)
}

/// Mean raw goodness over a batch of equal-length sequences.
pub fn batch_goodness(batch: &[Vec<usize>]) -> Result<f64> {
    let first = batch.first().ok_or(Error::EmptyBatch("batch_goodness"))?;
    let mut total = 0usize;
    for seq in batch {
        if seq.len() != first.len() {
            return Err(Error::InvalidLength { len: seq.len(), reason: "batch sequences must share one length" });
        }
        total += goodness_score(seq)?;
    }
    Ok(total as f64 / batch.len() as f64)
}

/// Token frequencies over every position of every sequence.
pub fn unigram_stats(batch: &[Vec<usize>]) -> Result<[f64; VOCAB_SIZE]> {
    let mut counts = [0usize; VOCAB_SIZE];
    let mut total = 0usize;
    for seq in batch {
        for &tok in seq {
            *counts.get_mut(tok).ok_or(Error::TokenOutOfRange { index: tok, vocab: VOCAB_SIZE })? += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyBatch("unigram_stats"));
    }
    Ok(counts.map(|c| c as f64 / total as f64))
}

/// One decoded sequence per line, newline-terminated.
pub fn save_dataset(dataset: &GrammarDataset, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(dataset.len() * (dataset.seq_len + 1));
    for seq in &dataset.sequences {
        out.push_str(&decode(seq)?);
        out.push('\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_dataset(path: &Path) -> Result<GrammarDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let malformed = |line: usize, reason: String| Error::Malformed { path: path.to_path_buf(), line, reason };
    let mut sequences: Vec<Vec<usize>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let seq = encode(line).map_err(|e| malformed(i + 1, e.to_string()))?;
        if let Some(first) = sequences.first() {
            if seq.len() != first.len() {
                return Err(malformed(i + 1, format!("length {} differs from {}", seq.len(), first.len())));
            }
        }
        sequences.push(seq);
    }
    let seq_len = match sequences.first() {
        Some(s) if !s.is_empty() => s.len(),
        _ => return Err(malformed(1, "no sequences".into())),
    };
    Ok(GrammarDataset { seq_len, sequences, seed: None })
}
