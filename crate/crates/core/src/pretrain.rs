//! Inputs for continued MLM pretraining.
//!
//! Sequences are padded to the smallest power of two that fits the
//! longest one, 15% of real tokens are selected per token (i.i.d.), and
//! selected tokens are masked (80%), replaced by a random non-special id
//! (10%) or left unchanged (10%). Labels are a copy of the inputs taken
//! before corruption.
//!
//! Randomness comes from ChaCha8 seeded through `seed_from_u64`, so a seed
//! reproduces the same batch on every platform. Per-batch seeds are derived
//! from `(seed, batch_index)` with SplitMix64.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::word_spans;

pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_EPOCHS: u32 = 200;
pub const DEFAULT_BASE_LR: f64 = 2e-5;
pub const BATCH_FORMAT: &str = "biasaudit-batches/1";

#[derive(Debug, Error)]
pub enum PrepError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid masking policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error("invalid sequence: {0}")]
    InvalidSequence(String),
    #[error("step {step} outside [0, {total}]")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Smallest power of two >= `max_len`.
pub fn pad_length(max_len: usize) -> usize {
    max_len.max(1).next_power_of_two()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedSequence {
    pub ids: Vec<u32>,
    /// Positions of start/end markers; never selected for masking.
    pub special_positions: BTreeSet<usize>,
}

impl TokenizedSequence {
    pub fn new(ids: Vec<u32>, special_positions: BTreeSet<usize>) -> Result<Self, PrepError> {
        if let Some(&p) = special_positions.iter().next_back() {
            if p >= ids.len() {
                return Err(PrepError::InvalidSequence(format!(
                    "special position {p} out of bounds for length {}",
                    ids.len()
                )));
            }
        }
        Ok(Self {
            ids,
            special_positions,
        })
    }

    /// `[start] body [end]`
    pub fn with_markers(body: &[u32], start: u32, end: u32) -> Self {
        let mut ids = Vec::with_capacity(body.len() + 2);
        ids.push(start);
        ids.extend_from_slice(body);
        ids.push(end);
        let special_positions = [0, ids.len() - 1].into_iter().collect();
        Self {
            ids,
            special_positions,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabInfo {
    pub size: u32,
    pub pad_id: u32,
    pub mask_id: u32,
    /// All special ids (pad, mask, start, end, unknown, ...).
    pub special_ids: BTreeSet<u32>,
}

impl VocabInfo {
    pub fn validate(&self) -> Result<(), PrepError> {
        let mut specials = self.special_ids.clone();
        specials.insert(self.pad_id);
        specials.insert(self.mask_id);
        if specials.iter().any(|&id| id >= self.size) {
            return Err(PrepError::InvalidVocab("special id outside vocabulary".into()));
        }
        if self.size as usize <= specials.len() {
            return Err(PrepError::InvalidVocab(format!(
                "vocabulary of {} has no non-special ids",
                self.size
            )));
        }
        Ok(())
    }

    fn is_special(&self, id: u32) -> bool {
        id == self.pad_id || id == self.mask_id || self.special_ids.contains(&id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskPolicy {
    pub select: f64,
    pub mask: f64,
    pub random: f64,
    pub keep: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            select: 0.15,
            mask: 0.8,
            random: 0.1,
            keep: 0.1,
        }
    }
}

impl MaskPolicy {
    pub fn validate(&self) -> Result<(), PrepError> {
        let fractions = [self.select, self.mask, self.random, self.keep];
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(PrepError::InvalidPolicy("fractions must lie in [0, 1]".into()));
        }
        if (self.mask + self.random + self.keep - 1.0).abs() > 1e-9 {
            return Err(PrepError::InvalidPolicy(
                "mask + random + keep must sum to 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(i32)]
pub enum MaskDecision {
    /// Not selected (includes special and padding positions).
    Keep = 0,
    Masked = 1,
    Random = 2,
    /// Selected but left as is.
    Unchanged = 3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedBatch {
    pub input_ids: Vec<Vec<u32>>,
    pub labels: Vec<Vec<u32>>,
    pub attention: Vec<Vec<bool>>,
    pub decisions: Vec<Vec<MaskDecision>>,
    pub seq_len: usize,
}

impl MaskedBatch {
    pub fn rows(&self) -> usize {
        self.input_ids.len()
    }

    pub fn count(&self, decision: MaskDecision) -> usize {
        self.decisions
            .iter()
            .flatten()
            .filter(|&&d| d == decision)
            .count()
    }
}

/// Masks one batch, padding to [`pad_length`] of its longest sequence.
pub fn mask_batch(
    seqs: &[TokenizedSequence],
    seed: u64,
    policy: &MaskPolicy,
    vocab: &VocabInfo,
) -> Result<MaskedBatch, PrepError> {
    let longest = seqs.iter().map(TokenizedSequence::len).max().ok_or(PrepError::EmptyBatch)?;
    mask_batch_padded(seqs, pad_length(longest), seed, policy, vocab)
}

/// Masks one batch at a fixed padded length.
pub fn mask_batch_padded(
    seqs: &[TokenizedSequence],
    seq_len: usize,
    seed: u64,
    policy: &MaskPolicy,
    vocab: &VocabInfo,
) -> Result<MaskedBatch, PrepError> {
    if seqs.is_empty() {
        return Err(PrepError::EmptyBatch);
    }
    policy.validate()?;
    vocab.validate()?;
    if let Some(s) = seqs.iter().find(|s| s.len() > seq_len) {
        return Err(PrepError::InvalidSequence(format!(
            "sequence of length {} exceeds padded length {seq_len}",
            s.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = MaskedBatch {
        input_ids: Vec::with_capacity(seqs.len()),
        labels: Vec::with_capacity(seqs.len()),
        attention: Vec::with_capacity(seqs.len()),
        decisions: Vec::with_capacity(seqs.len()),
        seq_len,
    };
    let mask_cut = policy.mask;
    let random_cut = policy.mask + policy.random;

    for seq in seqs {
        let mut ids = seq.ids.clone();
        ids.resize(seq_len, vocab.pad_id);
        let labels = ids.clone();
        let mut attention = vec![false; seq_len];
        attention[..seq.len()].fill(true);
        let mut decisions = vec![MaskDecision::Keep; seq_len];

        for pos in 0..seq.len() {
            if seq.special_positions.contains(&pos) || vocab.is_special(seq.ids[pos]) {
                continue;
            }
            if rng.random::<f64>() >= policy.select {
                continue;
            }
            let roll = rng.random::<f64>();
            decisions[pos] = if roll < mask_cut {
                ids[pos] = vocab.mask_id;
                MaskDecision::Masked
            } else if roll < random_cut {
                ids[pos] = random_regular_id(&mut rng, vocab);
                MaskDecision::Random
            } else {
                MaskDecision::Unchanged
            };
        }

        batch.input_ids.push(ids);
        batch.labels.push(labels);
        batch.attention.push(attention);
        batch.decisions.push(decisions);
    }
    Ok(batch)
}

fn random_regular_id(rng: &mut ChaCha8Rng, vocab: &VocabInfo) -> u32 {
    loop {
        let id = rng.random_range(0..vocab.size);
        if !vocab.is_special(id) {
            return id;
        }
    }
}

/// SplitMix64 of `seed` and `index`, used to give each batch its own seed.
pub fn batch_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Splits `seqs` into batches of `batch_size`, all padded to the length of
/// the longest sequence overall.
pub fn collate(
    seqs: &[TokenizedSequence],
    batch_size: usize,
    seed: u64,
    policy: &MaskPolicy,
    vocab: &VocabInfo,
) -> Result<Vec<MaskedBatch>, PrepError> {
    if seqs.is_empty() || batch_size == 0 {
        return Err(PrepError::EmptyBatch);
    }
    let seq_len = pad_length(seqs.iter().map(TokenizedSequence::len).max().unwrap_or(1));
    seqs.chunks(batch_size)
        .enumerate()
        .map(|(i, chunk)| mask_batch_padded(chunk, seq_len, batch_seed(seed, i as u64), policy, vocab))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: u32,
    pub base_lr: f64,
    pub batch_size: usize,
    pub total_steps: u64,
}

impl TrainSchedule {
    pub fn new(epochs: u32, base_lr: f64, batch_size: usize, n_examples: usize) -> Result<Self, PrepError> {
        if epochs == 0 || batch_size == 0 || n_examples == 0 || !(base_lr > 0.0 && base_lr.is_finite()) {
            return Err(PrepError::InvalidSchedule(format!(
                "epochs={epochs} base_lr={base_lr} batch_size={batch_size} examples={n_examples}"
            )));
        }
        let steps_per_epoch = n_examples.div_ceil(batch_size) as u64;
        Ok(Self {
            epochs,
            base_lr,
            batch_size,
            total_steps: steps_per_epoch * epochs as u64,
        })
    }

    /// 200 epochs, 2e-5, batches of 32.
    pub fn standard(n_examples: usize) -> Result<Self, PrepError> {
        Self::new(DEFAULT_EPOCHS, DEFAULT_BASE_LR, DEFAULT_BATCH_SIZE, n_examples)
    }
}

/// Linear decay from `base_lr` at step 0 to 0 at `total_steps`.
pub fn lr_at(step: u64, schedule: &TrainSchedule) -> Result<f64, PrepError> {
    if step > schedule.total_steps {
        return Err(PrepError::StepOutOfRange {
            step,
            total: schedule.total_steps,
        });
    }
    Ok(schedule.base_lr * (1.0 - step as f64 / schedule.total_steps as f64))
}

/// Word-level vocabulary built from a corpus, for preparing batches
/// without a model tokenizer. Ids 0-4 are `[PAD] [UNK] [CLS] [SEP] [MASK]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordVocab {
    pub tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, u32>,
}

impl WordVocab {
    pub const PAD: u32 = 0;
    pub const UNK: u32 = 1;
    pub const CLS: u32 = 2;
    pub const SEP: u32 = 3;
    pub const MASK: u32 = 4;
    const SPECIALS: [&'static str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(split_tokens).collect();
        let tokens: Vec<String> = Self::SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    pub fn encode(&self, text: &str) -> TokenizedSequence {
        let body: Vec<u32> = split_tokens(text)
            .map(|t| self.index.get(&t).copied().unwrap_or(Self::UNK))
            .collect();
        TokenizedSequence::with_markers(&body, Self::CLS, Self::SEP)
    }

    pub fn info(&self) -> VocabInfo {
        VocabInfo {
            size: self.tokens.len() as u32,
            pad_id: Self::PAD,
            mask_id: Self::MASK,
            special_ids: (0..Self::SPECIALS.len() as u32).collect(),
        }
    }
}

/// Lowercased words plus each punctuation character as its own token.
fn split_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    let spans = word_spans(text);
    let mut out = Vec::new();
    let mut cursor = 0;
    for (s, e) in spans {
        out.extend(text[cursor..s].chars().filter(|c| !c.is_whitespace()).map(String::from));
        out.push(text[s..e].to_lowercase());
        cursor = e;
    }
    out.extend(text[cursor..].chars().filter(|c| !c.is_whitespace()).map(String::from));
    out.into_iter()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchFileEntry {
    pub index: usize,
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
    pub input_ids: String,
    pub labels: String,
    pub attention: String,
    pub decisions: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchManifest {
    pub format: String,
    pub seed: u64,
    pub policy: MaskPolicy,
    pub vocab: VocabInfo,
    pub seq_len: usize,
    pub batches: Vec<BatchFileEntry>,
    /// Free-form configuration echo from the caller.
    #[serde(default)]
    pub config: serde_json::Value,
}

/// Writes `manifest.json` plus four little-endian row-major int32 matrices
/// per batch.
pub fn write_batches(
    dir: &Path,
    batches: &[MaskedBatch],
    seed: u64,
    policy: &MaskPolicy,
    vocab: &VocabInfo,
    config: serde_json::Value,
) -> Result<BatchManifest, PrepError> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(batches.len());
    for (i, b) in batches.iter().enumerate() {
        let stem = format!("batch_{i:05}");
        let files = [
            ("input_ids", i32_matrix(b.input_ids.iter().map(|r| r.iter().map(|&v| v as i32)))),
            ("labels", i32_matrix(b.labels.iter().map(|r| r.iter().map(|&v| v as i32)))),
            ("attention", i32_matrix(b.attention.iter().map(|r| r.iter().map(|&v| v as i32)))),
            ("decisions", i32_matrix(b.decisions.iter().map(|r| r.iter().map(|&d| d as i32)))),
        ];
        let mut names = Vec::new();
        for (kind, bytes) in files {
            let name = format!("{stem}.{kind}.i32");
            fs::write(dir.join(&name), bytes)?;
            names.push(name);
        }
        let mut names = names.into_iter();
        entries.push(BatchFileEntry {
            index: i,
            rows: b.rows(),
            cols: b.seq_len,
            seed: batch_seed(seed, i as u64),
            input_ids: names.next().unwrap_or_default(),
            labels: names.next().unwrap_or_default(),
            attention: names.next().unwrap_or_default(),
            decisions: names.next().unwrap_or_default(),
        });
    }
    let manifest = BatchManifest {
        format: BATCH_FORMAT.to_string(),
        seed,
        policy: *policy,
        vocab: vocab.clone(),
        seq_len: batches.first().map_or(0, |b| b.seq_len),
        batches: entries,
        config,
    };
    let mut json = serde_json::to_string_pretty(&manifest).map_err(io::Error::other)?;
    json.push('\n');
    fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Reads one matrix written by [`write_batches`].
pub fn read_i32_matrix(path: &Path, rows: usize, cols: usize) -> Result<Vec<Vec<i32>>, PrepError> {
    let bytes = fs::read(path)?;
    if bytes.len() != rows * cols * 4 {
        return Err(PrepError::InvalidSequence(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            rows * cols * 4,
            bytes.len()
        )));
    }
    let flat: Vec<i32> = bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(flat.chunks(cols.max(1)).map(<[i32]>::to_vec).collect())
}

fn i32_matrix<R, I>(rows: R) -> Vec<u8>
where
    R: Iterator<Item = I>,
    I: Iterator<Item = i32>,
{
    rows.flat_map(|r| r.flat_map(i32::to_le_bytes)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> VocabInfo {
        VocabInfo {
            size: 1000,
            pad_id: 0,
            mask_id: 4,
            special_ids: (0..5).collect(),
        }
    }

    fn seqs(n: usize, len: usize) -> Vec<TokenizedSequence> {
        (0..n)
            .map(|i| {
                let body: Vec<u32> = (0..len).map(|j| 5 + ((i * 31 + j * 7) % 990) as u32).collect();
                TokenizedSequence::with_markers(&body, 2, 3)
            })
            .collect()
    }

    #[test]
    fn pad_length_examples() {
        assert_eq!(pad_length(37), 64);
        assert_eq!(pad_length(64), 64);
        assert_eq!(pad_length(1), 1);
        assert_eq!(pad_length(65), 128);
    }

    #[test]
    fn zero_selection_changes_nothing() {
        let policy = MaskPolicy {
            select: 0.0,
            ..MaskPolicy::default()
        };
        let s = seqs(4, 20);
        let b = mask_batch(&s, 1, &policy, &vocab()).unwrap();
        assert_eq!(b.input_ids, b.labels);
        assert!(b.decisions.iter().flatten().all(|&d| d == MaskDecision::Keep));
    }

    #[test]
    fn deterministic_for_seed() {
        let s = seqs(8, 30);
        let a = mask_batch(&s, 42, &MaskPolicy::default(), &vocab()).unwrap();
        let b = mask_batch(&s, 42, &MaskPolicy::default(), &vocab()).unwrap();
        assert_eq!(a, b);
        let c = mask_batch(&s, 43, &MaskPolicy::default(), &vocab()).unwrap();
        assert_ne!(a.input_ids, c.input_ids);
    }

    #[test]
    fn padding_and_markers_never_selected() {
        let mut s = seqs(16, 10);
        s.push(TokenizedSequence::with_markers(&[9; 40], 2, 3));
        let policy = MaskPolicy {
            select: 1.0,
            ..MaskPolicy::default()
        };
        let b = mask_batch(&s, 5, &policy, &vocab()).unwrap();
        assert_eq!(b.seq_len, 64);
        for (row, seq) in s.iter().enumerate() {
            for pos in 0..b.seq_len {
                let special = pos >= seq.len() || seq.special_positions.contains(&pos);
                if special {
                    assert_eq!(b.decisions[row][pos], MaskDecision::Keep);
                    assert_eq!(b.input_ids[row][pos], b.labels[row][pos]);
                } else {
                    assert_ne!(b.decisions[row][pos], MaskDecision::Keep);
                }
                assert_eq!(b.attention[row][pos], pos < seq.len());
            }
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(
            mask_batch(&[], 0, &MaskPolicy::default(), &vocab()),
            Err(PrepError::EmptyBatch)
        ));
        let bad = MaskPolicy {
            mask: 0.5,
            ..MaskPolicy::default()
        };
        assert!(matches!(
            mask_batch(&seqs(1, 3), 0, &bad, &vocab()),
            Err(PrepError::InvalidPolicy(_))
        ));
        let tiny = VocabInfo {
            size: 5,
            ..vocab()
        };
        assert!(matches!(
            mask_batch(&seqs(1, 3), 0, &MaskPolicy::default(), &tiny),
            Err(PrepError::InvalidVocab(_))
        ));
        assert!(TokenizedSequence::new(vec![1, 2], [2].into_iter().collect()).is_err());
    }

    #[test]
    fn schedule_examples() {
        let s = TrainSchedule::standard(3200).unwrap();
        assert_eq!(s.total_steps, 200 * 100);
        assert_eq!(lr_at(0, &s).unwrap(), 2e-5);
        assert_eq!(lr_at(s.total_steps, &s).unwrap(), 0.0);
        assert!((lr_at(s.total_steps / 2, &s).unwrap() - 1e-5).abs() < 1e-20);
        assert!(matches!(
            lr_at(s.total_steps + 1, &s),
            Err(PrepError::StepOutOfRange { .. })
        ));
        assert!(TrainSchedule::new(0, 2e-5, 32, 10).is_err());
        assert_eq!(TrainSchedule::new(1, 1e-3, 32, 33).unwrap().total_steps, 2);
    }

    #[test]
    fn word_vocab_roundtrip() {
        let v = WordVocab::build(["He is a nurse.", "She is a judge!"]);
        let s = v.encode("she is a nurse.");
        assert_eq!(s.ids.first(), Some(&WordVocab::CLS));
        assert_eq!(s.ids.last(), Some(&WordVocab::SEP));
        assert_eq!(s.len(), 7);
        assert!(s.ids.iter().all(|&id| id != WordVocab::UNK));
        assert!(v.encode("unseen").ids.contains(&WordVocab::UNK));
        v.info().validate().unwrap();
    }

    #[test]
    fn batches_write_and_read_back() {
        let s = seqs(70, 12);
        let batches = collate(&s, 32, 7, &MaskPolicy::default(), &vocab()).unwrap();
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[2].rows(), 6);
        assert!(batches.iter().all(|b| b.seq_len == 16));
        let dir = tempfile::tempdir().unwrap();
        let m = write_batches(dir.path(), &batches, 7, &MaskPolicy::default(), &vocab(), serde_json::Value::Null)
            .unwrap();
        let e = &m.batches[1];
        let ids = read_i32_matrix(&dir.path().join(&e.input_ids), e.rows, e.cols).unwrap();
        let expected: Vec<Vec<i32>> = batches[1]
            .input_ids
            .iter()
            .map(|r| r.iter().map(|&v| v as i32).collect())
            .collect();
        assert_eq!(ids, expected);
    }
}
