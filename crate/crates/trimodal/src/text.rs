//! Tokenization, vocabulary handling, and the masking schemes used by the
//! masked-token and masked-patch training objectives.
//!
//! Tokenization is whitespace splitting against a corpus-built vocabulary,
//! with a character-level fallback for words that are out of vocabulary.
//! The vocabulary file format is line-oriented: one token per line, the line
//! number is the id, and the five reserved tokens come first.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const MASK_ID: usize = 3;
pub const UNK_ID: usize = 4;

pub const RESERVED_TOKENS: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];

/// Stream tag for a token sequence: query, title, or image patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Query,
    Title,
    Image,
}

impl Segment {
    /// Stable index used to pick the segment embedding row.
    pub fn index(self) -> usize {
        match self {
            Segment::Query => 0,
            Segment::Title => 1,
            Segment::Image => 2,
        }
    }
}

/// Token-to-id bijection with five reserved ids at the front.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from an iterator of corpus tokens. Duplicates are
    /// dropped, ordering is lexicographic so the result is input-order
    /// independent, and the reserved tokens always occupy ids 0..5.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut seen: Vec<String> = tokens
            .into_iter()
            .map(|t| t.as_ref().to_string())
            .filter(|t| !t.is_empty() && !RESERVED_TOKENS.contains(&t.as_str()))
            .collect();
        seen.sort();
        seen.dedup();
        let mut all: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        all.extend(seen);
        let ids = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens: all, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut tokens = Vec::new();
        for line in BufReader::new(f).lines() {
            tokens.push(line?);
        }
        if tokens.len() < RESERVED_TOKENS.len() {
            return Err(Error::Vocabulary(format!(
                "vocabulary file {} has {} lines, need at least {}",
                path.display(),
                tokens.len(),
                RESERVED_TOKENS.len()
            )));
        }
        for (i, want) in RESERVED_TOKENS.iter().enumerate() {
            if tokens[i] != *want {
                return Err(Error::Vocabulary(format!(
                    "line {i} is {:?}, expected reserved token {want:?}",
                    tokens[i]
                )));
            }
        }
        let mut ids = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }
}

/// A fixed-length id sequence with its padding mask and, after masking,
/// the per-position reconstruction labels.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub segment: Segment,
    /// 1.0 at real positions, 0.0 at padding.
    pub attention_mask: Vec<f64>,
    /// `Some(original_id)` at positions selected for masking, `None` elsewhere.
    pub mlm_labels: Option<Vec<Option<usize>>>,
}

impl TokenSequence {
    /// Number of non-padding positions.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m > 0.0).count()
    }
}

/// Splits on whitespace and looks each word up in the vocabulary. A word
/// that is out of vocabulary decomposes into its characters; characters
/// still missing map to the unknown id. The result is CLS-prefixed,
/// truncated to `max_len`, and padded at the tail.
pub fn tokenize(
    vocab: &Vocabulary,
    text: &str,
    segment: Segment,
    max_len: usize,
) -> Result<TokenSequence> {
    if max_len == 0 {
        return Err(Error::InvalidParameter("max_len must be positive".into()));
    }
    let mut ids = vec![CLS_ID];
    'words: for word in text.split_whitespace() {
        if let Some(id) = vocab.id_of(word) {
            ids.push(id);
            continue;
        }
        for ch in word.chars() {
            let mut buf = [0u8; 4];
            let s = ch.encode_utf8(&mut buf);
            ids.push(vocab.id_of(s).unwrap_or(UNK_ID));
            if ids.len() >= max_len {
                break 'words;
            }
        }
    }
    ids.truncate(max_len);
    let real = ids.len();
    ids.resize(max_len, PAD_ID);
    let mut attention_mask = vec![0.0; max_len];
    for m in attention_mask.iter_mut().take(real) {
        *m = 1.0;
    }
    Ok(TokenSequence {
        ids,
        segment,
        attention_mask,
        mlm_labels: None,
    })
}

/// Inverse of [`tokenize`] on in-vocabulary streams: joins tokens with
/// spaces, skipping the CLS/SEP/PAD framing.
pub fn detokenize(vocab: &Vocabulary, ids: &[usize]) -> String {
    let mut out = Vec::new();
    for &id in ids {
        if id == PAD_ID || id == CLS_ID || id == SEP_ID {
            continue;
        }
        out.push(vocab.token(id).unwrap_or(RESERVED_TOKENS[UNK_ID]));
    }
    out.join(" ")
}

/// Selects each maskable position independently with probability `rate`,
/// then rewrites selected positions with the standard 80/10/10 split:
/// mask token, random replacement, or left unchanged. Original ids are
/// recorded in `mlm_labels`. CLS, SEP, and padding are never selected.
pub fn apply_mlm_mask(
    vocab: &Vocabulary,
    seq: &TokenSequence,
    rate: f64,
    seed: u64,
) -> Result<TokenSequence> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "mask rate must lie in (0, 1), got {rate}"
        )));
    }
    if seq.mlm_labels.is_some() {
        return Err(Error::Contract("sequence is already masked".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = seq.clone();
    let mut labels = vec![None; seq.ids.len()];
    for (pos, &id) in seq.ids.iter().enumerate() {
        let maskable =
            seq.attention_mask[pos] > 0.0 && id != CLS_ID && id != SEP_ID && id != PAD_ID;
        if !maskable {
            continue;
        }
        if rng.random::<f64>() >= rate {
            continue;
        }
        labels[pos] = Some(id);
        let action: f64 = rng.random();
        if action < 0.8 {
            out.ids[pos] = MASK_ID;
        } else if action < 0.9 {
            out.ids[pos] = random_content_id(vocab, &mut rng);
        }
    }
    out.mlm_labels = Some(labels);
    Ok(out)
}

fn random_content_id(vocab: &Vocabulary, rng: &mut ChaCha20Rng) -> usize {
    let content = vocab.len() - RESERVED_TOKENS.len();
    if content == 0 {
        return UNK_ID;
    }
    RESERVED_TOKENS.len() + rng.random_range(0..content)
}

/// A product image as a fixed grid of patch feature vectors, plus the
/// masking state used by the masked-patch objective.
#[derive(Debug, Clone)]
pub struct PatchSequence {
    /// P vectors of dimension d_img; masked patches are zeroed in place.
    pub features: Vec<Vec<f64>>,
    pub mpm_mask: Vec<bool>,
    /// Original features at masked positions, zero vectors elsewhere.
    pub mpm_targets: Vec<Vec<f64>>,
}

impl PatchSequence {
    pub fn new(features: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = features.first() else {
            return Err(Error::DegenerateInput("patch sequence is empty".into()));
        };
        let d = first.len();
        if d == 0 || features.iter().any(|p| p.len() != d) {
            return Err(Error::DegenerateInput(
                "patch vectors must share a positive dimension".into(),
            ));
        }
        let p = features.len();
        Ok(PatchSequence {
            features,
            mpm_mask: vec![false; p],
            mpm_targets: vec![vec![0.0; d]; p],
        })
    }

    pub fn num_patches(&self) -> usize {
        self.features.len()
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }
}

/// Zeroes each patch independently with probability `rate`, stashing the
/// original vector in `mpm_targets`.
pub fn apply_mpm_mask(patches: &PatchSequence, rate: f64, seed: u64) -> Result<PatchSequence> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "mask rate must lie in (0, 1), got {rate}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = patches.clone();
    for i in 0..out.features.len() {
        if rng.random::<f64>() < rate {
            out.mpm_mask[i] = true;
            out.mpm_targets[i] = out.features[i].clone();
            out.features[i].iter_mut().for_each(|x| *x = 0.0);
        }
    }
    Ok(out)
}
