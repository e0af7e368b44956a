//! Frozen text tower: signed hashing of character n-grams.

use super::ModelError;

pub const DEFAULT_TEXT_FEAT_DIM: usize = 256;

/// FNV-1a, 64 bit.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercased text with whitespace collapsed and a single space of padding
/// on each side, so word boundaries show up in the n-grams.
pub fn normalize_text(s: &str) -> String {
    let body = s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    format!(" {body} ")
}

/// Character n-grams (`n` in 3..=5) of the normalized text.
pub fn char_ngrams(s: &str) -> Vec<String> {
    let chars: Vec<char> = normalize_text(s).chars().collect();
    let mut out = Vec::new();
    for n in 3..=5 {
        if chars.len() < n {
            continue;
        }
        for w in chars.windows(n) {
            out.push(w.iter().collect());
        }
    }
    out
}

/// Deterministic unit-norm embedding of `text` into `dim` signed buckets.
pub fn embed_text(text: &str, dim: usize) -> Result<Vec<f64>, ModelError> {
    if text.trim().is_empty() {
        return Err(ModelError::EmptyText);
    }
    if dim == 0 {
        return Err(ModelError::Config("text_feat_dim must be positive".into()));
    }
    let mut v = vec![0.0; dim];
    for gram in char_ngrams(text) {
        let h = fnv1a(gram.as_bytes());
        let bucket = (h % dim as u64) as usize;
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[bucket] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    } else {
        // every n-gram cancelled out; fall back to a fixed unit vector
        v[(fnv1a(text.as_bytes()) % dim as u64) as usize] = 1.0;
    }
    Ok(v)
}
