//! Seeded toy text corpus: lowercase words, `,`/`.` punctuation and `\n`
//! paragraph breaks, tokenized byte-wise.

use crate::model::BOS;
use crate::tensor::Rng;

const WORDS: &[&str] = &[
    "the", "of", "and", "to", "in", "a", "is", "that", "for", "it", "as", "was", "with", "be",
    "by", "on", "not", "he", "this", "are", "or", "his", "from", "at", "which", "but", "have",
    "an", "had", "they", "you", "were", "their", "one", "all", "we", "can", "her", "has",
    "there", "been", "if", "more", "when", "will", "would", "who", "so", "no", "river",
    "stone", "light", "market", "winter", "signal", "garden", "engine", "letter", "valley",
];

/// About `n_bytes` of text (the last sentence is completed, then cut).
pub fn generate_text(n_bytes: usize, rng: &mut Rng) -> Vec<u8> {
    let mut out = Vec::with_capacity(n_bytes + 128);
    while out.len() < n_bytes {
        let sentences = 3 + rng.below(4);
        for _ in 0..sentences {
            let words = 4 + rng.below(9);
            for w in 0..words {
                let word = WORDS[rng.below(WORDS.len())].as_bytes();
                if w == 0 {
                    out.push(word[0].to_ascii_uppercase());
                    out.extend_from_slice(&word[1..]);
                } else {
                    out.extend_from_slice(word);
                }
                if w + 1 < words {
                    if rng.below(8) == 0 {
                        out.push(b',');
                    }
                    out.push(b' ');
                }
            }
            out.extend_from_slice(b". ");
        }
        out.pop();
        out.push(b'\n');
    }
    out.truncate(n_bytes);
    out
}

/// Tokenized corpus of `n_bytes` bytes.
pub fn generate_corpus(n_bytes: usize, seed: u64) -> Vec<u32> {
    crate::model::tokenize(&generate_text(n_bytes, &mut Rng::seed(seed)))
}

/// `n` consecutive non-overlapping windows of `len` tokens from the start of
/// `tokens` (fewer if the corpus runs out).
pub fn windows(tokens: &[u32], n: usize, len: usize) -> Vec<Vec<u32>> {
    tokens.chunks_exact(len).take(n).map(<[u32]>::to_vec).collect()
}

/// `n` windows of `len` tokens at random offsets.
pub fn sample_windows(tokens: &[u32], n: usize, len: usize, rng: &mut Rng) -> Vec<Vec<u32>> {
    if tokens.len() < len {
        return Vec::new();
    }
    (0..n)
        .map(|_| {
            let start = rng.below(tokens.len() - len + 1);
            tokens[start..start + len].to_vec()
        })
        .collect()
}

/// `[BOS] ++ text`, the form sequences take when no prefix cache is active.
pub fn with_bos(text: &[u32]) -> Vec<u32> {
    let mut v = Vec::with_capacity(text.len() + 1);
    v.push(BOS);
    v.extend_from_slice(text);
    v
}
