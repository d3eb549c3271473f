//! Byte-level tokenizer with one reserved beginning-of-sequence id.

/// Id of the beginning-of-sequence token (one past the last byte).
pub const BOS: u32 = 256;
/// 256 byte tokens plus BOS.
pub const VOCAB: usize = 257;

pub fn tokenize(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32).collect()
}

/// Inverse of [`tokenize`]; BOS and out-of-range ids are dropped.
pub fn detokenize(tokens: &[u32]) -> Vec<u8> {
    tokens
        .iter()
        .filter(|&&t| t < BOS)
        .map(|&t| t as u8)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn never_emits_bos() {
        let all: Vec<u8> = (0..=255).collect();
        let t = tokenize(&all);
        assert!(t.iter().all(|&id| id < BOS));
        assert_eq!(detokenize(&t), all);
        assert_eq!(detokenize(&[BOS, 104, 105]), b"hi");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            prop_assert_eq!(detokenize(&tokenize(&bytes)), bytes);
        }
    }
}
