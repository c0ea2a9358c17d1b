use crate::error::Result;
use crate::signal::char_index;

pub const SPACE: usize = 26;
pub const SOT: usize = 27;
pub const EOT: usize = 28;
pub const PAD: usize = 29;
/// Reserved; never produced by `encode`.
pub const UNK: usize = 30;
pub const VOCAB_SIZE: usize = 31;

/// Character tokenizer: `a..=z → 0..=25`, space → 26, then the specials.
#[derive(Clone, Copy, Debug, Default)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars().map(char_index).collect()
    }

    /// Drops special tokens and stops at the first end-of-transcript.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::with_capacity(ids.len());
        for &id in ids {
            match id {
                0..=25 => out.push((b'a' + id as u8) as char),
                SPACE => out.push(' '),
                EOT => break,
                _ => {}
            }
        }
        out
    }

    /// Teacher-forcing pair: `[SOT] + text` in, `text + [EOT]` out.
    pub fn training_pair(&self, text: &str) -> Result<(Vec<usize>, Vec<usize>)> {
        let ids = self.encode(text)?;
        let mut input = Vec::with_capacity(ids.len() + 1);
        input.push(SOT);
        input.extend_from_slice(&ids);
        let mut target = ids;
        target.push(EOT);
        Ok((input, target))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn encode_decode_identity(text in "[a-z ]{0,32}") {
            let t = Tokenizer;
            prop_assert_eq!(t.decode(&t.encode(&text).unwrap()), text);
        }
    }

    #[test]
    fn specials_are_fixed() {
        assert_eq!((SOT, EOT, PAD), (27, 28, 29));
        let t = Tokenizer;
        assert_eq!(t.decode(&[SOT, 0, EOT, 1]), "a");
        assert!(t.encode("Hi").is_err());
        let (i, o) = t.training_pair("ab").unwrap();
        assert_eq!(i, vec![SOT, 0, 1]);
        assert_eq!(o, vec![0, 1, EOT]);
    }
}
