use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
const N_SPECIAL: usize = 3;

/// Byte-level tokenizer over the set of bytes observed in a corpus.
///
/// Ids `0..3` are PAD, BOS and EOS; byte ids follow in ascending byte order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TokenizerRepr", into = "TokenizerRepr")]
pub struct Tokenizer {
    bytes: Vec<u8>,
    index: Vec<Option<TokenId>>,
}

#[derive(Serialize, Deserialize)]
struct TokenizerRepr {
    bytes: Vec<u8>,
}

impl TryFrom<TokenizerRepr> for Tokenizer {
    type Error = Error;

    fn try_from(r: TokenizerRepr) -> Result<Self> {
        let set: BTreeSet<u8> = r.bytes.iter().copied().collect();
        if set.len() != r.bytes.len() || !r.bytes.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Format(
                "tokenizer bytes must be strictly ascending".into(),
            ));
        }
        Ok(Tokenizer::from_byte_set(set))
    }
}

impl From<Tokenizer> for TokenizerRepr {
    fn from(t: Tokenizer) -> Self {
        TokenizerRepr { bytes: t.bytes }
    }
}

impl Tokenizer {
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<u8> = texts.into_iter().flat_map(|t| t.bytes()).collect();
        Self::from_byte_set(set)
    }

    fn from_byte_set(set: BTreeSet<u8>) -> Self {
        let bytes: Vec<u8> = set.into_iter().collect();
        let mut index = vec![None; 256];
        for (i, &b) in bytes.iter().enumerate() {
            index[b as usize] = Some((i + N_SPECIAL) as TokenId);
        }
        Tokenizer { bytes, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.bytes.len() + N_SPECIAL
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.bytes()
            .map(|b| {
                self.index[b as usize]
                    .ok_or_else(|| Error::Input(format!("byte {b:#04x} is not in the vocabulary")))
            })
            .collect()
    }

    /// `BOS` followed by the encoded text.
    pub fn encode_with_bos(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(text)?);
        Ok(ids)
    }

    /// Single-token encoding, or an error if `text` is not exactly one token.
    pub fn single(&self, text: &str) -> Result<TokenId> {
        match self.encode(text)?.as_slice() {
            [id] => Ok(*id),
            ids => Err(Error::Input(format!(
                "{text:?} encodes to {} tokens, expected one",
                ids.len()
            ))),
        }
    }

    /// Inverse of [`Tokenizer::encode`]; special tokens are dropped.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            let id = id as usize;
            if id < N_SPECIAL {
                continue;
            }
            let b = self
                .bytes
                .get(id - N_SPECIAL)
                .ok_or_else(|| Error::Input(format!("token id {id} out of range")))?;
            out.push(*b);
        }
        String::from_utf8(out).map_err(|e| Error::Input(format!("decoded bytes: {e}")))
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < N_SPECIAL
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn specials_precede_bytes() {
        let t = Tokenizer::from_corpus(["ba", "c"]);
        assert_eq!(t.vocab_size(), 6);
        assert_eq!(t.encode("abc").unwrap(), vec![3, 4, 5]);
        assert_eq!(t.encode_with_bos("a").unwrap(), vec![BOS, 3]);
    }

    #[test]
    fn unknown_bytes_are_rejected() {
        let t = Tokenizer::from_corpus(["abc"]);
        assert!(t.encode("abz").is_err());
        assert!(t.single("ab").is_err());
        assert_eq!(t.single("b").unwrap(), 4);
    }

    #[test]
    fn serde_roundtrip() {
        let t = Tokenizer::from_corpus(["héllo wörld"]);
        let s = serde_json::to_string(&t).unwrap();
        let back: Tokenizer = serde_json::from_str(&s).unwrap();
        assert_eq!(t, back);
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(s in "\\PC{0,40}") {
            let t = Tokenizer::from_corpus([s.as_str()]);
            let ids = t.encode(&s).unwrap();
            prop_assert!(ids.iter().all(|&i| !Tokenizer::is_special(i)));
            prop_assert_eq!(t.decode(&ids).unwrap(), s);
        }
    }
}
