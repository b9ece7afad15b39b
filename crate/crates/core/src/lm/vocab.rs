use crate::error::{Error, Result};

/// Byte-level vocabulary: four reserved specials followed by the 256 byte values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Vocab;

impl Vocab {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const UNK: usize = 3;
    const BYTE_OFFSET: usize = 4;
    pub const SIZE: usize = Self::BYTE_OFFSET + 256;

    pub fn size(&self) -> usize {
        Self::SIZE
    }

    pub fn byte_id(b: u8) -> usize {
        Self::BYTE_OFFSET + b as usize
    }

    /// `[BOS]` followed by one id per UTF-8 byte.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        std::iter::once(Self::BOS)
            .chain(text.bytes().map(Self::byte_id))
            .collect()
    }

    /// Inverse of [`tokenize`](Self::tokenize); special ids are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut bytes = Vec::with_capacity(ids.len());
        for &id in ids {
            if id >= Self::SIZE {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: id,
                    bound: Self::SIZE,
                });
            }
            if id >= Self::BYTE_OFFSET {
                bytes.push((id - Self::BYTE_OFFSET) as u8);
            }
        }
        String::from_utf8(bytes).map_err(|e| Error::Data(format!("detokenized bytes are not utf-8: {e}")))
    }
}
