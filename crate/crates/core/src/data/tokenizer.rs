//! Byte-level tokenizer: ids 0..=255 are raw UTF-8 bytes, followed by three
//! specials.

use crate::error::{Error, Result};

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;
pub const VOCAB_SIZE: usize = 259;

/// Bytes of `text`, wrapped in `BOS … EOS` when `framed`.
pub fn tokenize(text: &str, framed: bool) -> Vec<usize> {
    let mut out = Vec::with_capacity(text.len() + 2);
    if framed {
        out.push(BOS);
    }
    out.extend(text.bytes().map(usize::from));
    if framed {
        out.push(EOS);
    }
    out
}

/// Inverse of [`tokenize`]. Specials are dropped; invalid UTF-8 is replaced
/// with U+FFFD.
pub fn detokenize(ids: &[usize]) -> Result<String> {
    let mut bytes = Vec::with_capacity(ids.len());
    for &id in ids {
        match id {
            0..=255 => bytes.push(id as u8),
            BOS | EOS | PAD => {}
            _ => {
                return Err(Error::Index {
                    what: "byte vocabulary",
                    index: id,
                    bound: VOCAB_SIZE,
                })
            }
        }
    }
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}
