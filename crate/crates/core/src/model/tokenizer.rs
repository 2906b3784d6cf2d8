// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte-level tokenizer: token id `b` is byte `b`, specials follow at 256.

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BOS: TokenId = 256;
pub const EOS: TokenId = 257;
pub const PAD: TokenId = 258;

/// Bytes plus the three specials.
pub const BASE_VOCAB: usize = 259;

pub fn is_special(id: TokenId) -> bool {
    id >= 256
}

/// Encode UTF-8 bytes. Never adds BOS; callers prepend it.
pub fn tokenize(text: &str) -> Vec<TokenId> {
    text.bytes().map(TokenId::from).collect()
}

/// Decode ids back to text. Known specials render as nothing; invalid UTF-8
/// is replaced lossily.
pub fn detokenize(ids: &[TokenId]) -> Result<String> {
    let mut bytes = Vec::with_capacity(ids.len());
    for &id in ids {
        match id {
            0..=255 => bytes.push(id as u8),
            BOS | EOS | PAD => {}
            other => return Err(Error::UnknownToken(other)),
        }
    }
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

/// `[BOS] ++ tokenize(text)`.
pub fn encode_prompt(text: &str) -> Vec<TokenId> {
    let mut ids = Vec::with_capacity(text.len() + 1);
    ids.push(BOS);
    ids.extend(tokenize(text));
    ids
}
