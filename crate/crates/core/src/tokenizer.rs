//! Byte-level toy tokenizer: ids 0..=255 are raw bytes, then BOS and EOS.

use crate::error::{Error, Result};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const VOCAB_SIZE: usize = 258;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_bytes(text.as_bytes())
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<u32> {
        bytes.iter().map(|&b| b as u32).collect()
    }

    /// Raw bytes; special tokens are dropped.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                0..=255 => out.push(id as u8),
                BOS | EOS => {}
                _ => {
                    return Err(Error::TokenOutOfVocab {
                        id,
                        vocab_size: VOCAB_SIZE,
                    })
                }
            }
        }
        Ok(out)
    }

    /// Lossy UTF-8 decode.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    /// Display form of a single token, as shown in traces.
    pub fn surface(&self, id: u32) -> String {
        match id {
            BOS => "<bos>".into(),
            EOS => "<eos>".into(),
            0x20..=0x7e => (id as u8 as char).to_string(),
            0..=255 => format!("<0x{id:02X}>"),
            _ => format!("<unk:{id}>"),
        }
    }
}
