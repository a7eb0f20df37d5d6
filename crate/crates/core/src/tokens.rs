//! `.tok` token streams: a 16-byte header (`BTOK`, version u32, vocab u32,
//! reserved u32) followed by little-endian u32 token ids.

use std::path::Path;

use crate::container::ContainerError;

pub const TOKEN_MAGIC: &[u8; 4] = b"BTOK";
pub const TOKEN_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    pub vocab: u32,
    pub tokens: Vec<u32>,
}

impl TokenStream {
    pub fn new(vocab: u32, tokens: Vec<u32>) -> Result<Self, ContainerError> {
        let s = Self { vocab, tokens };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<(), ContainerError> {
        if let Some((i, t)) = self
            .tokens
            .iter()
            .enumerate()
            .find(|(_, &t)| t >= self.vocab)
        {
            return Err(ContainerError::Tokens(format!(
                "token {t} at position {i} outside vocabulary of {}",
                self.vocab
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.tokens.len());
        out.extend_from_slice(TOKEN_MAGIC);
        out.extend_from_slice(&TOKEN_VERSION.to_le_bytes());
        out.extend_from_slice(&self.vocab.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for t in &self.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        if bytes.len() < 4 || &bytes[..4] != TOKEN_MAGIC {
            return Err(ContainerError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(ContainerError::Truncated("token header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != TOKEN_VERSION {
            return Err(ContainerError::UnsupportedVersion(version));
        }
        let body = &bytes[HEADER_LEN..];
        if !body.len().is_multiple_of(4) {
            return Err(ContainerError::Truncated("partial token id".into()));
        }
        let tokens = body
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Self::new(word(8), tokens)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, ContainerError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_header() {
        let s = TokenStream::new(50, vec![0, 49, 7]).unwrap();
        let b = s.to_bytes();
        assert_eq!(b.len(), 16 + 12);
        assert_eq!(&b[..4], b"BTOK");
        assert_eq!(TokenStream::from_bytes(&b).unwrap(), s);
    }

    #[test]
    fn rejects_out_of_vocab_and_garbage() {
        assert!(TokenStream::new(5, vec![5]).is_err());
        assert_eq!(
            TokenStream::from_bytes(b"NOPE").unwrap_err().code(),
            "bad-magic"
        );
        let mut b = TokenStream::new(5, vec![1]).unwrap().to_bytes();
        b.pop();
        assert_eq!(TokenStream::from_bytes(&b).unwrap_err().code(), "truncated");
    }
}
