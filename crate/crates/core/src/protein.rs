//! Protein sequences as fixed-length alphabet-index token arrays.

use thiserror::Error;

pub const DEFAULT_SEQ_LEN: usize = 1000;
/// Token values 1..=26 are letters; 0 is padding.
pub const VOCAB_SIZE: usize = 27;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProteinError {
    #[error("invalid residue {residue:?} at position {position}")]
    InvalidResidue { position: usize, residue: char },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<u8>);

impl TokenSequence {
    pub fn tokens(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of non-padding tokens.
    pub fn residue_count(&self) -> usize {
        self.0.iter().take_while(|&&t| t != 0).count()
    }

    /// Letters of the unpadded prefix.
    pub fn detokenize(&self) -> String {
        self.0
            .iter()
            .take_while(|&&t| t != 0)
            .map(|&t| (b'A' + t - 1) as char)
            .collect()
    }

    /// Raw token constructor; every token must lie in 0..27.
    pub fn from_tokens(tokens: Vec<u8>) -> Option<Self> {
        tokens
            .iter()
            .all(|&t| (t as usize) < VOCAB_SIZE)
            .then_some(TokenSequence(tokens))
    }
}

/// Map residues to their 1-based alphabet index, truncating to `n` tokens
/// (N-terminal prefix kept) and padding the tail with zeros.
pub fn tokenize(sequence: &str, n: usize) -> Result<TokenSequence, ProteinError> {
    let mut tokens = vec![0u8; n];
    for (position, residue) in sequence.chars().enumerate() {
        let upper = residue.to_ascii_uppercase();
        if !upper.is_ascii_uppercase() {
            return Err(ProteinError::InvalidResidue { position, residue });
        }
        if position < n {
            tokens[position] = upper as u8 - b'A' + 1;
        }
    }
    Ok(TokenSequence(tokens))
}
