use crate::error::{Error, Result};

/// A token id in `[0, vocab_size)`.
pub type Token = u32;

/// Shape and seed of the toy decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub seed: u64,
    pub max_context: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 8,
            num_layers: 2,
            num_heads: 2,
            head_dim: 4,
            seed: 42,
            max_context: 8,
        }
    }
}

impl ModelConfig {
    pub fn model_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    /// Hidden width of the per-layer MLP.
    pub fn mlp_dim(&self) -> usize {
        2 * self.model_dim()
    }

    /// Number of scalars in one position's KV state across all layers.
    pub fn kv_stride(&self) -> usize {
        2 * self.num_layers * self.model_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        if self.vocab_size > u16::MAX as usize {
            return bad("vocab_size must fit in 16 bits");
        }
        if self.num_layers == 0 {
            return bad("layers must be at least 1");
        }
        if self.num_heads == 0 || self.head_dim == 0 {
            return bad("heads and head_dim must be positive");
        }
        if self.max_context == 0 || self.max_context > u16::MAX as usize {
            return bad("max_context must be in [1, 65535]");
        }
        Ok(())
    }

    /// Checks that `tokens` is a valid (possibly empty) input for this shape.
    pub fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        if tokens.len() > self.max_context {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.max_context,
            });
        }
        if let Some(&token) = tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token,
                vocab: self.vocab_size,
            });
        }
        Ok(())
    }
}

/// An owned token sequence.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenSeq(pub Vec<Token>);

impl TokenSeq {
    pub fn new(tokens: Vec<Token>) -> Self {
        Self(tokens)
    }

    pub fn as_slice(&self) -> &[Token] {
        &self.0
    }
}

impl std::ops::Deref for TokenSeq {
    type Target = [Token];

    fn deref(&self) -> &[Token] {
        &self.0
    }
}

impl From<Vec<Token>> for TokenSeq {
    fn from(tokens: Vec<Token>) -> Self {
        Self(tokens)
    }
}

impl From<&[Token]> for TokenSeq {
    fn from(tokens: &[Token]) -> Self {
        Self(tokens.to_vec())
    }
}

/// Length of the longest common prefix of two token slices.
pub fn common_prefix_len(a: &[Token], b: &[Token]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}
