use std::collections::BTreeSet;

use super::{unit_gaussian, TokenId, Vocab, World, WorldError, CONNECTOR_STREAM, FALLBACK_STREAM};
use crate::embedding::{Embedding, EMBED_DIM};

/// Anything that maps caption text into the joint embedding space.
pub trait TextEncoder {
    fn encode(&self, caption: &str) -> Result<Embedding, WorldError>;
}

/// Deterministic stand-in for a pretrained text encoder.
///
/// `normalize(Σ basis[e] for distinct events e + 0.1 · Σ h(c) per connector
/// occurrence c)`, where `h` is a seeded unit vector per connector token.
/// Special tokens are ignored; a caption with no tokens at all maps to a fixed
/// seeded unit vector.
#[derive(Debug, Clone)]
pub struct MockTextEncoder {
    vocab: Vocab,
    basis: Vec<Vec<f64>>,
    connector_vectors: Vec<Vec<f64>>,
    fallback: Embedding,
}

const CONNECTOR_SCALE: f64 = 0.1;

impl MockTextEncoder {
    pub fn new(world: &World) -> Self {
        let vocab = world.vocab.clone();
        let seed = world.spec.seed;
        let connector_vectors =
            (0..vocab.len())
                .map(|id| {
                    if vocab.is_connector(id) {
                        unit_gaussian(seed, CONNECTOR_STREAM + id as u64)
                    } else {
                        Vec::new()
                    }
                })
                .collect();
        let fallback = Embedding::normalized(&unit_gaussian(seed, FALLBACK_STREAM));
        Self { vocab, basis: world.basis.clone(), connector_vectors, fallback }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn encode_tokens(&self, tokens: &[TokenId]) -> Result<Embedding, WorldError> {
        self.vocab.check_ids(tokens)?;
        let content: Vec<TokenId> = tokens.iter().copied().filter(|&t| !self.vocab.is_special(t)).collect();
        if content.is_empty() {
            return Ok(self.fallback.clone());
        }
        let mut v = vec![0.0; EMBED_DIM];
        let events: BTreeSet<usize> = content.iter().filter_map(|&t| self.vocab.event_of(t)).collect();
        for e in events {
            v.iter_mut().zip(&self.basis[e]).for_each(|(x, b)| *x += b);
        }
        for &t in content.iter().filter(|&&t| self.vocab.is_connector(t)) {
            v.iter_mut().zip(&self.connector_vectors[t]).for_each(|(x, h)| *x += CONNECTOR_SCALE * h);
        }
        Ok(Embedding::normalized(&v))
    }
}

impl TextEncoder for MockTextEncoder {
    fn encode(&self, caption: &str) -> Result<Embedding, WorldError> {
        self.encode_tokens(&self.vocab.encode(caption)?)
    }
}
