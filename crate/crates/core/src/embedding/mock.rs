use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::interchange::EmbeddingBlock;

use super::EmbedRequest;

fn stable_hash(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn expand(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // rounded to binary32 so blocks survive a save/load unchanged
    (0..dim)
        .map(|_| rng.gen_range(-1.0f64..=1.0) as f32 as f64)
        .collect()
}

/// Hash-seeded vector in `[-1, 1]^dim` for one token (independent of position).
pub fn token_vector(token: &str, dim: usize) -> Vec<f64> {
    expand(stable_hash(token.as_bytes()), dim)
}

/// Fixed unit direction along which the marker hook displaces its token.
pub fn marker_direction(dim: usize) -> Vec<f64> {
    let v = expand(stable_hash(b"tlg/mock/marker-direction"), dim);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Test hook: every occurrence of `token` gets `offset · marker_direction`
/// added to its hashed vector, giving synthetic data a known separating signal.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerHook {
    pub token: String,
    pub offset: f64,
}

/// Deterministic stand-in for a text encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct MockEmbedder {
    pub dim: usize,
    pub max_tokens: usize,
    /// Off unless explicitly set.
    pub marker: Option<MarkerHook>,
}

impl MockEmbedder {
    pub fn new(dim: usize, max_tokens: usize) -> Self {
        MockEmbedder {
            dim: dim.max(1),
            max_tokens: max_tokens.max(1),
            marker: None,
        }
    }

    pub fn with_marker(mut self, token: impl Into<String>, offset: f64) -> Self {
        self.marker = Some(MarkerHook {
            token: token.into(),
            offset,
        });
        self
    }

    fn vector(&self, token: &str, direction: Option<&[f64]>) -> Vec<f64> {
        let mut v = token_vector(token, self.dim);
        if let (Some(hook), Some(u)) = (&self.marker, direction) {
            if hook.token == token {
                for (x, &ui) in v.iter_mut().zip(u) {
                    *x = (*x + hook.offset * ui) as f32 as f64;
                }
            }
        }
        v
    }

    /// Whitespace tokens, truncated to `max_tokens` and padded with masked
    /// zero vectors. Requests must carry non-empty facts.
    pub fn embed(&self, request: &EmbedRequest) -> EmbeddingBlock<f64> {
        let (n, t, d) = (request.facts.len(), self.max_tokens, self.dim);
        let direction = self.marker.as_ref().map(|_| marker_direction(d));
        let mut mask = vec![0u8; n * t];
        let mut data = vec![0.0f64; n * t * d];
        for (i, fact) in request.facts.iter().enumerate() {
            for (j, tok) in fact.split_whitespace().take(t).enumerate() {
                mask[i * t + j] = 1;
                let start = (i * t + j) * d;
                data[start..start + d].copy_from_slice(&self.vector(tok, direction.as_deref()));
            }
        }
        EmbeddingBlock::new(request.image_id.clone(), n, t, d, mask, data)
            .expect("mock blocks satisfy block invariants for non-blank facts")
    }
}

/// Mock embedding with the marker hook disabled.
pub fn mock_embed(request: &EmbedRequest, dim: usize, max_tokens: usize) -> EmbeddingBlock<f64> {
    MockEmbedder::new(dim, max_tokens).embed(request)
}
