//! Sources of [`EmbeddingBlock`](crate::interchange::EmbeddingBlock)s: an HTTP
//! embedding service and a deterministic hash-based mock.

mod client;
mod mock;

pub use client::{fetch_embeddings, EmbedRequest, EmbeddingClient, EndpointConfig, RetryPolicy};
pub use mock::{marker_direction, mock_embed, token_vector, MarkerHook, MockEmbedder};
