//! Chunked autoregressive inference with fixed-size per-block caches.

mod engine;
mod state;

pub use engine::{
    cache_footprint, latency_model, offline_generate, uniform_schedule, CacheBytes, ChunkPlan, LatencyInputs, LatencyReport, StreamEngine,
};
pub use state::{BlockCache, ConvRing, LinAttnState, SsaKvWindow};

#[cfg(test)]
mod tests;
