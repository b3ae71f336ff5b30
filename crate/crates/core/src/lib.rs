//! A small decoder-only transformer inference engine built around
//! position-persistent sparse attention: a few layers pick the top-k tokens
//! from dense attention scores and the layers after them attend only to that
//! fixed set of positions.
//!
//! The crate also ships the baselines it is compared against (per-layer
//! exact top-k, page-bound estimation, sink plus recent window), periodic
//! KV-cache correction, and the diagnostics used to study token reuse across
//! layers.

pub mod analysis;
pub mod attention;
pub mod error;
pub mod kv_cache;
pub mod math;
pub mod model;
pub mod rng;
pub mod weights_io;

pub use error::{Error, Result};
pub use kv_cache::{KvCache, PollutionLog};
pub use model::{
    cache_correction, decode_step, default_reselect_layer, default_schedule, generate, prefill, DecodeConfig,
    DecodeMode, LayerRole, LayerSchedule, ModelConfig, ModelWeights, Session,
};
