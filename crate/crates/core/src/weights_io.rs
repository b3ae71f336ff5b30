//! `TDW1` weight files and deterministic synthetic weights.
//!
//! Layout (all little-endian):
//!
//! | offset | size | field          |
//! |--------|------|----------------|
//! | 0      | 4    | magic `TDW1`   |
//! | 4      | 4    | format version (u32, = 1) |
//! | 8      | 24   | n_layers, n_heads, n_kv_heads, head_dim, d_ff, vocab_size (u32 each) |
//! | 32     | 4    | rope_theta (f32) |
//! | 36     | 4    | norm_eps (f32) |
//! | 40     | 4·N  | tensors in [`ModelWeights::tensor_layout`] order, row-major f32 |

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights};
use crate::rng::SplitMix64;

pub const MAGIC: [u8; 4] = *b"TDW1";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 40;

pub fn file_size(config: &ModelConfig) -> usize {
    HEADER_LEN + 4 * ModelWeights::scalar_count(config)
}

fn dim_u32(name: &str, v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{name} = {v} does not fit in u32")))
}

pub fn encode_header(config: &ModelConfig) -> Result<[u8; HEADER_LEN]> {
    let mut out = [0u8; HEADER_LEN];
    out[..4].copy_from_slice(&MAGIC);
    out[4..8].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
    let dims = [
        ("n_layers", config.n_layers),
        ("n_heads", config.n_heads),
        ("n_kv_heads", config.n_kv_heads),
        ("head_dim", config.head_dim),
        ("d_ff", config.d_ff),
        ("vocab_size", config.vocab_size),
    ];
    for (i, (name, v)) in dims.into_iter().enumerate() {
        let at = 8 + 4 * i;
        out[at..at + 4].copy_from_slice(&dim_u32(name, v)?.to_le_bytes());
    }
    out[32..36].copy_from_slice(&config.rope_theta.to_le_bytes());
    out[36..40].copy_from_slice(&config.norm_eps.to_le_bytes());
    Ok(out)
}

pub fn decode_header(bytes: &[u8]) -> Result<ModelConfig> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("file of {} bytes is shorter than the header", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let config = ModelConfig {
        n_layers: word(8) as usize,
        n_heads: word(12) as usize,
        n_kv_heads: word(16) as usize,
        head_dim: word(20) as usize,
        d_ff: word(24) as usize,
        vocab_size: word(28) as usize,
        rope_theta: f32::from_bits(word(32)),
        norm_eps: f32::from_bits(word(36)),
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("invalid header dimensions: {e}")))?;
    Ok(config)
}

pub fn to_bytes(weights: &ModelWeights) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(file_size(&weights.config));
    out.extend_from_slice(&encode_header(&weights.config)?);
    for t in weights.tensors() {
        for x in t {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelWeights> {
    let config = decode_header(bytes)?;
    let expected = file_size(&config);
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "payload is {} bytes, dimensions imply {expected}",
            bytes.len()
        )));
    }
    let mut at = HEADER_LEN;
    let tensors = ModelWeights::tensor_layout(&config)
        .iter()
        .map(|spec| {
            let t: Vec<f32> = bytes[at..at + 4 * spec.len()]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            at += 4 * spec.len();
            t
        })
        .collect();
    ModelWeights::from_tensors(config, tensors)
}

pub fn save_weights(weights: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(weights)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelWeights> {
    from_bytes(&fs::read(path)?)
}

/// Deterministic Glorot-uniform weights from a single SplitMix64 stream.
///
/// Tensors are filled in file order. Each matrix draws from `[-a, a)` with
/// `a = sqrt(6 / (rows + cols))`; norm weights are set to 1 and consume no
/// draws.
pub fn synth_weights(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = SplitMix64::new(seed);
    let tensors = ModelWeights::tensor_layout(config)
        .iter()
        .map(|spec| {
            if spec.is_norm {
                vec![1.0; spec.len()]
            } else {
                let a = (6.0f64 / (spec.rows + spec.cols) as f64).sqrt() as f32;
                (0..spec.len()).map(|_| rng.next_symmetric_f32(a)).collect()
            }
        })
        .collect();
    ModelWeights::from_tensors(*config, tensors)
}
