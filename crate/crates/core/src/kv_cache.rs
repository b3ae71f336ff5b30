//! Append-only key/value store, one dense slot per (layer, KV head).
//!
//! Keys are stored with the rotary embedding already applied. The cache never
//! evicts; eviction-style baselines are expressed as selection masks over it.

use std::collections::BTreeSet;

use crate::error::{shape_err, Error, Result};
use crate::math::{MatRef, Matrix};

#[derive(Debug, Clone)]
struct HeadSlot {
    keys: Matrix,
    values: Matrix,
}

#[derive(Debug, Clone)]
pub struct KvCache {
    n_layers: usize,
    n_kv_heads: usize,
    head_dim: usize,
    // indexed [layer][kv_head]
    slots: Vec<Vec<HeadSlot>>,
}

impl KvCache {
    pub fn new(n_layers: usize, n_kv_heads: usize, head_dim: usize) -> Self {
        let slots = (0..n_layers)
            .map(|_| {
                (0..n_kv_heads)
                    .map(|_| HeadSlot {
                        keys: Matrix::with_cols(head_dim),
                        values: Matrix::with_cols(head_dim),
                    })
                    .collect()
            })
            .collect();
        Self {
            n_layers,
            n_kv_heads,
            head_dim,
            slots,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_kv_heads(&self) -> usize {
        self.n_kv_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Token count, taken from layer 0. Between decode steps every layer
    /// holds the same number of rows.
    pub fn len(&self) -> usize {
        self.layer_len(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layer_len(&self, layer: usize) -> usize {
        self.slots
            .get(layer)
            .and_then(|heads| heads.first())
            .map_or(0, |s| s.keys.rows())
    }

    pub fn is_uniform(&self) -> bool {
        let len = self.len();
        (0..self.n_layers).all(|l| self.layer_len(l) == len)
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.n_layers {
            return Err(Error::Bounds {
                index: layer,
                len: self.n_layers,
            });
        }
        Ok(())
    }

    fn check_head(&self, kv_head: usize) -> Result<()> {
        if kv_head >= self.n_kv_heads {
            return Err(Error::Bounds {
                index: kv_head,
                len: self.n_kv_heads,
            });
        }
        Ok(())
    }

    fn check_row_len(&self, what: &str, v: &[f32]) -> Result<()> {
        let want = self.n_kv_heads * self.head_dim;
        if v.len() != want {
            return Err(shape_err(format!(
                "{what} of length {} appended, expected {want}",
                v.len()
            )));
        }
        Ok(())
    }

    /// Append one token's keys and values for every KV head of `layer`.
    /// `k` and `v` are laid out head-major: `[n_kv_heads * head_dim]`.
    pub fn append(&mut self, layer: usize, k: &[f32], v: &[f32]) -> Result<()> {
        self.check_layer(layer)?;
        self.check_row_len("key", k)?;
        self.check_row_len("value", v)?;
        let hd = self.head_dim;
        for (h, slot) in self.slots[layer].iter_mut().enumerate() {
            slot.keys.push_row(&k[h * hd..(h + 1) * hd])?;
            slot.values.push_row(&v[h * hd..(h + 1) * hd])?;
        }
        Ok(())
    }

    /// Keys and values of one slot as borrowed views.
    pub fn full_view(&self, layer: usize, kv_head: usize) -> Result<(MatRef<'_>, MatRef<'_>)> {
        self.check_layer(layer)?;
        self.check_head(kv_head)?;
        let slot = &self.slots[layer][kv_head];
        Ok((slot.keys.view(), slot.values.view()))
    }

    /// Copy the listed rows, in the given order.
    pub fn gather(&self, layer: usize, kv_head: usize, indices: &[usize]) -> Result<(Matrix, Matrix)> {
        let (keys, values) = self.full_view(layer, kv_head)?;
        gather_rows(keys, values, indices)
    }

    /// Replace the rows at `positions` in every KV head of `layer`.
    /// Row `i` of `keys`/`values` is head-major, like [`KvCache::append`].
    pub fn overwrite(&mut self, layer: usize, positions: &[usize], keys: &Matrix, values: &Matrix) -> Result<()> {
        self.check_layer(layer)?;
        let width = self.n_kv_heads * self.head_dim;
        if keys.rows() != positions.len()
            || values.rows() != positions.len()
            || keys.cols() != width
            || values.cols() != width
        {
            return Err(shape_err(format!(
                "overwrite of {} positions with {}x{} keys and {}x{} values",
                positions.len(),
                keys.rows(),
                keys.cols(),
                values.rows(),
                values.cols()
            )));
        }
        let len = self.layer_len(layer);
        if let Some(&bad) = positions.iter().find(|&&p| p >= len) {
            return Err(Error::Bounds { index: bad, len });
        }
        let hd = self.head_dim;
        for (i, &p) in positions.iter().enumerate() {
            for (h, slot) in self.slots[layer].iter_mut().enumerate() {
                slot.keys.row_mut(p).copy_from_slice(&keys.row(i)[h * hd..(h + 1) * hd]);
                slot.values.row_mut(p).copy_from_slice(&values.row(i)[h * hd..(h + 1) * hd]);
            }
        }
        Ok(())
    }

    /// Overwrite a single position of one layer (all heads).
    pub fn overwrite_row(&mut self, layer: usize, position: usize, k: &[f32], v: &[f32]) -> Result<()> {
        self.check_layer(layer)?;
        self.check_row_len("key", k)?;
        self.check_row_len("value", v)?;
        let len = self.layer_len(layer);
        if position >= len {
            return Err(Error::Bounds { index: position, len });
        }
        let hd = self.head_dim;
        for (h, slot) in self.slots[layer].iter_mut().enumerate() {
            slot.keys.row_mut(position).copy_from_slice(&k[h * hd..(h + 1) * hd]);
            slot.values.row_mut(position).copy_from_slice(&v[h * hd..(h + 1) * hd]);
        }
        Ok(())
    }

    /// Drop every row at or after `len`, in all layers.
    pub fn truncate(&mut self, len: usize) {
        for heads in &mut self.slots {
            for slot in heads {
                slot.keys.truncate_rows(len);
                slot.values.truncate_rows(len);
            }
        }
    }

    /// FNV-1a over the bit patterns of every stored scalar.
    pub fn checksum(&self) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        for heads in &self.slots {
            for slot in heads {
                for &x in slot.keys.data().iter().chain(slot.values.data()) {
                    for b in x.to_bits().to_le_bytes() {
                        hash ^= u64::from(b);
                        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
                    }
                }
            }
        }
        hash
    }
}

pub(crate) fn gather_rows(keys: MatRef<'_>, values: MatRef<'_>, indices: &[usize]) -> Result<(Matrix, Matrix)> {
    let len = keys.rows();
    let mut k = Matrix::with_cols(keys.cols());
    let mut v = Matrix::with_cols(values.cols());
    for &i in indices {
        if i >= len {
            return Err(Error::Bounds { index: i, len });
        }
        k.push_row(keys.row(i))?;
        v.push_row(values.row(i))?;
    }
    Ok((k, v))
}

/// KV cache footprint in bytes: layers × KV heads × head dim × sequence
/// length × scalar size × 2 (keys and values).
pub fn size_bytes(n_layers: u64, n_kv_heads: u64, head_dim: u64, seq_len: u64, bytes_per_scalar: u64) -> u64 {
    n_layers * n_kv_heads * head_dim * seq_len * bytes_per_scalar * 2
}

/// Positions whose cached K/V were produced while decoding under a sparse
/// policy and have not been recomputed since.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PollutionLog {
    polluted: BTreeSet<usize>,
}

impl PollutionLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn mark_polluted(&mut self, position: usize, cache_len: usize) -> Result<()> {
        if position >= cache_len {
            return Err(Error::Bounds {
                index: position,
                len: cache_len,
            });
        }
        self.polluted.insert(position);
        Ok(())
    }

    pub fn clear(&mut self) {
        self.polluted.clear();
    }

    pub fn is_empty(&self) -> bool {
        self.polluted.is_empty()
    }

    pub fn len(&self) -> usize {
        self.polluted.len()
    }

    /// Polluted positions in increasing order.
    pub fn positions(&self) -> Vec<usize> {
        self.polluted.iter().copied().collect()
    }
}
