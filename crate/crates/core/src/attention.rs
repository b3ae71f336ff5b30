//! Attention kernels and token-selection policies, instrumented with load
//! counters.
//!
//! All kernels work on one KV head at a time and take the group of query
//! heads that share it (GQA). A kernel that reads the KV rows of a head
//! counts those rows once, however many query heads use them.
//!
//! Selection ranks tokens by raw inner products `q·k`. The `1/sqrt(d)` scale
//! and the softmax are applied only when forming outputs; both are monotone,
//! so the ranking is the same as ranking by attention probability.

use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_cache::gather_rows;
use crate::math::{arg_top_k, dot, softmax_row, MatRef};

pub const DEFAULT_PAGE_SIZE: usize = 16;
pub const DEFAULT_SINKS: usize = 4;

/// How the scores of the query heads in one GQA group are combined into a
/// single ranking for the shared KV head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupAggregation {
    #[default]
    Sum,
    Max,
}

/// Selected token positions, one list per KV head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBuffer {
    per_head: Vec<Vec<usize>>,
}

impl TokenBuffer {
    pub fn new(n_kv_heads: usize) -> Self {
        Self {
            per_head: vec![Vec::new(); n_kv_heads],
        }
    }

    pub fn set(&mut self, kv_head: usize, indices: Vec<usize>) {
        self.per_head[kv_head] = indices;
    }

    pub fn get(&self, kv_head: usize) -> &[usize] {
        &self.per_head[kv_head]
    }

    pub fn is_empty(&self) -> bool {
        self.per_head.iter().all(Vec::is_empty)
    }

    pub fn clear(&mut self) {
        self.per_head.iter_mut().for_each(Vec::clear);
    }

    /// Every head non-empty, indices strictly ascending and below `len`.
    pub fn validate(&self, len: usize) -> Result<()> {
        for indices in &self.per_head {
            if indices.is_empty() {
                return Err(Error::State("token buffer has an empty head".into()));
            }
            if indices.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::State("token buffer indices not strictly ascending".into()));
            }
            if let Some(&last) = indices.last() {
                if last >= len {
                    return Err(Error::Bounds { index: last, len });
                }
            }
        }
        Ok(())
    }
}

/// Token rows read by one layer during one decode step, summed over KV heads.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerLoads {
    pub key_token_loads: u64,
    pub value_token_loads: u64,
    /// Rows (or page summaries) read only to rank tokens.
    pub selection_scans: u64,
}

impl LayerLoads {
    fn record_kv(&mut self, rows: usize) {
        self.key_token_loads += rows as u64;
        self.value_token_loads += rows as u64;
    }
}

impl AddAssign for LayerLoads {
    fn add_assign(&mut self, rhs: Self) {
        self.key_token_loads += rhs.key_token_loads;
        self.value_token_loads += rhs.value_token_loads;
        self.selection_scans += rhs.selection_scans;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepLoads {
    /// Cache length seen by attention in this step (after the append).
    pub cache_len: usize,
    pub layers: Vec<LayerLoads>,
}

/// Per-step, per-layer load counters for a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessStats {
    pub n_layers: usize,
    pub n_kv_heads: usize,
    pub steps: Vec<StepLoads>,
}

impl AccessStats {
    pub fn new(n_layers: usize, n_kv_heads: usize) -> Self {
        Self {
            n_layers,
            n_kv_heads,
            steps: Vec::new(),
        }
    }

    pub fn begin_step(&mut self, cache_len: usize) -> &mut StepLoads {
        self.steps.push(StepLoads {
            cache_len,
            layers: vec![LayerLoads::default(); self.n_layers],
        });
        self.steps.last_mut().expect("just pushed")
    }

    pub fn totals(&self) -> LayerLoads {
        let mut total = LayerLoads::default();
        for step in &self.steps {
            for l in &step.layers {
                total += *l;
            }
        }
        total
    }

    pub fn layer_totals(&self) -> Vec<LayerLoads> {
        let mut out = vec![LayerLoads::default(); self.n_layers];
        for step in &self.steps {
            for (acc, l) in out.iter_mut().zip(&step.layers) {
                *acc += *l;
            }
        }
        out
    }

    /// Merge counters gathered by another worker for the same steps.
    pub fn merge(&mut self, other: &AccessStats) -> Result<()> {
        if other.steps.len() != self.steps.len() || other.n_layers != self.n_layers {
            return Err(Error::State("cannot merge stats of different shapes".into()));
        }
        for (a, b) in self.steps.iter_mut().zip(&other.steps) {
            for (x, y) in a.layers.iter_mut().zip(&b.layers) {
                *x += *y;
            }
        }
        Ok(())
    }
}

fn check_kv(keys: MatRef<'_>, values: MatRef<'_>) -> Result<()> {
    if keys.rows() != values.rows() || keys.cols() != values.cols() {
        return Err(Error::Shape(format!(
            "keys {}x{} vs values {}x{}",
            keys.rows(),
            keys.cols(),
            values.rows(),
            values.cols()
        )));
    }
    if keys.rows() == 0 {
        return Err(Error::State("attention over an empty cache".into()));
    }
    Ok(())
}

fn check_queries(queries: &[&[f32]], head_dim: usize) -> Result<()> {
    if queries.is_empty() {
        return Err(Error::Shape("empty query group".into()));
    }
    if let Some(q) = queries.iter().find(|q| q.len() != head_dim) {
        return Err(Error::Shape(format!(
            "query of length {} against head_dim {head_dim}",
            q.len()
        )));
    }
    Ok(())
}

/// Raw inner products `q·k_j` for every key row.
pub fn inner_products(q: &[f32], keys: MatRef<'_>) -> Vec<f32> {
    (0..keys.rows()).map(|j| dot(q, keys.row(j))).collect()
}

fn aggregate(per_head: &[Vec<f32>], how: GroupAggregation) -> Vec<f32> {
    let mut out = per_head[0].clone();
    for scores in &per_head[1..] {
        for (o, &s) in out.iter_mut().zip(scores) {
            match how {
                GroupAggregation::Sum => *o += s,
                GroupAggregation::Max => *o = o.max(s),
            }
        }
    }
    out
}

/// One ranking score per token for the whole query group.
pub fn group_scores(queries: &[&[f32]], keys: MatRef<'_>, how: GroupAggregation) -> Result<Vec<f32>> {
    check_queries(queries, keys.cols())?;
    let per_head: Vec<Vec<f32>> = queries.iter().map(|q| inner_products(q, keys)).collect();
    Ok(aggregate(&per_head, how))
}

fn weighted_values(raw: &[f32], values: MatRef<'_>) -> Result<Vec<f32>> {
    let scale = 1.0 / (values.cols() as f32).sqrt();
    let scaled: Vec<f32> = raw.iter().map(|&s| s * scale).collect();
    let probs = softmax_row(&scaled)?;
    let mut out = vec![0.0f32; values.cols()];
    for (j, &p) in probs.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(values.row(j)) {
            *o += p * v;
        }
    }
    Ok(out)
}

/// Per-head outputs and raw inner products.
type Attended = (Vec<Vec<f32>>, Vec<Vec<f32>>);

fn attend_unrecorded(queries: &[&[f32]], keys: MatRef<'_>, values: MatRef<'_>) -> Result<Attended> {
    check_kv(keys, values)?;
    check_queries(queries, keys.cols())?;
    let raw: Vec<Vec<f32>> = queries.iter().map(|q| inner_products(q, keys)).collect();
    let outs = raw
        .iter()
        .map(|r| weighted_values(r, values))
        .collect::<Result<Vec<_>>>()?;
    Ok((outs, raw))
}

/// `softmax(q·Kᵀ / sqrt(d)) · V` for a single query head.
pub fn full_attention(q: &[f32], keys: MatRef<'_>, values: MatRef<'_>, loads: &mut LayerLoads) -> Result<Vec<f32>> {
    let mut outs = grouped_full_attention(&[q], keys, values, loads)?;
    Ok(outs.pop().expect("one query"))
}

/// Dense attention for every query head of a GQA group.
pub fn grouped_full_attention(
    queries: &[&[f32]],
    keys: MatRef<'_>,
    values: MatRef<'_>,
    loads: &mut LayerLoads,
) -> Result<Vec<Vec<f32>>> {
    let (outs, _) = attend_unrecorded(queries, keys, values)?;
    loads.record_kv(keys.rows());
    Ok(outs)
}

/// Dense attention that also returns the top-`m` tokens of the group,
/// reusing the inner products already computed for the outputs.
pub fn full_attention_with_selection(
    queries: &[&[f32]],
    keys: MatRef<'_>,
    values: MatRef<'_>,
    m: usize,
    how: GroupAggregation,
    loads: &mut LayerLoads,
) -> Result<(Vec<Vec<f32>>, Vec<usize>)> {
    check_kv(keys, values)?;
    if m > keys.rows() {
        return Err(Error::Budget {
            requested: m,
            available: keys.rows(),
        });
    }
    let (outs, raw) = attend_unrecorded(queries, keys, values)?;
    let selected = arg_top_k(&aggregate(&raw, how), m)?;
    loads.record_kv(keys.rows());
    loads.selection_scans += keys.rows() as u64;
    Ok((outs, selected))
}

/// Attention restricted to the rows in `indices`, renormalised over that
/// subset. Only the selected rows are counted as loaded.
pub fn sparse_attention(
    queries: &[&[f32]],
    keys: MatRef<'_>,
    values: MatRef<'_>,
    indices: &[usize],
    loads: &mut LayerLoads,
) -> Result<Vec<Vec<f32>>> {
    let (k, v) = gather_rows(keys, values, indices)?;
    let (outs, _) = attend_unrecorded(queries, k.view(), v.view())?;
    loads.record_kv(indices.len());
    Ok(outs)
}

/// Exact top-`m` by group score over the whole cache; reads every key.
pub fn exact_select(
    queries: &[&[f32]],
    keys: MatRef<'_>,
    m: usize,
    how: GroupAggregation,
    loads: &mut LayerLoads,
) -> Result<Vec<usize>> {
    let scores = group_scores(queries, keys, how)?;
    let selected = arg_top_k(&scores, m)?;
    loads.selection_scans += keys.rows() as u64;
    Ok(selected)
}

/// Upper bound of `q·k` over a page from the elementwise key envelope:
/// `Σ_d max(q_d·min_d, q_d·max_d)`.
pub fn page_bound(q: &[f32], keys: MatRef<'_>, start: usize, end: usize) -> f32 {
    let dim = keys.cols();
    let mut lo = keys.row(start).to_vec();
    let mut hi = lo.clone();
    for j in start + 1..end {
        for (d, &x) in keys.row(j).iter().enumerate() {
            lo[d] = lo[d].min(x);
            hi[d] = hi[d].max(x);
        }
    }
    let mut acc = 0.0f32;
    for d in 0..dim {
        acc += (q[d] * lo[d]).max(q[d] * hi[d]);
    }
    acc
}

/// Group-aggregated page bounds, one per page of `page_size` tokens (the
/// last page may be short).
pub fn page_bounds(queries: &[&[f32]], keys: MatRef<'_>, page_size: usize, how: GroupAggregation) -> Result<Vec<f32>> {
    if page_size == 0 {
        return Err(Error::Shape("page_size must be at least 1".into()));
    }
    check_queries(queries, keys.cols())?;
    let n = keys.rows();
    let n_pages = n.div_ceil(page_size);
    let per_head: Vec<Vec<f32>> = queries
        .iter()
        .map(|q| {
            (0..n_pages)
                .map(|p| page_bound(q, keys, p * page_size, ((p + 1) * page_size).min(n)))
                .collect()
        })
        .collect();
    Ok(aggregate(&per_head, how))
}

/// Page-level estimate selection: rank pages by their score bound, take
/// pages until at least `m` tokens are covered, then keep the `m` best of
/// those tokens by exact score.
pub fn page_estimate_select(
    queries: &[&[f32]],
    keys: MatRef<'_>,
    m: usize,
    page_size: usize,
    how: GroupAggregation,
    loads: &mut LayerLoads,
) -> Result<Vec<usize>> {
    let n = keys.rows();
    if m == 0 || m > n {
        return Err(Error::Budget {
            requested: m,
            available: n,
        });
    }
    let bounds = page_bounds(queries, keys, page_size, how)?;
    let mut order: Vec<usize> = (0..bounds.len()).collect();
    order.sort_by(|&a, &b| bounds[b].total_cmp(&bounds[a]).then(a.cmp(&b)));

    let mut candidates = Vec::new();
    for &p in &order {
        candidates.extend(p * page_size..((p + 1) * page_size).min(n));
        if candidates.len() >= m {
            break;
        }
    }
    candidates.sort_unstable();

    let per_head: Vec<Vec<f32>> = queries
        .iter()
        .map(|q| candidates.iter().map(|&j| dot(q, keys.row(j))).collect())
        .collect();
    let scores = aggregate(&per_head, how);
    let picked = arg_top_k(&scores, m)?;

    loads.selection_scans += 2 * bounds.len() as u64 + candidates.len() as u64;
    Ok(picked.into_iter().map(|i| candidates[i]).collect())
}

/// Attention-sink plus recent-window positions: `[0, sinks) ∪
/// [seq_len - window, seq_len)`, clipped to the sequence.
pub fn window_select(seq_len: usize, sinks: usize, window: usize) -> Vec<usize> {
    let sink_end = sinks.min(seq_len);
    let recent_start = seq_len.saturating_sub(window).max(sink_end);
    (0..sink_end).chain(recent_start..seq_len).collect()
}
