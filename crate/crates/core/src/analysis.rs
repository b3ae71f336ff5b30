//! Diagnostics over decoding runs: exact top-k traces, inter-layer overlap,
//! recall of a reused token set for each re-selection layer, and token-load
//! reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attention::{window_select, AccessStats};
use crate::error::{Error, Result};
use crate::model::{generate, DecodeConfig, DecodeMode, LayerRole, ModelWeights, TraceOptions};

/// Exact top-k sets of one decode step, indexed `[layer][kv_head]`, each
/// ordered by rank (highest score first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub cache_len: usize,
    pub sets: Vec<Vec<Vec<usize>>>,
    /// Group scores over the whole cache, same indexing, when requested.
    pub scores: Option<Vec<Vec<Vec<f32>>>>,
}

impl TraceStep {
    pub fn new(cache_len: usize, n_layers: usize, keep_scores: bool) -> Self {
        Self {
            cache_len,
            sets: vec![Vec::new(); n_layers],
            scores: keep_scores.then(|| vec![Vec::new(); n_layers]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub k: usize,
    pub n_layers: usize,
    pub n_kv_heads: usize,
    pub steps: Vec<TraceStep>,
}

impl TraceRecord {
    pub fn new(k: usize, n_layers: usize, n_kv_heads: usize) -> Self {
        Self {
            k,
            n_layers,
            n_kv_heads,
            steps: Vec::new(),
        }
    }

    fn set(&self, step: usize, layer: usize, head: usize) -> &[usize] {
        &self.steps[step].sets[layer][head]
    }
}

/// Dense generation that records the exact top-`k` set of every layer and
/// KV head at every step.
pub fn trace_topk(
    weights: &ModelWeights,
    prompt: &[u32],
    k: usize,
    n_steps: usize,
    keep_scores: bool,
) -> Result<TraceRecord> {
    if k == 0 || k > prompt.len() {
        return Err(Error::Budget {
            requested: k,
            available: prompt.len(),
        });
    }
    let config = DecodeConfig::full(weights.config.n_layers);
    let g = generate(weights, prompt, n_steps, &config, Some(TraceOptions { k, keep_scores }))?;
    g.trace.ok_or_else(|| Error::State("trace was not recorded".into()))
}

fn intersection_size(a: &[usize], b: &[usize]) -> usize {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable();
    b.sort_unstable();
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapMatrix {
    pub n_layers: usize,
    data: Vec<f64>,
}

impl OverlapMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n_layers + j]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = (0..self.n_layers).map(|l| format!("layer_{l}")).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for i in 0..self.n_layers {
            let row: Vec<String> = (0..self.n_layers).map(|j| format!("{:.6}", self.get(i, j))).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Mean `|S_i ∩ S_j| / k` over all steps and KV heads.
pub fn overlap_matrix(trace: &TraceRecord) -> Result<OverlapMatrix> {
    if trace.steps.is_empty() {
        return Err(Error::Input("empty trace".into()));
    }
    let l = trace.n_layers;
    let samples = (trace.steps.len() * trace.n_kv_heads) as f64;
    let mut data = vec![0.0f64; l * l];
    for i in 0..l {
        for j in i..l {
            let mut acc = 0.0f64;
            for s in 0..trace.steps.len() {
                for h in 0..trace.n_kv_heads {
                    let shared = intersection_size(trace.set(s, i, h), trace.set(s, j, h));
                    acc += shared as f64 / trace.k as f64;
                }
            }
            let v = acc / samples;
            data[i * l + j] = v;
            data[j * l + i] = v;
        }
    }
    Ok(OverlapMatrix { n_layers: l, data })
}

fn check_reselection(trace: &TraceRecord, base: usize, reselect: usize) -> Result<()> {
    if !(base < reselect && reselect < trace.n_layers) {
        return Err(Error::Schedule(format!(
            "need base {base} < re-selection {reselect} < {} layers",
            trace.n_layers
        )));
    }
    if trace.steps.is_empty() {
        return Err(Error::Input("empty trace".into()));
    }
    Ok(())
}

/// Recall of the reused set at every layer: layers in `(base, reselect)`
/// reuse `S_base`, layers from `reselect` on reuse `S_reselect`. Layers up
/// to and including `base` are `None`.
pub fn recall_per_layer(trace: &TraceRecord, base: usize, reselect: usize) -> Result<Vec<Option<f64>>> {
    check_reselection(trace, base, reselect)?;
    let samples = (trace.steps.len() * trace.n_kv_heads) as f64;
    Ok((0..trace.n_layers)
        .map(|layer| {
            if layer <= base {
                return None;
            }
            let source = if layer < reselect { base } else { reselect };
            let mut acc = 0.0f64;
            for s in 0..trace.steps.len() {
                for h in 0..trace.n_kv_heads {
                    let hit = intersection_size(trace.set(s, source, h), trace.set(s, layer, h));
                    acc += hit as f64 / trace.k as f64;
                }
            }
            Some(acc / samples)
        })
        .collect())
}

/// Mean recall over the sparse layers, i.e. every layer after `base` except
/// `reselect`. Pooled over steps and heads; 1 when there is no sparse layer.
pub fn recall_by_reselection(trace: &TraceRecord, base: usize, reselect: usize) -> Result<f64> {
    let per_layer = recall_per_layer(trace, base, reselect)?;
    let sparse: Vec<f64> = per_layer
        .iter()
        .enumerate()
        .filter(|(l, _)| *l != reselect)
        .filter_map(|(_, r)| *r)
        .collect();
    if sparse.is_empty() {
        return Ok(1.0);
    }
    Ok(sparse.iter().sum::<f64>() / sparse.len() as f64)
}

/// `(reselect_layer, mean_recall)` for every `reselect` in `(base, L)`.
pub fn recall_curve(trace: &TraceRecord, base: usize) -> Result<Vec<(usize, f64)>> {
    (base + 1..trace.n_layers)
        .map(|r| recall_by_reselection(trace, base, r).map(|v| (r, v)))
        .collect()
}

pub fn recall_curve_csv(curve: &[(usize, f64)]) -> String {
    let mut out = String::from("reselect_layer,mean_recall\n");
    for (r, v) in curve {
        let _ = writeln!(out, "{r},{v:.6}");
    }
    out
}

pub const HEATMAP_HEADER: &str = "step,layer,rank,token_position";

/// One row per (step, layer, rank) for a single KV head.
pub fn heatmap_export(trace: &TraceRecord, kv_head: usize) -> Result<String> {
    if kv_head >= trace.n_kv_heads {
        return Err(Error::Bounds {
            index: kv_head,
            len: trace.n_kv_heads,
        });
    }
    let mut out = String::from(HEATMAP_HEADER);
    out.push('\n');
    for (s, step) in trace.steps.iter().enumerate() {
        for (l, heads) in step.sets.iter().enumerate() {
            for (rank, pos) in heads[kv_head].iter().enumerate() {
                let _ = writeln!(out, "{s},{l},{rank},{pos}");
            }
        }
    }
    Ok(out)
}

/// Parse a heatmap CSV back into ranked sets indexed `[step][layer]`.
pub fn heatmap_import(csv: &str) -> Result<Vec<Vec<Vec<usize>>>> {
    let mut lines = csv.lines();
    if lines.next() != Some(HEATMAP_HEADER) {
        return Err(Error::Format("missing heatmap header".into()));
    }
    let mut out: Vec<Vec<Vec<usize>>> = Vec::new();
    for (n, line) in lines.enumerate() {
        let fields: Vec<usize> = line
            .split(',')
            .map(|f| f.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("heatmap row {}: {e}", n + 2)))?;
        let [step, layer, rank, pos] = fields[..] else {
            return Err(Error::Format(format!("heatmap row {} needs 4 fields", n + 2)));
        };
        if out.len() <= step {
            out.resize(step + 1, Vec::new());
        }
        if out[step].len() <= layer {
            out[step].resize(layer + 1, Vec::new());
        }
        let set = &mut out[step][layer];
        if set.len() != rank {
            return Err(Error::Format(format!("heatmap row {}: rank {rank} out of order", n + 2)));
        }
        set.push(pos);
    }
    Ok(out)
}

/// Token-load totals of a run compared against dense attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessReport {
    /// Key rows dense attention would read at every layer.
    pub full_loads: u64,
    /// Key rows actually read by attention kernels.
    pub counted_loads: u64,
    /// Key rows predicted by the closed-form count for the schedule.
    pub analytic_loads: u64,
    pub selection_scans: u64,
    pub counted_ratio: f64,
    pub analytic_ratio: f64,
}

/// Expected key-row loads per KV head for one step at cache length `n`.
pub fn analytic_step_loads(config: &DecodeConfig, n_layers: usize, n: usize) -> u64 {
    let m = config.budget.min(n) as u64;
    let n64 = n as u64;
    let full = config.schedule.count(LayerRole::Full) as u64;
    let rest = n_layers as u64 - full;
    match config.mode {
        DecodeMode::Full => n_layers as u64 * n64,
        DecodeMode::Tidal => {
            let select = config.schedule.count(LayerRole::Select) as u64;
            let sparse = config.schedule.count(LayerRole::Sparse) as u64;
            (full + select) * n64 + sparse * m
        }
        DecodeMode::PerlayerTopk | DecodeMode::PageEstimate => full * n64 + rest * m,
        DecodeMode::Window => full * n64 + rest * window_select(n, config.sinks, config.window).len() as u64,
    }
}

/// Closed-form dense-to-scheduled load ratio `L·n / (n_full·n +
/// n_select·n + n_sparse·m)`.
pub fn analytic_load_ratio(n_full: usize, n_select: usize, n_sparse: usize, n: u64, m: u64) -> f64 {
    let layers = (n_full + n_select + n_sparse) as u64;
    let dense = layers * n;
    let scheduled = (n_full + n_select) as u64 * n + n_sparse as u64 * m.min(n);
    dense as f64 / scheduled as f64
}

/// Compare counted loads with the closed form. Assumes `include_current`
/// is off (it adds at most one row per sparse layer).
pub fn access_report(stats: &AccessStats, config: &DecodeConfig) -> AccessReport {
    let heads = stats.n_kv_heads as u64;
    let mut full_loads = 0u64;
    let mut analytic_loads = 0u64;
    for step in &stats.steps {
        full_loads += stats.n_layers as u64 * step.cache_len as u64 * heads;
        analytic_loads += analytic_step_loads(config, stats.n_layers, step.cache_len) * heads;
    }
    let totals = stats.totals();
    let ratio = |den: u64| if den == 0 { 0.0 } else { full_loads as f64 / den as f64 };
    AccessReport {
        full_loads,
        counted_loads: totals.key_token_loads,
        analytic_loads,
        selection_scans: totals.selection_scans,
        counted_ratio: ratio(totals.key_token_loads),
        analytic_ratio: ratio(analytic_loads),
    }
}
