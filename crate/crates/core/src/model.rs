//! Decoder-only transformer (pre-norm, GQA, RoPE, gated FFN) with a per-layer
//! attention schedule.
//!
//! A decode step walks the layers once. Every layer appends the current
//! token's K/V before attending. `Full` layers attend densely, `Select`
//! layers attend densely and refresh the token buffer from the same inner
//! products, and `Sparse` layers attend only to the buffered positions.

use serde::{Deserialize, Serialize};

use crate::analysis::{TraceRecord, TraceStep};
use crate::attention::{
    exact_select, full_attention_with_selection, group_scores, grouped_full_attention, page_estimate_select,
    sparse_attention, window_select, AccessStats, GroupAggregation, LayerLoads, TokenBuffer, DEFAULT_PAGE_SIZE,
    DEFAULT_SINKS,
};
use crate::error::{Error, Result};
use crate::kv_cache::{KvCache, PollutionLog};
use crate::math::{arg_top_k_ranked, argmax, matmul, rms_norm, rope_in_place, silu, vec_mat, Matrix};

pub const DEFAULT_ROPE_THETA: f32 = 10_000.0;
pub const DEFAULT_NORM_EPS: f32 = 1e-5;
/// Re-selection layer for 32-layer LLaMA-3-style models.
pub const LLAMA3_RESELECT_LAYER: usize = 13;
/// Re-selection layer for 32-layer LLaMA-2-style models.
pub const LLAMA2_RESELECT_LAYER: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub rope_theta: f32,
    pub norm_eps: f32,
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("head_dim", self.head_dim),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Shape(format!("{name} must be at least 1")));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::Shape(format!(
                "n_kv_heads {} does not divide n_heads {}",
                self.n_kv_heads, self.n_heads
            )));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::Shape(format!("head_dim {} must be even", self.head_dim)));
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 0.0) || !(self.norm_eps.is_finite() && self.norm_eps >= 0.0) {
            return Err(Error::Shape("rope_theta must be positive and norm_eps non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerRole {
    Full,
    Select,
    Sparse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSchedule {
    roles: Vec<LayerRole>,
}

impl LayerSchedule {
    /// Checks that the first two layers are dense and that no sparse layer
    /// runs before a selection layer.
    pub fn new(roles: Vec<LayerRole>) -> Result<Self> {
        if roles.is_empty() {
            return Err(Error::Schedule("empty schedule".into()));
        }
        if let Some(i) = roles.iter().take(2).position(|r| *r != LayerRole::Full) {
            return Err(Error::Schedule(format!("layer {i} must use full attention")));
        }
        let mut seen_select = false;
        for (i, role) in roles.iter().enumerate() {
            match role {
                LayerRole::Select => seen_select = true,
                LayerRole::Sparse if !seen_select => {
                    return Err(Error::Schedule(format!("sparse layer {i} has no preceding selection layer")));
                }
                _ => {}
            }
        }
        Ok(Self { roles })
    }

    pub fn all_full(n_layers: usize) -> Self {
        Self {
            roles: vec![LayerRole::Full; n_layers],
        }
    }

    /// Select once at layer 2 and reuse that set for every later layer.
    pub fn single_selection(n_layers: usize) -> Result<Self> {
        if n_layers < 3 {
            return Err(Error::Schedule(format!("need at least 3 layers, got {n_layers}")));
        }
        let mut roles = vec![LayerRole::Sparse; n_layers];
        roles[0] = LayerRole::Full;
        roles[1] = LayerRole::Full;
        roles[2] = LayerRole::Select;
        Self::new(roles)
    }

    pub fn roles(&self) -> &[LayerRole] {
        &self.roles
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn count(&self, role: LayerRole) -> usize {
        self.roles.iter().filter(|r| **r == role).count()
    }
}

/// Two dense layers, selection at layer 2, re-selection at `reselect`,
/// sparse everywhere else.
pub fn default_schedule(n_layers: usize, reselect: usize) -> Result<LayerSchedule> {
    if n_layers < 4 {
        return Err(Error::Schedule(format!("need at least 4 layers, got {n_layers}")));
    }
    if reselect <= 2 || reselect >= n_layers {
        return Err(Error::Schedule(format!(
            "re-selection layer {reselect} must lie in [3, {n_layers})"
        )));
    }
    let mut roles = vec![LayerRole::Sparse; n_layers];
    roles[0] = LayerRole::Full;
    roles[1] = LayerRole::Full;
    roles[2] = LayerRole::Select;
    roles[reselect] = LayerRole::Select;
    LayerSchedule::new(roles)
}

/// 13 for 32-layer models, otherwise about 41% of the depth, clamped to a
/// valid layer.
pub fn default_reselect_layer(n_layers: usize) -> usize {
    let r = if n_layers == 32 {
        LLAMA3_RESELECT_LAYER
    } else {
        (0.41 * n_layers as f64).round() as usize
    };
    r.clamp(3, n_layers.saturating_sub(1).max(3))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Vec<f32>,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    pub lm_head: Matrix,
}

/// Shape of one stored tensor; norm weights are vectors (`rows == 1`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub is_norm: bool,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ModelWeights {
    /// Tensor list in file order: embedding; per layer attn_norm, W_q, W_k,
    /// W_v, W_o, ffn_norm, W_gate, W_up, W_down; final_norm; lm_head.
    pub fn tensor_layout(config: &ModelConfig) -> Vec<TensorSpec> {
        let d = config.d_model();
        let q_width = config.n_heads * config.head_dim;
        let kv_width = config.n_kv_heads * config.head_dim;
        let spec = |name: String, rows, cols, is_norm| TensorSpec { name, rows, cols, is_norm };
        let mut out = vec![spec("embedding".into(), config.vocab_size, d, false)];
        for l in 0..config.n_layers {
            out.push(spec(format!("layers.{l}.attn_norm"), 1, d, true));
            out.push(spec(format!("layers.{l}.wq"), d, q_width, false));
            out.push(spec(format!("layers.{l}.wk"), d, kv_width, false));
            out.push(spec(format!("layers.{l}.wv"), d, kv_width, false));
            out.push(spec(format!("layers.{l}.wo"), q_width, d, false));
            out.push(spec(format!("layers.{l}.ffn_norm"), 1, d, true));
            out.push(spec(format!("layers.{l}.w_gate"), d, config.d_ff, false));
            out.push(spec(format!("layers.{l}.w_up"), d, config.d_ff, false));
            out.push(spec(format!("layers.{l}.w_down"), config.d_ff, d, false));
        }
        out.push(spec("final_norm".into(), 1, d, true));
        out.push(spec("lm_head".into(), d, config.vocab_size, false));
        out
    }

    pub fn scalar_count(config: &ModelConfig) -> usize {
        Self::tensor_layout(config).iter().map(TensorSpec::len).sum()
    }

    /// Build from flat tensors given in [`ModelWeights::tensor_layout`] order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Vec<f32>>) -> Result<Self> {
        config.validate()?;
        let layout = Self::tensor_layout(&config);
        if tensors.len() != layout.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for (spec, t) in layout.iter().zip(&tensors) {
            if t.len() != spec.len() {
                return Err(Error::Shape(format!(
                    "tensor {} needs {} values, got {}",
                    spec.name,
                    spec.len(),
                    t.len()
                )));
            }
        }
        let mut it = layout.into_iter().zip(tensors);
        let mut mat = || -> Result<Matrix> {
            let (spec, data) = it.next().expect("length checked");
            Matrix::from_vec(spec.rows, spec.cols, data)
        };
        let embedding = mat()?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                attn_norm: mat()?.into_vec(),
                wq: mat()?,
                wk: mat()?,
                wv: mat()?,
                wo: mat()?,
                ffn_norm: mat()?.into_vec(),
                w_gate: mat()?,
                w_up: mat()?,
                w_down: mat()?,
            });
        }
        let final_norm = mat()?.into_vec();
        let lm_head = mat()?;
        Ok(Self {
            config,
            embedding,
            layers,
            final_norm,
            lm_head,
        })
    }

    /// Borrowed tensors in file order.
    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out = vec![self.embedding.data()];
        for l in &self.layers {
            out.extend([
                &l.attn_norm[..],
                l.wq.data(),
                l.wk.data(),
                l.wv.data(),
                l.wo.data(),
                &l.ffn_norm[..],
                l.w_gate.data(),
                l.w_up.data(),
                l.w_down.data(),
            ]);
        }
        out.push(&self.final_norm);
        out.push(self.lm_head.data());
        out
    }

    /// Every weight zero, norms included: logits are uniform.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let tensors = Self::tensor_layout(&config).iter().map(|s| vec![0.0; s.len()]).collect();
        Self::from_tensors(config, tensors)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Dense attention everywhere.
    Full,
    /// Scheduled selection plus position-persistent sparse layers.
    Tidal,
    /// Exact top-k at every non-dense layer (upper bound for reuse).
    PerlayerTopk,
    /// Page-bound estimate at every non-dense layer.
    PageEstimate,
    /// Attention sinks plus a recent window at every non-dense layer.
    Window,
}

impl DecodeMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            DecodeMode::Full => "full",
            DecodeMode::Tidal => "tidal",
            DecodeMode::PerlayerTopk => "perlayer_topk",
            DecodeMode::PageEstimate => "page_estimate",
            DecodeMode::Window => "window",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    /// Token budget `m`; clamped to the cache length at each step.
    pub budget: usize,
    pub schedule: LayerSchedule,
    /// Run cache correction every this many steps; 0 disables it.
    pub correction_period: usize,
    pub page_size: usize,
    pub sinks: usize,
    pub window: usize,
    pub aggregation: GroupAggregation,
    /// Also attend to the token being decoded in sparse layers.
    pub include_current: bool,
}

impl DecodeConfig {
    pub fn new(mode: DecodeMode, budget: usize, schedule: LayerSchedule) -> Self {
        Self {
            mode,
            budget,
            schedule,
            correction_period: 0,
            page_size: DEFAULT_PAGE_SIZE,
            sinks: DEFAULT_SINKS,
            window: budget.saturating_sub(DEFAULT_SINKS).max(1),
            aggregation: GroupAggregation::Sum,
            include_current: false,
        }
    }

    pub fn full(n_layers: usize) -> Self {
        Self::new(DecodeMode::Full, 1, LayerSchedule::all_full(n_layers))
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.schedule.len() != config.n_layers {
            return Err(Error::Schedule(format!(
                "schedule covers {} layers, model has {}",
                self.schedule.len(),
                config.n_layers
            )));
        }
        if self.mode != DecodeMode::Full && self.budget == 0 {
            return Err(Error::Budget {
                requested: 0,
                available: 0,
            });
        }
        if self.mode == DecodeMode::PageEstimate && self.page_size == 0 {
            return Err(Error::Shape("page_size must be at least 1".into()));
        }
        if self.mode == DecodeMode::Window && self.sinks + self.window == 0 {
            return Err(Error::Budget {
                requested: 0,
                available: 0,
            });
        }
        Ok(())
    }
}

/// Options for recording exact top-k sets while decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceOptions {
    pub k: usize,
    pub keep_scores: bool,
}

fn embed(weights: &ModelWeights, token: u32) -> Result<Vec<f32>> {
    let vocab = weights.config.vocab_size;
    if token as usize >= vocab {
        return Err(Error::Input(format!("token id {token} outside vocabulary of {vocab}")));
    }
    Ok(weights.embedding.row(token as usize).to_vec())
}

fn head_queries<'a>(q: &'a [f32], config: &ModelConfig, kv_head: usize) -> Vec<&'a [f32]> {
    let hd = config.head_dim;
    let g = config.group_size();
    (kv_head * g..(kv_head + 1) * g).map(|h| &q[h * hd..(h + 1) * hd]).collect()
}

fn write_group(attn: &mut [f32], config: &ModelConfig, kv_head: usize, outs: Vec<Vec<f32>>) {
    let hd = config.head_dim;
    let g = config.group_size();
    for (i, o) in outs.into_iter().enumerate() {
        let h = kv_head * g + i;
        attn[h * hd..(h + 1) * hd].copy_from_slice(&o);
    }
}

/// Output projection, residual and gated FFN for one row.
fn finish_block(lw: &LayerWeights, eps: f32, residual: &[f32], attn: &[f32]) -> Result<Vec<f32>> {
    let o = vec_mat(attn, &lw.wo)?;
    let h: Vec<f32> = residual.iter().zip(&o).map(|(a, b)| a + b).collect();
    let hn = rms_norm(&h, &lw.ffn_norm, eps)?;
    let gate = vec_mat(&hn, &lw.w_gate)?;
    let up = vec_mat(&hn, &lw.w_up)?;
    let act: Vec<f32> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
    let down = vec_mat(&act, &lw.w_down)?;
    Ok(h.iter().zip(&down).map(|(a, b)| a + b).collect())
}

fn logits_from(weights: &ModelWeights, h: &[f32]) -> Result<Vec<f32>> {
    let hn = rms_norm(h, &weights.final_norm, weights.config.norm_eps)?;
    vec_mat(&hn, &weights.lm_head)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum RowWrite {
    Append,
    Overwrite,
}

/// Dense, layer-major forward over `positions` (ascending). K/V rows of the
/// listed positions are appended or overwritten; every other row is read as
/// context. Returns the final hidden state of the last position.
fn forward_rows(
    weights: &ModelWeights,
    cache: &mut KvCache,
    tokens: &[u32],
    positions: &[usize],
    write: RowWrite,
) -> Result<Vec<f32>> {
    let cfg = &weights.config;
    let d = cfg.d_model();
    let mut hidden: Vec<Vec<f32>> = positions
        .iter()
        .map(|&p| embed(weights, tokens[p]))
        .collect::<Result<_>>()?;

    for (layer, lw) in weights.layers.iter().enumerate() {
        let mut xn = Matrix::with_cols(d);
        for h in &hidden {
            xn.push_row(&rms_norm(h, &lw.attn_norm, cfg.norm_eps)?)?;
        }
        let mut q = matmul(&xn, &lw.wq)?;
        let mut k = matmul(&xn, &lw.wk)?;
        let v = matmul(&xn, &lw.wv)?;
        for (i, &p) in positions.iter().enumerate() {
            rope_in_place(q.row_mut(i), p, cfg.head_dim, cfg.rope_theta)?;
            rope_in_place(k.row_mut(i), p, cfg.head_dim, cfg.rope_theta)?;
            match write {
                RowWrite::Append => cache.append(layer, k.row(i), v.row(i))?,
                RowWrite::Overwrite => cache.overwrite_row(layer, p, k.row(i), v.row(i))?,
            }
        }
        let mut sink = LayerLoads::default();
        for (i, &p) in positions.iter().enumerate() {
            let mut attn = vec![0.0f32; cfg.n_heads * cfg.head_dim];
            for g in 0..cfg.n_kv_heads {
                let (keys, values) = cache.full_view(layer, g)?;
                let queries = head_queries(q.row(i), cfg, g);
                let outs = grouped_full_attention(&queries, keys.prefix(p + 1), values.prefix(p + 1), &mut sink)?;
                write_group(&mut attn, cfg, g, outs);
            }
            hidden[i] = finish_block(lw, cfg.norm_eps, &hidden[i], &attn)?;
        }
    }
    hidden.pop().ok_or_else(|| Error::Input("no positions to run".into()))
}

/// Dense forward over the whole prompt. Returns the populated cache and the
/// logits of the last prompt position.
pub fn prefill(weights: &ModelWeights, tokens: &[u32]) -> Result<(KvCache, Vec<f32>)> {
    if tokens.is_empty() {
        return Err(Error::Input("empty prompt".into()));
    }
    let cfg = &weights.config;
    let mut cache = KvCache::new(cfg.n_layers, cfg.n_kv_heads, cfg.head_dim);
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let h = forward_rows(weights, &mut cache, tokens, &positions, RowWrite::Append)?;
    Ok((cache, logits_from(weights, &h)?))
}

/// Recompute the K/V rows of every polluted position with dense attention
/// over the realized sequence, overwrite them, and clear the log.
///
/// Positions are processed in order, layer by layer, so each one attends to
/// already-corrected rows. Rows that were never polluted are taken as is.
pub fn cache_correction(
    weights: &ModelWeights,
    cache: &mut KvCache,
    tokens: &[u32],
    log: &mut PollutionLog,
) -> Result<()> {
    if log.is_empty() {
        return Ok(());
    }
    if tokens.len() < cache.len() {
        return Err(Error::State(format!(
            "{} realized tokens for a cache of {} rows",
            tokens.len(),
            cache.len()
        )));
    }
    let positions = log.positions();
    if let Some(&bad) = positions.iter().find(|&&p| p >= cache.len()) {
        return Err(Error::Bounds {
            index: bad,
            len: cache.len(),
        });
    }
    forward_rows(weights, cache, tokens, &positions, RowWrite::Overwrite)?;
    log.clear();
    Ok(())
}

/// One decode step for `token`, which is appended at position `cache.len()`.
pub fn decode_step(
    weights: &ModelWeights,
    cache: &mut KvCache,
    token: u32,
    config: &DecodeConfig,
    stats: &mut AccessStats,
) -> Result<Vec<f32>> {
    decode_step_traced(weights, cache, token, config, stats, None).map(|(logits, _)| logits)
}

/// [`decode_step`] that can also record the exact top-k set of every layer
/// and KV head, scored over the full cache.
pub fn decode_step_traced(
    weights: &ModelWeights,
    cache: &mut KvCache,
    token: u32,
    config: &DecodeConfig,
    stats: &mut AccessStats,
    trace: Option<TraceOptions>,
) -> Result<(Vec<f32>, Option<TraceStep>)> {
    let cfg = &weights.config;
    config.validate(cfg)?;
    if !cache.is_uniform() {
        return Err(Error::State("cache layers have different lengths".into()));
    }
    let pos = cache.len();
    let len = pos + 1;
    let budget = config.budget.min(len);
    if let Some(t) = trace {
        if t.k == 0 || t.k > len {
            return Err(Error::Budget {
                requested: t.k,
                available: len,
            });
        }
    }

    let mut h = embed(weights, token)?;
    let mut buffer = TokenBuffer::new(cfg.n_kv_heads);
    let step = stats.begin_step(len);
    let mut trace_step = trace.map(|t| TraceStep::new(len, cfg.n_layers, t.keep_scores));

    for (layer, lw) in weights.layers.iter().enumerate() {
        let xn = rms_norm(&h, &lw.attn_norm, cfg.norm_eps)?;
        let mut q = vec_mat(&xn, &lw.wq)?;
        let mut k = vec_mat(&xn, &lw.wk)?;
        let v = vec_mat(&xn, &lw.wv)?;
        rope_in_place(&mut q, pos, cfg.head_dim, cfg.rope_theta)?;
        rope_in_place(&mut k, pos, cfg.head_dim, cfg.rope_theta)?;
        cache.append(layer, &k, &v)?;

        let role = match config.mode {
            DecodeMode::Full => LayerRole::Full,
            _ => config.schedule.roles()[layer],
        };
        if role == LayerRole::Sparse && config.mode == DecodeMode::Tidal && buffer.is_empty() {
            return Err(Error::Schedule(format!("sparse layer {layer} reached with an empty token buffer")));
        }

        let loads = &mut step.layers[layer];
        let mut attn = vec![0.0f32; cfg.n_heads * cfg.head_dim];
        for g in 0..cfg.n_kv_heads {
            let (keys, values) = cache.full_view(layer, g)?;
            let queries = head_queries(&q, cfg, g);
            let outs = match (config.mode, role) {
                (_, LayerRole::Full) => grouped_full_attention(&queries, keys, values, loads)?,
                (DecodeMode::Tidal, LayerRole::Select) => {
                    let (outs, selected) =
                        full_attention_with_selection(&queries, keys, values, budget, config.aggregation, loads)?;
                    buffer.set(g, selected);
                    outs
                }
                (DecodeMode::Tidal, _) => {
                    let mut indices = buffer.get(g).to_vec();
                    if config.include_current && indices.last() != Some(&pos) {
                        indices.push(pos);
                    }
                    sparse_attention(&queries, keys, values, &indices, loads)?
                }
                (DecodeMode::PerlayerTopk, _) => {
                    let sel = exact_select(&queries, keys, budget, config.aggregation, loads)?;
                    sparse_attention(&queries, keys, values, &sel, loads)?
                }
                (DecodeMode::PageEstimate, _) => {
                    let sel =
                        page_estimate_select(&queries, keys, budget, config.page_size, config.aggregation, loads)?;
                    sparse_attention(&queries, keys, values, &sel, loads)?
                }
                (DecodeMode::Window, _) => {
                    let sel = window_select(len, config.sinks, config.window);
                    sparse_attention(&queries, keys, values, &sel, loads)?
                }
                (DecodeMode::Full, _) => unreachable!("full mode forces dense roles"),
            };
            write_group(&mut attn, cfg, g, outs);

            if let (Some(ts), Some(t)) = (trace_step.as_mut(), trace) {
                let scores = group_scores(&queries, keys, config.aggregation)?;
                ts.sets[layer].push(arg_top_k_ranked(&scores, t.k)?);
                if let Some(all) = ts.scores.as_mut() {
                    all[layer].push(scores);
                }
            }
        }
        h = finish_block(lw, cfg.norm_eps, &h, &attn)?;
    }
    Ok((logits_from(weights, &h)?, trace_step))
}

/// A decoding session: the cache, the realized token sequence and the
/// bookkeeping for cache correction.
///
/// Between steps the realized sequence is exactly one token longer than the
/// cache: the last token is pending and is consumed by the next step.
#[derive(Debug, Clone)]
pub struct Session<'w> {
    weights: &'w ModelWeights,
    cache: KvCache,
    tokens: Vec<u32>,
    pollution: PollutionLog,
    stats: AccessStats,
    steps_since_correction: usize,
    corrections: usize,
}

impl<'w> Session<'w> {
    /// Prefill every prompt token but the last, which becomes pending.
    pub fn start(weights: &'w ModelWeights, prompt: &[u32]) -> Result<Self> {
        let cfg = &weights.config;
        cfg.validate()?;
        let (last, head) = prompt.split_last().ok_or_else(|| Error::Input("empty prompt".into()))?;
        embed(weights, *last)?;
        let cache = if head.is_empty() {
            KvCache::new(cfg.n_layers, cfg.n_kv_heads, cfg.head_dim)
        } else {
            prefill(weights, head)?.0
        };
        Ok(Self {
            weights,
            cache,
            tokens: prompt.to_vec(),
            pollution: PollutionLog::new(),
            stats: AccessStats::new(cfg.n_layers, cfg.n_kv_heads),
            steps_since_correction: 0,
            corrections: 0,
        })
    }

    /// Run one decode step on the pending token and return its logits.
    pub fn step(&mut self, config: &DecodeConfig, trace: Option<TraceOptions>) -> Result<(Vec<f32>, Option<TraceStep>)> {
        let pos = self.cache.len();
        if self.tokens.len() != pos + 1 {
            return Err(Error::State("no pending token to decode".into()));
        }
        let out = decode_step_traced(self.weights, &mut self.cache, self.tokens[pos], config, &mut self.stats, trace)?;
        if config.mode != DecodeMode::Full {
            self.pollution.mark_polluted(pos, self.cache.len())?;
        }
        self.steps_since_correction += 1;
        if config.correction_period > 0 && self.steps_since_correction >= config.correction_period {
            self.correct()?;
        }
        Ok(out)
    }

    /// Make `token` the pending token.
    pub fn push(&mut self, token: u32) -> Result<()> {
        if self.tokens.len() != self.cache.len() {
            return Err(Error::State("a token is already pending".into()));
        }
        embed(self.weights, token)?;
        self.tokens.push(token);
        Ok(())
    }

    pub fn correct(&mut self) -> Result<()> {
        let n = self.cache.len();
        cache_correction(self.weights, &mut self.cache, &self.tokens[..n], &mut self.pollution)?;
        self.steps_since_correction = 0;
        self.corrections += 1;
        Ok(())
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn pollution(&self) -> &PollutionLog {
        &self.pollution
    }

    pub fn stats(&self) -> &AccessStats {
        &self.stats
    }

    pub fn corrections(&self) -> usize {
        self.corrections
    }

    pub fn into_parts(self) -> (KvCache, Vec<u32>, PollutionLog, AccessStats) {
        (self.cache, self.tokens, self.pollution, self.stats)
    }
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub emitted: Vec<u32>,
    pub step_logits: Vec<Vec<f32>>,
    pub stats: AccessStats,
    pub trace: Option<TraceRecord>,
    pub cache: KvCache,
    /// Prompt followed by the emitted tokens.
    pub tokens: Vec<u32>,
    pub pollution: PollutionLog,
    pub corrections: usize,
}

/// Greedy generation: each of the `n_steps` decode steps emits one token.
/// The last prompt token is decoded by the first step.
pub fn generate(
    weights: &ModelWeights,
    prompt: &[u32],
    n_steps: usize,
    config: &DecodeConfig,
    trace: Option<TraceOptions>,
) -> Result<Generation> {
    if n_steps == 0 {
        return Err(Error::Input("n_steps must be at least 1".into()));
    }
    config.validate(&weights.config)?;
    let mut session = Session::start(weights, prompt)?;
    let mut emitted = Vec::with_capacity(n_steps);
    let mut step_logits = Vec::with_capacity(n_steps);
    let mut record = trace.map(|t| TraceRecord::new(t.k, weights.config.n_layers, weights.config.n_kv_heads));
    for _ in 0..n_steps {
        let (logits, ts) = session.step(config, trace)?;
        let next = argmax(&logits).ok_or_else(|| Error::State("empty logits".into()))? as u32;
        session.push(next)?;
        emitted.push(next);
        step_logits.push(logits);
        if let (Some(r), Some(ts)) = (record.as_mut(), ts) {
            r.steps.push(ts);
        }
    }
    let corrections = session.corrections();
    let (cache, tokens, pollution, stats) = session.into_parts();
    Ok(Generation {
        emitted,
        step_logits,
        stats,
        trace: record,
        cache,
        tokens,
        pollution,
        corrections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights_io::synth_weights;

    fn tiny_config(n_layers: usize) -> ModelConfig {
        ModelConfig {
            n_layers,
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 8,
            d_ff: 32,
            vocab_size: 64,
            rope_theta: DEFAULT_ROPE_THETA,
            norm_eps: DEFAULT_NORM_EPS,
        }
    }

    fn prompt(n: usize, vocab: usize) -> Vec<u32> {
        (0..n).map(|i| ((i * 7 + 3) % vocab) as u32).collect()
    }

    #[test]
    fn default_schedule_counts() {
        let s = default_schedule(32, 13).unwrap();
        assert_eq!(
            (s.count(LayerRole::Full), s.count(LayerRole::Select), s.count(LayerRole::Sparse)),
            (2, 2, 28)
        );
        let s = default_schedule(64, 14).unwrap();
        assert_eq!(
            (s.count(LayerRole::Full), s.count(LayerRole::Select), s.count(LayerRole::Sparse)),
            (2, 2, 60)
        );
        let s = default_schedule(4, 3).unwrap();
        use LayerRole::*;
        assert_eq!(s.roles(), &[Full, Full, Select, Select]);
        assert!(matches!(default_schedule(8, 2), Err(Error::Schedule(_))));
        assert!(matches!(default_schedule(8, 8), Err(Error::Schedule(_))));
        assert!(matches!(default_schedule(3, 2), Err(Error::Schedule(_))));
    }

    #[test]
    fn schedule_rejects_sparse_before_select() {
        use LayerRole::*;
        assert!(LayerSchedule::new(vec![Full, Full, Sparse, Select]).is_err());
        assert!(LayerSchedule::new(vec![Full, Select, Sparse]).is_err());
        assert!(LayerSchedule::new(vec![Full, Full, Select, Sparse]).is_ok());
    }

    #[test]
    fn reselect_defaults() {
        assert_eq!(default_reselect_layer(32), 13);
        assert_eq!(default_reselect_layer(64), 26);
        assert_eq!(default_reselect_layer(8), 3);
        assert_eq!(default_reselect_layer(4), 3);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config(4);
        assert!(c.validate().is_ok());
        c.n_kv_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn prefill_shapes_and_errors() {
        let w = synth_weights(&tiny_config(4), 1).unwrap();
        let (cache, logits) = prefill(&w, &[5]).unwrap();
        assert_eq!(cache.len(), 1);
        assert_eq!(logits.len(), 64);
        assert!(matches!(prefill(&w, &[]), Err(Error::Input(_))));
        assert!(matches!(prefill(&w, &[64]), Err(Error::Input(_))));
    }

    #[test]
    fn prefill_matches_sequential_full_decode_bitwise() {
        let cfg = tiny_config(4);
        let w = synth_weights(&cfg, 2).unwrap();
        let toks = prompt(12, cfg.vocab_size);
        let (batch, batch_logits) = prefill(&w, &toks).unwrap();

        let mut cache = KvCache::new(cfg.n_layers, cfg.n_kv_heads, cfg.head_dim);
        let mut stats = AccessStats::new(cfg.n_layers, cfg.n_kv_heads);
        let dc = DecodeConfig::full(cfg.n_layers);
        let mut logits = Vec::new();
        for &t in &toks {
            logits = decode_step(&w, &mut cache, t, &dc, &mut stats).unwrap();
        }
        assert_eq!(cache.checksum(), batch.checksum());
        assert_eq!(logits, batch_logits);
    }

    #[test]
    fn decode_grows_every_layer_by_one() {
        let cfg = tiny_config(6);
        let w = synth_weights(&cfg, 3).unwrap();
        let (mut cache, _) = prefill(&w, &prompt(10, 64)).unwrap();
        let dc = DecodeConfig::new(DecodeMode::Tidal, 4, default_schedule(6, 4).unwrap());
        let mut stats = AccessStats::new(6, 2);
        decode_step(&w, &mut cache, 1, &dc, &mut stats).unwrap();
        assert!(cache.is_uniform());
        assert_eq!(cache.len(), 11);
    }

    #[test]
    fn token_loads_follow_schedule() {
        let cfg = tiny_config(8);
        let w = synth_weights(&cfg, 4).unwrap();
        let sched = default_schedule(8, 5).unwrap();
        let dc = DecodeConfig::new(DecodeMode::Tidal, 3, sched.clone());
        let g = generate(&w, &prompt(9, 64), 5, &dc, None).unwrap();
        for step in &g.stats.steps {
            for (l, loads) in step.layers.iter().enumerate() {
                let per_head = match sched.roles()[l] {
                    LayerRole::Sparse => 3,
                    _ => step.cache_len as u64,
                };
                assert_eq!(loads.key_token_loads, per_head * 2);
                assert_eq!(loads.value_token_loads, per_head * 2);
            }
        }
    }

    #[test]
    fn sparse_layer_with_empty_buffer_is_a_schedule_error() {
        let cfg = tiny_config(4);
        let w = synth_weights(&cfg, 5).unwrap();
        // Bypass the constructor check to exercise the runtime guard.
        let bad = LayerSchedule {
            roles: vec![LayerRole::Full, LayerRole::Full, LayerRole::Sparse, LayerRole::Sparse],
        };
        let dc = DecodeConfig::new(DecodeMode::Tidal, 2, bad);
        let (mut cache, _) = prefill(&w, &[1, 2, 3]).unwrap();
        let r = decode_step(&w, &mut cache, 4, &dc, &mut AccessStats::new(4, 2));
        assert!(matches!(r, Err(Error::Schedule(_))));
    }

    #[test]
    fn all_full_schedule_equals_full_mode() {
        let cfg = tiny_config(5);
        let w = synth_weights(&cfg, 6).unwrap();
        let p = prompt(7, 64);
        let full = generate(&w, &p, 4, &DecodeConfig::full(5), None).unwrap();
        let tidal_dense = DecodeConfig::new(DecodeMode::Tidal, 2, LayerSchedule::all_full(5));
        let other = generate(&w, &p, 4, &tidal_dense, None).unwrap();
        assert_eq!(full.step_logits, other.step_logits);
    }

    #[test]
    fn saturated_budget_matches_full_in_every_mode() {
        let cfg = tiny_config(6);
        let w = synth_weights(&cfg, 7).unwrap();
        let p = prompt(8, 64);
        let full = generate(&w, &p, 6, &DecodeConfig::full(6), None).unwrap();
        for mode in [DecodeMode::Tidal, DecodeMode::PerlayerTopk, DecodeMode::PageEstimate] {
            let dc = DecodeConfig::new(mode, 1000, default_schedule(6, 3).unwrap());
            let g = generate(&w, &p, 6, &dc, None).unwrap();
            assert_eq!(g.emitted, full.emitted, "{mode:?}");
            for (a, b) in g.step_logits.iter().zip(&full.step_logits) {
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn include_current_adds_the_pending_position() {
        let cfg = tiny_config(6);
        let w = synth_weights(&cfg, 8).unwrap();
        let mut dc = DecodeConfig::new(DecodeMode::Tidal, 2, default_schedule(6, 4).unwrap());
        let p = prompt(10, 64);
        let base = generate(&w, &p, 3, &dc, None).unwrap();
        dc.include_current = true;
        let with = generate(&w, &p, 3, &dc, None).unwrap();
        let sparse_layer = 3;
        for (a, b) in base.stats.steps.iter().zip(&with.stats.steps) {
            let extra = b.layers[sparse_layer].key_token_loads - a.layers[sparse_layer].key_token_loads;
            assert!(extra <= 2);
        }
    }

    #[test]
    fn generate_rejects_zero_steps_and_pollutes_in_sparse_modes() {
        let cfg = tiny_config(4);
        let w = synth_weights(&cfg, 9).unwrap();
        assert!(generate(&w, &[1], 0, &DecodeConfig::full(4), None).is_err());
        let g = generate(&w, &[1], 3, &DecodeConfig::full(4), None).unwrap();
        assert!(g.pollution.is_empty());
        assert_eq!(g.cache.len(), 3);
        assert_eq!(g.tokens.len(), 4);
        let dc = DecodeConfig::new(DecodeMode::Tidal, 2, default_schedule(4, 3).unwrap());
        let g = generate(&w, &[1, 2], 3, &dc, None).unwrap();
        assert_eq!(g.pollution.positions(), vec![1, 2, 3]);
    }

    #[test]
    fn correction_without_pollution_is_a_no_op() {
        let cfg = tiny_config(4);
        let w = synth_weights(&cfg, 10).unwrap();
        let toks = prompt(6, 64);
        let (mut cache, _) = prefill(&w, &toks).unwrap();
        let before = cache.checksum();
        cache_correction(&w, &mut cache, &toks, &mut PollutionLog::new()).unwrap();
        assert_eq!(cache.checksum(), before);

        let mut log = PollutionLog::new();
        log.mark_polluted(2, cache.len()).unwrap();
        assert!(matches!(cache_correction(&w, &mut cache, &toks[..3], &mut log), Err(Error::State(_))));
    }

    #[test]
    fn periodic_correction_runs() {
        let cfg = tiny_config(6);
        let w = synth_weights(&cfg, 11).unwrap();
        let mut dc = DecodeConfig::new(DecodeMode::Tidal, 2, default_schedule(6, 4).unwrap());
        dc.correction_period = 3;
        let g = generate(&w, &prompt(10, 64), 7, &dc, None).unwrap();
        assert_eq!(g.corrections, 2);
        assert_eq!(g.pollution.positions(), vec![15]);
    }
}
