use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use sparsedec_core::analysis::{
    access_report, analytic_load_ratio, heatmap_export, overlap_matrix, recall_curve, recall_curve_csv, trace_topk,
};
use sparsedec_core::attention::{
    full_attention_with_selection, grouped_full_attention, page_estimate_select, sparse_attention, GroupAggregation,
    LayerLoads,
};
use sparsedec_core::math::Matrix;
use sparsedec_core::model::{TraceOptions, DEFAULT_NORM_EPS, DEFAULT_ROPE_THETA};
use sparsedec_core::rng::SplitMix64;
use sparsedec_core::weights_io::{load_weights, synth_weights};
use sparsedec_core::{
    default_reselect_layer, default_schedule, generate, DecodeConfig, DecodeMode, Error, LayerRole, ModelConfig,
    ModelWeights,
};

use crate::args::{AnalyzeArgs, BenchArgs, DecodeArgs, EvalPplArgs, ModelArgs, NeedleArgs, PolicyArgs, PromptArgs};
use crate::error::{CliError, Result};
use crate::needle::{run_needle, NeedleResult, NeedleSetup};
use crate::ppl::teacher_forced;

pub fn load_model(args: &ModelArgs) -> Result<ModelWeights> {
    if let Some(path) = &args.weights {
        return Ok(load_weights(path)?);
    }
    let config = ModelConfig {
        n_layers: args.layers,
        n_heads: args.heads,
        n_kv_heads: args.kv_heads,
        head_dim: args.head_dim,
        d_ff: args.ff,
        vocab_size: args.vocab,
        rope_theta: DEFAULT_ROPE_THETA,
        norm_eps: DEFAULT_NORM_EPS,
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    match args.synth_seed {
        Some(seed) => Ok(synth_weights(&config, seed)?),
        None if args.zero_weights => Ok(ModelWeights::zeros(config)?),
        None => Err(CliError::Usage("one of --weights, --synth-seed or --zero-weights is required".into())),
    }
}

/// Parse a token file: one decimal id per line, blank lines ignored.
pub fn parse_tokens(text: &str) -> Result<Vec<u32>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<u32>()
                .map_err(|e| Error::Input(format!("line {}: {e}", i + 1)).into())
        })
        .collect()
}

pub fn format_tokens(tokens: &[u32]) -> String {
    tokens.iter().map(|t| format!("{t}\n")).collect()
}

pub fn synthetic_prompt(len: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut rng = SplitMix64::new(seed);
    (0..len).map(|_| rng.next_below(vocab as u64) as u32).collect()
}

fn load_prompt(args: &PromptArgs, vocab: usize) -> Result<Vec<u32>> {
    let tokens = match &args.prompt_file {
        Some(path) => parse_tokens(&fs::read_to_string(path)?)?,
        None => synthetic_prompt(args.prompt_len, vocab, args.prompt_seed),
    };
    if tokens.is_empty() {
        return Err(Error::Input("empty prompt".into()).into());
    }
    Ok(tokens)
}

pub fn decode_config(policy: &PolicyArgs, n_layers: usize) -> Result<(DecodeConfig, usize)> {
    let reselect = policy.reselect.unwrap_or_else(|| default_reselect_layer(n_layers));
    let mode: DecodeMode = policy.mode.into();
    let schedule = default_schedule(n_layers, reselect)?;
    let mut config = DecodeConfig::new(mode, policy.budget, schedule);
    config.correction_period = policy.correction_period;
    config.page_size = policy.page_size;
    config.sinks = policy.sinks;
    config.window = policy.window.unwrap_or_else(|| policy.budget.saturating_sub(policy.sinks).max(1));
    config.aggregation = policy.aggregation.into();
    config.include_current = policy.include_current;
    Ok((config, reselect))
}

pub fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Result of `decode`. Field order is the serialized order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub mode: &'static str,
    pub budget: usize,
    pub reselect_layer: usize,
    pub n_layers: usize,
    pub prompt_len: usize,
    pub n_steps: usize,
    pub emitted_ids: Vec<u32>,
    pub key_token_loads: u64,
    pub value_token_loads: u64,
    pub selection_scans: u64,
    pub full_equivalent_loads: u64,
    pub analytic_loads: u64,
    pub counted_ratio: f64,
    pub analytic_ratio: f64,
    pub corrections: usize,
    pub agreement_vs_full: Option<f64>,
}

pub fn cmd_decode(args: &DecodeArgs) -> Result<RunReport> {
    if args.steps == 0 {
        return Err(CliError::Usage("--steps must be at least 1".into()));
    }
    let weights = load_model(&args.model)?;
    let (config, reselect) = decode_config(&args.policy, weights.config.n_layers)?;
    let prompt = load_prompt(&args.prompt, weights.config.vocab_size)?;
    let trace = args.trace_out.as_ref().map(|_| TraceOptions {
        k: args.policy.budget,
        keep_scores: false,
    });
    let run = generate(&weights, &prompt, args.steps, &config, trace)?;
    if let (Some(path), Some(t)) = (&args.trace_out, &run.trace) {
        fs::write(path, heatmap_export(t, 0)?)?;
    }
    let agreement = if args.compare_full {
        let full = generate(&weights, &prompt, args.steps, &DecodeConfig::full(weights.config.n_layers), None)?;
        let same = run.emitted.iter().zip(&full.emitted).filter(|(a, b)| a == b).count();
        Some(same as f64 / args.steps as f64)
    } else {
        None
    };
    let access = access_report(&run.stats, &config);
    let totals = run.stats.totals();
    Ok(RunReport {
        mode: config.mode.as_str(),
        budget: config.budget,
        reselect_layer: reselect,
        n_layers: weights.config.n_layers,
        prompt_len: prompt.len(),
        n_steps: args.steps,
        emitted_ids: run.emitted,
        key_token_loads: totals.key_token_loads,
        value_token_loads: totals.value_token_loads,
        selection_scans: totals.selection_scans,
        full_equivalent_loads: access.full_loads,
        analytic_loads: access.analytic_loads,
        counted_ratio: access.counted_ratio,
        analytic_ratio: access.analytic_ratio,
        corrections: run.corrections,
        agreement_vs_full: agreement,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PplReport {
    pub mode: &'static str,
    pub budget: usize,
    pub n_tokens: usize,
    pub warmup: usize,
    pub n_scored: usize,
    pub mean_nats: f64,
    pub perplexity: f64,
}

pub fn cmd_eval_ppl(args: &EvalPplArgs) -> Result<PplReport> {
    let weights = load_model(&args.model)?;
    let (config, _) = decode_config(&args.policy, weights.config.n_layers)?;
    let tokens = parse_tokens(&fs::read_to_string(&args.tokens)?)?;
    let ce = teacher_forced(&weights, &tokens, &config, args.warmup)?;
    Ok(PplReport {
        mode: config.mode.as_str(),
        budget: config.budget,
        n_tokens: tokens.len(),
        warmup: args.warmup,
        n_scored: ce.n_scored,
        mean_nats: ce.mean_nats,
        perplexity: ce.perplexity,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NeedleReport {
    pub n: usize,
    pub head_dim: usize,
    pub budget: usize,
    pub page_size: usize,
    pub sinks: usize,
    pub window: usize,
    pub trials: usize,
    pub seed: u64,
    pub results: Vec<NeedleResult>,
}

pub fn cmd_needle(args: &NeedleArgs) -> Result<NeedleReport> {
    let setup = NeedleSetup {
        n: args.n,
        head_dim: args.head_dim,
        budget: args.budget,
        page_size: args.page_size,
        sinks: args.sinks,
        window: args.window,
    };
    if args.page_size == 0 || args.head_dim == 0 {
        return Err(CliError::Usage("--page-size and --head-dim must be positive".into()));
    }
    let results = run_needle(&setup, args.trials, args.seed)?;
    Ok(NeedleReport {
        n: args.n,
        head_dim: args.head_dim,
        budget: args.budget,
        page_size: args.page_size,
        sinks: args.sinks,
        window: args.window,
        trials: args.trials,
        seed: args.seed,
        results,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallPoint {
    pub reselect_layer: usize,
    pub mean_recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyzeReport {
    pub n_layers: usize,
    pub k: usize,
    pub n_steps: usize,
    pub base_layer: usize,
    pub overlap_csv: String,
    pub recall_csv: String,
    pub heatmap_csv: String,
    pub recall_curve: Vec<RecallPoint>,
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<AnalyzeReport> {
    let weights = load_model(&args.model)?;
    let prompt = load_prompt(&args.prompt, weights.config.vocab_size)?;
    let trace = trace_topk(&weights, &prompt, args.k, args.steps, false)?;
    let overlap = overlap_matrix(&trace)?;
    let curve = recall_curve(&trace, args.base)?;
    let heatmap = heatmap_export(&trace, args.head)?;

    fs::create_dir_all(&args.out_dir)?;
    let overlap_path = args.out_dir.join("overlap.csv");
    let recall_path = args.out_dir.join("recall.csv");
    let heatmap_path = args.out_dir.join("heatmap.csv");
    fs::write(&overlap_path, overlap.to_csv())?;
    fs::write(&recall_path, recall_curve_csv(&curve))?;
    fs::write(&heatmap_path, heatmap)?;

    Ok(AnalyzeReport {
        n_layers: weights.config.n_layers,
        k: args.k,
        n_steps: args.steps,
        base_layer: args.base,
        overlap_csv: overlap_path.display().to_string(),
        recall_csv: recall_path.display().to_string(),
        heatmap_csv: heatmap_path.display().to_string(),
        recall_curve: curve
            .into_iter()
            .map(|(reselect_layer, mean_recall)| RecallPoint {
                reselect_layer,
                mean_recall,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelResult {
    pub kernel: &'static str,
    /// Wall-clock, varies between runs.
    pub mean_ns: u64,
    pub key_token_loads: u64,
    pub value_token_loads: u64,
    pub selection_scans: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadRatio {
    pub layers: usize,
    pub reselect_layer: usize,
    pub n_full: usize,
    pub n_select: usize,
    pub n_sparse: usize,
    pub full_loads: u64,
    pub counted_loads: u64,
    pub counted_ratio: f64,
    pub analytic_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub n: usize,
    pub budget: usize,
    pub head_dim: usize,
    pub iters: usize,
    pub kernels: Vec<KernelResult>,
    pub load_ratio: LoadRatio,
}

fn time_kernel<F>(name: &'static str, iters: usize, mut f: F) -> Result<KernelResult>
where
    F: FnMut(&mut LayerLoads) -> sparsedec_core::Result<()>,
{
    let mut loads = LayerLoads::default();
    f(&mut loads)?;
    let start = Instant::now();
    for _ in 0..iters {
        f(&mut LayerLoads::default())?;
    }
    let mean_ns = (start.elapsed().as_nanos() / iters.max(1) as u128) as u64;
    Ok(KernelResult {
        kernel: name,
        mean_ns,
        key_token_loads: loads.key_token_loads,
        value_token_loads: loads.value_token_loads,
        selection_scans: loads.selection_scans,
    })
}

pub fn cmd_bench(args: &BenchArgs) -> Result<BenchReport> {
    if args.n == 0 || args.budget == 0 || args.budget > args.n {
        return Err(Error::Budget {
            requested: args.budget,
            available: args.n,
        }
        .into());
    }
    if args.head_dim == 0 || args.page_size == 0 {
        return Err(CliError::Usage("--head-dim and --page-size must be positive".into()));
    }
    let (n, m, d) = (args.n, args.budget, args.head_dim);
    let mut rng = SplitMix64::new(args.seed);
    let keys = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.next_symmetric_f32(1.0)).collect())?;
    let values = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.next_symmetric_f32(1.0)).collect())?;
    let q: Vec<f32> = (0..d).map(|_| rng.next_symmetric_f32(1.0)).collect();
    let queries = [&q[..]];
    let (kv, vv) = (keys.view(), values.view());
    let agg = GroupAggregation::Sum;
    let (_, selected) = full_attention_with_selection(&queries, kv, vv, m, agg, &mut LayerLoads::default())?;

    let kernels = vec![
        time_kernel("full", args.iters, |l| grouped_full_attention(&queries, kv, vv, l).map(drop))?,
        time_kernel("select", args.iters, |l| {
            full_attention_with_selection(&queries, kv, vv, m, agg, l).map(drop)
        })?,
        time_kernel("sparse", args.iters, |l| sparse_attention(&queries, kv, vv, &selected, l).map(drop))?,
        time_kernel("page", args.iters, |l| {
            let sel = page_estimate_select(&queries, kv, m, args.page_size, agg, l)?;
            sparse_attention(&queries, kv, vv, &sel, l).map(drop)
        })?,
    ];

    // One decode step's worth of attention over the schedule, counted by
    // the kernels themselves.
    let reselect = args.reselect.unwrap_or_else(|| default_reselect_layer(args.layers));
    let schedule = default_schedule(args.layers, reselect)?;
    let mut per_layer = vec![LayerLoads::default(); args.layers];
    let mut buffer: Vec<usize> = Vec::new();
    for (role, loads) in schedule.roles().iter().zip(per_layer.iter_mut()) {
        match role {
            LayerRole::Full => {
                grouped_full_attention(&queries, kv, vv, loads)?;
            }
            LayerRole::Select => {
                let (_, sel) = full_attention_with_selection(&queries, kv, vv, m, agg, loads)?;
                buffer = sel;
            }
            LayerRole::Sparse => {
                sparse_attention(&queries, kv, vv, &buffer, loads)?;
            }
        }
    }
    let counted: u64 = per_layer.iter().map(|l| l.key_token_loads).sum();
    let full_loads = (args.layers * n) as u64;
    let (n_full, n_select, n_sparse) = (
        schedule.count(LayerRole::Full),
        schedule.count(LayerRole::Select),
        schedule.count(LayerRole::Sparse),
    );

    Ok(BenchReport {
        n,
        budget: m,
        head_dim: d,
        iters: args.iters,
        kernels,
        load_ratio: LoadRatio {
            layers: args.layers,
            reselect_layer: reselect,
            n_full,
            n_select,
            n_sparse,
            full_loads,
            counted_loads: counted,
            counted_ratio: full_loads as f64 / counted as f64,
            analytic_ratio: analytic_load_ratio(n_full, n_select, n_sparse, n as u64, m as u64),
        },
    })
}
