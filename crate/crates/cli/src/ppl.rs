use serde::Serialize;
use sparsedec_core::{DecodeConfig, Error, ModelWeights, Result, Session};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossEntropy {
    pub n_scored: usize,
    pub mean_nats: f64,
    pub perplexity: f64,
}

/// `-log softmax(logits)[target]`, computed in f64.
pub fn token_nll(logits: &[f32], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = logits.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln() + max;
    lse - logits[target] as f64
}

/// Teacher-forced next-token cross-entropy. The first `warmup` tokens are
/// context only; every later token is scored against the logits produced
/// from the tokens before it, decoding under `config`.
pub fn teacher_forced(weights: &ModelWeights, tokens: &[u32], config: &DecodeConfig, warmup: usize) -> Result<CrossEntropy> {
    let vocab = weights.config.vocab_size;
    if let Some(bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::Input(format!("token id {bad} outside vocabulary of {vocab}")));
    }
    if warmup == 0 || warmup >= tokens.len() {
        return Err(Error::Input(format!(
            "warmup {warmup} must lie in [1, {}) for {} tokens",
            tokens.len(),
            tokens.len()
        )));
    }
    let mut session = Session::start(weights, &tokens[..warmup])?;
    let mut total = 0.0f64;
    for &target in &tokens[warmup..] {
        let (logits, _) = session.step(config, None)?;
        total += token_nll(&logits, target as usize);
        session.push(target)?;
    }
    let n = tokens.len() - warmup;
    let mean = total / n as f64;
    Ok(CrossEntropy {
        n_scored: n,
        mean_nats: mean,
        perplexity: mean.exp(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nll_of_uniform_logits() {
        let v = token_nll(&[0.0; 50], 3);
        assert!((v - 50f64.ln()).abs() < 1e-12);
        assert!((token_nll(&[0.0, 1000.0], 1)).abs() < 1e-9);
    }
}
