//! Selection-level needle retrieval.
//!
//! Each trial fills a key matrix with random rows, draws a probe query, and
//! plants a scaled copy of the query at a random position. The scale makes
//! the planted inner product at least twice the best filler's. A policy
//! retrieves the needle when the planted position is in its selected set.

use serde::Serialize;
use sparsedec_core::attention::{
    exact_select, full_attention_with_selection, page_estimate_select, window_select, GroupAggregation, LayerLoads,
};
use sparsedec_core::math::{dot, Matrix};
use sparsedec_core::rng::SplitMix64;
use sparsedec_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NeedlePolicy {
    Tidal,
    Perlayer,
    Page,
    Window,
}

impl NeedlePolicy {
    pub const ALL: [NeedlePolicy; 4] = [Self::Tidal, Self::Perlayer, Self::Page, Self::Window];
}

#[derive(Debug, Clone, Copy)]
pub struct NeedleSetup {
    pub n: usize,
    pub head_dim: usize,
    pub budget: usize,
    pub page_size: usize,
    pub sinks: usize,
    pub window: usize,
}

#[derive(Debug, Clone)]
pub struct Haystack {
    pub keys: Matrix,
    pub query: Vec<f32>,
    pub needle: usize,
}

impl Haystack {
    pub fn draw(rng: &mut SplitMix64, n: usize, head_dim: usize) -> Self {
        let query: Vec<f32> = (0..head_dim).map(|_| rng.next_symmetric_f32(1.0)).collect();
        let data: Vec<f32> = (0..n * head_dim).map(|_| rng.next_symmetric_f32(1.0)).collect();
        let mut keys = Matrix::from_vec(n, head_dim, data).expect("sized");
        let needle = rng.next_below(n as u64) as usize;
        let best_filler = (0..n)
            .filter(|&j| j != needle)
            .map(|j| dot(&query, keys.row(j)))
            .fold(0.0f32, f32::max);
        let norm_sq = dot(&query, &query).max(f32::MIN_POSITIVE);
        let scale = (2.0 * best_filler + 1.0) / norm_sq;
        for (k, &q) in keys.row_mut(needle).iter_mut().zip(&query) {
            *k = q * scale;
        }
        Self { keys, query, needle }
    }

    pub fn select(&self, policy: NeedlePolicy, setup: &NeedleSetup) -> Result<Vec<usize>> {
        let q = [&self.query[..]];
        let keys = self.keys.view();
        let mut loads = LayerLoads::default();
        match policy {
            NeedlePolicy::Tidal => {
                full_attention_with_selection(&q, keys, keys, setup.budget, GroupAggregation::Sum, &mut loads)
                    .map(|(_, sel)| sel)
            }
            NeedlePolicy::Perlayer => exact_select(&q, keys, setup.budget, GroupAggregation::Sum, &mut loads),
            NeedlePolicy::Page => {
                page_estimate_select(&q, keys, setup.budget, setup.page_size, GroupAggregation::Sum, &mut loads)
            }
            NeedlePolicy::Window => Ok(window_select(setup.n, setup.sinks, setup.window)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NeedleResult {
    pub mode: NeedlePolicy,
    pub hits: usize,
    pub trials: usize,
    pub accuracy: f64,
}

/// Run `trials` haystacks, each shared by all policies.
pub fn run_needle(setup: &NeedleSetup, trials: usize, seed: u64) -> Result<Vec<NeedleResult>> {
    if setup.n == 0 || setup.budget == 0 || setup.budget > setup.n {
        return Err(Error::Budget {
            requested: setup.budget,
            available: setup.n,
        });
    }
    let mut rng = SplitMix64::new(seed);
    let mut hits = [0usize; 4];
    for _ in 0..trials {
        let hay = Haystack::draw(&mut rng, setup.n, setup.head_dim);
        for (i, policy) in NeedlePolicy::ALL.iter().enumerate() {
            let sel = hay.select(*policy, setup)?;
            if sel.binary_search(&hay.needle).is_ok() {
                hits[i] += 1;
            }
        }
    }
    Ok(NeedlePolicy::ALL
        .iter()
        .zip(hits)
        .map(|(&mode, hits)| NeedleResult {
            mode,
            hits,
            trials,
            accuracy: if trials == 0 { 0.0 } else { hits as f64 / trials as f64 },
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_needle_dominates_fillers() {
        let mut rng = SplitMix64::new(3);
        for _ in 0..20 {
            let hay = Haystack::draw(&mut rng, 500, 8);
            let planted = dot(&hay.query, hay.keys.row(hay.needle));
            let best = (0..500)
                .filter(|&j| j != hay.needle)
                .map(|j| dot(&hay.query, hay.keys.row(j)))
                .fold(f32::NEG_INFINITY, f32::max);
            assert!(planted >= 2.0 * best);
        }
    }

    #[test]
    fn small_run() {
        let setup = NeedleSetup {
            n: 300,
            head_dim: 8,
            budget: 4,
            page_size: 1,
            sinks: 4,
            window: 16,
        };
        let r = run_needle(&setup, 50, 1).unwrap();
        assert_eq!(r[0].hits, 50);
        assert_eq!(r[1].hits, 50);
        assert_eq!(r[2].hits, 50);
        assert!(r[3].hits < 50);
        assert!(run_needle(&NeedleSetup { budget: 301, ..setup }, 1, 0).is_err());
    }
}
