//! Skip-gram with negative sampling over walk windows.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::GraphError;
use crate::tensor::{dot, sigmoid, Mat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub step_size: f64,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        Self { dim: 64, window: 5, negatives: 5, epochs: 3, step_size: 0.025, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkipGram {
    /// Node vectors; this is what callers keep.
    pub center: Mat,
    pub context: Mat,
}

impl SkipGram {
    pub fn init(node_count: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            center: Mat::uniform(node_count, dim, 0.5 / dim as f64, &mut rng),
            context: Mat::zeros(node_count, dim),
        }
    }

    /// `-log σ(c·o) - Σ log σ(-c·n)` for one (center, context) pair.
    pub fn pair_loss(&self, center: usize, context: usize, negatives: &[usize]) -> f64 {
        let c = self.center.row(center);
        let pos = -sigmoid(dot(c, self.context.row(context))).max(1e-300).ln();
        let neg: f64 = negatives
            .iter()
            .map(|&n| -sigmoid(-dot(c, self.context.row(n))).max(1e-300).ln())
            .sum();
        pos + neg
    }

    /// One SGD step on `pair_loss`.
    pub fn step(&mut self, center: usize, context: usize, negatives: &[usize], lr: f64) {
        let dim = self.center.cols;
        let mut acc = vec![0.0; dim];
        let targets = std::iter::once((context, 1.0)).chain(negatives.iter().map(|&n| (n, 0.0)));
        for (t, label) in targets {
            let c = self.center.row(center);
            let o = self.context.row_mut(t);
            let g = (label - sigmoid(dot(c, o))) * lr;
            for k in 0..dim {
                acc[k] += g * o[k];
                o[k] += g * c[k];
            }
        }
        for (c, a) in self.center.row_mut(center).iter_mut().zip(acc) {
            *c += a;
        }
    }
}

/// Trains node vectors on `walks` (node indices below `node_count`).
///
/// Training is sequential and fully determined by `cfg.seed`. The learning
/// rate decays linearly from `step_size` over all center positions.
pub fn train_skipgram(walks: &[Vec<usize>], node_count: usize, cfg: &SkipGramConfig) -> Result<SkipGram, GraphError> {
    if !walks.iter().any(|w| w.len() >= 2) {
        return Err(GraphError::EmptyWalkSet);
    }
    let mut model = SkipGram::init(node_count, cfg.dim, cfg.seed);
    if cfg.epochs == 0 {
        return Ok(model);
    }

    let mut counts = vec![0usize; node_count];
    for w in walks {
        for &n in w {
            counts[n] += 1;
        }
    }
    let weights: Vec<f64> = counts.iter().map(|&c| (c as f64).powf(0.75)).collect();
    let noise = WeightedIndex::new(&weights).expect("some node occurs in a walk");

    let total: usize = walks.iter().filter(|w| w.len() >= 2).map(Vec::len).sum::<usize>() * cfg.epochs;
    let mut done = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_5EED);
    let mut negs = Vec::with_capacity(cfg.negatives);
    for _ in 0..cfg.epochs {
        for walk in walks.iter().filter(|w| w.len() >= 2) {
            for i in 0..walk.len() {
                let lr = cfg.step_size * (1.0 - done as f64 / total as f64).max(1e-4);
                done += 1;
                // Reduced window as in word2vec: nearer neighbours are seen more often.
                let b = rng.random_range(1..=cfg.window.max(1));
                let lo = i.saturating_sub(b);
                let hi = (i + b).min(walk.len() - 1);
                for j in lo..=hi {
                    if j == i {
                        continue;
                    }
                    negs.clear();
                    for _ in 0..cfg.negatives {
                        let n = noise.sample(&mut rng);
                        if n != walk[j] {
                            negs.push(n);
                        }
                    }
                    model.step(walk[i], walk[j], &negs, lr);
                }
            }
        }
    }
    Ok(model)
}
