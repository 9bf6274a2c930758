//! Central finite-difference check of every trainable tensor.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episode_model::{ModelConfig, PostFeatures, TaskBatch, UrmModel};
use crate::nn::Params;
use crate::text_encoder::{FusionMode, TextEncoderConfig};

const STEP: f64 = 1e-5;

/// Dimensions ≤ 8, posts of 6 tokens, episodes of 3 posts.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        text: TextEncoderConfig {
            vocab_size: 12,
            seq_len: 6,
            token_dim: 8,
            filters: 3,
            conv_dim: 8,
            heads: 2,
            blocks: 1,
            ff_dim: 8,
            pooled_dim: 8,
            epsilon: 0.3,
            fusion: FusionMode::Residual,
            positional: true,
            mask_pad: false,
        },
        time_dim: 4,
        graph_dim: 4,
        episode_len: 3,
        agg_dim: 8,
        agg_heads: 4,
        agg_ff_dim: 8,
        embed_dim: 8,
        post_positions: true,
        use_time: true,
        use_graph_context: true,
    }
}

/// Parameter group of a tensor name, as reported by the checker.
pub fn param_group(name: &str) -> &'static str {
    let rest = name.split_once('.').map_or("", |(_, r)| r);
    if name.starts_with("text.") {
        if rest == "token_table" {
            "token_table"
        } else if rest.starts_with("conv") {
            "conv_filters"
        } else if rest.starts_with("attn") {
            "text_attention"
        } else if rest.starts_with("pool_") {
            "pooling_projections"
        } else if rest.starts_with("gate") {
            "gate_projection"
        } else {
            "text_other"
        }
    } else if name.starts_with("time.") {
        "time_projection"
    } else if name.starts_with("episode.") {
        "episode_aggregator"
    } else if name.starts_with("head.") {
        "heads"
    } else {
        "other"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradEntry {
    pub tensor: String,
    pub group: String,
    pub elements: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub tolerance: f64,
    pub entries: Vec<GradEntry>,
    /// Max relative error per group.
    pub groups: BTreeMap<String, f64>,
    pub passed: bool,
    pub all_finite: bool,
}

impl GradReport {
    // NaN errors count as failing.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn failing_groups(&self) -> Vec<&str> {
        self.groups.iter().filter(|(_, &e)| !(e < self.tolerance)).map(|(g, _)| g.as_str()).collect()
    }
}

/// A two-head micro model with a fixed random batch.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub model: UrmModel,
    episodes: Vec<Vec<PostFeatures>>,
    /// `(head, episode, class)`
    examples: Vec<(usize, usize, usize)>,
}

impl GradCheck {
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        let classes = ["a", "b", "c"].map(String::from).to_vec();
        let model =
            UrmModel::new(cfg.clone(), vec![("x".into(), classes.clone()), ("y".into(), classes[..2].to_vec())], seed)
                .expect("grad-check config is valid");
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
        let episodes = (0..3)
            .map(|_| {
                (0..cfg.episode_len)
                    .map(|_| PostFeatures {
                        ids: (0..cfg.text.seq_len).map(|_| rng.random_range(0..cfg.text.vocab_size as u32)).collect(),
                        dow: rng.random_range(0..7),
                        doy: rng.random_range(1..=366),
                        context: (0..cfg.graph_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    })
                    .collect()
            })
            .collect();
        Self { model, episodes, examples: vec![(0, 0, 2), (0, 1, 0), (1, 2, 1), (1, 0, 0)] }
    }

    pub fn zero_parameters(&mut self) {
        self.model.named_mut().into_iter().for_each(|(_, m)| m.fill(0.0));
    }

    fn batches(&self) -> Vec<TaskBatch<'_>> {
        let mut out: Vec<TaskBatch<'_>> = Vec::new();
        for &(h, e, c) in &self.examples {
            match out.iter_mut().find(|b| b.head == h) {
                Some(b) => b.examples.push((&self.episodes[e], c)),
                None => out.push(TaskBatch { head: h, examples: vec![(&self.episodes[e], c)] }),
            }
        }
        out
    }

    fn loss(&self, model: &UrmModel) -> f64 {
        model.multitask_loss(&self.batches()).expect("grad-check batch is valid")
    }

    /// Compares every element of every tensor. `corrupt` names a group whose
    /// analytic gradient is deliberately perturbed (harness self-test).
    pub fn run(&self, tolerance: f64, corrupt: Option<&str>) -> GradReport {
        let (_, mut grad) = self.model.multitask_loss_grad(&self.batches(), 1).expect("grad-check batch is valid");
        if let Some(group) = corrupt {
            for (name, m) in grad.named_mut() {
                if param_group(&name) == group {
                    m.data.iter_mut().for_each(|v| *v = *v * 1.5 + 0.1);
                }
            }
        }
        let analytic: Vec<(String, Vec<f64>)> = grad.named().into_iter().map(|(n, m)| (n, m.data.clone())).collect();
        let mut probe = self.model.clone();
        let mut entries = Vec::new();
        let mut all_finite = true;
        for (t, (name, ana)) in analytic.iter().enumerate() {
            let mut worst: f64 = 0.0;
            for (i, &a) in ana.iter().enumerate() {
                let orig = probe.named()[t].1.data[i];
                probe.named_mut()[t].1.data[i] = orig + STEP;
                let up = self.loss(&probe);
                probe.named_mut()[t].1.data[i] = orig - STEP;
                let down = self.loss(&probe);
                probe.named_mut()[t].1.data[i] = orig;
                let n = (up - down) / (2.0 * STEP);
                all_finite &= n.is_finite() && a.is_finite();
                let rel = (a - n).abs() / (a.abs() + n.abs()).max(1e-6);
                worst = worst.max(if rel.is_nan() { f64::INFINITY } else { rel });
            }
            entries.push(GradEntry {
                tensor: name.clone(),
                group: param_group(name).to_string(),
                elements: ana.len(),
                max_rel_error: worst,
                passed: worst < tolerance,
            });
        }
        let mut groups: BTreeMap<String, f64> = BTreeMap::new();
        for e in &entries {
            let g = groups.entry(e.group.clone()).or_insert(0.0);
            *g = g.max(e.max_rel_error);
        }
        let passed = entries.iter().all(|e| e.passed);
        GradReport { tolerance, entries, groups, passed, all_finite }
    }
}

/// Runs the check on `cfg` with seeded parameters and inputs.
pub fn grad_check(cfg: &ModelConfig, tolerance: f64, seed: u64) -> GradReport {
    GradCheck::new(cfg.clone(), seed).run(tolerance, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_cover_the_named_parameter_families() {
        let gc = GradCheck::new(micro_config(), 0);
        let groups: std::collections::BTreeSet<&str> =
            gc.model.named().iter().map(|(n, _)| param_group(n)).collect();
        for g in [
            "token_table",
            "conv_filters",
            "text_attention",
            "gate_projection",
            "time_projection",
            "episode_aggregator",
            "heads",
        ] {
            assert!(groups.contains(g), "{g}");
        }
        assert!(!groups.contains("other") && !groups.contains("text_other"));
    }

    #[test]
    fn zero_parameter_model_runs() {
        let mut gc = GradCheck::new(micro_config(), 1);
        gc.zero_parameters();
        let r = gc.run(1e-3, None);
        assert!(r.all_finite);
    }

    #[test]
    fn corrupted_group_is_flagged() {
        let mut cfg = micro_config();
        cfg.text.vocab_size = 4;
        let gc = GradCheck::new(cfg, 2);
        let r = gc.run(1e-3, Some("heads"));
        assert!(r.groups["heads"] > 1e-3);
        assert!(r.failing_groups().contains(&"heads"));
        assert!(!r.passed);
    }
}
