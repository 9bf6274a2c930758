//! Single- and multi-task optimisation, embedding export, checkpoints and the
//! finite-difference gradient harness.

mod checkpoint;
mod gradcheck;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, FileRef, ModelCheckpoint, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, micro_config, param_group, GradCheck, GradEntry, GradReport};

use crate::corpus::{split_and_window, Corpus, Episode, EpisodeConfig, IdentityMap, Post, Split};
use crate::episode_model::{ModelConfig, PostFeatures, TaskBatch, UrmModel};
use crate::error::{ModelError, TrainError};
use crate::evaluator::{EpisodeEmbeddingSet, RowInfo};
use crate::graph::NodeEmbeddings;
use crate::nn::Params;
use crate::tensor::Mat;
use crate::time_encoder::timestamp_to_fields;
use crate::tokenizer::Vocab;

/// Name of the head over cross-market identity groups.
pub const CROSS_TASK: &str = "@cross";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TrainMode {
    Single { market: String },
    Multitask { markets: Vec<String>, use_cross_task: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Moment-smoothed updates with β₁ = 0.9, β₂ = 0.999, eps = 1e-8.
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub model: ModelConfig,
    pub episodes: EpisodeConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Examples per gradient work unit; fixed so results do not depend on threads.
    pub grad_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Single { market: String::new() },
            model: ModelConfig::default(),
            episodes: EpisodeConfig::default(),
            epochs: 10,
            batch_size: 16,
            step_size: 1e-3,
            optimizer: Optimizer::Adam,
            seed: 0,
            grad_chunk: 4,
        }
    }
}

impl TrainConfig {
    pub fn markets(&self) -> Vec<String> {
        match &self.mode {
            TrainMode::Single { market } => vec![market.clone()],
            TrainMode::Multitask { markets, .. } => markets.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(ModelError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.episodes.length != self.model.episode_len {
            return Err(ModelError::InvalidConfig(format!(
                "episode length {} differs from model episode_len {}",
                self.episodes.length, self.model.episode_len
            )));
        }
        if self.episodes.length == 0 || self.episodes.train_stride == 0 || self.episodes.eval_stride == 0 {
            return Err(ModelError::InvalidConfig("episode length and strides must be >= 1".into()));
        }
        Ok(())
    }
}

/// Turns posts into model inputs.
#[derive(Debug, Clone, Copy)]
pub struct Featurizer<'a> {
    vocab: &'a Vocab,
    graph: Option<&'a NodeEmbeddings>,
    seq_len: usize,
    graph_dim: usize,
}

impl<'a> Featurizer<'a> {
    /// Graph embeddings are required iff the model uses graph context.
    pub fn new(cfg: &ModelConfig, vocab: &'a Vocab, graph: Option<&'a NodeEmbeddings>) -> Result<Self, TrainError> {
        let graph = if cfg.use_graph_context {
            let g = graph.ok_or(TrainError::MissingGraphEmbeddings)?;
            if g.dim() != cfg.graph_dim {
                return Err(ModelError::DimensionMismatch(format!(
                    "graph embeddings have width {}, model expects {}",
                    g.dim(),
                    cfg.graph_dim
                ))
                .into());
            }
            Some(g)
        } else {
            None
        };
        Ok(Self { vocab, graph, seq_len: cfg.text.seq_len, graph_dim: cfg.graph_dim })
    }

    pub fn post(&self, p: &Post) -> PostFeatures {
        let (dow, doy) = timestamp_to_fields(p.timestamp);
        let context = match self.graph {
            Some(g) => g.post_context(&p.market_id, &p.post_id),
            None => vec![0.0; self.graph_dim],
        };
        PostFeatures { ids: self.vocab.encode(&p.text, self.seq_len), dow, doy, context }
    }

    pub fn episode(&self, corpus: &Corpus, ep: &Episode) -> Result<Vec<PostFeatures>, TrainError> {
        ep.post_ids
            .iter()
            .map(|id| {
                corpus
                    .get(&ep.market_id, id)
                    .map(|p| self.post(p))
                    .ok_or_else(|| TrainError::UnknownPost(format!("{}/{id}", ep.market_id)))
            })
            .collect()
    }
}

/// One classification task: examples index into the shared episode list.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub name: String,
    pub labels: Vec<String>,
    pub examples: Vec<(usize, usize)>,
}

fn make_task(name: &str, items: Vec<(usize, String)>) -> Task {
    let labels: Vec<String> = items.iter().map(|(_, l)| l.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let examples = items
        .into_iter()
        .map(|(i, l)| (i, labels.binary_search(&l).expect("label collected above")))
        .collect();
    Task { name: name.to_string(), labels, examples }
}

/// Training tasks over `episodes` (only train-split episodes are used).
pub fn build_tasks(
    cfg: &TrainConfig,
    corpus: &Corpus,
    episodes: &[Episode],
    identity: Option<&IdentityMap>,
) -> Result<Vec<Task>, TrainError> {
    let known = corpus.markets();
    let markets = cfg.markets();
    for m in &markets {
        if !known.contains(m) {
            return Err(TrainError::UnknownMarket(m.clone()));
        }
    }
    let train: Vec<(usize, &Episode)> = episodes.iter().enumerate().filter(|(_, e)| e.split == Split::Train).collect();
    let mut tasks = Vec::new();
    for m in &markets {
        let items: Vec<(usize, String)> =
            train.iter().filter(|(_, e)| &e.market_id == m).map(|(i, e)| (*i, e.author_id.clone())).collect();
        if items.is_empty() {
            return Err(TrainError::NoTrainingEpisodes(m.clone()));
        }
        tasks.push(make_task(m, items));
    }
    if let TrainMode::Multitask { use_cross_task: true, .. } = cfg.mode {
        let derived;
        let identity = match identity {
            Some(map) => map,
            None => {
                derived = IdentityMap::from_usernames(&corpus.posts);
                &derived
            }
        };
        // Groups restricted to the trained markets must still span two of them.
        let selected: BTreeSet<&String> = markets.iter().collect();
        let mut account_group: HashMap<(String, String), usize> = HashMap::new();
        for (g, members) in identity.groups.iter().enumerate() {
            let inside: Vec<&(String, String)> = members.iter().filter(|(m, _)| selected.contains(m)).collect();
            let spans: BTreeSet<&String> = inside.iter().map(|(m, _)| m).collect();
            if spans.len() >= 2 {
                for acc in inside {
                    account_group.insert(acc.clone(), g);
                }
            }
        }
        let items: Vec<(usize, String)> = train
            .iter()
            .filter_map(|(i, e)| {
                account_group.get(&(e.market_id.clone(), e.author_id.clone())).map(|g| (*i, format!("g{g:06}")))
            })
            .collect();
        if items.is_empty() {
            log::warn!("no cross-market identity groups among training episodes; cross task skipped");
        } else {
            tasks.push(make_task(CROSS_TASK, items));
        }
    }
    Ok(tasks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: u64,
    pub task: String,
    pub loss: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    /// Epoch 0 holds the loss before any update; later epochs hold the mean step loss.
    pub log: Vec<LogRecord>,
    pub initial_loss: f64,
    /// Full-pass training loss after the last epoch.
    pub final_loss: f64,
}

impl TrainOutcome {
    pub fn log_jsonl(&self) -> String {
        self.log.iter().map(|r| serde_json::to_string(r).expect("log serializes") + "\n").collect()
    }
}

struct Adam {
    m: UrmModel,
    v: UrmModel,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn apply_update(model: &mut UrmModel, grad: &UrmModel, opt: &mut Option<Adam>, lr: f64) {
    match opt {
        None => {
            for ((_, p), (_, g)) in model.named_mut().into_iter().zip(grad.named()) {
                for (x, d) in p.data.iter_mut().zip(&g.data) {
                    *x -= lr * d;
                }
            }
        }
        Some(state) => {
            state.t += 1;
            let c1 = 1.0 - BETA1.powi(state.t);
            let c2 = 1.0 - BETA2.powi(state.t);
            let moments = state.m.named_mut().into_iter().zip(state.v.named_mut());
            for (((_, p), (_, g)), ((_, m), (_, v))) in model.named_mut().into_iter().zip(grad.named()).zip(moments) {
                for i in 0..p.data.len() {
                    let d = g.data[i];
                    m.data[i] = BETA1 * m.data[i] + (1.0 - BETA1) * d;
                    v.data[i] = BETA2 * v.data[i] + (1.0 - BETA2) * d * d;
                    p.data[i] -= lr * (m.data[i] / c1) / ((v.data[i] / c2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// Rounds every parameter to the nearest f32, the checkpoint storage width.
pub fn round_to_f32(model: &mut UrmModel) {
    for (_, m) in model.named_mut() {
        m.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}

/// Sum over tasks of each task's mean loss over all of its examples.
pub fn full_loss(model: &UrmModel, tasks: &[Task], inputs: &[Vec<PostFeatures>]) -> Result<f64, ModelError> {
    let batches: Vec<TaskBatch<'_>> = tasks
        .iter()
        .enumerate()
        .map(|(h, t)| TaskBatch { head: h, examples: t.examples.iter().map(|&(i, c)| (inputs[i].as_slice(), c)).collect() })
        .collect();
    model.multitask_loss(&batches)
}

/// Trains from scratch. The vocabulary size in the model config is replaced
/// by `vocab.len()`; the returned checkpoint holds f32-rounded parameters.
pub fn train(
    cfg: &TrainConfig,
    corpus: &Corpus,
    vocab: &Vocab,
    graph: Option<&NodeEmbeddings>,
    identity: Option<&IdentityMap>,
) -> Result<TrainOutcome, TrainError> {
    let mut cfg = cfg.clone();
    cfg.model.text.vocab_size = vocab.len();
    cfg.validate()?;
    let feat = Featurizer::new(&cfg.model, vocab, graph)?;

    let selected: BTreeSet<String> = cfg.markets().into_iter().collect();
    let posts: Vec<Post> = corpus.posts.iter().filter(|p| selected.contains(&p.market_id)).cloned().collect();
    let episodes = split_and_window(&posts, &cfg.episodes);
    let tasks = build_tasks(&cfg, corpus, &episodes, identity)?;

    let used: BTreeSet<usize> = tasks.iter().flat_map(|t| t.examples.iter().map(|&(i, _)| i)).collect();
    let inputs: Vec<Vec<PostFeatures>> = episodes
        .par_iter()
        .enumerate()
        .map(|(i, ep)| if used.contains(&i) { feat.episode(corpus, ep) } else { Ok(Vec::new()) })
        .collect::<Result<_, _>>()?;

    let heads = tasks.iter().map(|t| (t.name.clone(), t.labels.clone())).collect();
    let mut model = UrmModel::new(cfg.model.clone(), heads, cfg.seed)?;
    let mut opt = match cfg.optimizer {
        Optimizer::Adam => Some(Adam { m: model.zeros_like(), v: model.zeros_like(), t: 0 }),
        Optimizer::Sgd => None,
    };

    let start = Instant::now();
    let initial_loss = full_loss(&model, &tasks, &inputs)?;
    let mut log = vec![LogRecord { epoch: 0, step: 0, task: "total".into(), loss: initial_loss, wall_time: 0.0 }];
    log::info!("epoch 0: loss {initial_loss:.5}");

    let mut rng = ChaCha8Rng::seed_from_u64(crate::graph::derive_seed(cfg.seed, 0x7A1, 0));
    let bs = cfg.batch_size;
    let mut step: u64 = 0;
    for epoch in 1..=cfg.epochs {
        let perms: Vec<Vec<(usize, usize)>> = tasks
            .iter()
            .map(|t| {
                let mut e = t.examples.clone();
                e.shuffle(&mut rng);
                e
            })
            .collect();
        let steps = perms.iter().map(|p| p.len().div_ceil(bs)).max().unwrap_or(0);
        let mut epoch_loss = 0.0;
        for s in 0..steps {
            let batches: Vec<TaskBatch<'_>> = perms
                .iter()
                .enumerate()
                .map(|(h, perm)| {
                    let n = perm.len();
                    // The largest task walks its permutation once; smaller ones wrap around.
                    let end = if n.div_ceil(bs) == steps { ((s + 1) * bs).min(n) } else { (s + 1) * bs };
                    let examples = (s * bs..end)
                        .map(|k| {
                            let (i, c) = perm[k % n];
                            (inputs[i].as_slice(), c)
                        })
                        .collect();
                    TaskBatch { head: h, examples }
                })
                .collect();
            let (loss, grad) = model.multitask_loss_grad(&batches, cfg.grad_chunk)?;
            apply_update(&mut model, &grad, &mut opt, cfg.step_size);
            epoch_loss += loss;
            step += 1;
        }
        let mean = epoch_loss / steps.max(1) as f64;
        log::info!("epoch {epoch}: loss {mean:.5}");
        log.push(LogRecord { epoch, step, task: "total".into(), loss: mean, wall_time: start.elapsed().as_secs_f64() });
    }

    round_to_f32(&mut model);
    let final_loss = if cfg.epochs == 0 { initial_loss } else { full_loss(&model, &tasks, &inputs)? };
    let checkpoint = ModelCheckpoint { config: cfg, model, vocab: None, graph: None, step };
    Ok(TrainOutcome { checkpoint, log, initial_loss, final_loss })
}

/// Unit embeddings for `episodes`. Post rows are computed once per distinct
/// post and shared between overlapping windows.
pub fn embed_episodes(
    model: &UrmModel,
    feat: &Featurizer<'_>,
    corpus: &Corpus,
    episodes: &[Episode],
    identity: Option<&IdentityMap>,
) -> Result<EpisodeEmbeddingSet, TrainError> {
    let distinct: BTreeSet<(&str, &str)> =
        episodes.iter().flat_map(|e| e.post_ids.iter().map(|p| (e.market_id.as_str(), p.as_str()))).collect();
    let distinct: Vec<(&str, &str)> = distinct.into_iter().collect();
    let rows: Vec<Vec<f64>> = distinct
        .par_iter()
        .map(|&(m, id)| {
            let post = corpus.get(m, id).ok_or_else(|| TrainError::UnknownPost(format!("{m}/{id}")))?;
            Ok(model.post_vector(&feat.post(post))?)
        })
        .collect::<Result<_, TrainError>>()?;
    let cache: HashMap<(&str, &str), &Vec<f64>> = distinct.iter().copied().zip(rows.iter()).collect();

    let embeddings: Vec<Vec<f64>> = episodes
        .par_iter()
        .map(|e| {
            let rows: Vec<Vec<f64>> =
                e.post_ids.iter().map(|p| cache[&(e.market_id.as_str(), p.as_str())].clone()).collect();
            model.aggregate(&rows)
        })
        .collect::<Result<_, ModelError>>()?;

    let groups = identity.map(IdentityMap::lookup).unwrap_or_default();
    let info = episodes
        .iter()
        .map(|e| RowInfo {
            episode_id: e.id(),
            market_id: e.market_id.clone(),
            author_id: e.author_id.clone(),
            group: groups.get(&(e.market_id.clone(), e.author_id.clone())).copied(),
        })
        .collect();
    let dim = model.cfg.embed_dim;
    let data: Vec<f64> = embeddings.into_iter().flatten().collect();
    Ok(EpisodeEmbeddingSet::new(Mat::from_vec(episodes.len(), dim, data), info))
}

/// Test-split episodes of the given markets under `cfg`'s windowing.
pub fn test_episodes(corpus: &Corpus, markets: &[String], cfg: &EpisodeConfig) -> Vec<Episode> {
    let selected: BTreeSet<&String> = markets.iter().collect();
    let posts: Vec<Post> = corpus.posts.iter().filter(|p| selected.contains(&p.market_id)).cloned().collect();
    split_and_window(&posts, cfg).into_iter().filter(|e| e.split == Split::Test).collect()
}

/// Per-task label counts, for logging.
pub fn task_summary(tasks: &[Task]) -> BTreeMap<String, (usize, usize)> {
    tasks.iter().map(|t| (t.name.clone(), (t.labels.len(), t.examples.len()))).collect()
}
