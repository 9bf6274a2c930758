//! Episode aggregation, per-market softmax heads and the multi-task loss.
//!
//! [`UrmModel`] wires the post encoders (text, time, graph context) into the
//! episode encoder: per post `[H^O ; H^T ; H^M]`, input projection, learned
//! post positions, one attention block, mean pool, output projection, L2 norm.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::nn::{join, AttnBlock, AttnCache, Linear, Params};
use crate::tensor::{dot, norm, Mat};
use crate::text_encoder::{TextCache, TextEncoder, TextEncoderConfig};
use crate::time_encoder::TimeEncoder;

/// Norm below which the unit fallback `e₁` replaces the projection.
pub const NORM_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub text: TextEncoderConfig,
    pub time_dim: usize,
    pub graph_dim: usize,
    pub episode_len: usize,
    pub agg_dim: usize,
    pub agg_heads: usize,
    pub agg_ff_dim: usize,
    pub embed_dim: usize,
    /// Learned positions over the post axis; off makes the encoder order-free.
    pub post_positions: bool,
    pub use_time: bool,
    pub use_graph_context: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            text: TextEncoderConfig::default(),
            time_dim: 32,
            graph_dim: 64,
            episode_len: 5,
            agg_dim: 128,
            agg_heads: 4,
            agg_ff_dim: 256,
            embed_dim: 128,
            post_positions: true,
            use_time: true,
            use_graph_context: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.text.validate()?;
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.time_dim == 0 || self.graph_dim == 0 {
            return bad("time_dim and graph_dim must be >= 1");
        }
        if self.episode_len == 0 {
            return bad("episode_len must be >= 1");
        }
        if self.embed_dim < 2 {
            return bad("embed_dim must be >= 2");
        }
        if self.agg_heads == 0 || !self.agg_dim.is_multiple_of(self.agg_heads) {
            return bad("agg_dim must be a positive multiple of agg_heads");
        }
        Ok(())
    }

    /// `d_e = d_text + d_τ + d_m`.
    pub fn post_dim(&self) -> usize {
        self.text.output_dim() + self.time_dim + self.graph_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeEncoder {
    pub in_proj: Linear,
    /// `episode_len × agg_dim`
    pub positions: Mat,
    pub block: AttnBlock,
    pub out_proj: Linear,
    pub use_positions: bool,
}

#[derive(Debug, Clone)]
pub struct EpisodeCache {
    x: Mat,
    block: AttnCache,
    pooled: Vec<f64>,
    projected_norm: f64,
    /// The emitted unit vector.
    pub embedding: Vec<f64>,
    guarded: bool,
}

impl EpisodeEncoder {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.agg_dim;
        Self {
            in_proj: Linear::new(cfg.post_dim(), d, rng),
            positions: Mat::uniform(cfg.episode_len, d, 0.1, rng),
            block: AttnBlock::new(d, cfg.agg_heads, cfg.agg_ff_dim, rng),
            out_proj: Linear::new(d, cfg.embed_dim, rng),
            use_positions: cfg.post_positions,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.in_proj.input_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.out_proj.output_dim()
    }

    /// `x` holds one post per row.
    pub fn forward(&self, x: &Mat) -> Result<EpisodeCache, ModelError> {
        if x.cols != self.input_dim() || x.rows != self.positions.rows {
            return Err(ModelError::DimensionMismatch(format!(
                "episode input {}×{}, expected {}×{}",
                x.rows,
                x.cols,
                self.positions.rows,
                self.input_dim()
            )));
        }
        let mut z = self.in_proj.forward(x);
        if self.use_positions {
            z.add_assign(&self.positions);
        }
        let (y, block) = self.block.forward(&z, None);
        let pooled: Vec<f64> = y.col_sums().into_iter().map(|s| s / y.rows as f64).collect();
        let u = self.out_proj.forward_vec(&pooled);
        let n = norm(&u);
        let guarded = n < NORM_GUARD;
        let embedding = if guarded {
            let mut e = vec![0.0; u.len()];
            e[0] = 1.0;
            e
        } else {
            u.iter().map(|v| v / n).collect()
        };
        Ok(EpisodeCache { x: x.clone(), block, pooled, projected_norm: n, embedding, guarded })
    }

    /// Returns `dL/dx` and accumulates parameter gradients.
    pub fn backward(&self, cache: &EpisodeCache, de: &[f64], grad: &mut EpisodeEncoder) -> Mat {
        let rows = cache.x.rows;
        if cache.guarded {
            return Mat::zeros(rows, cache.x.cols);
        }
        let e = &cache.embedding;
        let proj = dot(e, de);
        let du: Vec<f64> = de.iter().zip(e).map(|(g, v)| (g - v * proj) / cache.projected_norm).collect();
        let dpooled = self.out_proj.backward(&Mat::row_vector(cache.pooled.clone()), &Mat::row_vector(du), &mut grad.out_proj);
        let mut dy = Mat::zeros(rows, dpooled.cols);
        for r in 0..rows {
            for (d, &g) in dy.row_mut(r).iter_mut().zip(&dpooled.data) {
                *d = g / rows as f64;
            }
        }
        let dz = self.block.backward(&cache.block, &dy, &mut grad.block);
        if self.use_positions {
            grad.positions.add_assign(&dz);
        }
        self.in_proj.backward(&cache.x, &dz, &mut grad.in_proj)
    }
}

impl Params for EpisodeEncoder {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        self.in_proj.tensors(&join(prefix, "in_proj"), out);
        out.push((join(prefix, "positions"), &self.positions));
        self.block.tensors(&join(prefix, "block"), out);
        self.out_proj.tensors(&join(prefix, "out_proj"), out);
    }
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Mat)>) {
        self.in_proj.tensors_mut(&join(prefix, "in_proj"), out);
        out.push((join(prefix, "positions"), &mut self.positions));
        self.block.tensors_mut(&join(prefix, "block"), out);
        self.out_proj.tensors_mut(&join(prefix, "out_proj"), out);
    }
}

/// Linear softmax classifier over one task's labels (sorted, index = class).
#[derive(Debug, Clone, PartialEq)]
pub struct MarketHead {
    pub task: String,
    pub labels: Vec<String>,
    /// `E × Y` weights, `1 × Y` bias.
    pub linear: Linear,
}

impl MarketHead {
    pub fn new<R: Rng + ?Sized>(task: &str, mut labels: Vec<String>, embed_dim: usize, rng: &mut R) -> Self {
        labels.sort();
        labels.dedup();
        let linear = Linear::new(embed_dim, labels.len(), rng);
        Self { task: task.to_string(), labels, linear }
    }

    pub fn classes(&self) -> usize {
        self.labels.len()
    }

    pub fn class_of(&self, label: &str) -> Option<usize> {
        self.labels.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    /// `Wᵀe + b`.
    pub fn classify(&self, e: &[f64]) -> Vec<f64> {
        self.linear.forward_vec(e)
    }
}

/// `−log softmax(logits)[class]`, max-subtracted.
pub fn softmax_xent(logits: &[f64], class: usize) -> Result<f64, ModelError> {
    softmax_xent_grad(logits, class).map(|(l, _)| l)
}

/// Loss and `dL/dlogits = softmax − onehot`.
pub fn softmax_xent_grad(logits: &[f64], class: usize) -> Result<(f64, Vec<f64>), ModelError> {
    if class >= logits.len() {
        return Err(ModelError::IndexOutOfRange { index: class, classes: logits.len() });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[class] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[class] -= 1.0;
    Ok((loss.max(0.0), grad))
}

/// Everything the model needs about one post.
#[derive(Debug, Clone, PartialEq)]
pub struct PostFeatures {
    pub ids: Vec<u32>,
    pub dow: u8,
    pub doy: u16,
    /// `H^M`, length `graph_dim`.
    pub context: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UrmModel {
    pub cfg: ModelConfig,
    pub text: TextEncoder,
    pub time: TimeEncoder,
    pub episode: EpisodeEncoder,
    pub heads: Vec<MarketHead>,
}

#[derive(Debug, Clone)]
pub struct PostCache {
    text: TextCache,
    dow: u8,
    doy: u16,
}

#[derive(Debug, Clone)]
pub struct ModelCache {
    posts: Vec<PostCache>,
    pub episode: EpisodeCache,
}

impl ModelCache {
    pub fn embedding(&self) -> &[f64] {
        &self.episode.embedding
    }
}

/// One task's batch: head index and `(episode posts, class)` pairs.
#[derive(Debug, Clone)]
pub struct TaskBatch<'a> {
    pub head: usize,
    pub examples: Vec<(&'a [PostFeatures], usize)>,
}

impl UrmModel {
    /// Parameters are drawn in order text, time, episode, heads from one seeded stream.
    pub fn new(cfg: ModelConfig, heads: Vec<(String, Vec<String>)>, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = TextEncoder::new(cfg.text.clone(), &mut rng)?;
        let time = TimeEncoder::new(cfg.time_dim, &mut rng)?;
        let episode = EpisodeEncoder::new(&cfg, &mut rng);
        let heads = heads
            .into_iter()
            .map(|(task, labels)| MarketHead::new(&task, labels, cfg.embed_dim, &mut rng))
            .collect();
        Ok(Self { cfg, text, time, episode, heads })
    }

    pub fn head_index(&self, task: &str) -> Option<usize> {
        self.heads.iter().position(|h| h.task == task)
    }

    /// `[H^O ; H^T ; H^M]` for one post, with ablated parts zeroed.
    fn post_forward(&self, post: &PostFeatures) -> Result<(Vec<f64>, PostCache), ModelError> {
        let (mut row, text) = self.text.forward(&post.ids)?;
        if self.cfg.use_time {
            row.extend(self.time.encode_time(post.dow, post.doy)?);
        } else {
            row.extend(std::iter::repeat_n(0.0, self.cfg.time_dim));
        }
        if self.cfg.use_graph_context {
            if post.context.len() != self.cfg.graph_dim {
                return Err(ModelError::DimensionMismatch(format!(
                    "graph context has {} values, expected {}",
                    post.context.len(),
                    self.cfg.graph_dim
                )));
            }
            row.extend_from_slice(&post.context);
        } else {
            row.extend(std::iter::repeat_n(0.0, self.cfg.graph_dim));
        }
        Ok((row, PostCache { text, dow: post.dow, doy: post.doy }))
    }

    /// The per-post input row; lets callers cache post encodings across episodes.
    pub fn post_vector(&self, post: &PostFeatures) -> Result<Vec<f64>, ModelError> {
        self.post_forward(post).map(|(row, _)| row)
    }

    /// Unit-norm embedding from precomputed post rows.
    pub fn aggregate(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>, ModelError> {
        let x = stack(rows, self.cfg.post_dim())?;
        Ok(self.episode.forward(&x)?.embedding)
    }

    pub fn forward(&self, posts: &[PostFeatures]) -> Result<ModelCache, ModelError> {
        if posts.len() != self.cfg.episode_len {
            return Err(ModelError::DimensionMismatch(format!(
                "episode has {} posts, expected {}",
                posts.len(),
                self.cfg.episode_len
            )));
        }
        let mut rows = Vec::with_capacity(posts.len());
        let mut caches = Vec::with_capacity(posts.len());
        for p in posts {
            let (row, cache) = self.post_forward(p)?;
            rows.push(row);
            caches.push(cache);
        }
        let episode = self.episode.forward(&stack(&rows, self.cfg.post_dim())?)?;
        Ok(ModelCache { posts: caches, episode })
    }

    pub fn encode_episode(&self, posts: &[PostFeatures]) -> Result<Vec<f64>, ModelError> {
        self.forward(posts).map(|c| c.episode.embedding)
    }

    pub fn backward(&self, cache: &ModelCache, de: &[f64], grad: &mut UrmModel) {
        let dx = self.episode.backward(&cache.episode, de, &mut grad.episode);
        let dt = self.text.output_dim();
        for (i, pc) in cache.posts.iter().enumerate() {
            let row = dx.row(i);
            self.text.backward(&pc.text, &row[..dt], &mut grad.text);
            if self.cfg.use_time {
                self.time.backward(pc.dow, pc.doy, &row[dt..dt + self.cfg.time_dim], &mut grad.time);
            }
        }
    }

    /// Loss of one example scaled by `weight`, with gradients accumulated into `grad`.
    fn example_grad(
        &self,
        head: usize,
        posts: &[PostFeatures],
        class: usize,
        weight: f64,
        grad: &mut UrmModel,
    ) -> Result<f64, ModelError> {
        let cache = self.forward(posts)?;
        let h = &self.heads[head];
        let e = cache.embedding();
        let (loss, mut dlogits) = softmax_xent_grad(&h.classify(e), class)?;
        dlogits.iter_mut().for_each(|g| *g *= weight);
        let de = h.linear.backward(&Mat::row_vector(e.to_vec()), &Mat::row_vector(dlogits), &mut grad.heads[head].linear);
        self.backward(&cache, &de.data, grad);
        Ok(loss * weight)
    }

    /// Sum over tasks of the mean cross-entropy in each task's batch.
    pub fn multitask_loss(&self, batches: &[TaskBatch<'_>]) -> Result<f64, ModelError> {
        let mut total = 0.0;
        for b in batches {
            check_batch(self, b)?;
            let h = &self.heads[b.head];
            let mut sum = 0.0;
            for &(posts, class) in &b.examples {
                sum += softmax_xent(&h.classify(&self.encode_episode(posts)?), class)?;
            }
            total += sum / b.examples.len() as f64;
        }
        Ok(total)
    }

    /// Loss and gradient of [`Self::multitask_loss`]. Examples are processed in
    /// fixed chunks of `chunk` and reduced in order, so the result does not
    /// depend on the thread count.
    pub fn multitask_loss_grad(&self, batches: &[TaskBatch<'_>], chunk: usize) -> Result<(f64, UrmModel), ModelError> {
        let mut work = Vec::new();
        for b in batches {
            check_batch(self, b)?;
            let w = 1.0 / b.examples.len() as f64;
            work.extend(b.examples.iter().map(|&(posts, class)| (b.head, posts, class, w)));
        }
        let parts: Vec<Result<(f64, UrmModel), ModelError>> = work
            .par_chunks(chunk.max(1))
            .map(|items| {
                let mut g = self.zeros_like();
                let mut loss = 0.0;
                for &(head, posts, class, w) in items {
                    loss += self.example_grad(head, posts, class, w, &mut g)?;
                }
                Ok((loss, g))
            })
            .collect();
        let mut total = 0.0;
        let mut grad: Option<UrmModel> = None;
        for part in parts {
            let (l, g) = part?;
            total += l;
            match grad.as_mut() {
                Some(acc) => acc.accumulate(&g),
                None => grad = Some(g),
            }
        }
        Ok((total, grad.unwrap_or_else(|| self.zeros_like())))
    }
}

fn check_batch(model: &UrmModel, b: &TaskBatch<'_>) -> Result<(), ModelError> {
    let task = model.heads.get(b.head).map_or_else(|| format!("#{}", b.head), |h| h.task.clone());
    if b.head >= model.heads.len() {
        return Err(ModelError::InvalidConfig(format!("no head {task}")));
    }
    if b.examples.is_empty() {
        return Err(ModelError::EmptyBatch(task));
    }
    Ok(())
}

fn stack(rows: &[Vec<f64>], width: usize) -> Result<Mat, ModelError> {
    let mut data = Vec::with_capacity(rows.len() * width);
    for r in rows {
        if r.len() != width {
            return Err(ModelError::DimensionMismatch(format!("post row has {} values, expected {width}", r.len())));
        }
        data.extend_from_slice(r);
    }
    Ok(Mat::from_vec(rows.len(), width, data))
}

impl Params for UrmModel {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        self.text.tensors(&join(prefix, "text"), out);
        self.time.tensors(&join(prefix, "time"), out);
        self.episode.tensors(&join(prefix, "episode"), out);
        for h in &self.heads {
            h.linear.tensors(&join(prefix, &format!("head.{}", h.task)), out);
        }
    }
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Mat)>) {
        self.text.tensors_mut(&join(prefix, "text"), out);
        self.time.tensors_mut(&join(prefix, "time"), out);
        self.episode.tensors_mut(&join(prefix, "episode"), out);
        for h in &mut self.heads {
            h.linear.tensors_mut(&join(prefix, &format!("head.{}", h.task)), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text_encoder::FusionMode;

    pub(crate) fn micro() -> ModelConfig {
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

    fn posts(seed: u64, n: usize) -> Vec<PostFeatures> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| PostFeatures {
                ids: (0..6).map(|_| rng.random_range(0..12)).collect(),
                dow: rng.random_range(0..7),
                doy: rng.random_range(1..=366),
                context: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect()
    }

    fn model(cfg: ModelConfig) -> UrmModel {
        UrmModel::new(cfg, vec![("a".into(), vec!["x".into(), "y".into(), "z".into()])], 5).unwrap()
    }

    #[test]
    fn embeddings_have_unit_norm() {
        let m = model(micro());
        for s in 0..5 {
            let e = m.encode_episode(&posts(s, 3)).unwrap();
            assert!((norm(&e) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn post_order_is_irrelevant_without_positions() {
        let mut cfg = micro();
        cfg.post_positions = false;
        let m = model(cfg);
        let p = posts(1, 3);
        let q = vec![p[2].clone(), p[0].clone(), p[1].clone()];
        let (a, b) = (m.encode_episode(&p).unwrap(), m.encode_episode(&q).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut with_pos = micro();
        with_pos.post_positions = true;
        let m2 = model(with_pos);
        assert_ne!(m2.encode_episode(&p).unwrap(), m2.encode_episode(&q).unwrap());
    }

    #[test]
    fn zero_parameters_hit_the_norm_guard() {
        let mut m = model(micro());
        m.named_mut().into_iter().for_each(|(_, t)| t.fill(0.0));
        let mut p = posts(2, 3);
        p.iter_mut().for_each(|x| x.context.fill(0.0));
        let e = m.encode_episode(&p).unwrap();
        let mut e1 = vec![0.0; 8];
        e1[0] = 1.0;
        assert_eq!(e, e1);
    }

    #[test]
    fn wrong_episode_length_is_rejected() {
        let m = model(micro());
        assert!(matches!(m.encode_episode(&posts(0, 2)), Err(ModelError::DimensionMismatch(_))));
        let mut p = posts(0, 3);
        p[0].context.pop();
        assert!(matches!(m.encode_episode(&p), Err(ModelError::DimensionMismatch(_))));
    }

    #[test]
    fn classify_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut h = MarketHead::new("m", vec!["b".into(), "a".into(), "c".into()], 3, &mut rng);
        assert_eq!(h.labels, vec!["a", "b", "c"]);
        assert_eq!(h.class_of("c"), Some(2));
        h.linear.w.fill(0.0);
        assert_eq!(h.classify(&[0.3, 0.1, 0.2]), vec![0.0; 3]);
        // Orthogonal rows: argmax is the nearest row.
        h.linear.w = Mat::from_vec(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let logits = h.classify(&[0.1, 0.9, 0.2]);
        let arg = (0..3).max_by(|&a, &b| logits[a].total_cmp(&logits[b])).unwrap();
        assert_eq!(arg, 1);
        let single = MarketHead::new("s", vec!["only".into()], 3, &mut rng);
        assert_eq!(single.classify(&[1.0, 2.0, 3.0]).len(), 1);
    }

    #[test]
    fn softmax_xent_cases() {
        assert!((softmax_xent(&[0.7; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(softmax_xent(&[30.0, -30.0], 0).unwrap() < 1e-9);
        assert!(softmax_xent(&[1e300, -1e300], 1).unwrap().is_finite());
        assert_eq!(softmax_xent(&[0.0, 0.0], 2), Err(ModelError::IndexOutOfRange { index: 2, classes: 2 }));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let logits: Vec<f64> = (0..5).map(|_| rng.random_range(-5.0..5.0)).collect();
            let c = rng.random_range(0..5);
            let direct = -(logits[c].exp() / logits.iter().map(|l| l.exp()).sum::<f64>()).ln();
            assert!((softmax_xent(&logits, c).unwrap() - direct).abs() < 1e-10);
        }
    }

    fn two_head_model() -> UrmModel {
        UrmModel::new(
            micro(),
            vec![("a".into(), vec!["x".into(), "y".into()]), ("b".into(), vec!["x".into(), "y".into()])],
            3,
        )
        .unwrap()
    }

    #[test]
    fn multitask_loss_is_additive() {
        let mut m = two_head_model();
        m.heads[1].linear = m.heads[0].linear.clone();
        let p1 = posts(1, 3);
        let p2 = posts(2, 3);
        let examples = vec![(p1.as_slice(), 0), (p2.as_slice(), 1)];
        let one = m.multitask_loss(&[TaskBatch { head: 0, examples: examples.clone() }]).unwrap();
        let direct = (softmax_xent(&m.heads[0].classify(&m.encode_episode(&p1).unwrap()), 0).unwrap()
            + softmax_xent(&m.heads[0].classify(&m.encode_episode(&p2).unwrap()), 1).unwrap())
            / 2.0;
        assert!((one - direct).abs() < 1e-12);
        let two = m
            .multitask_loss(&[
                TaskBatch { head: 0, examples: examples.clone() },
                TaskBatch { head: 1, examples: examples.clone() },
            ])
            .unwrap();
        assert!((two - 2.0 * one).abs() < 1e-9);
        let (lg, _) = m.multitask_loss_grad(&[TaskBatch { head: 0, examples }], 1).unwrap();
        assert!((lg - one).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let m = two_head_model();
        let r = m.multitask_loss(&[TaskBatch { head: 1, examples: vec![] }]);
        assert_eq!(r, Err(ModelError::EmptyBatch("b".into())));
    }

    #[test]
    fn heads_only_learn_from_their_own_task() {
        let m = two_head_model();
        let p = posts(4, 3);
        let (_, g) = m.multitask_loss_grad(&[TaskBatch { head: 0, examples: vec![(p.as_slice(), 1)] }], 4).unwrap();
        assert!(g.heads[1].linear.w.data.iter().all(|&v| v == 0.0));
        assert!(g.heads[1].linear.b.data.iter().all(|&v| v == 0.0));
        assert!(g.heads[0].linear.w.data.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn chunking_does_not_change_the_gradient_much() {
        let m = two_head_model();
        let eps: Vec<Vec<PostFeatures>> = (0..5).map(|s| posts(10 + s, 3)).collect();
        let examples: Vec<_> = eps.iter().enumerate().map(|(i, p)| (p.as_slice(), i % 2)).collect();
        let batches = [TaskBatch { head: 0, examples: examples.clone() }, TaskBatch { head: 1, examples }];
        let (l1, g1) = m.multitask_loss_grad(&batches, 1).unwrap();
        let (l3, g3) = m.multitask_loss_grad(&batches, 3).unwrap();
        assert!((l1 - l3).abs() < 1e-12);
        for ((_, a), (_, b)) in g1.named().into_iter().zip(g3.named()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ablated_branches_ignore_their_inputs() {
        let mut cfg = micro();
        cfg.use_time = false;
        cfg.use_graph_context = false;
        let m = model(cfg);
        let p = posts(3, 3);
        let mut q = p.clone();
        for x in &mut q {
            x.dow = (x.dow + 3) % 7;
            x.doy = x.doy % 366 + 1;
            x.context = vec![9.0; 4];
        }
        assert_eq!(m.encode_episode(&p).unwrap(), m.encode_episode(&q).unwrap());
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let m = two_head_model();
        let p = posts(7, 3);
        let batches = [TaskBatch { head: 1, examples: vec![(p.as_slice(), 0)] }];
        let (_, g) = m.multitask_loss_grad(&batches, 1).unwrap();
        let names: Vec<String> = m.named().into_iter().map(|(n, _)| n).collect();
        for (ti, name) in names.iter().enumerate() {
            let len = m.named()[ti].1.len();
            for idx in [0, len / 2, len - 1] {
                let mut plus = m.clone();
                let mut minus = m.clone();
                plus.named_mut()[ti].1.data[idx] += 1e-5;
                minus.named_mut()[ti].1.data[idx] -= 1e-5;
                let num = (plus.multitask_loss(&batches).unwrap() - minus.multitask_loss(&batches).unwrap()) / 2e-5;
                let ana = g.named()[ti].1.data[idx];
                let rel = (num - ana).abs() / (num.abs() + ana.abs()).max(1e-6);
                assert!(rel < 1e-3, "{name}[{idx}]: analytic {ana}, numeric {num}");
            }
        }
    }
}
