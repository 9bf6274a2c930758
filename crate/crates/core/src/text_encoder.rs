//! Post text encoder: a multi-width convolutional branch and a stacked
//! self-attention branch, fused by a confidence-band gate.
//!
//! ```text
//! ids ─ embed ─┬─ conv(k=2..5) ─ relu ─ max-over-time ─ concat ─ linear ─────── H_conv ─┐
//!              └─ +positions ─ attention blocks ─ max/mean pool ─ linear ─ H_max, H_mean ┤
//!                                   gate = valve(sigmoid(linear(H_conv)), ε) ────────────┴─ H_out
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::nn::{join, AttnBlock, AttnCache, Linear, Params};
use crate::tensor::{matmul, matmul_nt, matmul_tn_acc, sigmoid, sinusoidal_positions, Mat};

/// Convolution widths of the local-feature branch.
pub const KERNEL_SIZES: [usize; 4] = [2, 3, 4, 5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// `H_conv + G ⊙ (H_max + H_mean)`, width `conv_dim`.
    Residual,
    /// `[H_conv ; G ⊙ H_max ; G ⊙ H_mean]`, width `conv_dim + 2·pooled_dim`.
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub token_dim: usize,
    pub filters: usize,
    pub conv_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ff_dim: usize,
    pub pooled_dim: usize,
    pub epsilon: f64,
    pub fusion: FusionMode,
    /// Add the sinusoidal table on the attention branch input.
    pub positional: bool,
    /// Hide PAD keys from attention.
    pub mask_pad: bool,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 20_000,
            seq_len: 128,
            token_dim: 64,
            filters: 32,
            conv_dim: 64,
            heads: 4,
            blocks: 2,
            ff_dim: 128,
            pooled_dim: 64,
            epsilon: 0.3,
            fusion: FusionMode::Residual,
            positional: true,
            mask_pad: false,
        }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.token_dim == 0 || self.heads == 0 || !self.token_dim.is_multiple_of(self.heads) {
            return bad(format!("token_dim {} must be a positive multiple of heads {}", self.token_dim, self.heads));
        }
        if self.seq_len < KERNEL_SIZES[3] {
            return bad(format!("seq_len {} shorter than the widest kernel {}", self.seq_len, KERNEL_SIZES[3]));
        }
        if self.vocab_size < 2 || self.filters == 0 || self.conv_dim == 0 || self.pooled_dim == 0 {
            return bad("vocab_size >= 2 and positive filter/conv/pooled widths required".into());
        }
        if !(0.0..=0.5).contains(&self.epsilon) {
            return bad(format!("epsilon {} outside [0, 0.5]", self.epsilon));
        }
        if self.fusion == FusionMode::Residual && self.conv_dim != self.pooled_dim {
            return Err(ModelError::DimensionMismatch(format!(
                "residual fusion needs conv_dim == pooled_dim, got {} and {}",
                self.conv_dim, self.pooled_dim
            )));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        match self.fusion {
            FusionMode::Residual => self.conv_dim,
            FusionMode::Concat => self.conv_dim + 2 * self.pooled_dim,
        }
    }
}

/// Filters of one convolution width; `w` is `(width·token_dim) × filters`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBank {
    pub width: usize,
    pub w: Mat,
    pub b: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub cfg: TextEncoderConfig,
    pub token_table: Mat,
    pub conv: Vec<ConvBank>,
    pub conv_proj: Linear,
    pub blocks: Vec<AttnBlock>,
    pub pool_max: Linear,
    pub pool_mean: Linear,
    pub gate: Linear,
    positions: Mat,
}

/// Returns `λ` inside the closed band `[0.5 − ε, 0.5 + ε]`, else 0.
pub fn valve(lambda: f64, epsilon: f64) -> f64 {
    if in_band(lambda, epsilon) {
        lambda
    } else {
        0.0
    }
}

/// Band membership with a few ulps of slack so decimal edges such as
/// `0.5 + 0.3` versus `0.8` compare as equal.
pub fn in_band(lambda: f64, epsilon: f64) -> bool {
    (lambda - 0.5).abs() <= epsilon + 8.0 * f64::EPSILON
}

#[derive(Debug, Clone)]
struct ConvCache {
    windows: Vec<Mat>,
    /// Per bank and filter: arg-max position and whether the max was positive.
    argmax: Vec<Vec<(usize, bool)>>,
    pooled: Mat,
}

#[derive(Debug, Clone)]
pub struct GateCache {
    conv_out: Vec<f64>,
    pub lambda: Vec<f64>,
    pub gate: Vec<f64>,
    h_max: Vec<f64>,
    h_mean: Vec<f64>,
}

#[derive(Debug, Clone)]
struct PoolCache {
    argmax: Vec<usize>,
    max_in: Mat,
    mean_in: Mat,
}

#[derive(Debug, Clone)]
pub struct TextCache {
    ids: Vec<u32>,
    conv: ConvCache,
    blocks: Vec<AttnCache>,
    pool: PoolCache,
    pub gate: GateCache,
}

impl TextCache {
    pub fn attention(&self) -> &[AttnCache] {
        &self.blocks
    }
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(cfg: TextEncoderConfig, rng: &mut R) -> Result<Self, ModelError> {
        cfg.validate()?;
        let d = cfg.token_dim;
        let token_table = Mat::uniform(cfg.vocab_size, d, 1.0 / (d as f64).sqrt(), rng);
        let conv = KERNEL_SIZES
            .iter()
            .map(|&k| ConvBank {
                width: k,
                w: Mat::uniform(k * d, cfg.filters, 1.0 / ((k * d) as f64).sqrt(), rng),
                b: Mat::zeros(1, cfg.filters),
            })
            .collect();
        let conv_proj = Linear::new(KERNEL_SIZES.len() * cfg.filters, cfg.conv_dim, rng);
        let blocks = (0..cfg.blocks).map(|_| AttnBlock::new(d, cfg.heads, cfg.ff_dim, rng)).collect();
        let pool_max = Linear::new(d, cfg.pooled_dim, rng);
        let pool_mean = Linear::new(d, cfg.pooled_dim, rng);
        let gate = Linear::new(cfg.conv_dim, cfg.pooled_dim, rng);
        let positions = sinusoidal_positions(cfg.seq_len, d);
        Ok(Self { cfg, token_table, conv, conv_proj, blocks, pool_max, pool_mean, gate, positions })
    }

    pub fn output_dim(&self) -> usize {
        self.cfg.output_dim()
    }

    /// Row `i` is the table row of `ids[i]`; no positional term.
    pub fn embed_tokens(&self, ids: &[u32]) -> Result<Mat, ModelError> {
        let d = self.cfg.token_dim;
        let mut x = Mat::zeros(ids.len(), d);
        for (i, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= self.token_table.rows {
                return Err(ModelError::IdOutOfRange { id, vocab: self.token_table.rows });
            }
            x.row_mut(i).copy_from_slice(self.token_table.row(id));
        }
        Ok(x)
    }

    fn conv_forward(&self, x: &Mat) -> (Vec<f64>, ConvCache) {
        let d = self.cfg.token_dim;
        let f = self.cfg.filters;
        let mut pooled = Mat::zeros(1, KERNEL_SIZES.len() * f);
        let mut windows = Vec::with_capacity(self.conv.len());
        let mut argmax = Vec::with_capacity(self.conv.len());
        for (b, bank) in self.conv.iter().enumerate() {
            let k = bank.width;
            let positions = x.rows + 1 - k;
            let mut win = Mat::zeros(positions, k * d);
            for t in 0..positions {
                win.row_mut(t).copy_from_slice(&x.data[t * d..(t + k) * d]);
            }
            let mut z = matmul(&win, &bank.w);
            z.add_row_broadcast(&bank.b.data);
            let mut arg = Vec::with_capacity(f);
            for j in 0..f {
                let (mut best_t, mut best) = (0, z.get(0, j));
                for t in 1..positions {
                    if z.get(t, j) > best {
                        best = z.get(t, j);
                        best_t = t;
                    }
                }
                pooled.data[b * f + j] = best.max(0.0);
                arg.push((best_t, best > 0.0));
            }
            windows.push(win);
            argmax.push(arg);
        }
        let h = self.conv_proj.forward(&pooled).data;
        (h, ConvCache { windows, argmax, pooled })
    }

    /// Local-feature vector `H_conv` of width `conv_dim`.
    pub fn conv_branch(&self, x: &Mat) -> Vec<f64> {
        self.conv_forward(x).0
    }

    fn key_mask(&self, ids: &[u32]) -> Option<Vec<bool>> {
        self.cfg.mask_pad.then(|| ids.iter().map(|&id| id == crate::tokenizer::PAD).collect())
    }

    fn attn_forward(&self, x: &Mat, mask: Option<&[bool]>) -> (Mat, Vec<AttnCache>) {
        let mut s = x.clone();
        if self.cfg.positional {
            for r in 0..s.rows.min(self.positions.rows) {
                for (v, p) in s.row_mut(r).iter_mut().zip(self.positions.row(r)) {
                    *v += p;
                }
            }
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (out, cache) = block.forward(&s, mask);
            s = out;
            caches.push(cache);
        }
        (s, caches)
    }

    /// Positional encoding (when enabled) followed by every attention block.
    pub fn attn_branch(&self, x: &Mat) -> Mat {
        self.attn_forward(x, None).0
    }

    fn pool_forward(&self, s: &Mat) -> (Vec<f64>, Vec<f64>, PoolCache) {
        let mut max_in = Mat::zeros(1, s.cols);
        let mut argmax = vec![0; s.cols];
        for c in 0..s.cols {
            let mut best = s.get(0, c);
            for r in 1..s.rows {
                if s.get(r, c) > best {
                    best = s.get(r, c);
                    argmax[c] = r;
                }
            }
            max_in.data[c] = best;
        }
        let mut mean_in = Mat::row_vector(s.col_sums());
        mean_in.scale(1.0 / s.rows as f64);
        let h_max = self.pool_max.forward(&max_in).data;
        let h_mean = self.pool_mean.forward(&mean_in).data;
        (h_max, h_mean, PoolCache { argmax, max_in, mean_in })
    }

    /// Column-wise max and mean over positions, each through its own linear map.
    pub fn pool_project(&self, s: &Mat) -> (Vec<f64>, Vec<f64>) {
        let (a, b, _) = self.pool_forward(s);
        (a, b)
    }

    fn gate_forward(&self, h_conv: &[f64], h_max: &[f64], h_mean: &[f64]) -> (Vec<f64>, GateCache) {
        let eps = self.cfg.epsilon;
        let lambda: Vec<f64> = self.gate.forward_vec(h_conv).into_iter().map(sigmoid).collect();
        let gate: Vec<f64> = lambda.iter().map(|&l| valve(l, eps)).collect();
        let out = match self.cfg.fusion {
            FusionMode::Residual => h_conv
                .iter()
                .zip(&gate)
                .zip(h_max.iter().zip(h_mean))
                .map(|((c, g), (a, b))| c + g * (a + b))
                .collect(),
            FusionMode::Concat => {
                let mut v = h_conv.to_vec();
                v.extend(gate.iter().zip(h_max).map(|(g, a)| g * a));
                v.extend(gate.iter().zip(h_mean).map(|(g, b)| g * b));
                v
            }
        };
        let cache = GateCache {
            conv_out: h_conv.to_vec(),
            lambda,
            gate,
            h_max: h_max.to_vec(),
            h_mean: h_mean.to_vec(),
        };
        (out, cache)
    }

    /// Gated fusion of the two branches.
    pub fn adagate_fuse(&self, h_conv: &[f64], h_max: &[f64], h_mean: &[f64]) -> Result<Vec<f64>, ModelError> {
        let (dc, ds) = (self.cfg.conv_dim, self.cfg.pooled_dim);
        if h_conv.len() != dc || h_max.len() != ds || h_mean.len() != ds {
            return Err(ModelError::DimensionMismatch(format!(
                "fusion inputs {}/{}/{} vs configured {dc}/{ds}/{ds}",
                h_conv.len(),
                h_max.len(),
                h_mean.len()
            )));
        }
        if self.cfg.fusion == FusionMode::Residual && dc != ds {
            return Err(ModelError::DimensionMismatch(format!("residual fusion with conv_dim {dc} != pooled_dim {ds}")));
        }
        Ok(self.gate_forward(h_conv, h_max, h_mean).0)
    }

    pub fn forward(&self, ids: &[u32]) -> Result<(Vec<f64>, TextCache), ModelError> {
        if ids.len() != self.cfg.seq_len {
            return Err(ModelError::DimensionMismatch(format!(
                "expected {} token ids, got {}",
                self.cfg.seq_len,
                ids.len()
            )));
        }
        let x = self.embed_tokens(ids)?;
        let (h_conv, conv) = self.conv_forward(&x);
        let mask = self.key_mask(ids);
        let (s, blocks) = self.attn_forward(&x, mask.as_deref());
        let (h_max, h_mean, pool) = self.pool_forward(&s);
        let (out, gate) = self.gate_forward(&h_conv, &h_max, &h_mean);
        Ok((out, TextCache { ids: ids.to_vec(), conv, blocks, pool, gate }))
    }

    /// The post text embedding `H_out`.
    pub fn encode_post_text(&self, ids: &[u32]) -> Result<Vec<f64>, ModelError> {
        self.forward(ids).map(|(v, _)| v)
    }

    /// Accumulates parameter gradients for `dL/dH_out = dout` into `grad`.
    pub fn backward(&self, cache: &TextCache, dout: &[f64], grad: &mut TextEncoder) {
        let ds = self.cfg.pooled_dim;
        let dc = self.cfg.conv_dim;
        let g = &cache.gate;

        // Gate and fusion.
        let (mut d_conv, d_gate, d_max, d_mean) = match self.cfg.fusion {
            FusionMode::Residual => {
                let d_gate: Vec<f64> =
                    (0..ds).map(|i| dout[i] * (g.h_max[i] + g.h_mean[i])).collect();
                let d_branch: Vec<f64> = (0..ds).map(|i| dout[i] * g.gate[i]).collect();
                (dout.to_vec(), d_gate, d_branch.clone(), d_branch)
            }
            FusionMode::Concat => {
                let (a, b) = (&dout[dc..dc + ds], &dout[dc + ds..]);
                let d_gate = (0..ds).map(|i| a[i] * g.h_max[i] + b[i] * g.h_mean[i]).collect();
                let d_max = (0..ds).map(|i| a[i] * g.gate[i]).collect();
                let d_mean = (0..ds).map(|i| b[i] * g.gate[i]).collect();
                (dout[..dc].to_vec(), d_gate, d_max, d_mean)
            }
        };
        // Straight-through valve: gradient reaches λ only inside the band.
        let d_pre: Vec<f64> = (0..ds)
            .map(|i| {
                let l = g.lambda[i];
                if in_band(l, self.cfg.epsilon) {
                    d_gate[i] * l * (1.0 - l)
                } else {
                    0.0
                }
            })
            .collect();
        let d_from_gate = self.gate.backward(
            &Mat::row_vector(g.conv_out.clone()),
            &Mat::row_vector(d_pre),
            &mut grad.gate,
        );
        for (a, b) in d_conv.iter_mut().zip(&d_from_gate.data) {
            *a += b;
        }

        // Pooling projections back onto the attention output.
        let dmax_in = self.pool_max.backward(&cache.pool.max_in, &Mat::row_vector(d_max), &mut grad.pool_max);
        let dmean_in = self.pool_mean.backward(&cache.pool.mean_in, &Mat::row_vector(d_mean), &mut grad.pool_mean);
        let n = self.cfg.seq_len;
        let d = self.cfg.token_dim;
        let mut ds_mat = Mat::zeros(n, d);
        for c in 0..d {
            ds_mat.data[cache.pool.argmax[c] * d + c] += dmax_in.data[c];
            let share = dmean_in.data[c] / n as f64;
            for r in 0..n {
                ds_mat.data[r * d + c] += share;
            }
        }
        for (i, block) in self.blocks.iter().enumerate().rev() {
            ds_mat = block.backward(&cache.blocks[i], &ds_mat, &mut grad.blocks[i]);
        }
        let mut dx = ds_mat;

        // Convolutional branch.
        let dpooled = self.conv_proj.backward(&cache.conv.pooled, &Mat::row_vector(d_conv), &mut grad.conv_proj);
        let f = self.cfg.filters;
        for (b, bank) in self.conv.iter().enumerate() {
            let win = &cache.conv.windows[b];
            let mut dz = Mat::zeros(win.rows, f);
            for (j, &(t, active)) in cache.conv.argmax[b].iter().enumerate() {
                if active {
                    dz.set(t, j, dpooled.data[b * f + j]);
                }
            }
            matmul_tn_acc(win, &dz, &mut grad.conv[b].w);
            for (gb, s) in grad.conv[b].b.data.iter_mut().zip(dz.col_sums()) {
                *gb += s;
            }
            let dwin = matmul_nt(&dz, &bank.w);
            for t in 0..win.rows {
                for (o, v) in dx.data[t * d..(t + bank.width) * d].iter_mut().zip(dwin.row(t)) {
                    *o += v;
                }
            }
        }

        // Token table rows.
        for (i, &id) in cache.ids.iter().enumerate() {
            let row = grad.token_table.row_mut(id as usize);
            for (o, v) in row.iter_mut().zip(dx.row(i)) {
                *o += v;
            }
        }
    }
}

impl Params for TextEncoder {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        out.push((join(prefix, "token_table"), &self.token_table));
        for bank in &self.conv {
            out.push((join(prefix, &format!("conv{}.w", bank.width)), &bank.w));
            out.push((join(prefix, &format!("conv{}.b", bank.width)), &bank.b));
        }
        self.conv_proj.tensors(&join(prefix, "conv_proj"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.tensors(&join(prefix, &format!("attn{i}")), out);
        }
        self.pool_max.tensors(&join(prefix, "pool_max"), out);
        self.pool_mean.tensors(&join(prefix, "pool_mean"), out);
        self.gate.tensors(&join(prefix, "gate"), out);
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Mat)>) {
        out.push((join(prefix, "token_table"), &mut self.token_table));
        for bank in &mut self.conv {
            out.push((join(prefix, &format!("conv{}.w", bank.width)), &mut bank.w));
            out.push((join(prefix, &format!("conv{}.b", bank.width)), &mut bank.b));
        }
        self.conv_proj.tensors_mut(&join(prefix, "conv_proj"), out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.tensors_mut(&join(prefix, &format!("attn{i}")), out);
        }
        self.pool_max.tensors_mut(&join(prefix, "pool_max"), out);
        self.pool_mean.tensors_mut(&join(prefix, "pool_mean"), out);
        self.gate.tensors_mut(&join(prefix, "gate"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn micro() -> TextEncoderConfig {
        TextEncoderConfig {
            vocab_size: 12,
            seq_len: 6,
            token_dim: 8,
            filters: 3,
            conv_dim: 8,
            heads: 2,
            blocks: 1,
            ff_dim: 8,
            pooled_dim: 8,
            ..TextEncoderConfig::default()
        }
    }

    fn encoder(cfg: TextEncoderConfig, seed: u64) -> TextEncoder {
        TextEncoder::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(TextEncoderConfig::default().validate().is_ok());
        let odd_heads = TextEncoderConfig { heads: 3, ..micro() };
        assert!(matches!(odd_heads.validate(), Err(ModelError::InvalidConfig(_))));
        let mismatch = TextEncoderConfig { pooled_dim: 4, ..micro() };
        assert!(matches!(mismatch.validate(), Err(ModelError::DimensionMismatch(_))));
        assert!(TextEncoderConfig { pooled_dim: 4, fusion: FusionMode::Concat, ..micro() }.validate().is_ok());
        assert!(TextEncoderConfig { epsilon: 0.6, ..micro() }.validate().is_err());
    }

    #[test]
    fn all_pad_embeds_to_pad_row() {
        let enc = encoder(micro(), 1);
        let x = enc.embed_tokens(&[0; 6]).unwrap();
        for r in 0..6 {
            assert_eq!(x.row(r), enc.token_table.row(0));
        }
    }

    #[test]
    fn identity_table_gives_unit_rows() {
        let mut enc = encoder(TextEncoderConfig { vocab_size: 8, ..micro() }, 1);
        enc.token_table = Mat::zeros(8, 8);
        for i in 0..8 {
            enc.token_table.set(i, i, 1.0);
        }
        let x = enc.embed_tokens(&[2, 2]).unwrap();
        let unit: Vec<f64> = (0..8).map(|i| if i == 2 { 1.0 } else { 0.0 }).collect();
        assert_eq!(x.row(0), unit.as_slice());
        assert_eq!(x.row(1), unit.as_slice());
    }

    #[test]
    fn random_ids_match_table_lookup() {
        let enc = encoder(micro(), 2);
        let ids = [3, 7, 0, 11, 5, 5];
        let x = enc.embed_tokens(&ids).unwrap();
        for (i, &id) in ids.iter().enumerate() {
            for c in 0..8 {
                assert_eq!(x.get(i, c), enc.token_table.get(id as usize, c));
            }
        }
        assert_eq!(enc.embed_tokens(&[12]), Err(ModelError::IdOutOfRange { id: 12, vocab: 12 }));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_conv_output() {
        let enc = encoder(micro(), 3);
        assert!(enc.conv_branch(&Mat::zeros(6, 8)).iter().all(|&v| v == 0.0));
        let (_, cache) = enc.conv_forward(&Mat::zeros(6, 8));
        assert_eq!(cache.pooled.len(), 4 * 3);
    }

    #[test]
    fn single_filter_max_over_time_matches_hand_convolution() {
        // One filter of width 2 over a 3-token, 1-dim sequence: x = [1, -2, 3].
        let cfg = TextEncoderConfig { token_dim: 1, heads: 1, filters: 1, seq_len: 5, ..micro() };
        let mut enc = encoder(cfg, 4);
        for bank in &mut enc.conv {
            bank.w.fill(0.0);
        }
        enc.conv[0].w = Mat::from_vec(2, 1, vec![0.5, 1.0]);
        enc.conv[0].b = Mat::from_vec(1, 1, vec![0.1]);
        let x = Mat::from_vec(5, 1, vec![1.0, -2.0, 3.0, 0.0, 0.0]);
        let (_, cache) = enc.conv_forward(&x);
        // Windows: (1,-2) -> -1.4, (-2,3) -> 2.1, (3,0) -> 1.6, (0,0) -> 0.1
        assert!((cache.pooled.data[0] - 2.1).abs() < 1e-12);
        assert_eq!(cache.argmax[0][0], (1, true));
    }

    #[test]
    fn singleton_attention_weight_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let block = AttnBlock::new(8, 2, 8, &mut rng);
        let x = Mat::uniform(1, 8, 1.0, &mut rng);
        let (_, cache) = block.forward(&x, None);
        assert!(cache.weights.iter().all(|w| w.data == vec![1.0]));
    }

    #[test]
    fn identical_rows_attend_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let block = AttnBlock::new(8, 2, 8, &mut rng);
        let row = Mat::uniform(1, 8, 1.0, &mut rng);
        let x = Mat::from_vec(4, 8, row.data.repeat(4));
        let (_, cache) = block.forward(&x, None);
        for w in &cache.weights {
            assert!(w.data.iter().all(|&v| (v - 0.25).abs() < 1e-12));
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let block = AttnBlock::new(8, 2, 8, &mut rng);
        let (_, cache) = block.forward(&Mat::uniform(3, 8, 2.0, &mut rng), None);
        for w in &cache.weights {
            for r in 0..3 {
                assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn empty_stack_adds_positions_only() {
        let enc = encoder(TextEncoderConfig { blocks: 0, ..micro() }, 8);
        let x = Mat::uniform(6, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let s = enc.attn_branch(&x);
        assert_eq!(s, x.add(&sinusoidal_positions(6, 8)));
    }

    #[test]
    fn two_blocks_compose_sequentially() {
        let enc = encoder(TextEncoderConfig { blocks: 2, ..micro() }, 10);
        let x = Mat::uniform(6, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(11));
        let mut s = x.add(&sinusoidal_positions(6, 8));
        for b in &enc.blocks {
            s = b.forward(&s, None).0;
        }
        assert_eq!(enc.attn_branch(&x), s);
    }

    #[test]
    fn attention_branch_is_permutation_equivariant_without_positions() {
        let enc = encoder(TextEncoderConfig { positional: false, blocks: 2, ..micro() }, 12);
        let x = Mat::uniform(6, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(13));
        let mut swapped = x.clone();
        swapped.row_mut(1).copy_from_slice(x.row(4));
        swapped.row_mut(4).copy_from_slice(x.row(1));
        let a = enc.attn_branch(&x);
        let b = enc.attn_branch(&swapped);
        for (r, pr) in [(0, 0), (1, 4), (2, 2), (3, 3), (4, 1), (5, 5)] {
            for c in 0..8 {
                assert!((a.get(r, c) - b.get(pr, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_rows_pool_identically() {
        let mut enc = encoder(micro(), 14);
        enc.pool_mean = enc.pool_max.clone();
        let row = Mat::uniform(1, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(15));
        let s = Mat::from_vec(6, 8, row.data.repeat(6));
        let (_, _, cache) = enc.pool_forward(&s);
        for (a, b) in cache.max_in.data.iter().zip(&cache.mean_in.data) {
            assert!((a - b).abs() < 1e-12);
        }
        let (m, n) = enc.pool_project(&s);
        for (a, b) in m.iter().zip(&n) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_map_pools_to_zero() {
        let enc = encoder(micro(), 16);
        let (m, n) = enc.pool_project(&Mat::zeros(6, 8));
        assert!(m.iter().chain(&n).all(|&v| v == 0.0));
    }

    #[test]
    fn pooling_matches_columnwise_oracle() {
        let enc = encoder(micro(), 17);
        let s = Mat::uniform(4, 8, 3.0, &mut ChaCha8Rng::seed_from_u64(18));
        let (_, _, cache) = enc.pool_forward(&s);
        for c in 0..8 {
            let col: Vec<f64> = (0..4).map(|r| s.get(r, c)).collect();
            let max = col.iter().copied().fold(f64::MIN, f64::max);
            let mean = col.iter().sum::<f64>() / 4.0;
            assert_eq!(cache.max_in.data[c], max);
            assert!((cache.mean_in.data[c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn valve_band_examples() {
        assert_eq!(valve(0.5, 0.0), 0.5);
        assert_eq!(valve(0.3, 0.1), 0.0);
        for i in 0..=100 {
            let l = i as f64 / 100.0;
            assert_eq!(valve(l, 0.5), l);
        }
        assert_eq!(valve(0.2, 0.3), 0.2);
        assert_eq!(valve(0.8, 0.3), 0.8);
        assert_eq!(valve(0.81, 0.3), 0.0);
    }

    #[test]
    fn zero_epsilon_residual_output_is_conv_output() {
        let enc = encoder(TextEncoderConfig { epsilon: 0.0, ..micro() }, 19);
        let ids = [2, 3, 4, 5, 6, 7];
        let (out, cache) = enc.forward(&ids).unwrap();
        assert!(cache.gate.lambda.iter().all(|&l| l != 0.5));
        assert_eq!(out, cache.gate.conv_out);
    }

    #[test]
    fn half_epsilon_gate_is_full_sigmoid() {
        let enc = encoder(TextEncoderConfig { epsilon: 0.5, ..micro() }, 20);
        let (_, cache) = enc.forward(&[2, 3, 4, 5, 6, 7]).unwrap();
        assert_eq!(cache.gate.gate, cache.gate.lambda);
    }

    #[test]
    fn concat_width_and_dimension_errors() {
        let cfg = TextEncoderConfig { fusion: FusionMode::Concat, pooled_dim: 5, ..micro() };
        let enc = encoder(cfg, 21);
        let out = enc.encode_post_text(&[1, 2, 3, 0, 0, 0]).unwrap();
        assert_eq!(out.len(), 8 + 2 * 5);
        assert!(matches!(enc.adagate_fuse(&[0.0; 8], &[0.0; 4], &[0.0; 5]), Err(ModelError::DimensionMismatch(_))));
        let res = encoder(micro(), 22);
        assert_eq!(res.encode_post_text(&[1, 2, 3, 0, 0, 0]).unwrap().len(), 8);
        assert!(res.encode_post_text(&[1, 2]).is_err());
    }

    #[test]
    fn zero_epsilon_output_ignores_attention_parameters() {
        let cfg = TextEncoderConfig { epsilon: 0.0, ..micro() };
        let enc = encoder(cfg.clone(), 23);
        let ids = [4, 1, 9, 2, 0, 0];
        let before = enc.encode_post_text(&ids).unwrap();
        let mut perturbed = enc.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        perturbed.blocks = vec![AttnBlock::new(8, 2, 8, &mut rng)];
        perturbed.pool_max = Linear::new(8, 8, &mut rng);
        assert_eq!(perturbed.encode_post_text(&ids).unwrap(), before);
    }
}
