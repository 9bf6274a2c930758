//! Layers with explicit forward caches and hand-written backward passes.
//!
//! Every layer stores its trainable tensors as plain [`Mat`] fields. Gradients
//! are accumulated into a second instance of the same type (see
//! [`Params::zeros_like`]), which keeps parameter and gradient traversal order
//! identical for the optimizer, the checkpoint writer and the gradient checker.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{matmul, matmul_nt, matmul_tn, matmul_tn_acc, softmax_in_place, Mat};

/// Named traversal over trainable tensors.
pub trait Params {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>);
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Mat)>);

    fn named(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        self.tensors("", &mut out);
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out = Vec::new();
        self.tensors_mut("", &mut out);
        out
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut out = self.clone();
        out.named_mut().into_iter().for_each(|(_, m)| m.fill(0.0));
        out
    }

    fn param_count(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }

    /// Element-wise `self += other`; both must share structure.
    fn accumulate(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            a.add_assign(b);
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `y = x W + b` with `W: in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Mat,
    pub b: Mat,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (input.max(1) as f64).sqrt();
        Self { w: Mat::uniform(input, output, scale, rng), b: Mat::zeros(1, output) }
    }

    pub fn input_dim(&self) -> usize {
        self.w.rows
    }

    pub fn output_dim(&self) -> usize {
        self.w.cols
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        let mut y = matmul(x, &self.w);
        y.add_row_broadcast(&self.b.data);
        y
    }

    pub fn forward_vec(&self, x: &[f64]) -> Vec<f64> {
        self.forward(&Mat::row_vector(x.to_vec())).data
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Mat, dy: &Mat, grad: &mut Linear) -> Mat {
        matmul_tn_acc(x, dy, &mut grad.w);
        for (g, s) in grad.b.data.iter_mut().zip(dy.col_sums()) {
            *g += s;
        }
        matmul_nt(dy, &self.w)
    }
}

impl Params for Linear {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        out.push((join(prefix, "w"), &self.w));
        out.push((join(prefix, "b"), &self.b));
    }
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Mat)>) {
        out.push((join(prefix, "w"), &mut self.w));
        out.push((join(prefix, "b"), &mut self.b));
    }
}

const LN_EPS: f64 = 1e-5;

/// Row-wise layer normalization with learned gain and bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: Mat,
    pub bias: Mat,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self { gain: Mat::filled(1, dim, 1.0), bias: Mat::zeros(1, dim) }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, LayerNormCache) {
        let d = x.cols as f64;
        let mut xhat = Mat::zeros(x.rows, x.cols);
        let mut y = Mat::zeros(x.rows, x.cols);
        let mut inv_std = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for c in 0..x.cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                y.set(r, c, h * self.gain.data[c] + self.bias.data[c]);
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Mat, grad: &mut LayerNorm) -> Mat {
        let (rows, cols) = dy.shape();
        let d = cols as f64;
        let mut dx = Mat::zeros(rows, cols);
        let mut dxhat = vec![0.0; cols];
        for r in 0..rows {
            let xh = cache.xhat.row(r);
            let g = dy.row(r);
            let mut sum = 0.0;
            let mut sum_xh = 0.0;
            for c in 0..cols {
                grad.gain.data[c] += g[c] * xh[c];
                grad.bias.data[c] += g[c];
                dxhat[c] = g[c] * self.gain.data[c];
                sum += dxhat[c];
                sum_xh += dxhat[c] * xh[c];
            }
            let is = cache.inv_std[r];
            for (c, out) in dx.row_mut(r).iter_mut().enumerate() {
                *out = is / d * (d * dxhat[c] - sum - xh[c] * sum_xh);
            }
        }
        dx
    }
}

impl Params for LayerNorm {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        out.push((join(prefix, "gain"), &self.gain));
        out.push((join(prefix, "bias"), &self.bias));
    }
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Mat)>) {
        out.push((join(prefix, "gain"), &mut self.gain));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// Post-norm transformer encoder block: multi-head self-attention, residual +
/// layer-norm, position-wise ReLU feed-forward, residual + layer-norm.
///
/// Head `i` owns columns `[i·d_k, (i+1)·d_k)` of the query, key and value
/// projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnBlock {
    pub heads: usize,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub mix: Linear,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct AttnCache {
    x: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    /// Attention weights per head, each `n × n`.
    pub weights: Vec<Mat>,
    concat: Mat,
    norm1: LayerNormCache,
    y1: Mat,
    hidden_pre: Mat,
    hidden: Mat,
    norm2: LayerNormCache,
}

impl AttnBlock {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, ff_dim: usize, rng: &mut R) -> Self {
        assert!(heads >= 1 && dim.is_multiple_of(heads), "model width {dim} not divisible by {heads} heads");
        let scale = 1.0 / (dim as f64).sqrt();
        Self {
            heads,
            wq: Mat::uniform(dim, dim, scale, rng),
            wk: Mat::uniform(dim, dim, scale, rng),
            wv: Mat::uniform(dim, dim, scale, rng),
            mix: Linear::new(dim, dim, rng),
            norm1: LayerNorm::new(dim),
            ff1: Linear::new(dim, ff_dim, rng),
            ff2: Linear::new(ff_dim, dim, rng),
            norm2: LayerNorm::new(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.rows
    }

    fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    /// `key_mask[j] == true` excludes key position `j`. A mask that hides
    /// every key is ignored.
    pub fn forward(&self, x: &Mat, key_mask: Option<&[bool]>) -> (Mat, AttnCache) {
        let n = x.rows;
        let dk = self.head_dim();
        let inv_sqrt = 1.0 / (dk as f64).sqrt();
        let mask = key_mask.filter(|m| m.iter().any(|hidden| !hidden));

        let q = matmul(x, &self.wq);
        let k = matmul(x, &self.wk);
        let v = matmul(x, &self.wv);
        let mut concat = Mat::zeros(n, self.dim());
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.cols_slice(h * dk, dk);
            let kh = k.cols_slice(h * dk, dk);
            let vh = v.cols_slice(h * dk, dk);
            let mut scores = matmul_nt(&qh, &kh);
            scores.scale(inv_sqrt);
            for r in 0..n {
                let row = scores.row_mut(r);
                if let Some(m) = mask {
                    for (s, &hidden) in row.iter_mut().zip(m) {
                        if hidden {
                            *s = f64::NEG_INFINITY;
                        }
                    }
                }
                softmax_in_place(row);
            }
            concat.add_into_cols(h * dk, &matmul(&scores, &vh));
            weights.push(scores);
        }

        let attended = self.mix.forward(&concat);
        let (y1, norm1) = self.norm1.forward(&x.add(&attended));
        let hidden_pre = self.ff1.forward(&y1);
        let mut hidden = hidden_pre.clone();
        hidden.data.iter_mut().for_each(|v| *v = v.max(0.0));
        let ff = self.ff2.forward(&hidden);
        let (out, norm2) = self.norm2.forward(&y1.add(&ff));
        let cache = AttnCache {
            x: x.clone(),
            q,
            k,
            v,
            weights,
            concat,
            norm1,
            y1,
            hidden_pre,
            hidden,
            norm2,
        };
        (out, cache)
    }

    pub fn backward(&self, cache: &AttnCache, dout: &Mat, grad: &mut AttnBlock) -> Mat {
        let n = cache.x.rows;
        let dk = self.head_dim();
        let inv_sqrt = 1.0 / (dk as f64).sqrt();

        let dres2 = self.norm2.backward(&cache.norm2, dout, &mut grad.norm2);
        let mut dhidden = self.ff2.backward(&cache.hidden, &dres2, &mut grad.ff2);
        for (d, &pre) in dhidden.data.iter_mut().zip(&cache.hidden_pre.data) {
            if pre <= 0.0 {
                *d = 0.0;
            }
        }
        let mut dy1 = self.ff1.backward(&cache.y1, &dhidden, &mut grad.ff1);
        dy1.add_assign(&dres2);

        let dres1 = self.norm1.backward(&cache.norm1, &dy1, &mut grad.norm1);
        let mut dx = dres1.clone();
        let dconcat = self.mix.backward(&cache.concat, &dres1, &mut grad.mix);

        let mut dq = Mat::zeros(n, self.dim());
        let mut dk_all = Mat::zeros(n, self.dim());
        let mut dv = Mat::zeros(n, self.dim());
        for h in 0..self.heads {
            let a = &cache.weights[h];
            let qh = cache.q.cols_slice(h * dk, dk);
            let kh = cache.k.cols_slice(h * dk, dk);
            let vh = cache.v.cols_slice(h * dk, dk);
            let dh = dconcat.cols_slice(h * dk, dk);

            let da = matmul_nt(&dh, &vh);
            dv.add_into_cols(h * dk, &matmul_tn(a, &dh));
            let mut ds = Mat::zeros(n, n);
            for r in 0..n {
                let ar = a.row(r);
                let dar = da.row(r);
                let inner: f64 = ar.iter().zip(dar).map(|(p, g)| p * g).sum();
                for (c, out) in ds.row_mut(r).iter_mut().enumerate() {
                    *out = ar[c] * (dar[c] - inner) * inv_sqrt;
                }
            }
            dq.add_into_cols(h * dk, &matmul(&ds, &kh));
            dk_all.add_into_cols(h * dk, &matmul_tn(&ds, &qh));
        }

        matmul_tn_acc(&cache.x, &dq, &mut grad.wq);
        matmul_tn_acc(&cache.x, &dk_all, &mut grad.wk);
        matmul_tn_acc(&cache.x, &dv, &mut grad.wv);
        dx.add_assign(&matmul_nt(&dq, &self.wq));
        dx.add_assign(&matmul_nt(&dk_all, &self.wk));
        dx.add_assign(&matmul_nt(&dv, &self.wv));
        dx
    }
}

impl Params for AttnBlock {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        out.push((join(prefix, "wq"), &self.wq));
        out.push((join(prefix, "wk"), &self.wk));
        out.push((join(prefix, "wv"), &self.wv));
        self.mix.tensors(&join(prefix, "mix"), out);
        self.norm1.tensors(&join(prefix, "norm1"), out);
        self.ff1.tensors(&join(prefix, "ff1"), out);
        self.ff2.tensors(&join(prefix, "ff2"), out);
        self.norm2.tensors(&join(prefix, "norm2"), out);
    }
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Mat)>) {
        out.push((join(prefix, "wq"), &mut self.wq));
        out.push((join(prefix, "wk"), &mut self.wk));
        out.push((join(prefix, "wv"), &mut self.wv));
        self.mix.tensors_mut(&join(prefix, "mix"), out);
        self.norm1.tensors_mut(&join(prefix, "norm1"), out);
        self.ff1.tensors_mut(&join(prefix, "ff1"), out);
        self.ff2.tensors_mut(&join(prefix, "ff2"), out);
        self.norm2.tensors_mut(&join(prefix, "norm2"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn numeric_grad(f: &dyn Fn(&Mat) -> f64, x: &Mat) -> Mat {
        let h = 1e-6;
        let mut g = Mat::zeros(x.rows, x.cols);
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data[i] += h;
            let mut m = x.clone();
            m.data[i] -= h;
            g.data[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    fn weighted_sum(y: &Mat, w: &Mat) -> f64 {
        y.data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn layer_norm_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ln = LayerNorm::new(5);
        ln.gain = Mat::uniform(1, 5, 1.0, &mut rng);
        let x = Mat::uniform(3, 5, 1.0, &mut rng);
        let w = Mat::uniform(3, 5, 1.0, &mut rng);
        let (_, cache) = ln.forward(&x);
        let mut g = ln.zeros_like();
        let dx = ln.backward(&cache, &w, &mut g);
        let num = numeric_grad(&|x| weighted_sum(&ln.forward(x).0, &w), &x);
        for (a, b) in dx.data.iter().zip(&num.data) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let block = AttnBlock::new(4, 2, 6, &mut rng);
        let x = Mat::uniform(3, 4, 1.0, &mut rng);
        let w = Mat::uniform(3, 4, 1.0, &mut rng);
        let (_, cache) = block.forward(&x, None);
        let mut g = block.zeros_like();
        let dx = block.backward(&cache, &w, &mut g);
        let num = numeric_grad(&|x| weighted_sum(&block.forward(x, None).0, &w), &x);
        for (a, b) in dx.data.iter().zip(&num.data) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = AttnBlock::new(4, 1, 4, &mut rng);
        let x = Mat::uniform(3, 4, 1.0, &mut rng);
        let (_, cache) = block.forward(&x, Some(&[false, false, true]));
        for r in 0..3 {
            assert_eq!(cache.weights[0].get(r, 2), 0.0);
        }
        // An all-hidden mask falls back to full attention.
        let (_, cache) = block.forward(&x, Some(&[true, true, true]));
        assert!(cache.weights[0].data.iter().all(|&w| w > 0.0));
    }
}
