//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use urm_core::corpus::{infer_thread_starters, synth_corpus, Post, SynthSpec};
use urm_core::tensor::Mat;
use urm_core::text_encoder::{FusionMode, TextEncoderConfig};

/// A mid-sized text encoder, roughly the desk-scale training configuration.
pub fn text_config(vocab_size: usize) -> TextEncoderConfig {
    TextEncoderConfig {
        vocab_size,
        seq_len: 32,
        token_dim: 32,
        filters: 16,
        conv_dim: 32,
        heads: 2,
        blocks: 1,
        ff_dim: 64,
        pooled_dim: 32,
        epsilon: 0.3,
        fusion: FusionMode::Residual,
        positional: true,
        mask_pad: false,
    }
}

/// `n` random unit rows of width `dim` with `n / 4` distinct labels.
pub fn embedding_set(n: usize, dim: usize, seed: u64) -> (Mat, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Mat::zeros(n, dim);
    for r in 0..n {
        let row = m.row_mut(r);
        row.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    let labels = (0..n).map(|i| i % (n / 4).max(1)).collect();
    (m, labels)
}

pub fn synthetic_posts(authors: usize, seed: u64) -> Vec<Post> {
    let corpus = synth_corpus(&SynthSpec::new(1, authors, 0.0, seed)).expect("valid spec");
    infer_thread_starters(corpus.all_posts()).expect("synthetic threads have starters")
}
