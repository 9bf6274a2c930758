//! Glue between stages: per-market graph embeddings and checkpoint evaluation.

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, IdentityMap, Post};
use crate::error::{GraphError, PipelineError};
use crate::evaluator::{evaluate, EpisodeEmbeddingSet, EvalOptions, LabelMode, MetricReport};
use crate::graph::{
    build_graph, derive_seed, forum_schemes, generate_walks, train_skipgram, NodeEmbeddings, SkipGramConfig,
    WalkConfig,
};
use crate::tokenizer::Vocab;
use crate::trainer::{embed_episodes, test_episodes, Featurizer, ModelCheckpoint};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub walks: WalkConfig,
    pub skipgram: SkipGramConfig,
}

/// One graph per market (never across markets), each with its own walks and
/// skip-gram run; tables are concatenated in market order.
pub fn graph_embeddings(posts: &[Post], cfg: &GraphConfig) -> Result<NodeEmbeddings, GraphError> {
    let corpus = Corpus::new(posts.to_vec());
    let schemes = forum_schemes();
    let mut parts = Vec::new();
    for (i, market) in corpus.markets().iter().enumerate() {
        let graph = build_graph(&corpus.market_posts(market));
        let walk_cfg = WalkConfig { seed: derive_seed(cfg.walks.seed, i as u64, 1), ..cfg.walks.clone() };
        let walks = generate_walks(&graph, &schemes, &walk_cfg);
        log::info!("market {market}: {} nodes, {} edges, {} walks", graph.node_count(), graph.edge_count(), walks.len());
        let sg = SkipGramConfig { seed: derive_seed(cfg.skipgram.seed, i as u64, 2), ..cfg.skipgram.clone() };
        let model = train_skipgram(&walks, graph.node_count(), &sg)?;
        parts.push(NodeEmbeddings::from_graph(&graph, &model.center));
    }
    if parts.is_empty() {
        return Err(GraphError::EmptyWalkSet);
    }
    Ok(NodeEmbeddings::merge(parts))
}

/// Embeds the test episodes of `markets` and scores them.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_checkpoint(
    ckpt: &ModelCheckpoint,
    vocab: &Vocab,
    graph: Option<&NodeEmbeddings>,
    corpus: &Corpus,
    markets: &[String],
    identity: Option<&IdentityMap>,
    mode: LabelMode,
    opts: &EvalOptions,
) -> Result<(EpisodeEmbeddingSet, MetricReport), PipelineError> {
    let feat = Featurizer::new(&ckpt.config.model, vocab, graph)?;
    let episodes = test_episodes(corpus, markets, &ckpt.config.episodes);
    let set = embed_episodes(&ckpt.model, &feat, corpus, &episodes, identity)?;
    let report = evaluate(&set.matrix, &set.labels(mode), opts)?;
    Ok((set, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{infer_thread_starters, synth_corpus, SynthSpec};

    #[test]
    fn per_market_tables_cover_every_post() {
        let synth = synth_corpus(&SynthSpec::new(2, 4, 0.5, 3)).unwrap();
        let posts = infer_thread_starters(synth.all_posts()).unwrap();
        let cfg = GraphConfig {
            walks: WalkConfig { walks_per_start: 2, target_len: 9, seed: 1 },
            skipgram: SkipGramConfig { dim: 4, epochs: 1, ..Default::default() },
        };
        let emb = graph_embeddings(&posts, &cfg).unwrap();
        assert_eq!(emb.dim(), 4);
        for p in &posts {
            assert!(emb.post_context(&p.market_id, &p.post_id).iter().any(|v| *v != 0.0));
        }
        assert_eq!(emb, graph_embeddings(&posts, &cfg).unwrap());
    }
}
