use urm_core::corpus::{infer_thread_starters, synth_corpus, Corpus, EpisodeConfig, SynthSpec};
use urm_core::episode_model::ModelConfig;
use urm_core::evaluator::{EvalOptions, LabelMode};
use urm_core::graph::{SkipGramConfig, WalkConfig};
use urm_core::pipeline::{evaluate_checkpoint, graph_embeddings, GraphConfig};
use urm_core::text_encoder::{FusionMode, TextEncoderConfig};
use urm_core::tokenizer::Vocab;
use urm_core::trainer::{load_checkpoint, save_checkpoint, train, TrainConfig, TrainMode};

fn tiny() -> ModelConfig {
    ModelConfig {
        text: TextEncoderConfig {
            vocab_size: 0,
            seq_len: 12,
            token_dim: 8,
            filters: 4,
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
        episode_len: 5,
        agg_dim: 8,
        agg_heads: 2,
        agg_ff_dim: 8,
        embed_dim: 8,
        post_positions: true,
        use_time: true,
        use_graph_context: true,
    }
}

fn setup() -> (Corpus, Vocab, urm_core::graph::NodeEmbeddings, urm_core::corpus::IdentityMap) {
    let spec = SynthSpec { posts_per_author: 30, signature_rate: 0.6, ..SynthSpec::new(2, 6, 0.5, 5) };
    let synth = synth_corpus(&spec).unwrap();
    let posts = infer_thread_starters(synth.all_posts()).unwrap();
    let vocab = Vocab::build(&posts, 500, 1);
    let g = GraphConfig {
        walks: WalkConfig { walks_per_start: 2, target_len: 9, seed: 1 },
        skipgram: SkipGramConfig { dim: 4, epochs: 1, ..Default::default() },
    };
    let graph = graph_embeddings(&posts, &g).unwrap();
    (Corpus::new(posts), vocab, graph, synth.identity)
}

fn config(mode: TrainMode) -> TrainConfig {
    TrainConfig {
        mode,
        model: tiny(),
        episodes: EpisodeConfig { eval_stride: 5, ..Default::default() },
        epochs: 4,
        step_size: 5e-3,
        seed: 2,
        ..Default::default()
    }
}

#[test]
fn multitask_training_lowers_the_loss_and_survives_a_checkpoint() {
    let (corpus, vocab, graph, identity) = setup();
    let markets = vec!["market0".to_string(), "market1".to_string()];
    let cfg = config(TrainMode::Multitask { markets: markets.clone(), use_cross_task: true });
    let out = train(&cfg, &corpus, &vocab, Some(&graph), Some(&identity)).unwrap();
    assert!(out.final_loss < out.initial_loss, "{} -> {}", out.initial_loss, out.final_loss);
    let heads: Vec<&str> = out.checkpoint.model.heads.iter().map(|h| h.task.as_str()).collect();
    assert_eq!(heads, ["market0", "market1", "@cross"]);
    assert_eq!(out.log.len(), cfg.epochs + 1);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&out.checkpoint, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let opts = EvalOptions::default();
    let eval = |c| evaluate_checkpoint(c, &vocab, Some(&graph), &corpus, &markets, Some(&identity), LabelMode::Identity, &opts).unwrap();
    let (set_a, rep_a) = eval(&out.checkpoint);
    let (set_b, rep_b) = eval(&back);
    assert_eq!(set_a, set_b);
    assert_eq!(rep_a, rep_b);
}

#[test]
fn results_do_not_depend_on_the_thread_count() {
    let (corpus, vocab, graph, identity) = setup();
    let cfg = config(TrainMode::Single { market: "market1".into() });
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| train(&cfg, &corpus, &vocab, Some(&graph), Some(&identity)).unwrap().checkpoint.to_bytes())
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn ablated_model_does_not_need_graph_embeddings() {
    let (corpus, vocab, _, _) = setup();
    let mut cfg = config(TrainMode::Single { market: "market0".into() });
    assert!(train(&cfg, &corpus, &vocab, None, None).is_err());
    cfg.model.use_graph_context = false;
    cfg.model.use_time = false;
    cfg.epochs = 1;
    assert!(train(&cfg, &corpus, &vocab, None, None).is_ok());
}
