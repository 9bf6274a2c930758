use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use urm_core::corpus::{
    infer_thread_starters, parse_posts, split_and_window, synth_corpus, write_posts, Corpus, IdentityMap, Post, Split,
    SynthSpec,
};
use urm_core::evaluator::{evaluate, EpisodeEmbeddingSet, EvalOptions, LabelMode, MetricReport};
use urm_core::graph::{build_graph, read_embeddings, write_embeddings, NodeEmbeddings, NodeType};
use urm_core::pipeline::graph_embeddings;
use urm_core::tokenizer::Vocab;
use urm_core::trainer::{
    self, embed_episodes, load_checkpoint, save_checkpoint, test_episodes, Featurizer, FileRef, ModelCheckpoint,
    Optimizer, TrainMode,
};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::{read_manifest, sha256_file, verify, Run, MANIFEST};
use crate::{
    AblateArgs, EmbedArgs, EvalArgs, GraphBuildArgs, GraphTrainArgs, IngestArgs, LabelArg, ManifestArgs,
    OptimizerArg, SplitArg, SynthArgs, TrainArgs, TrainInputs, VocabArgs,
};

type Result<T> = std::result::Result<T, CliError>;

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value.as_deref().ok_or_else(|| {
        CliError::usage(format!("missing --{flag} (or `paths.{}` in the config)", flag.replace('-', "_")))
    })
}

fn json_pretty(v: &impl Serialize) -> String {
    serde_json::to_string_pretty(v).expect("value serializes") + "\n"
}

fn read_text(run: &mut Run, role: &str, path: &Path) -> Result<String> {
    run.input(role, path)?;
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn load_posts(run: &mut Run, path: &Path) -> Result<Vec<Post>> {
    let text = read_text(run, "posts", path)?;
    let posts = parse_posts(&text).map_err(|e| CliError::from(e).with_path(path))?;
    infer_thread_starters(posts).map_err(|e| CliError::from(e).with_path(path))
}

fn load_vocab(run: &mut Run, path: &Path) -> Result<Vocab> {
    let text = read_text(run, "vocab", path)?;
    Vocab::from_json(&text).map_err(|e| CliError::data(format!("invalid vocabulary: {e}")).with_path(path))
}

fn load_graph(run: &mut Run, path: &Path) -> Result<NodeEmbeddings> {
    run.input("graph", path)?;
    Ok(read_embeddings(path)?)
}

fn load_identity(run: &mut Run, path: &Path) -> Result<IdentityMap> {
    let text = read_text(run, "identity", path)?;
    let map: IdentityMap = serde_json::from_str(&text)
        .map_err(|e| CliError::data(format!("invalid identity map: {e}")).with_path(path))?;
    map.validate().map_err(|e| CliError::from(e).with_path(path))?;
    Ok(map)
}

fn file_ref(path: &Path) -> Result<FileRef> {
    Ok(FileRef { path: path.display().to_string(), sha256: sha256_file(path)? })
}

fn label_mode(arg: Option<LabelArg>, default: LabelMode) -> LabelMode {
    match arg {
        Some(LabelArg::Author) => LabelMode::Author,
        Some(LabelArg::Identity) => LabelMode::Identity,
        None => default,
    }
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut run = Run::create(&a.out, "synth")?;
    let text = read_text(&mut run, "spec", &a.spec)?;
    let mut value: Value =
        serde_json::from_str(&text).map_err(|e| CliError::data(format!("invalid spec: {e}")).with_path(&a.spec))?;
    if let (Some(seed), Some(obj)) = (a.seed, value.as_object_mut()) {
        obj.insert("seed".into(), json!(seed));
    }
    if value.get("seed").is_none() {
        return Err(CliError::usage("synth needs --seed or a `seed` in the spec"));
    }
    let spec: SynthSpec = serde_json::from_value(value).map_err(|e| {
        CliError::data(format!("invalid spec: {e}")).with_path(&a.spec)
    })?;
    let corpus = synth_corpus(&spec)?;
    let posts = corpus.all_posts();
    run.write("posts.jsonl", write_posts(&posts))?;
    run.write("identity.json", json_pretty(&corpus.identity))?;
    run.results.insert("posts".into(), json!(posts.len()));
    run.finish(&spec)?;
    Ok(())
}

#[derive(Serialize)]
struct MarketSummary {
    posts: usize,
    authors: usize,
    threads: usize,
    subforums: usize,
    starters_inferred: usize,
}

pub fn ingest(a: IngestArgs) -> Result<()> {
    let mut run = Run::create(&a.out, "ingest")?;
    let text = read_text(&mut run, "posts", &a.posts)?;
    let raw = parse_posts(&text).map_err(|e| CliError::from(e).with_path(&a.posts))?;
    let flagged: std::collections::HashSet<(String, String)> =
        raw.iter().filter(|p| p.thread_starter.is_some()).map(|p| (p.market_id.clone(), p.post_id.clone())).collect();
    let posts = infer_thread_starters(raw).map_err(|e| CliError::from(e).with_path(&a.posts))?;

    let corpus = Corpus::new(posts.clone());
    let mut summary = BTreeMap::new();
    for m in corpus.markets() {
        let mp = corpus.market_posts(&m);
        let distinct = |f: fn(&Post) -> &String| mp.iter().map(f).collect::<std::collections::BTreeSet<_>>().len();
        summary.insert(
            m.clone(),
            MarketSummary {
                posts: mp.len(),
                authors: distinct(|p| &p.author_id),
                threads: distinct(|p| &p.thread_id),
                subforums: distinct(|p| &p.subforum_id),
                starters_inferred: mp
                    .iter()
                    .filter(|p| p.is_starter() && !flagged.contains(&(p.market_id.clone(), p.post_id.clone())))
                    .count(),
            },
        );
    }
    run.write("posts.jsonl", write_posts(&posts))?;
    let identity = match &a.identity {
        Some(path) => Some(load_identity(&mut run, path)?),
        None if a.identity_from_usernames => Some(IdentityMap::from_usernames(&posts)),
        None => None,
    };
    if let Some(map) = &identity {
        run.write("identity.json", json_pretty(map))?;
    }
    run.write("summary.json", json_pretty(&summary))?;
    run.results.insert("posts".into(), json!(posts.len()));
    run.finish(&json!({
        "posts": a.posts,
        "identity": a.identity,
        "identity_from_usernames": a.identity_from_usernames,
    }))?;
    Ok(())
}

pub fn vocab(a: VocabArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    cfg.paths.posts = a.posts.or(cfg.paths.posts);
    cfg.paths.out = a.out.or(cfg.paths.out);
    cfg.vocab.max_size = a.max_size.unwrap_or(cfg.vocab.max_size);
    cfg.vocab.min_count = a.min_count.unwrap_or(cfg.vocab.min_count);
    if cfg.vocab.max_size < 2 {
        return Err(CliError::usage("--max-size must be >= 2 (PAD and UNK are reserved)"));
    }
    let mut run = Run::create(required(&cfg.paths.out, "out")?, "vocab")?;
    let posts = load_posts(&mut run, required(&cfg.paths.posts, "posts")?)?;
    let vocab = Vocab::build(&posts, cfg.vocab.max_size, cfg.vocab.min_count);
    run.write("vocab.json", vocab.to_json())?;
    run.results.insert("tokens".into(), json!(vocab.len()));
    run.finish(&json!({ "paths": cfg.paths, "vocab": cfg.vocab }))?;
    Ok(())
}

pub fn graph_build(a: GraphBuildArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    cfg.paths.posts = a.posts.or(cfg.paths.posts);
    cfg.paths.out = a.out.or(cfg.paths.out);
    let mut run = Run::create(required(&cfg.paths.out, "out")?, "graph build")?;
    let corpus = Corpus::new(load_posts(&mut run, required(&cfg.paths.posts, "posts")?)?);

    let mut stats = BTreeMap::new();
    let mut lines = vec!["market\ttype_a\tid_a\ttype_b\tid_b".to_string()];
    for m in corpus.markets() {
        let g = build_graph(&corpus.market_posts(&m));
        let nodes: BTreeMap<String, usize> =
            NodeType::ALL.iter().map(|t| (t.letter().to_string(), g.nodes_of(*t).count())).collect();
        let mut edges: Vec<_> = g.edge_keys().into_iter().collect();
        edges.sort();
        let mut by_kind: BTreeMap<String, usize> = BTreeMap::new();
        for (x, y) in &edges {
            *by_kind.entry(format!("{}-{}", x.kind.letter(), y.kind.letter())).or_default() += 1;
            lines.push(format!("{m}\t{}\t{}\t{}\t{}", x.kind.letter(), x.id, y.kind.letter(), y.id));
        }
        stats.insert(m, json!({ "nodes": nodes, "edges": by_kind, "edge_count": g.edge_count() }));
    }
    run.write("graph.json", json_pretty(&stats))?;
    run.write("edges.tsv", lines.join("\n") + "\n")?;
    run.finish(&json!({ "paths": cfg.paths }))?;
    Ok(())
}

pub fn graph_train(a: GraphTrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    cfg.paths.posts = a.posts.or(cfg.paths.posts);
    cfg.paths.out = a.out.or(cfg.paths.out);
    let g = &mut cfg.graph;
    if let Some(s) = a.seed {
        g.walks.seed = s;
        g.skipgram.seed = s;
    }
    g.skipgram.dim = a.dim.unwrap_or(g.skipgram.dim);
    g.walks.walks_per_start = a.walks_per_start.unwrap_or(g.walks.walks_per_start);
    g.walks.target_len = a.target_len.unwrap_or(g.walks.target_len);
    g.skipgram.window = a.window.unwrap_or(g.skipgram.window);
    g.skipgram.negatives = a.negatives.unwrap_or(g.skipgram.negatives);
    g.skipgram.epochs = a.epochs.unwrap_or(g.skipgram.epochs);
    g.skipgram.step_size = a.step_size.unwrap_or(g.skipgram.step_size);
    if g.skipgram.dim == 0 || g.walks.target_len < 2 {
        return Err(CliError::usage("--dim must be >= 1 and --target-len >= 2"));
    }

    let mut run = Run::create(required(&cfg.paths.out, "out")?, "graph train")?;
    let posts = load_posts(&mut run, required(&cfg.paths.posts, "posts")?)?;
    let emb = graph_embeddings(&posts, &cfg.graph)?;
    write_embeddings(&emb, &run.path("embeddings.bin"))?;
    run.record("embeddings.bin", true);
    run.record("embeddings.bin.json", true);
    run.results.insert("nodes".into(), json!(emb.len()));
    run.finish(&json!({ "paths": cfg.paths, "graph": cfg.graph }))?;
    Ok(())
}

fn resolve_training(i: &TrainInputs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(i.config.as_deref())?;
    let p = &mut cfg.paths;
    for (slot, flag) in [
        (&mut p.posts, &i.posts),
        (&mut p.vocab, &i.vocab),
        (&mut p.graph, &i.graph),
        (&mut p.identity, &i.identity),
        (&mut p.out, &i.out),
    ] {
        if flag.is_some() {
            *slot = flag.clone();
        }
    }
    let t = &mut cfg.train;
    if let Some(m) = &i.market {
        t.mode = TrainMode::Single { market: m.clone() };
    }
    if let Some(ms) = &i.markets {
        t.mode = TrainMode::Multitask { markets: ms.clone(), use_cross_task: !i.no_cross };
    } else if let TrainMode::Multitask { use_cross_task, .. } = &mut t.mode {
        *use_cross_task &= !i.no_cross;
    }
    t.seed = i.seed.unwrap_or(t.seed);
    t.epochs = i.epochs.unwrap_or(t.epochs);
    t.batch_size = i.batch_size.unwrap_or(t.batch_size);
    t.step_size = i.step_size.unwrap_or(t.step_size);
    t.episodes.eval_stride = i.eval_stride.unwrap_or(t.episodes.eval_stride);
    match i.optimizer {
        Some(OptimizerArg::Adam) => t.optimizer = Optimizer::Adam,
        Some(OptimizerArg::Sgd) => t.optimizer = Optimizer::Sgd,
        None => {}
    }
    Ok(cfg)
}

/// Inputs loaded once for one or more training runs.
struct Loaded {
    corpus: Corpus,
    vocab: Vocab,
    vocab_ref: FileRef,
    graph: Option<(NodeEmbeddings, FileRef)>,
    identity: Option<IdentityMap>,
}

fn load_training_inputs(cfg: &mut RunConfig, run: &mut Run, need_graph: bool) -> Result<Loaded> {
    let posts = load_posts(run, required(&cfg.paths.posts, "posts")?)?;
    let corpus = Corpus::new(posts);
    let vocab_path = required(&cfg.paths.vocab, "vocab")?.to_path_buf();
    let vocab = load_vocab(run, &vocab_path)?;
    let graph = if need_graph {
        let path = cfg.paths.graph.clone().ok_or_else(|| {
            CliError::usage("graph context is enabled: pass --graph (or use --no-graph)")
        })?;
        let emb = load_graph(run, &path)?;
        Some((emb, file_ref(&path)?))
    } else {
        None
    };
    let identity = match &cfg.paths.identity {
        Some(p) => Some(load_identity(run, p)?),
        None => None,
    };

    if let TrainMode::Single { market } = &mut cfg.train.mode {
        if market.is_empty() {
            match corpus.markets().as_slice() {
                [only] => *market = only.clone(),
                _ => return Err(CliError::usage("the corpus has several markets: pass --market or --markets")),
            }
        }
    }
    let known = corpus.markets();
    if let Some(m) = cfg.train.markets().iter().find(|m| !known.contains(m)) {
        return Err(CliError::data(format!("market `{m}` does not occur in the posts")));
    }
    cfg.train.model.text.vocab_size = vocab.len();
    if let Some((emb, _)) = &graph {
        cfg.train.model.graph_dim = emb.dim();
    }
    Ok(Loaded { corpus, vocab, vocab_ref: file_ref(&vocab_path)?, graph, identity })
}

fn fit(cfg: &trainer::TrainConfig, data: &Loaded) -> Result<trainer::TrainOutcome> {
    let graph = data.graph.as_ref().filter(|_| cfg.model.use_graph_context);
    let mut out = trainer::train(cfg, &data.corpus, &data.vocab, graph.map(|g| &g.0), data.identity.as_ref())?;
    out.checkpoint.vocab = Some(data.vocab_ref.clone());
    out.checkpoint.graph = graph.map(|g| g.1.clone());
    Ok(out)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = resolve_training(&a.inputs)?;
    cfg.train.model.use_time &= !a.no_time;
    cfg.train.model.use_graph_context &= !a.no_graph;
    let mut run = Run::create(required(&cfg.paths.out, "out")?, "train")?;
    let need_graph = cfg.train.model.use_graph_context;
    let data = load_training_inputs(&mut cfg, &mut run, need_graph)?;
    let out = fit(&cfg.train, &data)?;
    save_checkpoint(&out.checkpoint, &run.path("model.ckpt"))?;
    run.record("model.ckpt", true);
    run.write("train_log.jsonl", out.log_jsonl())?;
    run.record("train_log.jsonl", false);
    run.results.insert("initial_loss".into(), json!(out.initial_loss));
    run.results.insert("final_loss".into(), json!(out.final_loss));
    run.finish(&cfg)?;
    Ok(())
}

pub fn embed(a: EmbedArgs) -> Result<()> {
    let mut run = Run::create(&a.out, "embed")?;
    run.input("checkpoint", &a.checkpoint)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let posts = load_posts(&mut run, &a.posts)?;
    let vocab = load_vocab(&mut run, &a.vocab)?;
    warn_on_changed_input("vocabulary", ckpt.vocab.as_ref(), &a.vocab)?;
    let graph = match (&a.graph, ckpt.config.model.use_graph_context) {
        (Some(p), true) => {
            warn_on_changed_input("graph embeddings", ckpt.graph.as_ref(), p)?;
            Some(load_graph(&mut run, p)?)
        }
        (None, true) => return Err(CliError::usage("the checkpoint uses graph context: pass --graph")),
        (_, false) => None,
    };
    let identity = match &a.identity {
        Some(p) => Some(load_identity(&mut run, p)?),
        None => None,
    };
    let markets = a.markets.clone().unwrap_or_else(|| ckpt.config.markets());
    let set = embed_split(&ckpt, &vocab, graph.as_ref(), &Corpus::new(posts), &markets, a.split, identity.as_ref())?;
    set.write(&run.path("embeddings.bin"))?;
    run.record("embeddings.bin", true);
    run.record("embeddings.bin.json", true);
    run.results.insert("episodes".into(), json!(set.len()));
    let split = format!("{:?}", a.split).to_lowercase();
    run.finish(&json!({
        "checkpoint": a.checkpoint, "posts": a.posts, "vocab": a.vocab, "graph": a.graph,
        "identity": a.identity, "markets": markets, "split": split,
    }))?;
    Ok(())
}

fn warn_on_changed_input(what: &str, recorded: Option<&FileRef>, path: &Path) -> Result<()> {
    if let Some(r) = recorded {
        if r.sha256 != sha256_file(path)? {
            log::warn!("{what} {} differs from the one used in training ({})", path.display(), r.path);
        }
    }
    Ok(())
}

fn embed_split(
    ckpt: &ModelCheckpoint,
    vocab: &Vocab,
    graph: Option<&NodeEmbeddings>,
    corpus: &Corpus,
    markets: &[String],
    split: SplitArg,
    identity: Option<&IdentityMap>,
) -> Result<EpisodeEmbeddingSet> {
    let feat = Featurizer::new(&ckpt.config.model, vocab, graph)?;
    let episodes = match split {
        SplitArg::Test => test_episodes(corpus, markets, &ckpt.config.episodes),
        other => {
            let posts: Vec<Post> = corpus.posts.iter().filter(|p| markets.contains(&p.market_id)).cloned().collect();
            split_and_window(&posts, &ckpt.config.episodes)
                .into_iter()
                .filter(|e| other == SplitArg::All || e.split == Split::Train)
                .collect()
        }
    };
    Ok(embed_episodes(&ckpt.model, &feat, corpus, &episodes, identity)?)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let mut eval = cfg.eval.clone();
    eval.labels = label_mode(a.labels, eval.labels);
    eval.ks = a.ks.clone().unwrap_or(eval.ks);
    eval.max_pos = a.max_pos.unwrap_or(eval.max_pos);
    let seed = a.seed.unwrap_or(cfg.train.seed);

    let mut run = Run::create(&a.out, "eval")?;
    run.input("embeddings", &a.embeddings)?;
    let set = EpisodeEmbeddingSet::read(&a.embeddings)?;
    let opts = EvalOptions { ks: eval.ks.clone(), max_pos: eval.max_pos, sample: a.sample.map(|k| (k, seed)) };
    let report = evaluate(&set.matrix, &set.labels(eval.labels), &opts)?;
    write_report(&mut run, "", &report)?;
    run.results.insert("mrr".into(), json!(report.mrr));
    run.finish(&json!({ "embeddings": a.embeddings, "eval": eval, "sample": a.sample, "seed": seed }))?;
    Ok(())
}

fn write_report(run: &mut Run, prefix: &str, report: &MetricReport) -> Result<()> {
    run.write(&format!("{prefix}metrics.json"), json_pretty(report))?;
    run.write(&format!("{prefix}histogram.csv"), report.histogram_csv())?;
    Ok(())
}

/// Table rows in order; the labels follow the usual ablation-table wording.
fn ablation_variants(no_graph: bool, no_time: bool) -> Vec<(&'static str, &'static str, bool, bool)> {
    let mut v = vec![("full", "full", true, true)];
    if no_graph {
        v.push(("- graph context", "no-graph", false, true));
        if no_time {
            v.push(("- graph context - time", "no-graph-no-time", false, false));
        }
    } else if no_time {
        v.push(("- time", "no-time", true, false));
    }
    v
}

#[derive(Serialize)]
struct AblationRow {
    variant: String,
    dir: String,
    mrr: f64,
    recall_at: BTreeMap<usize, f64>,
    n_queries: usize,
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = resolve_training(&a.inputs)?;
    cfg.eval.labels = label_mode(a.labels, cfg.eval.labels);
    let mut run = Run::create(required(&cfg.paths.out, "out")?, "ablate")?;
    let variants = ablation_variants(a.no_graph, a.no_time);
    let need_graph = cfg.train.model.use_graph_context;
    let data = load_training_inputs(&mut cfg, &mut run, need_graph)?;
    let opts = EvalOptions { ks: cfg.eval.ks.clone(), max_pos: cfg.eval.max_pos, sample: None };

    let mut rows = Vec::new();
    for (label, dir, graph_on, time_on) in variants {
        let mut tc = cfg.train.clone();
        tc.model.use_graph_context &= graph_on;
        tc.model.use_time &= time_on;
        log::info!("training variant `{label}`");
        let out = fit(&tc, &data)?;
        let ckpt_rel = format!("{dir}/model.ckpt");
        std::fs::create_dir_all(run.path(dir)).map_err(|e| CliError::io(&run.path(dir), e))?;
        save_checkpoint(&out.checkpoint, &run.path(&ckpt_rel))?;
        run.record(&ckpt_rel, true);

        let graph = data.graph.as_ref().map(|g| &g.0).filter(|_| tc.model.use_graph_context);
        let set = embed_split(
            &out.checkpoint,
            &data.vocab,
            graph,
            &data.corpus,
            &tc.markets(),
            SplitArg::Test,
            data.identity.as_ref(),
        )?;
        let emb_rel = format!("{dir}/embeddings.bin");
        set.write(&run.path(&emb_rel))?;
        run.record(&emb_rel, true);
        run.record(&format!("{emb_rel}.json"), true);
        let report = evaluate(&set.matrix, &set.labels(cfg.eval.labels), &opts)?;
        write_report(&mut run, &format!("{dir}/"), &report)?;
        rows.push(AblationRow {
            variant: label.to_string(),
            dir: dir.to_string(),
            mrr: report.mrr,
            recall_at: report.recall_at.clone(),
            n_queries: report.n_queries,
        });
    }

    let mut csv = String::from("variant,mrr");
    for k in &cfg.eval.ks {
        csv.push_str(&format!(",recall@{k}"));
    }
    csv.push('\n');
    for r in &rows {
        csv.push_str(&format!("{},{:.6}", r.variant, r.mrr));
        for k in &cfg.eval.ks {
            csv.push_str(&format!(",{:.6}", r.recall_at[k]));
        }
        csv.push('\n');
    }
    run.write("ablation.json", json_pretty(&rows))?;
    run.write("ablation.csv", csv)?;
    for r in &rows {
        run.results.insert(format!("mrr {}", r.variant), json!(r.mrr));
    }
    run.finish(&cfg)?;
    Ok(())
}

pub fn manifest(a: ManifestArgs) -> Result<()> {
    let path = a.run.join(MANIFEST);
    let m = read_manifest(&path)?;
    if !a.verify {
        print!("{}", json_pretty(&m));
        return Ok(());
    }
    let bad = verify(&m, &a.run);
    if bad.is_empty() {
        println!("{}", json!({ "ok": true, "checked": m.inputs.len() + m.outputs.len() }));
        Ok(())
    } else {
        let detail = serde_json::to_string(&bad).expect("mismatches serialize");
        Err(CliError::data(format!("hash mismatch: {detail}")).with_path(Path::new(&bad[0].path)))
    }
}
