//! Heterogeneous user/subforum/thread/post graph and meta-path walks over it.

pub(crate) mod io;
mod skipgram;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use io::{read_embeddings, write_embeddings, EmbeddingSidecar, NodeEmbeddings};
pub use skipgram::{train_skipgram, SkipGram, SkipGramConfig};

use crate::corpus::Post;
use crate::error::GraphError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeType {
    #[serde(rename = "U")]
    User,
    #[serde(rename = "S")]
    Subforum,
    #[serde(rename = "T")]
    Thread,
    #[serde(rename = "P")]
    Post,
}

impl NodeType {
    pub const ALL: [NodeType; 4] = [NodeType::User, NodeType::Subforum, NodeType::Thread, NodeType::Post];

    pub fn letter(self) -> char {
        match self {
            NodeType::User => 'U',
            NodeType::Subforum => 'S',
            NodeType::Thread => 'T',
            NodeType::Post => 'P',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        Some(match c {
            'U' => NodeType::User,
            'S' => NodeType::Subforum,
            'T' => NodeType::Thread,
            'P' => NodeType::Post,
            _ => return None,
        })
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Whether an edge between the two types can exist.
    pub fn links(self, other: NodeType) -> bool {
        use NodeType::*;
        matches!(
            (self, other),
            (User, Thread) | (Thread, User) | (User, Post) | (Post, User) | (Thread, Post) | (Post, Thread)
                | (Subforum, Thread) | (Thread, Subforum)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeKey {
    pub market: String,
    #[serde(rename = "type")]
    pub kind: NodeType,
    pub id: String,
}

impl NodeKey {
    pub fn new(market: &str, kind: NodeType, id: &str) -> Self {
        Self { market: market.to_string(), kind, id: id.to_string() }
    }
}

/// Typed, undirected adjacency over the four node kinds. Node keys carry the
/// market, so posts from several markets form disconnected components.
#[derive(Debug, Clone, Default)]
pub struct HeteroGraph {
    nodes: Vec<NodeKey>,
    index: HashMap<NodeKey, usize>,
    /// Per node, neighbours grouped by neighbour type.
    adj: Vec<[Vec<usize>; 4]>,
    edges: HashSet<(usize, usize)>,
}

impl HeteroGraph {
    fn node(&mut self, key: NodeKey) -> usize {
        if let Some(&i) = self.index.get(&key) {
            return i;
        }
        let i = self.nodes.len();
        self.index.insert(key.clone(), i);
        self.nodes.push(key);
        self.adj.push(Default::default());
        i
    }

    fn connect(&mut self, a: usize, b: usize) {
        debug_assert!(self.nodes[a].kind.links(self.nodes[b].kind));
        let key = (a.min(b), a.max(b));
        if self.edges.insert(key) {
            let (ka, kb) = (self.nodes[a].kind, self.nodes[b].kind);
            self.adj[a][kb.index()].push(b);
            self.adj[b][ka.index()].push(a);
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn key(&self, node: usize) -> &NodeKey {
        &self.nodes[node]
    }

    pub fn keys(&self) -> &[NodeKey] {
        &self.nodes
    }

    pub fn kind(&self, node: usize) -> NodeType {
        self.nodes[node].kind
    }

    pub fn find(&self, key: &NodeKey) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn neighbors(&self, node: usize, kind: NodeType) -> &[usize] {
        &self.adj[node][kind.index()]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adj[node].iter().map(Vec::len).sum()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    pub fn nodes_of(&self, kind: NodeType) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(move |&i| self.nodes[i].kind == kind)
    }

    /// Edges as key pairs, each pair ordered.
    pub fn edge_keys(&self) -> HashSet<(NodeKey, NodeKey)> {
        self.edges
            .iter()
            .map(|&(a, b)| {
                let (x, y) = (self.nodes[a].clone(), self.nodes[b].clone());
                if x <= y {
                    (x, y)
                } else {
                    (y, x)
                }
            })
            .collect()
    }
}

/// Builds the forum graph from posts with resolved starter flags.
///
/// * starter post: `U–T` (author started the thread)
/// * any other post: `U–P`
/// * every post, starters included: `T–P`
/// * every thread: `S–T`
pub fn build_graph(posts: &[Post]) -> HeteroGraph {
    let mut g = HeteroGraph::default();
    for p in posts {
        let user = g.node(NodeKey::new(&p.market_id, NodeType::User, &p.author_id));
        let thread = g.node(NodeKey::new(&p.market_id, NodeType::Thread, &p.thread_id));
        let post = g.node(NodeKey::new(&p.market_id, NodeType::Post, &p.post_id));
        if p.is_starter() {
            g.connect(user, thread);
            let sub = g.node(NodeKey::new(&p.market_id, NodeType::Subforum, &p.subforum_id));
            g.connect(sub, thread);
        } else {
            g.connect(user, post);
        }
        g.connect(thread, post);
    }
    // Threads whose starter post is missing still belong to a subforum.
    for p in posts {
        let thread = g.index[&NodeKey::new(&p.market_id, NodeType::Thread, &p.thread_id)];
        if g.neighbors(thread, NodeType::Subforum).is_empty() {
            let sub = g.node(NodeKey::new(&p.market_id, NodeType::Subforum, &p.subforum_id));
            g.connect(sub, thread);
        }
    }
    g
}

/// A typed node sequence starting and ending at a user node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetaPathScheme(Vec<NodeType>);

impl MetaPathScheme {
    pub fn types(&self) -> &[NodeType] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl FromStr for MetaPathScheme {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, GraphError> {
        let err = |reason: &str| GraphError::InvalidScheme { scheme: s.to_string(), reason: reason.to_string() };
        let types: Vec<NodeType> = s
            .chars()
            .map(|c| NodeType::from_letter(c).ok_or_else(|| err("unknown node letter")))
            .collect::<Result<_, _>>()?;
        if types.len() < 3 {
            return Err(err("too short"));
        }
        if types[0] != NodeType::User || types[types.len() - 1] != NodeType::User {
            return Err(err("must start and end with U"));
        }
        if let Some(w) = types.windows(2).find(|w| !w[0].links(w[1])) {
            return Err(err(&format!("no {}-{} edges exist", w[0].letter(), w[1].letter())));
        }
        Ok(Self(types))
    }
}

impl fmt::Display for MetaPathScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.iter().try_for_each(|t| write!(f, "{}", t.letter()))
    }
}

/// The seven user-to-user schemes for forum graphs.
pub const FORUM_SCHEMES: [&str; 7] = ["UPTSTPU", "UTSTPU", "UPTSTU", "UTSTU", "UPTPU", "UPTU", "UTPU"];

pub fn forum_schemes() -> Vec<MetaPathScheme> {
    FORUM_SCHEMES.iter().map(|s| s.parse().expect("built-in scheme is valid")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WalkConfig {
    pub walks_per_start: usize,
    pub target_len: usize,
    pub seed: u64,
}

impl Default for WalkConfig {
    fn default() -> Self {
        Self { walks_per_start: 10, target_len: 41, seed: 0 }
    }
}

fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for a sub-stream keyed by `(a, b)`.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    mix(mix(mix(seed) ^ a) ^ b)
}

/// One walk following `scheme` from `start`, cycling the scheme (the closing
/// `U` doubles as the next opening `U`) until `target_len` nodes or a dead end.
pub fn walk_from(
    graph: &HeteroGraph,
    scheme: &MetaPathScheme,
    start: usize,
    target_len: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let types = scheme.types();
    let mut walk = vec![start];
    let mut pos = 0;
    let mut current = start;
    while walk.len() < target_len {
        if pos == types.len() - 1 {
            pos = 0;
        }
        let candidates = graph.neighbors(current, types[pos + 1]);
        let Some(&next) = candidates.choose(rng) else { break };
        walk.push(next);
        current = next;
        pos += 1;
    }
    walk
}

/// `walks_per_start` walks for every user node and scheme. Each
/// (start, scheme) task has its own generator, so output does not depend on
/// thread count. Walks that never leave their start node are dropped.
pub fn generate_walks(graph: &HeteroGraph, schemes: &[MetaPathScheme], cfg: &WalkConfig) -> Vec<Vec<usize>> {
    let tasks: Vec<(usize, usize)> = graph
        .nodes_of(NodeType::User)
        .flat_map(|u| (0..schemes.len()).map(move |s| (u, s)))
        .collect();
    tasks
        .par_iter()
        .map(|&(u, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, u as u64, s as u64));
            (0..cfg.walks_per_start)
                .map(|_| walk_from(graph, &schemes[s], u, cfg.target_len, &mut rng))
                .filter(|w| w.len() >= 2)
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Checks that consecutive types follow `scheme` (cyclically) and every step
/// is an edge.
pub fn walk_is_valid(graph: &HeteroGraph, scheme: &MetaPathScheme, walk: &[usize]) -> bool {
    let types = scheme.types();
    let period = types.len() - 1;
    walk.iter().enumerate().all(|(i, &n)| graph.kind(n) == types[i % period])
        && walk.windows(2).all(|w| graph.has_edge(w[0], w[1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn post(thread: &str, id: &str, author: &str, ts: i64, starter: bool) -> Post {
        Post {
            market_id: "m".into(),
            subforum_id: "S1".into(),
            thread_id: thread.into(),
            post_id: id.into(),
            author_id: author.into(),
            timestamp: ts,
            text: "x".into(),
            thread_starter: Some(starter),
        }
    }

    fn fixture() -> (Vec<Post>, HeteroGraph) {
        let posts = vec![post("T1", "P1", "U1", 1, true), post("T1", "P2", "U2", 2, false)];
        let g = build_graph(&posts);
        (posts, g)
    }

    fn k(kind: NodeType, id: &str) -> NodeKey {
        NodeKey::new("m", kind, id)
    }

    #[test]
    fn one_thread_fixture_edges() {
        use NodeType::*;
        let (_, g) = fixture();
        let mut expected = HashSet::new();
        for (a, b) in [
            (k(User, "U1"), k(Thread, "T1")),
            (k(Subforum, "S1"), k(Thread, "T1")),
            (k(Thread, "T1"), k(Post, "P1")),
            (k(Thread, "T1"), k(Post, "P2")),
            (k(User, "U2"), k(Post, "P2")),
        ] {
            expected.insert(if a <= b { (a, b) } else { (b, a) });
        }
        assert_eq!(g.edge_keys(), expected);
    }

    #[test]
    fn empty_posts_give_empty_graph() {
        let g = build_graph(&[]);
        assert!(g.is_empty());
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn post_degree_is_one_or_two_and_thread_has_one_subforum() {
        let posts: Vec<Post> = (0..30)
            .map(|i| post(&format!("T{}", i % 4), &format!("P{i}"), &format!("U{}", i % 5), i, i < 4))
            .collect();
        let g = build_graph(&posts);
        for p in g.nodes_of(NodeType::Post) {
            assert!((1..=2).contains(&g.degree(p)));
            assert_eq!(g.neighbors(p, NodeType::Thread).len(), 1);
        }
        for t in g.nodes_of(NodeType::Thread) {
            assert_eq!(g.neighbors(t, NodeType::Subforum).len(), 1);
        }
    }

    #[test]
    fn markets_stay_disconnected() {
        let mut a = post("T1", "P1", "U1", 1, true);
        let mut b = a.clone();
        a.market_id = "x".into();
        b.market_id = "y".into();
        let g = build_graph(&[a, b]);
        assert_eq!(g.node_count(), 8);
        for (x, y) in g.edge_keys() {
            assert_eq!(x.market, y.market);
        }
    }

    #[test]
    fn seven_schemes_parse_and_bad_ones_fail() {
        assert_eq!(forum_schemes().len(), 7);
        for s in FORUM_SCHEMES {
            assert_eq!(s.parse::<MetaPathScheme>().unwrap().to_string(), s);
        }
        for bad in ["UPSU", "TPU", "UPTP", "UXU", "U"] {
            assert!(bad.parse::<MetaPathScheme>().is_err(), "{bad}");
        }
    }

    #[test]
    fn utpu_walks_enumerate_exactly() {
        let (_, g) = fixture();
        let scheme: MetaPathScheme = "UTPU".parse().unwrap();
        let u1 = g.find(&k(NodeType::User, "U1")).unwrap();
        let t1 = g.find(&k(NodeType::Thread, "T1")).unwrap();
        let p2 = g.find(&k(NodeType::Post, "P2")).unwrap();
        let u2 = g.find(&k(NodeType::User, "U2")).unwrap();
        let mut seen = HashSet::new();
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = walk_from(&g, &scheme, u1, 4, &mut rng);
            assert!(walk_is_valid(&g, &scheme, &w));
            seen.insert(w);
        }
        // P1 has no author edge, so the walk stops there; P2 leads on to U2.
        let p1 = g.find(&k(NodeType::Post, "P1")).unwrap();
        let expected: HashSet<Vec<usize>> = [vec![u1, t1, p1], vec![u1, t1, p2, u2]].into_iter().collect();
        assert_eq!(seen, expected);
    }

    #[test]
    fn user_without_threads_is_stuck_and_dropped() {
        let (_, g) = fixture();
        let scheme: MetaPathScheme = "UTPU".parse().unwrap();
        let u2 = g.find(&k(NodeType::User, "U2")).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(walk_from(&g, &scheme, u2, 10, &mut rng), vec![u2]);
        let walks = generate_walks(&g, &[scheme], &WalkConfig { walks_per_start: 5, target_len: 10, seed: 1 });
        assert!(walks.iter().all(|w| w[0] != u2));
    }

    #[test]
    fn walks_are_deterministic_in_seed() {
        let (_, g) = fixture();
        let cfg = WalkConfig { walks_per_start: 4, target_len: 9, seed: 3 };
        assert_eq!(generate_walks(&g, &forum_schemes(), &cfg), generate_walks(&g, &forum_schemes(), &cfg));
    }
}
