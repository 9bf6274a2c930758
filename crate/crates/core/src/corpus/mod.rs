//! Forum posts, thread-starter resolution, chronological splitting and
//! fixed-length episode windows.

mod synth;

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use synth::{synth_corpus, SynthCorpus, SynthSpec};

use crate::error::CorpusError;

/// One forum message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub market_id: String,
    pub subforum_id: String,
    pub thread_id: String,
    pub post_id: String,
    pub author_id: String,
    /// Seconds since the Unix epoch, UTC.
    pub timestamp: i64,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thread_starter: Option<bool>,
}

impl Post {
    pub fn is_starter(&self) -> bool {
        self.thread_starter == Some(true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// A chronologically ordered window of one author's posts in one market.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub market_id: String,
    pub author_id: String,
    pub post_ids: Vec<String>,
    pub split: Split,
}

impl Episode {
    pub fn id(&self) -> String {
        let split = match self.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        format!("{}/{}/{}/{}", self.market_id, self.author_id, split, self.post_ids[0])
    }

    pub fn len(&self) -> usize {
        self.post_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.post_ids.is_empty()
    }
}

const REQUIRED: [&str; 7] =
    ["market_id", "subforum_id", "thread_id", "post_id", "author_id", "timestamp", "text"];

/// Parses and validates a JSONL post stream. Blank lines are skipped; line
/// numbers in errors are 1-based.
pub fn parse_posts(input: &str) -> Result<Vec<Post>, CorpusError> {
    let mut posts = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in input.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(raw)
            .map_err(|e| CorpusError::Malformed { line, message: e.to_string() })?;
        let obj = value
            .as_object()
            .ok_or_else(|| CorpusError::Malformed { line, message: "not a JSON object".into() })?;
        for name in REQUIRED {
            if obj.get(name).is_none_or(Value::is_null) {
                return Err(CorpusError::MissingField { name: name.to_string(), line });
            }
        }
        let text_field = |name: &str| -> Result<String, CorpusError> {
            obj[name].as_str().map(str::to_string).ok_or_else(|| CorpusError::Malformed {
                line,
                message: format!("field `{name}` must be a string"),
            })
        };
        let timestamp = obj["timestamp"]
            .as_i64()
            .filter(|t| *t >= 0)
            .ok_or(CorpusError::BadTimestamp { line })?;
        let thread_starter = match obj.get("thread_starter") {
            None | Some(Value::Null) => None,
            Some(Value::Bool(b)) => Some(*b),
            Some(_) => {
                return Err(CorpusError::Malformed {
                    line,
                    message: "field `thread_starter` must be a boolean".into(),
                })
            }
        };
        let post = Post {
            market_id: text_field("market_id")?,
            subforum_id: text_field("subforum_id")?,
            thread_id: text_field("thread_id")?,
            post_id: text_field("post_id")?,
            author_id: text_field("author_id")?,
            timestamp,
            text: text_field("text")?,
            thread_starter,
        };
        if post.text.trim().is_empty() {
            return Err(CorpusError::EmptyText { line });
        }
        if !seen.insert((post.market_id.clone(), post.post_id.clone())) {
            return Err(CorpusError::DuplicatePostId(post.post_id));
        }
        posts.push(post);
    }
    Ok(posts)
}

/// Serializes posts as JSONL (one object per line, LF endings).
pub fn write_posts(posts: &[Post]) -> String {
    let mut out = String::new();
    for p in posts {
        out.push_str(&serde_json::to_string(p).expect("post serializes"));
        out.push('\n');
    }
    out
}

/// Resolves exactly one starter per thread. Explicit `true` flags win; a
/// thread without one gets its earliest unflagged post (ties: smallest
/// `post_id`). Every other post of the thread is marked `false`.
pub fn infer_thread_starters(mut posts: Vec<Post>) -> Result<Vec<Post>, CorpusError> {
    let mut threads: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
    for (i, p) in posts.iter().enumerate() {
        threads.entry((p.market_id.clone(), p.thread_id.clone())).or_default().push(i);
    }
    for ((_, thread_id), members) in threads {
        let explicit: Vec<usize> =
            members.iter().copied().filter(|&i| posts[i].thread_starter == Some(true)).collect();
        let starter = match explicit.len() {
            0 => members
                .iter()
                .copied()
                .filter(|&i| posts[i].thread_starter.is_none())
                .min_by(|&a, &b| {
                    (posts[a].timestamp, &posts[a].post_id)
                        .cmp(&(posts[b].timestamp, &posts[b].post_id))
                })
                .ok_or_else(|| CorpusError::MissingStarter(thread_id.clone()))?,
            1 => explicit[0],
            _ => return Err(CorpusError::ConflictingStarters(thread_id)),
        };
        for i in members {
            posts[i].thread_starter = Some(i == starter);
        }
    }
    Ok(posts)
}

fn chronological(a: &Post, b: &Post) -> std::cmp::Ordering {
    (a.timestamp, &a.post_id).cmp(&(b.timestamp, &b.post_id))
}

fn group_by_author<'a>(posts: impl Iterator<Item = &'a Post>) -> BTreeMap<(&'a str, &'a str), Vec<&'a Post>> {
    let mut groups: BTreeMap<(&str, &str), Vec<&Post>> = BTreeMap::new();
    for p in posts {
        groups.entry((&p.market_id, &p.author_id)).or_default().push(p);
    }
    for list in groups.values_mut() {
        list.sort_by(|a, b| chronological(a, b));
    }
    groups
}

fn window(
    groups: BTreeMap<(&str, &str), Vec<&Post>>,
    len: usize,
    stride: usize,
    split: Split,
    out: &mut Vec<Episode>,
) {
    assert!(len >= 1 && stride >= 1, "episode length and stride must be positive");
    for ((market, author), list) in groups {
        let mut start = 0;
        while start + len <= list.len() {
            out.push(Episode {
                market_id: market.to_string(),
                author_id: author.to_string(),
                post_ids: list[start..start + len].iter().map(|p| p.post_id.clone()).collect(),
                split,
            });
            start += stride;
        }
    }
}

/// Sliding windows of exactly `len` posts per (market, author), stepping by
/// `stride`. Short tails are dropped. Episodes are labelled [`Split::Train`].
pub fn build_episodes(posts: &[Post], len: usize, stride: usize) -> Vec<Episode> {
    let mut out = Vec::new();
    window(group_by_author(posts.iter()), len, stride, Split::Train, &mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub length: usize,
    pub train_stride: usize,
    pub eval_stride: usize,
    /// Per-market timestamp quantile separating train from test posts.
    pub split_quantile: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self { length: 5, train_stride: 5, eval_stride: 1, split_quantile: 0.5 }
    }
}

/// Per market, the first timestamp that belongs to the test side.
/// `None` means every post is training data.
pub fn split_cutoffs(posts: &[Post], quantile: f64) -> BTreeMap<String, Option<i64>> {
    let mut stamps: BTreeMap<String, Vec<i64>> = BTreeMap::new();
    for p in posts {
        stamps.entry(p.market_id.clone()).or_default().push(p.timestamp);
    }
    stamps
        .into_iter()
        .map(|(market, mut ts)| {
            ts.sort_unstable();
            let idx = (quantile.clamp(0.0, 1.0) * ts.len() as f64).floor() as usize;
            (market, ts.get(idx).copied())
        })
        .collect()
}

pub fn split_of(post: &Post, cutoffs: &BTreeMap<String, Option<i64>>) -> Split {
    match cutoffs.get(&post.market_id).copied().flatten() {
        Some(cut) if post.timestamp >= cut => Split::Test,
        _ => Split::Train,
    }
}

/// Chronological train/test split per market, then windowing of each side
/// separately so no episode straddles the cutoff.
pub fn split_and_window(posts: &[Post], cfg: &EpisodeConfig) -> Vec<Episode> {
    let cutoffs = split_cutoffs(posts, cfg.split_quantile);
    let mut out = Vec::new();
    for (split, stride) in [(Split::Train, cfg.train_stride), (Split::Test, cfg.eval_stride)] {
        let side = posts.iter().filter(|p| split_of(p, &cutoffs) == split);
        window(group_by_author(side), cfg.length, stride, split, &mut out);
    }
    out
}

/// Lookup of posts by `(market_id, post_id)`.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub posts: Vec<Post>,
    index: HashMap<(String, String), usize>,
}

impl Corpus {
    pub fn new(posts: Vec<Post>) -> Self {
        let index = posts
            .iter()
            .enumerate()
            .map(|(i, p)| ((p.market_id.clone(), p.post_id.clone()), i))
            .collect();
        Self { posts, index }
    }

    pub fn index_of(&self, market: &str, post_id: &str) -> Option<usize> {
        self.index.get(&(market.to_string(), post_id.to_string())).copied()
    }

    pub fn get(&self, market: &str, post_id: &str) -> Option<&Post> {
        self.index_of(market, post_id).map(|i| &self.posts[i])
    }

    pub fn markets(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<&String> = self.posts.iter().map(|p| &p.market_id).collect();
        set.into_iter().cloned().collect()
    }

    pub fn market_posts(&self, market: &str) -> Vec<Post> {
        self.posts.iter().filter(|p| p.market_id == market).cloned().collect()
    }
}

/// Ground-truth (or username-derived) grouping of accounts into persons.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IdentityMap {
    pub groups: Vec<Vec<(String, String)>>,
}

impl IdentityMap {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut seen = HashSet::new();
        for pair in self.groups.iter().flatten() {
            if !seen.insert(pair) {
                return Err(CorpusError::InvalidSpec(format!(
                    "account {}/{} appears in more than one identity group",
                    pair.0, pair.1
                )));
            }
        }
        Ok(())
    }

    /// Index of the group holding `(market, author)`.
    pub fn lookup(&self) -> HashMap<(String, String), usize> {
        let mut out = HashMap::new();
        for (g, members) in self.groups.iter().enumerate() {
            for m in members {
                out.insert(m.clone(), g);
            }
        }
        out
    }

    /// Groups spanning at least two markets.
    pub fn cross_market_groups(&self) -> Vec<usize> {
        self.groups
            .iter()
            .enumerate()
            .filter(|(_, members)| {
                members.iter().map(|(m, _)| m).collect::<HashSet<_>>().len() >= 2
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Accounts grouped by case-folded username across markets.
    pub fn from_usernames(posts: &[Post]) -> Self {
        let mut by_name: BTreeMap<String, std::collections::BTreeSet<(String, String)>> = BTreeMap::new();
        for p in posts {
            by_name
                .entry(p.author_id.to_lowercase())
                .or_default()
                .insert((p.market_id.clone(), p.author_id.clone()));
        }
        Self { groups: by_name.into_values().map(|s| s.into_iter().collect()).collect() }
    }

    /// Every account as its own group.
    pub fn singletons(posts: &[Post]) -> Self {
        let set: std::collections::BTreeSet<(String, String)> =
            posts.iter().map(|p| (p.market_id.clone(), p.author_id.clone())).collect();
        Self { groups: set.into_iter().map(|pair| vec![pair]).collect() }
    }
}
