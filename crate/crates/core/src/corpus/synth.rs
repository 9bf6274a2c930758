//! Synthetic multi-market forums with planted per-person signatures.
//!
//! Every person carries a private word list, a preferred closing
//! punctuation, a day-of-week and hour-of-day profile and a per-market
//! subforum preference. Persons shared between markets keep the same
//! signature under a different username in each market.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use super::{IdentityMap, Post};
use crate::error::CorpusError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub markets: usize,
    pub authors_per_market: usize,
    /// Fraction of each market's authors that also appear in every other market.
    pub shared_author_fraction: f64,
    pub posts_per_author: usize,
    pub vocab_signature_size: usize,
    pub subforums_per_market: usize,
    pub seed: u64,
    /// Probability that a token is drawn from the author's private words.
    #[serde(default = "default_signature_rate")]
    pub signature_rate: f64,
    /// Weight of the two preferred weekdays relative to the other five.
    #[serde(default = "default_weekday_bias")]
    pub weekday_bias: f64,
    /// Weight of the favourite subforum relative to each of the others.
    #[serde(default = "default_subforum_bias")]
    pub subforum_bias: f64,
    /// Length of the activity period in days, starting 2013-06-01 UTC.
    #[serde(default = "default_span_days")]
    pub span_days: u32,
}

fn default_signature_rate() -> f64 {
    0.3
}
fn default_weekday_bias() -> f64 {
    6.0
}
fn default_subforum_bias() -> f64 {
    8.0
}
fn default_span_days() -> u32 {
    480
}

impl SynthSpec {
    pub fn new(markets: usize, authors_per_market: usize, shared_author_fraction: f64, seed: u64) -> Self {
        Self {
            markets,
            authors_per_market,
            shared_author_fraction,
            posts_per_author: 40,
            vocab_signature_size: 12,
            subforums_per_market: 6,
            seed,
            signature_rate: default_signature_rate(),
            weekday_bias: default_weekday_bias(),
            subforum_bias: default_subforum_bias(),
            span_days: default_span_days(),
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let counts = [
            ("markets", self.markets),
            ("authors_per_market", self.authors_per_market),
            ("posts_per_author", self.posts_per_author),
            ("vocab_signature_size", self.vocab_signature_size),
            ("subforums_per_market", self.subforums_per_market),
            ("span_days", self.span_days as usize),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(CorpusError::InvalidSpec(format!("{name} must be >= 1")));
            }
        }
        for (name, v) in [("shared_author_fraction", self.shared_author_fraction), ("signature_rate", self.signature_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CorpusError::InvalidSpec(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.weekday_bias >= 1.0 && self.subforum_bias >= 1.0) {
            return Err(CorpusError::InvalidSpec("biases must be >= 1".into()));
        }
        Ok(())
    }

    /// Authors per market that are shared across all markets.
    pub fn shared_per_market(&self) -> usize {
        if self.markets < 2 {
            return 0;
        }
        ((self.shared_author_fraction * self.authors_per_market as f64).round() as usize)
            .min(self.authors_per_market)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    /// `(market_id, posts)` with posts in chronological order.
    pub markets: Vec<(String, Vec<Post>)>,
    pub identity: IdentityMap,
}

impl SynthCorpus {
    pub fn all_posts(&self) -> Vec<Post> {
        self.markets.iter().flat_map(|(_, p)| p.iter().cloned()).collect()
    }
}

const START_TS: i64 = 1_370_044_800; // 2013-06-01T00:00:00Z
const SHARED_WORDS: usize = 400;
const CLOSERS: [&str; 6] = [".", "!", "?", "...", "!!", ""];
const CONSONANTS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "ch"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];

struct Person {
    words: Vec<String>,
    closer: &'static str,
    weekday_weights: WeightedIndex<f64>,
    hour_center: f64,
    length_median: f64,
    /// Per-market subforum weights.
    subforums: Vec<WeightedIndex<f64>>,
}

fn pseudo_word<R: Rng>(rng: &mut R, taken: &mut HashSet<String>) -> String {
    loop {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(CONSONANTS.choose(rng).unwrap());
            w.push_str(VOWELS.choose(rng).unwrap());
        }
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

fn username<R: Rng>(rng: &mut R, taken: &mut HashSet<String>) -> String {
    loop {
        let mut w = String::new();
        for _ in 0..rng.random_range(2..=3) {
            w.push_str(CONSONANTS.choose(rng).unwrap());
            w.push_str(VOWELS.choose(rng).unwrap());
        }
        w.push_str(&rng.random_range(10..100).to_string());
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

/// Deterministic in `spec` (including its seed).
pub fn synth_corpus(spec: &SynthSpec) -> Result<SynthCorpus, CorpusError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let shared = spec.shared_per_market();
    let unique = spec.authors_per_market - shared;
    let n_persons = shared + unique * spec.markets;
    // membership[m] lists the persons active in market m.
    let membership: Vec<Vec<usize>> = (0..spec.markets)
        .map(|m| (0..shared).chain((0..unique).map(|u| shared + m * unique + u)).collect())
        .collect();

    let mut taken = HashSet::new();
    let shared_words: Vec<String> = (0..SHARED_WORDS).map(|_| pseudo_word(&mut rng, &mut taken)).collect();
    let zipf: Vec<f64> = (1..=SHARED_WORDS).map(|r| 1.0 / (r as f64).powf(1.1)).collect();
    let shared_dist = WeightedIndex::new(&zipf).expect("positive weights");
    let pool_size = (n_persons * spec.vocab_signature_size * 2).max(spec.vocab_signature_size);
    let signature_pool: Vec<String> = (0..pool_size).map(|_| pseudo_word(&mut rng, &mut taken)).collect();

    let persons: Vec<Person> = (0..n_persons)
        .map(|_| {
            let words = signature_pool.choose_multiple(&mut rng, spec.vocab_signature_size).cloned().collect();
            let mut days: Vec<usize> = (0..7).collect();
            days.shuffle(&mut rng);
            let mut weekday = [1.0; 7];
            weekday[days[0]] = spec.weekday_bias;
            weekday[days[1]] = spec.weekday_bias;
            let subforums = (0..spec.markets)
                .map(|_| {
                    let mut w = vec![1.0; spec.subforums_per_market];
                    let fav = rng.random_range(0..spec.subforums_per_market);
                    w[fav] = spec.subforum_bias;
                    WeightedIndex::new(&w).expect("positive weights")
                })
                .collect();
            Person {
                words,
                closer: CLOSERS.choose(&mut rng).unwrap(),
                weekday_weights: WeightedIndex::new(weekday).expect("positive weights"),
                hour_center: rng.random_range(0.0..24.0),
                length_median: rng.random_range(6.0..30.0),
                subforums,
            }
        })
        .collect();

    let mut identity_groups: Vec<Vec<(String, String)>> = vec![Vec::new(); n_persons];
    let mut markets = Vec::with_capacity(spec.markets);
    for (m, members) in membership.iter().enumerate() {
        let market_id = format!("market{m}");
        let mut names = HashSet::new();
        let usernames: Vec<String> = members.iter().map(|_| username(&mut rng, &mut names)).collect();
        for (&person, name) in members.iter().zip(&usernames) {
            identity_groups[person].push((market_id.clone(), name.clone()));
        }

        // (timestamp, author slot, subforum, text)
        let mut events: Vec<(i64, usize, usize, String)> = Vec::new();
        for (slot, &person) in members.iter().enumerate() {
            let p = &persons[person];
            let hour = Normal::new(p.hour_center, 1.5).expect("finite");
            let length = LogNormal::new(p.length_median.ln(), 0.8).expect("finite");
            for _ in 0..spec.posts_per_author {
                let day = rng.random_range(0..spec.span_days as i64);
                let day_ts = START_TS + day * 86_400;
                // Thursday is 3 with Monday = 0 at the epoch.
                let current = (day_ts / 86_400 + 3) % 7;
                let target = p.weekday_weights.sample(&mut rng) as i64;
                let mut shifted = day + (target - current);
                if shifted < 0 {
                    shifted += 7;
                }
                if shifted >= spec.span_days as i64 {
                    shifted -= 7;
                }
                let shifted = shifted.max(0);
                let h = hour.sample(&mut rng).rem_euclid(24.0).floor() as i64;
                let ts = START_TS + shifted * 86_400 + h * 3600 + rng.random_range(0..3600);

                let n_tokens = (length.sample(&mut rng).round() as usize).clamp(1, 400);
                let mut tokens: Vec<&str> = Vec::with_capacity(n_tokens + 1);
                for _ in 0..n_tokens {
                    if rng.random_bool(spec.signature_rate) {
                        tokens.push(p.words.choose(&mut rng).unwrap());
                    } else {
                        tokens.push(&shared_words[shared_dist.sample(&mut rng)]);
                    }
                }
                let mut text = tokens.join(" ");
                text.push_str(p.closer);
                let subforum = p.subforums[m].sample(&mut rng);
                events.push((ts, slot, subforum, text));
            }
        }
        events.sort_by_key(|e| (e.0, e.1));

        let mut threads_by_subforum: Vec<Vec<usize>> = vec![Vec::new(); spec.subforums_per_market];
        let mut thread_count = 0usize;
        let mut posts = Vec::with_capacity(events.len());
        for (i, (ts, slot, subforum, text)) in events.into_iter().enumerate() {
            let open = &mut threads_by_subforum[subforum];
            let starts = open.is_empty() || rng.random_bool(0.25);
            let thread = if starts {
                open.push(thread_count);
                thread_count += 1;
                thread_count - 1
            } else {
                let recent = &open[open.len().saturating_sub(8)..];
                *recent.choose(&mut rng).unwrap()
            };
            posts.push(Post {
                market_id: market_id.clone(),
                subforum_id: format!("sf{subforum}"),
                thread_id: format!("t{thread}"),
                post_id: format!("p{i:06}"),
                author_id: usernames[slot].clone(),
                timestamp: ts,
                text,
                thread_starter: Some(starts),
            });
        }
        markets.push((market_id, posts));
    }

    Ok(SynthCorpus { markets, identity: IdentityMap { groups: identity_groups } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::write_posts;
    use std::collections::BTreeMap;

    fn small(markets: usize, authors: usize, frac: f64) -> SynthSpec {
        SynthSpec { posts_per_author: 10, ..SynthSpec::new(markets, authors, frac, 11) }
    }

    #[test]
    fn single_market_has_only_singleton_groups() {
        let out = synth_corpus(&SynthSpec { shared_author_fraction: 0.0, ..small(1, 6, 0.0) }).unwrap();
        assert!(out.identity.groups.iter().all(|g| g.len() == 1));
        assert_eq!(out.identity.groups.len(), 6);
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let spec = small(2, 5, 0.4);
        let a = synth_corpus(&spec).unwrap();
        let b = synth_corpus(&spec).unwrap();
        assert_eq!(write_posts(&a.all_posts()), write_posts(&b.all_posts()));
        assert_eq!(serde_json::to_string(&a.identity).unwrap(), serde_json::to_string(&b.identity).unwrap());
        let c = synth_corpus(&SynthSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(write_posts(&a.all_posts()), write_posts(&c.all_posts()));
    }

    #[test]
    fn half_shared_two_markets_group_sizes() {
        let out = synth_corpus(&small(2, 10, 0.5)).unwrap();
        let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
        for g in &out.identity.groups {
            *sizes.entry(g.len()).or_default() += 1;
        }
        assert_eq!(sizes, BTreeMap::from([(1, 10), (2, 5)]));
        out.identity.validate().unwrap();
        // Shared groups span two markets.
        assert_eq!(out.identity.cross_market_groups().len(), 5);
    }

    #[test]
    fn posts_satisfy_parser_invariants() {
        let out = synth_corpus(&small(2, 4, 0.5)).unwrap();
        let posts = out.all_posts();
        assert_eq!(posts.len(), 2 * 4 * 10);
        let parsed = crate::corpus::parse_posts(&write_posts(&posts)).unwrap();
        let resolved = crate::corpus::infer_thread_starters(parsed.clone()).unwrap();
        assert_eq!(parsed, resolved, "generated starter flags are already consistent");
        for (_, market) in &out.markets {
            assert!(market.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(synth_corpus(&SynthSpec { markets: 0, ..small(1, 1, 0.0) }).is_err());
        assert!(synth_corpus(&SynthSpec { shared_author_fraction: 1.5, ..small(2, 2, 0.0) }).is_err());
    }
}
