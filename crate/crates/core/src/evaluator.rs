//! Cosine retrieval metrics over episode embeddings: MRR, Recall@k and the
//! first-match position histogram.
//!
//! Ranking excludes the query itself and breaks similarity ties by ascending
//! row index. A zero row has cosine 0 with everything.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EvalError, FormatError};
use crate::graph::io::{read_file, sidecar_path, Reader};
use crate::tensor::{dot, norm, Mat};

const MAGIC: &[u8; 5] = b"URM4E";

/// Per-row metadata stored in the embedding sidecar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowInfo {
    pub episode_id: String,
    pub market_id: String,
    pub author_id: String,
    /// Identity group index when known (synthetic ground truth or username map).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeEmbeddingSet {
    /// `n × E`
    pub matrix: Mat,
    pub rows: Vec<RowInfo>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// Same (market, author) pair.
    Author,
    /// Same identity group, across markets.
    Identity,
}

impl EpisodeEmbeddingSet {
    pub fn new(matrix: Mat, rows: Vec<RowInfo>) -> Self {
        assert_eq!(matrix.rows, rows.len(), "one info record per row");
        Self { matrix, rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Dense integer labels; rows without a group get fresh unique labels in
    /// identity mode.
    pub fn labels(&self, mode: LabelMode) -> Vec<usize> {
        let mut ids: HashMap<(String, String), usize> = HashMap::new();
        let mut next = 0;
        let offset = self.rows.iter().filter_map(|r| r.group).max().map_or(0, |g| g + 1);
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| match (mode, r.group) {
                (LabelMode::Identity, Some(g)) => g,
                (LabelMode::Identity, None) => offset + i,
                (LabelMode::Author, _) => *ids.entry((r.market_id.clone(), r.author_id.clone())).or_insert_with(|| {
                    next += 1;
                    next - 1
                }),
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + self.matrix.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.matrix.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.matrix.cols as u32).to_le_bytes());
        for v in &self.matrix.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    /// Matrix only; metadata lives in the sidecar.
    pub fn matrix_from_bytes(bytes: &[u8]) -> Result<Mat, FormatError> {
        let mut r = Reader(bytes);
        if r.take(5)? != MAGIC {
            return Err(FormatError::BadMagic { expected: "URM4E" });
        }
        let n = r.u32()? as usize;
        let e = r.u32()? as usize;
        let mut data = Vec::with_capacity(n * e);
        for _ in 0..n * e {
            let v = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as f64;
            if !v.is_finite() {
                return Err(FormatError::CorruptFile("non-finite embedding value".into()));
            }
            data.push(v);
        }
        if !r.0.is_empty() {
            return Err(FormatError::CorruptFile("trailing bytes".into()));
        }
        Ok(Mat::from_vec(n, e, data))
    }

    pub fn write(&self, path: &Path) -> Result<(), FormatError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| FormatError::io(path, e))?;
        let side = sidecar_path(path);
        std::fs::write(&side, serde_json::to_string_pretty(&self.rows)?).map_err(|e| FormatError::io(&side, e))
    }

    /// Reads `path` and `path.json`.
    pub fn read(path: &Path) -> Result<Self, FormatError> {
        let matrix = Self::matrix_from_bytes(&read_file(path)?)?;
        let side = sidecar_path(path);
        let rows: Vec<RowInfo> = serde_json::from_slice(&read_file(&side)?)?;
        if rows.len() != matrix.rows {
            return Err(FormatError::CorruptFile(format!(
                "sidecar lists {} rows, matrix has {}",
                rows.len(),
                matrix.rows
            )));
        }
        Ok(Self { matrix, rows })
    }
}

/// Never returns `-0.0`, so an exact zero ties with every other zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d + 0.0
    }
}

/// All rows except `query`, by descending cosine then ascending index.
pub fn rank_by_cosine(query: usize, set: &Mat) -> Vec<usize> {
    let q = set.row(query);
    let mut scored: Vec<(f64, usize)> =
        (0..set.rows).filter(|&j| j != query).map(|j| (cosine(q, set.row(j)), j)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, j)| j).collect()
}

/// 1-based rank of the first row sharing the query's label, if any.
pub fn first_match_rank(query: usize, set: &Mat, labels: &[usize]) -> Option<usize> {
    rank_by_cosine(query, set).iter().position(|&j| labels[j] == labels[query]).map(|p| p + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mrr: f64,
    /// Keyed by k.
    pub recall_at: BTreeMap<usize, f64>,
    pub n_queries: usize,
    /// Queries dropped because no other row shares their label.
    pub skipped_queries: usize,
    /// `histogram[x - 1]` counts first matches at rank `x`, for `x ≤ max_pos`.
    pub histogram: Vec<usize>,
    /// First matches beyond `max_pos`.
    pub overflow: usize,
}

impl MetricReport {
    /// `position,count` lines, overflow as `>max_pos`.
    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("position,count\n");
        for (i, c) in self.histogram.iter().enumerate() {
            s.push_str(&format!("{},{}\n", i + 1, c));
        }
        s.push_str(&format!(">{},{}\n", self.histogram.len(), self.overflow));
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub max_pos: usize,
    /// Evaluate a seeded random subset of this many queries.
    pub sample: Option<(usize, u64)>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { ks: vec![1, 5, 10, 20, 50], max_pos: 20, sample: None }
    }
}

/// First-match ranks for the chosen queries (`None` where no match exists).
pub fn match_ranks(queries: &[usize], set: &Mat, labels: &[usize]) -> Result<Vec<Option<usize>>, EvalError> {
    if set.rows != labels.len() {
        return Err(EvalError::LabelCount { rows: set.rows, labels: labels.len() });
    }
    if set.rows < 2 {
        return Err(EvalError::TooFewRows(set.rows));
    }
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    Ok(queries
        .par_iter()
        .map(|&q| if counts[&labels[q]] >= 2 { first_match_rank(q, set, labels) } else { None })
        .collect())
}

fn valid_ranks(ranks: &[Option<usize>]) -> Result<Vec<usize>, EvalError> {
    let valid: Vec<usize> = ranks.iter().flatten().copied().collect();
    if valid.is_empty() {
        Err(EvalError::NoValidQueries)
    } else {
        Ok(valid)
    }
}

pub fn mrr(queries: &[usize], set: &Mat, labels: &[usize]) -> Result<f64, EvalError> {
    let r = valid_ranks(&match_ranks(queries, set, labels)?)?;
    Ok(r.iter().map(|&x| 1.0 / x as f64).sum::<f64>() / r.len() as f64)
}

pub fn recall_at_k(queries: &[usize], set: &Mat, labels: &[usize], k: usize) -> Result<f64, EvalError> {
    let r = valid_ranks(&match_ranks(queries, set, labels)?)?;
    Ok(r.iter().filter(|&&x| x <= k).count() as f64 / r.len() as f64)
}

/// `(counts for ranks 1..=max_pos, overflow)` over queries that have a match.
pub fn match_position_histogram(
    queries: &[usize],
    set: &Mat,
    labels: &[usize],
    max_pos: usize,
) -> Result<(Vec<usize>, usize), EvalError> {
    let ranks = match_ranks(queries, set, labels)?;
    Ok(tally(ranks.iter().flatten().copied(), max_pos))
}

fn tally(ranks: impl Iterator<Item = usize>, max_pos: usize) -> (Vec<usize>, usize) {
    let mut counts = vec![0; max_pos];
    let mut overflow = 0;
    for r in ranks {
        if r <= max_pos {
            counts[r - 1] += 1;
        } else {
            overflow += 1;
        }
    }
    (counts, overflow)
}

/// Query indices: all rows, or a seeded sample of them.
pub fn select_queries(n: usize, sample_opt: Option<(usize, u64)>) -> Vec<usize> {
    match sample_opt {
        Some((k, seed)) if k < n => {
            let mut v = sample(&mut ChaCha8Rng::seed_from_u64(seed), n, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    }
}

/// Full report in one ranking pass.
pub fn evaluate(set: &Mat, labels: &[usize], opts: &EvalOptions) -> Result<MetricReport, EvalError> {
    let queries = select_queries(set.rows, opts.sample);
    let ranks = match_ranks(&queries, set, labels)?;
    let valid = valid_ranks(&ranks)?;
    let n = valid.len() as f64;
    let recall_at =
        opts.ks.iter().map(|&k| (k, valid.iter().filter(|&&x| x <= k).count() as f64 / n)).collect();
    let (histogram, overflow) = tally(valid.iter().copied(), opts.max_pos);
    Ok(MetricReport {
        mrr: valid.iter().map(|&x| 1.0 / x as f64).sum::<f64>() / n,
        recall_at,
        n_queries: valid.len(),
        skipped_queries: ranks.len() - valid.len(),
        histogram,
        overflow,
    })
}
