//! Exact dense retrieval and rank-based evaluation.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Passage, Qrels, RunFile};
use crate::embed::{cosine, dot, read_matrix, write_matrix, Embedder, Embedding};
use crate::error::{Error, Result};

pub const DEFAULT_TOP_K: usize = 1000;
pub const DEFAULT_REL_THRESHOLD: u32 = 1;
const NDCG_DEPTH: usize = 3;
const RECALL_DEPTH: usize = 100;

/// Passage embeddings stored as unit rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    doc_ids: Vec<String>,
    dim: usize,
    matrix: Vec<f64>,
}

impl DenseIndex {
    pub fn from_rows(doc_ids: Vec<String>, rows: Vec<Embedding>) -> Result<Self> {
        if doc_ids.len() != rows.len() {
            return Err(Error::Invalid(format!(
                "{} ids for {} rows",
                doc_ids.len(),
                rows.len()
            )));
        }
        let mut seen = HashSet::new();
        for id in &doc_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateKey {
                    kind: "doc_id",
                    key: id.clone(),
                });
            }
        }
        let dim = rows.first().map_or(0, Embedding::dim);
        let mut matrix = Vec::with_capacity(dim * rows.len());
        for row in rows {
            if row.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: row.dim(),
                });
            }
            matrix.extend(row.into_values());
        }
        Ok(Self {
            doc_ids,
            dim,
            matrix,
        })
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> Vec<Embedding> {
        (0..self.len())
            .map(|i| Embedding::new(self.row(i).to_vec()).expect("finite rows"))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_matrix(path, &self.doc_ids, &self.rows())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (ids, rows) = read_matrix(path)?;
        let rows = rows
            .into_iter()
            .map(Embedding::new)
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(ids, rows)
    }
}

/// Embeds every passage with the frozen passage encoder.
pub fn build_index(passages: &[Passage], embedder: &dyn Embedder) -> Result<DenseIndex> {
    if passages.is_empty() {
        return Err(Error::Invalid("cannot index an empty collection".into()));
    }
    let rows = passages
        .par_iter()
        .map(|p| {
            embedder
                .embed(&p.text)
                .map_err(|e| Error::stage("index", p.doc_id.clone(), e))
        })
        .collect::<Result<Vec<_>>>()?;
    DenseIndex::from_rows(passages.iter().map(|p| p.doc_id.clone()).collect(), rows)
}

fn rank_order(a: &(usize, f64), b: &(usize, f64), ids: &[String]) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| ids[a.0].cmp(&ids[b.0]))
}

/// Exact top-`k` by cosine; ties go to the smaller doc id.
pub fn search(index: &DenseIndex, query: &Embedding, k: usize) -> Result<Vec<(String, f64)>> {
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    if query.dim() != index.dim {
        return Err(Error::DimensionMismatch {
            expected: index.dim,
            actual: query.dim(),
        });
    }
    let qnorm = query.norm();
    if qnorm == 0.0 {
        return Err(Error::ZeroVector);
    }
    let mut scored: Vec<(usize, f64)> = (0..index.len())
        .map(|i| (i, dot(index.row(i), query.values()) / qnorm))
        .collect();
    let k = k.min(scored.len());
    let ids = &index.doc_ids;
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, |a, b| rank_order(a, b, ids));
        scored.truncate(k);
    }
    scored.sort_by(|a, b| rank_order(a, b, ids));
    Ok(scored
        .into_iter()
        .map(|(i, s)| (ids[i].clone(), s))
        .collect())
}

/// Runs `search` for every `(qid, embedding)` pair into one run file.
pub fn retrieve_all(
    index: &DenseIndex,
    queries: &[(String, Embedding)],
    k: usize,
    tag: &str,
) -> Result<RunFile> {
    let rankings = queries
        .par_iter()
        .map(|(q, e)| search(index, e, k).map_err(|err| Error::stage("retrieve", q.clone(), err)))
        .collect::<Result<Vec<_>>>()?;
    let mut run = RunFile::new(tag);
    for ((q, _), ranking) in queries.iter().zip(rankings) {
        run.insert(q, ranking)?;
    }
    Ok(run)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub mrr: f64,
    pub ndcg_at_3: f64,
    pub recall_at_100: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mrr: f64,
    pub ndcg_at_3: f64,
    pub recall_at_100: f64,
    pub num_queries: usize,
    pub rel_threshold: u32,
    /// Deepest ranking in the run; MRR is computed over this depth.
    pub depth: usize,
    /// Run queries without judgments; they score zero.
    pub unjudged: Vec<String>,
    pub per_query: BTreeMap<String, QueryMetrics>,
}

fn gain(grade: u32) -> f64 {
    2f64.powi(grade as i32) - 1.0
}

fn discount(rank: usize) -> f64 {
    ((rank + 1) as f64).log2()
}

fn query_metrics(ranking: &[(String, f64)], judged: &BTreeMap<String, u32>, threshold: u32) -> QueryMetrics {
    let grade = |d: &str| judged.get(d).copied().unwrap_or(0);
    let mrr = ranking
        .iter()
        .position(|(d, _)| grade(d) >= threshold && judged.contains_key(d))
        .map_or(0.0, |i| 1.0 / (i + 1) as f64);

    let dcg: f64 = ranking
        .iter()
        .take(NDCG_DEPTH)
        .enumerate()
        .map(|(i, (d, _))| gain(grade(d)) / discount(i + 1))
        .sum();
    let mut ideal: Vec<u32> = judged.values().copied().collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(NDCG_DEPTH)
        .enumerate()
        .map(|(i, &g)| gain(g) / discount(i + 1))
        .sum();
    let ndcg_at_3 = if idcg > 0.0 { dcg / idcg } else { 0.0 };

    let relevant: HashSet<&str> = judged
        .iter()
        .filter(|(_, &g)| g >= threshold)
        .map(|(d, _)| d.as_str())
        .collect();
    let recall_at_100 = if relevant.is_empty() {
        0.0
    } else {
        let hit = ranking
            .iter()
            .take(RECALL_DEPTH)
            .filter(|(d, _)| relevant.contains(d.as_str()))
            .count();
        hit as f64 / relevant.len() as f64
    };
    QueryMetrics {
        mrr,
        ndcg_at_3,
        recall_at_100,
    }
}

/// MRR, NDCG@3 (gain `2^g - 1`, `log2(rank + 1)` discount) and Recall@100
/// averaged over the run's queries.
pub fn evaluate(run: &RunFile, qrels: &Qrels, rel_threshold: u32) -> Result<MetricsReport> {
    if qrels.is_empty() {
        return Err(Error::Invalid("qrels are empty".into()));
    }
    let mut per_query = BTreeMap::new();
    let mut unjudged = Vec::new();
    let mut depth = 0;
    for (q, ranking) in run.queries() {
        depth = depth.max(ranking.len());
        let m = match qrels.judged(q) {
            Some(judged) => query_metrics(ranking, judged, rel_threshold),
            None => {
                log::warn!("query `{q}` has no judgments");
                unjudged.push(q.to_string());
                QueryMetrics::default()
            }
        };
        per_query.insert(q.to_string(), m);
    }
    let n = per_query.len();
    let mean = |f: fn(&QueryMetrics) -> f64| {
        if n == 0 {
            0.0
        } else {
            per_query.values().map(f).sum::<f64>() / n as f64
        }
    };
    Ok(MetricsReport {
        mrr: mean(|m| m.mrr),
        ndcg_at_3: mean(|m| m.ndcg_at_3),
        recall_at_100: mean(|m| m.recall_at_100),
        num_queries: n,
        rel_threshold,
        depth,
        unjudged,
        per_query,
    })
}

/// Mean cosine between session embeddings and the embeddings of their inverted texts.
pub fn restoration_similarity<S: AsRef<str>>(
    session_embs: &[Embedding],
    transformed_texts: &[S],
    embedder: &dyn Embedder,
) -> Result<f64> {
    if session_embs.len() != transformed_texts.len() {
        return Err(Error::Invalid(format!(
            "{} session embeddings for {} texts",
            session_embs.len(),
            transformed_texts.len()
        )));
    }
    if session_embs.is_empty() {
        return Ok(0.0);
    }
    let sims = session_embs
        .iter()
        .zip(transformed_texts)
        .map(|(s, t)| cosine(s, &embedder.embed(t.as_ref())?))
        .collect::<Result<Vec<f64>>>()?;
    Ok(sims.iter().sum::<f64>() / sims.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsDelta {
    pub mrr: f64,
    pub ndcg_at_3: f64,
    pub recall_at_100: f64,
}

pub fn retrieval_delta(a: &MetricsReport, b: &MetricsReport) -> MetricsDelta {
    MetricsDelta {
        mrr: (a.mrr - b.mrr).abs(),
        ndcg_at_3: (a.ndcg_at_3 - b.ndcg_at_3).abs(),
        recall_at_100: (a.recall_at_100 - b.recall_at_100).abs(),
    }
}
