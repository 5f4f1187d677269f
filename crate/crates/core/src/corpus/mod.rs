//! Conversations, passages, relevance judgments and run files.
//!
//! On-disk formats:
//!
//! * conversations: JSONL, one `{"conv_id", "turns": [{"turn_id", "query",
//!   "response"?, "human_rewrite"?}]}` record per line
//! * passages: TSV `docid<TAB>text`
//! * qrels: TREC `qid 0 docid rel`
//! * runs: TREC `qid Q0 docid rank score tag`, scores with 6 decimals
//!
//! Every turn is addressed by the query id `{conv_id}_{turn_id}`.

mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::normalize_whitespace;

pub use synth::{synth_corpus, SynthCorpus};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Turn {
    pub turn_id: String,
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_rewrite: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conversation {
    pub conv_id: String,
    pub turns: Vec<Turn>,
}

impl Conversation {
    /// Normalizes whitespace in every text field and checks the invariants.
    pub fn validated(mut self) -> Result<Self> {
        if self.turns.is_empty() {
            return Err(Error::Invalid(format!(
                "conversation `{}` has no turns",
                self.conv_id
            )));
        }
        let mut seen = HashSet::new();
        for turn in &mut self.turns {
            turn.query = normalize_whitespace(&turn.query);
            if turn.query.is_empty() {
                return Err(Error::Invalid(format!(
                    "turn `{}` of conversation `{}` has an empty query",
                    turn.turn_id, self.conv_id
                )));
            }
            turn.response = turn.response.as_deref().map(normalize_whitespace);
            turn.human_rewrite = turn.human_rewrite.as_deref().map(normalize_whitespace);
            if !seen.insert(turn.turn_id.clone()) {
                return Err(Error::DuplicateKey {
                    kind: "turn_id",
                    key: format!("{}/{}", self.conv_id, turn.turn_id),
                });
            }
        }
        Ok(self)
    }

    /// Query id of the turn at 1-based `turn_index`.
    pub fn qid(&self, turn_index: usize) -> Result<String> {
        Ok(qid(&self.conv_id, &self.turn(turn_index)?.turn_id))
    }

    /// The turn at 1-based `turn_index`.
    pub fn turn(&self, turn_index: usize) -> Result<&Turn> {
        if turn_index == 0 || turn_index > self.turns.len() {
            return Err(Error::TurnOutOfRange {
                conv_id: self.conv_id.clone(),
                index: turn_index,
                len: self.turns.len(),
            });
        }
        Ok(&self.turns[turn_index - 1])
    }

    /// History of the turn at 1-based `turn_index`: turns `1..turn_index`.
    pub fn history(&self, turn_index: usize) -> Result<&[Turn]> {
        self.turn(turn_index)?;
        Ok(&self.turns[..turn_index - 1])
    }

    /// `(turn_index, qid)` for every turn, in order.
    pub fn qids(&self) -> impl Iterator<Item = (usize, String)> + '_ {
        self.turns
            .iter()
            .enumerate()
            .map(|(i, t)| (i + 1, qid(&self.conv_id, &t.turn_id)))
    }
}

pub fn qid(conv_id: &str, turn_id: &str) -> String {
    format!("{conv_id}_{turn_id}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub doc_id: String,
    pub text: String,
}

/// Graded relevance judgments, keyed by query then document.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    grades: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, qid: &str, doc_id: &str, grade: u32) -> Result<()> {
        let docs = self.grades.entry(qid.to_string()).or_default();
        if docs.insert(doc_id.to_string(), grade).is_some() {
            return Err(Error::DuplicateKey {
                kind: "qrel",
                key: format!("{qid} {doc_id}"),
            });
        }
        Ok(())
    }

    pub fn grade(&self, qid: &str, doc_id: &str) -> Option<u32> {
        self.grades.get(qid)?.get(doc_id).copied()
    }

    pub fn judged(&self, qid: &str) -> Option<&BTreeMap<String, u32>> {
        self.grades.get(qid)
    }

    pub fn contains_query(&self, qid: &str) -> bool {
        self.grades.contains_key(qid)
    }

    pub fn is_empty(&self) -> bool {
        self.grades.is_empty()
    }

    pub fn num_queries(&self) -> usize {
        self.grades.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, u32)> {
        self.grades.iter().flat_map(|(q, docs)| {
            docs.iter()
                .map(move |(d, &g)| (q.as_str(), d.as_str(), g))
        })
    }

    /// Documents graded at least `threshold` for `qid`.
    pub fn relevant(&self, qid: &str, threshold: u32) -> Vec<&str> {
        self.grades
            .get(qid)
            .map(|docs| {
                docs.iter()
                    .filter(|(_, &g)| g >= threshold)
                    .map(|(d, _)| d.as_str())
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn to_trec_string(&self) -> String {
        let mut out = String::new();
        for (q, d, g) in self.iter() {
            writeln!(out, "{q} 0 {d} {g}").unwrap();
        }
        out
    }
}

/// Ranked results per query plus a run tag.
#[derive(Debug, Clone, PartialEq)]
pub struct RunFile {
    pub tag: String,
    queries: BTreeMap<String, Vec<(String, f64)>>,
}

impl RunFile {
    pub fn new(tag: impl Into<String>) -> Self {
        Self {
            tag: tag.into(),
            queries: BTreeMap::new(),
        }
    }

    /// Adds the ranking for `qid`, checking score order and doc uniqueness.
    pub fn insert(&mut self, qid: &str, ranking: Vec<(String, f64)>) -> Result<()> {
        let violation = |message: String| Error::RunInvariant {
            qid: qid.to_string(),
            message,
        };
        if self.queries.contains_key(qid) {
            return Err(Error::DuplicateKey {
                kind: "run query",
                key: qid.to_string(),
            });
        }
        let mut seen = HashSet::new();
        for (rank, (doc, score)) in ranking.iter().enumerate() {
            if !score.is_finite() {
                return Err(violation(format!("non-finite score for `{doc}`")));
            }
            if !seen.insert(doc.as_str()) {
                return Err(violation(format!("duplicate doc `{doc}`")));
            }
            if rank > 0 && *score > ranking[rank - 1].1 {
                return Err(violation(format!(
                    "score rises from {} to {} at rank {}",
                    ranking[rank - 1].1,
                    score,
                    rank + 1
                )));
            }
        }
        self.queries.insert(qid.to_string(), ranking);
        Ok(())
    }

    pub fn ranking(&self, qid: &str) -> Option<&[(String, f64)]> {
        self.queries.get(qid).map(Vec::as_slice)
    }

    pub fn queries(&self) -> impl Iterator<Item = (&str, &[(String, f64)])> {
        self.queries.iter().map(|(q, r)| (q.as_str(), r.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn to_trec_string(&self) -> String {
        let mut out = String::new();
        for (q, ranking) in &self.queries {
            for (i, (d, s)) in ranking.iter().enumerate() {
                writeln!(out, "{q} Q0 {d} {} {s:.6} {}", i + 1, self.tag).unwrap();
            }
        }
        out
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_string(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn parse_conversations(path: &Path, contents: &str) -> Result<Vec<Conversation>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in contents.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let conv: Conversation = serde_json::from_str(line)
            .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        let conv = conv
            .validated()
            .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        if !ids.insert(conv.conv_id.clone()) {
            return Err(Error::DuplicateKey {
                kind: "conv_id",
                key: conv.conv_id,
            });
        }
        out.push(conv);
    }
    Ok(out)
}

pub fn load_conversations(path: &Path) -> Result<Vec<Conversation>> {
    parse_conversations(path, &read_to_string(path)?)
}

pub fn conversations_to_jsonl(conversations: &[Conversation]) -> String {
    let mut out = String::new();
    for conv in conversations {
        out.push_str(&serde_json::to_string(conv).expect("conversation serializes"));
        out.push('\n');
    }
    out
}

pub fn write_conversations(conversations: &[Conversation], path: &Path) -> Result<()> {
    write_string(path, &conversations_to_jsonl(conversations))
}

pub fn parse_qrels(path: &Path, contents: &str) -> Result<Qrels> {
    let mut qrels = Qrels::new();
    for (i, line) in contents.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let [q, _, d, rel] = fields[..] else {
            return Err(Error::parse(
                path,
                i + 1,
                format!("expected `qid 0 docid rel`, got {} fields", fields.len()),
            ));
        };
        let grade: i64 = rel
            .parse()
            .map_err(|_| Error::parse(path, i + 1, format!("bad relevance `{rel}`")))?;
        if grade < 0 {
            return Err(Error::parse(path, i + 1, format!("negative relevance {grade}")));
        }
        let grade = u32::try_from(grade)
            .map_err(|_| Error::parse(path, i + 1, format!("relevance {grade} too large")))?;
        qrels
            .insert(q, d, grade)
            .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
    }
    Ok(qrels)
}

pub fn load_qrels(path: &Path) -> Result<Qrels> {
    parse_qrels(path, &read_to_string(path)?)
}

pub fn write_qrels(qrels: &Qrels, path: &Path) -> Result<()> {
    write_string(path, &qrels.to_trec_string())
}

pub fn parse_passages(path: &Path, contents: &str) -> Result<Vec<Passage>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in contents.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((doc_id, text)) = line.split_once('\t') else {
            return Err(Error::parse(path, i + 1, "expected `docid<TAB>text`"));
        };
        let doc_id = doc_id.trim().to_string();
        let text = normalize_whitespace(text);
        if doc_id.is_empty() || text.is_empty() {
            return Err(Error::parse(path, i + 1, "empty doc id or passage text"));
        }
        if !ids.insert(doc_id.clone()) {
            return Err(Error::DuplicateKey {
                kind: "doc_id",
                key: doc_id,
            });
        }
        out.push(Passage { doc_id, text });
    }
    Ok(out)
}

pub fn load_passages(path: &Path) -> Result<Vec<Passage>> {
    parse_passages(path, &read_to_string(path)?)
}

pub fn passages_to_tsv(passages: &[Passage]) -> String {
    let mut out = String::new();
    for p in passages {
        writeln!(out, "{}\t{}", p.doc_id, p.text).unwrap();
    }
    out
}

pub fn write_passages(passages: &[Passage], path: &Path) -> Result<()> {
    write_string(path, &passages_to_tsv(passages))
}

pub fn parse_run(path: &Path, contents: &str) -> Result<RunFile> {
    let mut tag: Option<String> = None;
    let mut rankings: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
    for (i, line) in contents.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let [q, _, d, rank, score, t] = fields[..] else {
            return Err(Error::parse(
                path,
                i + 1,
                "expected `qid Q0 docid rank score tag`",
            ));
        };
        let rank: usize = rank
            .parse()
            .map_err(|_| Error::parse(path, i + 1, format!("bad rank `{rank}`")))?;
        let score: f64 = score
            .parse()
            .map_err(|_| Error::parse(path, i + 1, format!("bad score `{score}`")))?;
        match &tag {
            None => tag = Some(t.to_string()),
            Some(existing) if existing != t => {
                return Err(Error::parse(path, i + 1, format!("mixed run tags `{existing}` and `{t}`")))
            }
            _ => {}
        }
        let ranking = rankings.entry(q.to_string()).or_default();
        if rank != ranking.len() + 1 {
            return Err(Error::parse(
                path,
                i + 1,
                format!("rank {rank} for `{q}` is not contiguous"),
            ));
        }
        ranking.push((d.to_string(), score));
    }
    let mut run = RunFile::new(tag.unwrap_or_default());
    for (q, ranking) in rankings {
        run.insert(&q, ranking)?;
    }
    Ok(run)
}

pub fn load_run(path: &Path) -> Result<RunFile> {
    parse_run(path, &read_to_string(path)?)
}

pub fn write_run(run: &RunFile, path: &Path) -> Result<()> {
    write_string(path, &run.to_trec_string())
}
