//! Two-phase embedding inversion.
//!
//! The first phase picks, from an index of `(E_q(text), text)` pairs, the
//! text whose embedding is closest to the target. The second phase refines a
//! seed text (that hypothesis, or an externally supplied rewrite) by beam
//! search over word edits: substitute, insert, delete and swap adjacent.
//!
//! Candidate words are ranked by how well their features line up with the
//! residual `e - ê`, the direction in which the current hypothesis misses
//! the target. Each edit only touches the features of the edited words and
//! their neighbouring bigrams, so candidates are screened with an O(edit)
//! update of the raw counts; survivors are then scored exactly by
//! normalizing the updated counts, which gives the same bits as embedding the
//! edited text from scratch.

use std::cell::RefCell;
use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::{cosine, Embedder, Embedding, HashEmbedder, RawFeatures};
use crate::error::{Error, Result};
use crate::text::normalize_whitespace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrectionConfig {
    pub beam_width: usize,
    pub max_steps: usize,
    /// Vocabulary words tried per hypothesis for substitution and insertion.
    pub candidates_per_hypothesis: usize,
    pub max_words: usize,
    pub stop_similarity: f64,
    /// Steps without a new best before giving up.
    pub patience: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub vocabulary: Vec<String>,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self {
            beam_width: 10,
            max_steps: 30,
            candidates_per_hypothesis: 32,
            max_words: 48,
            stop_similarity: 0.9999,
            patience: 5,
            vocabulary: Vec::new(),
        }
    }
}

impl CorrectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::Config("beam_width must be at least 1".into()));
        }
        if self.max_words == 0 {
            return Err(Error::Config("max_words must be at least 1".into()));
        }
        if self.candidates_per_hypothesis == 0 {
            return Err(Error::Config("candidates_per_hypothesis must be at least 1".into()));
        }
        if self.stop_similarity.is_nan() || self.stop_similarity > 1.0 {
            return Err(Error::Config("stop_similarity must be at most 1".into()));
        }
        Ok(())
    }
}

/// `(E_q(text), text)` pairs used for the initial hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionIndex {
    texts: Vec<String>,
    embeddings: Vec<Embedding>,
}

impl InversionIndex {
    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }
}

/// Embeds every distinct text with the query embedder; later duplicates are dropped.
pub fn build_inversion_index<S: AsRef<str>>(
    training_texts: &[S],
    embedder: &dyn Embedder,
) -> Result<InversionIndex> {
    if training_texts.is_empty() {
        return Err(Error::Invalid("inversion index needs at least one text".into()));
    }
    let mut seen = HashSet::new();
    let mut texts = Vec::new();
    let mut embeddings = Vec::new();
    for t in training_texts {
        let text = normalize_whitespace(t.as_ref());
        if !seen.insert(text.clone()) {
            continue;
        }
        embeddings.push(embedder.embed(&text)?);
        texts.push(text);
    }
    Ok(InversionIndex { texts, embeddings })
}

/// The index text closest to `target`; ties go to the lexicographically smallest text.
pub fn initial_inversion(index: &InversionIndex, target: &Embedding) -> Result<String> {
    let mut best: Option<(f64, &str)> = None;
    for (text, emb) in index.texts.iter().zip(&index.embeddings) {
        let score = cosine(emb, target)?;
        let better = match best {
            None => true,
            Some((s, t)) => score > s || (score == s && text.as_str() < t),
        };
        if better {
            best = Some((score, text));
        }
    }
    best.map(|(_, t)| t.to_string())
        .ok_or_else(|| Error::Invalid("inversion index is empty".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub words: Vec<String>,
    pub embedding: Embedding,
    pub score: f64,
}

impl Hypothesis {
    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionResult {
    pub text: String,
    pub final_score: f64,
    /// `trace[0]` is the seed; `trace[t]` the best hypothesis after step `t`.
    pub trace: Vec<Hypothesis>,
    pub seeded: bool,
}

impl InversionResult {
    pub fn steps(&self) -> usize {
        self.trace.len().saturating_sub(1)
    }
}

/// A signed count in one hash bucket.
type Feature = (usize, i32);

/// Interned words with their precomputed context-free features.
struct Lexicon<'a> {
    embedder: &'a HashEmbedder,
    surface: Vec<String>,
    lower: Vec<String>,
    features: Vec<Vec<Feature>>,
    ids: HashMap<String, u32>,
    bigrams: RefCell<HashMap<(u32, u32), Option<Feature>>>,
}

impl<'a> Lexicon<'a> {
    fn new(embedder: &'a HashEmbedder) -> Self {
        Self {
            embedder,
            surface: Vec::new(),
            lower: Vec::new(),
            features: Vec::new(),
            ids: HashMap::new(),
            bigrams: RefCell::new(HashMap::new()),
        }
    }

    fn intern(&mut self, word: &str) -> u32 {
        if let Some(&id) = self.ids.get(word) {
            return id;
        }
        let id = self.surface.len() as u32;
        let lower = word.to_lowercase();
        self.features.push(self.embedder.word_features(&lower));
        self.surface.push(word.to_string());
        self.lower.push(lower);
        self.ids.insert(word.to_string(), id);
        id
    }

    fn bigram(&self, a: u32, b: u32) -> Option<Feature> {
        *self.bigrams.borrow_mut().entry((a, b)).or_insert_with(|| {
            self.embedder
                .bigram_features(&self.lower[a as usize], &self.lower[b as usize])
                .first()
                .copied()
        })
    }

    fn raw(&self, ids: &[u32]) -> RawFeatures {
        let lowers: Vec<&str> = ids.iter().map(|&i| self.lower[i as usize].as_str()).collect();
        self.embedder.raw_from_tokens(&lowers)
    }

    fn words(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.surface[i as usize].clone()).collect()
    }
}

#[derive(Debug, Clone, Copy)]
enum Edit {
    Substitute(usize, u32),
    Insert(usize, u32),
    Delete(usize),
    Swap(usize),
}

impl Edit {
    fn apply(self, ids: &[u32]) -> Vec<u32> {
        let mut out = ids.to_vec();
        match self {
            Edit::Substitute(i, w) => out[i] = w,
            Edit::Insert(i, w) => out.insert(i, w),
            Edit::Delete(i) => {
                out.remove(i);
            }
            Edit::Swap(i) => out.swap(i, i + 1),
        }
        out
    }
}

#[derive(Debug, Clone)]
struct State {
    ids: Vec<u32>,
    raw: RawFeatures,
    embedding: Embedding,
    score: f64,
    text: String,
}

/// Best first: higher score, then fewer words, then lexicographic text.
fn state_order(a: &State, b: &State) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.ids.len().cmp(&b.ids.len()))
        .then_with(|| a.text.cmp(&b.text))
}

/// Accumulates the sparse feature change of one edit.
struct DeltaBuf {
    dense: Vec<i32>,
    touched: Vec<usize>,
}

impl DeltaBuf {
    fn new(dim: usize) -> Self {
        Self {
            dense: vec![0; dim],
            touched: Vec::new(),
        }
    }

    fn add(&mut self, features: &[(usize, i32)], sign: i32) {
        for &(b, c) in features {
            if self.dense[b] == 0 {
                self.touched.push(b);
            }
            self.dense[b] += sign * c;
        }
    }

    /// Drains into `(bucket, delta)` pairs with zeros dropped.
    fn drain(&mut self, out: &mut Vec<(usize, i32)>) {
        out.clear();
        for &b in &self.touched {
            if self.dense[b] != 0 {
                out.push((b, self.dense[b]));
                self.dense[b] = 0;
            }
        }
        self.touched.clear();
        out.sort_unstable();
    }
}

struct Corrector<'a> {
    lex: Lexicon<'a>,
    vocab: Vec<u32>,
    target: &'a Embedding,
    cfg: &'a CorrectionConfig,
}

impl<'a> Corrector<'a> {
    fn state(&self, ids: Vec<u32>, raw: RawFeatures) -> Result<Option<State>> {
        debug_assert_eq!(raw, self.lex.raw(&ids), "incremental features drifted");
        let Some(embedding) = raw.normalize() else {
            return Ok(None);
        };
        let score = cosine(&embedding, self.target)?;
        let text = self.lex.words(&ids).join(" ");
        Ok(Some(State {
            ids,
            raw,
            embedding,
            score,
            text,
        }))
    }

    fn hypothesis(&self, s: &State) -> Hypothesis {
        Hypothesis {
            words: self.lex.words(&s.ids),
            embedding: s.embedding.clone(),
            score: s.score,
        }
    }

    /// Vocabulary words ranked by alignment of their features with the residual.
    fn ranked_words(&self, residual: &[f64]) -> Vec<u32> {
        let mut scored: Vec<(f64, u32)> = self
            .vocab
            .iter()
            .map(|&w| {
                let s: f64 = self.lex.features[w as usize]
                    .iter()
                    .map(|&(b, c)| f64::from(c) * residual[b])
                    .sum();
                (s, w)
            })
            .collect();
        scored.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| self.lex.lower[a.1 as usize].cmp(&self.lex.lower[b.1 as usize]))
        });
        scored
            .into_iter()
            .take(self.cfg.candidates_per_hypothesis)
            .map(|(_, w)| w)
            .collect()
    }

    fn edit_delta(&self, ids: &[u32], edit: Edit, buf: &mut DeltaBuf, out: &mut Vec<(usize, i32)>) {
        let lex = &self.lex;
        let n = ids.len();
        let bigram = |a: u32, b: u32, sign: i32, buf: &mut DeltaBuf| {
            if let Some(f) = lex.bigram(a, b) {
                buf.add(&[f], sign);
            }
        };
        match edit {
            Edit::Substitute(i, w) => {
                buf.add(&lex.features[ids[i] as usize], -1);
                buf.add(&lex.features[w as usize], 1);
                if i > 0 {
                    bigram(ids[i - 1], ids[i], -1, buf);
                    bigram(ids[i - 1], w, 1, buf);
                }
                if i + 1 < n {
                    bigram(ids[i], ids[i + 1], -1, buf);
                    bigram(w, ids[i + 1], 1, buf);
                }
            }
            Edit::Insert(i, w) => {
                buf.add(&lex.features[w as usize], 1);
                if i > 0 && i < n {
                    bigram(ids[i - 1], ids[i], -1, buf);
                }
                if i > 0 {
                    bigram(ids[i - 1], w, 1, buf);
                }
                if i < n {
                    bigram(w, ids[i], 1, buf);
                }
            }
            Edit::Delete(i) => {
                buf.add(&lex.features[ids[i] as usize], -1);
                if i > 0 {
                    bigram(ids[i - 1], ids[i], -1, buf);
                }
                if i + 1 < n {
                    bigram(ids[i], ids[i + 1], -1, buf);
                }
                if i > 0 && i + 1 < n {
                    bigram(ids[i - 1], ids[i + 1], 1, buf);
                }
            }
            Edit::Swap(i) => {
                let (a, b) = (ids[i], ids[i + 1]);
                bigram(a, b, -1, buf);
                bigram(b, a, 1, buf);
                if i > 0 {
                    bigram(ids[i - 1], a, -1, buf);
                    bigram(ids[i - 1], b, 1, buf);
                }
                if i + 2 < n {
                    bigram(b, ids[i + 2], -1, buf);
                    bigram(a, ids[i + 2], 1, buf);
                }
            }
        }
        buf.drain(out);
    }

    fn edits(&self, state: &State) -> Vec<Edit> {
        let n = state.ids.len();
        let residual: Vec<f64> = self
            .target
            .values()
            .iter()
            .zip(state.embedding.values())
            .map(|(e, h)| e - h)
            .collect();
        let words = self.ranked_words(&residual);
        let mut edits = Vec::new();
        for i in 0..n {
            for &w in &words {
                if w != state.ids[i] {
                    edits.push(Edit::Substitute(i, w));
                }
            }
        }
        if n < self.cfg.max_words {
            for i in 0..=n {
                for &w in &words {
                    edits.push(Edit::Insert(i, w));
                }
            }
        }
        if n > 1 {
            edits.extend((0..n).map(Edit::Delete));
            edits.extend((0..n - 1).filter(|&i| state.ids[i] != state.ids[i + 1]).map(Edit::Swap));
        }
        if n > self.cfg.max_words {
            edits.retain(|e| matches!(e, Edit::Delete(_)));
        }
        edits
    }

    /// One beam step: expand every hypothesis, screen by the incremental
    /// score, then score the survivors exactly.
    fn step(&self, beam: &[State], buf: &mut DeltaBuf) -> Result<Vec<State>> {
        let target = self.target.values();
        let target_norm = self.target.norm();
        let mut screened: Vec<(f64, usize, Edit)> = Vec::new();
        let mut delta = Vec::new();
        for (p, state) in beam.iter().enumerate() {
            let counts = state.raw.counts();
            let base_dot: f64 = counts
                .iter()
                .zip(target)
                .map(|(&c, &t)| f64::from(c) * t)
                .sum();
            let base_norm_sq = state.raw.norm_sq();
            for edit in self.edits(state) {
                self.edit_delta(&state.ids, edit, buf, &mut delta);
                let mut dot = base_dot;
                let mut norm_sq = base_norm_sq;
                for &(b, d) in &delta {
                    let c = i64::from(counts[b]);
                    let d64 = i64::from(d);
                    dot += f64::from(d) * target[b];
                    norm_sq += 2 * c * d64 + d64 * d64;
                }
                if norm_sq <= 0 {
                    continue;
                }
                let approx = dot / ((norm_sq as f64).sqrt() * target_norm);
                screened.push((approx, p, edit));
            }
        }
        screened.sort_by(|a, b| b.0.total_cmp(&a.0));

        let keep = 2 * self.cfg.beam_width + 4;
        let mut seen: HashSet<Vec<u32>> = HashSet::new();
        let mut next: Vec<State> = Vec::new();
        for (_, p, edit) in screened {
            if next.len() >= keep {
                break;
            }
            let ids = edit.apply(&beam[p].ids);
            if !seen.insert(ids.clone()) {
                continue;
            }
            self.edit_delta(&beam[p].ids, edit, buf, &mut delta);
            let mut raw = beam[p].raw.clone();
            raw.apply(&delta, 1);
            if let Some(s) = self.state(ids, raw)? {
                next.push(s);
            }
        }
        next.sort_by(state_order);
        next.truncate(self.cfg.beam_width);
        Ok(next)
    }
}

/// Refines `seed_text` towards `target` by beam search over word edits.
///
/// Returns the best hypothesis ever seen, so the result never scores below
/// the seed.
pub fn correct(
    target: &Embedding,
    seed_text: &str,
    cfg: &CorrectionConfig,
    embedder: &HashEmbedder,
) -> Result<InversionResult> {
    cfg.validate()?;
    if cfg.vocabulary.is_empty() {
        return Err(Error::Invalid("correction vocabulary is empty".into()));
    }
    if target.dim() != embedder.dim() {
        return Err(Error::DimensionMismatch {
            expected: embedder.dim(),
            actual: target.dim(),
        });
    }
    let seed = normalize_whitespace(seed_text);
    if seed.is_empty() {
        return Err(Error::EmptyText);
    }

    let mut lex = Lexicon::new(embedder);
    let mut vocab: Vec<u32> = cfg.vocabulary.iter().map(|w| lex.intern(&w.to_lowercase())).collect();
    vocab.sort_unstable();
    vocab.dedup();
    let seed_ids: Vec<u32> = seed.split(' ').map(|w| lex.intern(w)).collect();
    let corrector = Corrector {
        lex,
        vocab,
        target,
        cfg,
    };

    let seed_raw = corrector.lex.raw(&seed_ids);
    let seed_state = corrector
        .state(seed_ids, seed_raw)?
        .ok_or_else(|| Error::ZeroEmbedding(seed.clone()))?;
    let mut best = seed_state.clone();
    let mut trace = vec![corrector.hypothesis(&best)];
    let mut beam = vec![seed_state];
    let mut buf = DeltaBuf::new(embedder.dim());
    let mut stale = 0;

    for _ in 0..cfg.max_steps {
        if best.score >= cfg.stop_similarity || stale >= cfg.patience {
            break;
        }
        beam = corrector.step(&beam, &mut buf)?;
        let Some(top) = beam.first() else {
            break;
        };
        if state_order(top, &best) == Ordering::Less {
            best = top.clone();
            stale = 0;
        } else {
            stale += 1;
        }
        trace.push(corrector.hypothesis(&best));
    }

    Ok(InversionResult {
        text: best.text.clone(),
        final_score: best.score,
        trace,
        seeded: false,
    })
}

/// Inverts a session embedding, treating it as a point in the query
/// embedder's space. A rewrite, when given, replaces the initial inversion
/// as the correction seed.
pub fn invert_session(
    session: &Embedding,
    rewrite: Option<&str>,
    index: &InversionIndex,
    cfg: &CorrectionConfig,
    embedder: &HashEmbedder,
) -> Result<InversionResult> {
    let seed = match rewrite {
        Some(r) if normalize_whitespace(r).is_empty() => return Err(Error::EmptyText),
        Some(r) => r.to_string(),
        None => initial_inversion(index, session)?,
    };
    let mut result = correct(session, &seed, cfg, embedder)?;
    result.seeded = rewrite.is_some();
    Ok(result)
}

/// Token-level F1 between an inverted text and a reference rewrite, over
/// lowercased word multisets. A mechanical stand-in for human readability
/// judgments.
pub fn interpretability_proxy(text: &str, reference: &str) -> Result<f64> {
    let count = |s: &str| {
        let mut m: HashMap<String, usize> = HashMap::new();
        for w in s.split_whitespace() {
            *m.entry(w.to_lowercase()).or_default() += 1;
        }
        m
    };
    let a = count(text);
    let b = count(reference);
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyText);
    }
    let overlap: usize = a
        .iter()
        .map(|(w, &n)| n.min(b.get(w).copied().unwrap_or(0)))
        .sum();
    if overlap == 0 {
        return Ok(0.0);
    }
    let precision = overlap as f64 / a.values().sum::<usize>() as f64;
    let recall = overlap as f64 / b.values().sum::<usize>() as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub text: String,
    pub score: f64,
}

/// One line of an inversion results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionRecord {
    pub qid: String,
    pub text: String,
    pub score: f64,
    pub seeded: bool,
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<TraceStep>>,
}

impl InversionRecord {
    pub fn new(qid: &str, result: &InversionResult, with_trace: bool) -> Self {
        Self {
            qid: qid.to_string(),
            text: result.text.clone(),
            score: result.final_score,
            seeded: result.seeded,
            steps: result.steps(),
            trace: with_trace.then(|| {
                result
                    .trace
                    .iter()
                    .enumerate()
                    .map(|(step, h)| TraceStep {
                        step,
                        text: h.text(),
                        score: h.score,
                    })
                    .collect()
            }),
        }
    }
}

pub fn inversions_to_jsonl(records: &[InversionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r).expect("record serializes")).unwrap();
    }
    out
}

pub fn write_inversions(records: &[InversionRecord], path: &Path) -> Result<()> {
    std::fs::write(path, inversions_to_jsonl(records)).map_err(|e| Error::io(path, e))
}

pub fn load_inversions(path: &Path) -> Result<Vec<InversionRecord>> {
    let contents = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    contents
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(path, i + 1, e.to_string())))
        .collect()
}
