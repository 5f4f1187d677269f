//! Standalone query rewrites: a rule-based coreference rewriter and TSV
//! ingestion of externally produced rewrites.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::corpus::{Conversation, Turn};
use crate::error::{Error, Result};
use crate::text::{normalize_whitespace, truncate_head};

pub const PRONOUNS: [&str; 9] = ["it", "its", "they", "them", "their", "he", "she", "this", "that"];

/// Word budget shared with the inverter's sequence length.
pub const MAX_REWRITE_WORDS: usize = 48;

const STOPWORDS_TXT: &str = include_str!("../resources/stopwords.txt");

pub fn stopwords() -> &'static HashSet<&'static str> {
    static WORDS: OnceLock<HashSet<&'static str>> = OnceLock::new();
    WORDS.get_or_init(|| STOPWORDS_TXT.lines().map(str::trim).filter(|w| !w.is_empty()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewriteKind {
    ExternalFile,
    Heuristic,
    HumanGold,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewriteSource {
    pub kind: RewriteKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl Default for RewriteSource {
    fn default() -> Self {
        Self {
            kind: RewriteKind::Heuristic,
            path: None,
        }
    }
}

impl RewriteSource {
    pub fn validate(&self) -> Result<()> {
        if self.kind == RewriteKind::ExternalFile && self.path.is_none() {
            return Err(Error::Config("external_file rewrites need a path".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rewrite {
    pub text: String,
    /// A pronoun was found but no antecedent could be picked.
    pub unresolved: bool,
}

/// One whitespace token split into its alphanumeric core and surrounding punctuation.
#[derive(Debug, Clone)]
struct Token<'a> {
    lead: &'a str,
    core: &'a str,
    trail: &'a str,
}

impl<'a> Token<'a> {
    fn split(raw: &'a str) -> Self {
        let start = raw
            .find(|c: char| c.is_alphanumeric())
            .unwrap_or(raw.len());
        let end = raw
            .rfind(|c: char| c.is_alphanumeric())
            .map_or(start, |i| i + raw[i..].chars().next().unwrap().len_utf8());
        Token {
            lead: &raw[..start],
            core: &raw[start..end.max(start)],
            trail: &raw[end.max(start)..],
        }
    }

    fn lower(&self) -> String {
        self.core.to_lowercase()
    }

    fn is_capitalized(&self) -> bool {
        self.core.chars().next().is_some_and(char::is_uppercase)
    }
}

fn is_content(lower: &str) -> bool {
    !lower.is_empty() && !stopwords().contains(lower) && !PRONOUNS.contains(&lower)
}

/// Surface form of a word in rewritten output: proper nouns (capitalized and
/// not sentence-initial) keep their case.
fn surface(token: &Token<'_>, position: usize) -> String {
    if position > 0 && token.is_capitalized() {
        token.core.to_string()
    } else {
        token.lower()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct NounPhrase {
    words: Vec<String>,
    capitalized: bool,
}

impl NounPhrase {
    fn eligible(&self) -> bool {
        self.words.len() >= 2 || self.capitalized
    }

    fn text(&self) -> String {
        self.words.join(" ")
    }
}

/// Maximal runs of content words; trailing punctuation closes a run.
fn noun_phrases(text: &str) -> Vec<NounPhrase> {
    let mut out = Vec::new();
    let mut current: Option<NounPhrase> = None;
    for (i, raw) in text.split_whitespace().enumerate() {
        let tok = Token::split(raw);
        if is_content(&tok.lower()) {
            let np = current.get_or_insert_with(|| NounPhrase {
                words: Vec::new(),
                capitalized: false,
            });
            np.words.push(surface(&tok, i));
            np.capitalized |= i > 0 && tok.is_capitalized();
            if !tok.trail.is_empty() {
                out.extend(current.take());
            }
        } else {
            out.extend(current.take());
        }
    }
    out.extend(current);
    out
}

fn content_words(text: &str) -> HashSet<String> {
    text.split_whitespace()
        .map(|w| Token::split(w).lower())
        .filter(|w| is_content(w))
        .collect()
}

/// Longest eligible noun phrase from the most recent history turn that has one.
fn antecedent(history: &[Turn]) -> Option<String> {
    for turn in history.iter().rev() {
        let mut candidates: Vec<NounPhrase> = noun_phrases(&turn.query);
        if let Some(resp) = &turn.response {
            candidates.extend(noun_phrases(resp));
        }
        // Later phrases win ties, so iterate in reverse and keep the first maximum.
        let best = candidates
            .iter()
            .rev()
            .filter(|np| np.eligible())
            .fold(None::<&NounPhrase>, |best, np| match best {
                Some(b) if b.words.len() >= np.words.len() => Some(b),
                _ => Some(np),
            });
        if let Some(np) = best {
            return Some(np.text());
        }
    }
    None
}

/// Longest noun phrase of the first turn's query (earliest wins ties).
fn salient_phrase(history: &[Turn]) -> Option<String> {
    let first = history.first()?;
    noun_phrases(&first.query)
        .into_iter()
        .fold(None::<NounPhrase>, |best, np| match best {
            Some(b) if b.words.len() >= np.words.len() => Some(b),
            _ => Some(np),
        })
        .map(|np| np.text())
}

/// Rewrites `query` against `history` with the pronoun-substitution and
/// topic-carryover rules.
pub fn resolve_query(query: &str, history: &[Turn]) -> Rewrite {
    let query = normalize_whitespace(query);
    let tokens: Vec<Token<'_>> = query.split_whitespace().map(Token::split).collect();
    let has_pronoun = tokens.iter().any(|t| PRONOUNS.contains(&t.lower().as_str()));
    if history.is_empty() {
        return Rewrite {
            text: truncate_head(&query, MAX_REWRITE_WORDS),
            unresolved: has_pronoun,
        };
    }

    let referent = if has_pronoun { antecedent(history) } else { None };
    let mut words: Vec<String> = Vec::with_capacity(tokens.len());
    for (i, tok) in tokens.iter().enumerate() {
        let lower = tok.lower();
        match &referent {
            Some(np) if PRONOUNS.contains(&lower.as_str()) => {
                words.push(format!("{}{np}{}", tok.lead, tok.trail));
            }
            _ => words.push(format!("{}{}{}", tok.lead, surface(tok, i), tok.trail)),
        }
    }

    if referent.is_none() {
        let mut seen = HashSet::new();
        for turn in history {
            seen.extend(content_words(&turn.query));
            if let Some(r) = &turn.response {
                seen.extend(content_words(r));
            }
        }
        let own = content_words(&words.join(" "));
        if own.is_disjoint(&seen) {
            if let Some(topic) = salient_phrase(history) {
                // Keep sentence-final punctuation at the very end.
                let closing = words
                    .last()
                    .map(|w| Token::split(w).trail.to_string())
                    .unwrap_or_default();
                if let Some(last) = words.last_mut() {
                    last.truncate(last.len() - closing.len());
                }
                words.retain(|w| !w.is_empty());
                words.push(format!("in the context of {topic}{closing}"));
            }
        }
    }

    Rewrite {
        text: truncate_head(&words.join(" "), MAX_REWRITE_WORDS),
        unresolved: has_pronoun && referent.is_none(),
    }
}

/// Rewrites the turn at 1-based `turn_index`.
pub fn heuristic_rewrite(conv: &Conversation, turn_index: usize) -> Result<Rewrite> {
    let turn = conv.turn(turn_index)?;
    let rewrite = resolve_query(&turn.query, conv.history(turn_index)?);
    if rewrite.unresolved {
        log::warn!(
            "{}: pronoun left unresolved in `{}`",
            conv.qid(turn_index)?,
            turn.query
        );
    }
    Ok(rewrite)
}

pub fn parse_rewrites(path: &Path, contents: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in contents.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((qid, text)) = line.split_once('\t') else {
            return Err(Error::parse(path, i + 1, "expected `qid<TAB>rewrite`"));
        };
        let qid = qid.trim().to_string();
        let text = normalize_whitespace(text);
        if text.is_empty() {
            return Err(Error::parse(path, i + 1, format!("empty rewrite for `{qid}`")));
        }
        if out.contains_key(&qid) {
            return Err(Error::DuplicateKey {
                kind: "rewrite qid",
                key: qid,
            });
        }
        out.insert(qid, text);
    }
    Ok(out)
}

pub fn load_rewrites(path: &Path) -> Result<BTreeMap<String, String>> {
    let contents = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_rewrites(path, &contents)
}

pub fn rewrites_to_tsv(rewrites: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (q, r) in rewrites {
        writeln!(out, "{q}\t{r}").unwrap();
    }
    out
}

pub fn write_rewrites(rewrites: &BTreeMap<String, String>, path: &Path) -> Result<()> {
    std::fs::write(path, rewrites_to_tsv(rewrites)).map_err(|e| Error::io(path, e))
}
