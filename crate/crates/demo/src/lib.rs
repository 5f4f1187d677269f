//! Browser demo. The plain functions here are what the page calls through
//! the wasm exports at the bottom; they are also exercised natively.

use convinv::corpus::{Conversation, Turn};
use convinv::embed::{cosine, Embedder, FeatureSpec, HashEmbedder};
use convinv::encoder::{build_session_text, SessionEncoder, DEFAULT_MAX_SESSION_WORDS, SEP};
use convinv::invert::{correct, CorrectionConfig};
use convinv::rewrite::heuristic_rewrite;
use serde::Serialize;

fn embedder() -> HashEmbedder {
    HashEmbedder::new(FeatureSpec::default()).expect("default spec is valid")
}

/// History is one earlier query per line; `query` is the current turn.
fn conversation(history: &str, query: &str) -> Result<Conversation, String> {
    let turns = history
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .chain(std::iter::once(query))
        .enumerate()
        .map(|(i, q)| Turn {
            turn_id: (i + 1).to_string(),
            query: q.to_string(),
            response: None,
            human_rewrite: None,
        })
        .collect();
    Conversation {
        conv_id: "demo".into(),
        turns,
    }
    .validated()
    .map_err(|e| e.to_string())
}

/// Cosine similarity of two texts under the query embedder.
pub fn similarity(a: &str, b: &str) -> Result<f64, String> {
    let e = embedder();
    let ea = e.embed(a).map_err(|e| e.to_string())?;
    let eb = e.embed(b).map_err(|e| e.to_string())?;
    cosine(&ea, &eb).map_err(|e| e.to_string())
}

/// Standalone rewrite of `query` given the history.
pub fn rewrite(history: &str, query: &str) -> Result<String, String> {
    let conv = conversation(history, query)?;
    let n = conv.turns.len();
    heuristic_rewrite(&conv, n).map(|r| r.text).map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
pub struct DemoStep {
    pub step: usize,
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Serialize)]
pub struct DemoInversion {
    pub seed: String,
    pub text: String,
    pub score: f64,
    pub trace: Vec<DemoStep>,
}

/// Encodes the session with an untrained encoder and inverts the vector back
/// to text. The seed is the heuristic rewrite when `seeded`, the raw query otherwise.
pub fn invert(history: &str, query: &str, seeded: bool) -> Result<DemoInversion, String> {
    let conv = conversation(history, query)?;
    let n = conv.turns.len();
    let encoder = SessionEncoder::identity(embedder(), DEFAULT_MAX_SESSION_WORDS);
    let target = encoder.encode_session(&conv, n).map_err(|e| e.to_string())?;
    let seed = if seeded {
        heuristic_rewrite(&conv, n).map_err(|e| e.to_string())?.text
    } else {
        conv.turns[n - 1].query.clone()
    };
    let session = build_session_text(&conv, n, DEFAULT_MAX_SESSION_WORDS).map_err(|e| e.to_string())?;
    let mut vocabulary: Vec<String> = session
        .split_whitespace()
        .filter(|w| *w != SEP)
        .map(str::to_lowercase)
        .collect();
    vocabulary.sort();
    vocabulary.dedup();
    let cfg = CorrectionConfig {
        vocabulary,
        ..CorrectionConfig::default()
    };
    let r = correct(&target, &seed, &cfg, encoder.base()).map_err(|e| e.to_string())?;
    Ok(DemoInversion {
        seed,
        text: r.text,
        score: r.final_score,
        trace: r
            .trace
            .iter()
            .enumerate()
            .map(|(step, h)| DemoStep {
                step,
                text: h.text(),
                score: h.score,
            })
            .collect(),
    })
}

#[cfg(target_arch = "wasm32")]
mod wasm {
    use wasm_bindgen::prelude::*;

    #[wasm_bindgen(js_name = similarity)]
    pub fn similarity(a: &str, b: &str) -> Result<f64, JsError> {
        super::similarity(a, b).map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(js_name = rewrite)]
    pub fn rewrite(history: &str, query: &str) -> Result<String, JsError> {
        super::rewrite(history, query).map_err(|e| JsError::new(&e))
    }

    /// Returns the inversion as a JSON string.
    #[wasm_bindgen(js_name = invert)]
    pub fn invert(history: &str, query: &str, seeded: bool) -> Result<String, JsError> {
        let r = super::invert(history, query, seeded).map_err(|e| JsError::new(&e))?;
        serde_json::to_string(&r).map_err(|e| JsError::new(&e.to_string()))
    }
}
