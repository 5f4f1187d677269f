//! Session encoder: a trainable linear head over the frozen query embedder,
//! `s = normalize(W · embed(session_text) + b)`.
//!
//! Two training paradigms are provided. Knowledge distillation pulls each
//! session embedding towards the embedding of its human rewrite with a mean
//! squared error. Contrastive training uses InfoNCE with in-batch negatives
//! against frozen passage embeddings. Both use mini-batch SGD with momentum
//! and exact gradients through the normalization.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Conversation, Passage, Qrels};
use crate::embed::{Embedder, Embedding, FeatureSpec, HashEmbedder, HeadTruncated};
use crate::error::{Error, Result};
use crate::text::truncate_tail;

pub const SEP: &str = "[SEP]";
pub const DEFAULT_MAX_SESSION_WORDS: usize = 512;
pub const DEFAULT_MAX_PASSAGE_WORDS: usize = 384;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    Kd,
    Conv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub paradigm: Paradigm,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// InfoNCE temperature; unused by KD.
    pub temperature: f64,
    pub seed: u64,
    pub max_session_words: usize,
    pub max_passage_words: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            paradigm: Paradigm::Kd,
            epochs: 20,
            batch_size: 16,
            learning_rate: 0.05,
            momentum: 0.9,
            temperature: 0.05,
            seed: 0,
            max_session_words: DEFAULT_MAX_SESSION_WORDS,
            max_passage_words: DEFAULT_MAX_PASSAGE_WORDS,
        }
    }
}

impl TrainConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        // negated so NaN is rejected too
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.batch_size == 0 || (self.paradigm == Paradigm::Conv && self.batch_size < 2) {
            return bad("batch_size must be at least 1, and at least 2 for contrastive training");
        }
        if self.max_session_words == 0 || self.max_passage_words == 0 {
            return bad("word limits must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub paradigm: Paradigm,
    /// Objective over the whole training set after each epoch.
    pub epoch_losses: Vec<f64>,
    /// Objective before the first update.
    pub initial_loss: f64,
    /// KD: mean cosine to the teacher. Contrastive: mean cosine to the positive passage.
    pub final_similarity: f64,
    pub examples: usize,
    /// Turns dropped because they had no positive passage.
    pub skipped: usize,
}

/// `q_1 [SEP] a_1 [SEP] … [SEP] q_i`, keeping the last `max_words` words.
pub fn build_session_text(conv: &Conversation, turn_index: usize, max_words: usize) -> Result<String> {
    let turn = conv.turn(turn_index)?;
    let mut parts: Vec<&str> = Vec::with_capacity(2 * turn_index);
    for prev in conv.history(turn_index)? {
        parts.push(&prev.query);
        if let Some(r) = prev.response.as_deref().filter(|r| !r.is_empty()) {
            parts.push(r);
        }
    }
    parts.push(&turn.query);
    Ok(truncate_tail(&parts.join(&format!(" {SEP} ")), max_words))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionEncoder {
    base: HashEmbedder,
    weight: Vec<f64>,
    bias: Vec<f64>,
    max_session_words: usize,
    identity: bool,
}

impl SessionEncoder {
    /// `W = I`, `b = 0`: the session embedding is the base embedding.
    pub fn identity(base: HashEmbedder, max_session_words: usize) -> Self {
        let d = base.dim();
        let mut weight = vec![0.0; d * d];
        for i in 0..d {
            weight[i * d + i] = 1.0;
        }
        Self {
            base,
            weight,
            bias: vec![0.0; d],
            max_session_words,
            identity: true,
        }
    }

    pub fn base(&self) -> &HashEmbedder {
        &self.base
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn max_session_words(&self) -> usize {
        self.max_session_words
    }

    pub fn set_params(&mut self, weight: Vec<f64>, bias: Vec<f64>) -> Result<()> {
        let d = self.dim();
        if weight.len() != d * d || bias.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d * d + d,
                actual: weight.len() + bias.len(),
            });
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite encoder parameter".into()));
        }
        self.weight = weight;
        self.bias = bias;
        self.identity = self.is_identity_params();
        Ok(())
    }

    fn is_identity_params(&self) -> bool {
        let d = self.dim();
        self.bias.iter().all(|&b| b == 0.0)
            && self
                .weight
                .iter()
                .enumerate()
                .all(|(k, &w)| w == if k / d == k % d { 1.0 } else { 0.0 })
    }

    /// `W x + b` for a base embedding `x`.
    fn affine(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let nz: Vec<(usize, f64)> = x
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(j, &v)| (j, v))
            .collect();
        (0..d)
            .map(|i| {
                let row = &self.weight[i * d..(i + 1) * d];
                nz.iter().map(|&(j, v)| row[j] * v).sum::<f64>() + self.bias[i]
            })
            .collect()
    }

    /// Maps a base-space embedding through the head.
    pub fn project(&self, x: &Embedding) -> Result<Embedding> {
        if x.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.dim(),
            });
        }
        if self.identity {
            return Ok(x.clone());
        }
        Embedding::normalized(self.affine(x.values()))
    }

    pub fn encode_text(&self, session_text: &str) -> Result<Embedding> {
        self.project(&self.base.embed(&truncate_tail(session_text, self.max_session_words))?)
    }

    /// Session embedding `s_i` of the turn at 1-based `turn_index`.
    pub fn encode_session(&self, conv: &Conversation, turn_index: usize) -> Result<Embedding> {
        self.encode_text(&build_session_text(conv, turn_index, self.max_session_words)?)
    }

    /// The frozen passage encoder sharing this encoder's space.
    pub fn passage_encoder(&self, max_passage_words: usize) -> HeadTruncated<HashEmbedder> {
        HeadTruncated {
            inner: self.base.clone(),
            max_words: max_passage_words,
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(8 + 4 * (self.weight.len() + self.bias.len()));
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for &v in self.weight.iter().chain(&self.bias) {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        bytes.extend_from_slice(
            serde_json::to_string(self.base.spec())
                .expect("feature spec serializes")
                .as_bytes(),
        );
        File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path, max_session_words: usize) -> Result<Self> {
        let format = |m: String| Error::Format {
            path: path.to_path_buf(),
            message: m,
        };
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(format("missing CVWT header".into()));
        }
        let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let params_end = 8 + 4 * (d * d + d);
        if bytes.len() < params_end {
            return Err(format("truncated parameters".into()));
        }
        let params: Vec<f64> = bytes[8..params_end]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let spec: FeatureSpec = serde_json::from_slice(&bytes[params_end..])
            .map_err(|e| format(format!("bad feature spec footer: {e}")))?;
        if spec.dim != d {
            return Err(format(format!("footer dim {} != header dim {d}", spec.dim)));
        }
        let mut enc = Self::identity(HashEmbedder::new(spec)?, max_session_words);
        let (w, b) = params.split_at(d * d);
        enc.set_params(w.to_vec(), b.to_vec())?;
        Ok(enc)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CVWT";

/// Gradient of an objective with respect to the head parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradient {
    fn zeros(d: usize) -> Self {
        Self {
            weight: vec![0.0; d * d],
            bias: vec![0.0; d],
        }
    }
}

/// Forward pass keeping what the backward pass needs.
struct Forward {
    s: Vec<f64>,
    norm: f64,
}

fn forward(enc: &SessionEncoder, x: &Embedding) -> Result<Forward> {
    let z = enc.affine(x.values());
    let norm = crate::embed::l2_norm(&z);
    if norm == 0.0 {
        return Err(Error::ZeroVector);
    }
    // Same shortcut as `project`, so an untrained encoder reproduces its input exactly.
    let s = if enc.identity {
        x.values().to_vec()
    } else {
        z.iter().map(|v| v / norm).collect()
    };
    Ok(Forward { s, norm })
}

/// Back-propagates `ds = dL/ds` through the normalization and affine map,
/// accumulating into `grad`.
fn backward(fwd: &Forward, x: &Embedding, ds: &[f64], grad: &mut Gradient) {
    let d = ds.len();
    let proj: f64 = fwd.s.iter().zip(ds).map(|(s, g)| s * g).sum();
    for (i, (&g, &s)) in ds.iter().zip(&fwd.s).enumerate() {
        let dz = (g - s * proj) / fwd.norm;
        if dz == 0.0 {
            continue;
        }
        grad.bias[i] += dz;
        let row = &mut grad.weight[i * d..(i + 1) * d];
        for (j, &xj) in x.values().iter().enumerate() {
            if xj != 0.0 {
                row[j] += dz * xj;
            }
        }
    }
}

/// One distillation example: base embedding of the session and the teacher embedding.
pub type KdPair = (Embedding, Embedding);

/// One contrastive example: base embedding of the session and its positive passage.
pub type ContrastivePair = (Embedding, Embedding);

/// Mean squared distance between session and teacher embeddings.
pub fn kd_loss(enc: &SessionEncoder, batch: &[KdPair]) -> Result<f64> {
    let mut total = 0.0;
    for (x, t) in batch {
        let f = forward(enc, x)?;
        total += f.s.iter().zip(t.values()).map(|(s, t)| (s - t) * (s - t)).sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

pub fn kd_loss_and_grad(enc: &SessionEncoder, batch: &[KdPair]) -> Result<(f64, Gradient)> {
    let n = batch.len() as f64;
    let mut grad = Gradient::zeros(enc.dim());
    let mut total = 0.0;
    for (x, t) in batch {
        let f = forward(enc, x)?;
        let diff: Vec<f64> = f.s.iter().zip(t.values()).map(|(s, t)| s - t).collect();
        total += diff.iter().map(|v| v * v).sum::<f64>();
        let ds: Vec<f64> = diff.iter().map(|v| 2.0 * v / n).collect();
        backward(&f, x, &ds, &mut grad);
    }
    Ok((total / n, grad))
}

fn log_softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// InfoNCE with in-batch negatives: `-mean_i log softmax_j(cos(s_i, p_j) / tau)[i]`.
pub fn infonce_loss(enc: &SessionEncoder, batch: &[ContrastivePair], tau: f64) -> Result<f64> {
    Ok(infonce_impl(enc, batch, tau, false)?.0)
}

pub fn infonce_loss_and_grad(
    enc: &SessionEncoder,
    batch: &[ContrastivePair],
    tau: f64,
) -> Result<(f64, Gradient)> {
    let (loss, grad) = infonce_impl(enc, batch, tau, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

fn infonce_impl(
    enc: &SessionEncoder,
    batch: &[ContrastivePair],
    tau: f64,
    want_grad: bool,
) -> Result<(f64, Option<Gradient>)> {
    let n = batch.len();
    let d = enc.dim();
    let passages: Vec<Vec<f64>> = batch
        .iter()
        .map(|(_, p)| {
            let norm = p.norm();
            p.values().iter().map(|v| v / norm).collect()
        })
        .collect();
    let mut grad = want_grad.then(|| Gradient::zeros(d));
    let mut total = 0.0;
    for (i, (x, _)) in batch.iter().enumerate() {
        let f = forward(enc, x)?;
        let logits: Vec<f64> = passages
            .iter()
            .map(|p| crate::embed::dot(&f.s, p) / tau)
            .collect();
        let logp = log_softmax_row(&logits);
        total -= logp[i];
        if let Some(grad) = grad.as_mut() {
            let mut ds = vec![0.0; d];
            for (j, p) in passages.iter().enumerate() {
                let coeff = (logp[j].exp() - if i == j { 1.0 } else { 0.0 }) / (tau * n as f64);
                for (k, v) in p.iter().enumerate() {
                    ds[k] += coeff * v;
                }
            }
            backward(&f, x, &ds, grad);
        }
    }
    Ok((total / n as f64, grad))
}

/// Base embeddings of every session paired with the embedding of its human rewrite.
pub fn kd_pairs(enc: &SessionEncoder, conversations: &[Conversation]) -> Result<Vec<KdPair>> {
    let mut out = Vec::new();
    for conv in conversations {
        for (i, qid) in conv.qids() {
            let rewrite = conv.turns[i - 1]
                .human_rewrite
                .as_deref()
                .ok_or_else(|| Error::MissingRewrite(qid.clone()))?;
            let text = build_session_text(conv, i, enc.max_session_words)?;
            let x = enc.base.embed(&text).map_err(|e| Error::stage("encode", qid.clone(), e))?;
            let t = enc.base.embed(rewrite).map_err(|e| Error::stage("teacher", qid, e))?;
            out.push((x, t));
        }
    }
    Ok(out)
}

/// Base embeddings of every session paired with its best-graded relevant
/// passage. Returns the pairs and the number of turns without one.
pub fn contrastive_pairs(
    enc: &SessionEncoder,
    conversations: &[Conversation],
    passages: &[Passage],
    qrels: &Qrels,
    max_passage_words: usize,
) -> Result<(Vec<ContrastivePair>, usize)> {
    let by_id: std::collections::HashMap<&str, &Passage> =
        passages.iter().map(|p| (p.doc_id.as_str(), p)).collect();
    let passage_enc = enc.passage_encoder(max_passage_words);
    let mut out = Vec::new();
    let mut skipped = 0;
    for conv in conversations {
        for (i, qid) in conv.qids() {
            let positive = qrels.judged(&qid).and_then(|docs| {
                docs.iter()
                    .filter(|(d, &g)| g > 0 && by_id.contains_key(d.as_str()))
                    .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
                    .map(|(d, _)| by_id[d.as_str()])
            });
            let Some(positive) = positive else {
                log::warn!("{qid}: no positive passage, skipped");
                skipped += 1;
                continue;
            };
            let text = build_session_text(conv, i, enc.max_session_words)?;
            let x = enc.base.embed(&text).map_err(|e| Error::stage("encode", qid.clone(), e))?;
            let p = passage_enc
                .embed(&positive.text)
                .map_err(|e| Error::stage("passage", positive.doc_id.clone(), e))?;
            out.push((x, p));
        }
    }
    Ok((out, skipped))
}

/// Mean cosine between projected sessions and their targets.
pub fn mean_similarity(enc: &SessionEncoder, pairs: &[(Embedding, Embedding)]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (x, t) in pairs {
        total += crate::embed::cosine(&enc.project(x)?, t)?;
    }
    Ok(total / pairs.len() as f64)
}

struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Gradient,
}

impl Sgd {
    fn step(&mut self, enc: &mut SessionEncoder, grad: &Gradient) -> Result<()> {
        let mut weight = enc.weight.clone();
        let mut bias = enc.bias.clone();
        for ((v, g), w) in self.velocity.weight.iter_mut().zip(&grad.weight).zip(&mut weight) {
            *v = self.momentum * *v + g;
            *w -= self.lr * *v;
        }
        for ((v, g), b) in self.velocity.bias.iter_mut().zip(&grad.bias).zip(&mut bias) {
            *v = self.momentum * *v + g;
            *b -= self.lr * *v;
        }
        enc.set_params(weight, bias)
    }
}

fn run_sgd<L, G>(
    enc: &mut SessionEncoder,
    pairs: &[(Embedding, Embedding)],
    cfg: &TrainConfig,
    min_batch: usize,
    full_loss: L,
    batch_grad: G,
) -> Result<(f64, Vec<f64>)>
where
    L: Fn(&SessionEncoder, &[(Embedding, Embedding)]) -> Result<f64>,
    G: Fn(&SessionEncoder, &[(Embedding, Embedding)]) -> Result<(f64, Gradient)>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd {
        lr: cfg.learning_rate,
        momentum: cfg.momentum,
        velocity: Gradient::zeros(enc.dim()),
    };
    let initial = full_loss(enc, pairs)?;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < min_batch {
                continue;
            }
            let batch: Vec<(Embedding, Embedding)> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            let (_, grad) = batch_grad(enc, &batch)?;
            sgd.step(enc, &grad)?;
        }
        let loss = full_loss(enc, pairs)?;
        log::debug!("epoch {}: loss {loss:.6}", epoch + 1);
        losses.push(loss);
    }
    Ok((initial, losses))
}

/// Knowledge distillation towards the embeddings of the human rewrites.
pub fn train_kd(
    enc: &mut SessionEncoder,
    conversations: &[Conversation],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.paradigm != Paradigm::Kd {
        return Err(Error::Config("train_kd needs paradigm = kd".into()));
    }
    let pairs = kd_pairs(enc, conversations)?;
    if pairs.is_empty() {
        return Err(Error::Invalid("no training turns".into()));
    }
    let (initial_loss, epoch_losses) = run_sgd(enc, &pairs, cfg, 1, kd_loss, kd_loss_and_grad)?;
    Ok(TrainReport {
        paradigm: Paradigm::Kd,
        epoch_losses,
        initial_loss,
        final_similarity: mean_similarity(enc, &pairs)?,
        examples: pairs.len(),
        skipped: 0,
    })
}

/// Contrastive training with in-batch negatives against frozen passages.
pub fn train_conv(
    enc: &mut SessionEncoder,
    conversations: &[Conversation],
    passages: &[Passage],
    qrels: &Qrels,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.paradigm != Paradigm::Conv {
        return Err(Error::Config("train_conv needs paradigm = conv".into()));
    }
    let (pairs, skipped) = contrastive_pairs(enc, conversations, passages, qrels, cfg.max_passage_words)?;
    if pairs.len() < 2 {
        return Err(Error::Invalid("contrastive training needs at least two positives".into()));
    }
    let tau = cfg.temperature;
    let bs = cfg.batch_size;
    // Fixed, unshuffled batches give a comparable objective across epochs.
    let full_loss = move |enc: &SessionEncoder, pairs: &[ContrastivePair]| -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0;
        for chunk in pairs.chunks(bs).filter(|c| c.len() >= 2) {
            total += infonce_loss(enc, chunk, tau)? * chunk.len() as f64;
            count += chunk.len();
        }
        Ok(total / count.max(1) as f64)
    };
    let (initial_loss, epoch_losses) = run_sgd(enc, &pairs, cfg, 2, full_loss, |e, b| {
        infonce_loss_and_grad(e, b, tau)
    })?;
    Ok(TrainReport {
        paradigm: Paradigm::Conv,
        epoch_losses,
        initial_loss,
        final_similarity: mean_similarity(enc, &pairs)?,
        examples: pairs.len(),
        skipped,
    })
}

/// Dispatches on `cfg.paradigm`.
pub fn train(
    enc: &mut SessionEncoder,
    conversations: &[Conversation],
    passages: &[Passage],
    qrels: &Qrels,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    match cfg.paradigm {
        Paradigm::Kd => train_kd(enc, conversations, cfg),
        Paradigm::Conv => train_conv(enc, conversations, passages, qrels, cfg),
    }
}
