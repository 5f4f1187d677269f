//! Experiment pipeline: train → encode → invert → retrieve → evaluate → report.
//!
//! Arms:
//!
//! * `session_oracle`: retrieve with the session embedding itself
//! * `convinv`: invert the session embedding, seeded with the configured rewrite
//! * `tx_inversion`: invert without a rewrite seed
//! * `tx_human`: invert seeded with the gold human rewrite
//! * `rewrite_only`: retrieve with the rewrite alone, never looking at the embedding
//!
//! The oracle arm always runs because every other arm is reported as a
//! delta against it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, synth_corpus, Conversation, Passage, Qrels};
use crate::embed::{cosine, Embedder, Embedding, FeatureSpec, HashEmbedder};
use crate::encoder::{train, SessionEncoder, TrainConfig, TrainReport};
use crate::error::{Error, Result};
use crate::invert::{
    build_inversion_index, interpretability_proxy, invert_session, write_inversions,
    CorrectionConfig, InversionIndex, InversionRecord, InversionResult,
};
use crate::retrieval::{
    build_index, evaluate, retrieval_delta, retrieve_all, DenseIndex, MetricsDelta, MetricsReport,
    DEFAULT_REL_THRESHOLD, DEFAULT_TOP_K,
};
use crate::rewrite::{heuristic_rewrite, load_rewrites, RewriteKind, RewriteSource};

pub const DATA_DIR_ENV: &str = "CONVINV_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    SessionOracle,
    Convinv,
    TxInversion,
    TxHuman,
    RewriteOnly,
}

impl Arm {
    pub const ALL: [Arm; 5] = [
        Arm::SessionOracle,
        Arm::Convinv,
        Arm::TxInversion,
        Arm::TxHuman,
        Arm::RewriteOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::SessionOracle => "session_oracle",
            Arm::Convinv => "convinv",
            Arm::TxInversion => "tx_inversion",
            Arm::TxHuman => "tx_human",
            Arm::RewriteOnly => "rewrite_only",
        }
    }

    pub fn inverts(self) -> bool {
        matches!(self, Arm::Convinv | Arm::TxInversion | Arm::TxHuman)
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown arm `{name}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Defaults to the experiment seed.
    #[serde(default)]
    pub seed: Option<u64>,
    pub conversations: usize,
    pub passages: usize,
}

/// Either a generated corpus or a directory of corpus files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub synth: Option<SynthConfig>,
    /// Relative paths resolve against `$CONVINV_DATA_DIR` when it is set.
    pub dir: Option<PathBuf>,
    pub conversations: PathBuf,
    pub passages: PathBuf,
    pub qrels: PathBuf,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            synth: None,
            dir: Some(".".into()),
            conversations: "conversations.jsonl".into(),
            passages: "passages.tsv".into(),
            qrels: "qrels.txt".into(),
        }
    }
}

/// A loaded corpus.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub conversations: Vec<Conversation>,
    pub passages: Vec<Passage>,
    pub qrels: Qrels,
}

pub fn resolve_data_path(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(base) if !base.is_empty() => Path::new(&base).join(path),
        _ => path.to_path_buf(),
    }
}

impl CorpusConfig {
    pub fn load(&self, default_seed: u64) -> Result<Dataset> {
        if let Some(s) = &self.synth {
            let c = synth_corpus(s.seed.unwrap_or(default_seed), s.conversations, s.passages)?;
            return Ok(Dataset {
                conversations: c.conversations,
                passages: c.passages,
                qrels: c.qrels,
            });
        }
        let dir = self
            .dir
            .as_deref()
            .ok_or_else(|| Error::Config("corpus needs either `synth` or `dir`".into()))?;
        let dir = resolve_data_path(dir);
        Ok(Dataset {
            conversations: corpus::load_conversations(&dir.join(&self.conversations))?,
            passages: corpus::load_passages(&dir.join(&self.passages))?,
            qrels: corpus::load_qrels(&dir.join(&self.qrels))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub top_k: usize,
    pub rel_threshold: u32,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            rel_threshold: DEFAULT_REL_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub arms: Vec<Arm>,
    /// Evaluation corpus.
    pub corpus: CorpusConfig,
    /// Corpus the session encoder and the inversion index are built from.
    /// Defaults to the evaluation corpus.
    pub train_corpus: Option<CorpusConfig>,
    pub embedder: FeatureSpec,
    pub train: TrainConfig,
    pub correction: CorrectionConfig,
    pub rewrite: RewriteSource,
    pub retrieval: RetrievalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: "out".into(),
            arms: Arm::ALL.to_vec(),
            corpus: CorpusConfig::default(),
            train_corpus: None,
            embedder: FeatureSpec::default(),
            train: TrainConfig::default(),
            correction: CorrectionConfig::default(),
            rewrite: RewriteSource::default(),
            retrieval: RetrievalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.arms.is_empty() {
            return Err(Error::Config("at least one arm is required".into()));
        }
        self.embedder.validate()?;
        self.train.validate()?;
        self.correction.validate()?;
        self.rewrite.validate()?;
        if self.retrieval.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        Ok(())
    }

    /// Requested arms plus the oracle, in canonical order.
    pub fn effective_arms(&self) -> Vec<Arm> {
        Arm::ALL
            .into_iter()
            .filter(|a| *a == Arm::SessionOracle || self.arms.contains(a))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: Arm,
    pub mrr: f64,
    pub ndcg_at_3: f64,
    pub recall_at_100: f64,
    /// Absolute difference to the session oracle.
    pub delta: MetricsDelta,
    /// Mean cosine between the session embedding and the embedding this arm retrieves with.
    pub similarity: f64,
    /// Token-F1 against gold rewrites; a proxy, not a human judgment.
    pub proxy_f1: Option<f64>,
    /// Mean correction steps, for inverting arms.
    pub mean_steps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub seed: u64,
    pub num_queries: usize,
    pub num_passages: usize,
    pub dim: usize,
    pub top_k: usize,
    pub rel_threshold: u32,
    pub rewrite_source: RewriteKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub generated_at_unix: u64,
    pub timings_secs: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub summary: ReportSummary,
    pub train: TrainReport,
    pub arms: Vec<ArmReport>,
    pub proxy_note: String,
    pub meta: ReportMeta,
}

pub const PROXY_NOTE: &str =
    "proxy_f1 is token-level F1 against gold rewrites, a mechanical proxy for human readability ratings";

impl ExperimentReport {
    pub fn arm(&self, arm: Arm) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.arm == arm)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// JSON without the `meta` block; equal across runs with the same seed.
    pub fn deterministic_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("report serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("meta");
        }
        serde_json::to_string_pretty(&v).expect("value serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Invalid(format!("bad report json: {e}")))
    }
}

/// One evaluation turn with everything the arms need.
struct TurnCase {
    qid: String,
    session: Embedding,
    rewrite: String,
    gold: Option<String>,
}

/// Per-arm outputs before aggregation.
pub struct ArmOutput {
    pub arm: Arm,
    pub run: corpus::RunFile,
    pub metrics: MetricsReport,
    pub inversions: Option<Vec<InversionRecord>>,
    pub report: ArmReport,
}

/// Everything an experiment produced, ready to be written out.
pub struct ExperimentOutput {
    pub report: ExperimentReport,
    pub arms: Vec<ArmOutput>,
    pub encoder: SessionEncoder,
}

fn vocabulary(index: &InversionIndex, passages: &[Passage]) -> Vec<String> {
    let mut words: Vec<String> = index
        .texts()
        .iter()
        .map(String::as_str)
        .chain(passages.iter().map(|p| p.text.as_str()))
        .flat_map(str::split_whitespace)
        .map(str::to_lowercase)
        .collect();
    words.sort_unstable();
    words.dedup();
    words
}

/// Texts the inversion index is built from: the standalone (rewritten)
/// queries of the training corpus, falling back to raw queries.
pub fn inversion_training_texts(conversations: &[Conversation]) -> Vec<String> {
    conversations
        .iter()
        .flat_map(|c| c.turns.iter())
        .map(|t| t.human_rewrite.clone().unwrap_or_else(|| t.query.clone()))
        .collect()
}

fn timed<T>(timings: &mut BTreeMap<String, f64>, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f()?;
    timings.insert(stage.to_string(), start.elapsed().as_secs_f64());
    Ok(out)
}

/// Trains a session encoder on the configured training corpus.
pub fn train_encoder(cfg: &ExperimentConfig, data: &Dataset) -> Result<(SessionEncoder, TrainReport)> {
    let base = HashEmbedder::new(cfg.embedder.clone())?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.seed;
    let mut encoder = SessionEncoder::identity(base, train_cfg.max_session_words);
    let report = train(&mut encoder, &data.conversations, &data.passages, &data.qrels, &train_cfg)?;
    Ok((encoder, report))
}

/// Loads the evaluation corpus and, when configured, a separate training corpus.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Option<Dataset>)> {
    let eval = cfg.corpus.load(cfg.seed)?;
    let train = match &cfg.train_corpus {
        Some(c) => Some(c.load(cfg.seed.wrapping_add(1))?),
        None => None,
    };
    Ok((eval, train))
}

/// Shared state for running arms: encoder, passage index, inversion index
/// and the per-turn session embeddings and rewrites.
pub struct Pipeline {
    cfg: ExperimentConfig,
    eval: Dataset,
    base: HashEmbedder,
    encoder: SessionEncoder,
    index: DenseIndex,
    inv_index: InversionIndex,
    correction: CorrectionConfig,
    cases: Vec<TurnCase>,
}

impl Pipeline {
    /// `train` feeds the inversion index and vocabulary; it falls back to `eval`.
    /// A prebuilt passage index is used as is when given.
    pub fn prepare(
        cfg: &ExperimentConfig,
        eval: Dataset,
        train: Option<&Dataset>,
        encoder: SessionEncoder,
        index: Option<DenseIndex>,
    ) -> Result<Self> {
        cfg.validate()?;
        let base = encoder.base().clone();
        let index = match index {
            Some(ix) => {
                if ix.dim() != base.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: base.dim(),
                        actual: ix.dim(),
                    });
                }
                ix
            }
            None => build_index(&eval.passages, &encoder.passage_encoder(cfg.train.max_passage_words))?,
        };
        let train_convs = &train.unwrap_or(&eval).conversations;
        let inv_index = build_inversion_index(&inversion_training_texts(train_convs), &base)?;
        let mut correction = cfg.correction.clone();
        if correction.vocabulary.is_empty() {
            correction.vocabulary = vocabulary(&inv_index, &eval.passages);
        }

        let external = match (&cfg.rewrite.kind, &cfg.rewrite.path) {
            (RewriteKind::ExternalFile, Some(p)) => Some(load_rewrites(&resolve_data_path(p))?),
            _ => None,
        };
        let mut cases = Vec::new();
        for conv in &eval.conversations {
            for (i, qid) in conv.qids() {
                let turn = &conv.turns[i - 1];
                let session = encoder
                    .encode_session(conv, i)
                    .map_err(|e| Error::stage("encode", qid.clone(), e))?;
                let rewrite = match cfg.rewrite.kind {
                    RewriteKind::Heuristic => heuristic_rewrite(conv, i)?.text,
                    RewriteKind::HumanGold => turn.human_rewrite.clone().ok_or_else(|| {
                        Error::stage("rewrite", qid.clone(), Error::MissingRewrite(qid.clone()))
                    })?,
                    RewriteKind::ExternalFile => external
                        .as_ref()
                        .and_then(|m| m.get(&qid))
                        .cloned()
                        .ok_or_else(|| Error::stage("rewrite", qid.clone(), Error::MissingRewrite(qid.clone())))?,
                };
                cases.push(TurnCase {
                    qid,
                    session,
                    rewrite,
                    gold: turn.human_rewrite.clone(),
                });
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            eval,
            base,
            encoder,
            index,
            inv_index,
            correction,
            cases,
        })
    }

    pub fn encoder(&self) -> &SessionEncoder {
        &self.encoder
    }

    pub fn index(&self) -> &DenseIndex {
        &self.index
    }

    pub fn dataset(&self) -> &Dataset {
        &self.eval
    }

    pub fn num_queries(&self) -> usize {
        self.cases.len()
    }

    /// Inverts every turn's session embedding with the seeding policy of `arm`.
    pub fn invert(&self, arm: Arm, with_trace: bool) -> Result<Vec<(InversionRecord, InversionResult)>> {
        if !arm.inverts() {
            return Err(Error::Invalid(format!("arm `{}` does not invert", arm.name())));
        }
        self.cases
            .par_iter()
            .map(|c| {
                let seed = match arm {
                    Arm::Convinv => Some(c.rewrite.as_str()),
                    Arm::TxHuman => Some(c.gold.as_deref().ok_or_else(|| {
                        Error::stage(arm.name(), c.qid.clone(), Error::MissingRewrite(c.qid.clone()))
                    })?),
                    _ => None,
                };
                let r = invert_session(&c.session, seed, &self.inv_index, &self.correction, &self.base)
                    .map_err(|e| Error::stage(arm.name(), c.qid.clone(), e))?;
                Ok((InversionRecord::new(&c.qid, &r, with_trace), r))
            })
            .collect()
    }

    pub fn run_arm(&self, arm: Arm) -> Result<ArmOutput> {
        let (queries, texts, inversions) = match arm {
            Arm::SessionOracle => (
                self.cases.iter().map(|c| (c.qid.clone(), c.session.clone())).collect::<Vec<_>>(),
                None,
                None,
            ),
            Arm::RewriteOnly => {
                let queries = self
                    .cases
                    .iter()
                    .map(|c| {
                        let e = self
                            .base
                            .embed(&c.rewrite)
                            .map_err(|e| Error::stage(arm.name(), c.qid.clone(), e))?;
                        Ok((c.qid.clone(), e))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let texts: Vec<String> = self.cases.iter().map(|c| c.rewrite.clone()).collect();
                (queries, Some(texts), None)
            }
            Arm::Convinv | Arm::TxInversion | Arm::TxHuman => {
                let results = self.invert(arm, false)?;
                let queries = results
                    .iter()
                    .map(|(rec, r)| Ok((rec.qid.clone(), self.base.embed(&r.text)?)))
                    .collect::<Result<Vec<_>>>()?;
                let (records, results): (Vec<_>, Vec<_>) = results.into_iter().unzip();
                let texts = results.into_iter().map(|r| r.text).collect();
                (queries, Some(texts), Some(records))
            }
        };

        let run = retrieve_all(&self.index, &queries, self.cfg.retrieval.top_k, arm.name())?;
        let metrics = evaluate(&run, &self.eval.qrels, self.cfg.retrieval.rel_threshold)?;
        let sims = self
            .cases
            .iter()
            .zip(&queries)
            .map(|(c, (_, e))| cosine(&c.session, e))
            .collect::<Result<Vec<f64>>>()?;
        let similarity = mean(sims.into_iter()).unwrap_or(0.0);
        let proxy_f1 = match &texts {
            Some(texts) => {
                let f1 = self
                    .cases
                    .iter()
                    .zip(texts)
                    .filter_map(|(c, t)| c.gold.as_deref().map(|g| interpretability_proxy(t, g)))
                    .collect::<Result<Vec<f64>>>()?;
                mean(f1.into_iter())
            }
            None => None,
        };
        let mean_steps = inversions
            .as_ref()
            .and_then(|recs: &Vec<InversionRecord>| mean(recs.iter().map(|r| r.steps as f64)));
        let report = ArmReport {
            arm,
            mrr: metrics.mrr,
            ndcg_at_3: metrics.ndcg_at_3,
            recall_at_100: metrics.recall_at_100,
            delta: MetricsDelta::default(),
            similarity,
            proxy_f1,
            mean_steps,
        };
        Ok(ArmOutput {
            arm,
            run,
            metrics,
            inversions,
            report,
        })
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let mut timings = BTreeMap::new();
    let (eval, train_data) = timed(&mut timings, "load", || load_datasets(cfg))?;
    let (encoder, train_report) = timed(&mut timings, "train", || {
        train_encoder(cfg, train_data.as_ref().unwrap_or(&eval))
    })?;
    let pipeline = timed(&mut timings, "prepare", || {
        Pipeline::prepare(cfg, eval, train_data.as_ref(), encoder, None)
    })?;

    let mut outputs: Vec<ArmOutput> = Vec::new();
    for arm in cfg.effective_arms() {
        let out = timed(&mut timings, arm.name(), || pipeline.run_arm(arm))?;
        outputs.push(out);
    }
    let oracle = outputs[0].metrics.clone();
    for out in &mut outputs {
        out.report.delta = retrieval_delta(&out.metrics, &oracle);
    }

    let report = ExperimentReport {
        summary: ReportSummary {
            seed: cfg.seed,
            num_queries: pipeline.num_queries(),
            num_passages: pipeline.dataset().passages.len(),
            dim: pipeline.base.dim(),
            top_k: cfg.retrieval.top_k,
            rel_threshold: cfg.retrieval.rel_threshold,
            rewrite_source: cfg.rewrite.kind,
        },
        train: train_report,
        arms: outputs.iter().map(|o| o.report.clone()).collect(),
        proxy_note: PROXY_NOTE.to_string(),
        meta: ReportMeta {
            generated_at_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            timings_secs: timings,
        },
    };
    Ok(ExperimentOutput {
        report,
        arms: outputs,
        encoder: pipeline.encoder,
    })
}

/// Writes run files, inversion results, per-arm metrics, the encoder
/// checkpoint and both report renderings under `dir`.
pub fn write_outputs(out: &ExperimentOutput, dir: &Path) -> Result<()> {
    for sub in ["runs", "inversions", "metrics"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for arm in &out.arms {
        corpus::write_run(&arm.run, &dir.join("runs").join(format!("{}.trec", arm.arm.name())))?;
        if let Some(recs) = &arm.inversions {
            write_inversions(recs, &dir.join("inversions").join(format!("{}.jsonl", arm.arm.name())))?;
        }
        let path = dir.join("metrics").join(format!("{}.json", arm.arm.name()));
        let json = serde_json::to_string_pretty(&arm.metrics).expect("metrics serialize") + "\n";
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    }
    out.encoder.save_checkpoint(&dir.join("encoder.cvwt"))?;
    let (text, json) = report_tables(&out.report);
    let write = |name: &str, contents: &str| {
        let p = dir.join(name);
        std::fs::write(&p, contents).map_err(|e| Error::io(&p, e))
    };
    write("report.json", &json)?;
    write("report.txt", &text)
}

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

/// Renders the report as a fixed-width table with parenthesized deltas
/// against the session oracle. The JSON is returned alongside; the text is
/// derived from the same values.
pub fn report_tables(report: &ExperimentReport) -> (String, String) {
    let mut t = String::new();
    let s = &report.summary;
    writeln!(
        t,
        "queries={} passages={} dim={} top_k={} rel_threshold={} seed={}",
        s.num_queries, s.num_passages, s.dim, s.top_k, s.rel_threshold, s.seed
    )
    .unwrap();
    writeln!(
        t,
        "{:<15} {:>17} {:>17} {:>17} {:>10} {:>10} {:>8}",
        "arm", "MRR", "NDCG@3", "R@100", "similarity", "proxy-F1*", "steps"
    )
    .unwrap();
    for a in &report.arms {
        let cell = |v: f64, d: f64| format!("{} ({})", fmt4(v), fmt4(d));
        writeln!(
            t,
            "{:<15} {:>17} {:>17} {:>17} {:>10} {:>10} {:>8}",
            a.arm.name(),
            cell(a.mrr, a.delta.mrr),
            cell(a.ndcg_at_3, a.delta.ndcg_at_3),
            cell(a.recall_at_100, a.delta.recall_at_100),
            fmt4(a.similarity),
            a.proxy_f1.map_or("-".to_string(), fmt4),
            a.mean_steps.map_or("-".to_string(), |v| format!("{v:.2}")),
        )
        .unwrap();
    }
    writeln!(t, "(parenthesized: absolute difference to session_oracle)").unwrap();
    writeln!(t, "* {PROXY_NOTE}").unwrap();
    (t, report.to_json())
}
