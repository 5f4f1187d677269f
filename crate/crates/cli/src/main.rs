use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use convinv::corpus::{self, synth_corpus, Passage};
use convinv::embed::{write_matrix, Embedder, HashEmbedder};
use convinv::encoder::{Paradigm, SessionEncoder};
use convinv::harness::{
    load_datasets, report_tables, resolve_data_path, run_experiment, train_encoder, write_outputs, Arm,
    ExperimentConfig, ExperimentReport, Pipeline,
};
use convinv::invert::write_inversions;
use convinv::retrieval::{build_index, evaluate, DenseIndex};
use convinv::Error;

#[derive(Debug, Parser)]
#[command(name = "convinv", version, about = "Interpret conversational session embeddings by inverting them to text")]
struct Cli {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        conversations: usize,
        #[arg(long, default_value_t = 2000)]
        passages: usize,
    },
    /// Embed `id<TAB>text` lines with the query embedder, or with a session encoder.
    Embed {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Treat each text as a session text and encode it with this checkpoint.
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Train a session encoder and write a checkpoint.
    Train {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_paradigm)]
        paradigm: Option<Paradigm>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Build the dense passage index.
    Index {
        #[arg(long)]
        out: PathBuf,
    },
    /// Invert session embeddings to text.
    Invert {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "convinv", value_parser = parse_arm)]
        arm: Arm,
        /// Session encoder checkpoint; trained from the config when omitted.
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Include the per-step hypothesis trace.
        #[arg(long)]
        trace: bool,
    },
    /// Retrieve passages for every turn with one arm and write a TREC run.
    Retrieve {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "session_oracle", value_parser = parse_arm)]
        arm: Arm,
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Prebuilt passage index.
        #[arg(long)]
        index: Option<PathBuf>,
    },
    /// Score a TREC run against qrels.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Defaults to the qrels of the configured corpus.
        #[arg(long)]
        qrels: Option<PathBuf>,
        #[arg(long)]
        rel_threshold: Option<u32>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full pipeline for the configured arms.
    Experiment {
        /// Comma-separated arm names; overrides the config.
        #[arg(long, value_delimiter = ',', value_parser = parse_arm)]
        arms: Option<Vec<Arm>>,
        /// Overrides the config output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a JSON report as a text table.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_arm(s: &str) -> Result<Arm, String> {
    Arm::parse(s).map_err(|e| e.to_string())
}

fn parse_paradigm(s: &str) -> Result<Paradigm, String> {
    match s {
        "kd" => Ok(Paradigm::Kd),
        "conv" => Ok(Paradigm::Conv),
        other => Err(format!("unknown paradigm `{other}` (expected kd or conv)")),
    }
}

/// Usage problems exit with 1, everything the data caused with 2.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::Stage { source, .. } => exit_code(source),
        _ => 2,
    }
}

fn load_config(cli: &Cli) -> convinv::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) if !path.is_file() => {
            return Err(Error::Config(format!("config file `{}` not found", path.display())));
        }
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write_file(path: &Path, contents: &str) -> convinv::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serializes") + "\n"
}

fn pipeline(cfg: &ExperimentConfig, encoder: Option<&Path>, index: Option<&Path>) -> convinv::Result<Pipeline> {
    let (eval, train) = load_datasets(cfg)?;
    let encoder = match encoder {
        Some(p) => SessionEncoder::load_checkpoint(p, cfg.train.max_session_words)?,
        None => train_encoder(cfg, train.as_ref().unwrap_or(&eval))?.0,
    };
    let index = index.map(DenseIndex::load).transpose()?;
    Pipeline::prepare(cfg, eval, train.as_ref(), encoder, index)
}

fn run(cli: &Cli) -> convinv::Result<String> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::Synth {
            out,
            conversations,
            passages,
        } => {
            let c = synth_corpus(cfg.seed, *conversations, *passages)?;
            c.write_to(out)?;
            let turns: usize = c.conversations.iter().map(|c| c.turns.len()).sum();
            Ok(format!(
                "wrote {} conversations ({turns} turns) and {} passages to {}\n",
                c.conversations.len(),
                c.passages.len(),
                out.display()
            ))
        }
        Command::Embed { input, out, encoder } => {
            let items: Vec<Passage> = corpus::load_passages(input)?;
            let rows = match encoder {
                Some(p) => {
                    let enc = SessionEncoder::load_checkpoint(p, cfg.train.max_session_words)?;
                    items.iter().map(|it| enc.encode_text(&it.text)).collect::<convinv::Result<Vec<_>>>()?
                }
                None => {
                    let base = HashEmbedder::new(cfg.embedder.clone())?;
                    items.iter().map(|it| base.embed(&it.text)).collect::<convinv::Result<Vec<_>>>()?
                }
            };
            let ids: Vec<String> = items.iter().map(|it| it.doc_id.clone()).collect();
            write_matrix(out, &ids, &rows)?;
            Ok(format!("embedded {} texts into {}\n", ids.len(), out.display()))
        }
        Command::Train { out, paradigm, epochs } => {
            if let Some(p) = paradigm {
                cfg.train.paradigm = *p;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            let (eval, train) = load_datasets(&cfg)?;
            let (encoder, report) = train_encoder(&cfg, train.as_ref().unwrap_or(&eval))?;
            encoder.save_checkpoint(out)?;
            Ok(to_json(&report))
        }
        Command::Index { out } => {
            let (eval, _) = load_datasets(&cfg)?;
            let base = HashEmbedder::new(cfg.embedder.clone())?;
            let enc = SessionEncoder::identity(base, cfg.train.max_session_words);
            let index = build_index(&eval.passages, &enc.passage_encoder(cfg.train.max_passage_words))?;
            index.save(out)?;
            Ok(format!("indexed {} passages into {}\n", index.len(), out.display()))
        }
        Command::Invert {
            out,
            arm,
            encoder,
            trace,
        } => {
            let p = pipeline(&cfg, encoder.as_deref(), None)?;
            let records: Vec<_> = p.invert(*arm, *trace)?.into_iter().map(|(rec, _)| rec).collect();
            write_inversions(&records, out)?;
            Ok(format!("inverted {} turns into {}\n", records.len(), out.display()))
        }
        Command::Retrieve {
            out,
            arm,
            encoder,
            index,
        } => {
            let p = pipeline(&cfg, encoder.as_deref(), index.as_deref())?;
            let result = p.run_arm(*arm)?;
            corpus::write_run(&result.run, out)?;
            Ok(format!("wrote {} rankings to {}\n", result.run.len(), out.display()))
        }
        Command::Eval {
            run,
            qrels,
            rel_threshold,
            out,
        } => {
            let run_file = corpus::load_run(run)?;
            let qrels = match qrels {
                Some(p) => corpus::load_qrels(p)?,
                None => {
                    let dir = cfg.corpus.dir.clone().unwrap_or_default();
                    corpus::load_qrels(&resolve_data_path(&dir).join(&cfg.corpus.qrels))?
                }
            };
            let thr = rel_threshold.unwrap_or(cfg.retrieval.rel_threshold);
            let metrics = evaluate(&run_file, &qrels, thr)?;
            let json = to_json(&metrics);
            match out {
                Some(p) => {
                    write_file(p, &json)?;
                    Ok(format!(
                        "mrr={:.4} ndcg@3={:.4} recall@100={:.4}\n",
                        metrics.mrr, metrics.ndcg_at_3, metrics.recall_at_100
                    ))
                }
                None => Ok(json),
            }
        }
        Command::Experiment { arms, out } => {
            if let Some(a) = arms {
                cfg.arms = a.clone();
            }
            if let Some(o) = out {
                cfg.output_dir = o.clone();
            }
            let output = run_experiment(&cfg)?;
            write_outputs(&output, &cfg.output_dir)?;
            Ok(report_tables(&output.report).0)
        }
        Command::Report { input, out } => {
            let text = std::fs::read_to_string(input).map_err(|e| Error::Io {
                path: input.clone(),
                source: e,
            })?;
            let report = ExperimentReport::from_json(&text)?;
            let table = report_tables(&report).0;
            match out {
                Some(p) => {
                    write_file(p, &table)?;
                    Ok(String::new())
                }
                None => Ok(table),
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(out) => {
            let _ = std::io::stdout().write_all(out.as_bytes());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
