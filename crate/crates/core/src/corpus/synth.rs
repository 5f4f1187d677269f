//! Templated desk-scale corpus with coreference.
//!
//! Each conversation is about one two-word entity ("throat cancer"). Later
//! turns either refer to it with a pronoun ("what is its prognosis") or drop
//! it entirely ("what about the screening"). Gold rewrites substitute the
//! entity for the pronoun, or append "in the context of <entity>" to an
//! elliptical turn. Every turn is judged against at least one passage that
//! contains the content words of its gold rewrite.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    conversations_to_jsonl, passages_to_tsv, qid, Conversation, Passage, Qrels, Turn,
};
use crate::error::{Error, Result};

struct Domain {
    modifiers: &'static [&'static str],
    heads: &'static [&'static str],
    plural: bool,
    aspects: &'static [&'static str],
    filler: &'static [&'static str],
}

const DOMAINS: &[Domain] = &[
    Domain {
        modifiers: &[
            "throat", "lung", "skin", "bone", "liver", "kidney", "breast", "blood", "brain",
            "stomach", "colon", "thyroid",
        ],
        heads: &["cancer", "infection", "disease"],
        plural: false,
        aspects: &[
            "symptoms", "causes", "treatment", "diagnosis", "prevention", "prognosis", "risks",
            "stages", "screening", "medication",
        ],
        filler: &[
            "patients", "doctors", "clinical", "tissue", "cells", "therapy", "hospital",
            "chronic", "surgery", "tumor", "immune", "chemotherapy", "biopsy", "recovery",
            "genetic", "inflammation",
        ],
    },
    Domain {
        modifiers: &[
            "electric", "hybrid", "solar", "diesel", "hydrogen", "autonomous", "vintage",
            "compact",
        ],
        heads: &["cars", "trucks", "buses", "motorcycles"],
        plural: true,
        aspects: &[
            "cost", "range", "efficiency", "maintenance", "safety", "emissions", "insurance",
            "charging", "resale", "performance",
        ],
        filler: &[
            "battery", "engine", "fuel", "drivers", "highway", "motor", "speed", "miles",
            "manufacturers", "wheels", "energy", "power", "design", "market",
        ],
    },
    Domain {
        modifiers: &[
            "roman", "greek", "ottoman", "mongol", "persian", "aztec", "mayan", "byzantine",
            "viking", "egyptian",
        ],
        heads: &["empire", "army", "architecture"],
        plural: false,
        aspects: &[
            "origins", "decline", "economy", "religion", "leaders", "wars", "culture",
            "legacy", "territory", "language",
        ],
        filler: &[
            "ancient", "century", "emperor", "battle", "city", "kingdom", "dynasty", "trade",
            "temples", "conquest", "rulers", "population", "capital", "monuments",
        ],
    },
    Domain {
        modifiers: &[
            "arctic", "red", "grey", "polar", "snow", "desert", "mountain", "swamp",
        ],
        heads: &["foxes", "wolves", "owls", "hares"],
        plural: true,
        aspects: &[
            "habitat", "diet", "lifespan", "predators", "breeding", "behavior", "migration",
            "numbers", "size", "conservation",
        ],
        filler: &[
            "wild", "forest", "hunting", "prey", "winter", "fur", "den", "species", "cubs",
            "nocturnal", "pack", "tundra", "nest", "feathers",
        ],
    },
    Domain {
        modifiers: &[
            "sourdough", "rye", "corn", "rice", "wheat", "barley", "oat", "spelt",
        ],
        heads: &["bread", "flour", "noodles"],
        plural: false,
        aspects: &[
            "recipe", "nutrition", "calories", "storage", "fermentation", "texture",
            "ingredients", "flavor", "history", "gluten",
        ],
        filler: &[
            "bake", "oven", "dough", "yeast", "kitchen", "grain", "mill", "water", "salt",
            "knead", "crust", "meal", "cooking", "starter",
        ],
    },
    Domain {
        modifiers: &[
            "olympic", "college", "professional", "amateur", "youth", "indoor", "beach",
            "wheelchair",
        ],
        heads: &["volleyball", "swimming", "tennis", "hockey", "cycling"],
        plural: false,
        aspects: &[
            "rules", "equipment", "training", "injuries", "scoring", "tournaments",
            "coaching", "popularity", "techniques", "fitness",
        ],
        filler: &[
            "players", "team", "match", "season", "league", "court", "coach", "athletes",
            "championship", "stadium", "fans", "game", "referee", "medal",
        ],
    },
];

const OPENERS: &[&str] = &["what is {e}", "tell me about {e}"];
const SINGULAR: &[(&str, &str)] = &[
    ("what are the {a} of it", "it"),
    ("what is its {a}", "its"),
    ("tell me about its {a}", "its"),
];
const PLURAL: &[(&str, &str)] = &[
    ("what are the {a} of them", "them"),
    ("what is their {a}", "their"),
    ("tell me about their {a}", "their"),
];
const ELLIPSIS: &str = "what about the {a}";
const RESPONSE: &str = "here is what i found about {e}";
const OVERVIEW: &str = "overview";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub conversations: Vec<Conversation>,
    pub passages: Vec<Passage>,
    pub qrels: Qrels,
    /// Gold rewrites keyed by query id.
    pub rewrites: BTreeMap<String, String>,
}

impl SynthCorpus {
    /// Writes `conversations.jsonl`, `passages.tsv`, `qrels.txt` and
    /// `rewrites.tsv` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        super::write_conversations(&self.conversations, &dir.join("conversations.jsonl"))?;
        super::write_passages(&self.passages, &dir.join("passages.tsv"))?;
        super::write_qrels(&self.qrels, &dir.join("qrels.txt"))?;
        crate::rewrite::write_rewrites(&self.rewrites, &dir.join("rewrites.tsv"))
    }

    /// All four files concatenated; used for byte-level comparisons.
    pub fn serialized(&self) -> String {
        format!(
            "{}{}{}{}",
            conversations_to_jsonl(&self.conversations),
            passages_to_tsv(&self.passages),
            self.qrels.to_trec_string(),
            crate::rewrite::rewrites_to_tsv(&self.rewrites)
        )
    }
}

#[derive(Clone, Copy)]
struct Entity {
    domain: usize,
    modifier: &'static str,
    head: &'static str,
}

impl Entity {
    fn text(&self) -> String {
        format!("{} {}", self.modifier, self.head)
    }

    fn domain(&self) -> &'static Domain {
        &DOMAINS[self.domain]
    }
}

fn all_entities() -> Vec<Entity> {
    let mut out = Vec::new();
    for (d, domain) in DOMAINS.iter().enumerate() {
        for &modifier in domain.modifiers {
            for &head in domain.heads {
                out.push(Entity {
                    domain: d,
                    modifier,
                    head,
                });
            }
        }
    }
    out
}

fn fill(template: &str, entity: &str, aspect: &str) -> String {
    template.replace("{e}", entity).replace("{a}", aspect)
}

/// A passage topic: an entity and either an aspect or [`OVERVIEW`].
type Key = (String, &'static str);

fn passage_text(rng: &mut ChaCha8Rng, entity: &Entity, aspect: &str, lead: bool) -> String {
    let domain = entity.domain();
    let n = rng.gen_range(10..=18);
    let mut words: Vec<&str> = (0..n)
        .map(|_| *domain.filler.choose(rng).unwrap())
        .collect();
    let topic = if aspect == OVERVIEW {
        entity.text()
    } else if lead {
        format!("{} {}", entity.text(), aspect)
    } else {
        format!("{} of {}", aspect, entity.text())
    };
    let at = if lead { 0 } else { rng.gen_range(0..=words.len()) };
    words.insert(at, &topic);
    words.join(" ")
}

/// Generates a deterministic corpus from `seed`.
pub fn synth_corpus(seed: u64, n_conversations: usize, n_passages: usize) -> Result<SynthCorpus> {
    if n_conversations == 0 || n_passages == 0 {
        return Err(Error::Invalid(
            "synthetic corpus needs at least one conversation and one passage".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entities = all_entities();

    let mut conversations = Vec::with_capacity(n_conversations);
    let mut rewrites = BTreeMap::new();
    // Judged topics in first-seen order, with the query ids that need them.
    let mut keys: Vec<(Key, Entity)> = Vec::new();
    let mut key_qids: BTreeMap<Key, Vec<String>> = BTreeMap::new();

    for c in 0..n_conversations {
        let conv_id = format!("c{c:04}");
        let entity = *entities.choose(&mut rng).unwrap();
        let e = entity.text();
        let n_turns = rng.gen_range(3..=5);
        let mut aspects: Vec<&'static str> = entity.domain().aspects.to_vec();
        aspects.shuffle(&mut rng);

        let mut turns = Vec::with_capacity(n_turns);
        for t in 0..n_turns {
            let turn_id = (t + 1).to_string();
            let (query, rewrite, aspect) = if t == 0 {
                let q = fill(OPENERS.choose(&mut rng).unwrap(), &e, "");
                (q.clone(), q, OVERVIEW)
            } else {
                let aspect = aspects[t - 1];
                if rng.gen_bool(0.25) {
                    let q = fill(ELLIPSIS, &e, aspect);
                    let r = format!("{q} in the context of {e}");
                    (q, r, aspect)
                } else {
                    let table = if entity.domain().plural { PLURAL } else { SINGULAR };
                    let (template, pronoun) = table.choose(&mut rng).unwrap();
                    let q = fill(template, &e, aspect);
                    let r = q
                        .split(' ')
                        .map(|w| if w == *pronoun { e.as_str() } else { w })
                        .collect::<Vec<_>>()
                        .join(" ");
                    (q, r, aspect)
                }
            };
            let response = (t + 1 < n_turns && rng.gen_bool(0.4)).then(|| fill(RESPONSE, &e, ""));
            let id = qid(&conv_id, &turn_id);
            rewrites.insert(id.clone(), rewrite.clone());
            let key: Key = (e.clone(), aspect);
            if !key_qids.contains_key(&key) {
                keys.push((key.clone(), entity));
            }
            key_qids.entry(key).or_default().push(id);
            turns.push(Turn {
                turn_id,
                query,
                response,
                human_rewrite: Some(rewrite),
            });
        }
        conversations.push(Conversation { conv_id, turns });
    }

    let mut passages: Vec<Passage> = Vec::with_capacity(n_passages);
    let mut qrels = Qrels::new();
    let doc_id = |i: usize| format!("d{i:05}");

    // Primary relevant passages; share passages when there are fewer slots than topics.
    let primary = keys.len().min(n_passages);
    let mut texts: Vec<Vec<String>> = vec![Vec::new(); primary];
    for (i, ((_, aspect), entity)) in keys.iter().enumerate() {
        texts[i % primary].push(passage_text(&mut rng, entity, aspect, true));
    }
    for (i, parts) in texts.into_iter().enumerate() {
        passages.push(Passage {
            doc_id: doc_id(i),
            text: parts.join(" "),
        });
    }
    for (i, (key, _)) in keys.iter().enumerate() {
        for q in &key_qids[key] {
            qrels.insert(q, &doc_id(i % primary), 2)?;
        }
    }

    // Secondary relevant passages, then distractors on unjudged topics.
    let judged: HashSet<Key> = keys.iter().map(|(k, _)| k.clone()).collect();
    let mut next_secondary = 0;
    let mut rejected = 0;
    while passages.len() < n_passages {
        let i = passages.len();
        if next_secondary < keys.len() && rng.gen_bool(0.5) {
            let ((_, aspect), entity) = &keys[next_secondary];
            next_secondary += 1;
            let text = passage_text(&mut rng, entity, aspect, false);
            for q in &key_qids[&keys[next_secondary - 1].0] {
                qrels.insert(q, &doc_id(i), 1)?;
            }
            passages.push(Passage {
                doc_id: doc_id(i),
                text,
            });
            continue;
        }
        let entity = *entities.choose(&mut rng).unwrap();
        let aspect = *entity.domain().aspects.choose(&mut rng).unwrap();
        let text = if !judged.contains(&(entity.text(), aspect)) {
            let lead = rng.gen_bool(0.5);
            passage_text(&mut rng, &entity, aspect, lead)
        } else if rejected >= 64 {
            let domain = entity.domain();
            (0..12)
                .map(|_| *domain.filler.choose(&mut rng).unwrap())
                .collect::<Vec<_>>()
                .join(" ")
        } else {
            rejected += 1;
            continue;
        };
        rejected = 0;
        passages.push(Passage {
            doc_id: doc_id(i),
            text,
        });
    }

    Ok(SynthCorpus {
        conversations,
        passages,
        qrels,
        rewrites,
    })
}
