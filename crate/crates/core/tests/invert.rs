use convinv::embed::{cosine, Embedder, Embedding, FeatureSpec, HashEmbedder};
use convinv::harness::{ExperimentConfig, Pipeline, load_datasets, train_encoder, Arm};
use convinv::invert::{build_inversion_index, correct, initial_inversion, CorrectionConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOCAB: [&str; 8] = ["throat", "cancer", "wolves", "bread", "is", "what", "rising", "cup"];

fn embedder() -> HashEmbedder {
    HashEmbedder::new(FeatureSpec::default()).unwrap()
}

/// Every phrase of 1 to 3 words over the vocabulary.
fn all_phrases() -> Vec<String> {
    let mut out: Vec<Vec<&str>> = VOCAB.iter().map(|w| vec![*w]).collect();
    let mut frontier = out.clone();
    for _ in 0..2 {
        frontier = frontier
            .iter()
            .flat_map(|p| VOCAB.iter().map(move |w| [p.clone(), vec![*w]].concat()))
            .collect();
        out.extend(frontier.iter().cloned());
    }
    out.into_iter().map(|p| p.join(" ")).collect()
}

fn oracle_cfg() -> CorrectionConfig {
    CorrectionConfig {
        beam_width: 64,
        max_steps: 10,
        candidates_per_hypothesis: 8,
        max_words: 3,
        vocabulary: VOCAB.iter().map(|w| w.to_string()).collect(),
        ..CorrectionConfig::default()
    }
}

#[test]
fn beam_search_matches_exhaustive_optimum() {
    let e = embedder();
    let phrases = all_phrases();
    assert_eq!(phrases.len(), 8 + 64 + 512);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cfg = oracle_cfg();
    for _ in 0..25 {
        let hidden = &phrases[rng.gen_range(0..phrases.len())];
        let seed = VOCAB[rng.gen_range(0..VOCAB.len())];
        let target = e.embed(hidden).unwrap();
        let optimum = phrases
            .iter()
            .filter_map(|p| e.embed(p).ok())
            .map(|v| cosine(&v, &target).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        let r = correct(&target, seed, &cfg, &e).unwrap();
        assert_eq!(r.final_score, optimum, "hidden `{hidden}` seed `{seed}` got `{}`", r.text);
    }
}

#[test]
fn hypotheses_are_never_stale() {
    let e = embedder();
    let target = e.embed("what are the symptoms of throat cancer [SEP] is it treatable").unwrap();
    let cfg = CorrectionConfig {
        vocabulary: "what are the symptoms of throat cancer is it treatable common"
            .split(' ')
            .map(String::from)
            .collect(),
        ..CorrectionConfig::default()
    };
    let r = correct(&target, "is it common", &cfg, &e).unwrap();
    assert!(r.trace.len() > 1);
    for h in &r.trace {
        assert_eq!(h.embedding, e.embed(&h.text()).unwrap());
        assert_eq!(h.score, cosine(&h.embedding, &target).unwrap());
    }
    assert_eq!(r.final_score, cosine(&e.embed(&r.text).unwrap(), &target).unwrap());
}

#[test]
fn member_target_inverts_to_cosine_one() {
    let e = embedder();
    let texts = ["what is throat cancer", "tell me about wolves", "how is bread made"];
    let index = build_inversion_index(&texts, &e).unwrap();
    let target = e.embed("tell me about wolves").unwrap();
    assert_eq!(initial_inversion(&index, &target).unwrap(), "tell me about wolves");
    let cfg = CorrectionConfig {
        vocabulary: vec!["wolves".into()],
        ..CorrectionConfig::default()
    };
    let r = convinv::invert::invert_session(&target, None, &index, &cfg, &e).unwrap();
    assert!(!r.seeded);
    assert!((r.final_score - 1.0).abs() < 1e-12);
}

#[test]
fn seeded_inversion_needs_no_more_steps() {
    let cfg = ExperimentConfig::from_toml(
        r#"
        [corpus.synth]
        conversations = 26
        passages = 300
        [train_corpus.synth]
        seed = 77
        conversations = 60
        passages = 300
        [train]
        epochs = 5
        "#,
    )
    .unwrap();
    let (eval, train) = load_datasets(&cfg).unwrap();
    let (encoder, _) = train_encoder(&cfg, train.as_ref().unwrap()).unwrap();
    let p = Pipeline::prepare(&cfg, eval, train.as_ref(), encoder, None).unwrap();
    let median = |arm| {
        let mut steps: Vec<usize> = p.invert(arm, false).unwrap().iter().take(100).map(|(r, _)| r.steps).collect();
        assert_eq!(steps.len(), 100);
        steps.sort_unstable();
        steps[50]
    };
    assert!(median(Arm::Convinv) <= median(Arm::TxInversion));
}

fn target_and_seed() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (
        prop::collection::vec(0..VOCAB.len(), 1..6),
        prop::collection::vec(0..VOCAB.len(), 1..4),
    )
}

fn phrase(ix: &[usize]) -> String {
    ix.iter().map(|&i| VOCAB[i]).collect::<Vec<_>>().join(" ")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn never_below_seed_and_trace_monotone((t, s) in target_and_seed(), noise in prop::collection::vec(-0.2f64..0.2, 256)) {
        let e = embedder();
        let base = e.embed(&phrase(&t)).unwrap();
        let target = Embedding::normalized(base.values().iter().zip(&noise).map(|(a, b)| a + b * 0.3).collect()).unwrap();
        let cfg = CorrectionConfig {
            beam_width: 4,
            max_steps: 6,
            vocabulary: VOCAB.iter().map(|w| w.to_string()).collect(),
            ..CorrectionConfig::default()
        };
        let seed = phrase(&s);
        let r = correct(&target, &seed, &cfg, &e).unwrap();
        let seed_score = cosine(&e.embed(&seed).unwrap(), &target).unwrap();
        prop_assert_eq!(r.trace[0].score, seed_score);
        prop_assert!(r.final_score >= seed_score);
        prop_assert!(r.trace.windows(2).all(|w| w[1].score >= w[0].score));
        let again = correct(&target, &seed, &cfg, &e).unwrap();
        prop_assert_eq!(again, r);
    }
}
