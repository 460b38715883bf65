use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xdistil_core::synthetic::{SyntheticSpec, SyntheticTask};
use xdistil_core::trainer::{fine_tune, FineTuneOptions};
use xdistil_core::transfer::ner::{encode_ner, evaluate_ner, macro_f1, read_ner, span_score, SpanScore, TagSet};
use xdistil_core::transfer::{
    build_eval_matrix, build_transfer_pairs, knn, read_pairs, select_best_source, swap_embeddings, Corpus,
    Embedder, EvalMatrix, HashedEmbedder, SentencePairBank,
};
use xdistil_core::transformer::{names, AttentionScaling, HeadKind, ModelConfig, TransformerModel};
use xdistil_core::{Error, Execution, Tensor};

fn names_of(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn model(vocab: usize, classes: usize, head: HeadKind) -> ModelConfig {
    ModelConfig {
        num_layers: 1,
        hidden_dim: 8,
        num_heads: 2,
        ff_dim: 16,
        max_seq_len: 32,
        vocab_size: vocab,
        num_classes: classes,
        attention_scaling: AttentionScaling::SqrtHeadDim,
        head,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn selection_survives_monotone_rescaling(
        scores in proptest::collection::vec(proptest::collection::vec(0.0f64..100.0, 4), 1..6),
        scale in 0.1f64..10.0,
        shift in -50.0f64..50.0,
    ) {
        let m = EvalMatrix::new(names_of("s", scores.len()), names_of("t", 4), scores.clone()).unwrap();
        let affine: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|v| v * scale + shift).collect()).collect();
        let m2 = EvalMatrix::new(names_of("s", scores.len()), names_of("t", 4), affine).unwrap();
        let (a, b) = (select_best_source(&m), select_best_source(&m2));
        // Row means can coincide only up to rounding, so compare against the oracle with a margin.
        let means: Vec<f64> = scores.iter().map(|r| r.iter().sum::<f64>() / 4.0).collect();
        let top = means.iter().cloned().fold(f64::MIN, f64::max);
        let winners: Vec<usize> = (0..means.len()).filter(|&i| top - means[i] < 1e-9).collect();
        if winners.len() == 1 {
            prop_assert_eq!(&a.best, &format!("s{}", winners[0]));
            prop_assert_eq!(&a.best, &b.best);
        }
        prop_assert!((a.average - top).abs() < 1e-9);
        prop_assert_eq!(a.averages.len(), scores.len());
    }

    #[test]
    fn knn_agrees_with_brute_force(seed in 0u64..10_000, n in 1usize..40, k_frac in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 5;
        let mut vectors: Vec<f64> = (0..n * dim).map(|_| rng.random::<f64>() - 0.5 + 1e-3).collect();
        for v in vectors.chunks_mut(dim) {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
        }
        let corpus = Corpus::from_vectors(names_of("x", n), dim, vectors).unwrap();
        let q: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
        let k = ((n as f64) * k_frac) as usize;
        let got = knn(&q, &corpus, k).unwrap();
        let mut oracle: Vec<(f64, usize)> = (0..n)
            .map(|i| (corpus.vector(i).iter().zip(&q).map(|(a, b)| a * b).sum(), i))
            .collect();
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let want: Vec<usize> = oracle[..k].iter().map(|p| p.1).collect();
        prop_assert_eq!(got.iter().map(|n| n.index).collect::<Vec<_>>(), want);
    }
}

#[test]
fn a_single_source_is_selected_and_ties_go_first() {
    let one = EvalMatrix::new(vec!["only".into()], names_of("t", 2), vec![vec![1.0, 2.0]]).unwrap();
    let s = select_best_source(&one);
    assert_eq!((s.best.as_str(), s.average), ("only", 1.5));
    let tied = EvalMatrix::new(names_of("s", 3), names_of("t", 2), vec![vec![1.0, 3.0], vec![3.0, 1.0], vec![0.0, 0.0]]).unwrap();
    assert_eq!(select_best_source(&tied).best, "s0");
}

#[test]
fn malformed_matrices_are_rejected() {
    assert!(EvalMatrix::new(names_of("s", 2), names_of("t", 2), vec![vec![1.0, 2.0]]).is_err());
    assert!(EvalMatrix::new(names_of("s", 1), names_of("t", 2), vec![vec![1.0]]).is_err());
    assert!(EvalMatrix::from_csv("source,a\nx,notanumber\n".as_bytes()).is_err());
}

fn sentences(n: usize) -> Vec<String> {
    let task = SyntheticTask::new(SyntheticSpec::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    while out.len() < n {
        let s = task.sentence(rng.random_range(0..3), &mut rng);
        if seen.insert(s.clone()) {
            out.push(s);
        }
    }
    out
}

#[test]
fn augmented_pairs_match_exhaustive_enumeration() {
    let corpus_text = sentences(120);
    let embedder = HashedEmbedder::new(32).unwrap();
    let corpus = Corpus::build(corpus_text.clone(), &embedder, Execution::default()).unwrap();
    let pairs: Vec<(String, String)> = (0..6).map(|i| (corpus_text[i].clone(), corpus_text[i + 50].clone())).collect();
    let bank = SentencePairBank {
        pairs: pairs.clone(),
        corpus,
        embedder: &embedder,
    };
    for k in [1, 2, 5] {
        let got = build_transfer_pairs(&bank, k, Execution::default()).unwrap();
        assert!(got.len() <= pairs.len() * k * k);
        // Oracle: score every corpus sentence directly and take the top k.
        let top = |s: &str| -> Vec<String> {
            let q = embedder.embed(s).unwrap();
            let mut all: Vec<(f64, usize)> = corpus_text
                .iter()
                .enumerate()
                .map(|(i, c)| (embedder.embed(c).unwrap().iter().zip(&q).map(|(a, b)| a * b).sum(), i))
                .collect();
            all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            all[..k].iter().map(|p| corpus_text[p.1].clone()).collect()
        };
        let mut want = Vec::new();
        for (a, b) in &pairs {
            for l in top(a) {
                for r in top(b) {
                    if !want.contains(&(l.clone(), r.clone())) {
                        want.push((l.clone(), r));
                    }
                }
            }
        }
        assert_eq!(got, want, "k = {k}");
        // Bag-of-words vectors: the nearest neighbour of a query is the query
        // itself or one of its word permutations.
        if k == 1 {
            let sorted = |s: &str| {
                let mut w: Vec<&str> = s.split(' ').collect();
                w.sort();
                w.join(" ")
            };
            for ((a, b), (x, y)) in got.iter().zip(&pairs) {
                assert_eq!((sorted(a), sorted(b)), (sorted(x), sorted(y)));
            }
        }
    }
    assert!(build_transfer_pairs(&bank, 121, Execution::default()).is_err());
}

#[test]
fn swap_replaces_only_word_embeddings() {
    let task = SyntheticTask::new(SyntheticSpec::default()).unwrap();
    let v = task.vocab().len();
    let student = TransformerModel::<f64>::random(model(v, 3, HeadKind::Sequence), 1).unwrap();
    let before = student.params().hashes();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let table = Tensor::<f64>::from_fn(&[v, 20], |_| rng.random::<f64>() - 0.5);
    let swapped = swap_embeddings(&student, task.vocab(), &table).unwrap();
    assert_eq!(student.params().hashes(), before, "input model must not change");
    assert_eq!(swapped.params().get(names::WORD).unwrap().tensor.shape(), &[v, 8]);
    for ((name, a), (_, b)) in before.iter().zip(swapped.params().hashes()) {
        assert_eq!(name == names::WORD, *a != b, "{name}");
    }

    let short = Tensor::<f64>::zeros(&[v - 1, 20]);
    assert!(matches!(swap_embeddings(&student, task.vocab(), &short), Err(Error::Contract(_))));
    let narrow = Tensor::<f64>::zeros(&[v, 4]);
    assert!(matches!(swap_embeddings(&student, task.vocab(), &narrow), Err(Error::Contract(_))));
}

#[test]
fn eval_matrix_has_one_cell_per_source_target_pair_and_is_reproducible() {
    let task = SyntheticTask::new(SyntheticSpec::default()).unwrap();
    let mut sets = BTreeMap::new();
    sets.insert("three".to_string(), task.labeled(40, 1).unwrap());
    sets.insert("two".to_string(), task.binary(40, 2).unwrap());
    let base = TransformerModel::<f32>::random(model(task.vocab().len(), 3, HeadKind::Sequence), 0).unwrap();
    let opts = FineTuneOptions {
        epochs: 1,
        batch_size: 8,
        validation_fraction: 0.25,
        ..Default::default()
    };
    let sources = vec!["three".to_string(), "two".to_string()];
    let targets = vec!["two".to_string(), "three".to_string(), "two".to_string()];
    let m = build_eval_matrix(&sources, &targets, &base, &sets, &opts).unwrap();
    assert_eq!(m.sources(), sources.as_slice());
    assert_eq!(m.targets(), targets.as_slice());
    assert!(m.scores().iter().all(|r| r.len() == 3 && r.iter().all(|v| (0.0..=100.0).contains(v))));
    assert_eq!(m, build_eval_matrix(&sources, &targets, &base, &sets, &opts).unwrap());
    let missing = vec!["absent".to_string()];
    assert!(matches!(build_eval_matrix(&missing, &targets, &base, &sets, &opts), Err(Error::Data(_))));
}

const NER: &str = "Anna\tB-PER\nlives\tO\nin\tO\nNew\tB-LOC\nYork\tI-LOC\n\nBob\tB-PER\nsmiles\tO\n";

#[test]
fn ner_files_encode_and_score() {
    let sents = read_ner(NER.as_bytes()).unwrap();
    assert_eq!(sents.len(), 2);
    let tags = TagSet::from_sentences(&sents);
    assert_eq!(tags.id("O"), Some(0));
    let vocab = xdistil_core::transformer::Vocab::from_tokens(
        ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "anna", "lives", "in", "new", "york", "bob", "smile", "##s"].iter().copied(),
    )
    .unwrap();
    let enc = encode_ner(&sents, &vocab, &tags, 16).unwrap();
    assert_eq!(enc.word_starts[1], vec![1, 2]);
    let mut m = TransformerModel::<f32>::random(model(vocab.len(), tags.len(), HeadKind::Token), 0).unwrap();
    let opts = FineTuneOptions {
        epochs: 60,
        lr: 1e-2,
        batch_size: 2,
        validation_fraction: 0.0,
        ..Default::default()
    };
    fine_tune(&mut m, &enc.set, &opts, &mut xdistil_core::metrics::NullSink).unwrap();
    let score = evaluate_ner(&m, &sents, &vocab, &tags, Execution::default()).unwrap();
    assert_eq!(score.gold, 3);
    assert_eq!(score.f1(), 1.0, "a model can memorize two sentences: {score:?}");

    let bad = "Anna\tPERSON\n";
    match read_ner(bad.as_bytes()) {
        Err(Error::Parse { offset, .. }) => assert_eq!(offset, 5),
        other => panic!("{other:?}"),
    }
}

#[test]
fn span_scores_follow_exact_match_counting() {
    let gold = vec![vec!["B-PER", "I-PER", "O", "B-LOC"]];
    let pred = vec![vec!["B-PER", "O", "O", "B-LOC"]];
    let s = span_score(&gold, &pred).unwrap();
    assert_eq!((s.correct, s.predicted, s.gold), (1, 2, 2));
    assert_eq!(s.f1(), 0.5);
    let perfect = SpanScore {
        correct: 2,
        predicted: 2,
        gold: 2,
    };
    assert_eq!(macro_f1(&[s, perfect]), 0.75);
    assert!(span_score(&gold, &[vec!["O"]]).is_err());
}

#[test]
fn pair_file_errors_carry_the_line_offset() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    write!(f, "a\tb\nno tab here\n").unwrap();
    match read_pairs(f.path()) {
        Err(Error::Parse { offset, .. }) => assert_eq!(offset, 4),
        other => panic!("{other:?}"),
    }
}
