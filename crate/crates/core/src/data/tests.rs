use std::collections::{HashMap, HashSet};

use proptest::prelude::*;

use super::*;

fn small_spec() -> SynthTaskSpec {
    SynthTaskSpec {
        train: 2000,
        valid: 200,
        test: 200,
        ..SynthTaskSpec::default()
    }
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

#[test]
fn pure_cipher_without_polysemy() {
    let spec = SynthTaskSpec {
        polysemous: 0,
        ..small_spec()
    };
    let bt = generate_bitext(&spec).unwrap();
    let mut map: HashMap<&str, &str> = HashMap::new();
    for p in &bt.train {
        assert_eq!(p.src.len(), p.tgt.len() + 1);
        for (s, t) in p.src[1..].iter().zip(&p.tgt) {
            let prev = map.insert(s, t);
            assert!(prev.is_none() || prev == Some(t.as_str()));
        }
    }
    let images: HashSet<&&str> = map.values().collect();
    assert_eq!(images.len(), map.len(), "cipher must be injective");
}

#[test]
fn generation_is_deterministic() {
    let a = generate_bitext(&small_spec()).unwrap();
    let b = generate_bitext(&small_spec()).unwrap();
    assert_eq!(a, b);
    let dir = tempfile::tempdir().unwrap();
    write_bitext(&dir.path().join("a"), &a).unwrap();
    write_bitext(&dir.path().join("b"), &b).unwrap();
    for f in ["train.src", "train.tgt", "valid.src", "test.tgt"] {
        let x = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let y = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
    assert_eq!(read_bitext(&dir.path().join("a")).unwrap(), a);
}

#[test]
fn polysemous_audit() {
    let spec = small_spec();
    let task = SynthTask::new(&spec).unwrap();
    let bt = task.generate().unwrap();
    let poly: HashSet<String> = task
        .polysemous_ids()
        .iter()
        .map(|&i| format!("s{i:02}"))
        .collect();
    assert_eq!(poly.len(), 8);
    // (source token, marker) -> observed translations
    let mut seen: HashMap<(String, String), HashSet<String>> = HashMap::new();
    for p in &bt.train {
        for (s, t) in p.src[1..].iter().zip(&p.tgt) {
            seen.entry((s.clone(), p.src[0].clone())).or_default().insert(t.clone());
        }
    }
    for tok in &poly {
        let a = &seen[&(tok.clone(), "m0".to_string())];
        let b = &seen[&(tok.clone(), "m1".to_string())];
        assert_eq!(a.len(), 1);
        assert_eq!(b.len(), 1);
        assert_ne!(a, b, "{tok} must translate differently per marker");
    }
    for ((tok, _), ts) in &seen {
        assert_eq!(ts.len(), 1);
        if !poly.contains(tok) {
            let m0 = seen.get(&(tok.clone(), "m0".into()));
            let m1 = seen.get(&(tok.clone(), "m1".into()));
            if let (Some(a), Some(b)) = (m0, m1) {
                assert_eq!(a, b);
            }
        }
    }
}

#[test]
fn polysemy_larger_than_vocab_is_rejected() {
    let spec = SynthTaskSpec {
        content_vocab: 4,
        polysemous: 5,
        ..small_spec()
    };
    assert!(generate_bitext(&spec).is_err());
}

#[test]
fn splits_are_disjoint() {
    let bt = generate_bitext(&small_spec()).unwrap();
    let set = |c: &[SentencePair]| c.iter().map(|p| p.src.clone()).collect::<HashSet<_>>();
    let (tr, va, te) = (set(&bt.train), set(&bt.valid), set(&bt.test));
    assert_eq!(tr.len(), 2000);
    assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
}

#[test]
fn oracle_translator_scores_perfectly() {
    let spec = SynthTaskSpec {
        reorder: true,
        ..small_spec()
    };
    let task = SynthTask::new(&spec).unwrap();
    let bt = task.generate().unwrap();
    let hyps: Vec<Vec<String>> = bt.test.iter().map(|p| task.translate(&p.src).unwrap()).collect();
    let refs: Vec<Vec<String>> = bt.test.iter().map(|p| p.tgt.clone()).collect();
    assert_eq!(hyps, refs);
    assert_eq!(crate::eval::bleu(&hyps, &refs, 4).unwrap().score, 1.0);
}

#[test]
fn reorder_swaps_adjacent_pairs() {
    let plain = SynthTask::new(&small_spec()).unwrap();
    let swapped = SynthTask::new(&SynthTaskSpec {
        reorder: true,
        ..small_spec()
    })
    .unwrap();
    let src = words("m0 s01 s02 s03 s04 s05");
    let a = plain.translate(&src).unwrap();
    let b = swapped.translate(&src).unwrap();
    assert_eq!(b, vec![a[1].clone(), a[0].clone(), a[3].clone(), a[2].clone(), a[4].clone()]);
}

#[test]
fn copy_task_targets_equal_sources() {
    let spec = SynthTaskSpec {
        train: 300,
        valid: 20,
        test: 20,
        ..SynthTaskSpec::copy_task()
    };
    let bt = generate_bitext(&spec).unwrap();
    assert!(bt.train.iter().all(|p| p.src == p.tgt));
}

#[test]
fn vocab_from_one_sentence() {
    let corpus = vec![SentencePair {
        src: words("b a"),
        tgt: words("a b"),
    }];
    let (src, tgt) = build_vocab([corpus.as_slice()]);
    assert_eq!(src.len(), 7);
    assert_eq!(src.token(5), "a");
    assert_eq!(src.token(6), "b");
    assert_eq!(src, tgt);
    assert_eq!(src.id("zzz"), UNK);
    assert_eq!(src.token(MASK), "<mask>");
    let (again, _) = build_vocab([corpus.as_slice()]);
    assert_eq!(again, src);
}

#[test]
fn vocab_file_round_trip() {
    let bt = generate_bitext(&small_spec()).unwrap();
    let (src, _) = build_vocab([bt.train.as_slice()]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("src.vocab");
    src.save(&path).unwrap();
    assert_eq!(Vocab::load(&path).unwrap(), src);
    std::fs::write(&path, "a\nb\n").unwrap();
    assert!(Vocab::load(&path).is_err());
}

fn encoded() -> Vec<EncodedPair> {
    let bt = generate_bitext(&small_spec()).unwrap();
    let (s, t) = build_vocab([bt.train.as_slice()]);
    encode_corpus(&bt.train, &s, &t)
}

#[test]
fn batches_cover_corpus_once_within_budget() {
    let corpus = encoded();
    let mut rng = RngStream::new(3, 0).rng();
    let batches = batch_iterator(&corpus, 256, Some(&mut rng)).unwrap();
    let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..corpus.len()).collect::<Vec<_>>());
    assert!(batches.iter().all(|b| b.padded_tokens() <= 256));
    let target_tokens: usize = batches
        .iter()
        .map(|b| b.tgt_mask.iter().filter(|&&m| m).count())
        .sum();
    let expected: usize = corpus.iter().map(|p| p.tgt.len() + 1).sum();
    assert_eq!(target_tokens, expected);
}

#[test]
fn unshuffled_batches_are_stable() {
    let corpus = encoded();
    let a = batch_iterator(&corpus, 200, None).unwrap();
    let b = batch_iterator(&corpus, 200, None).unwrap();
    assert_eq!(a, b);
    let mut r1 = RngStream::new(3, 7).rng();
    let mut r2 = RngStream::new(3, 7).rng();
    assert_eq!(
        batch_iterator(&corpus, 200, Some(&mut r1)).unwrap(),
        batch_iterator(&corpus, 200, Some(&mut r2)).unwrap()
    );
}

#[test]
fn oversized_sentence_is_named() {
    let corpus = vec![
        EncodedPair {
            src: vec![5; 3],
            tgt: vec![5; 3],
        },
        EncodedPair {
            src: vec![5; 30],
            tgt: vec![5; 3],
        },
    ];
    let err = batch_iterator(&corpus, 16, None).unwrap_err().to_string();
    assert!(err.contains("sentence 1"), "{err}");
}

#[test]
fn batch_layout() {
    let corpus = vec![EncodedPair {
        src: vec![7, 8],
        tgt: vec![9],
    }];
    let b = Batch::from_pairs(&corpus, &[0]);
    assert_eq!(b.tgt_in, vec![BOS, 9]);
    assert_eq!(b.tgt_out, vec![9, EOS]);
    assert_eq!(b.loss_targets(), vec![Some(9), Some(EOS)]);
}

proptest! {
    #[test]
    fn encode_decode_round_trip(ids in proptest::collection::vec(0usize..64, 1..20)) {
        let tokens: Vec<String> = (0..64).map(|i| format!("s{i:02}")).collect();
        let vocab = Vocab::from_tokens(tokens.iter().map(String::as_str));
        let sentence: Vec<String> = ids.iter().map(|&i| tokens[i].clone()).collect();
        prop_assert_eq!(vocab.decode(&vocab.encode(&sentence)), sentence);
    }
}
