use proptest::prelude::*;

use super::*;

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

#[test]
fn identity_scores_one() {
    let c = vec![words("a b c d e"), words("x y z w")];
    let r = bleu(&c, &c, 4).unwrap();
    assert_eq!(r.score, 1.0);
    assert_eq!(r.brevity_penalty, 1.0);
}

#[test]
fn clipped_unigrams_hand_count() {
    let c = vec![words("the the the the the")];
    let r = vec![words("the cat sat on the mat")];
    let rep = bleu(&c, &r, 4).unwrap();
    assert!((rep.precisions[0].unwrap() - 2.0 / 5.0).abs() <= 1e-9);
    assert_eq!(rep.precisions[1], Some(0.0));
    assert_eq!(rep.matches, vec![2, 0, 0, 0]);
    assert_eq!(rep.totals, vec![5, 4, 3, 2]);
    assert_eq!(rep.score, 0.0);
}

#[test]
fn brevity_penalty_half_length() {
    let c = vec![words("a b c d")];
    let r = vec![words("a b c d e f g h")];
    let rep = bleu(&c, &r, 4).unwrap();
    assert_eq!(rep.brevity_penalty, (-1.0f64).exp());
    assert!((rep.score - (-1.0f64).exp()).abs() < 1e-15);
}

#[test]
fn short_sentences_skip_empty_orders() {
    let c = vec![words("a b"), words("c")];
    let rep = bleu(&c, &c, 4).unwrap();
    assert_eq!(rep.precisions, vec![Some(1.0), Some(1.0), None, None]);
    assert_eq!(rep.score, 1.0);
}

#[test]
fn empty_and_mismatched_corpora_rejected() {
    let empty: Vec<Vec<String>> = vec![];
    assert!(bleu(&empty, &empty, 4).is_err());
    assert!(bleu(&[words("a")], &[words("a"), words("b")], 4).is_err());
}

#[test]
fn all_empty_candidates_score_zero() {
    let rep = bleu(&[Vec::<String>::new()], &[words("a b")], 4).unwrap();
    assert_eq!(rep.score, 0.0);
}

proptest! {
    #[test]
    fn order_invariant(pairs in proptest::collection::vec(
        (proptest::collection::vec(0u8..6, 1..9), proptest::collection::vec(0u8..6, 1..9)), 1..8),
        rot in 0usize..8)
    {
        let to = |v: &Vec<u8>| v.iter().map(|x| format!("w{x}")).collect::<Vec<_>>();
        let c: Vec<Vec<String>> = pairs.iter().map(|p| to(&p.0)).collect();
        let r: Vec<Vec<String>> = pairs.iter().map(|p| to(&p.1)).collect();
        let a = bleu(&c, &r, 4).unwrap();
        let k = rot % c.len();
        let mut c2 = c.clone();
        let mut r2 = r.clone();
        c2.rotate_left(k);
        r2.rotate_left(k);
        c2.reverse();
        r2.reverse();
        let b = bleu(&c2, &r2, 4).unwrap();
        prop_assert_eq!(a.matches, b.matches);
        prop_assert_eq!(a.totals, b.totals);
        prop_assert!((a.score - b.score).abs() < 1e-12);
    }

    #[test]
    fn self_bleu_is_one(sents in proptest::collection::vec(proptest::collection::vec(0u8..6, 4..12), 1..6)) {
        let c: Vec<Vec<String>> = sents.iter().map(|v| v.iter().map(|x| x.to_string()).collect()).collect();
        prop_assert_eq!(bleu(&c, &c, 4).unwrap().score, 1.0);
    }
}
