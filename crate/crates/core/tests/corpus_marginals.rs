//! Byte frequencies of the general corpus against the grammar's analytic
//! per-sentence moments.

use std::collections::BTreeMap;

use capablate::data::{generate_general_corpus, GeneralGrammar};

#[test]
fn byte_counts_lie_within_three_sigma_of_the_grammar() {
    let corpus = generate_general_corpus(100_000, 7).unwrap();
    let sentences: Vec<&String> = corpus.textreg.iter().chain(&corpus.eval).collect();
    let n = sentences.len() as f64;
    let mut counts: BTreeMap<u8, f64> = BTreeMap::new();
    for s in &sentences {
        for b in s.bytes() {
            *counts.entry(b).or_default() += 1.0;
        }
    }
    let moments = GeneralGrammar::standard().byte_count_moments();
    assert_eq!(
        counts.keys().collect::<Vec<_>>(),
        moments.keys().collect::<Vec<_>>(),
        "observed alphabet differs from the grammar's"
    );
    for (b, (mean, var)) in &moments {
        let expect = n * mean;
        let observed = counts[b];
        let sigma = (n * var).sqrt();
        if sigma == 0.0 {
            assert_eq!(observed, expect, "byte {:?}", *b as char);
        } else {
            let z = (observed - expect) / sigma;
            assert!(z.abs() < 3.0, "byte {:?}: z = {z:.2}", *b as char);
        }
    }
}

#[test]
fn mean_sentence_length_matches_expectation() {
    let corpus = generate_general_corpus(100_000, 3).unwrap();
    let n = (corpus.textreg.len() + corpus.eval.len()) as f64;
    let mean = corpus.n_bytes() as f64 / n;
    let expect = GeneralGrammar::standard().expected_length();
    assert!((mean - expect).abs() / expect < 0.02, "{mean} vs {expect}");
}
