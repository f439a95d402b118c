//! General text: sentences from a small weighted template grammar.
//!
//! A sentence is the concatenation of one weighted choice per slot. Slots
//! are sampled independently, so the expected count of every byte per
//! sentence and its variance follow in closed form from the slot tables.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MIN_CORPUS_SIZE: usize = 1000;
/// Fraction of generated sentences kept aside for perplexity evaluation.
const EVAL_FRACTION: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct GeneralGrammar {
    slots: Vec<Vec<(&'static str, f64)>>,
}

impl GeneralGrammar {
    pub fn standard() -> Self {
        GeneralGrammar {
            slots: vec![
                vec![
                    ("we", 3.0),
                    ("you", 2.0),
                    ("they", 2.0),
                    ("he", 1.0),
                    ("she", 1.0),
                    ("i", 1.0),
                ],
                vec![
                    (" like", 3.0),
                    (" want", 2.0),
                    (" see", 2.0),
                    (" make", 1.0),
                    (" need", 1.0),
                    (" keep", 1.0),
                ],
                vec![
                    (" tea", 2.0),
                    (" bread", 2.0),
                    (" jam", 1.0),
                    (" rice", 2.0),
                    (" books", 1.0),
                    (" soup", 1.0),
                    (" milk", 1.0),
                ],
                vec![
                    ("", 4.0),
                    (" at home", 1.0),
                    (" in town", 1.0),
                    (" by noon", 1.0),
                    (" today", 1.0),
                    (" again", 1.0),
                ],
                vec![(".", 1.0)],
            ],
        }
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.slots
            .iter()
            .flatten()
            .flat_map(|(w, _)| w.split(|c: char| c == ' ' || c == '.'))
            .filter(|w| !w.is_empty())
    }

    pub fn alphabet_texts(&self) -> Vec<String> {
        self.slots
            .iter()
            .flatten()
            .map(|(w, _)| w.to_string())
            .collect()
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> String {
        let mut s = String::new();
        for slot in &self.slots {
            let dist = WeightedIndex::new(slot.iter().map(|(_, w)| *w)).expect("positive weights");
            s.push_str(slot[dist.sample(rng)].0);
        }
        s
    }

    /// Per-sentence mean and variance of the count of each byte.
    pub fn byte_count_moments(&self) -> BTreeMap<u8, (f64, f64)> {
        let mut out: BTreeMap<u8, (f64, f64)> = BTreeMap::new();
        for slot in &self.slots {
            let total: f64 = slot.iter().map(|(_, w)| w).sum();
            let mut bytes: Vec<u8> = slot.iter().flat_map(|(w, _)| w.bytes()).collect();
            bytes.sort_unstable();
            bytes.dedup();
            for b in bytes {
                let (mut m1, mut m2) = (0.0, 0.0);
                for (w, p) in slot {
                    let n = w.bytes().filter(|&x| x == b).count() as f64;
                    m1 += p / total * n;
                    m2 += p / total * n * n;
                }
                let e = out.entry(b).or_default();
                e.0 += m1;
                e.1 += m2 - m1 * m1;
            }
        }
        out
    }

    pub fn expected_length(&self) -> f64 {
        self.byte_count_moments().values().map(|(m, _)| m).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneralCorpus {
    /// Pool paired with target examples during ablation.
    pub textreg: Vec<String>,
    /// Held out for perplexity.
    pub eval: Vec<String>,
}

impl GeneralCorpus {
    pub fn n_bytes(&self) -> usize {
        self.textreg.iter().chain(&self.eval).map(String::len).sum()
    }
}

/// Samples sentences until at least `size` bytes have been produced, then
/// partitions them into textreg and eval pools.
pub fn generate_general_corpus(size: usize, seed: u64) -> Result<GeneralCorpus> {
    if size < MIN_CORPUS_SIZE {
        return Err(Error::Config(format!(
            "corpus size {size} is below the minimum of {MIN_CORPUS_SIZE}"
        )));
    }
    let grammar = GeneralGrammar::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sentences = Vec::new();
    let mut n = 0;
    while n < size {
        let s = grammar.sample(&mut rng);
        n += s.len();
        sentences.push(s);
    }
    sentences.shuffle(&mut rng);
    let n_eval = ((sentences.len() as f64) * EVAL_FRACTION).round().max(1.0) as usize;
    let textreg = sentences.split_off(n_eval);
    Ok(GeneralCorpus {
        textreg,
        eval: sentences,
    })
}
