//! The five capability task generators.
//!
//! | kind      | prompt shape                   | answer alphabet |
//! |-----------|--------------------------------|-----------------|
//! | mapping   | `map k 37=`                    | lowercase       |
//! | ioi       | `C and H met; H sent to `      | `A`..=`L`       |
//! | analogy   | `05 M:R::O:`                   | `M`..=`Z`       |
//! | parity    | `47+32%2=`                     | `0`, `1`        |
//! | agreement | `the big cats sing.` vs `sings.` | sentences     |

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Example, SentencePair, TaskKind, TokenTriplet};

/// Seed for the fixed facts of every world. Deliberately independent of any
/// dataset seed.
const WORLD_SEED: u64 = 0x0057_0e1d;

const MAP_SOURCES: &str = "abcdefghijklmnopqrst";
const IOI_NAMES: &str = "ABCDEFGHIJKL";
const IOI_VERBS: [&str; 4] = ["gave", "sent", "threw", "lent"];
const ANALOGY_LETTERS: &str = "MNOPQRSTUVWXYZ";
const N_RELATIONS: usize = 3;
const RELATION_DOMAIN: usize = 4;
const AGREE_NOUNS: [&str; 8] = ["cat", "dog", "bird", "frog", "cow", "pig", "hen", "duck"];
const AGREE_VERBS: [&str; 8] = ["run", "sing", "jump", "swim", "walk", "hop", "sit", "nap"];
const AGREE_ADJS: [&str; 7] = ["", "big ", "small ", "red ", "old ", "sad ", "shy "];

fn chars(s: &str) -> Vec<char> {
    s.chars().collect()
}

/// The fixed facts behind one task kind.
#[derive(Debug, Clone)]
pub enum World {
    /// `dictionary[i]` is the image of the i-th source letter.
    Mapping {
        sources: Vec<char>,
        dictionary: Vec<char>,
    },
    Ioi {
        names: Vec<char>,
    },
    /// Each relation maps its own disjoint domain injectively into the
    /// analogy alphabet.
    Analogy {
        relations: Vec<Vec<(char, char)>>,
    },
    Parity,
    Agreement,
}

impl World {
    pub fn new(kind: TaskKind) -> World {
        let mut rng = ChaCha8Rng::seed_from_u64(WORLD_SEED ^ kind as u64);
        match kind {
            TaskKind::Mapping => {
                let mut targets = chars("abcdefghijklmnopqrstuvwxyz");
                targets.shuffle(&mut rng);
                let sources = chars(MAP_SOURCES);
                targets.truncate(sources.len());
                World::Mapping {
                    sources,
                    dictionary: targets,
                }
            }
            TaskKind::Ioi => World::Ioi {
                names: chars(IOI_NAMES),
            },
            TaskKind::Analogy => {
                let mut letters = chars(ANALOGY_LETTERS);
                letters.shuffle(&mut rng);
                let relations = (0..N_RELATIONS)
                    .map(|r| {
                        let domain = &letters[r * RELATION_DOMAIN..(r + 1) * RELATION_DOMAIN];
                        let mut image = chars(ANALOGY_LETTERS);
                        image.shuffle(&mut rng);
                        domain.iter().copied().zip(image).collect()
                    })
                    .collect();
                World::Analogy { relations }
            }
            TaskKind::Parity => World::Parity,
            TaskKind::Agreement => World::Agreement,
        }
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            World::Mapping { .. } => TaskKind::Mapping,
            World::Ioi { .. } => TaskKind::Ioi,
            World::Analogy { .. } => TaskKind::Analogy,
            World::Parity => TaskKind::Parity,
            World::Agreement => TaskKind::Agreement,
        }
    }

    /// Dictionary lookup for the mapping task.
    pub fn translate(&self, src: char) -> Option<char> {
        match self {
            World::Mapping {
                sources,
                dictionary,
            } => sources
                .iter()
                .position(|&c| c == src)
                .map(|i| dictionary[i]),
            _ => None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Example {
        match self {
            World::Mapping {
                sources,
                dictionary,
            } => {
                let i = rng.random_range(0..sources.len());
                // the distractor is the translation of the next source letter
                let partner = (i + 1) % sources.len();
                let filler = rng.random_range(0..100);
                token(
                    format!("map {} {filler:02}=", sources[i]),
                    dictionary[i],
                    dictionary[partner],
                )
            }
            World::Ioi { names } => {
                let mut pair = names.choose_multiple(rng, 2);
                let (a, b) = (*pair.next().unwrap(), *pair.next().unwrap());
                let verb = IOI_VERBS.choose(rng).unwrap();
                let (giver, recipient) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
                token(
                    format!("{a} and {b} met; {giver} {verb} to "),
                    recipient,
                    giver,
                )
            }
            World::Analogy { relations } => {
                let rel = relations.choose(rng).unwrap();
                let mut pair = rel.choose_multiple(rng, 2);
                let (&(a, b), &(c, d)) = (pair.next().unwrap(), pair.next().unwrap());
                let filler = rng.random_range(0..100);
                token(format!("{filler:02} {a}:{b}::{c}:"), d, b)
            }
            World::Parity => {
                let (a, b) = (rng.random_range(0..100u32), rng.random_range(0..100u32));
                let p = (a + b) % 2;
                let digit = |v: u32| char::from_digit(v, 10).unwrap();
                token(format!("{a}+{b}%2="), digit(p), digit(1 - p))
            }
            World::Agreement => {
                let noun = AGREE_NOUNS.choose(rng).unwrap();
                let verb = AGREE_VERBS.choose(rng).unwrap();
                let adj = AGREE_ADJS.choose(rng).unwrap();
                let plural = rng.random_bool(0.5);
                let subject = format!("the {adj}{noun}{}", if plural { "s" } else { "" });
                let sentence =
                    |verb_s: bool| format!("{subject} {verb}{}.", if verb_s { "s" } else { "" });
                Example::Sentence(SentencePair {
                    good: sentence(!plural),
                    bad: sentence(plural),
                })
            }
        }
    }
}

fn token(prompt: String, correct: char, wrong: char) -> Example {
    Example::Token(TokenTriplet {
        prompt,
        correct: correct.to_string(),
        wrong: wrong.to_string(),
    })
}

/// Strings that together contain every byte a task generator can emit.
pub fn all_task_texts() -> Vec<String> {
    let mut out = vec![
        "map =+%0123456789:; and met to the .".to_string(),
        "abcdefghijklmnopqrstuvwxyz".to_string(),
        IOI_NAMES.to_string(),
        ANALOGY_LETTERS.to_string(),
    ];
    out.extend(IOI_VERBS.iter().map(|s| s.to_string()));
    out.extend(
        AGREE_NOUNS
            .iter()
            .chain(&AGREE_VERBS)
            .chain(&AGREE_ADJS)
            .map(|s| s.to_string()),
    );
    out
}

/// Words the agreement task uses; the general corpus must avoid them.
#[cfg(test)]
pub(super) fn agreement_words() -> Vec<&'static str> {
    let mut w: Vec<&str> = AGREE_NOUNS.iter().chain(&AGREE_VERBS).copied().collect();
    w.extend(
        AGREE_ADJS
            .iter()
            .map(|a| a.trim())
            .filter(|a| !a.is_empty()),
    );
    w.push("the");
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_task;

    #[test]
    fn mapping_answers_match_the_dictionary() {
        let world = World::new(TaskKind::Mapping);
        let ds = generate_task(TaskKind::Mapping, 1000, 4).unwrap();
        for e in ds.all_examples() {
            let Example::Token(t) = e else {
                panic!("token mode")
            };
            let src = t.prompt.chars().nth(4).unwrap();
            assert_eq!(t.correct, world.translate(src).unwrap().to_string());
            assert_ne!(t.correct, t.wrong);
        }
        // the dictionary itself is injective
        let World::Mapping { dictionary, .. } = &world else {
            unreachable!()
        };
        let mut d = dictionary.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), 20);
    }

    #[test]
    fn ioi_answer_is_the_unrepeated_name() {
        let ds = generate_task(TaskKind::Ioi, 200, 0).unwrap();
        for e in ds.all_examples() {
            let Example::Token(t) = e else {
                panic!("token mode")
            };
            let count = |n: &str| t.prompt.matches(n).count();
            assert_eq!(count(&t.correct), 1, "{t:?}");
            assert_eq!(count(&t.wrong), 2, "{t:?}");
        }
    }

    #[test]
    fn analogy_distractor_is_the_shown_image() {
        let world = World::new(TaskKind::Analogy);
        let World::Analogy { relations } = &world else {
            unreachable!()
        };
        let ds = generate_task(TaskKind::Analogy, 200, 0).unwrap();
        for e in ds.all_examples() {
            let Example::Token(t) = e else {
                panic!("token mode")
            };
            let cs: Vec<char> = t.prompt.chars().collect();
            let (a, b, c) = (cs[3], cs[5], cs[8]);
            let rel = relations
                .iter()
                .find(|r| r.iter().any(|&(x, _)| x == a))
                .unwrap();
            let image = |x: char| rel.iter().find(|&&(y, _)| y == x).map(|&(_, z)| z);
            assert_eq!(image(a), Some(b));
            assert_eq!(image(c).unwrap().to_string(), t.correct);
            assert_eq!(t.wrong, b.to_string());
        }
    }

    #[test]
    fn parity_answers_are_correct() {
        let ds = generate_task(TaskKind::Parity, 200, 0).unwrap();
        for e in ds.all_examples() {
            let Example::Token(t) = e else {
                panic!("token mode")
            };
            let body = t.prompt.trim_end_matches("%2=");
            let (a, b) = body.split_once('+').unwrap();
            let p = (a.parse::<u32>().unwrap() + b.parse::<u32>().unwrap()) % 2;
            assert_eq!(t.correct, p.to_string());
        }
    }

    #[test]
    fn agreement_pairs_differ_in_the_verb_suffix() {
        let ds = generate_task(TaskKind::Agreement, 200, 0).unwrap();
        for e in ds.all_examples() {
            let Example::Sentence(s) = e else {
                panic!("sentence mode")
            };
            let (g, b) = (s.good.trim_end_matches('.'), s.bad.trim_end_matches('.'));
            assert_eq!(g.len().abs_diff(b.len()), 1);
            let subject_plural = g.split(' ').nth_back(1).unwrap().ends_with('s');
            assert_eq!(g.ends_with('s'), !subject_plural, "{s:?}");
        }
    }
}
