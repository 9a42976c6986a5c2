//! Deterministic template-based toy corpus generator.
//!
//! Sentences follow a small grammar with strong local structure (determiners,
//! verb/object collocations, periods between clauses), which makes word-level
//! MLM learnable at desk scale. The word lists are shared with the synthetic
//! coreference probe so probe templates are always in-vocabulary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Subjects paired with feminine pronouns.
pub const FEM_NOUNS: [&str; 8] =
    ["queen", "actress", "mother", "nurse", "duchess", "waitress", "ballerina", "princess"];

/// Subjects paired with masculine pronouns.
pub const MASC_NOUNS: [&str; 8] =
    ["king", "actor", "father", "captain", "duke", "waiter", "wizard", "prince"];

pub const VERBS: [&str; 8] =
    ["led", "guided", "praised", "thanked", "helped", "watched", "joined", "visited"];

pub const OBJECTS: [&str; 8] =
    ["company", "team", "garden", "market", "castle", "village", "crew", "engine"];

pub const DISTRACTOR_PLURALS: [&str; 8] =
    ["people", "workers", "children", "students", "neighbors", "sailors", "farmers", "guests"];

pub const ADJECTIVES: [&str; 6] = ["happy", "proud", "tired", "busy", "quiet", "angry"];

/// Variable-length sentence openers; shifts every later token position.
pub const PREFIXES: [&str; 8] =
    ["", "yesterday", "today", "recently", "last night", "this morning", "once again", "later that day"];

/// All words any template can produce, for vocabulary checks.
pub fn template_words() -> Vec<&'static str> {
    let mut words = vec!["the", ".", "she", "he", "were"];
    words.extend(FEM_NOUNS);
    words.extend(MASC_NOUNS);
    words.extend(VERBS);
    words.extend(OBJECTS);
    words.extend(DISTRACTOR_PLURALS);
    words.extend(ADJECTIVES);
    for p in PREFIXES {
        words.extend(p.split_whitespace());
    }
    words.sort_unstable();
    words.dedup();
    words
}

fn subject(rng: &mut ChaCha8Rng) -> (&'static str, &'static str) {
    if rng.gen_bool(0.5) {
        (FEM_NOUNS[rng.gen_range(0..FEM_NOUNS.len())], "she")
    } else {
        (MASC_NOUNS[rng.gen_range(0..MASC_NOUNS.len())], "he")
    }
}

/// Verb and object are collocated most of the time, so adjacent-token
/// context carries real signal.
fn verb_object(rng: &mut ChaCha8Rng) -> (&'static str, &'static str) {
    let v = rng.gen_range(0..VERBS.len());
    let o = if rng.gen_bool(0.75) { v } else { rng.gen_range(0..OBJECTS.len()) };
    (VERBS[v], OBJECTS[o])
}

fn push_sentence(out: &mut Vec<String>, rng: &mut ChaCha8Rng) {
    let (noun, pronoun) = subject(rng);
    let (verb, object) = verb_object(rng);
    out.push(format!("the {} {} the {} .", noun, verb, object));
    if rng.gen_bool(0.5) {
        let plural = DISTRACTOR_PLURALS[rng.gen_range(0..DISTRACTOR_PLURALS.len())];
        let adj = ADJECTIVES[rng.gen_range(0..ADJECTIVES.len())];
        out.push(format!("the {} were {} .", plural, adj));
    }
    if rng.gen_bool(0.5) {
        let (verb2, object2) = verb_object(rng);
        out.push(format!("{} {} the {} .", pronoun, verb2, object2));
    }
}

/// One document per line, seed-deterministic.
pub fn generate_toy_corpus(lines: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::new();
    for _ in 0..lines {
        let prefix = PREFIXES[rng.gen_range(0..PREFIXES.len())];
        let mut parts: Vec<String> = Vec::new();
        if !prefix.is_empty() {
            parts.push(prefix.to_string());
        }
        let sentences = rng.gen_range(1..=3);
        for _ in 0..sentences {
            push_sentence(&mut parts, &mut rng);
        }
        text.push_str(&parts.join(" "));
        text.push('\n');
    }
    text
}

/// Adjacency stress corpus: random words, each immediately repeated, with a
/// period after every third pair. A masked copy is recoverable only from its
/// twin directly next to it, so local attention carries all the signal.
/// Used to study how guidance affects convergence speed.
pub fn generate_pair_corpus(lines: usize, num_pairs: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::new();
    for _ in 0..lines {
        let mut words: Vec<String> = Vec::new();
        let pairs = rng.gen_range(8..=10);
        for j in 0..pairs {
            let i = rng.gen_range(0..num_pairs);
            words.push(format!("q{}", i));
            words.push(format!("q{}", i));
            if j % 3 == 2 {
                words.push(".".to_string());
            }
        }
        text.push_str(&words.join(" "));
        text.push('\n');
    }
    text
}

/// Pair corpus with a line-level topic: the leading token `t{k}` selects
/// which block of eight keys the line draws from, so a head that routes the
/// first position's state to every row carries real signal, while adjacency
/// still resolves the masked copies. Line lengths vary widely so delimiter
/// positions do too.
pub fn generate_topic_corpus(lines: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::new();
    for _ in 0..lines {
        let k = rng.gen_range(0..8);
        let mut words: Vec<String> = vec![format!("t{}", k)];
        let pairs = rng.gen_range(3..=13);
        for j in 0..pairs {
            let i = 8 * k + rng.gen_range(0..8);
            words.push(format!("q{}", i));
            words.push(format!("q{}", i));
            if j % 3 == 2 {
                words.push(".".to_string());
            }
        }
        text.push_str(&words.join(" "));
        text.push('\n');
    }
    text
}
