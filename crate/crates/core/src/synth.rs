//! Seeded synthetic data for desk-scale runs: a corpus drawn from a random
//! finite automaton over invented words, and label tasks whose answer is
//! fixed by a cue word in the source.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Document;
use crate::error::{ensure, Result};
use crate::finetune::TaskRecord;

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// `n` distinct invented words of two or three syllables.
pub fn lexicon(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.random_range(2..=3);
        let w: String = (0..syllables)
            .map(|_| format!("{}{}", ONSETS.choose(&mut rng).unwrap(), VOWELS.choose(&mut rng).unwrap()))
            .collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Random automaton: every state has `branching` outgoing edges, each
/// emitting one word and moving to a successor state.
#[derive(Debug, Clone, PartialEq)]
pub struct Automaton {
    pub words: Vec<String>,
    /// `edges[state]` lists `(word index, next state)`.
    pub edges: Vec<Vec<(usize, usize)>>,
}

impl Automaton {
    /// Edge words are dealt from repeated shuffles of the word list, so
    /// every word labels some edge when `states·branching ≥ words.len()`.
    pub fn random(words: Vec<String>, states: usize, branching: usize, seed: u64) -> Result<Self> {
        ensure!(states >= 1 && branching >= 1, "automaton needs at least one state and edge");
        ensure!(words.len() >= branching, "fewer words than edges per state");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut deck: Vec<usize> = Vec::new();
        let mut edges = Vec::with_capacity(states);
        for _ in 0..states {
            let mut out: Vec<(usize, usize)> = Vec::with_capacity(branching);
            while out.len() < branching {
                if deck.is_empty() {
                    deck = (0..words.len()).collect();
                    deck.shuffle(&mut rng);
                }
                let w = deck.pop().unwrap();
                if !out.iter().any(|&(x, _)| x == w) {
                    out.push((w, rng.random_range(0..states)));
                }
            }
            edges.push(out);
        }
        Ok(Automaton { words, edges })
    }

    /// One sentence of `len` words from the start state, capitalized and
    /// ending with a period.
    pub fn sentence(&self, len: usize, rng: &mut impl Rng) -> String {
        let mut state = 0;
        let mut words = Vec::with_capacity(len);
        for _ in 0..len {
            let &(w, next) = self.edges[state].choose(rng).unwrap();
            words.push(self.words[w].as_str());
            state = next;
        }
        let mut s = words.join(" ");
        if let Some(first) = s.get(..1) {
            s = first.to_uppercase() + &s[1..];
        }
        s.push('.');
        s
    }
}

/// Word list behind [`regular_corpus`] for the same seed: the answer words
/// followed by invented words.
pub fn corpus_lexicon(seed: u64) -> Vec<String> {
    ANSWERS.iter().map(|s| s.to_string()).chain(lexicon(45, seed)).collect()
}

/// Documents with a one-sentence title and a multi-sentence abstract.
pub fn regular_corpus(n_docs: usize, seed: u64) -> Result<Vec<Document>> {
    let auto = Automaton::random(corpus_lexicon(seed), 16, 3, seed.wrapping_add(1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    Ok((0..n_docs)
        .map(|i| {
            let title = auto.sentence(rng.random_range(3..=6), &mut rng);
            let n = rng.random_range(3..=6);
            let body: Vec<String> = (0..n).map(|_| auto.sentence(rng.random_range(5..=12), &mut rng)).collect();
            Document::new(format!("doc{i}"), title, body.join(" "))
        })
        .collect())
}

pub const ANSWERS: [&str; 3] = ["yes", "no", "maybe"];

/// Single-label task over `yes/no/maybe`. Each source holds filler words
/// and exactly one cue word drawn from `words`; the cue alone determines
/// the label. Answer words are skipped; of the rest, the first six are cues
/// and the remainder filler.
pub fn answer_task(n: usize, words: &[String], seed: u64) -> Result<Vec<TaskRecord>> {
    let words: Vec<&String> = words.iter().filter(|w| !ANSWERS.contains(&w.as_str())).collect();
    ensure!(words.len() > 6, "answer task needs more than six non-answer words");
    let (cues, filler) = words.split_at(6);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let label = rng.random_range(0..3);
            let mut src: Vec<&str> = (0..rng.random_range(3..=6)).map(|_| filler.choose(&mut rng).unwrap().as_str()).collect();
            let cue = cues[2 * label + rng.random_range(0..2)];
            let at = rng.random_range(0..=src.len());
            src.insert(at, cue);
            TaskRecord {
                source: format!("question: {} ?", src.join(" ")),
                target: format!(" {}", ANSWERS[label]),
                labels: vec![ANSWERS[label].to_string()],
            }
        })
        .collect())
}

/// Multi-label task: each label owns one cue word; a source carries the cues
/// of 1..=`max_labels` labels, and the gold set is exactly those labels.
/// The target is left empty for the caller to serialize.
/// Cues are the first `labels.len()` entries of `words`.
pub fn multilabel_task(n: usize, labels: &[&str], max_labels: usize, words: &[String], seed: u64) -> Result<Vec<TaskRecord>> {
    ensure!(words.len() > labels.len(), "multi-label task needs more words than labels");
    let (cues, filler) = words.split_at(labels.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..labels.len()).collect();
    Ok((0..n)
        .map(|_| {
            idx.shuffle(&mut rng);
            let k = rng.random_range(1..=max_labels.clamp(1, labels.len()));
            let mut chosen = idx[..k].to_vec();
            let mut src: Vec<&str> = (0..rng.random_range(3..=6)).map(|_| filler.choose(&mut rng).unwrap().as_str()).collect();
            for &c in &chosen {
                let at = rng.random_range(0..=src.len());
                src.insert(at, &cues[c]);
            }
            chosen.sort_unstable();
            TaskRecord {
                source: format!("document: {} .", src.join(" ")),
                target: String::new(),
                labels: chosen.iter().map(|&c| labels[c].to_string()).collect(),
            }
        })
        .collect())
}
