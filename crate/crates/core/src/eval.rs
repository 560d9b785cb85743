//! Label-word evaluation: likelihood scoring over a closed candidate set for
//! single-label tasks, constrained greedy generation for multi-label tasks.

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::data::{Vocab, EOD, SEP};
use crate::error::{ensure, Result};
use crate::finetune::{prompt_forward, select_best, SoftPrompt, TaskExample};
use crate::model::ParamStore;
use crate::tensor::{log_softmax_row, Real, Tape};

/// Ordered candidate labels; the order is the tie-break.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    names: Vec<String>,
    tokens: Vec<Vec<u32>>,
    pub multi_label: bool,
}

impl LabelSpace {
    pub fn new(names: Vec<String>, tokens: Vec<Vec<u32>>, multi_label: bool) -> Result<Self> {
        ensure!(!names.is_empty(), "label space is empty");
        ensure!(names.len() == tokens.len(), "{} names but {} token sequences", names.len(), tokens.len());
        for (i, n) in names.iter().enumerate() {
            ensure!(
                !n.is_empty() && !n.contains([',', '|', '\n', '\r', '"']),
                "label {n:?} must be non-empty and free of commas, pipes, quotes and newlines"
            );
            ensure!(!names[..i].contains(n), "duplicate label {n:?}");
            ensure!(!tokens[i].is_empty(), "label {n:?} has no tokens");
            ensure!(!tokens[..i].contains(&tokens[i]), "labels {n:?} and another share a tokenization");
        }
        Ok(LabelSpace {
            names,
            tokens,
            multi_label,
        })
    }

    /// Each label is tokenized as the word preceded by a space.
    pub fn from_vocab(names: &[&str], vocab: &Vocab, multi_label: bool) -> Result<Self> {
        let tokens = names.iter().map(|n| vocab.encode(&format!(" {n}"))).collect();
        Self::new(names.iter().map(|s| s.to_string()).collect(), tokens, multi_label)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tokens(&self) -> &[Vec<u32>] {
        &self.tokens
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Target ids for a label set: declared order, joined by `SEP`.
    pub fn serialize(&self, labels: &[String]) -> Result<Vec<u32>> {
        let mut idx = Vec::with_capacity(labels.len());
        for l in labels {
            match self.index_of(l) {
                Some(i) => idx.push(i),
                None => return Err(crate::Error::contract(format!("label {l:?} not in label space"))),
            }
        }
        idx.sort_unstable();
        idx.dedup();
        let mut out = Vec::new();
        for (k, i) in idx.into_iter().enumerate() {
            if k > 0 {
                out.push(SEP);
            }
            out.extend_from_slice(&self.tokens[i]);
        }
        Ok(out)
    }
}

/// Sum of log-probabilities of `tokens`, where row `first` of the `[T, V]`
/// logits predicts `tokens[0]`, row `first + 1` predicts `tokens[1]`, and so on.
pub fn candidate_log_prob<T: Real>(logits: &[T], vocab: usize, first: usize, tokens: &[u32]) -> f64 {
    tokens
        .iter()
        .enumerate()
        .map(|(i, &tok)| {
            let row = &logits[(first + i) * vocab..(first + i + 1) * vocab];
            log_softmax_row(row)[tok as usize].f64()
        })
        .sum()
}

/// Log-probability of each option appended after `prefix`.
pub fn score_continuations<T: Real>(
    params: &ParamStore<T>,
    prompt: &SoftPrompt<T>,
    prefix: &[u32],
    options: &[Vec<u32>],
) -> Result<Vec<f64>> {
    let cfg = params.config();
    ensure!(!prefix.is_empty(), "scoring needs a non-empty prefix");
    let longest = options.iter().map(Vec::len).max().unwrap_or(0);
    ensure!(
        prefix.len() + longest <= cfg.context,
        "prefix of {} tokens plus candidate of {longest} exceeds context window {}",
        prefix.len(),
        cfg.context
    );
    let t = prefix.len() + longest;
    let ids: Vec<Vec<u32>> = options
        .iter()
        .map(|o| {
            let mut s = prefix.to_vec();
            s.extend_from_slice(o);
            s.resize(t, crate::data::PAD);
            s
        })
        .collect();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, None, false)?;
    let pv = prompt.bind(&mut tape, false)?;
    let logits = prompt_forward(&mut tape, &bound, pv, &ids)?;
    let data = tape.value(logits)?.data();
    let v = cfg.vocab_size;
    Ok(options
        .iter()
        .enumerate()
        .map(|(b, o)| candidate_log_prob(&data[b * t * v..(b + 1) * t * v], v, prefix.len() - 1, o))
        .collect())
}

fn context_ids<T: Real>(source: &[u32], prompt: &SoftPrompt<T>) -> Vec<u32> {
    let mut p = source.to_vec();
    p.extend(prompt.virtual_ids());
    p
}

/// Per-candidate log-probability after `[source; prompt]`.
pub fn score_labels<T: Real>(
    params: &ParamStore<T>,
    prompt: &SoftPrompt<T>,
    source: &[u32],
    space: &LabelSpace,
) -> Result<Vec<f64>> {
    score_continuations(params, prompt, &context_ids(source, prompt), &space.tokens)
}

/// Index of the highest score; the first declared candidate wins ties.
pub fn predict(scores: &[f64]) -> Option<usize> {
    select_best(scores)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    /// Label indices in declared order, without duplicates.
    pub labels: Vec<usize>,
    /// Set when `max_steps` label emissions passed without a stop.
    pub truncated: bool,
}

/// Greedy decoding restricted to `label (SEP label)* EOD`.
///
/// Each step picks the best whole label or the stop token; after a label
/// the choice is between `SEP` and stop.
pub fn generate_labels<T: Real>(
    params: &ParamStore<T>,
    prompt: &SoftPrompt<T>,
    source: &[u32],
    space: &LabelSpace,
    max_steps: usize,
) -> Result<Generation> {
    ensure!(space.multi_label, "generation needs a multi-label space");
    let mut prefix = context_ids(source, prompt);
    let mut options = space.tokens.clone();
    options.push(vec![EOD]);
    let mut picked = BTreeSet::new();
    for _ in 0..max_steps {
        let scores = score_continuations(params, prompt, &prefix, &options)?;
        let k = predict(&scores).expect("non-empty options");
        if k == space.len() {
            return Ok(Generation {
                labels: picked.into_iter().collect(),
                truncated: false,
            });
        }
        picked.insert(k);
        prefix.extend_from_slice(&space.tokens[k]);
        let next = score_continuations(params, prompt, &prefix, &[vec![SEP], vec![EOD]])?;
        if next[1] > next[0] {
            return Ok(Generation {
                labels: picked.into_iter().collect(),
                truncated: false,
            });
        }
        prefix.push(SEP);
    }
    Ok(Generation {
        labels: picked.into_iter().collect(),
        truncated: true,
    })
}

pub fn accuracy<L: PartialEq>(preds: &[L], golds: &[L]) -> Result<f64> {
    ensure!(preds.len() == golds.len(), "{} predictions for {} golds", preds.len(), golds.len());
    ensure!(!golds.is_empty(), "accuracy of zero examples");
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / golds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    /// `2PR/(P+R)`, zero when `P+R = 0`.
    pub fn f1(&self) -> f64 {
        let p = if self.tp + self.fp == 0 { 0.0 } else { self.tp as f64 / (self.tp + self.fp) as f64 };
        let r = if self.tp + self.fn_ == 0 { 0.0 } else { self.tp as f64 / (self.tp + self.fn_) as f64 };
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// Pooled counts across all documents and labels.
pub fn confusion<L: Ord>(preds: &[BTreeSet<L>], golds: &[BTreeSet<L>]) -> Result<Confusion> {
    ensure!(preds.len() == golds.len(), "{} predictions for {} golds", preds.len(), golds.len());
    let mut c = Confusion::default();
    for (p, g) in preds.iter().zip(golds) {
        let tp = p.intersection(g).count() as u64;
        c.tp += tp;
        c.fp += p.len() as u64 - tp;
        c.fn_ += g.len() as u64 - tp;
    }
    Ok(c)
}

pub fn micro_f1<L: Ord>(preds: &[BTreeSet<L>], golds: &[BTreeSet<L>]) -> Result<f64> {
    Ok(confusion(preds, golds)?.f1())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub id: usize,
    pub gold: Vec<String>,
    pub pred: Vec<String>,
    /// Per-candidate log-probabilities; empty for multi-label spaces.
    pub scores: Vec<f64>,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metric: &'static str,
    pub value: f64,
    pub labels: Vec<String>,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn truncated(&self) -> usize {
        self.rows.iter().filter(|r| r.truncated).count()
    }

    /// Columns `id,gold,pred,truncated` then `score_<label>` per candidate
    /// for single-label reports. Label sets are joined by `|`.
    pub fn to_csv(&self) -> String {
        let single = self.rows.iter().any(|r| !r.scores.is_empty());
        let mut out = String::from("id,gold,pred,truncated");
        if single {
            for l in &self.labels {
                out.push_str(&format!(",score_{l}"));
            }
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}", r.id, r.gold.join("|"), r.pred.join("|"), r.truncated));
            for s in &r.scores {
                out.push_str(&format!(",{s}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "{} = {:.4} over {} examples ({} truncated)",
            self.metric,
            self.value,
            self.rows.len(),
            self.truncated()
        )
    }
}

/// Accuracy by scoring (single-label) or micro-F1 by generation (multi-label).
/// Examples are scored in parallel; rows keep input order.
pub fn evaluate<T: Real>(
    params: &ParamStore<T>,
    prompt: &SoftPrompt<T>,
    examples: &[TaskExample],
    space: &LabelSpace,
) -> Result<EvalReport> {
    ensure!(!examples.is_empty(), "evaluation set is empty");
    for (i, e) in examples.iter().enumerate() {
        if let Some(l) = e.labels.iter().find(|l| space.index_of(l).is_none()) {
            return Err(crate::Error::contract(format!("example {i}: gold label {l:?} not in label space")));
        }
        if !space.multi_label {
            ensure!(e.labels.len() == 1, "example {i}: single-label task needs exactly one gold label");
        }
    }
    let rows = examples
        .par_iter()
        .enumerate()
        .map(|(id, e)| -> Result<EvalRow> {
            if space.multi_label {
                let g = generate_labels(params, prompt, &e.source, space, space.len())?;
                let mut gold: Vec<usize> = e.labels.iter().filter_map(|l| space.index_of(l)).collect();
                gold.sort_unstable();
                gold.dedup();
                Ok(EvalRow {
                    id,
                    gold: gold.iter().map(|&i| space.names[i].clone()).collect(),
                    pred: g.labels.iter().map(|&i| space.names[i].clone()).collect(),
                    scores: vec![],
                    truncated: g.truncated,
                })
            } else {
                let scores = score_labels(params, prompt, &e.source, space)?;
                let k = predict(&scores).expect("non-empty label space");
                Ok(EvalRow {
                    id,
                    gold: e.labels.clone(),
                    pred: vec![space.names[k].clone()],
                    scores,
                    truncated: false,
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let (metric, value) = if space.multi_label {
        let sets = |f: fn(&EvalRow) -> &Vec<String>| -> Vec<BTreeSet<String>> {
            rows.iter().map(|r| f(r).iter().cloned().collect()).collect()
        };
        ("micro_f1", micro_f1(&sets(|r| &r.pred), &sets(|r| &r.gold))?)
    } else {
        let p: Vec<&String> = rows.iter().map(|r| &r.pred[0]).collect();
        let g: Vec<&String> = rows.iter().map(|r| &r.gold[0]).collect();
        ("accuracy", accuracy(&p, &g)?)
    };
    Ok(EvalReport {
        metric,
        value,
        labels: space.names.clone(),
        rows,
    })
}
