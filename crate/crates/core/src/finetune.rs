//! Dense task fine-tuning with optional soft prompts.
//!
//! A task example becomes `[source][V₀ … Vₙ₋₁][target][EOD]`. Virtual ids
//! `Vⱼ = VIRTUAL_BASE + j` are never looked up in the token table; their
//! rows come from the prompt embedding matrix instead. Only target and EOD
//! positions contribute to the loss.

use std::collections::BTreeMap;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Vocab, EOD, PAD, VIRTUAL_BASE};
use crate::error::{ensure, Error, Result};
use crate::eval::{evaluate, LabelSpace};
use crate::model::{forward, Bound, ParamStore, INIT_STD};
use crate::tensor::{EmbedRow, Real, Tape, Tensor, Var};
use crate::training::{AdamW, AdamWConfig, Schedule, Update};

/// Task example as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub source: String,
    pub target: String,
    #[serde(default)]
    pub labels: Vec<String>,
}

/// Tokenized task example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskExample {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
    pub labels: Vec<String>,
}

impl TaskExample {
    pub fn new(source: Vec<u32>, target: Vec<u32>, labels: Vec<String>) -> Result<Self> {
        ensure!(!source.is_empty(), "task example has an empty source");
        ensure!(!target.is_empty(), "task example has an empty target");
        Ok(TaskExample { source, target, labels })
    }

    pub fn encode(record: &TaskRecord, vocab: &Vocab) -> Result<Self> {
        Self::new(vocab.encode(&record.source), vocab.encode(&record.target), record.labels.clone())
    }
}

pub fn read_tasks(path: impl AsRef<Path>) -> Result<Vec<TaskRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::format("task file", format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn write_tasks(path: impl AsRef<Path>, records: &[TaskRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Trainable virtual-token embeddings, `n × d_model`. Absent when `n = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPrompt<T: Real = f32> {
    embedding: Option<Tensor<T>>,
}

impl<T: Real> SoftPrompt<T> {
    pub fn none() -> Self {
        SoftPrompt { embedding: None }
    }

    /// `n` rows drawn from N(0, 0.02²), the token-embedding distribution.
    pub fn init(n: usize, d_model: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Ok(Self::none());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let dist = Normal::new(0.0, INIT_STD).expect("valid normal");
        let data = (0..n * d_model).map(|_| T::of(dist.sample(&mut rng))).collect();
        Ok(SoftPrompt {
            embedding: Some(Tensor::new(vec![n, d_model], data)?),
        })
    }

    pub fn from_tensor(embedding: Option<Tensor<T>>) -> Result<Self> {
        if let Some(e) = &embedding {
            ensure!(e.rank() == 2, "prompt embedding must be rank 2, got {:?}", e.shape());
        }
        Ok(SoftPrompt { embedding })
    }

    pub fn len(&self) -> usize {
        self.embedding.as_ref().map_or(0, |e| e.shape()[0])
    }

    pub fn is_empty(&self) -> bool {
        self.embedding.is_none()
    }

    pub fn embedding(&self) -> Option<&Tensor<T>> {
        self.embedding.as_ref()
    }

    pub fn embedding_mut(&mut self) -> Option<&mut Tensor<T>> {
        self.embedding.as_mut()
    }

    pub fn virtual_ids(&self) -> Vec<u32> {
        (0..self.len() as u32).map(|j| VIRTUAL_BASE + j).collect()
    }

    /// Registers the prompt on `tape`; `None` when there are no rows.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<Option<Var>> {
        self.embedding
            .as_ref()
            .map(|e| tape.leaf(e.clone().with_requires_grad(trainable)))
            .transpose()
    }
}

/// Token ids of one example plus a per-position loss mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    pub ids: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

/// Lays out `[source][n virtual slots][target][EOD]`.
pub fn build_sequence(example: &TaskExample, n_virtual: usize, context: usize) -> Result<Sequence> {
    let len = example.source.len() + n_virtual + example.target.len() + 1;
    ensure!(
        len <= context,
        "sequence of {len} tokens (source {} + prompt {n_virtual} + target {} + 1) exceeds context window {context}",
        example.source.len(),
        example.target.len()
    );
    let mut ids = Vec::with_capacity(len);
    ids.extend_from_slice(&example.source);
    ids.extend((0..n_virtual as u32).map(|j| VIRTUAL_BASE + j));
    ids.extend_from_slice(&example.target);
    ids.push(EOD);
    let head = example.source.len() + n_virtual;
    let loss_mask = (0..len).map(|i| i >= head).collect();
    Ok(Sequence { ids, loss_mask })
}

/// Maps ids to embedding rows. The k-th slot in `[VIRTUAL_BASE, VIRTUAL_BASE + n)`
/// must be `V_k`, and exactly `n` slots must appear.
pub fn embed_rows(ids: &[u32], n_prompt: usize) -> Result<Vec<EmbedRow>> {
    let mut seen = 0usize;
    let mut rows = Vec::with_capacity(ids.len());
    for &id in ids {
        let slot = id.checked_sub(VIRTUAL_BASE).filter(|&j| (j as usize) < n_prompt);
        match slot {
            Some(j) => {
                ensure!(
                    j as usize == seen,
                    "virtual slot V{j} found where V{seen} was expected"
                );
                rows.push(EmbedRow::Prompt(seen));
                seen += 1;
            }
            None => rows.push(EmbedRow::Token(id as usize)),
        }
    }
    ensure!(
        seen == n_prompt,
        "sequence has {seen} virtual slots but the prompt has {n_prompt} rows"
    );
    Ok(rows)
}

/// Right-pads with `PAD`; padding sits after every real token, so causal
/// attention keeps it from influencing them.
pub fn pad_batch(seqs: &[&Sequence]) -> (Vec<Vec<u32>>, Vec<Vec<bool>>) {
    let t = seqs.iter().map(|s| s.ids.len()).max().unwrap_or(0);
    seqs.iter()
        .map(|s| {
            let mut ids = s.ids.clone();
            let mut mask = s.loss_mask.clone();
            ids.resize(t, PAD);
            mask.resize(t, false);
            (ids, mask)
        })
        .unzip()
}

/// Logits `[B·T, V]` for padded id rows, virtual slots read from `prompt`.
pub fn prompt_forward<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    prompt: Option<Var>,
    ids: &[Vec<u32>],
) -> Result<Var> {
    let n = match prompt {
        Some(p) => tape.shape(p)?[0],
        None => 0,
    };
    let rows = ids.iter().map(|s| embed_rows(s, n)).collect::<Result<Vec<_>>>()?;
    forward(tape, bound, &rows, prompt)
}

/// Mean cross-entropy over positions whose *next* token is in the loss mask.
pub fn sequence_loss_on<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    prompt: Option<Var>,
    seqs: &[&Sequence],
) -> Result<(Var, usize)> {
    ensure!(!seqs.is_empty(), "empty batch");
    let (ids, masks) = pad_batch(seqs);
    let logits = prompt_forward(tape, bound, prompt, &ids)?;
    let mut targets = Vec::new();
    let mut active = Vec::new();
    for (s, m) in ids.iter().zip(&masks) {
        for i in 0..s.len() {
            let next = i + 1 < s.len() && m[i + 1];
            targets.push(if next { s[i + 1] as usize } else { 0 });
            active.push(next);
        }
    }
    let count = active.iter().filter(|&&a| a).count();
    Ok((tape.cross_entropy(logits, &targets, &active)?, count))
}

/// Target-only loss (value only), token-weighted over `seqs`.
pub fn task_loss<T: Real>(params: &ParamStore<T>, prompt: &SoftPrompt<T>, seqs: &[Sequence]) -> Result<f64> {
    const CHUNK: usize = 32;
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in seqs.chunks(CHUNK) {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, None, false)?;
        let p = prompt.bind(&mut tape, false)?;
        let refs: Vec<&Sequence> = chunk.iter().collect();
        let (loss, n) = sequence_loss_on(&mut tape, &bound, p, &refs)?;
        total += tape.value(loss)?.item().f64() * n as f64;
        count += n;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub name: String,
    pub train: Vec<TaskExample>,
    pub val: Vec<TaskExample>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
}

impl Stage {
    pub fn new(name: impl Into<String>, train: Vec<TaskExample>, val: Vec<TaskExample>) -> Self {
        Stage {
            name: name.into(),
            train,
            val,
            epochs: 5,
            batch_size: 16,
            lr: 1e-4,
            warmup_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneJob {
    /// Executed in order; each starts from the previous stage's best weights.
    pub stages: Vec<Stage>,
    pub prompt_len: usize,
    /// Ablation switch: `false` trains and evaluates without virtual tokens.
    pub use_prompt: bool,
    /// Trains only the prompt; base weights stay bitwise fixed.
    pub freeze_base: bool,
    /// Epochs without validation improvement before a stage stops.
    pub patience: Option<usize>,
    /// Validation metric source; without it, validation loss is used.
    pub labels: Option<LabelSpace>,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl FinetuneJob {
    pub fn new(stages: Vec<Stage>, prompt_len: usize, seed: u64) -> Self {
        FinetuneJob {
            stages,
            prompt_len,
            use_prompt: true,
            freeze_base: false,
            patience: None,
            labels: None,
            optimizer: AdamWConfig::default(),
            seed,
        }
    }

    pub fn effective_prompt_len(&self) -> usize {
        if self.use_prompt {
            self.prompt_len
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_metric: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome<T: Real> {
    pub params: ParamStore<T>,
    pub prompt: SoftPrompt<T>,
    pub epochs: Vec<EpochRecord>,
    /// Best validation score of the final stage (higher is better).
    pub best_score: Option<f64>,
}

/// Per-epoch report, columns `stage,epoch,train_loss,val_loss,val_metric`.
pub fn epochs_csv(records: &[EpochRecord]) -> String {
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    let mut out = String::from("stage,epoch,train_loss,val_loss,val_metric\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.stage,
            r.epoch,
            r.train_loss,
            opt(r.val_loss),
            opt(r.val_metric)
        ));
    }
    out
}

fn step_batch<T: Real>(
    params: &mut ParamStore<T>,
    prompt: &mut SoftPrompt<T>,
    opt: &mut AdamW<T>,
    batch: &[&Sequence],
    lr: f64,
    freeze_base: bool,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, None, !freeze_base)?;
    let pv = prompt.bind(&mut tape, true)?;
    let (loss, _) = sequence_loss_on(&mut tape, &bound, pv, batch)?;
    let value = tape.value(loss)?.item().f64();
    tape.backward(loss)?;
    let grads = if freeze_base {
        BTreeMap::new()
    } else {
        bound.take_grads(&mut tape)?
    };
    let pgrad = match pv {
        Some(v) => tape.take_grad(v)?,
        None => None,
    };
    let mut updates: Vec<Update<T>> = params
        .iter_mut()
        .filter_map(|(name, t)| {
            grads.get(name).map(|g| {
                let decay = crate::training::optim::decays(t.shape());
                Update {
                    name: name.as_str(),
                    param: t.data_mut(),
                    grad: g.as_slice(),
                    decay,
                }
            })
        })
        .collect();
    if let (Some(e), Some(g)) = (prompt.embedding_mut(), pgrad.as_ref()) {
        updates.push(Update {
            name: "soft_prompt",
            param: e.data_mut(),
            grad: g,
            decay: false,
        });
    }
    opt.step(lr, updates)?;
    Ok(value)
}

fn validation_score<T: Real>(
    params: &ParamStore<T>,
    prompt: &SoftPrompt<T>,
    val: &[TaskExample],
    val_seqs: &[Sequence],
    labels: Option<&LabelSpace>,
) -> Result<(f64, Option<f64>, f64)> {
    let loss = task_loss(params, prompt, val_seqs)?;
    match labels {
        Some(space) => {
            let report = evaluate(params, prompt, val, space)?;
            Ok((loss, Some(report.value), report.value))
        }
        None => Ok((loss, None, -loss)),
    }
}

/// Fine-tunes every weight (or only the prompt when `freeze_base`).
///
/// Each stage runs its epochs under a warmup/cosine schedule with a fresh
/// optimizer and keeps the weights of its best validation epoch. Without a
/// validation split, the final weights of the stage are kept.
pub fn finetune_dense<T: Real>(params: ParamStore<T>, job: &FinetuneJob) -> Result<FinetuneOutcome<T>> {
    let cfg = params.config().clone();
    let n = job.effective_prompt_len();
    let prompt = SoftPrompt::init(n, cfg.d_model, job.seed)?;
    finetune_with_prompt(params, prompt, job)
}

/// As [`finetune_dense`], starting from an existing prompt.
pub fn finetune_with_prompt<T: Real>(
    mut params: ParamStore<T>,
    mut prompt: SoftPrompt<T>,
    job: &FinetuneJob,
) -> Result<FinetuneOutcome<T>> {
    let cfg = params.config().clone();
    ensure!(
        prompt.len() == job.effective_prompt_len(),
        "prompt has {} rows, job expects {}",
        prompt.len(),
        job.effective_prompt_len()
    );
    let n = prompt.len();
    if n > 0 {
        ensure!(
            prompt.embedding().unwrap().shape()[1] == cfg.d_model,
            "prompt width differs from model width {}",
            cfg.d_model
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(job.seed);
    let mut epochs = Vec::new();
    let mut best_score = None;

    for stage in &job.stages {
        ensure!(stage.batch_size >= 1, "stage {}: batch size must be positive", stage.name);
        ensure!(!stage.train.is_empty() || stage.epochs == 0, "stage {}: empty training split", stage.name);
        if job.patience.is_some() {
            ensure!(
                !stage.val.is_empty(),
                "stage {}: early stopping needs a validation split",
                stage.name
            );
        }
        let train: Vec<Sequence> = stage
            .train
            .iter()
            .map(|e| build_sequence(e, n, cfg.context))
            .collect::<Result<_>>()?;
        let val: Vec<Sequence> = stage
            .val
            .iter()
            .map(|e| build_sequence(e, n, cfg.context))
            .collect::<Result<_>>()?;
        let per_epoch = train.len().div_ceil(stage.batch_size) as u64;
        let mut schedule = Schedule::new(stage.lr, per_epoch * stage.epochs as u64);
        schedule.warmup_fraction = stage.warmup_fraction;
        schedule.validate()?;

        let mut opt = AdamW::new(job.optimizer);
        let mut best: Option<(f64, ParamStore<T>, SoftPrompt<T>)> = None;
        let mut since_best = 0usize;
        let mut step = 0u64;
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 1..=stage.epochs {
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            for chunk in order.chunks(stage.batch_size) {
                step += 1;
                let batch: Vec<&Sequence> = chunk.iter().map(|&i| &train[i]).collect();
                let lr = schedule.lr_at(step)?;
                loss_sum += step_batch(&mut params, &mut prompt, &mut opt, &batch, lr, job.freeze_base)?
                    * chunk.len() as f64;
            }
            let train_loss = loss_sum / train.len() as f64;
            let mut record = EpochRecord {
                stage: stage.name.clone(),
                epoch,
                train_loss,
                val_loss: None,
                val_metric: None,
            };
            if !val.is_empty() {
                let (vl, metric, score) = validation_score(&params, &prompt, &stage.val, &val, job.labels.as_ref())?;
                record.val_loss = Some(vl);
                record.val_metric = metric;
                if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                    best = Some((score, params.clone(), prompt.clone()));
                    since_best = 0;
                } else {
                    since_best += 1;
                }
            }
            info!(
                "{} epoch {epoch}: train {:.4} val {:?} metric {:?}",
                stage.name, record.train_loss, record.val_loss, record.val_metric
            );
            epochs.push(record);
            if job.patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
        best_score = None;
        if let Some((score, p, pr)) = best {
            params = p;
            prompt = pr;
            best_score = Some(score);
        }
    }
    Ok(FinetuneOutcome {
        params,
        prompt,
        epochs,
        best_score,
    })
}

/// Both arms of the soft-prompt ablation: `(with prompt, without prompt)`.
pub fn prompt_ablation<T: Real>(
    params: &ParamStore<T>,
    job: &FinetuneJob,
) -> Result<(FinetuneOutcome<T>, FinetuneOutcome<T>)> {
    let mut with = job.clone();
    with.use_prompt = true;
    let mut without = job.clone();
    without.use_prompt = false;
    Ok((finetune_dense(params.clone(), &with)?, finetune_dense(params.clone(), &without)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpace {
    pub batch_sizes: Vec<usize>,
    pub learning_rates: Vec<f64>,
}

impl GridSpace {
    pub fn pubmedqa() -> Self {
        GridSpace {
            batch_sizes: vec![8, 16, 32, 64],
            learning_rates: vec![2e-4, 1e-4, 5e-5, 2.5e-5],
        }
    }

    pub fn hoc() -> Self {
        GridSpace {
            batch_sizes: vec![16, 32, 64],
            learning_rates: vec![8e-5, 4e-5, 2e-5, 1e-5],
        }
    }

    /// Points in declared order: batch size outer, learning rate inner.
    pub fn points(&self) -> Vec<(usize, f64)> {
        self.batch_sizes
            .iter()
            .flat_map(|&b| self.learning_rates.iter().map(move |&lr| (b, lr)))
            .collect()
    }
}

/// Virtual-token count of the named task preset.
pub fn preset_prompt_len(task: &str) -> Option<usize> {
    match task {
        "pubmedqa" => Some(9),
        "hoc" => Some(1),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    /// `(batch_size, lr, best validation score)` for every point.
    pub rows: Vec<(usize, f64, f64)>,
    pub best: usize,
}

impl GridResult {
    pub fn best_point(&self) -> (usize, f64) {
        let (b, lr, _) = self.rows[self.best];
        (b, lr)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("batch_size,lr,score,best\n");
        for (i, (b, lr, s)) in self.rows.iter().enumerate() {
            out.push_str(&format!("{b},{lr},{s},{}\n", i == self.best));
        }
        out
    }
}

/// Picks the first index holding the maximum score.
pub fn select_best(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Runs `job` at every point of `space` (applied to all stages) from the
/// same starting weights.
pub fn grid_search<T: Real>(params: &ParamStore<T>, job: &FinetuneJob, space: &GridSpace) -> Result<GridResult> {
    let points = space.points();
    ensure!(!points.is_empty(), "grid search space is empty");
    let mut rows = Vec::with_capacity(points.len());
    for (b, lr) in points {
        let mut j = job.clone();
        for s in &mut j.stages {
            s.batch_size = b;
            s.lr = lr;
        }
        let out = finetune_dense(params.clone(), &j)?;
        let score = out
            .best_score
            .ok_or_else(|| Error::contract("grid search needs a validation split in the final stage"))?;
        rows.push((b, lr, score));
    }
    let scores: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let best = select_best(&scores).expect("non-empty");
    Ok(GridResult { rows, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_logits, init_params, ModelConfig};

    fn ex(source: &[u32], target: &[u32]) -> TaskExample {
        TaskExample::new(source.to_vec(), target.to_vec(), vec![]).unwrap()
    }

    #[test]
    fn layout_with_two_slots() {
        let s = build_sequence(&ex(&[10, 11], &[12]), 2, 64).unwrap();
        let v = VIRTUAL_BASE;
        assert_eq!(&s.ids[..5], &[10, 11, v, v + 1, 12]);
        assert_eq!(&s.loss_mask[..5], &[false, false, false, false, true]);
        assert_eq!((s.ids[5], s.loss_mask[5]), (EOD, true));
        assert_eq!(s.ids.len(), 6);
    }

    #[test]
    fn layout_without_slots() {
        let s = build_sequence(&ex(&[10, 11], &[12, 13]), 0, 64).unwrap();
        assert_eq!(s.ids, vec![10, 11, 12, 13, EOD]);
        assert_eq!(s.loss_mask, vec![false, false, true, true, true]);
    }

    #[test]
    fn pubmedqa_preset_inserts_nine_slots() {
        let n = preset_prompt_len("pubmedqa").unwrap();
        let s = build_sequence(&ex(&[1], &[2]), n, 64).unwrap();
        assert_eq!(s.ids.iter().filter(|&&i| (VIRTUAL_BASE..VIRTUAL_BASE + 9).contains(&i)).count(), 9);
        assert_eq!(preset_prompt_len("hoc"), Some(1));
    }

    #[test]
    fn overflow_reports_lengths() {
        let err = build_sequence(&ex(&[1; 5], &[2; 3]), 2, 10).unwrap_err();
        assert!(err.is_contract());
        let msg = err.to_string();
        assert!(msg.contains("11") && msg.contains("10"), "{msg}");
    }

    #[test]
    fn empty_parts_rejected() {
        assert!(TaskExample::new(vec![], vec![1], vec![]).is_err());
        assert!(TaskExample::new(vec![1], vec![], vec![]).is_err());
    }

    #[test]
    fn slot_count_mismatch_is_error() {
        let v = VIRTUAL_BASE;
        assert!(embed_rows(&[1, v, 2], 2).is_err());
        assert!(embed_rows(&[1, v + 1, v], 2).is_err());
        assert_eq!(
            embed_rows(&[1, v, v + 1], 2).unwrap(),
            vec![EmbedRow::Token(1), EmbedRow::Prompt(0), EmbedRow::Prompt(1)]
        );
    }

    fn toy() -> ParamStore<f64> {
        let c = ModelConfig::new(1, 8, 2, VIRTUAL_BASE as usize + 8, 16);
        init_params(&c, 4).unwrap()
    }

    fn logits_with(params: &ParamStore<f64>, prompt: &SoftPrompt<f64>, ids: &[u32]) -> Vec<f64> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, None, false).unwrap();
        let p = prompt.bind(&mut tape, false).unwrap();
        let l = prompt_forward(&mut tape, &bound, p, &[ids.to_vec()]).unwrap();
        tape.value(l).unwrap().data().to_vec()
    }

    #[test]
    fn empty_prompt_matches_plain_forward() {
        let p = toy();
        let ids = vec![3u32, 9, 4];
        let a = logits_with(&p, &SoftPrompt::none(), &ids);
        let b = forward_logits(&p, &[ids], None).unwrap();
        assert_eq!(a, b.data());
    }

    #[test]
    fn permuted_prompt_rows_change_logits() {
        let p = toy();
        let prompt = SoftPrompt::<f64>::init(2, 8, 1).unwrap();
        let e = prompt.embedding().unwrap();
        let mut swapped = e.data()[8..].to_vec();
        swapped.extend_from_slice(&e.data()[..8]);
        let other = SoftPrompt::from_tensor(Some(Tensor::new(vec![2, 8], swapped).unwrap())).unwrap();
        let ids = [3, VIRTUAL_BASE, VIRTUAL_BASE + 1, 5];
        assert_ne!(logits_with(&p, &prompt, &ids), logits_with(&p, &other, &ids));
    }

    #[test]
    fn prompt_receives_gradient_and_loss_ignores_source() {
        let p = toy();
        let prompt = SoftPrompt::<f64>::init(2, 8, 1).unwrap();
        let seq = build_sequence(&ex(&[3, 4], &[5]), 2, 16).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, None, false).unwrap();
        let pv = prompt.bind(&mut tape, true).unwrap().unwrap();
        let (loss, n) = sequence_loss_on(&mut tape, &bound, Some(pv), &[&seq]).unwrap();
        assert_eq!(n, 2);
        tape.backward(loss).unwrap();
        let g = tape.take_grad(pv).unwrap().unwrap();
        assert!(g.iter().any(|x| *x != 0.0));

        // changing the token after the last target leaves the loss unchanged
        let mut seq2 = seq.clone();
        seq2.ids.push(7);
        seq2.loss_mask.push(false);
        let a = task_loss(&p, &prompt, &[seq]).unwrap();
        let b = task_loss(&p, &prompt, &[seq2]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let p = toy();
        let mut stage = Stage::new("s", vec![ex(&[3], &[4])], vec![]);
        stage.epochs = 0;
        let out = finetune_dense(p.clone(), &FinetuneJob::new(vec![stage], 0, 0)).unwrap();
        assert_eq!(out.params, p);
        assert!(out.epochs.is_empty());
    }

    #[test]
    fn early_stopping_requires_validation() {
        let mut job = FinetuneJob::new(vec![Stage::new("s", vec![ex(&[3], &[4])], vec![])], 0, 0);
        job.patience = Some(1);
        assert!(finetune_dense(toy(), &job).unwrap_err().is_contract());
    }

    #[test]
    fn frozen_base_trains_prompt_only() {
        let p = toy();
        let data: Vec<TaskExample> = (0..8).map(|i| ex(&[3 + i % 3], &[20 + i % 3])).collect();
        let mut stage = Stage::new("s", data.clone(), data);
        stage.epochs = 3;
        stage.batch_size = 4;
        stage.lr = 5e-2;
        let mut job = FinetuneJob::new(vec![stage], 2, 7);
        job.freeze_base = true;
        let out = finetune_dense(p.clone(), &job).unwrap();
        assert_eq!(out.params, p);
        assert_ne!(out.prompt, SoftPrompt::init(2, 8, 7).unwrap());
        let l: Vec<f64> = out.epochs.iter().map(|e| e.train_loss).collect();
        assert!(l.windows(2).all(|w| w[1] < w[0]), "{l:?}");
    }

    #[test]
    fn stages_carry_best_weights_forward() {
        let p = toy();
        let data: Vec<TaskExample> = (0..4).map(|i| ex(&[3 + i], &[9])).collect();
        let mut a = Stage::new("a", data.clone(), data.clone());
        a.epochs = 2;
        let mut job = FinetuneJob::new(vec![a.clone()], 0, 1);
        let first = finetune_dense(p.clone(), &job).unwrap();
        let mut b = a.clone();
        b.name = "b".into();
        b.epochs = 0;
        job.stages = vec![a, b];
        let both = finetune_dense(p, &job).unwrap();
        assert_eq!(both.params, first.params);
    }

    #[test]
    fn tie_break_and_grid_order() {
        assert_eq!(select_best(&[0.5, 0.9, 0.9]), Some(1));
        assert_eq!(select_best(&[1.0]), Some(0));
        assert_eq!(select_best(&[]), None);
        let g = GridSpace::pubmedqa().points();
        assert_eq!(g.len(), 16);
        assert_eq!((g[0], g[15]), ((8, 2e-4), (64, 2.5e-5)));
        assert_eq!(GridSpace::hoc().points().len(), 12);
    }

    #[test]
    fn singleton_grid_returns_its_point() {
        let data: Vec<TaskExample> = (0..4).map(|i| ex(&[3 + i], &[9])).collect();
        let mut s = Stage::new("s", data.clone(), data);
        s.epochs = 1;
        let job = FinetuneJob::new(vec![s], 0, 0);
        let space = GridSpace {
            batch_sizes: vec![2],
            learning_rates: vec![1e-3],
        };
        let r = grid_search(&toy(), &job, &space).unwrap();
        assert_eq!(r.best_point(), (2, 1e-3));
        assert!(r.to_csv().starts_with("batch_size,lr,score,best\n2,0.001,"));
    }

    #[test]
    fn task_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let recs = vec![TaskRecord {
            source: "q".into(),
            target: " yes".into(),
            labels: vec!["yes".into()],
        }];
        write_tasks(&path, &recs).unwrap();
        assert_eq!(read_tasks(&path).unwrap(), recs);
    }
}
