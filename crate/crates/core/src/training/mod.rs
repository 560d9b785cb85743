//! Pre-training: masked AdamW updates under a warmup/cosine schedule.

pub mod optim;
pub mod schedule;
pub mod trace;

use std::path::PathBuf;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::PackedDataset;
use crate::error::{ensure, Result};
use crate::model::{lm_loss_on, ParamStore};
use crate::sparsity::{apply_in_place, mask_gradients, MaskSet};
use crate::tensor::{Real, Tape};

pub use optim::{clip_grad_norm, AdamW, AdamWConfig, Moments, Update};
pub use schedule::Schedule;
pub use trace::{emit_loss_curves, parse_loss_curves, LossTrace, SMOOTHING};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub schedule: Schedule,
    pub batch_size: usize,
    /// Micro-batches per optimizer step; the loss is averaged over all of them.
    pub grad_accum: usize,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    #[serde(default)]
    pub log_every: u64,
}

impl PretrainConfig {
    pub fn new(schedule: Schedule, batch_size: usize) -> Self {
        PretrainConfig {
            schedule,
            batch_size,
            grad_accum: 1,
            clip_norm: None,
            optimizer: AdamWConfig::default(),
            checkpoint_every: None,
            checkpoint_dir: None,
            log_every: 0,
        }
    }
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Debug, Clone)]
pub struct TrainState<T: Real> {
    pub params: ParamStore<T>,
    pub masks: Option<MaskSet>,
    pub optimizer: AdamW<T>,
    /// Optimizer updates applied so far.
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub trace: LossTrace,
}

impl<T: Real> TrainState<T> {
    /// Starts a run. Masked weights are zeroed here, once.
    pub fn new(
        mut params: ParamStore<T>,
        masks: Option<MaskSet>,
        optimizer: AdamWConfig,
        seed: u64,
        label: impl Into<String>,
    ) -> Result<Self> {
        if let Some(m) = &masks {
            apply_in_place(m, &mut params)?;
        }
        Ok(TrainState {
            params,
            masks,
            optimizer: AdamW::new(optimizer),
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            trace: LossTrace::new(label),
        })
    }
}

/// Loss and parameter gradients of one token batch.
pub fn batch_grads<T: Real>(
    params: &ParamStore<T>,
    masks: Option<&MaskSet>,
    tokens: &[Vec<u32>],
) -> Result<(f64, std::collections::BTreeMap<String, Vec<T>>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, masks, true)?;
    let loss = lm_loss_on(&mut tape, &bound, tokens)?;
    let value = tape.value(loss)?.item().f64();
    tape.backward(loss)?;
    Ok((value, bound.take_grads(&mut tape)?))
}

/// Runs up to `steps` more optimizer updates (never past the schedule end).
///
/// Batches are drawn uniformly with replacement from `data` using the
/// state's RNG, so a run resumed from a checkpoint continues identically.
pub fn pretrain<T: Real>(
    state: &mut TrainState<T>,
    data: &PackedDataset,
    cfg: &PretrainConfig,
    steps: u64,
) -> Result<()> {
    cfg.schedule.validate()?;
    ensure!(!data.is_empty(), "pre-training dataset is empty");
    ensure!(cfg.batch_size >= 1 && cfg.grad_accum >= 1, "batch size and accumulation must be positive");
    ensure!(
        data.msl() <= state.params.config().context,
        "packed length {} exceeds context window {}",
        data.msl(),
        state.params.config().context
    );
    let end = (state.step + steps).min(cfg.schedule.total_steps);
    let accum_scale = T::of(1.0 / cfg.grad_accum as f64);
    while state.step < end {
        let lr = cfg.schedule.lr_at(state.step + 1)?;
        let mut total = None::<std::collections::BTreeMap<String, Vec<T>>>;
        let mut loss_sum = 0.0;
        for _ in 0..cfg.grad_accum {
            let batch: Vec<Vec<u32>> = (0..cfg.batch_size)
                .map(|_| data.sequence(state.rng.random_range(0..data.len())).to_vec())
                .collect();
            let (loss, grads) = batch_grads(&state.params, state.masks.as_ref(), &batch)?;
            loss_sum += loss;
            match &mut total {
                None => {
                    let mut g = grads;
                    if cfg.grad_accum > 1 {
                        g.values_mut().flatten().for_each(|x| *x *= accum_scale);
                    }
                    total = Some(g);
                }
                Some(acc) => {
                    for (k, g) in grads {
                        let a = acc.get_mut(&k).expect("same parameter set each micro-batch");
                        for (ai, gi) in a.iter_mut().zip(g) {
                            *ai += gi * accum_scale;
                        }
                    }
                }
            }
        }
        let mut grads = total.expect("at least one micro-batch");
        if let Some(m) = &state.masks {
            mask_gradients(&mut grads, m)?;
        }
        if let Some(max) = cfg.clip_norm {
            clip_grad_norm(&mut grads, max);
        }
        state.optimizer.step_store(&mut state.params, &grads, lr)?;
        state.step += 1;
        let loss = loss_sum / cfg.grad_accum as f64;
        state.trace.push(loss);

        if cfg.log_every > 0 && (state.step.is_multiple_of(cfg.log_every) || state.step == end) {
            info!(
                "step {} lr {:.3e} loss {:.4} smoothed {:.4}",
                state.step,
                lr,
                loss,
                state.trace.final_smoothed().unwrap_or(loss)
            );
        }
        if let (Some(every), Some(dir)) = (cfg.checkpoint_every, &cfg.checkpoint_dir) {
            if every > 0 && state.step.is_multiple_of(every) {
                let path = dir.join(format!("step_{:08}.ckpt", state.step));
                Checkpoint::from_state(state).save(&path)?;
            }
        }
    }
    Ok(())
}
