//! Static unstructured weight masks.
//!
//! Masks are drawn once, uniformly at random, before pre-training. Masked
//! weights are zeroed at that point and their gradients are zeroed every
//! step, so with zero-initialized optimizer moments they stay exactly zero.
//! [`densify`] retires the masks for fine-tuning.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::{is_sparsifiable, ModelConfig, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Levels {
    /// One level for every sparsifiable matrix.
    Uniform(f64),
    PerPath(BTreeMap<String, f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityPlan {
    pub levels: Levels,
    pub seed: u64,
}

impl SparsityPlan {
    pub fn uniform(level: f64, seed: u64) -> Self {
        SparsityPlan {
            levels: Levels::Uniform(level),
            seed,
        }
    }

    pub fn per_path(levels: BTreeMap<String, f64>, seed: u64) -> Self {
        SparsityPlan {
            levels: Levels::PerPath(levels),
            seed,
        }
    }
}

/// Zeros in a tensor of `n` entries at level `s` (round half up).
pub fn zero_count(level: f64, n: usize) -> usize {
    ((level * n as f64) + 0.5).floor() as usize
}

/// Binary mask over one parameter; `true` marks an active weight.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    active: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, active: Vec<bool>) -> Result<Self> {
        let n: usize = shape.iter().product();
        ensure!(
            n == active.len(),
            "mask of shape {shape:?} needs {n} entries, got {}",
            active.len()
        );
        Ok(Mask { shape, active })
    }

    pub fn ones(shape: &[usize]) -> Self {
        Mask {
            shape: shape.to_vec(),
            active: vec![true; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn zeros(&self) -> usize {
        self.active.iter().filter(|&&a| !a).count()
    }

    pub fn level(&self) -> f64 {
        self.zeros() as f64 / self.len() as f64
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self
            .active
            .iter()
            .map(|&a| if a { T::one() } else { T::zero() })
            .collect();
        Tensor::new(self.shape.clone(), data).expect("mask shape is consistent")
    }
}

/// Which parameter total divides the zero count in [`MaskSet::global_sparsity_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// The six block matrices only (matches the reported sparse model sizes).
    Sparsifiable,
    /// Every parameter of the dense model, embeddings included.
    AllParameters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    masks: BTreeMap<String, Mask>,
    plan: SparsityPlan,
    sparsifiable_total: u64,
    all_total: u64,
}

impl MaskSet {
    pub fn from_parts(
        masks: BTreeMap<String, Mask>,
        plan: SparsityPlan,
        sparsifiable_total: u64,
        all_total: u64,
    ) -> Result<Self> {
        for p in masks.keys() {
            ensure!(is_sparsifiable(p), "mask on dense-only parameter {p}");
        }
        Ok(MaskSet {
            masks,
            plan,
            sparsifiable_total,
            all_total,
        })
    }

    pub fn plan(&self) -> &SparsityPlan {
        &self.plan
    }

    pub fn get(&self, path: &str) -> Option<&Mask> {
        self.masks.get(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mask)> {
        self.masks.iter()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.masks.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn sparsifiable_total(&self) -> u64 {
        self.sparsifiable_total
    }

    pub fn all_total(&self) -> u64 {
        self.all_total
    }

    pub fn zeros(&self) -> u64 {
        self.masks.values().map(|m| m.zeros() as u64).sum()
    }

    /// Fraction of inactive weights among the sparsifiable matrices.
    pub fn global_sparsity(&self) -> f64 {
        self.global_sparsity_with(Denominator::Sparsifiable)
    }

    pub fn global_sparsity_with(&self, denom: Denominator) -> f64 {
        let n = match denom {
            Denominator::Sparsifiable => self.sparsifiable_total,
            Denominator::AllParameters => self.all_total,
        };
        if n == 0 {
            0.0
        } else {
            self.zeros() as f64 / n as f64
        }
    }

    /// Active weights remaining in the sparsifiable matrices.
    pub fn remaining(&self) -> u64 {
        self.sparsifiable_total - self.zeros()
    }
}

/// Draws random masks for `params` according to `plan`.
pub fn build_masks<T: Real>(params: &ParamStore<T>, plan: &SparsityPlan) -> Result<MaskSet> {
    let mut targets: Vec<(&str, f64)> = match &plan.levels {
        Levels::Uniform(s) => params.sparsifiable_paths().map(|p| (p, *s)).collect(),
        Levels::PerPath(levels) => {
            let mut out = Vec::with_capacity(levels.len());
            for (p, &s) in levels {
                ensure!(
                    is_sparsifiable(p),
                    "sparsity plan targets {p}, which must stay dense"
                );
                ensure!(params.get(p).is_some(), "sparsity plan names unknown parameter {p}");
                out.push((p.as_str(), s));
            }
            out
        }
    };
    targets.sort_by(|a, b| a.0.cmp(b.0));

    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut masks = BTreeMap::new();
    for (path, s) in targets {
        ensure!(
            (0.0..1.0).contains(&s),
            "sparsity level {s} for {path} outside [0, 1)"
        );
        let shape = params.get(path).expect("checked above").shape().to_vec();
        let n: usize = shape.iter().product();
        let mut active = vec![true; n];
        for i in sample(&mut rng, n, zero_count(s, n)) {
            active[i] = false;
        }
        masks.insert(path.to_string(), Mask { shape, active });
    }
    let sparsifiable_total = params
        .iter()
        .filter(|(p, _)| is_sparsifiable(p))
        .map(|(_, t)| t.numel() as u64)
        .sum();
    Ok(MaskSet {
        masks,
        plan: plan.clone(),
        sparsifiable_total,
        all_total: params.numel(),
    })
}

fn check_shape<T: Real>(path: &str, t: &Tensor<T>, m: &Mask) -> Result<()> {
    ensure!(
        t.shape() == m.shape(),
        "mask for {path} has shape {:?}, parameter has {:?}",
        m.shape(),
        t.shape()
    );
    Ok(())
}

/// Zeroes masked weights in place (writes `+0.0`).
pub fn apply_in_place<T: Real>(masks: &MaskSet, params: &mut ParamStore<T>) -> Result<()> {
    for (path, m) in masks.iter() {
        let t = params
            .get_mut(path)
            .ok_or_else(|| Error::contract(format!("mask for unknown parameter {path}")))?;
        check_shape(path, t, m)?;
        for (w, &a) in t.data_mut().iter_mut().zip(m.active()) {
            if !a {
                *w = T::zero();
            }
        }
    }
    Ok(())
}

/// Effective parameters `m ⊙ θ`; unmasked paths pass through.
pub fn apply<T: Real>(masks: &MaskSet, params: &ParamStore<T>) -> Result<ParamStore<T>> {
    let mut out = params.clone();
    apply_in_place(masks, &mut out)?;
    Ok(out)
}

/// Zeroes gradient entries of inactive weights.
pub fn mask_gradients<T: Real>(grads: &mut BTreeMap<String, Vec<T>>, masks: &MaskSet) -> Result<()> {
    for (path, m) in masks.iter() {
        if let Some(g) = grads.get_mut(path) {
            ensure!(
                g.len() == m.len(),
                "gradient for {path} has {} entries, mask has {}",
                g.len(),
                m.len()
            );
            for (gi, &a) in g.iter_mut().zip(m.active()) {
                if !a {
                    *gi = T::zero();
                }
            }
        }
    }
    Ok(())
}

/// Retires the masks. Masked positions come back as exact zeros and every
/// weight is trainable from here on.
pub fn densify<T: Real>(mut params: ParamStore<T>, masks: MaskSet) -> Result<ParamStore<T>> {
    apply_in_place(&masks, &mut params)?;
    drop(masks);
    Ok(params)
}

/// Active matrix parameters of `config` under a uniform level `s`.
pub fn sparse_size(config: &ModelConfig, s: f64) -> u64 {
    let d = config.d_model;
    let ff = config.d_ff;
    let per_layer = 4 * (d * d - zero_count(s, d * d)) + 2 * (d * ff - zero_count(s, d * ff));
    config.n_layers as u64 * per_layer as u64
}
