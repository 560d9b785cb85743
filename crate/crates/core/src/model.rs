//! GPT-style decoder: configuration presets, named parameter storage,
//! seeded initialization and the causal forward pass.
//!
//! Blocks are pre-LN with learned absolute position embeddings and biased
//! projections. Weights are stored `[in, out]` so activations multiply on
//! the left. The output projection is tied to the token embedding unless
//! `tie_embeddings` is off.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::sparsity::MaskSet;
use crate::tensor::{EmbedRow, Real, Tape, Tensor, Var, LN_EPS};

pub const INIT_STD: f64 = 0.02;

/// Weight roles subject to pruning, per block.
pub const SPARSIFIABLE_ROLES: [&str; 6] = ["wq", "wk", "wv", "wo", "w_ff_in", "w_ff_out"];

pub const TOKEN_EMBEDDING: &str = "tok_emb";
pub const POSITION_EMBEDDING: &str = "pos_emb";
pub const OUTPUT_PROJECTION: &str = "lm_head";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Maximum sequence length `k`.
    pub context: usize,
    pub tie_embeddings: bool,
}

impl ModelConfig {
    pub fn new(n_layers: usize, d_model: usize, n_heads: usize, vocab_size: usize, context: usize) -> Self {
        ModelConfig {
            n_layers,
            d_model,
            n_heads,
            d_head: d_model / n_heads.max(1),
            d_ff: 4 * d_model,
            vocab_size,
            context,
            tie_embeddings: true,
        }
    }

    /// 24 layers, width 1024, 16 heads of 64.
    pub fn med() -> Self {
        Self::new(24, 1024, 16, 42_384, 1024)
    }

    /// 18 layers, width 1536, 12 heads of 128.
    pub fn large() -> Self {
        Self::new(18, 1536, 12, 42_384, 1024)
    }

    /// 24 layers, width 2048, 16 heads of 128.
    pub fn xl() -> Self {
        Self::new(24, 2048, 16, 42_384, 1024)
    }

    /// Desk-scale model used by the examples and tests.
    pub fn toy() -> Self {
        Self::new(2, 64, 4, 512, 64)
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "med" => Some(Self::med()),
            "large" => Some(Self::large()),
            "xl" => Some(Self::xl()),
            "toy" => Some(Self::toy()),
            _ => None,
        }
    }

    pub const PRESETS: [&'static str; 4] = ["med", "large", "xl", "toy"];

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.n_layers >= 1 && self.d_model >= 1 && self.n_heads >= 1 && self.d_ff >= 1,
            "model dimensions must be positive: {self:?}"
        );
        ensure!(
            self.n_heads * self.d_head == self.d_model,
            "n_heads·d_head = {}·{} must equal d_model = {}",
            self.n_heads,
            self.d_head,
            self.d_model
        );
        ensure!(self.vocab_size >= 1, "vocab_size must be positive");
        ensure!(self.context >= 1, "context window must be at least 1");
        Ok(())
    }

    /// Parameters in the six block weight matrices (`12·L·d²` when `d_ff = 4d`).
    pub fn matrix_params(&self) -> u64 {
        let d = self.d_model as u64;
        let ff = self.d_ff as u64;
        self.n_layers as u64 * (4 * d * d + 2 * d * ff)
    }
}

/// Exact parameter count; `include_embeddings = false` drops the token and
/// position tables and the untied output projection.
pub fn count_params(config: &ModelConfig, include_embeddings: bool) -> u64 {
    let d = config.d_model as u64;
    let ff = config.d_ff as u64;
    let per_layer = 4 * d * d + 2 * d * ff // matrices
        + 4 * d + ff + d // biases
        + 4 * d; // two layer norms
    let mut n = config.n_layers as u64 * per_layer + 2 * d;
    if include_embeddings {
        let v = config.vocab_size as u64;
        n += v * d + config.context as u64 * d;
        if !config.tie_embeddings {
            n += v * d;
        }
    }
    n
}

pub fn layer_path(layer: usize, role: &str) -> String {
    format!("layers.{layer}.{role}")
}

/// Whether `path` names one of the six prunable block matrices.
pub fn is_sparsifiable(path: &str) -> bool {
    let mut parts = path.split('.');
    matches!(
        (parts.next(), parts.next().map(|i| i.parse::<usize>()), parts.next(), parts.next()),
        (Some("layers"), Some(Ok(_)), Some(role), None) if SPARSIFIABLE_ROLES.contains(&role)
    )
}

/// Whether `path` is an embedding table (token, position or output projection).
pub fn is_embedding(path: &str) -> bool {
    matches!(path, TOKEN_EMBEDDING | POSITION_EMBEDDING | OUTPUT_PROJECTION)
}

/// Named model parameters together with the config they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    /// Every parameter path with its shape, in construction order.
    pub fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, ff, v) = (config.d_model, config.d_ff, config.vocab_size);
        let mut out = vec![
            (TOKEN_EMBEDDING.to_string(), vec![v, d]),
            (POSITION_EMBEDDING.to_string(), vec![config.context, d]),
        ];
        for l in 0..config.n_layers {
            let p = |r: &str| layer_path(l, r);
            out.extend([
                (p("ln1_gain"), vec![d]),
                (p("ln1_bias"), vec![d]),
                (p("wq"), vec![d, d]),
                (p("bq"), vec![d]),
                (p("wk"), vec![d, d]),
                (p("bk"), vec![d]),
                (p("wv"), vec![d, d]),
                (p("bv"), vec![d]),
                (p("wo"), vec![d, d]),
                (p("bo"), vec![d]),
                (p("ln2_gain"), vec![d]),
                (p("ln2_bias"), vec![d]),
                (p("w_ff_in"), vec![d, ff]),
                (p("b_ff_in"), vec![ff]),
                (p("w_ff_out"), vec![ff, d]),
                (p("b_ff_out"), vec![d]),
            ]);
        }
        out.push(("ln_f_gain".to_string(), vec![d]));
        out.push(("ln_f_bias".to_string(), vec![d]));
        if !config.tie_embeddings {
            out.push((OUTPUT_PROJECTION.to_string(), vec![d, v]));
        }
        out
    }

    /// All-zero parameters (layer-norm gains included).
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let tensors = Self::layout(config)
            .into_iter()
            .map(|(p, s)| (p, Tensor::zeros(&s)))
            .collect();
        Ok(ParamStore {
            config: config.clone(),
            tensors,
        })
    }

    /// Rebuilds a store from named tensors, checking them against `config`.
    pub fn from_tensors(config: ModelConfig, tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layout = Self::layout(&config);
        ensure!(
            layout.len() == tensors.len(),
            "expected {} parameter tensors, found {}",
            layout.len(),
            tensors.len()
        );
        for (path, shape) in &layout {
            let t = tensors
                .get(path)
                .ok_or_else(|| Error::contract(format!("missing parameter {path}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "parameter shape",
                    lhs: shape.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        Ok(ParamStore { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<T>> {
        self.tensors.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn sparsifiable_paths(&self) -> impl Iterator<Item = &str> {
        self.paths().filter(|p| is_sparsifiable(p))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> u64 {
        self.tensors.values().map(|t| t.numel() as u64).sum()
    }

    pub fn into_tensors(self) -> BTreeMap<String, Tensor<T>> {
        self.tensors
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }

    /// Registers every parameter on `tape`. With `masks`, each masked
    /// weight enters the graph as `m ⊙ θ`.
    pub fn bind(&self, tape: &mut Tape<T>, masks: Option<&MaskSet>, trainable: bool) -> Result<Bound> {
        let mut leaves = BTreeMap::new();
        let mut used = BTreeMap::new();
        for (path, t) in &self.tensors {
            let leaf = tape.leaf(t.clone().with_requires_grad(trainable))?;
            let mut eff = leaf;
            if let Some(mask) = masks.and_then(|m| m.get(path)) {
                if mask.shape() != t.shape() {
                    return Err(Error::Shape {
                        op: "mask",
                        lhs: t.shape().to_vec(),
                        rhs: mask.shape().to_vec(),
                    });
                }
                let m = tape.constant(mask.to_tensor())?;
                eff = tape.mul(leaf, m)?;
            }
            leaves.insert(path.clone(), leaf);
            used.insert(path.clone(), eff);
        }
        if let Some(m) = masks {
            if let Some(p) = m.paths().find(|p| !self.tensors.contains_key(*p)) {
                return Err(Error::contract(format!("mask for unknown parameter {p}")));
            }
        }
        Ok(Bound {
            config: self.config.clone(),
            leaves,
            used,
        })
    }
}

/// Parameters registered on a tape.
pub struct Bound {
    config: ModelConfig,
    leaves: BTreeMap<String, Var>,
    used: BTreeMap<String, Var>,
}

impl Bound {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn var(&self, path: &str) -> Var {
        self.used[path]
    }

    /// Leaf variable of a parameter (where its gradient lands).
    pub fn leaf(&self, path: &str) -> Option<Var> {
        self.leaves.get(path).copied()
    }

    /// Moves the gradients of all parameter leaves out of `tape`.
    pub fn take_grads<T: Real>(&self, tape: &mut Tape<T>) -> Result<BTreeMap<String, Vec<T>>> {
        let mut out = BTreeMap::new();
        for (path, &v) in &self.leaves {
            if let Some(g) = tape.take_grad(v)? {
                out.insert(path.clone(), g);
            }
        }
        Ok(out)
    }
}

/// Seeded initialization: N(0, 0.02²) weights, residual projections scaled
/// by `1/√(2L)`, zero biases, unit layer-norm gains.
pub fn init_params<T: Real>(config: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = Normal::new(0.0, INIT_STD).expect("valid normal");
    let resid_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
    let mut tensors = BTreeMap::new();
    for (path, shape) in ParamStore::<T>::layout(config) {
        let n: usize = shape.iter().product();
        let role = path.rsplit('.').next().unwrap_or(&path);
        let data: Vec<T> = if role.ends_with("_gain") {
            vec![T::one(); n]
        } else if shape.len() == 1 {
            vec![T::zero(); n]
        } else {
            let scale = if role == "wo" || role == "w_ff_out" {
                resid_scale
            } else {
                1.0
            };
            (0..n).map(|_| T::of(base.sample(&mut rng) * scale)).collect()
        };
        tensors.insert(path, Tensor::new(shape, data)?);
    }
    Ok(ParamStore {
        config: config.clone(),
        tensors,
    })
}

fn check_batch(config: &ModelConfig, batch: &[Vec<EmbedRow>]) -> Result<usize> {
    ensure!(!batch.is_empty(), "empty batch");
    let t = batch[0].len();
    ensure!(t >= 1, "empty sequence");
    ensure!(
        batch.iter().all(|s| s.len() == t),
        "sequences in a batch must share one length"
    );
    ensure!(
        t <= config.context,
        "sequence length {t} exceeds context window {}",
        config.context
    );
    Ok(t)
}

pub fn token_rows(tokens: &[u32]) -> Vec<EmbedRow> {
    tokens.iter().map(|&t| EmbedRow::Token(t as usize)).collect()
}

/// Records the decoder on `tape`. Returns logits shaped `[B·T, V]`.
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    batch: &[Vec<EmbedRow>],
    prompt: Option<Var>,
) -> Result<Var> {
    let cfg = bound.config().clone();
    let t = check_batch(&cfg, batch)?;
    let b = batch.len();
    let (d, h, dh) = (cfg.d_model, cfg.n_heads, cfg.d_head);

    let rows: Vec<EmbedRow> = batch.iter().flatten().copied().collect();
    let positions: Vec<EmbedRow> = (0..b).flat_map(|_| (0..t).map(EmbedRow::Token)).collect();
    let tok = tape.embed(bound.var(TOKEN_EMBEDDING), prompt, &rows)?;
    let pos = tape.embed(bound.var(POSITION_EMBEDDING), None, &positions)?;
    let mut x = tape.add(tok, pos)?;

    let attn_scale = 1.0 / (dh as f64).sqrt();
    for l in 0..cfg.n_layers {
        let p = |r: &str| bound.var(&layer_path(l, r));
        let a = tape.layer_norm(x, p("ln1_gain"), p("ln1_bias"), LN_EPS)?;
        let mut heads = [None; 3];
        for (slot, (w, bias)) in heads.iter_mut().zip([("wq", "bq"), ("wk", "bk"), ("wv", "bv")]) {
            let y = tape.matmul(a, p(w))?;
            let y = tape.add_row(y, p(bias))?;
            let y = tape.reshape(y, &[b, t, h, dh])?;
            *slot = Some(y);
        }
        let [q, k, v] = heads.map(Option::unwrap);
        let q = tape.permute(q, &[0, 2, 1, 3])?;
        let q = tape.reshape(q, &[b * h, t, dh])?;
        let kt = tape.permute(k, &[0, 2, 3, 1])?;
        let kt = tape.reshape(kt, &[b * h, dh, t])?;
        let v = tape.permute(v, &[0, 2, 1, 3])?;
        let v = tape.reshape(v, &[b * h, t, dh])?;

        let s = tape.bmm(q, kt)?;
        let s = tape.scale(s, attn_scale)?;
        let s = tape.causal_mask(s)?;
        let pr = tape.softmax(s, 2)?;
        let o = tape.bmm(pr, v)?;
        let o = tape.reshape(o, &[b, h, t, dh])?;
        let o = tape.permute(o, &[0, 2, 1, 3])?;
        let o = tape.reshape(o, &[b * t, d])?;
        let o = tape.matmul(o, p("wo"))?;
        let o = tape.add_row(o, p("bo"))?;
        x = tape.add(x, o)?;

        let m = tape.layer_norm(x, p("ln2_gain"), p("ln2_bias"), LN_EPS)?;
        let f = tape.matmul(m, p("w_ff_in"))?;
        let f = tape.add_row(f, p("b_ff_in"))?;
        let f = tape.gelu(f)?;
        let f = tape.matmul(f, p("w_ff_out"))?;
        let f = tape.add_row(f, p("b_ff_out"))?;
        x = tape.add(x, f)?;
    }
    let x = tape.layer_norm(x, bound.var("ln_f_gain"), bound.var("ln_f_bias"), LN_EPS)?;
    let head = if cfg.tie_embeddings {
        tape.permute(bound.var(TOKEN_EMBEDDING), &[1, 0])?
    } else {
        bound.var(OUTPUT_PROJECTION)
    };
    tape.matmul(x, head)
}

/// Next-token loss over a token batch, recorded on `tape`.
pub fn lm_loss_on<T: Real>(tape: &mut Tape<T>, bound: &Bound, tokens: &[Vec<u32>]) -> Result<Var> {
    ensure!(
        tokens.iter().all(|s| s.len() >= 2),
        "language-model loss needs sequences of at least 2 tokens"
    );
    let batch: Vec<Vec<EmbedRow>> = tokens.iter().map(|s| token_rows(s)).collect();
    let logits = forward(tape, bound, &batch, None)?;
    let (targets, active) = shifted_targets(tokens);
    tape.cross_entropy(logits, &targets, &active)
}

/// Targets for next-token prediction: position `t` predicts token `t+1`;
/// the last position of each sequence is inactive.
pub fn shifted_targets(tokens: &[Vec<u32>]) -> (Vec<usize>, Vec<bool>) {
    let mut targets = Vec::new();
    let mut active = Vec::new();
    for s in tokens {
        for i in 0..s.len() {
            let last = i + 1 == s.len();
            targets.push(if last { 0 } else { s[i + 1] as usize });
            active.push(!last);
        }
    }
    (targets, active)
}

/// Logits `[B, T, V]` for a token batch.
pub fn forward_logits<T: Real>(
    params: &ParamStore<T>,
    tokens: &[Vec<u32>],
    masks: Option<&MaskSet>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, masks, false)?;
    let batch: Vec<Vec<EmbedRow>> = tokens.iter().map(|s| token_rows(s)).collect();
    let logits = forward(&mut tape, &bound, &batch, None)?;
    let v = params.config().vocab_size;
    let out = tape.value(logits)?.clone();
    out.reshape(&[tokens.len(), tokens[0].len(), v])
}

/// Mean next-token cross-entropy (value only).
pub fn lm_loss<T: Real>(params: &ParamStore<T>, tokens: &[Vec<u32>], masks: Option<&MaskSet>) -> Result<T> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, masks, false)?;
    let loss = lm_loss_on(&mut tape, &bound, tokens)?;
    Ok(tape.value(loss)?.item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_matrix_counts() {
        assert_eq!(ModelConfig::med().matrix_params(), 301_989_888);
        assert_eq!(ModelConfig::large().matrix_params(), 509_607_936);
        assert_eq!(ModelConfig::xl().matrix_params(), 1_207_959_552);
        for c in [ModelConfig::med(), ModelConfig::large(), ModelConfig::xl()] {
            c.validate().unwrap();
            assert_eq!(c.d_ff, 4 * c.d_model);
        }
        assert_eq!(ModelConfig::large().d_head, 128);
    }

    #[test]
    fn count_params_matches_brute_force() {
        for tie in [true, false] {
            let mut c = ModelConfig::new(3, 8, 2, 11, 5);
            c.tie_embeddings = tie;
            let store = ParamStore::<f32>::zeros(&c).unwrap();
            assert_eq!(count_params(&c, true), store.numel());
            let non_emb: u64 = store
                .iter()
                .filter(|(p, _)| !is_embedding(p))
                .map(|(_, t)| t.numel() as u64)
                .sum();
            assert_eq!(count_params(&c, false), non_emb);
        }
    }

    #[test]
    fn init_shapes_and_determinism() {
        let c = ModelConfig::new(1, 8, 2, 16, 4);
        let a = init_params::<f32>(&c, 7).unwrap();
        let b = init_params::<f32>(&c, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.get("layers.0.wq").unwrap().shape(), &[8, 8]);
        assert_eq!(a.get("layers.0.w_ff_in").unwrap().shape(), &[8, 32]);
        assert!(a.get("layers.0.bq").unwrap().data().iter().all(|&v| v == 0.0));
        let c2 = init_params::<f32>(&c, 8).unwrap();
        assert_ne!(a, c2);
    }

    #[test]
    fn init_std_close_to_target() {
        let c = ModelConfig::new(1, 256, 4, 16, 4);
        let p = init_params::<f64>(&c, 1).unwrap();
        let w = p.get("layers.0.w_ff_in").unwrap().data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - INIT_STD).abs() < 0.1 * INIT_STD, "std {std}");
    }

    #[test]
    fn sparsifiable_paths_are_exactly_the_six_roles() {
        let c = ModelConfig::new(2, 8, 2, 16, 4);
        let p = ParamStore::<f32>::zeros(&c).unwrap();
        let got: Vec<&str> = p.sparsifiable_paths().collect();
        assert_eq!(got.len(), 12);
        assert!(!is_sparsifiable(TOKEN_EMBEDDING));
        assert!(!is_sparsifiable("layers.0.bq"));
        assert!(!is_sparsifiable("layers.0.ln1_gain"));
        assert!(!is_sparsifiable("layers.x.wq"));
    }

    #[test]
    fn logits_shape_and_zero_head() {
        let c = ModelConfig::new(1, 8, 2, 10, 6);
        let mut p = init_params::<f64>(&c, 3).unwrap();
        let toks = vec![vec![1, 2, 3], vec![4, 5, 6]];
        let out = forward_logits(&p, &toks, None).unwrap();
        assert_eq!(out.shape(), &[2, 3, 10]);
        p.get_mut(TOKEN_EMBEDDING).unwrap().data_mut().fill(0.0);
        let out = forward_logits(&p, &toks, None).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sequence_longer_than_context_rejected() {
        let c = ModelConfig::new(1, 8, 2, 10, 3);
        let p = init_params::<f32>(&c, 0).unwrap();
        let err = forward_logits(&p, &[vec![1, 2, 3, 4]], None).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn zero_params_give_uniform_loss() {
        let mut c = ModelConfig::new(2, 8, 2, 4, 8);
        c.tie_embeddings = false;
        let p = ParamStore::<f64>::zeros(&c).unwrap();
        let l = lm_loss(&p, &[vec![0, 1, 2, 3], vec![3, 3, 1, 0]], None).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn causality_under_perturbation() {
        let c = ModelConfig::new(2, 8, 2, 12, 8);
        let p = init_params::<f64>(&c, 11).unwrap();
        let base = vec![vec![1, 5, 7, 2, 9, 3]];
        let a = forward_logits(&p, &base, None).unwrap();
        for t in 0..5 {
            let mut pert = base.clone();
            pert[0][t + 1] = (pert[0][t + 1] + 4) % 12;
            let b = forward_logits(&p, &pert, None).unwrap();
            let v = 12;
            assert_eq!(&a.data()[..(t + 1) * v], &b.data()[..(t + 1) * v], "position {t}");
            assert_ne!(&a.data()[(t + 1) * v..], &b.data()[(t + 1) * v..]);
        }
    }

    #[test]
    fn loss_invariant_to_batch_order() {
        let c = ModelConfig::new(1, 8, 2, 12, 8);
        let p = init_params::<f64>(&c, 5).unwrap();
        let x = vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8], vec![9, 10, 11, 0]];
        let y = vec![x[2].clone(), x[0].clone(), x[1].clone()];
        let (lx, ly) = (lm_loss(&p, &x, None).unwrap(), lm_loss(&p, &y, None).unwrap());
        assert!((lx - ly).abs() < 1e-12);
    }
}
