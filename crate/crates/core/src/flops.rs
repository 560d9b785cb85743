//! Analytic training-FLOPs accounting.
//!
//! Per-token forward costs, with `d` the model width, `V` the vocabulary,
//! `T` the sequence length and `h` the head count:
//!
//! | component           | FLOPs per token (per layer where applicable) |
//! |---------------------|----------------------------------------------|
//! | input embedding     | `2·V·d`                                      |
//! | QKV projections     | `2·3·d·(h·d_head)`                           |
//! | attention logits    | `2·T·(h·d_head)`                             |
//! | attention softmax   | `3·h·T`                                      |
//! | attention · values  | `2·T·(h·d_head)`                             |
//! | output projection   | `2·(h·d_head)·d`                             |
//! | feed-forward        | `2·2·d·d_ff`                                 |
//! | final logits        | `2·d·V`                                      |
//!
//! The backward pass costs twice the forward pass, so one training token
//! costs `3×` its forward FLOPs. Uniform sparsity `s` scales the QKV,
//! output-projection and feed-forward terms by `1 − s`; attention
//! score/value products, softmax and embeddings stay dense.

use serde::Serialize;

use crate::error::{ensure, Result};
use crate::model::ModelConfig;
use crate::sparsity::sparse_size;

/// Tokens seen in full-scale pre-training: 200,000 steps × 512 sequences × 1024 tokens.
pub const PRETRAIN_TOKENS: f64 = 200_000.0 * 512.0 * 1024.0;

/// Published training FLOPs (×10²⁰) and savings ratios for the nine
/// preset × sparsity runs, in `(preset, sparsity, flops_e20, ratio)` form.
pub const REFERENCE_TRAIN_FLOPS: [(&str, f64, f64, f64); 9] = [
    ("med", 0.0, 2.677, 1.00),
    ("med", 0.5, 1.727, 0.64),
    ("med", 0.75, 1.252, 0.46),
    ("large", 0.0, 4.248, 1.00),
    ("large", 0.5, 2.645, 0.62),
    ("large", 0.75, 1.840, 0.43),
    ("xl", 0.0, 9.148, 1.00),
    ("xl", 0.5, 5.348, 0.58),
    ("xl", 0.75, 3.448, 0.38),
];

/// Forward FLOPs per token by component, summed over layers, after sparsity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Components {
    pub embedding_input: f64,
    pub qkv: f64,
    pub attention_logits: f64,
    pub softmax: f64,
    pub attention_values: f64,
    pub output_projection: f64,
    pub ffn: f64,
    pub final_logits: f64,
}

impl Components {
    pub fn total(&self) -> f64 {
        self.embedding_input
            + self.qkv
            + self.attention_logits
            + self.softmax
            + self.attention_values
            + self.output_projection
            + self.ffn
            + self.final_logits
    }

    pub fn sparsifiable(&self) -> f64 {
        self.qkv + self.output_projection + self.ffn
    }

    pub fn attention(&self) -> f64 {
        self.attention_logits + self.softmax + self.attention_values
    }

    pub fn embeddings(&self) -> f64 {
        self.embedding_input + self.final_logits
    }

    pub fn named(&self) -> [(&'static str, f64); 8] {
        [
            ("embedding_input", self.embedding_input),
            ("qkv", self.qkv),
            ("attention_logits", self.attention_logits),
            ("softmax", self.softmax),
            ("attention_values", self.attention_values),
            ("output_projection", self.output_projection),
            ("ffn", self.ffn),
            ("final_logits", self.final_logits),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsReport {
    pub sparsity: f64,
    pub seq_len: usize,
    pub components: Components,
    /// Sparsifiable forward FLOPs per token of the dense model.
    pub dense_sparsifiable: f64,
    pub forward_per_token: f64,
    pub dense_forward_per_token: f64,
}

impl FlopsReport {
    /// Sparse over dense cost.
    pub fn ratio(&self) -> f64 {
        self.forward_per_token / self.dense_forward_per_token
    }

    pub fn train_total(&self, tokens: f64) -> f64 {
        3.0 * self.forward_per_token * tokens
    }
}

fn dense_components(c: &ModelConfig, seq: usize) -> Components {
    let d = c.d_model as f64;
    let v = c.vocab_size as f64;
    let t = seq as f64;
    let l = c.n_layers as f64;
    let att = (c.n_heads * c.d_head) as f64;
    let h = c.n_heads as f64;
    Components {
        embedding_input: 2.0 * v * d,
        qkv: l * 2.0 * 3.0 * d * att,
        attention_logits: l * 2.0 * t * att,
        softmax: l * 3.0 * h * t,
        attention_values: l * 2.0 * t * att,
        output_projection: l * 2.0 * att * d,
        ffn: l * 4.0 * d * c.d_ff as f64,
        final_logits: 2.0 * d * v,
    }
}

/// Per-token forward FLOPs at sequence length `config.context`.
pub fn forward_flops_per_token(config: &ModelConfig, s: f64) -> Result<FlopsReport> {
    forward_flops_at(config, config.context, s)
}

pub fn forward_flops_at(config: &ModelConfig, seq: usize, s: f64) -> Result<FlopsReport> {
    ensure!((0.0..1.0).contains(&s), "sparsity {s} outside [0, 1)");
    let dense = dense_components(config, seq);
    let keep = 1.0 - s;
    let components = Components {
        qkv: dense.qkv * keep,
        output_projection: dense.output_projection * keep,
        ffn: dense.ffn * keep,
        ..dense
    };
    Ok(FlopsReport {
        sparsity: s,
        seq_len: seq,
        components,
        dense_sparsifiable: dense.sparsifiable(),
        forward_per_token: components.total(),
        dense_forward_per_token: dense.total(),
    })
}

/// Total training FLOPs (forward + backward) over `tokens` tokens.
pub fn train_flops(config: &ModelConfig, tokens: f64, s: f64) -> Result<f64> {
    ensure!(tokens >= 0.0, "token budget must be non-negative");
    Ok(forward_flops_per_token(config, s)?.train_total(tokens))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsRow {
    pub model: String,
    /// Active matrix parameters.
    pub size: u64,
    pub sparsity: f64,
    pub flops: f64,
    pub ratio: f64,
}

/// One row per `(model, sparsity)` pair, models in the given order.
pub fn ratio_table(models: &[(String, ModelConfig)], sparsities: &[f64], tokens: f64) -> Result<Vec<FlopsRow>> {
    let mut rows = Vec::new();
    for (name, cfg) in models {
        for &s in sparsities {
            let r = forward_flops_per_token(cfg, s)?;
            rows.push(FlopsRow {
                model: name.clone(),
                size: sparse_size(cfg, s),
                sparsity: s,
                flops: r.train_total(tokens),
                ratio: r.ratio(),
            });
        }
    }
    Ok(rows)
}

/// The nine preset rows at the full pre-training budget.
pub fn preset_table() -> Vec<FlopsRow> {
    let models: Vec<(String, ModelConfig)> = ["med", "large", "xl"]
        .iter()
        .map(|n| (n.to_string(), ModelConfig::preset(n).expect("preset exists")))
        .collect();
    ratio_table(&models, &[0.0, 0.5, 0.75], PRETRAIN_TOKENS).expect("valid levels")
}

pub fn table_csv(rows: &[FlopsRow]) -> String {
    let mut out = String::from("model,size,sparsity,flops,ratio\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:e},{:.4}\n",
            r.model, r.size, r.sparsity, r.flops, r.ratio
        ));
    }
    out
}

/// `302M`, `1.21B` style.
pub fn human_count(n: u64) -> String {
    let x = n as f64;
    if x >= 1e9 {
        format!("{:.2}B", x / 1e9)
    } else if x >= 1e6 {
        format!("{:.0}M", x / 1e6)
    } else if x >= 1e3 {
        format!("{:.0}K", x / 1e3)
    } else {
        n.to_string()
    }
}

/// Aligned text table; adds the published value when one is known.
pub fn table_text(rows: &[FlopsRow]) -> String {
    let mut out = format!(
        "{:<8} {:>8} {:>8} {:>16} {:>7} {:>18}\n",
        "model", "size", "sparsity", "train FLOPs", "ratio", "published (x1e20)"
    );
    for r in rows {
        let published = REFERENCE_TRAIN_FLOPS
            .iter()
            .find(|(m, s, _, _)| *m == r.model && *s == r.sparsity)
            .map(|(_, _, f, q)| format!("{f:.3} ({q:.2}x)"))
            .unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{:<8} {:>8} {:>7.0}% {:>16.4e} {:>6.2}x {:>18}\n",
            r.model,
            human_count(r.size),
            r.sparsity * 100.0,
            r.flops,
            r.ratio,
            published
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelConfig {
        let mut c = ModelConfig::new(1, 2, 1, 4, 2);
        c.d_ff = 8;
        c
    }

    #[test]
    fn toy_components_by_hand() {
        let r = forward_flops_per_token(&toy(), 0.0).unwrap();
        let c = r.components;
        assert_eq!(
            [c.embedding_input, c.final_logits, c.qkv, c.attention_logits, c.softmax, c.attention_values, c.output_projection, c.ffn],
            [16., 16., 24., 8., 6., 8., 8., 64.]
        );
        assert_eq!(r.forward_per_token, 150.0);
        assert_eq!(r.forward_per_token * 2.0, 300.0);
        assert_eq!(r.ratio(), 1.0);
    }

    #[test]
    fn toy_half_sparse() {
        let r = forward_flops_per_token(&toy(), 0.5).unwrap();
        assert_eq!(r.dense_sparsifiable, 96.0);
        assert_eq!(r.components.sparsifiable(), 48.0);
        assert_eq!(r.forward_per_token, 102.0);
        assert_eq!(r.forward_per_token, r.dense_forward_per_token - 0.5 * r.dense_sparsifiable);
    }

    #[test]
    fn zero_budget_is_zero() {
        assert_eq!(train_flops(&ModelConfig::med(), 0.0, 0.5).unwrap(), 0.0);
        assert!(train_flops(&ModelConfig::med(), 1.0, 1.0).is_err());
    }

    #[test]
    fn monotone_in_sparsity_and_scale_effect() {
        for c in [ModelConfig::med(), ModelConfig::large(), ModelConfig::xl()] {
            let mut prev = f64::INFINITY;
            for s in [0.0, 0.1, 0.5, 0.75, 0.9] {
                let f = train_flops(&c, PRETRAIN_TOKENS, s).unwrap();
                assert!(f < prev);
                prev = f;
            }
        }
        let med = forward_flops_per_token(&ModelConfig::med(), 0.75).unwrap().ratio();
        let xl = forward_flops_per_token(&ModelConfig::xl(), 0.75).unwrap().ratio();
        assert!(med > xl);
    }

    #[test]
    fn preset_table_layout() {
        let rows = preset_table();
        assert_eq!(rows.len(), 9);
        for r in rows.iter().filter(|r| r.sparsity == 0.0) {
            assert_eq!(r.ratio, 1.0);
        }
        let csv = table_csv(&rows);
        assert_eq!(csv.lines().count(), 10);
        assert!(csv.starts_with("model,size,sparsity,flops,ratio"));
        assert!(table_text(&rows).contains("1.00x"));
    }
}
