#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sparsedense::data::{learn_bpe, pack_sequences, PackedDataset, Vocab, EOD};
use sparsedense::model::{init_params, ModelConfig};
use sparsedense::sparsity::{build_masks, SparsityPlan};
use sparsedense::synth::regular_corpus;
use sparsedense::tensor::{EmbedRow, Tape, Tensor, Var};
use sparsedense::training::{pretrain, AdamWConfig, PretrainConfig, Schedule, TrainState};

pub const FD_STEP: f64 = 1e-6;

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Records `f` on a fresh tape and reduces its output to `Σ y ⊙ w` with a
/// fixed random weight `w`, so every output coordinate matters.
fn weighted_loss<F>(inputs: &[Tensor<f64>], weight_seed: u64, f: &F) -> (Tape<f64>, Vec<Var>, Var)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone()).unwrap()).collect();
    let y = f(&mut tape, &vars);
    let shape = tape.shape(y).unwrap().to_vec();
    let w = randn(&shape, &mut ChaCha8Rng::seed_from_u64(weight_seed));
    let w = tape.constant(w).unwrap();
    let p = tape.mul(y, w).unwrap();
    let l = tape.sum(p).unwrap();
    (tape, vars, l)
}

/// Largest relative error `‖a − n‖ / (‖a‖ + ‖n‖)` over the inputs, comparing
/// backward-pass gradients `a` with central differences `n`.
pub fn grad_check<F>(inputs: &[Tensor<f64>], weight_seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let (mut tape, vars, l) = weighted_loss(inputs, weight_seed, &f);
    tape.backward(l).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).unwrap().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.value(v).unwrap().numel()]))
        .collect();
    let eval = |ins: &[Tensor<f64>]| {
        let (tape, _, l) = weighted_loss(ins, weight_seed, &f);
        tape.value(l).unwrap().item()
    };
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let mut num = vec![0.0; a.len()];
        for (j, slot) in num.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            *slot = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        }
        let diff = a.iter().zip(&num).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt() + num.iter().map(|x| x * x).sum::<f64>().sqrt();
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

pub type OpCase = (&'static str, Box<dyn Fn(&mut ChaCha8Rng) -> f64>);

/// One finite-difference check per differentiable operation.
pub fn op_cases(weight_seed: u64) -> Vec<OpCase> {
    let ws = weight_seed;
    vec![
        ("matmul", Box::new(move |r: &mut ChaCha8Rng| {
            grad_check(&[randn(&[3, 4], r), randn(&[4, 2], r)], ws, |t, v| t.matmul(v[0], v[1]).unwrap())
        })),
        ("bmm", Box::new(move |r: &mut ChaCha8Rng| {
            grad_check(&[randn(&[2, 3, 4], r), randn(&[2, 4, 3], r)], ws, |t, v| t.bmm(v[0], v[1]).unwrap())
        })),
        ("add", Box::new(move |r: &mut ChaCha8Rng| {
            grad_check(&[randn(&[3, 4], r), randn(&[3, 4], r)], ws, |t, v| t.add(v[0], v[1]).unwrap())
        })),
        ("mul", Box::new(move |r: &mut ChaCha8Rng| {
            grad_check(&[randn(&[3, 4], r), randn(&[3, 4], r)], ws, |t, v| t.mul(v[0], v[1]).unwrap())
        })),
        ("add_row", Box::new(move |r: &mut ChaCha8Rng| {
            grad_check(&[randn(&[3, 4], r), randn(&[4], r)], ws, |t, v| t.add_row(v[0], v[1]).unwrap())
        })),
        ("scale", Box::new(move |r: &mut ChaCha8Rng| {
            grad_check(&[randn(&[3, 4], r)], ws, |t, v| t.scale(v[0], -0.37).unwrap())
        })),
        ("reshape", Box::new(move |r: &mut ChaCha8Rng| {
            grad_check(&[randn(&[3, 4], r)], ws, |t, v| t.reshape(v[0], &[2, 6]).unwrap())
        })),
        ("permute", Box::new(move |r: &mut ChaCha8Rng| {
            grad_check(&[randn(&[2, 3, 4], r)], ws, |t, v| t.permute(v[0], &[2, 0, 1]).unwrap())
        })),
        ("softmax", Box::new(move |r: &mut ChaCha8Rng| {
            grad_check(&[randn(&[3, 4], r)], ws, |t, v| t.softmax(v[0], 1).unwrap())
        })),
        ("softmax_axis0", Box::new(move |r: &mut ChaCha8Rng| {
            grad_check(&[randn(&[3, 4], r)], ws, |t, v| t.softmax(v[0], 0).unwrap())
        })),
        // masked entries are -inf, so the mask is checked through the softmax it feeds
        ("causal_mask", Box::new(move |r: &mut ChaCha8Rng| {
            grad_check(&[randn(&[3, 4, 4], r)], ws, |t, v| {
                let m = t.causal_mask(v[0]).unwrap();
                t.softmax(m, 2).unwrap()
            })
        })),
        ("layer_norm", Box::new(move |r: &mut ChaCha8Rng| {
            grad_check(&[randn(&[3, 4], r), randn(&[4], r), randn(&[4], r)], ws, |t, v| {
                t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()
            })
        })),
        ("gelu", Box::new(move |r: &mut ChaCha8Rng| {
            grad_check(&[randn(&[3, 4], r)], ws, |t, v| t.gelu(v[0]).unwrap())
        })),
        ("embed", Box::new(move |r: &mut ChaCha8Rng| {
            let rows = [EmbedRow::Token(2), EmbedRow::Prompt(1), EmbedRow::Token(2), EmbedRow::Prompt(0), EmbedRow::Token(0)];
            grad_check(&[randn(&[3, 4], r), randn(&[2, 4], r)], ws, move |t, v| {
                t.embed(v[0], Some(v[1]), &rows).unwrap()
            })
        })),
        ("cross_entropy", Box::new(move |r: &mut ChaCha8Rng| {
            grad_check(&[randn(&[3, 4], r)], ws, |t, v| {
                t.cross_entropy(v[0], &[1, 3, 0], &[true, false, true]).unwrap()
            })
        })),
        ("sum", Box::new(move |r: &mut ChaCha8Rng| {
            grad_check(&[randn(&[3, 4], r)], ws, |t, v| t.sum(v[0]).unwrap())
        })),
    ]
}

/// `(op, seed, relative error)` for every op and seed.
pub fn gradient_suite(seeds: &[u64]) -> Vec<(&'static str, u64, f64)> {
    let mut out = Vec::new();
    for &seed in seeds {
        for (name, case) in op_cases(seed.wrapping_mul(31).wrapping_add(7)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            out.push((name, seed, case(&mut rng)));
        }
    }
    out
}

pub const TOY_VOCAB: usize = 512;
pub const TOY_MSL: usize = 32;

/// Two-layer, width-64 decoder with a 512-token vocabulary.
pub fn toy_config() -> ModelConfig {
    ModelConfig::new(2, 64, 4, TOY_VOCAB, 64)
}

pub struct Desk {
    pub vocab: Vocab,
    pub texts: Vec<String>,
    pub data: PackedDataset,
}

/// Synthetic corpus, its 512-token vocabulary and packed sequences.
pub fn desk_corpus() -> Desk {
    let docs = regular_corpus(400, 1).unwrap();
    let texts: Vec<String> = docs.iter().map(|d| d.text()).collect();
    let vocab = learn_bpe(&texts, TOY_VOCAB, 16).unwrap();
    let enc = vocab.encode_all(&texts);
    let data = pack_sequences(&enc, TOY_MSL, EOD).unwrap();
    Desk { vocab, texts, data }
}

pub fn desk_pretrain_config(steps: u64) -> PretrainConfig {
    PretrainConfig::new(Schedule::new(3e-3, steps), 8)
}

/// Toy pre-training run at sparsity `s` (0 = dense).
pub fn desk_run(data: &PackedDataset, s: f64, seed: u64, steps: u64, label: &str) -> TrainState<f32> {
    let params = init_params::<f32>(&toy_config(), seed).unwrap();
    let masks = (s > 0.0).then(|| build_masks(&params, &SparsityPlan::uniform(s, seed)).unwrap());
    let mut st = TrainState::new(params, masks, AdamWConfig::default(), seed, label).unwrap();
    pretrain(&mut st, data, &desk_pretrain_config(steps), steps).unwrap();
    st
}
