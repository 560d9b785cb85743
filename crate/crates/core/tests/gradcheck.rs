mod common;

use sparsedense::finetune::{build_sequence, sequence_loss_on, SoftPrompt, TaskExample};
use sparsedense::model::{init_params, lm_loss_on, ModelConfig, ParamStore};
use sparsedense::sparsity::{apply_in_place, build_masks, SparsityPlan};
use sparsedense::tensor::Tape;
use sparsedense::Tensor;

use common::{gradient_suite, FD_STEP};

#[test]
fn every_op_matches_finite_differences() {
    for (op, seed, err) in gradient_suite(&[0, 1, 2]) {
        assert!(err <= 1e-5, "{op} seed {seed}: relative error {err:e}");
    }
}

fn tiny() -> ModelConfig {
    let mut c = ModelConfig::new(2, 4, 2, 270, 5);
    c.d_ff = 6;
    c
}

/// Perturbs every parameter coordinate of `params` in turn.
fn numeric_grads(params: &ParamStore<f64>, loss: impl Fn(&ParamStore<f64>) -> f64) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    for path in params.paths().map(String::from).collect::<Vec<_>>() {
        let n = params.get(&path).unwrap().numel();
        let g = (0..n)
            .map(|j| {
                let mut p = params.clone();
                p.get_mut(&path).unwrap().data_mut()[j] += FD_STEP;
                let up = loss(&p);
                p.get_mut(&path).unwrap().data_mut()[j] -= 2.0 * FD_STEP;
                (up - loss(&p)) / (2.0 * FD_STEP)
            })
            .collect();
        out.push((path, g));
    }
    out
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let d = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let s = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    // both sides at rounding level: the true gradient is zero
    if s < 1e-8 {
        0.0
    } else {
        d / s
    }
}

#[test]
fn full_model_gradient_with_masks() {
    let mut params = init_params::<f64>(&tiny(), 3).unwrap();
    // larger weights so every path carries signal
    for (_, t) in params.iter_mut() {
        if t.rank() == 2 {
            t.data_mut().iter_mut().for_each(|x| *x *= 20.0);
        }
    }
    let masks = build_masks(&params, &SparsityPlan::uniform(0.5, 1)).unwrap();
    apply_in_place(&masks, &mut params).unwrap();
    let tokens = vec![vec![1u32, 7, 3, 9, 2], vec![4, 4, 8, 0, 5]];
    let loss = |p: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, Some(&masks), false).unwrap();
        let l = lm_loss_on(&mut tape, &b, &tokens).unwrap();
        tape.value(l).unwrap().item()
    };
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, Some(&masks), true).unwrap();
    let l = lm_loss_on(&mut tape, &b, &tokens).unwrap();
    tape.backward(l).unwrap();
    let analytic = b.take_grads(&mut tape).unwrap();
    for (path, num) in numeric_grads(&params, loss) {
        let a = &analytic[&path];
        assert!(rel(a, &num) <= 1e-5, "{path}: {:e}", rel(a, &num));
        if let Some(m) = masks.get(&path) {
            for (g, &on) in a.iter().zip(m.active()) {
                if !on {
                    assert_eq!(*g, 0.0, "{path}: masked coordinate has gradient");
                }
            }
        }
    }
}

#[test]
fn soft_prompt_gradient() {
    let params = init_params::<f64>(&tiny(), 5).unwrap();
    let prompt = SoftPrompt::<f64>::init(2, 4, 9).unwrap();
    let prompt = SoftPrompt::from_tensor(Some(prompt.embedding().unwrap().map(|x| x * 40.0))).unwrap();
    let ex = TaskExample::new(vec![3], vec![6], vec![]).unwrap();
    let seq = build_sequence(&ex, 2, 5).unwrap();
    let loss_for = |e: &Tensor<f64>| {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, None, false).unwrap();
        let p = tape.leaf(e.clone()).unwrap();
        let (l, _) = sequence_loss_on(&mut tape, &b, Some(p), &[&seq]).unwrap();
        tape.value(l).unwrap().item()
    };
    let e = prompt.embedding().unwrap().clone();
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, None, false).unwrap();
    let pv = prompt.bind(&mut tape, true).unwrap().unwrap();
    let (l, _) = sequence_loss_on(&mut tape, &b, Some(pv), &[&seq]).unwrap();
    tape.backward(l).unwrap();
    let a = tape.take_grad(pv).unwrap().unwrap();
    let num: Vec<f64> = (0..e.numel())
        .map(|j| {
            let mut up = e.clone();
            up.data_mut()[j] += FD_STEP;
            let mut dn = e.clone();
            dn.data_mut()[j] -= FD_STEP;
            (loss_for(&up) - loss_for(&dn)) / (2.0 * FD_STEP)
        })
        .collect();
    assert!(a.iter().any(|x| *x != 0.0));
    assert!(rel(&a, &num) <= 1e-5, "{:e}", rel(&a, &num));
}
