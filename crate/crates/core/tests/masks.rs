mod common;

use sparsedense::checkpoint::Checkpoint;
use sparsedense::model::forward_logits;
use sparsedense::sparsity::{densify, zero_count};
use sparsedense::training::{batch_grads, pretrain, AdamW, AdamWConfig, TrainState};

use common::{desk_corpus, desk_pretrain_config, desk_run};

#[test]
fn masked_weights_stay_zero_and_densify_is_exact() {
    let desk = desk_corpus();
    let st = desk_run(&desk.data, 0.5, 4, 100, "s50");
    let masks = st.masks.as_ref().unwrap();

    let mut expected_zeros = 0u64;
    let mut total = 0u64;
    for path in st.params.sparsifiable_paths() {
        let w = st.params.get(path).unwrap().data();
        let m = masks.get(path).unwrap();
        let moments = st.optimizer.moments_of(path).unwrap();
        for (j, &on) in m.active().iter().enumerate() {
            if !on {
                assert_eq!(w[j].to_bits(), 0.0f32.to_bits(), "{path}[{j}] is not +0.0");
                assert_eq!((moments.m[j], moments.v[j]), (0.0, 0.0), "{path}[{j}] has moments");
            }
        }
        assert_eq!(m.zeros(), zero_count(0.5, w.len()), "{path}");
        assert_eq!(w.iter().filter(|x| **x == 0.0).count(), m.zeros(), "{path}: stray zeros");
        expected_zeros += zero_count(0.5, w.len()) as u64;
        total += w.len() as u64;
    }
    assert_eq!(masks.zeros(), expected_zeros);
    assert_eq!(masks.global_sparsity(), expected_zeros as f64 / total as f64);

    let dense = densify(st.params.clone(), masks.clone()).unwrap();
    for b in 0..10 {
        let batch: Vec<Vec<u32>> = (0..4).map(|i| desk.data.sequence(b * 4 + i).to_vec()).collect();
        let sparse = forward_logits(&st.params, &batch, Some(masks)).unwrap();
        let after = forward_logits(&dense, &batch, None).unwrap();
        assert_eq!(sparse.data(), after.data(), "batch {b}");
    }

    // one dense update moves every formerly masked coordinate
    let batch: Vec<Vec<u32>> = (0..8).map(|i| desk.data.sequence(i).to_vec()).collect();
    let (_, grads) = batch_grads(&dense, None, &batch).unwrap();
    let mut next = dense.clone();
    AdamW::new(AdamWConfig::default()).step_store(&mut next, &grads, 1e-4).unwrap();
    let mut moved = 0usize;
    let mut reactivated = 0usize;
    for (path, m) in masks.iter() {
        let (w0, w1, g) = (dense.get(path).unwrap().data(), next.get(path).unwrap().data(), &grads[path]);
        for (j, &on) in m.active().iter().enumerate() {
            if !on {
                assert_eq!(w0[j], 0.0);
                reactivated += 1;
                if g[j] != 0.0 {
                    assert_ne!(w1[j], 0.0, "{path}[{j}] did not move");
                    moved += 1;
                }
            }
        }
    }
    assert!(moved as f64 > 0.99 * reactivated as f64, "{moved} of {reactivated} moved");
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let desk = desk_corpus();
    let cfg = desk_pretrain_config(40);
    let fresh = |seed| {
        let p = sparsedense::model::init_params::<f32>(&common::toy_config(), seed).unwrap();
        let plan = sparsedense::sparsity::SparsityPlan::uniform(0.75, seed);
        let m = sparsedense::sparsity::build_masks(&p, &plan).unwrap();
        TrainState::new(p, Some(m), AdamWConfig::default(), seed, "s75").unwrap()
    };

    let mut whole = fresh(9);
    pretrain(&mut whole, &desk.data, &cfg, 40).unwrap();

    let mut first = fresh(9);
    pretrain(&mut first, &desk.data, &cfg, 17).unwrap();
    let bytes = Checkpoint::from_state(&first).to_bytes().unwrap();
    drop(first);
    let mut resumed = Checkpoint::<f32>::from_bytes(&bytes).unwrap().into_state().unwrap();
    assert_eq!(resumed.step, 17);
    pretrain(&mut resumed, &desk.data, &cfg, 40).unwrap();

    assert_eq!(resumed.step, whole.step);
    assert_eq!(resumed.trace.losses(), whole.trace.losses());
    for (path, t) in whole.params.iter() {
        let bits = |d: &[f32]| d.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(t.data()), bits(resumed.params.get(path).unwrap().data()), "{path}");
    }
    assert_eq!(resumed.optimizer, whole.optimizer);
}
