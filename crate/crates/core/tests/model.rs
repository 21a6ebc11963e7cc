use std::collections::BTreeSet;

use cpt_core::autodiff::{Optimizer, OptimizerConfig};
use cpt_core::model::{init_prompt_random, Backbone, ModelConfig};

fn config(vocab_size: usize) -> ModelConfig {
    ModelConfig { vocab_size, d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, max_seq_len: 24, prompt_length: 4 }
}

#[test]
fn zero_embeddings_give_uniform_loss() {
    let mut bb = Backbone::<f64>::init(config(40), 3).unwrap();
    for v in bb.groups_mut()[0].tensors[0].data_mut() {
        *v = 0.0;
    }
    let target = [7, 9, 11, 1];
    let loss = bb.prompted_loss(None, &[5, 6, 7], &target).unwrap();
    let expect = 4.0 * 40f64.ln();
    assert!((loss - expect).abs() < 1e-9, "{loss} vs {expect}");
}

#[test]
fn overfit_pair_is_generated_back() {
    let mut bb = Backbone::<f64>::init(config(30), 11).unwrap();
    let (input, target) = ([21, 22, 23, 24], [25, 26, 27, 1]);
    let mut opt = Optimizer::new(OptimizerConfig::default());
    for _ in 0..300 {
        bb.accumulate_grad(&input, &target, 1.0).unwrap();
        let mut groups: Vec<_> = bb.groups_mut().iter_mut().collect();
        opt.apply_update(&mut groups, 1e-2).unwrap();
    }
    let loss = bb.prompted_loss(None, &input, &target).unwrap();
    assert!(loss < 1e-2, "loss {loss}");
    assert_eq!(bb.generate(None, &input, 10).unwrap(), target[..3].to_vec());
}

#[test]
fn loss_is_bit_identical_across_runs() {
    let a = Backbone::<f64>::init(config(30), 5).unwrap();
    let b = Backbone::<f64>::init(config(30), 5).unwrap();
    let p = init_prompt_random(&a, "t", 2);
    let la = a.prompted_loss(Some(&p), &[21, 22], &[23, 1]).unwrap();
    let lb = b.prompted_loss(Some(&p), &[21, 22], &[23, 1]).unwrap();
    assert_eq!(la.to_bits(), lb.to_bits());
}

#[test]
fn random_prompt_rows_come_from_the_table() {
    let mut bb = Backbone::<f64>::init(config(64), 1).unwrap();
    bb.freeze();
    let table = bb.embedding_table();
    let p = init_prompt_random(&bb, "t", 9);
    assert_eq!(p.embeddings().shape(), &[4, 16]);
    for r in 0..4 {
        assert!((0..64).any(|id| table.row(id) == p.embeddings().row(r)));
    }
    assert_eq!(init_prompt_random(&bb, "t", 9), p);
    assert_ne!(init_prompt_random(&bb, "t", 10), p);
}

#[test]
fn random_prompts_cover_the_vocabulary() {
    let mut cfg = config(64);
    cfg.prompt_length = 1;
    let bb = Backbone::<f64>::init(cfg, 1).unwrap();
    let table = bb.embedding_table();
    let mut seen = BTreeSet::new();
    for seed in 0..10_000 {
        let p = init_prompt_random(&bb, "t", seed);
        let id = (0..64).find(|&id| table.row(id) == p.embeddings().row(0)).expect("row from the table");
        seen.insert(id);
    }
    assert!(seen.len() as f64 >= 0.9 * 64.0, "covered {}", seen.len());
}
