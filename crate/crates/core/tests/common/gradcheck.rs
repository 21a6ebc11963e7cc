//! Finite-difference checks on small networks and a tiny transformer.

use cpt_core::autodiff::{finite_difference_check, AutodiffError, Graph, Tensor, Var};
use cpt_core::model::{init_prompt_random, Backbone, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;

fn tiny(seed: u64) -> Backbone<f64> {
    let cfg = ModelConfig { vocab_size: 26, d_model: 8, n_layers: 1, n_heads: 2, d_ff: 12, max_seq_len: 24, prompt_length: 3 };
    Backbone::init(cfg, seed).unwrap()
}

fn ids(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(5..26)).collect()
}

fn lift(e: cpt_core::model::ModelError) -> AutodiffError {
    AutodiffError::Precondition(e.to_string())
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(vec![rows, cols], |_| rng.gen_range(-scale..scale))
}

pub fn two_layer_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = vec![
        random_tensor(&mut rng, 4, 5, 1.0),
        random_tensor(&mut rng, 5, 6, 0.8),
        random_tensor(&mut rng, 1, 6, 0.3),
        random_tensor(&mut rng, 6, 3, 0.8),
        random_tensor(&mut rng, 1, 3, 0.3),
    ];
    let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
    finite_difference_check(
        |g: &mut Graph<'_, f64>, v: &[Var]| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add_row(h, v[2])?;
            let h = g.gelu(h)?;
            let o = g.matmul(h, v[3])?;
            let o = g.add_row(o, v[4])?;
            g.cross_entropy(o, &targets)
        },
        &params,
        EPS,
    )
    .unwrap()
}

pub fn prompt_error(seed: u64) -> f64 {
    let backbone = tiny(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (input, mut target) = (ids(&mut rng, 6), ids(&mut rng, 3));
    target.push(1);
    let prompt = init_prompt_random(&backbone, "t", seed);
    finite_difference_check(
        |g: &mut Graph<'_, f64>, v: &[Var]| {
            let b = backbone.bind_inference(g);
            backbone.loss_on_graph(g, &b, &input, Some(v[0]), &target).map_err(lift)
        },
        &[prompt.embeddings().clone()],
        EPS,
    )
    .unwrap()
}

pub fn backbone_error(seed: u64) -> f64 {
    let backbone = tiny(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb0b);
    let (input, mut target) = (ids(&mut rng, 5), ids(&mut rng, 2));
    target.push(1);
    let prompt = init_prompt_random(&backbone, "t", seed);
    let mut params: Vec<Tensor<f64>> = backbone.groups().iter().flat_map(|g| g.tensors.clone()).collect();
    params.push(prompt.embeddings().clone());
    let counts: Vec<usize> = backbone.groups().iter().map(|g| g.tensors.len()).collect();
    finite_difference_check(
        |g: &mut Graph<'_, f64>, v: &[Var]| {
            let mut rest = v;
            let mut groups = Vec::new();
            for &n in &counts {
                groups.push(rest[..n].to_vec());
                rest = &rest[n..];
            }
            let b = backbone.bind_vars(groups).map_err(lift)?;
            backbone.loss_on_graph(g, &b, &input, Some(rest[0]), &target).map_err(lift)
        },
        &params,
        EPS,
    )
    .unwrap()
}
