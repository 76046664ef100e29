//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use ragaseq::nnet::{self, forward_batch, LossSpec, Mode, ModelConfig, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(head: nnet::Head, n_out: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 7,
        embed_dim: 3,
        lstm_hidden: 4,
        dense1_units: 5,
        n_classes: n_out,
        dropout_rate: 0.3,
        head,
        k_levels: 5,
        subseq_len: 5,
    }
}

/// Random batch of length-`len` sequences over ids 1..vocab, with a leading
/// PAD in the first sequence.
pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, len: usize, vocab: usize) -> Vec<Vec<u32>> {
    let mut b: Vec<Vec<u32>> = (0..n)
        .map(|_| (0..len).map(|_| rng.gen_range(1..vocab as u32)).collect())
        .collect();
    b[0][0] = 0;
    b
}

/// Relative error with an absolute floor of 1e-6 in the denominator, so
/// gradients that are zero up to finite-difference roundoff compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central finite differences of the batch loss with respect to every
/// learnable parameter. The dropout mask is held fixed by reseeding the
/// forward pass identically for each evaluation.
pub fn finite_difference_grads(
    params: &ModelParams<f64>,
    cfg: &ModelConfig,
    batch: &[Vec<u32>],
    spec: &LossSpec<'_>,
    mask_seed: u64,
    h: f64,
) -> Vec<(&'static str, Vec<f64>)> {
    let loss_at = |p: &ModelParams<f64>| -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
        let trace = forward_batch(p, cfg, batch, Mode::Train, &mut rng).unwrap();
        nnet::batch_loss(&trace, spec).unwrap()
    };
    let mut out = Vec::new();
    let names: Vec<&'static str> = params.learnable().iter().map(|(n, _)| *n).collect();
    for (ti, name) in names.into_iter().enumerate() {
        let len = params.learnable()[ti].1.len();
        let mut g = Vec::with_capacity(len);
        for k in 0..len {
            let mut plus = params.clone();
            plus.learnable_mut()[ti].1.data[k] += h;
            let mut minus = params.clone();
            minus.learnable_mut()[ti].1.data[k] -= h;
            g.push((loss_at(&plus) - loss_at(&minus)) / (2.0 * h));
        }
        out.push((name, g));
    }
    out
}

/// Worst relative error between analytic and finite-difference gradients.
pub fn gradient_check(seed: u64, head: nnet::Head) -> (f64, &'static str) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_config(head, 3);
    let params = ModelParams::<f64>::init(&cfg, &mut rng);
    let batch = random_batch(&mut rng, 4, 5, cfg.vocab_size);
    let labels: Vec<usize> = (0..batch.len()).map(|_| rng.gen_range(0..3)).collect();
    let triplets = [(0, 1, 2), (3, 2, 1), (1, 3, 0)];
    let spec = match head {
        nnet::Head::Classifier => LossSpec::Cce { labels: &labels },
        nnet::Head::Embedding => LossSpec::Triplet {
            margin: 1.0,
            triplets: &triplets,
        },
    };
    let mask_seed = seed.wrapping_add(1000);
    let mut mrng = ChaCha8Rng::seed_from_u64(mask_seed);
    let trace = forward_batch(&params, &cfg, &batch, Mode::Train, &mut mrng).unwrap();
    let grads = nnet::backward(&params, &cfg, &trace, &spec).unwrap();
    let numeric = finite_difference_grads(&params, &cfg, &batch, &spec, mask_seed, 1e-5);
    let mut worst = (0.0, "");
    for ((name, analytic), (_, fd)) in grads.learnable().iter().zip(&numeric) {
        for (a, n) in analytic.data.iter().zip(fd) {
            let e = rel_err(*a, *n);
            if e > worst.0 {
                worst = (e, *name);
            }
        }
    }
    worst
}
