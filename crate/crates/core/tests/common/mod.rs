#![allow(dead_code)]

use genret::model::{Gradients, ModelConfig, ModelParams};
use genret::objectives::{IndexingBatch, RetrievalBatch, NOISE_VARIANTS};
use genret::pq::Docid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor: central differences at step 1e-5 carry ~1e-10 of
/// roundoff, so smaller components are compared absolutely (error < 1e-9).
pub const REL_FLOOR: f64 = 1e-5;

pub fn tiny_config(clusters: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        embed_dim: 4,
        hidden_dim: 8,
        groups: 2,
        clusters,
    }
}

/// Random tiny batches: `n` docs, 4 noisy variants each, `x` queries each.
pub fn tiny_batches(n: usize, x: usize, k: usize, seed: u64) -> (IndexingBatch, RetrievalBatch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = |len: usize| -> Vec<u32> { (0..len).map(|_| rng.random_range(5..16)).collect() };
    let docs: Vec<Vec<u32>> = (0..n).map(|_| tokens(6)).collect();
    let noisy = (0..n)
        .map(|_| (0..NOISE_VARIANTS).map(|_| tokens(5)).collect())
        .collect();
    let queries = (0..n).map(|_| (0..x).map(|_| tokens(3)).collect()).collect();
    let mut docids = Vec::new();
    while docids.len() < n {
        let codes = vec![rng.random_range(0..k as u32), rng.random_range(0..k as u32)];
        let id = Docid::new(codes, k).unwrap();
        if !docids.contains(&id) {
            docids.push(id);
        }
    }
    let keys: Vec<String> = (0..n).map(|i| format!("d{i}")).collect();
    (
        IndexingBatch {
            doc_keys: keys.clone(),
            docs,
            noisy,
            docids: docids.clone(),
        },
        RetrievalBatch {
            doc_keys: keys,
            queries,
            docids,
        },
    )
}

/// Max relative error of `analytic` against central differences of `loss`.
pub fn max_relative_error(params: &ModelParams, analytic: &Gradients, loss: impl Fn(&ModelParams) -> f64) -> f64 {
    let mut probe = params.clone();
    let analytic: Vec<f64> = analytic.slices().concat();
    let mut worst = 0.0f64;
    let mut flat = 0;
    let n_slices = probe.weights.slices().len();
    for s in 0..n_slices {
        let len = probe.weights.slices()[s].len();
        for i in 0..len {
            let orig = probe.weights.slices()[s][i];
            probe.weights.slices_mut()[s][i] = orig + FD_STEP;
            let up = loss(&probe);
            probe.weights.slices_mut()[s][i] = orig - FD_STEP;
            let down = loss(&probe);
            probe.weights.slices_mut()[s][i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[flat];
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            if std::env::var("FD_DEBUG").is_ok() && (a - numeric).abs() / denom > 1e-5 {
                eprintln!("slice {s} idx {i}: analytic {a:e} numeric {numeric:e}");
            }
            worst = worst.max((a - numeric).abs() / denom);
            flat += 1;
        }
    }
    worst
}
