//! Fixture builders shared by the criterion benchmarks.

use batchdesign_core::rng::derive_rng;
use batchdesign_core::surrogate::{DesignSet, HetGPModel, HetGPParams};
use nalgebra::DMatrix;
use rand::Rng;

/// A synthetic model with n unique sites in d dimensions (fixed scale so no
/// fit is needed).
pub fn fixture_model(d: usize, n: usize, seed: u64) -> HetGPModel {
    let mut rng = derive_rng(seed, &[0xb0]);
    let x = batchdesign_core::plain_lhs(n, d, &mut rng);
    let mut runs = Vec::new();
    for i in 0..n {
        let loc: Vec<f64> = (0..d).map(|k| x[(i, k)]).collect();
        for _ in 0..(1 + (i % 3)) {
            runs.push((loc.clone(), rng.random::<f64>()));
        }
    }
    let ds = DesignSet::aggregate(&runs).unwrap();
    HetGPModel::from_parts_fixed(
        ds,
        HetGPParams {
            theta: vec![0.3; d],
            theta_noise: vec![0.7; d],
            g_noise: 0.1,
            log_delta: (0..n).map(|i| -2.0 + (i % 5) as f64 * 0.5).collect(),
        },
        1.0,
    )
    .unwrap()
}

/// A deterministic batch of M points in [0,1]^d.
pub fn fixture_batch(m: usize, d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = derive_rng(seed, &[0xb1]);
    DMatrix::from_fn(m, d, |_, _| rng.random::<f64>())
}

