//! Space-filling designs on the unit cube.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::rng::{derive_rng, purpose};

/// Plain Latin hypercube sample: one point per 1/n stratum in every column,
/// jittered uniformly within its stratum.
pub fn plain_lhs(n: usize, d: usize, rng: &mut ChaCha12Rng) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, d);
    for j in 0..d {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(rng);
        for i in 0..n {
            out[(i, j)] = (strata[i] as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    out
}

/// Smallest pairwise Euclidean distance among the rows.
pub fn min_pairwise_distance(x: &DMatrix<f64>) -> f64 {
    let n = x.nrows();
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s = 0.0;
            for k in 0..x.ncols() {
                let diff = x[(i, k)] - x[(j, k)];
                s += diff * diff;
            }
            best = best.min(s.sqrt());
        }
    }
    best
}

/// Best-of-`n_candidates` LHS under the maximin criterion (largest minimum
/// pairwise distance). Deterministic under the seed.
pub fn maximin_lhs(n: usize, d: usize, seed: u64, n_candidates: usize) -> DMatrix<f64> {
    assert!(n >= 1 && d >= 1);
    let mut rng = derive_rng(seed, &[purpose::INIT_DESIGN]);
    let mut best: Option<(f64, DMatrix<f64>)> = None;
    for _ in 0..n_candidates.max(1) {
        let cand = plain_lhs(n, d, &mut rng);
        let score = min_pairwise_distance(&cand);
        if best.as_ref().map(|(s, _)| score > *s).unwrap_or(true) {
            best = Some((score, cand));
        }
    }
    best.unwrap().1
}

/// Model-free batch baseline: greedily pick `m` points from a large LHS
/// candidate pool, each maximizing the minimum distance to the existing
/// design and the points already chosen (sequential maximin).
pub fn maximin_batch(existing: &DMatrix<f64>, m: usize, seed: u64, pool_factor: usize) -> DMatrix<f64> {
    let d = existing.ncols();
    let mut rng = derive_rng(seed, &[purpose::MAXIMIN]);
    let pool = plain_lhs((pool_factor.max(8)) * m, d, &mut rng);
    let mut chosen: Vec<usize> = Vec::with_capacity(m);
    for _ in 0..m {
        let mut best_idx = 0;
        let mut best_dist = f64::NEG_INFINITY;
        for c in 0..pool.nrows() {
            if chosen.contains(&c) {
                continue;
            }
            let mut dmin = f64::INFINITY;
            for r in 0..existing.nrows() {
                let mut s = 0.0;
                for k in 0..d {
                    let diff = pool[(c, k)] - existing[(r, k)];
                    s += diff * diff;
                }
                dmin = dmin.min(s);
            }
            for &p in &chosen {
                let mut s = 0.0;
                for k in 0..d {
                    let diff = pool[(c, k)] - pool[(p, k)];
                    s += diff * diff;
                }
                dmin = dmin.min(s);
            }
            if dmin > best_dist {
                best_dist = dmin;
                best_idx = c;
            }
        }
        chosen.push(best_idx);
    }
    DMatrix::from_fn(m, d, |i, j| pool[(chosen[i], j)])
}
