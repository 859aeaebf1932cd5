//! Oracle checks for the batch IMSPE machinery: dense rebuilds, Monte Carlo
//! integration, finite-difference gradients, and the qualitative
//! attraction/repulsion behavior of the criterion.

mod common;

use batchdesign_core::acquisition::{
    imspe_batch, imspe_batch_grad, imspe_batch_with_multiplicity, imspe_current, optimize_batch,
    workspace, AcqConfig,
};
use batchdesign_core::rng::derive_rng;
use batchdesign_core::surrogate::{DesignSet, FitConfig, HetGPModel, HetGPParams};
use batchdesign_core::testbeds::Testbed;
use common::{dense_imspe, random_batch, random_model};
use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

#[test]
fn single_point_batch_matches_dense_replicate_imspe() {
    // M = 1 at an existing unique location reproduces the one-at-a-time
    // replicate IMSPE from a dense rebuild.
    let model = random_model(1, 8, 21);
    let ws = workspace(&model).unwrap();
    let loc = model.design().unique_rows()[3].clone();
    let xtil = DMatrix::from_row_slice(1, 1, &[loc[0]]);
    let fast = imspe_batch(&ws, &model, &xtil).unwrap();
    let dense = dense_imspe(&model, &[(loc, 1)]);
    assert!((fast - dense).abs() < 1e-9, "fast {fast} dense {dense}");
}

#[test]
fn batch_update_matches_dense_rebuild() {
    for seed in 0..12 {
        let d = 1 + (seed % 3) as usize;
        let model = random_model(d, 6 + (seed % 5) as usize, 100 + seed);
        let ws = workspace(&model).unwrap();
        let m = 1 + (seed % 4) as usize;
        let xtil = random_batch(m, d, 200 + seed);
        let fast = imspe_batch(&ws, &model, &xtil).unwrap();
        let batch: Vec<(Vec<f64>, usize)> = (0..m)
            .map(|r| ((0..d).map(|k| xtil[(r, k)]).collect(), 1))
            .collect();
        let dense = dense_imspe(&model, &batch);
        assert!(
            (fast - dense).abs() < 1e-9,
            "seed {seed}: fast {fast} dense {dense}"
        );
    }
}

#[test]
fn multiplicity_aware_batch_matches_dense_rebuild() {
    let model = random_model(2, 7, 33);
    let ws = workspace(&model).unwrap();
    let xtil = random_batch(3, 2, 44);
    let mults = [3usize, 1, 2];
    let fast = imspe_batch_with_multiplicity(&ws, &model, &xtil, &mults).unwrap();
    let batch: Vec<(Vec<f64>, usize)> = (0..3)
        .map(|r| (vec![xtil[(r, 0)], xtil[(r, 1)]], mults[r]))
        .collect();
    let dense = dense_imspe(&model, &batch);
    assert!((fast - dense).abs() < 1e-9, "fast {fast} dense {dense}");
}

#[test]
fn imspe_matches_monte_carlo_integral() {
    // I_N is the integral of the nugget-free predictive variance; check
    // against plain MC with 1e5 uniforms on a 1d model.
    let model = random_model(1, 10, 7);
    let i_n = imspe_current(&model).unwrap();
    let mut rng = derive_rng(99, &[1]);
    let n_mc = 100_000;
    let xs = DMatrix::from_fn(n_mc, 1, |_, _| rng.random::<f64>());
    let pred = model.predict(&xs).unwrap();
    // Fixed-scale model: var_mean is already on the internal scale.
    let mc = pred.var_mean.iter().sum::<f64>() / n_mc as f64;
    assert!(
        (i_n - mc).abs() / mc < 0.005,
        "analytic {i_n} vs MC {mc}"
    );
}

#[test]
fn replicate_anywhere_decreases_imspe() {
    let model = random_model(1, 6, 55);
    let i_n = imspe_current(&model).unwrap();
    for i in 0..model.design().n_unique() {
        let loc = model.design().unique_rows()[i].clone();
        let dense = dense_imspe(&model, &[(loc, 1)]);
        assert!(dense < i_n, "site {i}: {dense} !< {i_n}");
    }
}

#[test]
fn gradient_matches_finite_differences_across_shapes() {
    let mut checked = 0usize;
    for (case, &(d, m, n)) in [
        (1usize, 1usize, 5usize),
        (1, 3, 8),
        (2, 3, 10),
        (2, 8, 6),
        (4, 1, 12),
        (4, 8, 9),
    ]
    .iter()
    .enumerate()
    {
        for rep in 0..3 {
            let seed = 1000 + (case * 17 + rep) as u64;
            let model = random_model(d, n, seed);
            let ws = workspace(&model).unwrap();
            let xtil = random_batch(m, d, seed ^ 0x5555);
            let grad = imspe_batch_grad(&ws, &model, &xtil).unwrap();
            let h = 1e-5;
            let mut max_scale: f64 = 0.0;
            let mut fds = DMatrix::zeros(m, d);
            for i in 0..m {
                for p in 0..d {
                    let mut xp = xtil.clone();
                    xp[(i, p)] += h;
                    let mut xm = xtil.clone();
                    xm[(i, p)] -= h;
                    let fp = imspe_batch(&ws, &model, &xp).unwrap();
                    let fm = imspe_batch(&ws, &model, &xm).unwrap();
                    fds[(i, p)] = (fp - fm) / (2.0 * h);
                    max_scale = max_scale.max(fds[(i, p)].abs());
                }
            }
            let _ = max_scale;
            for i in 0..m {
                for p in 0..d {
                    let err = (grad[(i, p)] - fds[(i, p)]).abs();
                    let tol = 1e-4 * fds[(i, p)].abs() + 1e-8;
                    assert!(
                        err <= tol,
                        "d={d} m={m} n={n} rep={rep} entry ({i},{p}): analytic {} fd {}",
                        grad[(i, p)],
                        fds[(i, p)]
                    );
                }
            }
            checked += 1;
        }
    }
    assert_eq!(checked, 18);
}

#[test]
fn attraction_and_repulsion_by_noise_regime() {
    // 1d two-regime construction on a dense grid of sites: one high-noise,
    // high-count stack at 0.3 (thirty replicates, unit relative noise) and
    // quiet doubly-run sites elsewhere. A batch point just beside the stack
    // is pulled onto it (replication pays where noise is high and the stack
    // already carries weight); a batch point beside a quiet site is pushed
    // away toward unsampled ground.
    let mut runs = Vec::new();
    let mut log_delta = Vec::new();
    for i in 1..=9 {
        let x = 0.1 * i as f64;
        let (reps, ld) = if (x - 0.3).abs() < 1e-9 {
            (30, 0.0)
        } else {
            (2, -7.0)
        };
        for r in 0..reps {
            runs.push((vec![x], 0.1 * r as f64));
        }
        log_delta.push(ld);
    }
    let ds = DesignSet::aggregate(&runs).unwrap();
    let model = HetGPModel::from_parts_fixed(
        ds,
        HetGPParams {
            theta: vec![0.05],
            theta_noise: vec![0.3],
            g_noise: 1e-3,
            log_delta,
        },
        1.0,
    )
    .unwrap();
    let ws = workspace(&model).unwrap();

    // Radial derivative toward the noisy stack: just right of 0.3 the
    // IMSPE increases with x, so descent moves the point onto the stack.
    for xq in [0.301, 0.302, 0.305] {
        let x = DMatrix::from_row_slice(1, 1, &[xq]);
        let g = imspe_batch_grad(&ws, &model, &x).unwrap()[(0, 0)];
        assert!(g > 0.0, "expected attraction toward 0.3 at {xq}, grad {g}");
    }

    // Beside a quiet site the force points away from it on both sides
    // (nothing to gain from replicating nearly noise-free runs).
    let left_q = imspe_batch_grad(&ws, &model, &DMatrix::from_row_slice(1, 1, &[0.599]))
        .unwrap()[(0, 0)];
    let right_q = imspe_batch_grad(&ws, &model, &DMatrix::from_row_slice(1, 1, &[0.601]))
        .unwrap()[(0, 0)];
    assert!(left_q > 0.0, "expected repulsion from 0.6 leftward, grad {left_q}");
    assert!(right_q < 0.0, "expected repulsion from 0.6 rightward, grad {right_q}");
}

#[test]
fn optimizer_fills_the_unsampled_half() {
    // Data only on [0, 0.5]; both proposed points belong in (0.5, 1].
    let mut rng = derive_rng(4, &[2]);
    let mut runs = Vec::new();
    for i in 0..6 {
        let x = 0.05 + 0.4 * i as f64 / 5.0;
        for _ in 0..2 {
            runs.push((vec![x], rng.random::<f64>()));
        }
    }
    let ds = DesignSet::aggregate(&runs).unwrap();
    let model = HetGPModel::from_parts_fixed(
        ds,
        HetGPParams {
            theta: vec![0.15],
            theta_noise: vec![1.0],
            g_noise: 0.1,
            log_delta: vec![-3.0; 6],
        },
        1.0,
    )
    .unwrap();
    let cfg = AcqConfig {
        n_starts: 6,
        max_iters: 120,
        grad_tol: 1e-8,
        seed: 5,
    };
    let prop = optimize_batch(&model, 2, &cfg).unwrap();
    for r in 0..2 {
        assert!(
            prop.xtil[(r, 0)] > 0.5,
            "proposed point {} at {}",
            r,
            prop.xtil[(r, 0)]
        );
    }

    // Grid-search oracle over [0,1]^2 confirms the optimum's region.
    let ws = workspace(&model).unwrap();
    let mut best = (f64::INFINITY, 0.0, 0.0);
    let steps = 40;
    for i in 0..=steps {
        for j in i..=steps {
            let a = i as f64 / steps as f64;
            let b = j as f64 / steps as f64;
            let x = DMatrix::from_row_slice(2, 1, &[a, b]);
            let v = imspe_batch(&ws, &model, &x).unwrap();
            if v < best.0 {
                best = (v, a, b);
            }
        }
    }
    assert!(best.1 > 0.5 && best.2 > 0.5, "grid best at ({}, {})", best.1, best.2);
    assert!(prop.imspe <= best.0 + 1e-6, "optimizer {} vs grid {}", prop.imspe, best.0);
}

#[test]
fn unrelated_row_swap_leaves_gradient_entry_unchanged() {
    let model = small_model_for_swap();
    let ws = workspace(&model).unwrap();
    let xtil = DMatrix::from_row_slice(3, 1, &[0.2, 0.6, 0.9]);
    let swapped = DMatrix::from_row_slice(3, 1, &[0.2, 0.9, 0.6]);
    let ga = imspe_batch_grad(&ws, &model, &xtil).unwrap();
    let gs = imspe_batch_grad(&ws, &model, &swapped).unwrap();
    assert!((ga[(0, 0)] - gs[(0, 0)]).abs() < 1e-12);
    assert!((ga[(1, 0)] - gs[(2, 0)]).abs() < 1e-12);
}

fn small_model_for_swap() -> HetGPModel {
    let runs = vec![
        (vec![0.1], 0.2),
        (vec![0.1], 0.4),
        (vec![0.45], 1.0),
        (vec![0.45], 0.8),
        (vec![0.8], -0.3),
        (vec![0.8], -0.1),
    ];
    let ds = DesignSet::aggregate(&runs).unwrap();
    HetGPModel::from_parts_fixed(
        ds,
        HetGPParams {
            theta: vec![0.3],
            theta_noise: vec![0.8],
            g_noise: 0.1,
            log_delta: vec![-1.0, -0.2, -1.5],
        },
        1.0,
    )
    .unwrap()
}

#[test]
fn noise_bump_attracts_batch_points() {
    // Fitted 2d testbed models (50 uniques x 3 replicates) with the noise
    // bump at (0.7, 0.7): an optimized M = 20 batch lands at least one
    // point within radius 0.25 of the bump in nearly every seed.
    let hits: usize = (0..20u64)
        .into_par_iter()
        .map(|seed| {
            let mut rng = derive_rng(2020, &[seed]);
            let x0 = batchdesign_core::maximin_lhs(
                50,
                2,
                batchdesign_core::rng::derive_seed(2020, &[seed, 1]),
                16,
            );
            let mut runs = Vec::new();
            for i in 0..50 {
                let loc = vec![x0[(i, 0)], x0[(i, 1)]];
                for _ in 0..3 {
                    runs.push((loc.clone(), Testbed::Toy2d.sample(&loc, &mut rng)));
                }
            }
            let ds = DesignSet::aggregate(&runs).unwrap();
            let cfg = FitConfig {
                n_starts: 2,
                max_iters: 80,
                seed,
                ..Default::default()
            };
            let model = HetGPModel::fit(ds, &cfg).unwrap();
            let acq = AcqConfig {
                n_starts: 4,
                max_iters: 80,
                grad_tol: 1e-6,
                seed: seed ^ 0x2d,
            };
            let prop = optimize_batch(&model, 20, &acq).unwrap();
            let close = (0..20).any(|r| {
                let dx = prop.xtil[(r, 0)] - 0.7;
                let dy = prop.xtil[(r, 1)] - 0.7;
                (dx * dx + dy * dy).sqrt() < 0.25
            });
            usize::from(close)
        })
        .sum();
    assert!(hits >= 18, "noise bump attracted a batch point in {hits}/20 seeds");
}
