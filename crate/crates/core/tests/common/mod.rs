//! Shared oracle machinery for the integration tests: adaptive quadrature,
//! a dense IMSPE rebuild independent of the partition-inverse path, finite
//! differences, and random model builders.

#![allow(dead_code)]

use batchdesign_core::rng::derive_rng;
use batchdesign_core::surrogate::{DesignSet, HetGPModel, HetGPParams};
use batchdesign_core::{kernel, KernelSpec};
use nalgebra::DMatrix;
use rand::Rng;

/// Adaptive Simpson quadrature on [a, b].
pub fn quad(f: &dyn Fn(f64) -> f64, a: f64, b: f64, eps: f64) -> f64 {
    fn simpson(_f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64, fm: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn rec(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fb: f64,
        fm: f64,
        whole: f64,
        eps: f64,
        depth: usize,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(f, a, fa, m, fm, flm);
        let right = simpson(f, m, fm, b, fb, frm);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * eps {
            left + right + (left + right - whole) / 15.0
        } else {
            rec(f, a, m, fa, fm, flm, left, eps * 0.5, depth - 1)
                + rec(f, m, b, fm, fb, frm, right, eps * 0.5, depth - 1)
        }
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = simpson(f, a, fa, b, fb, fm);
    rec(f, a, b, fa, fb, fm, whole, eps, 48)
}

/// Kernel-product integral over [0,1] by quadrature (the w_scalar oracle).
pub fn w_quadrature(a: f64, b: f64, theta: f64) -> f64 {
    let f = move |x: f64| (-((a - x).powi(2)) / theta).exp() * (-((b - x).powi(2)) / theta).exp();
    quad(&f, 0.0, 1.0, 1e-13)
}

/// Dense Eq.-4 style IMSPE of the model design augmented by batch rows
/// (location, multiplicity). Builds the combined K and W from scratch and
/// inverts with LU, independent of the partition-update code path. Returned
/// on the model's internal (standardized) scale.
pub fn dense_imspe(model: &HetGPModel, batch: &[(Vec<f64>, usize)]) -> f64 {
    let design = model.design();
    let d = design.dim();
    let mut rows: Vec<Vec<f64>> = design.unique_rows().to_vec();
    let mut counts: Vec<f64> = design.counts().iter().map(|&a| a as f64).collect();
    let mut lambda: Vec<f64> = model.lambda().iter().copied().collect();

    for (loc, mult) in batch {
        let hit = rows
            .iter()
            .position(|r| r.iter().zip(loc).all(|(x, y)| (x - y).abs() <= 1e-15));
        match hit {
            Some(i) => counts[i] += *mult as f64,
            None => {
                rows.push(loc.clone());
                counts.push(*mult as f64);
                lambda.push(model.noise_rel(loc).unwrap());
            }
        }
    }

    let total = rows.len();
    let x = DMatrix::from_fn(total, d, |i, j| rows[i][j]);
    let c = kernel::cov(&x, &x, model.kernel_mean()).unwrap();
    let mut k = c;
    for i in 0..total {
        k[(i, i)] += lambda[i] / counts[i];
    }
    let w = kernel::w_matrix(&x, &x, model.kernel_mean()).unwrap();
    let kinv = k.try_inverse().expect("dense K invertible");
    let tau2 = model.tau2();
    tau2 - tau2 * (kinv * w).trace()
}

/// A synthetic fitted-model stand-in with explicit hyperparameters and a
/// fixed scale, for oracle checks that need full control.
pub fn random_model(d: usize, n: usize, seed: u64) -> HetGPModel {
    let mut rng = derive_rng(seed, &[0xbeef]);
    let x = batchdesign_core::plain_lhs(n, d, &mut rng);
    let mut runs = Vec::new();
    for i in 0..n {
        let loc: Vec<f64> = (0..d).map(|k| x[(i, k)]).collect();
        let reps = 1 + (rng.random::<u64>() % 3) as usize;
        for _ in 0..reps {
            runs.push((loc.clone(), rng.random::<f64>() * 2.0 - 1.0));
        }
    }
    let ds = DesignSet::aggregate(&runs).unwrap();
    let theta: Vec<f64> = (0..d).map(|_| 0.1 + rng.random::<f64>() * 1.5).collect();
    let theta_noise: Vec<f64> = (0..d).map(|_| 0.3 + rng.random::<f64>() * 1.5).collect();
    let log_delta: Vec<f64> = (0..n).map(|_| -2.0 + rng.random::<f64>() * 2.5).collect();
    HetGPModel::from_parts_fixed(
        ds,
        HetGPParams {
            theta,
            theta_noise,
            g_noise: 0.05 + rng.random::<f64>() * 0.3,
            log_delta,
        },
        0.5 + rng.random::<f64>(),
    )
    .unwrap()
}

/// Random batch inside the unit cube.
pub fn random_batch(m: usize, d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = derive_rng(seed, &[0xfeed]);
    DMatrix::from_fn(m, d, |_, _| rng.random::<f64>())
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Separable Gaussian kernel spec helper.
pub fn spec(theta: &[f64]) -> KernelSpec {
    KernelSpec::new(theta.to_vec()).unwrap()
}
