//! Batch IMSPE: evaluation through partition-inverse updates, the analytic
//! gradient over all M*d batch coordinates, and multi-start bounded
//! optimization of the batch.
//!
//! With `K_{n+M}` and `W_{n+M}` extended by the candidate batch, the
//! partitioned inverse gives
//! `I_{N+M} = I_N - tau2 [ tr(g S g' W_n) + 2 <g, w_x> + tr(S^{-1} w_tt) ]`
//! where `S = r + c(X,X) - c_x' K_n^{-1} c_x` and `g = -K_n^{-1} c_x S^{-1}`.
//! Every term costs O(M^3 + nM^2 + n^2 M) given the cached `K_n^{-1}`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel;
use crate::linalg;
use crate::optim::{minimize_bounded, BoxBounds, OptimOptions};
use crate::rng::{derive_rng, purpose};
use crate::sampling::plain_lhs;
use crate::surrogate::HetGPModel;

/// Precomputed design-dependent quantities for repeated batch evaluations,
/// stamped with the fingerprint of the model they were built from.
#[derive(Debug, Clone)]
pub struct ImspeWorkspace {
    w_n: DMatrix<f64>,
    e_const: f64,
    tau2: f64,
    imspe_n: f64,
    fingerprint: u64,
}

impl ImspeWorkspace {
    pub fn e_const(&self) -> f64 {
        self.e_const
    }

    pub fn imspe_n(&self) -> f64 {
        self.imspe_n
    }

    pub fn w_n(&self) -> &DMatrix<f64> {
        &self.w_n
    }
}

/// Build the workspace: W_n, the constant E (= tau2 on the unit cube, since
/// the kernel has unit diagonal), and the current IMSPE.
pub fn workspace(model: &HetGPModel) -> Result<ImspeWorkspace> {
    let x = model.design().x_matrix();
    let w_n = kernel::w_matrix(&x, &x, model.kernel_mean())?;
    let tau2 = model.tau2();
    let e_const = tau2;
    let trace = (model.kn_inv() * &w_n).trace();
    let imspe_n = e_const - tau2 * trace;
    Ok(ImspeWorkspace {
        w_n,
        e_const,
        tau2,
        imspe_n,
        fingerprint: model.fingerprint(),
    })
}

/// IMSPE of the current design: `E - tau2 tr(K_n^{-1} W_n)`, on the model's
/// standardized response scale.
pub fn imspe_current(model: &HetGPModel) -> Result<f64> {
    Ok(workspace(model)?.imspe_n)
}

fn check_ws(ws: &ImspeWorkspace, model: &HetGPModel) -> Result<()> {
    if ws.fingerprint != model.fingerprint() {
        return Err(Error::StaleWorkspace);
    }
    Ok(())
}

fn validate_batch(xtil: &DMatrix<f64>, d: usize) -> Result<()> {
    if xtil.ncols() != d {
        return Err(Error::DimensionMismatch(format!(
            "batch has {} columns, design dimension is {d}",
            xtil.ncols()
        )));
    }
    if xtil.nrows() == 0 {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    if xtil.iter().any(|&v| !(-1e-9..=1.0 + 1e-9).contains(&v)) {
        return Err(Error::InvalidParameter(
            "batch coordinates must lie in [0,1]".into(),
        ));
    }
    Ok(())
}

/// Pieces shared by the value and gradient paths of one batch evaluation.
struct BatchEval {
    cx: DMatrix<f64>,
    ct: DMatrix<f64>,
    c_delta_x: DMatrix<f64>,
    lam: DVector<f64>,
    b_mat: DMatrix<f64>,
    sigma: DMatrix<f64>,
    sigma_inv: DMatrix<f64>,
    g_mat: DMatrix<f64>,
    wx: DMatrix<f64>,
    wtt: DMatrix<f64>,
    p_mat: DMatrix<f64>,
    gtp: DMatrix<f64>,
    imspe: f64,
}

fn assemble_sigma(
    ct: &DMatrix<f64>,
    cx: &DMatrix<f64>,
    b_mat: &DMatrix<f64>,
    lam: &DVector<f64>,
    mults: &[usize],
) -> DMatrix<f64> {
    let m = ct.nrows();
    let mut sigma = ct - cx.transpose() * b_mat;
    for j in 0..m {
        sigma[(j, j)] += lam[j] / mults[j] as f64;
    }
    sigma
}

fn batch_eval(
    ws: &ImspeWorkspace,
    model: &HetGPModel,
    xtil: &DMatrix<f64>,
    mults: &[usize],
) -> Result<BatchEval> {
    let x = model.design().x_matrix();
    let m = xtil.nrows();
    if mults.len() != m || mults.contains(&0) {
        return Err(Error::InvalidParameter(
            "multiplicities must be positive, one per batch row".into(),
        ));
    }
    let cx = kernel::cov(&x, xtil, model.kernel_mean())?;
    let ct = kernel::cov(xtil, xtil, model.kernel_mean())?;
    let c_delta_x = kernel::cov(&x, xtil, model.kernel_noise())?;
    let lam = DVector::from_fn(m, |j, _| {
        (model.noise_mean() + c_delta_x.column(j).dot(model.alpha_delta())).exp()
    });
    let b_mat = model.kn_inv() * &cx;
    let sigma = assemble_sigma(&ct, &cx, &b_mat, &lam, mults);

    // Coincident batch rows do not make Sigma singular while the noise is
    // positive; perturbing duplicates is a fallback for outright
    // factorization failure only. Each later duplicate gets its own offset
    // so triples separate too.
    let chol = match linalg::spd_cholesky(&sigma) {
        Ok((c, _)) => c,
        Err(_) => {
            let mut xt = xtil.clone();
            let mut bumped = false;
            for i in 1..m {
                let close_to_earlier = (0..i).any(|j| {
                    (0..xt.ncols()).all(|k| (xt[(i, k)] - xt[(j, k)]).abs() < 1e-12)
                });
                if close_to_earlier {
                    let eps = 1e-10 * (i as f64 + 1.0);
                    for k in 0..xt.ncols() {
                        xt[(i, k)] = if xt[(i, k)] <= 0.5 {
                            xt[(i, k)] + eps
                        } else {
                            xt[(i, k)] - eps
                        };
                    }
                    bumped = true;
                }
            }
            if !bumped {
                return Err(Error::CholeskyFailure { jitter: 1e-4 });
            }
            let cx2 = kernel::cov(&x, &xt, model.kernel_mean())?;
            let ct2 = kernel::cov(&xt, &xt, model.kernel_mean())?;
            let b2 = model.kn_inv() * &cx2;
            let sigma2 = assemble_sigma(&ct2, &cx2, &b2, &lam, mults);
            let (c, _) = linalg::spd_cholesky(&sigma2)?;
            let sigma_inv = c.inverse();
            let g_mat = -(&b2 * &sigma_inv);
            let wx = kernel::w_matrix(&x, &xt, model.kernel_mean())?;
            let wtt = kernel::w_matrix(&xt, &xt, model.kernel_mean())?;
            let p_mat = &ws.w_n * &g_mat;
            let gtp = g_mat.transpose() * &p_mat;
            let term1 = sigma2.component_mul(&gtp).sum();
            let term2 = 2.0 * g_mat.component_mul(&wx).sum();
            let term3 = sigma_inv.component_mul(&wtt).sum();
            let imspe = ws.imspe_n - ws.tau2 * (term1 + term2 + term3);
            return Ok(BatchEval {
                cx: cx2,
                ct: ct2,
                c_delta_x,
                lam,
                b_mat: b2,
                sigma: sigma2,
                sigma_inv,
                g_mat,
                wx,
                wtt,
                p_mat,
                gtp,
                imspe,
            });
        }
    };
    let sigma_inv = chol.inverse();
    let g_mat = -(&b_mat * &sigma_inv);
    let wx = kernel::w_matrix(&x, xtil, model.kernel_mean())?;
    let wtt = kernel::w_matrix(xtil, xtil, model.kernel_mean())?;
    let p_mat = &ws.w_n * &g_mat;
    let gtp = g_mat.transpose() * &p_mat;

    let term1 = sigma.component_mul(&gtp).sum();
    let term2 = 2.0 * g_mat.component_mul(&wx).sum();
    let term3 = sigma_inv.component_mul(&wtt).sum();
    let imspe = ws.imspe_n - ws.tau2 * (term1 + term2 + term3);

    Ok(BatchEval {
        cx,
        ct,
        c_delta_x,
        lam,
        b_mat,
        sigma,
        sigma_inv,
        g_mat,
        wx,
        wtt,
        p_mat,
        gtp,
        imspe,
    })
}

/// IMSPE after adding the batch `xtil` (each row one new run).
pub fn imspe_batch(ws: &ImspeWorkspace, model: &HetGPModel, xtil: &DMatrix<f64>) -> Result<f64> {
    check_ws(ws, model)?;
    validate_batch(xtil, model.design().dim())?;
    let mults = vec![1usize; xtil.nrows()];
    Ok(batch_eval(ws, model, xtil, &mults)?.imspe)
}

/// IMSPE after adding batch rows with replicate multiplicities: row `j`
/// receives `mults[j]` runs, entering the batch covariance as
/// `Lambda(x_j) / mults[j]` on the diagonal.
pub fn imspe_batch_with_multiplicity(
    ws: &ImspeWorkspace,
    model: &HetGPModel,
    xtil: &DMatrix<f64>,
    mults: &[usize],
) -> Result<f64> {
    check_ws(ws, model)?;
    validate_batch(xtil, model.design().dim())?;
    Ok(batch_eval(ws, model, xtil, mults)?.imspe)
}

/// Analytic gradient of the batch IMSPE over all M*d coordinates.
pub fn imspe_batch_grad(
    ws: &ImspeWorkspace,
    model: &HetGPModel,
    xtil: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    Ok(imspe_batch_value_grad(ws, model, xtil)?.1)
}

/// Batch IMSPE and its gradient in one pass (the optimizer calls this).
pub fn imspe_batch_value_grad(
    ws: &ImspeWorkspace,
    model: &HetGPModel,
    xtil: &DMatrix<f64>,
) -> Result<(f64, DMatrix<f64>)> {
    check_ws(ws, model)?;
    let d = model.design().dim();
    validate_batch(xtil, d)?;
    let m = xtil.nrows();
    let mults = vec![1usize; m];
    let ev = batch_eval(ws, model, xtil, &mults)?;

    let x = model.design().x_matrix();
    let n = x.nrows();
    let theta = model.kernel_mean().lengthscales();
    let theta_d = model.kernel_noise().lengthscales();
    let alpha_delta = model.alpha_delta();

    // Per-dimension factors of wx and wtt for leave-one-out products.
    let fx = kernel::w_factors(&x, xtil, model.kernel_mean())?;
    let ftt = kernel::w_factors(xtil, xtil, model.kernel_mean())?;

    let mut grad = DMatrix::zeros(m, d);
    let mut dkx = DVector::zeros(n);
    let mut dwx = DVector::zeros(n);
    let mut u = DVector::zeros(m);
    let mut v = DVector::zeros(m);

    for i in 0..m {
        for p in 0..d {
            // Column i of the perturbed cross-covariance and W blocks.
            for j in 0..n {
                let diff = xtil[(i, p)] - x[(j, p)];
                dkx[j] = ev.cx[(j, i)] * (-2.0 * diff / theta[p]);
                let mut loo = kernel::dw_scalar(xtil[(i, p)], x[(j, p)], theta[p])?;
                for (k, f) in fx.iter().enumerate() {
                    if k != p {
                        loo *= f[(j, i)];
                    }
                }
                dwx[j] = loo;
            }
            for j in 0..m {
                if j == i {
                    u[j] = 0.0;
                } else {
                    let diff = xtil[(i, p)] - xtil[(j, p)];
                    u[j] = ev.ct[(i, j)] * (-2.0 * diff / theta[p]);
                }
                let mut loo = kernel::dw_scalar(xtil[(i, p)], xtil[(j, p)], theta[p])?;
                for (k, f) in ftt.iter().enumerate() {
                    if k != p {
                        loo *= f[(i, j)];
                    }
                }
                v[j] = loo;
            }
            // Noise derivative through the log-space smoother.
            let mut dsmooth = 0.0;
            for j in 0..n {
                let diff = xtil[(i, p)] - x[(j, p)];
                dsmooth += ev.c_delta_x[(j, i)] * (-2.0 * diff / theta_d[p]) * alpha_delta[j];
            }
            let rho = ev.lam[i] * dsmooth;

            // dSigma is symmetric with only row/column i active.
            let mvec = ev.b_mat.transpose() * &dkx;
            let mut dsigma = DMatrix::zeros(m, m);
            for b in 0..m {
                let w = u[b] - mvec[b];
                dsigma[(i, b)] += w;
                dsigma[(b, i)] += w;
            }
            dsigma[(i, i)] += rho;

            let vmat = -(&ev.sigma_inv * &dsigma * &ev.sigma_inv);
            let q_vec = model.kn_inv() * &dkx;
            let s_col = ev.sigma_inv.column(i);
            let mut q_mat = -(&ev.b_mat * &vmat);
            for r in 0..n {
                for c in 0..m {
                    q_mat[(r, c)] -= q_vec[r] * s_col[c];
                }
            }

            let t_hw = dsigma.component_mul(&ev.gtp).sum()
                + 2.0 * (&q_mat * &ev.sigma).component_mul(&ev.p_mat).sum();
            let t_qwx = 2.0 * q_mat.component_mul(&ev.wx).sum();
            let t_vwtt = vmat.component_mul(&ev.wtt).sum();
            let t_gs = 2.0 * ev.g_mat.column(i).dot(&dwx);
            let t_st = 2.0 * (&ev.sigma_inv * &v)[i];

            grad[(i, p)] = -ws.tau2 * (t_hw + t_qwx + t_vwtt + t_gs + t_st);
        }
    }
    Ok((ev.imspe, grad))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AcqConfig {
    pub n_starts: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub seed: u64,
}

impl Default for AcqConfig {
    fn default() -> Self {
        Self {
            n_starts: 10,
            max_iters: 200,
            grad_tol: 1e-8,
            seed: 0,
        }
    }
}

/// Optimized candidate batch with solver diagnostics.
#[derive(Debug, Clone)]
pub struct BatchProposal {
    pub xtil: DMatrix<f64>,
    pub imspe: f64,
    pub start_index: usize,
    pub iterations: usize,
    pub converged: bool,
}

/// Multi-start bounded quasi-Newton minimization of the batch IMSPE over
/// [0,1]^{M*d}. One start perturbs the training location with the largest
/// per-replicate residual noise (Lambda_i / a_i); the rest are fresh LHS
/// samples. Deterministic under the seed; ties keep the lowest start index.
pub fn optimize_batch(model: &HetGPModel, m: usize, cfg: &AcqConfig) -> Result<BatchProposal> {
    if m == 0 {
        return Err(Error::InvalidParameter("batch size M must be >= 1".into()));
    }
    let d = model.design().dim();
    let ws = workspace(model)?;
    let bounds = BoxBounds::unit_cube(m * d);
    let opts = OptimOptions {
        max_iters: cfg.max_iters,
        grad_tol: cfg.grad_tol,
        memory: 8,
    };

    let mut starts: Vec<DVector<f64>> = Vec::with_capacity(cfg.n_starts.max(1));
    {
        // Seeded start: jitter the noisiest (per replicate) training site.
        let lambda = model.lambda();
        let counts = model.design().counts();
        let mut best = 0;
        let mut best_val = f64::NEG_INFINITY;
        for i in 0..lambda.len() {
            let val = lambda[i] / counts[i] as f64;
            if val > best_val {
                best_val = val;
                best = i;
            }
        }
        let anchor = model.design().unique_rows()[best].clone();
        let mut rng = derive_rng(cfg.seed, &[purpose::ACQUIRE, 0]);
        let mut z = DVector::zeros(m * d);
        for r in 0..m {
            for k in 0..d {
                let noise: f64 = rng.sample(StandardNormal);
                z[r * d + k] = (anchor[k] + 0.05 * noise).clamp(0.0, 1.0);
            }
        }
        starts.push(z);
    }
    for s in 1..cfg.n_starts.max(1) {
        let mut rng = derive_rng(cfg.seed, &[purpose::ACQUIRE, s as u64]);
        let lhs = plain_lhs(m, d, &mut rng);
        let mut z = DVector::zeros(m * d);
        for r in 0..m {
            for k in 0..d {
                z[r * d + k] = lhs[(r, k)];
            }
        }
        starts.push(z);
    }

    let outcomes: Vec<_> = starts
        .par_iter()
        .map(|x0| {
            let objective = |z: &DVector<f64>| {
                let xtil = DMatrix::from_fn(m, d, |r, k| z[r * d + k]);
                match imspe_batch_value_grad(&ws, model, &xtil) {
                    Ok((f, g)) => {
                        let gz = DVector::from_fn(m * d, |idx, _| g[(idx / d, idx % d)]);
                        (f, gz)
                    }
                    Err(_) => (f64::INFINITY, DVector::zeros(m * d)),
                }
            };
            minimize_bounded(objective, x0, &bounds, &opts)
        })
        .collect();

    let (best_idx, best) = outcomes
        .iter()
        .enumerate()
        .filter(|(_, o)| o.f.is_finite())
        .min_by(|(ia, a), (ib, b)| a.f.partial_cmp(&b.f).unwrap().then(ia.cmp(ib)))
        .ok_or_else(|| Error::NonFinite("all acquisition starts failed".into()))?;

    let xtil = DMatrix::from_fn(m, d, |r, k| best.x[r * d + k]);
    debug_assert!(best.f <= ws.imspe_n + 1e-10);
    Ok(BatchProposal {
        xtil,
        imspe: best.f,
        start_index: best_idx,
        iterations: best.iterations,
        converged: best.converged,
    })
}
