//! Replicate-aware heteroskedastic Gaussian-process surrogate.
//!
//! Training data are collapsed to unique design locations with replicate
//! counts and per-location response statistics; all cubic-cost algebra runs
//! on the n unique locations through the Woodbury/replicate identities
//! rather than the N individual runs.
//!
//! The mean GP has covariance `tau2 * (C_n + diag(Lambda_i / a_i))` on
//! standardized responses. The latent log-nuggets `log Delta_n` carry a GP
//! prior with a GLS-profiled constant mean and are smoothed in log space:
//! `log Lambda = m + C_d K_d^{-1} (log Delta - m 1)` with
//! `K_d = C_d + g_d A_n^{-1}`. Predicted noise is
//! `tau2 * exp(smooth(x))` on the standardized scale.
//!
//! Gradient choices for the fit (documented per parameter): analytic for
//! `log Delta` and the mean-kernel `log theta`; central finite differences
//! for the noise-kernel `log theta_d` and `log g_d`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{self, KernelSpec};
use crate::linalg;
use crate::optim::{minimize_bounded, BoxBounds, OptimOptions};
use crate::rng::{derive_rng, purpose};

/// Exact-duplicate detection tolerance on coded coordinates. Backtracking
/// emits bit-identical replicates; this only absorbs serialization roundoff.
pub const DUPLICATE_TOL: f64 = 1e-12;

// ---------------------------------------------------------------------------
// DesignSet
// ---------------------------------------------------------------------------

/// Replicate-aware training data: unique inputs, replicate counts, and
/// per-location response statistics (plus the raw responses, which the
/// bootstrap and the run log need).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignSet {
    unique_x: Vec<Vec<f64>>,
    counts: Vec<usize>,
    mean_y: Vec<f64>,
    ss_y: Vec<f64>,
    raw_y: Vec<Vec<f64>>,
    n_total: usize,
}

impl DesignSet {
    /// Collapse raw runs into unique locations. Unique rows keep
    /// first-appearance order; duplicates merge within [`DUPLICATE_TOL`].
    pub fn aggregate(runs: &[(Vec<f64>, f64)]) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::EmptyInput("no runs to aggregate".into()));
        }
        let d = runs[0].0.len();
        if d == 0 {
            return Err(Error::EmptyInput("zero-dimensional inputs".into()));
        }
        let mut ds = DesignSet {
            unique_x: Vec::new(),
            counts: Vec::new(),
            mean_y: Vec::new(),
            ss_y: Vec::new(),
            raw_y: Vec::new(),
            n_total: 0,
        };
        ds.ingest(runs)?;
        Ok(ds)
    }

    fn ingest(&mut self, runs: &[(Vec<f64>, f64)]) -> Result<()> {
        let d = if self.unique_x.is_empty() {
            runs.first().map(|(x, _)| x.len()).unwrap_or(0)
        } else {
            self.unique_x[0].len()
        };
        for (idx, (x, y)) in runs.iter().enumerate() {
            if x.len() != d {
                return Err(Error::DimensionMismatch(format!(
                    "run {idx} has {} coordinates, expected {d}",
                    x.len()
                )));
            }
            if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("run {idx}")));
            }
            let found = self
                .unique_x
                .iter()
                .position(|u| u.iter().zip(x).all(|(a, b)| (a - b).abs() <= DUPLICATE_TOL));
            match found {
                Some(i) => self.raw_y[i].push(*y),
                None => {
                    self.unique_x.push(x.clone());
                    self.raw_y.push(vec![*y]);
                }
            }
            self.n_total += 1;
        }
        self.refresh_stats();
        Ok(())
    }

    fn refresh_stats(&mut self) {
        let n = self.unique_x.len();
        self.counts = vec![0; n];
        self.mean_y = vec![0.0; n];
        self.ss_y = vec![0.0; n];
        for i in 0..n {
            let ys = &self.raw_y[i];
            let a = ys.len();
            let mean = ys.iter().sum::<f64>() / a as f64;
            let ss = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>();
            self.counts[i] = a;
            self.mean_y[i] = mean;
            self.ss_y[i] = ss;
        }
    }

    /// A new design with extra runs merged in (exact duplicates collapse
    /// onto existing uniques).
    pub fn with_runs(&self, runs: &[(Vec<f64>, f64)]) -> Result<Self> {
        let mut next = self.clone();
        next.ingest(runs)?;
        Ok(next)
    }

    /// Expand back to the run multiset (per-location arrival order).
    pub fn expand(&self) -> Vec<(Vec<f64>, f64)> {
        let mut out = Vec::with_capacity(self.n_total);
        for (x, ys) in self.unique_x.iter().zip(&self.raw_y) {
            for &y in ys {
                out.push((x.clone(), y));
            }
        }
        out
    }

    pub fn n_unique(&self) -> usize {
        self.unique_x.len()
    }

    pub fn dim(&self) -> usize {
        self.unique_x.first().map(|x| x.len()).unwrap_or(0)
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn mean_y(&self) -> &[f64] {
        &self.mean_y
    }

    pub fn ss_y(&self) -> &[f64] {
        &self.ss_y
    }

    pub fn raw_y(&self) -> &[Vec<f64>] {
        &self.raw_y
    }

    pub fn unique_rows(&self) -> &[Vec<f64>] {
        &self.unique_x
    }

    /// Unique locations as an n x d matrix.
    pub fn x_matrix(&self) -> DMatrix<f64> {
        let (n, d) = (self.n_unique(), self.dim());
        DMatrix::from_fn(n, d, |i, j| self.unique_x[i][j])
    }

    /// Index of the unique row matching `x` within [`DUPLICATE_TOL`], if any.
    pub fn find_unique(&self, x: &[f64]) -> Option<usize> {
        self.unique_x
            .iter()
            .position(|u| u.iter().zip(x).all(|(a, b)| (a - b).abs() <= DUPLICATE_TOL))
    }
}

// ---------------------------------------------------------------------------
// Parameters and configuration
// ---------------------------------------------------------------------------

/// Free hyperparameters of the surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HetGPParams {
    pub theta: Vec<f64>,
    pub theta_noise: Vec<f64>,
    pub g_noise: f64,
    pub log_delta: Vec<f64>,
}

/// How the process scale is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ScaleMode {
    /// Plug-in profile estimate from the data (responses standardized
    /// internally).
    Profiled,
    /// Fixed scale on the raw response scale, no standardization. Test and
    /// reconstruction hook.
    Fixed(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub n_starts: usize,
    pub theta_bounds: (f64, f64),
    pub theta_noise_bounds: (f64, f64),
    pub g_noise_bounds: (f64, f64),
    pub log_delta_bounds: (f64, f64),
    pub max_iters: usize,
    pub grad_tol: f64,
    pub allow_homoskedastic: bool,
    pub seed: u64,
    /// Explicit extra starting points, tried before the space-filling ones
    /// (warm starts for sequential updates).
    #[serde(skip)]
    pub extra_starts: Vec<HetGPParams>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            n_starts: 5,
            theta_bounds: (1e-2, 10.0),
            theta_noise_bounds: (1e-2, 10.0),
            g_noise_bounds: (1e-6, 1.0),
            log_delta_bounds: ((1e-6f64).ln(), (1e2f64).ln()),
            max_iters: 150,
            grad_tol: 1e-5,
            allow_homoskedastic: false,
            seed: 0,
            extra_starts: Vec::new(),
        }
    }
}

impl FitConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

// ---------------------------------------------------------------------------
// Likelihood evaluation
// ---------------------------------------------------------------------------

/// Standardized sufficient statistics plus precomputed squared coordinate
/// differences, shared by every likelihood evaluation during one fit.
struct LikData {
    counts: Vec<usize>,
    inv_counts: Vec<f64>,
    ybar: DVector<f64>,
    ss: DVector<f64>,
    n_total: usize,
    d2: Vec<DMatrix<f64>>,
    ln_count_sum: f64,
    mu_y: f64,
    sd_y: f64,
}

impl LikData {
    fn new(design: &DesignSet) -> Self {
        let n = design.n_unique();
        let d = design.dim();
        let x = design.x_matrix();
        let nt = design.n_total() as f64;
        let mu = design
            .mean_y()
            .iter()
            .zip(design.counts())
            .map(|(m, &a)| m * a as f64)
            .sum::<f64>()
            / nt;
        let raw_second_moment = design
            .mean_y()
            .iter()
            .zip(design.ss_y())
            .zip(design.counts())
            .map(|((m, ss), &a)| ss + a as f64 * m * m)
            .sum::<f64>()
            / nt;
        let var = (raw_second_moment - mu * mu).max(0.0);
        let sd = if var > 1e-300 { var.sqrt() } else { 1.0 };
        let ybar = DVector::from_fn(n, |i, _| (design.mean_y()[i] - mu) / sd);
        let ss = DVector::from_fn(n, |i, _| design.ss_y()[i] / (sd * sd));
        let mut d2 = Vec::with_capacity(d);
        for k in 0..d {
            d2.push(DMatrix::from_fn(n, n, |i, j| {
                let diff = x[(i, k)] - x[(j, k)];
                diff * diff
            }));
        }
        let ln_count_sum = design.counts().iter().map(|&a| (a as f64).ln()).sum();
        LikData {
            counts: design.counts().to_vec(),
            inv_counts: design.counts().iter().map(|&a| 1.0 / a as f64).collect(),
            ybar,
            ss,
            n_total: design.n_total(),
            d2,
            ln_count_sum,
            mu_y: mu,
            sd_y: sd,
        }
    }

    fn identity_scale(design: &DesignSet) -> Self {
        let mut data = Self::new(design);
        let n = design.n_unique();
        data.mu_y = 0.0;
        data.sd_y = 1.0;
        data.ybar = DVector::from_fn(n, |i, _| design.mean_y()[i]);
        data.ss = DVector::from_fn(n, |i, _| design.ss_y()[i]);
        data
    }

    fn n(&self) -> usize {
        self.counts.len()
    }

    fn dim(&self) -> usize {
        self.d2.len()
    }

    fn cov_from_d2(&self, theta: &[f64]) -> DMatrix<f64> {
        let n = self.n();
        let mut s = DMatrix::zeros(n, n);
        for (k, m) in self.d2.iter().enumerate() {
            let inv_t = 1.0 / theta[k];
            s.zip_apply(m, |acc: &mut f64, v: f64| *acc += v * inv_t);
        }
        s.apply(|v| *v = (-*v).exp());
        s
    }
}

/// Pieces of one likelihood evaluation that the model caches.
struct EvalParts {
    loglik: f64,
    m_hat: f64,
    alpha_delta: DVector<f64>,
    tau2_noise: f64,
    log_lambda: DVector<f64>,
    lambda: DVector<f64>,
    kn_chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    tau2: f64,
}

/// The noise-GP pieces: smoother solve, profiled mean, regularized profiled
/// scale, and the prior log density.
struct NoiseSide {
    m_hat: f64,
    alpha_delta: DVector<f64>,
    quad_delta: f64,
    tau2_noise: f64,
    log_lambda: DVector<f64>,
    lnoise: f64,
    c_delta: DMatrix<f64>,
    kd_chol: Cholesky<f64, Dyn>,
    one_solve: DVector<f64>,
    one_denom: f64,
}

fn eval_noise_side(data: &LikData, theta_d: &[f64], g_d: f64, log_delta: &DVector<f64>) -> Result<NoiseSide> {
    let n = data.n();
    let c_delta = data.cov_from_d2(theta_d);
    let mut kd = c_delta.clone();
    for i in 0..n {
        kd[(i, i)] += g_d * data.inv_counts[i];
    }
    let (kd_chol, _) = linalg::spd_cholesky(&kd)?;
    let ones = DVector::from_element(n, 1.0);
    let one_solve = kd_chol.solve(&ones);
    let one_denom = ones.dot(&one_solve);
    let m_hat = one_solve.dot(log_delta) / one_denom;
    let centered = log_delta - DVector::from_element(n, m_hat);
    let alpha_delta = kd_chol.solve(&centered);
    let quad_delta = centered.dot(&alpha_delta).max(0.0);
    // Regularized profile (weak inverse-gamma prior) removes the spurious
    // +inf mode of the pure profile at log_delta == m 1.
    let tau2_noise = (quad_delta + 1.0) / (n as f64 + 2.0);
    let lnoise = -0.5 * n as f64 * ((2.0 * std::f64::consts::PI).ln() + tau2_noise.ln())
        - 0.5 * linalg::ln_det(&kd_chol)
        - quad_delta / (2.0 * tau2_noise);
    let log_lambda = &c_delta * &alpha_delta + DVector::from_element(n, m_hat);
    Ok(NoiseSide {
        m_hat,
        alpha_delta,
        quad_delta,
        tau2_noise,
        log_lambda,
        lnoise,
        c_delta,
        kd_chol,
        one_solve,
        one_denom,
    })
}

struct MeanSide {
    lmean: f64,
    kn_chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    quad: f64,
    tau2: f64,
}

fn eval_mean_side(
    data: &LikData,
    c_n: &DMatrix<f64>,
    lambda: &DVector<f64>,
    scale: ScaleMode,
) -> Result<MeanSide> {
    let n = data.n();
    let nt = data.n_total as f64;
    let mut kn = c_n.clone();
    for i in 0..n {
        kn[(i, i)] += lambda[i] * data.inv_counts[i];
    }
    let (kn_chol, _) = linalg::spd_cholesky(&kn)?;
    let alpha = kn_chol.solve(&data.ybar);
    let mut quad = data.ybar.dot(&alpha);
    for i in 0..n {
        quad += data.ss[i] / lambda[i];
    }
    quad = quad.max(1e-300);
    let tau2 = match scale {
        ScaleMode::Profiled => quad / nt,
        ScaleMode::Fixed(t) => t,
    };
    let log_lambda_sum: f64 = (0..n)
        .map(|i| (data.counts[i] as f64 - 1.0) * lambda[i].ln())
        .sum();
    let lmean = -0.5 * nt * ((2.0 * std::f64::consts::PI).ln() + tau2.ln())
        - quad / (2.0 * tau2)
        - 0.5 * (linalg::ln_det(&kn_chol) + log_lambda_sum + data.ln_count_sum);
    Ok(MeanSide {
        lmean,
        kn_chol,
        alpha,
        quad,
        tau2,
    })
}

/// Joint log likelihood, value only. `c_n_cache` skips the mean-kernel
/// rebuild when theta is unchanged (used by the finite-difference loop).
fn eval_value(
    data: &LikData,
    theta: &[f64],
    theta_d: &[f64],
    g_d: f64,
    log_delta: &DVector<f64>,
    c_n_cache: Option<&DMatrix<f64>>,
) -> Result<f64> {
    let noise = eval_noise_side(data, theta_d, g_d, log_delta)?;
    let lambda = noise.log_lambda.map(f64::exp);
    if lambda.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::NonFinite("smoothed nuggets".into()));
    }
    let owned;
    let c_n = match c_n_cache {
        Some(c) => c,
        None => {
            owned = data.cov_from_d2(theta);
            &owned
        }
    };
    let mean = eval_mean_side(data, c_n, &lambda, ScaleMode::Profiled)?;
    Ok(mean.lmean + noise.lnoise)
}

/// Packed layout: [log theta (d) | log theta_d (d) | log g_d | log_delta (n)].
fn unpack(p: &DVector<f64>, d: usize, n: usize) -> (Vec<f64>, Vec<f64>, f64, DVector<f64>) {
    let theta: Vec<f64> = (0..d).map(|k| p[k].exp()).collect();
    let theta_d: Vec<f64> = (0..d).map(|k| p[d + k].exp()).collect();
    let g_d = p[2 * d].exp();
    let log_delta = DVector::from_fn(n, |i, _| p[2 * d + 1 + i]);
    (theta, theta_d, g_d, log_delta)
}

const FD_STEP: f64 = 1e-5;

/// Joint log likelihood and its gradient in the packed parameterization.
fn eval_grad(data: &LikData, p: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
    let d = data.dim();
    let n = data.n();
    let nt = data.n_total as f64;
    let (theta, theta_d, g_d, log_delta) = unpack(p, d, n);

    let noise = eval_noise_side(data, &theta_d, g_d, &log_delta)?;
    let lambda = noise.log_lambda.map(f64::exp);
    if lambda.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::NonFinite("smoothed nuggets".into()));
    }
    let c_n = data.cov_from_d2(&theta);
    let mean = eval_mean_side(data, &c_n, &lambda, ScaleMode::Profiled)?;
    let loglik = mean.lmean + noise.lnoise;

    let kn_inv = mean.kn_chol.inverse();
    let mut grad = DVector::zeros(p.len());

    // d L / d log theta_k, analytic through the trace identities.
    for k in 0..d {
        let inv_t2 = 1.0 / (theta[k] * theta[k]);
        let mut quad_term = 0.0;
        let mut trace_term = 0.0;
        for i in 0..n {
            for j in 0..n {
                let dc = c_n[(i, j)] * data.d2[k][(i, j)] * inv_t2;
                quad_term += mean.alpha[i] * dc * mean.alpha[j];
                trace_term += kn_inv[(i, j)] * dc;
            }
        }
        let dl_dtheta = nt / (2.0 * mean.quad) * quad_term - 0.5 * trace_term;
        grad[k] = theta[k] * dl_dtheta;
    }

    // d L / d log_delta, analytic: mean side through the smoother, noise
    // side through the regularized profile (envelope over the profiled m).
    let mut v = DVector::zeros(n);
    for i in 0..n {
        let li_over_a = lambda[i] * data.inv_counts[i];
        let dquad = -(mean.alpha[i] * mean.alpha[i]) * li_over_a - data.ss[i] / lambda[i];
        v[i] = -nt / (2.0 * mean.quad) * dquad
            - 0.5 * kn_inv[(i, i)] * li_over_a
            - (data.counts[i] as f64 - 1.0) / 2.0;
    }
    let cv = &noise.c_delta * &v;
    let smt_v = noise.kd_chol.solve(&cv);
    let sm_one = &noise.c_delta * &noise.one_solve;
    let correction = (v.sum() - sm_one.dot(&v)) / noise.one_denom;
    let mean_part = smt_v + &noise.one_solve * correction;
    let bracket = -(n as f64) / (n as f64 + 2.0) - 1.0 / (noise.quad_delta + 1.0);
    let noise_part = &noise.alpha_delta * (bracket / noise.tau2_noise);
    for i in 0..n {
        grad[2 * d + 1 + i] = mean_part[i] + noise_part[i];
    }

    // d L / d log theta_d and d log g_d by central finite differences,
    // reusing C_n (theta is held fixed on these axes).
    for j in d..(2 * d + 1) {
        let mut pp = p.clone();
        pp[j] += FD_STEP;
        let (_, td_p, gd_p, _) = unpack(&pp, d, n);
        let fp = eval_value(data, &theta, &td_p, gd_p, &log_delta, Some(&c_n))?;
        let mut pm = p.clone();
        pm[j] -= FD_STEP;
        let (_, td_m, gd_m, _) = unpack(&pm, d, n);
        let fm = eval_value(data, &theta, &td_m, gd_m, &log_delta, Some(&c_n))?;
        grad[j] = (fp - fm) / (2.0 * FD_STEP);
    }

    Ok((loglik, grad))
}

/// Joint log likelihood of the given hyperparameters on a data set
/// (profile scale, responses standardized internally). The n-form equals
/// the full-N-form likelihood exactly, constants included.
pub fn loglik(params: &HetGPParams, data: &DesignSet) -> Result<f64> {
    let lik = LikData::new(data);
    validate_params(params, data)?;
    eval_value(
        &lik,
        &params.theta,
        &params.theta_noise,
        params.g_noise,
        &DVector::from_column_slice(&params.log_delta),
        None,
    )
}

fn validate_params(params: &HetGPParams, data: &DesignSet) -> Result<()> {
    let d = data.dim();
    let n = data.n_unique();
    if params.theta.len() != d || params.theta_noise.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "theta dims {}/{} vs input dim {d}",
            params.theta.len(),
            params.theta_noise.len()
        )));
    }
    if params.log_delta.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "log_delta has {} entries for {n} unique locations",
            params.log_delta.len()
        )));
    }
    if params.g_noise < 0.0 {
        return Err(Error::InvalidParameter("g_noise must be >= 0".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Predictions at test locations: surrogate mean, nugget-free variance of
/// the mean, and predicted noise variance, all on the original response
/// scale.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub mean: DVector<f64>,
    pub var_mean: DVector<f64>,
    pub noise: DVector<f64>,
}

/// Fitted heteroskedastic GP surrogate. Immutable after construction and
/// safe to share across threads.
#[derive(Debug, Clone)]
pub struct HetGPModel {
    design: DesignSet,
    kernel_mean: KernelSpec,
    kernel_noise: KernelSpec,
    g_noise: f64,
    log_delta: DVector<f64>,
    scale_mode: ScaleMode,
    mu_y: f64,
    sd_y: f64,
    tau2: f64,
    tau2_noise: f64,
    noise_mean: f64,
    smoothed_log_lambda: DVector<f64>,
    lambda: DVector<f64>,
    kn_chol: Cholesky<f64, Dyn>,
    kn_inv: DMatrix<f64>,
    alpha: DVector<f64>,
    alpha_delta: DVector<f64>,
    loglik: f64,
}

fn build_parts(data: &LikData, params: &HetGPParams, scale: ScaleMode) -> Result<EvalParts> {
    let log_delta = DVector::from_column_slice(&params.log_delta);
    let noise = eval_noise_side(data, &params.theta_noise, params.g_noise, &log_delta)?;
    let lambda = noise.log_lambda.map(f64::exp);
    if lambda.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::NonFinite("smoothed nuggets".into()));
    }
    let c_n = data.cov_from_d2(&params.theta);
    let mean = eval_mean_side(data, &c_n, &lambda, scale)?;
    Ok(EvalParts {
        loglik: mean.lmean + noise.lnoise,
        m_hat: noise.m_hat,
        alpha_delta: noise.alpha_delta,
        tau2_noise: noise.tau2_noise,
        log_lambda: noise.log_lambda,
        lambda,
        kn_chol: mean.kn_chol,
        alpha: mean.alpha,
        tau2: mean.tau2,
    })
}

impl HetGPModel {
    /// Construct a model from explicit hyperparameters with the profiled
    /// scale (responses standardized internally). This is the terminal step
    /// of `fit` and the snapshot-reload path.
    pub fn from_parts(design: DesignSet, params: HetGPParams) -> Result<Self> {
        Self::from_parts_mode(design, params, ScaleMode::Profiled)
    }

    /// Construct a model with a fixed scale and no response standardization.
    /// Intended for oracle constructions where every quantity must live on
    /// the raw scale.
    pub fn from_parts_fixed(design: DesignSet, params: HetGPParams, tau2: f64) -> Result<Self> {
        Self::from_parts_mode(design, params, ScaleMode::Fixed(tau2))
    }

    fn from_parts_mode(design: DesignSet, params: HetGPParams, scale: ScaleMode) -> Result<Self> {
        validate_params(&params, &design)?;
        let data = match scale {
            ScaleMode::Profiled => LikData::new(&design),
            ScaleMode::Fixed(_) => LikData::identity_scale(&design),
        };
        let parts = build_parts(&data, &params, scale)?;
        let kn_inv = parts.kn_chol.inverse();
        Ok(HetGPModel {
            kernel_mean: KernelSpec::new(params.theta)?,
            kernel_noise: KernelSpec::new(params.theta_noise)?,
            g_noise: params.g_noise,
            log_delta: DVector::from_column_slice(&params.log_delta),
            scale_mode: scale,
            mu_y: data.mu_y,
            sd_y: data.sd_y,
            tau2: parts.tau2,
            tau2_noise: parts.tau2_noise,
            noise_mean: parts.m_hat,
            smoothed_log_lambda: parts.log_lambda,
            lambda: parts.lambda,
            kn_chol: parts.kn_chol,
            kn_inv,
            alpha: parts.alpha,
            alpha_delta: parts.alpha_delta,
            loglik: parts.loglik,
            design,
        })
    }

    /// Maximum-likelihood fit by bounded multi-start quasi-Newton search.
    /// Deterministic under a fixed `cfg.seed`; start results are reduced in
    /// start order (ties keep the lowest index).
    pub fn fit(design: DesignSet, cfg: &FitConfig) -> Result<Self> {
        let d = design.dim();
        let n = design.n_unique();
        if n < d + 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least d + 2 = {} unique locations, have {n}",
                d + 2
            )));
        }
        if design.counts().iter().all(|&a| a == 1) {
            if !cfg.allow_homoskedastic {
                return Err(Error::NeedsReplication);
            }
            return Self::fit_homoskedastic(design, cfg);
        }

        let data = LikData::new(&design);
        let starts = fit_starts(&data, cfg);
        let bounds = fit_bounds(d, n, cfg);
        let opts = OptimOptions {
            max_iters: cfg.max_iters,
            grad_tol: cfg.grad_tol,
            memory: 8,
        };

        let outcomes: Vec<_> = starts
            .par_iter()
            .map(|x0| {
                let objective = |p: &DVector<f64>| match eval_grad(&data, p) {
                    Ok((f, g)) => (-f, -g),
                    Err(_) => (f64::INFINITY, DVector::zeros(p.len())),
                };
                minimize_bounded(objective, x0, &bounds, &opts)
            })
            .collect();

        let best = outcomes
            .iter()
            .enumerate()
            .filter(|(_, o)| o.f.is_finite())
            .min_by(|(ia, a), (ib, b)| a.f.partial_cmp(&b.f).unwrap().then(ia.cmp(ib)))
            .map(|(i, _)| i)
            .ok_or_else(|| Error::NonFinite("all fit starts failed".into()))?;

        let p = &outcomes[best].x;
        let (theta, theta_noise, g_noise, log_delta) = unpack(p, d, n);
        Self::from_parts(
            design,
            HetGPParams {
                theta,
                theta_noise,
                g_noise,
                log_delta: log_delta.iter().copied().collect(),
            },
        )
    }

    /// Constant-noise fallback for designs without replication: a single
    /// nugget g is estimated and represented as a constant latent field
    /// (g_noise = 0, so the smoothed surface is exactly constant).
    fn fit_homoskedastic(design: DesignSet, cfg: &FitConfig) -> Result<Self> {
        let d = design.dim();
        let n = design.n_unique();
        let data = LikData::new(&design);
        let (lg_lo, lg_hi) = (cfg.log_delta_bounds.0, cfg.log_delta_bounds.1);
        let bounds = BoxBounds::new(
            [vec![cfg.theta_bounds.0.ln(); d], vec![lg_lo]].concat(),
            [vec![cfg.theta_bounds.1.ln(); d], vec![lg_hi]].concat(),
        );
        let opts = OptimOptions {
            max_iters: cfg.max_iters,
            grad_tol: cfg.grad_tol,
            memory: 8,
        };
        let value = |p: &DVector<f64>| -> Result<f64> {
            let theta: Vec<f64> = (0..d).map(|k| p[k].exp()).collect();
            let lambda = DVector::from_element(n, p[d].exp());
            let c_n = data.cov_from_d2(&theta);
            let mean = eval_mean_side(&data, &c_n, &lambda, ScaleMode::Profiled)?;
            Ok(mean.lmean)
        };
        let mut rng = derive_rng(cfg.seed, &[purpose::FIT, 0x4f4d]);
        let starts = stratified_starts(&bounds, cfg.n_starts.max(1), &mut rng);
        let outcomes: Vec<_> = starts
            .iter()
            .map(|x0| {
                let objective = |p: &DVector<f64>| {
                    let f = value(p).map(|v| -v).unwrap_or(f64::INFINITY);
                    let mut g = DVector::zeros(p.len());
                    let h = FD_STEP;
                    if f.is_finite() {
                        for j in 0..p.len() {
                            let mut pp = p.clone();
                            pp[j] += h;
                            let mut pm = p.clone();
                            pm[j] -= h;
                            let fp = value(&pp).map(|v| -v).unwrap_or(f64::INFINITY);
                            let fm = value(&pm).map(|v| -v).unwrap_or(f64::INFINITY);
                            g[j] = if fp.is_finite() && fm.is_finite() {
                                (fp - fm) / (2.0 * h)
                            } else {
                                0.0
                            };
                        }
                    }
                    (f, g)
                };
                minimize_bounded(objective, x0, &bounds, &opts)
            })
            .collect();
        let best = outcomes
            .iter()
            .enumerate()
            .filter(|(_, o)| o.f.is_finite())
            .min_by(|(ia, a), (ib, b)| a.f.partial_cmp(&b.f).unwrap().then(ia.cmp(ib)))
            .map(|(i, _)| i)
            .ok_or_else(|| Error::NonFinite("homoskedastic fit failed".into()))?;
        let p = &outcomes[best].x;
        let theta: Vec<f64> = (0..d).map(|k| p[k].exp()).collect();
        let params = HetGPParams {
            theta,
            theta_noise: vec![1.0; d],
            g_noise: 0.0,
            log_delta: vec![p[d]; n],
        };
        Self::from_parts(design, params)
    }

    /// Warm refit on pooled data: the current hyperparameters become one of
    /// the multi-start initializations. No new runs is a no-op.
    pub fn update(&self, new_runs: &[(Vec<f64>, f64)], cfg: &FitConfig) -> Result<Self> {
        if new_runs.is_empty() {
            return Ok(self.clone());
        }
        let design = self.design.with_runs(new_runs)?;
        let n_new = design.n_unique();
        // Carry latents over to the pooled design; fresh locations start
        // from the smoothed field evaluated at their coordinates.
        let mut log_delta = Vec::with_capacity(n_new);
        for row in design.unique_rows() {
            match self.design.find_unique(row) {
                Some(i) => log_delta.push(self.log_delta[i]),
                None => log_delta.push(
                    self.noise_rel(row)?
                        .ln()
                        .clamp(cfg.log_delta_bounds.0, cfg.log_delta_bounds.1),
                ),
            }
        }
        let warm = HetGPParams {
            theta: self.kernel_mean.lengthscales().to_vec(),
            theta_noise: self.kernel_noise.lengthscales().to_vec(),
            g_noise: self.g_noise.max(1e-6),
            log_delta,
        };
        let mut cfg2 = cfg.clone();
        cfg2.extra_starts.insert(0, warm);
        Self::fit(design, &cfg2)
    }

    /// Predict mean, nugget-free mean variance, and noise variance at the
    /// rows of `xstar` (original response scale).
    pub fn predict(&self, xstar: &DMatrix<f64>) -> Result<Prediction> {
        if xstar.ncols() != self.design.dim() {
            return Err(Error::DimensionMismatch(format!(
                "test inputs have {} columns, model dimension is {}",
                xstar.ncols(),
                self.design.dim()
            )));
        }
        let x = self.design.x_matrix();
        let cstar = kernel::cov(xstar, &x, &self.kernel_mean)?;
        let mean_std = &cstar * &self.alpha;
        let solved = self.kn_chol.solve(&cstar.transpose());
        let m = xstar.nrows();
        let mut var = DVector::zeros(m);
        for i in 0..m {
            let mut q = 0.0;
            for j in 0..x.nrows() {
                q += cstar[(i, j)] * solved[(j, i)];
            }
            var[i] = (self.tau2 * (1.0 - q)).max(0.0);
        }
        let cstar_d = kernel::cov(xstar, &x, &self.kernel_noise)?;
        let smooth = &cstar_d * &self.alpha_delta;
        let sd2 = self.sd_y * self.sd_y;
        let noise = DVector::from_fn(m, |i, _| {
            self.tau2 * (self.noise_mean + smooth[i]).exp() * sd2
        });
        Ok(Prediction {
            mean: mean_std.map(|v| v * self.sd_y + self.mu_y),
            var_mean: var.map(|v| v * sd2),
            noise,
        })
    }

    /// Relative (dimensionless) noise level at a point: the smoothed latent
    /// field exp(m + c_d(x) K_d^{-1} (log Delta - m 1)). This is the Lambda
    /// that enters K as Lambda / a; multiply by tau2 for the standardized
    /// noise variance.
    pub fn noise_rel(&self, x: &[f64]) -> Result<f64> {
        let xm = self.design.x_matrix();
        let c = kernel::cov_vec(x, &xm, &self.kernel_noise)?;
        Ok((self.noise_mean + c.dot(&self.alpha_delta)).exp())
    }

    /// Derivative of the relative noise level with respect to coordinate `p`
    /// of `x` (log-space chain rule through the smoother).
    pub fn dnoise_rel_dcoord(&self, x: &[f64], p: usize) -> Result<f64> {
        let xm = self.design.x_matrix();
        let dc = kernel::dcov_dcoord(x, &xm, &self.kernel_noise, p)?;
        Ok(self.noise_rel(x)? * dc.dot(&self.alpha_delta))
    }

    pub fn design(&self) -> &DesignSet {
        &self.design
    }

    pub fn kernel_mean(&self) -> &KernelSpec {
        &self.kernel_mean
    }

    pub fn kernel_noise(&self) -> &KernelSpec {
        &self.kernel_noise
    }

    pub fn g_noise(&self) -> f64 {
        self.g_noise
    }

    pub fn tau2(&self) -> f64 {
        self.tau2
    }

    pub fn tau2_noise(&self) -> f64 {
        self.tau2_noise
    }

    pub fn noise_mean(&self) -> f64 {
        self.noise_mean
    }

    pub fn log_delta(&self) -> &DVector<f64> {
        &self.log_delta
    }

    pub fn smoothed_log_lambda(&self) -> &DVector<f64> {
        &self.smoothed_log_lambda
    }

    /// Smoothed nuggets Lambda_i at the training locations.
    pub fn lambda(&self) -> &DVector<f64> {
        &self.lambda
    }

    pub fn kn_inv(&self) -> &DMatrix<f64> {
        &self.kn_inv
    }

    pub fn kn_chol(&self) -> &Cholesky<f64, Dyn> {
        &self.kn_chol
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn alpha_delta(&self) -> &DVector<f64> {
        &self.alpha_delta
    }

    pub fn loglik(&self) -> f64 {
        self.loglik
    }

    pub fn y_mean(&self) -> f64 {
        self.mu_y
    }

    pub fn y_sd(&self) -> f64 {
        self.sd_y
    }

    pub fn params(&self) -> HetGPParams {
        HetGPParams {
            theta: self.kernel_mean.lengthscales().to_vec(),
            theta_noise: self.kernel_noise.lengthscales().to_vec(),
            g_noise: self.g_noise,
            log_delta: self.log_delta.iter().copied().collect(),
        }
    }

    /// Cheap structural hash used to stamp acquisition workspaces.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut mix = |bits: u64| {
            h ^= bits;
            h = h.wrapping_mul(0x1000_0000_01b3);
        };
        mix(self.design.n_unique() as u64);
        mix(self.design.n_total() as u64);
        for row in self.design.unique_rows() {
            for v in row {
                mix(v.to_bits());
            }
        }
        for &a in self.design.counts() {
            mix(a as u64);
        }
        for v in self.kernel_mean.lengthscales() {
            mix(v.to_bits());
        }
        for v in self.kernel_noise.lengthscales() {
            mix(v.to_bits());
        }
        mix(self.g_noise.to_bits());
        for v in self.log_delta.iter() {
            mix(v.to_bits());
        }
        mix(self.tau2.to_bits());
        mix(self.sd_y.to_bits());
        h
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot {
            version: 1,
            design: self.design.clone(),
            params: self.params(),
            scale_mode: self.scale_mode,
            standardize_mean: self.mu_y,
            standardize_sd: self.sd_y,
            tau2: self.tau2,
            tau2_noise: self.tau2_noise,
            noise_mean: self.noise_mean,
            smoothed_log_lambda: self.smoothed_log_lambda.iter().copied().collect(),
            loglik: self.loglik,
        }
    }

    pub fn from_snapshot(snap: ModelSnapshot) -> Result<Self> {
        if snap.version != 1 {
            return Err(Error::Serde(format!(
                "unsupported snapshot version {}",
                snap.version
            )));
        }
        Self::from_parts_mode(snap.design, snap.params, snap.scale_mode)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.snapshot())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let snap: ModelSnapshot = serde_json::from_str(s)?;
        Self::from_snapshot(snap)
    }
}

/// Structured-text model snapshot. Floats survive the JSON round trip
/// bit-faithfully (shortest round-trip formatting).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub version: u32,
    pub design: DesignSet,
    pub params: HetGPParams,
    pub scale_mode: ScaleMode,
    pub standardize_mean: f64,
    pub standardize_sd: f64,
    pub tau2: f64,
    pub tau2_noise: f64,
    pub noise_mean: f64,
    pub smoothed_log_lambda: Vec<f64>,
    pub loglik: f64,
}

// ---------------------------------------------------------------------------
// Fit initialization
// ---------------------------------------------------------------------------

fn fit_bounds(d: usize, n: usize, cfg: &FitConfig) -> BoxBounds {
    let mut lo = Vec::with_capacity(2 * d + 1 + n);
    let mut hi = Vec::with_capacity(2 * d + 1 + n);
    lo.extend(std::iter::repeat_n(cfg.theta_bounds.0.ln(), d));
    hi.extend(std::iter::repeat_n(cfg.theta_bounds.1.ln(), d));
    lo.extend(std::iter::repeat_n(cfg.theta_noise_bounds.0.ln(), d));
    hi.extend(std::iter::repeat_n(cfg.theta_noise_bounds.1.ln(), d));
    lo.push(cfg.g_noise_bounds.0.ln());
    hi.push(cfg.g_noise_bounds.1.ln());
    lo.extend(std::iter::repeat_n(cfg.log_delta_bounds.0, n));
    hi.extend(std::iter::repeat_n(cfg.log_delta_bounds.1, n));
    BoxBounds::new(lo, hi)
}

/// Stratified sample of the hyperparameter box (one stratum per start and
/// axis, independently permuted).
fn stratified_starts(
    bounds: &BoxBounds,
    n_starts: usize,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> Vec<DVector<f64>> {
    use rand::seq::SliceRandom;
    use rand::Rng;
    let dim = bounds.lower.len();
    let mut strata: Vec<Vec<usize>> = Vec::with_capacity(dim);
    for _ in 0..dim {
        let mut idx: Vec<usize> = (0..n_starts).collect();
        idx.shuffle(rng);
        strata.push(idx);
    }
    (0..n_starts)
        .map(|s| {
            DVector::from_fn(dim, |j, _| {
                let u = (strata[j][s] as f64 + rng.random::<f64>()) / n_starts as f64;
                bounds.lower[j] + u * (bounds.upper[j] - bounds.lower[j])
            })
        })
        .collect()
}

/// Data-driven latent initialization: empirical per-location log variances
/// on the standardized scale, with singly-observed locations filled from
/// the mean of the informed ones.
fn empirical_log_delta(data: &LikData, cfg: &FitConfig) -> Vec<f64> {
    let n = data.n();
    let mut vals = Vec::with_capacity(n);
    let mut informed = Vec::new();
    for i in 0..n {
        if data.counts[i] >= 2 {
            let v = (data.ss[i] / (data.counts[i] as f64 - 1.0)).max(1e-12);
            informed.push(v.ln());
            vals.push(Some(v.ln()));
        } else {
            vals.push(None);
        }
    }
    let fill = if informed.is_empty() {
        -1.0
    } else {
        informed.iter().sum::<f64>() / informed.len() as f64
    };
    vals.into_iter()
        .map(|v| {
            v.unwrap_or(fill)
                .clamp(cfg.log_delta_bounds.0, cfg.log_delta_bounds.1)
        })
        .collect()
}

fn pack(params: &HetGPParams) -> DVector<f64> {
    let d = params.theta.len();
    let n = params.log_delta.len();
    let mut p = DVector::zeros(2 * d + 1 + n);
    for k in 0..d {
        p[k] = params.theta[k].ln();
        p[d + k] = params.theta_noise[k].ln();
    }
    p[2 * d] = params.g_noise.ln();
    for i in 0..n {
        p[2 * d + 1 + i] = params.log_delta[i];
    }
    p
}

fn fit_starts(data: &LikData, cfg: &FitConfig) -> Vec<DVector<f64>> {
    let d = data.dim();
    let n = data.n();
    let bounds = fit_bounds(d, n, cfg);
    let mut rng = derive_rng(cfg.seed, &[purpose::FIT]);
    let hyper_dim = 2 * d + 1;
    let hyper_bounds = BoxBounds::new(
        bounds.lower.iter().take(hyper_dim).copied().collect(),
        bounds.upper.iter().take(hyper_dim).copied().collect(),
    );
    let log_delta0 = empirical_log_delta(data, cfg);
    let mut starts: Vec<DVector<f64>> = cfg
        .extra_starts
        .iter()
        .map(|p| {
            let mut v = pack(p);
            bounds.clamp(&mut v);
            v
        })
        .collect();
    for hyper in stratified_starts(&hyper_bounds, cfg.n_starts.max(1), &mut rng) {
        let mut p = DVector::zeros(2 * d + 1 + n);
        for j in 0..hyper_dim {
            p[j] = hyper[j];
        }
        for i in 0..n {
            p[2 * d + 1 + i] = log_delta0[i];
        }
        starts.push(p);
    }
    starts
}
