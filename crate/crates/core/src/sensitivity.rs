//! Variance-based sensitivity analysis on the fitted surrogate: main-effect
//! curves, first-order (S) and total (T) Sobol indices, the interaction
//! measure I = T - S, for the mean and noise processes, with block-bootstrap
//! uncertainty.
//!
//! Pick-freeze estimators (documented, with A and B two base LHS designs and
//! AB_j equal to A with column j replaced from B):
//!   V        = Var(f(A))                       (unbiased sample variance)
//!   S_j      = mean(f(B) * (f(AB_j) - f(A))) / V
//!   T_j      = mean((f(A) - f(AB_j))^2) / (2 V)
//! Raw estimates are reported alongside copies clamped to [0, 1].

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_rng, purpose};
use crate::sampling::plain_lhs;
use crate::surrogate::{DesignSet, FitConfig, HetGPModel};

/// Which predictive surface the analysis targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensTarget {
    Mean,
    Noise,
}

impl SensTarget {
    pub fn name(&self) -> &'static str {
        match self {
            SensTarget::Mean => "mean",
            SensTarget::Noise => "noise",
        }
    }
}

fn predict_target(model: &HetGPModel, x: &DMatrix<f64>, target: SensTarget) -> Result<Vec<f64>> {
    let pred = model.predict(x)?;
    Ok(match target {
        SensTarget::Mean => pred.mean.iter().copied().collect(),
        SensTarget::Noise => pred.noise.iter().copied().collect(),
    })
}

/// Main-effect curve of an arbitrary surface. Both targets run through
/// this one estimator with the predictive surface substituted.
pub fn main_effect_fn<F>(
    surface: F,
    d: usize,
    input: usize,
    grid: &[f64],
    n_mc: usize,
    seed: u64,
) -> Result<MainEffect>
where
    F: Fn(&DMatrix<f64>) -> Result<Vec<f64>> + Sync,
{
    if input >= d {
        return Err(Error::InvalidParameter(format!(
            "input index {input} out of range for dimension {d}"
        )));
    }
    let mut rng = derive_rng(seed, &[purpose::MAIN_EFFECT, input as u64]);
    let base = plain_lhs(n_mc, d, &mut rng);
    let values: Vec<f64> = grid
        .par_iter()
        .map(|&g| {
            let mut x = base.clone();
            for i in 0..n_mc {
                x[(i, input)] = g;
            }
            let preds = surface(&x)?;
            Ok(preds.iter().sum::<f64>() / n_mc as f64)
        })
        .collect::<Result<_>>()?;
    Ok(MainEffect {
        input,
        grid: grid.to_vec(),
        values,
    })
}

/// Pick-freeze Sobol estimator over an arbitrary surface (the documented
/// S and T formulas). Both targets delegate here.
pub fn sobol_indices_fn<F>(surface: F, d: usize, n_mc: usize, seed: u64) -> Result<SobolIndices>
where
    F: Fn(&DMatrix<f64>) -> Result<Vec<f64>> + Sync,
{
    let mut rng_a = derive_rng(seed, &[purpose::SOBOL, 0xa]);
    let mut rng_b = derive_rng(seed, &[purpose::SOBOL, 0xb]);
    let a = plain_lhs(n_mc, d, &mut rng_a);
    let b = plain_lhs(n_mc, d, &mut rng_b);
    let f_a = surface(&a)?;
    let f_b = surface(&b)?;
    let mean_a = f_a.iter().sum::<f64>() / n_mc as f64;
    let var = f_a
        .iter()
        .map(|v| (v - mean_a) * (v - mean_a))
        .sum::<f64>()
        / (n_mc as f64 - 1.0);

    if var < 1e-12 {
        return Ok(SobolIndices {
            s_raw: vec![0.0; d],
            t_raw: vec![0.0; d],
            s: vec![0.0; d],
            t: vec![0.0; d],
            interaction: vec![0.0; d],
            total_variance: var,
            degenerate: true,
        });
    }

    let per_input: Vec<(f64, f64)> = (0..d)
        .into_par_iter()
        .map(|j| {
            let mut abj = a.clone();
            for i in 0..n_mc {
                abj[(i, j)] = b[(i, j)];
            }
            let f_abj = surface(&abj)?;
            let mut s_num = 0.0;
            let mut t_num = 0.0;
            for i in 0..n_mc {
                s_num += f_b[i] * (f_abj[i] - f_a[i]);
                t_num += (f_a[i] - f_abj[i]) * (f_a[i] - f_abj[i]);
            }
            Ok((s_num / n_mc as f64 / var, t_num / (2.0 * n_mc as f64) / var))
        })
        .collect::<Result<_>>()?;

    let s_raw: Vec<f64> = per_input.iter().map(|p| p.0).collect();
    let t_raw: Vec<f64> = per_input.iter().map(|p| p.1).collect();
    Ok(SobolIndices {
        s: s_raw.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        t: t_raw.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        interaction: t_raw.iter().zip(&s_raw).map(|(t, s)| t - s).collect(),
        s_raw,
        t_raw,
        total_variance: var,
        degenerate: false,
    })
}

/// Main-effect curve for one input: the target surface averaged over the
/// other inputs under independent uniforms, evaluated on a grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MainEffect {
    pub input: usize,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

/// ME(x_j = g) estimated with one common n_mc-point LHS whose column j is
/// pinned to each grid value in turn.
pub fn main_effects(
    model: &HetGPModel,
    input: usize,
    grid: &[f64],
    n_mc: usize,
    target: SensTarget,
    seed: u64,
) -> Result<MainEffect> {
    main_effect_fn(
        |x| predict_target(model, x, target),
        model.design().dim(),
        input,
        grid,
        n_mc,
        seed,
    )
}

pub fn default_grid(size: usize) -> Vec<f64> {
    (0..size)
        .map(|i| i as f64 / (size.max(2) - 1) as f64)
        .collect()
}

/// First-order and total Sobol indices for every input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SobolIndices {
    pub s_raw: Vec<f64>,
    pub t_raw: Vec<f64>,
    /// Clamped to [0, 1].
    pub s: Vec<f64>,
    pub t: Vec<f64>,
    /// Interaction measure T - S (raw).
    pub interaction: Vec<f64>,
    pub total_variance: f64,
    /// Set when the target surface is (numerically) constant; all indices
    /// are defined as zero.
    pub degenerate: bool,
}

/// Pick-freeze Monte Carlo estimate of (S, T) under independent uniforms.
pub fn sobol_indices(
    model: &HetGPModel,
    n_mc: usize,
    target: SensTarget,
    seed: u64,
) -> Result<SobolIndices> {
    sobol_indices_fn(
        |x| predict_target(model, x, target),
        model.design().dim(),
        n_mc,
        seed,
    )
}

/// Full report: main-effect curves on the point-estimate model, indices,
/// and bootstrap distributions of (S, T, I) per input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub target: SensTarget,
    pub main_effects: Vec<MainEffect>,
    pub indices: SobolIndices,
    /// bootstrap_s[b][j] = S_j in resample b; same layout for t and i.
    pub bootstrap_s: Vec<Vec<f64>>,
    pub bootstrap_t: Vec<Vec<f64>>,
    pub bootstrap_i: Vec<Vec<f64>>,
    /// Fraction of bootstrap resamples with I_j = T_j - S_j > 0.
    pub prop_i_positive: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SensConfig {
    pub n_mc: usize,
    pub grid_size: usize,
    pub bootstrap: usize,
    pub seed: u64,
    pub fit: FitConfig,
}

impl Default for SensConfig {
    fn default() -> Self {
        SensConfig {
            n_mc: 10_000,
            grid_size: 101,
            bootstrap: 100,
            seed: 0,
            fit: FitConfig::default(),
        }
    }
}

/// Resample unique locations with their replicate blocks intact, refit,
/// recompute indices, and summarize. Resamples with fewer than d + 2
/// distinct locations are redrawn (up to 10 times each).
pub fn bootstrap_indices(
    design: &DesignSet,
    cfg: &SensConfig,
    target: SensTarget,
) -> Result<SensitivityReport> {
    let b_count = cfg.bootstrap.max(1);
    let d = design.dim();
    let n = design.n_unique();

    let point_model = HetGPModel::fit(design.clone(), &cfg.fit.clone().with_seed(cfg.seed))?;
    let indices = sobol_indices(&point_model, cfg.n_mc, target, cfg.seed)?;
    let grid = default_grid(cfg.grid_size);
    let main_effects: Vec<MainEffect> = (0..d)
        .map(|j| main_effects(&point_model, j, &grid, cfg.n_mc, target, cfg.seed))
        .collect::<Result<_>>()?;

    let resample_results: Vec<(Vec<f64>, Vec<f64>)> = (0..b_count)
        .into_par_iter()
        .map(|b| {
            let mut rng = derive_rng(cfg.seed, &[purpose::BOOTSTRAP, b as u64]);
            for attempt in 0..10 {
                let chosen: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                let mut runs = Vec::new();
                for &i in &chosen {
                    let loc = &design.unique_rows()[i];
                    for &y in &design.raw_y()[i] {
                        runs.push((loc.clone(), y));
                    }
                }
                let resampled = DesignSet::aggregate(&runs)?;
                if resampled.n_unique() < d + 2 {
                    let _ = attempt;
                    continue;
                }
                if resampled.counts().iter().all(|&a| a == 1) {
                    continue;
                }
                let fit_cfg = cfg
                    .fit
                    .clone()
                    .with_seed(crate::rng::derive_seed(cfg.seed, &[purpose::BOOTSTRAP, b as u64]));
                let model = HetGPModel::fit(resampled, &fit_cfg)?;
                let idx = sobol_indices(
                    &model,
                    cfg.n_mc,
                    target,
                    crate::rng::derive_seed(cfg.seed, &[purpose::SOBOL, b as u64]),
                )?;
                return Ok((idx.s_raw, idx.t_raw));
            }
            Err(Error::InvalidParameter(
                "bootstrap could not draw a usable resample in 10 attempts".into(),
            ))
        })
        .collect::<Result<_>>()?;

    let bootstrap_s: Vec<Vec<f64>> = resample_results.iter().map(|r| r.0.clone()).collect();
    let bootstrap_t: Vec<Vec<f64>> = resample_results.iter().map(|r| r.1.clone()).collect();
    let bootstrap_i: Vec<Vec<f64>> = bootstrap_s
        .iter()
        .zip(&bootstrap_t)
        .map(|(s, t)| t.iter().zip(s).map(|(tv, sv)| tv - sv).collect())
        .collect();
    let prop_i_positive: Vec<f64> = (0..d)
        .map(|j| {
            bootstrap_i.iter().filter(|row| row[j] > 0.0).count() as f64 / b_count as f64
        })
        .collect();

    Ok(SensitivityReport {
        target,
        main_effects,
        indices,
        bootstrap_s,
        bootstrap_t,
        bootstrap_i,
        prop_i_positive,
    })
}

impl SensitivityReport {
    /// CSV of the index table: input, s_raw, t_raw, s, t, interaction.
    pub fn indices_csv(&self) -> String {
        let mut out = String::from("input,s_raw,t_raw,s,t,interaction\n");
        for j in 0..self.indices.s_raw.len() {
            out.push_str(&format!(
                "x{},{},{},{},{},{}\n",
                j + 1,
                self.indices.s_raw[j],
                self.indices.t_raw[j],
                self.indices.s[j],
                self.indices.t[j],
                self.indices.interaction[j]
            ));
        }
        out
    }

    /// CSV of the main-effect curves: input, grid, value.
    pub fn main_effects_csv(&self) -> String {
        let mut out = String::from("input,grid,value\n");
        for me in &self.main_effects {
            for (g, v) in me.grid.iter().zip(&me.values) {
                out.push_str(&format!("x{},{},{}\n", me.input + 1, g, v));
            }
        }
        out
    }

    /// One row of the proportions table (per-target layout mirrored by the
    /// CLI into a two-row table).
    pub fn proportions_row(&self) -> String {
        self.prop_i_positive
            .iter()
            .map(|p| format!("{p}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

use rand::Rng;

#[cfg(test)]
mod tests {
    use super::*;
    

    /// Near-noiseless surrogate over f on [0,1]^2 from a replicated LHS.
    fn surrogate_of(f: impl Fn(f64, f64) -> f64, seed: u64) -> HetGPModel {
        let mut rng = derive_rng(seed, &[0x5e]);
        let x = plain_lhs(36, 2, &mut rng);
        let mut runs = Vec::new();
        for i in 0..36 {
            let (a, b) = (x[(i, 0)], x[(i, 1)]);
            for r in 0..2 {
                let jitter = 1e-4 * ((i * 2 + r) as f64 % 3.0 - 1.0);
                runs.push((vec![a, b], f(a, b) + jitter));
            }
        }
        let ds = DesignSet::aggregate(&runs).unwrap();
        let cfg = FitConfig {
            n_starts: 2,
            max_iters: 80,
            seed,
            ..Default::default()
        };
        HetGPModel::fit(ds, &cfg).unwrap()
    }

    #[test]
    fn main_effect_of_linear_coordinate() {
        let model = surrogate_of(|a, _| a, 3);
        let grid: Vec<f64> = vec![0.1, 0.3, 0.5, 0.7, 0.9];
        let me0 = main_effects(&model, 0, &grid, 2000, SensTarget::Mean, 5).unwrap();
        for (g, v) in grid.iter().zip(&me0.values) {
            assert!((v - g).abs() < 0.05, "ME(x1={g}) = {v}");
        }
        let me1 = main_effects(&model, 1, &grid, 2000, SensTarget::Mean, 5).unwrap();
        for v in &me1.values {
            assert!((v - 0.5).abs() < 0.05, "ME(x2) = {v}");
        }
    }

    #[test]
    fn main_effect_grid_average_matches_global_mean() {
        let model = surrogate_of(|a, b| a + 0.5 * b, 7);
        let grid = default_grid(21);
        let me = main_effects(&model, 0, &grid, 4000, SensTarget::Mean, 9).unwrap();
        let grid_avg = me.values.iter().sum::<f64>() / me.values.len() as f64;
        let mut rng = derive_rng(10, &[0x77]);
        let x = plain_lhs(4000, 2, &mut rng);
        let preds = model.predict(&x).unwrap();
        let global = preds.mean.iter().sum::<f64>() / preds.mean.len() as f64;
        assert!((grid_avg - global).abs() < 0.02, "{grid_avg} vs {global}");
    }

    #[test]
    fn main_effect_constant_model_is_flat() {
        let model = surrogate_of(|_, _| 1.5, 11);
        let grid = default_grid(11);
        for j in 0..2 {
            let me = main_effects(&model, j, &grid, 1000, SensTarget::Mean, 2).unwrap();
            let spread = me.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - me.values.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(spread < 0.02, "spread {spread}");
        }
    }

    #[test]
    fn sobol_additive_function() {
        let model = surrogate_of(|a, b| a + b, 13);
        let idx = sobol_indices(&model, 10_000, SensTarget::Mean, 17).unwrap();
        for j in 0..2 {
            assert!((idx.s_raw[j] - 0.5).abs() < 0.05, "S = {:?}", idx.s_raw);
            assert!((idx.t_raw[j] - 0.5).abs() < 0.05, "T = {:?}", idx.t_raw);
        }
    }

    #[test]
    fn sobol_single_variable_function() {
        let model = surrogate_of(|a, _| (3.0 * a).sin(), 19);
        let idx = sobol_indices(&model, 10_000, SensTarget::Mean, 23).unwrap();
        assert!(idx.s_raw[1].abs() < 0.03, "S2 = {}", idx.s_raw[1]);
        assert!(idx.t_raw[1].abs() < 0.03, "T2 = {}", idx.t_raw[1]);
        assert!(idx.s_raw[0] > 0.8);
    }

    #[test]
    fn sobol_pure_interaction() {
        let model = surrogate_of(|a, b| (a - 0.5) * (b - 0.5), 29);
        let idx = sobol_indices(&model, 10_000, SensTarget::Mean, 31).unwrap();
        for j in 0..2 {
            assert!(idx.s_raw[j].abs() < 0.1, "S = {:?}", idx.s_raw);
            assert!((idx.t_raw[j] - 1.0).abs() < 0.1, "T = {:?}", idx.t_raw);
        }
    }

    #[test]
    fn degenerate_variance_flags_and_zeroes() {
        let model = surrogate_of(|_, _| 2.0, 37);
        let idx = sobol_indices(&model, 4000, SensTarget::Mean, 41).unwrap();
        if idx.degenerate {
            assert!(idx.s_raw.iter().all(|&v| v == 0.0));
            assert!(idx.t_raw.iter().all(|&v| v == 0.0));
        } else {
            // A fitted constant may keep a sliver of wiggle; the variance
            // it explains must be negligible on the response scale even
            // when the normalized indices are not.
            assert!(idx.total_variance < 1e-6, "{}", idx.total_variance);
        }
    }

    #[test]
    fn clamped_copies_stay_in_unit_interval() {
        let model = surrogate_of(|a, b| a * b, 43);
        let idx = sobol_indices(&model, 3000, SensTarget::Mean, 47).unwrap();
        for j in 0..2 {
            assert!((0.0..=1.0).contains(&idx.s[j]));
            assert!((0.0..=1.0).contains(&idx.t[j]));
        }
    }

    #[test]
    fn noise_target_runs_same_machinery() {
        let model = surrogate_of(|a, b| a + b, 53);
        let idx = sobol_indices(&model, 2000, SensTarget::Noise, 59).unwrap();
        assert_eq!(idx.s_raw.len(), 2);
        assert!(idx.s_raw.iter().all(|v| v.is_finite()));
    }
}
