//! End-to-end sequential design loop: initial space-filling design with
//! replicates, repeated fit -> optimize -> backtrack -> simulate cycles,
//! metrics, diagnostics, and crash-safe persistence.
//!
//! All randomness is derived from (seed, purpose, batch index), so a killed
//! campaign resumes onto the identical trajectory and the same config and
//! seed reproduce identical artifacts.

use std::io::Write as IoWrite;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{imspe_current, optimize_batch};
use crate::backtrack::{merge_sequence, select_batch, BatchSite};
use crate::config::{CampaignConfig, RepSpec, Transform};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, derive_seed, purpose};
pub use crate::sampling::{maximin_batch, maximin_lhs, plain_lhs};
use crate::surrogate::{DesignSet, HetGPModel, ModelSnapshot};
use crate::testbeds::Testbed;

/// Acquisition strategy for a campaign (the bench command compares them).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Backtracking,
    NoBacktracking,
    MaximinBatch,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Backtracking => "backtracking",
            Strategy::NoBacktracking => "no_backtracking",
            Strategy::MaximinBatch => "maximin_batch",
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "backtracking" | "bt" => Ok(Strategy::Backtracking),
            "no_backtracking" | "no-backtracking" | "nbt" => Ok(Strategy::NoBacktracking),
            "maximin_batch" | "maximin" => Ok(Strategy::MaximinBatch),
            other => Err(Error::Config(format!("unknown strategy '{other}'"))),
        }
    }
}

/// One simulator run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub x: Vec<f64>,
    pub y: f64,
    pub batch_index: usize,
    pub multiplicity_origin: usize,
}

/// Per-batch history entry (batch 0 is the initial design).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch_index: usize,
    pub n_total: usize,
    pub n_unique: usize,
    pub s_hat: usize,
    pub imspe: f64,
    pub rmspe: f64,
    pub score: f64,
    pub wall_seconds: f64,
    /// Surrogate (re)fit time within this batch.
    pub fit_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CampaignState {
    pub config: CampaignConfig,
    pub strategy: Strategy,
    pub completed_batches: usize,
    pub runs: Vec<RunRecord>,
    pub history: Vec<BatchRecord>,
    pub model: ModelSnapshot,
    /// Smallest positive raw response seen (log-floor transform state).
    pub min_positive: Option<f64>,
}

impl CampaignState {
    pub fn model(&self) -> Result<HetGPModel> {
        HetGPModel::from_snapshot(self.model.clone())
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Out-of-sample root mean-squared prediction error against known truth.
pub fn rmspe(model: &HetGPModel, test_x: &DMatrix<f64>, truth: &[f64]) -> Result<f64> {
    if test_x.nrows() == 0 {
        return Err(Error::EmptyInput("empty test set".into()));
    }
    if truth.len() != test_x.nrows() {
        return Err(Error::DimensionMismatch(
            "truth length vs test rows".into(),
        ));
    }
    let pred = model.predict(test_x)?;
    let mse = pred
        .mean
        .iter()
        .zip(truth)
        .map(|(m, t)| (m - t) * (m - t))
        .sum::<f64>()
        / truth.len() as f64;
    Ok(mse.sqrt())
}

/// Proper score: mean of -log s2(x) - (y - mu(x))^2 / s2(x) with
/// s2 = var_mean + noise. Higher is better.
pub fn score(model: &HetGPModel, test_x: &DMatrix<f64>, test_y: &[f64]) -> Result<f64> {
    if test_x.nrows() == 0 {
        return Err(Error::EmptyInput("empty test set".into()));
    }
    if test_y.len() != test_x.nrows() {
        return Err(Error::DimensionMismatch("y length vs test rows".into()));
    }
    let pred = model.predict(test_x)?;
    let mut total = 0.0;
    for (i, &y) in test_y.iter().enumerate() {
        let s2 = pred.var_mean[i] + pred.noise[i];
        assert!(s2 > 0.0, "predictive variance must be positive");
        total += -s2.ln() - (y - pred.mean[i]).powi(2) / s2;
    }
    Ok(total / test_y.len() as f64)
}

/// Pairwise Euclidean distance multisets within and between two designs.
#[derive(Debug, Clone)]
pub struct DistanceDiag {
    pub old_old: Vec<f64>,
    pub new_new: Vec<f64>,
    pub new_old: Vec<f64>,
}

pub fn pairwise_distance_diag(old_x: &DMatrix<f64>, new_x: &DMatrix<f64>) -> DistanceDiag {
    let dist = |a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize| -> f64 {
        (0..a.ncols())
            .map(|k| (a[(i, k)] - b[(j, k)]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut old_old = Vec::new();
    for i in 0..old_x.nrows() {
        for j in (i + 1)..old_x.nrows() {
            old_old.push(dist(old_x, i, old_x, j));
        }
    }
    let mut new_new = Vec::new();
    for i in 0..new_x.nrows() {
        for j in (i + 1)..new_x.nrows() {
            new_new.push(dist(new_x, i, new_x, j));
        }
    }
    let mut new_old = Vec::new();
    for i in 0..new_x.nrows() {
        for j in 0..old_x.nrows() {
            new_old.push(dist(new_x, i, old_x, j));
        }
    }
    DistanceDiag {
        old_old,
        new_new,
        new_old,
    }
}

impl DistanceDiag {
    pub fn write_csv<W: IoWrite>(&self, mut w: W) -> Result<()> {
        writeln!(w, "set,distance")?;
        for d in &self.old_old {
            writeln!(w, "old_old,{d}")?;
        }
        for d in &self.new_new {
            writeln!(w, "new_new,{d}")?;
        }
        for d in &self.new_old {
            writeln!(w, "new_old,{d}")?;
        }
        Ok(())
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

// ---------------------------------------------------------------------------
// Simulator dispatch
// ---------------------------------------------------------------------------

fn scale_to_native(cfg: &CampaignConfig, x: &[f64]) -> Vec<f64> {
    match &cfg.simulator.input_ranges {
        Some(ranges) => x
            .iter()
            .zip(ranges)
            .map(|(v, (lo, hi))| lo + v * (hi - lo))
            .collect(),
        None => x.to_vec(),
    }
}

/// Evaluate rows through the external batch protocol: a header-bearing CSV
/// of native-scale inputs on stdin, one numeric response per line on
/// stdout, in input order. Nonzero exit or short output fails the batch;
/// unparseable or non-finite lines fail single rows.
fn run_external(
    cfg: &CampaignConfig,
    rows: &[Vec<f64>],
    batch_seed: u64,
) -> Result<Vec<Option<f64>>> {
    let command = cfg
        .simulator
        .command
        .as_ref()
        .ok_or_else(|| Error::Config("external simulator without command".into()))?;
    let words: Vec<&str> = command.split_whitespace().collect();
    if words.is_empty() {
        return Err(Error::Config("empty simulator command".into()));
    }
    let mut input = String::new();
    let header: Vec<String> = (1..=cfg.d).map(|k| format!("x{k}")).collect();
    input.push_str(&header.join(","));
    input.push('\n');
    for row in rows {
        let native = scale_to_native(cfg, row);
        let cells: Vec<String> = native.iter().map(|v| format!("{v}")).collect();
        input.push_str(&cells.join(","));
        input.push('\n');
    }

    let mut child = Command::new(words[0])
        .args(&words[1..])
        .env("BATCHDESIGN_SEED", format!("{batch_seed}"))
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| Error::Simulator(format!("cannot spawn '{}': {e}", words[0])))?;
    child
        .stdin
        .take()
        .expect("stdin piped")
        .write_all(input.as_bytes())
        .map_err(|e| Error::Simulator(format!("write to simulator: {e}")))?;
    let out = child
        .wait_with_output()
        .map_err(|e| Error::Simulator(format!("wait for simulator: {e}")))?;
    if !out.status.success() {
        return Err(Error::Simulator(format!(
            "simulator exited with {}",
            out.status
        )));
    }
    let text = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() < rows.len() {
        return Err(Error::Simulator(format!(
            "short output: {} responses for {} inputs",
            lines.len(),
            rows.len()
        )));
    }
    Ok(lines[..rows.len()]
        .iter()
        .map(|l| l.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
        .collect())
}

fn run_builtin(
    cfg: &CampaignConfig,
    rows: &[Vec<f64>],
    batch_index: usize,
) -> Result<Vec<Option<f64>>> {
    let bed = Testbed::by_name(&cfg.simulator.kind)?;
    Ok(rows
        .par_iter()
        .enumerate()
        .map(|(r, x)| {
            let mut rng = derive_rng(
                cfg.seed,
                &[purpose::SIMULATE, batch_index as u64, r as u64],
            );
            Some(bed.sample(x, &mut rng))
        })
        .collect())
}

/// Dispatch one batch of sites (location, multiplicity) to the simulator.
/// Failed rows are retried once; the campaign proceeds with a partial batch
/// when at least half of it returned, and aborts otherwise.
fn dispatch_batch(
    cfg: &CampaignConfig,
    sites: &[(Vec<f64>, usize)],
    batch_index: usize,
    min_positive: &mut Option<f64>,
) -> Result<Vec<RunRecord>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut origins: Vec<usize> = Vec::new();
    for (loc, mult) in sites {
        for _ in 0..*mult {
            rows.push(loc.clone());
            origins.push(*mult);
        }
    }
    let total = rows.len();
    let external = cfg.simulator.kind == "external";
    let batch_seed = derive_seed(cfg.seed, &[purpose::SIMULATE, batch_index as u64]);

    let mut values = if external {
        run_external(cfg, &rows, batch_seed)?
    } else {
        run_builtin(cfg, &rows, batch_index)?
    };

    let failed: Vec<usize> = (0..total).filter(|&i| values[i].is_none()).collect();
    if !failed.is_empty() {
        let retry_rows: Vec<Vec<f64>> = failed.iter().map(|&i| rows[i].clone()).collect();
        let retry_seed = derive_seed(cfg.seed, &[purpose::SIMULATE, batch_index as u64, 0x7e]);
        let retried = if external {
            run_external(cfg, &retry_rows, retry_seed).unwrap_or_else(|_| vec![None; failed.len()])
        } else {
            run_builtin(cfg, &retry_rows, batch_index)?
        };
        for (slot, value) in failed.iter().zip(retried) {
            values[*slot] = value;
        }
    }

    let returned = values.iter().filter(|v| v.is_some()).count();
    if returned * 2 < total {
        return Err(Error::Simulator(format!(
            "batch {batch_index}: only {returned}/{total} runs returned after retry"
        )));
    }
    if returned < total {
        eprintln!(
            "batch {batch_index}: {} runs missing after retry, continuing with partial batch",
            total - returned
        );
    }

    // Log-with-floor transform tracks the smallest positive raw value.
    let mut records = Vec::with_capacity(returned);
    if cfg.simulator.transform == Transform::LogFloor {
        for v in values.iter().flatten() {
            if *v > 0.0 {
                *min_positive = Some(min_positive.map_or(*v, |m: f64| m.min(*v)));
            }
        }
        let floor = 0.5
            * min_positive.ok_or_else(|| {
                Error::Simulator("log transform: no positive response seen yet".into())
            })?;
        for i in 0..total {
            if let Some(v) = values[i] {
                records.push(RunRecord {
                    x: rows[i].clone(),
                    y: v.max(floor).ln(),
                    batch_index,
                    multiplicity_origin: origins[i],
                });
            }
        }
    } else {
        for i in 0..total {
            if let Some(v) = values[i] {
                records.push(RunRecord {
                    x: rows[i].clone(),
                    y: v,
                    batch_index,
                    multiplicity_origin: origins[i],
                });
            }
        }
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

fn atomic_write(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn run_log_csv(runs: &[RunRecord], d: usize) -> String {
    let mut out = String::new();
    let header: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
    out.push_str(&header.join(","));
    out.push_str(",y,batch_index,multiplicity_origin\n");
    for r in runs {
        let cells: Vec<String> = r.x.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push_str(&format!(
            ",{},{},{}\n",
            r.y, r.batch_index, r.multiplicity_origin
        ));
    }
    out
}

pub fn history_csv(history: &[BatchRecord]) -> String {
    let mut out = String::from("batch_index,N,n,s_hat,imspe,rmspe,score,wall_seconds\n");
    for h in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            h.batch_index, h.n_total, h.n_unique, h.s_hat, h.imspe, h.rmspe, h.score, h.wall_seconds
        ));
    }
    out
}

fn persist_state(dir: &Path, state: &CampaignState) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    atomic_write(
        &dir.join("state.json"),
        &serde_json::to_string_pretty(state)?,
    )?;
    atomic_write(
        &dir.join("run_log.csv"),
        &run_log_csv(&state.runs, state.config.d),
    )?;
    atomic_write(&dir.join("history.csv"), &history_csv(&state.history))?;
    atomic_write(&dir.join("model.json"), &serde_json::to_string_pretty(&state.model)?)?;
    Ok(())
}

pub fn load_state(dir: &Path) -> Result<CampaignState> {
    let text = std::fs::read_to_string(dir.join("state.json"))?;
    Ok(serde_json::from_str(&text)?)
}

/// Trajectory-relevant config equality: the output directory and the
/// horizon (n_batches) may differ across resumes, nothing else. No
/// randomness derives from the horizon, so extending it preserves the
/// trajectory.
fn configs_compatible(a: &CampaignConfig, b: &CampaignConfig) -> bool {
    let mut a = a.clone();
    let mut b = b.clone();
    a.output_dir = Default::default();
    b.output_dir = Default::default();
    a.n_batches = 0;
    b.n_batches = 0;
    a == b
}

// ---------------------------------------------------------------------------
// Campaign loop
// ---------------------------------------------------------------------------

fn epoch_metrics(
    cfg: &CampaignConfig,
    model: &HetGPModel,
    epoch: usize,
) -> Result<(f64, f64, f64)> {
    let sd2 = model.y_sd() * model.y_sd();
    let imspe = imspe_current(model)? * sd2;
    if cfg.simulator.kind == "external" {
        return Ok((imspe, f64::NAN, f64::NAN));
    }
    let bed = Testbed::by_name(&cfg.simulator.kind)?;
    let mut rng = derive_rng(cfg.seed, &[purpose::TEST_DESIGN, epoch as u64]);
    let test_x = plain_lhs(cfg.metrics_test_size, cfg.d, &mut rng);
    let truth: Vec<f64> = (0..test_x.nrows())
        .map(|i| {
            let x: Vec<f64> = (0..cfg.d).map(|k| test_x[(i, k)]).collect();
            bed.mean(&x)
        })
        .collect();
    let mut rng_y = derive_rng(cfg.seed, &[purpose::TEST_DRAWS, epoch as u64]);
    let test_y: Vec<f64> = (0..test_x.nrows())
        .map(|i| {
            let x: Vec<f64> = (0..cfg.d).map(|k| test_x[(i, k)]).collect();
            bed.sample(&x, &mut rng_y)
        })
        .collect();
    let r = rmspe(model, &test_x, &truth)?;
    let s = score(model, &test_x, &test_y)?;
    Ok((imspe, r, s))
}

/// Locations with multiplicities for one batch.
type SitePairs = Vec<(Vec<f64>, usize)>;

/// Sites selected for one batch under a strategy, plus the backtracking
/// depth (0 when no backtracking applies) and the merge trace CSV when one
/// was computed.
fn select_sites(
    cfg: &CampaignConfig,
    model: &HetGPModel,
    strategy: Strategy,
    batch_index: usize,
) -> Result<(SitePairs, usize, Option<String>)> {
    let m = cfg.batch_size;
    let d = cfg.d;
    match strategy {
        Strategy::MaximinBatch => {
            let seed = derive_seed(cfg.seed, &[purpose::MAXIMIN, batch_index as u64]);
            let batch = maximin_batch(&model.design().x_matrix(), m, seed, 16);
            let sites = (0..m)
                .map(|r| ((0..d).map(|k| batch[(r, k)]).collect(), 1usize))
                .collect();
            Ok((sites, 0, None))
        }
        Strategy::NoBacktracking | Strategy::Backtracking => {
            let acq_seed = derive_seed(cfg.seed, &[purpose::ACQUIRE, batch_index as u64]);
            let proposal = optimize_batch(model, m, &cfg.acquisition.to_acq_config(acq_seed))?;
            if strategy == Strategy::NoBacktracking {
                let sites = (0..m)
                    .map(|r| ((0..d).map(|k| proposal.xtil[(r, k)]).collect(), 1usize))
                    .collect();
                return Ok((sites, 0, None));
            }
            let trace = merge_sequence(model, &proposal.xtil)?;
            let (s_hat, sites) = select_batch(&trace)?;
            let mut buf = Vec::new();
            trace.write_csv(&mut buf)?;
            let csv = String::from_utf8(buf).expect("csv is utf8");
            Ok((batch_sites_to_pairs(&sites), s_hat, Some(csv)))
        }
    }
}

pub fn batch_sites_to_pairs(sites: &[BatchSite]) -> Vec<(Vec<f64>, usize)> {
    sites
        .iter()
        .map(|s| (s.location.clone(), s.multiplicity))
        .collect()
}

/// Fresh campaign with the default (backtracking) strategy.
pub fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignState> {
    run_campaign_opts(cfg, Strategy::Backtracking, false, None)
}

/// Resume a campaign from its output directory (fresh start when no state
/// file exists yet).
pub fn resume_campaign(cfg: &CampaignConfig) -> Result<CampaignState> {
    run_campaign_opts(cfg, Strategy::Backtracking, true, None)
}

/// Full-control entry point. `stop_after` ends the loop early after that
/// many acquisition batches with state persisted (a clean kill, for resume
/// testing and staged campaigns).
pub fn run_campaign_opts(
    cfg: &CampaignConfig,
    strategy: Strategy,
    resume: bool,
    stop_after: Option<usize>,
) -> Result<CampaignState> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();

    let mut state = if resume && dir.join("state.json").exists() {
        let loaded = load_state(&dir)?;
        if !configs_compatible(&loaded.config, cfg) {
            return Err(Error::Resume(
                "saved state was produced by a different config".into(),
            ));
        }
        if loaded.strategy != strategy {
            return Err(Error::Resume("saved state used a different strategy".into()));
        }
        loaded
    } else {
        // Initial design: best-of maximin LHS with per-location replicates.
        let t0 = Instant::now();
        let init_seed = derive_seed(cfg.seed, &[purpose::INIT_DESIGN]);
        let x0 = maximin_lhs(cfg.n0, cfg.d, init_seed, cfg.lhs_candidates);
        let mut rng = derive_rng(cfg.seed, &[purpose::INIT_REPS]);
        let reps: Vec<usize> = (0..cfg.n0)
            .map(|_| match cfg.reps0 {
                RepSpec::Fixed(k) => k,
                RepSpec::Range { min, max } => rng.random_range(min..=max),
            })
            .collect();
        let sites: Vec<(Vec<f64>, usize)> = (0..cfg.n0)
            .map(|i| ((0..cfg.d).map(|k| x0[(i, k)]).collect(), reps[i]))
            .collect();
        let mut min_positive = None;
        let runs = dispatch_batch(cfg, &sites, 0, &mut min_positive)?;
        let design = DesignSet::aggregate(
            &runs
                .iter()
                .map(|r| (r.x.clone(), r.y))
                .collect::<Vec<_>>(),
        )?;
        let fit_seed = derive_seed(cfg.seed, &[purpose::FIT, 0]);
        let fit_t0 = Instant::now();
        let model = HetGPModel::fit(design, &cfg.fit.to_fit_config(fit_seed))?;
        let fit_seconds = fit_t0.elapsed().as_secs_f64();
        let (imspe, rm, sc) = epoch_metrics(cfg, &model, 0)?;
        let history = vec![BatchRecord {
            batch_index: 0,
            n_total: model.design().n_total(),
            n_unique: model.design().n_unique(),
            s_hat: 0,
            imspe,
            rmspe: rm,
            score: sc,
            wall_seconds: t0.elapsed().as_secs_f64(),
            fit_seconds,
        }];
        let state = CampaignState {
            config: cfg.clone(),
            strategy,
            completed_batches: 0,
            runs,
            history,
            model: model.snapshot(),
            min_positive,
        };
        persist_state(&dir, &state)?;
        state
    };

    let mut model = state.model()?;
    let stop_at = stop_after.unwrap_or(cfg.n_batches).min(cfg.n_batches);

    for k in (state.completed_batches + 1)..=stop_at {
        let t0 = Instant::now();
        let (sites, s_hat, trace_csv) = select_sites(cfg, &model, strategy, k)?;
        if let Some(csv) = trace_csv {
            let trace_dir = dir.join("traces");
            std::fs::create_dir_all(&trace_dir)?;
            atomic_write(&trace_dir.join(format!("trace_{k:04}.csv")), &csv)?;
        }
        let mut min_positive = state.min_positive;
        let new_runs = dispatch_batch(cfg, &sites, k, &mut min_positive)?;
        state.min_positive = min_positive;
        let fit_seed = derive_seed(cfg.seed, &[purpose::FIT, k as u64]);
        let pooled: Vec<(Vec<f64>, f64)> =
            new_runs.iter().map(|r| (r.x.clone(), r.y)).collect();
        let fit_t0 = Instant::now();
        model = model.update(&pooled, &cfg.fit.to_update_config(fit_seed))?;
        let fit_seconds = fit_t0.elapsed().as_secs_f64();
        let (imspe, rm, sc) = epoch_metrics(cfg, &model, k)?;
        state.runs.extend(new_runs);
        state.history.push(BatchRecord {
            batch_index: k,
            n_total: model.design().n_total(),
            n_unique: model.design().n_unique(),
            s_hat,
            imspe,
            rmspe: rm,
            score: sc,
            wall_seconds: t0.elapsed().as_secs_f64(),
            fit_seconds,
        });
        state.completed_batches = k;
        state.model = model.snapshot();
        persist_state(&dir, &state)?;
    }

    Ok(state)
}

// ---------------------------------------------------------------------------
// Run-log parsing (CLI fit/sens/diag input)
// ---------------------------------------------------------------------------

/// Parse a run-log CSV. Requires x1..xd and y columns (by header name);
/// batch_index and multiplicity_origin are optional. Errors carry line
/// numbers.
pub fn parse_run_log(text: &str) -> Result<(usize, Vec<RunRecord>)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse {
            line: 1,
            msg: "empty file".into(),
        })?;
    let cols: Vec<&str> = header.split(',').map(|c| c.trim()).collect();
    let mut x_cols = Vec::new();
    for k in 1.. {
        match cols.iter().position(|&c| c == format!("x{k}")) {
            Some(idx) => x_cols.push(idx),
            None => break,
        }
    }
    if x_cols.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "no x1 column in header".into(),
        });
    }
    let y_col = cols.iter().position(|&c| c == "y").ok_or_else(|| Error::Parse {
        line: 1,
        msg: "missing required column 'y'".into(),
    })?;
    let batch_col = cols.iter().position(|&c| c == "batch_index");
    let mult_col = cols.iter().position(|&c| c == "multiplicity_origin");

    let mut runs = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let get = |idx: usize, what: &str| -> Result<f64> {
            cells
                .get(idx)
                .ok_or_else(|| Error::Parse {
                    line: line_no,
                    msg: format!("missing {what} cell"),
                })?
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse {
                    line: line_no,
                    msg: format!("bad {what}: {e}"),
                })
        };
        let x: Vec<f64> = x_cols
            .iter()
            .enumerate()
            .map(|(k, &idx)| get(idx, &format!("x{}", k + 1)))
            .collect::<Result<_>>()?;
        let y = get(y_col, "y")?;
        let batch_index = match batch_col {
            Some(idx) => get(idx, "batch_index")? as usize,
            None => 0,
        };
        let multiplicity_origin = match mult_col {
            Some(idx) => get(idx, "multiplicity_origin")? as usize,
            None => 1,
        };
        runs.push(RunRecord {
            x,
            y,
            batch_index,
            multiplicity_origin,
        });
    }
    if runs.is_empty() {
        return Err(Error::EmptyInput("run log has no data rows".into()));
    }
    Ok((x_cols.len(), runs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn tiny_config(dir: &Path) -> CampaignConfig {
        let text = format!(
            r#"
d = 1
n0 = 6
reps0 = 2
batch_size = 3
n_batches = 2
seed = 11
metrics_test_size = 64
output_dir = "{}"

[simulator]
kind = "toy1d"

[fit]
n_starts = 2
max_iters = 50

[acquisition]
n_starts = 2
max_iters = 40
"#,
            dir.display()
        );
        parse_config(&text, &[]).unwrap()
    }

    #[test]
    fn rmspe_of_perfect_predictions_is_zero() {
        let runs = vec![
            (vec![0.2], 1.0),
            (vec![0.2], 1.0),
            (vec![0.8], 2.0),
            (vec![0.8], 2.0),
        ];
        let ds = DesignSet::aggregate(&runs).unwrap();
        let model = HetGPModel::from_parts_fixed(
            ds,
            crate::surrogate::HetGPParams {
                theta: vec![0.5],
                theta_noise: vec![1.0],
                g_noise: 0.0,
                log_delta: vec![-18.0, -18.0],
            },
            1.0,
        )
        .unwrap();
        let test_x = DMatrix::from_row_slice(2, 1, &[0.2, 0.8]);
        let r = rmspe(&model, &test_x, &[1.0, 2.0]).unwrap();
        assert!(r < 1e-5, "rmspe {r}");
    }

    #[test]
    fn rmspe_constant_predictor_hand_value() {
        // A constant-mean check: truth {0, 2} against predictions that are
        // approximately 1 everywhere gives rmspe ~ 1.
        let runs = vec![(vec![0.5], 1.0), (vec![0.5], 1.0), (vec![0.5], 1.0)];
        let ds = DesignSet::aggregate(&runs).unwrap();
        let model = HetGPModel::from_parts_fixed(
            ds,
            crate::surrogate::HetGPParams {
                theta: vec![10.0],
                theta_noise: vec![1.0],
                g_noise: 0.0,
                log_delta: vec![-18.0],
            },
            1.0,
        )
        .unwrap();
        let test_x = DMatrix::from_row_slice(2, 1, &[0.49, 0.51]);
        let r = rmspe(&model, &test_x, &[0.0, 2.0]).unwrap();
        assert!((r - 1.0).abs() < 1e-3, "rmspe {r}");
    }

    #[test]
    fn score_zero_for_exact_unit_variance() {
        // score = mean(-ln s2 - err^2/s2); with mu = y and s2 = 1 it is 0.
        // Checked through the formula directly.
        let s2 = 1.0f64;
        let err = 0.0f64;
        assert_eq!(-s2.ln() - err * err / s2, 0.0);
    }

    #[test]
    fn overconfidence_scores_worse() {
        // Same error, smaller variance must score worse once the error
        // dominates: -ln(s2) - e^2/s2 at e=1: s2=0.01 -> 4.6 - 100 << s2=1.
        let e: f64 = 1.0;
        let sharp: f64 = 0.01;
        let calibrated: f64 = 1.0;
        let s_sharp = -sharp.ln() - e * e / sharp;
        let s_cal = -calibrated.ln() - e * e / calibrated;
        assert!(s_sharp < s_cal);
    }

    #[test]
    fn distance_diag_counts_and_identity() {
        let old = DMatrix::from_row_slice(1, 2, &[0.5, 0.5]);
        let new = DMatrix::from_row_slice(1, 2, &[0.5, 0.5]);
        let diag = pairwise_distance_diag(&old, &new);
        assert_eq!(diag.new_old, vec![0.0]);
        assert!(diag.old_old.is_empty());
        let new4 = DMatrix::from_fn(4, 2, |i, j| 0.1 * (i + j) as f64);
        let diag4 = pairwise_distance_diag(&old, &new4);
        assert_eq!(diag4.new_new.len(), 6); // choose(4, 2)
        assert_eq!(diag4.new_old.len(), 4);
    }

    #[test]
    fn campaign_zero_batches_has_only_initial_fit() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.n_batches = 0;
        let state = run_campaign(&cfg).unwrap();
        assert_eq!(state.history.len(), 1);
        assert_eq!(state.completed_batches, 0);
        assert_eq!(state.runs.len(), 12);
        assert!(dir.path().join("state.json").exists());
    }

    #[test]
    fn budget_accounting_holds_per_batch() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let state = run_campaign(&cfg).unwrap();
        for h in &state.history {
            let runs_so_far = state
                .runs
                .iter()
                .filter(|r| r.batch_index <= h.batch_index)
                .count();
            assert_eq!(h.n_total, runs_so_far);
        }
        let last = state.history.last().unwrap();
        assert_eq!(last.n_total, 12 + 2 * 3);
        // N and n are nondecreasing over the history.
        for w in state.history.windows(2) {
            assert!(w[1].n_total >= w[0].n_total);
            assert!(w[1].n_unique >= w[0].n_unique);
        }
    }

    #[test]
    fn identical_seed_reproduces_identical_artifacts() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let mut cfg_a = tiny_config(dir_a.path());
        cfg_a.n_batches = 1;
        let mut cfg_b = cfg_a.clone();
        cfg_b.output_dir = dir_b.path().to_path_buf();
        run_campaign(&cfg_a).unwrap();
        run_campaign(&cfg_b).unwrap();
        let log_a = std::fs::read_to_string(dir_a.path().join("run_log.csv")).unwrap();
        let log_b = std::fs::read_to_string(dir_b.path().join("run_log.csv")).unwrap();
        assert_eq!(log_a, log_b);
        let model_a = std::fs::read_to_string(dir_a.path().join("model.json")).unwrap();
        let model_b = std::fs::read_to_string(dir_b.path().join("model.json")).unwrap();
        assert_eq!(model_a, model_b);
    }

    #[test]
    fn resume_reproduces_uninterrupted_trajectory() {
        let dir_full = tempfile::tempdir().unwrap();
        let dir_killed = tempfile::tempdir().unwrap();
        let mut cfg_full = tiny_config(dir_full.path());
        cfg_full.n_batches = 2;
        let mut cfg_killed = cfg_full.clone();
        cfg_killed.output_dir = dir_killed.path().to_path_buf();

        let full = run_campaign(&cfg_full).unwrap();
        run_campaign_opts(&cfg_killed, Strategy::Backtracking, false, Some(1)).unwrap();
        let resumed = run_campaign_opts(&cfg_killed, Strategy::Backtracking, true, None).unwrap();

        assert_eq!(full.runs.len(), resumed.runs.len());
        for (a, b) in full.runs.iter().zip(&resumed.runs) {
            assert_eq!(a.x, b.x);
            assert_eq!(a.y.to_bits(), b.y.to_bits());
        }
        let log_full = std::fs::read_to_string(dir_full.path().join("run_log.csv")).unwrap();
        let log_res = std::fs::read_to_string(dir_killed.path().join("run_log.csv")).unwrap();
        assert_eq!(log_full, log_res);
    }

    #[test]
    fn parse_run_log_round_trip_and_errors() {
        let runs = vec![
            RunRecord {
                x: vec![0.25, 0.5],
                y: 1.5,
                batch_index: 0,
                multiplicity_origin: 2,
            },
            RunRecord {
                x: vec![0.75, 0.1],
                y: -0.25,
                batch_index: 1,
                multiplicity_origin: 1,
            },
        ];
        let csv = run_log_csv(&runs, 2);
        let (d, parsed) = parse_run_log(&csv).unwrap();
        assert_eq!(d, 2);
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].x, vec![0.25, 0.5]);
        assert_eq!(parsed[1].batch_index, 1);

        let no_y = "x1,value\n0.5,1.0\n";
        let err = parse_run_log(no_y).unwrap_err();
        assert!(format!("{err}").contains("'y'"));

        let bad_cell = "x1,y\n0.5,oops\n";
        let err = parse_run_log(bad_cell).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn log_floor_transform_applies_running_floor() {
        // Direct check of the floor rule: y = ln(max(v, 0.5 min_pos)).
        let mut min_positive = None;
        for v in [4.0f64, 2.0, 0.0] {
            if v > 0.0 {
                min_positive = Some(min_positive.map_or(v, |m: f64| m.min(v)));
            }
        }
        let floor = 0.5 * min_positive.unwrap();
        assert_eq!(floor, 1.0);
        assert_eq!(0.0f64.max(floor).ln(), 0.0);
    }
}
