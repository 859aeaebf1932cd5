//! `batchdesign` command line: wire configs to campaigns, one-shot fits and
//! proposals, sensitivity reports, MC strategy benchmarks, and diagnostics.
//!
//! Exit codes: 0 ok, 2 config error, 3 simulator failure, 4 numerical
//! failure, 1 anything else.

use std::io::Read;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

use batchdesign_core::acquisition::optimize_batch;
use batchdesign_core::backtrack::{merge_sequence, select_batch, SiteKind};
use batchdesign_core::campaign::{
    self, pairwise_distance_diag, run_campaign_opts, Strategy,
};
use batchdesign_core::config::{load_config, CampaignConfig};
use batchdesign_core::rng::{derive_rng, derive_seed, purpose};
use batchdesign_core::sensitivity::{bootstrap_indices, SensConfig, SensTarget};
use batchdesign_core::surrogate::{DesignSet, HetGPModel};
use batchdesign_core::testbeds::Testbed;
use batchdesign_core::{Error, Result};

#[derive(Parser)]
#[command(name = "batchdesign", version, about = "Batch-sequential design for noisy simulators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Shared {
    /// TOML campaign config.
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rayon worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// key=value config overrides (dotted paths, repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a surrogate to a run-log CSV and write a model snapshot.
    Fit {
        #[command(flatten)]
        shared: Shared,
        /// Run-log CSV (columns x1..xd, y, ...).
        #[arg(long)]
        runs: PathBuf,
    },
    /// Propose a batch from a model snapshot: optimize, backtrack, select.
    Propose {
        #[command(flatten)]
        shared: Shared,
        /// Model snapshot (model.json from fit or campaign).
        #[arg(long)]
        snapshot: PathBuf,
        /// Batch size M (default: config batch_size).
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Run (or resume) a sequential design campaign.
    Campaign {
        #[command(flatten)]
        shared: Shared,
        /// Continue from the saved state in output_dir.
        #[arg(long)]
        resume: bool,
        /// Acquisition strategy: backtracking | no_backtracking | maximin_batch.
        #[arg(long, default_value = "backtracking")]
        strategy: String,
    },
    /// Sensitivity analysis (main effects, Sobol indices, bootstrap).
    Sens {
        #[command(flatten)]
        shared: Shared,
        /// Run-log CSV to analyze.
        #[arg(long)]
        runs: PathBuf,
        /// mean | noise | both.
        #[arg(long, default_value = "both")]
        target: String,
    },
    /// MC comparison of acquisition strategies on a builtin testbed.
    Bench {
        #[command(flatten)]
        shared: Shared,
        /// Repetitions per strategy.
        #[arg(long, default_value_t = 10)]
        reps: usize,
        /// Comma-separated strategies.
        #[arg(long, default_value = "backtracking,no_backtracking,maximin_batch")]
        strategies: String,
    },
    /// Pairwise-distance diagnostic between old and new design points.
    Diag {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        runs: PathBuf,
        /// Runs with batch_index >= this count as "new".
        #[arg(long, default_value_t = 1)]
        new_from_batch: usize,
    },
    /// Serve a builtin testbed over the stdin/stdout batch protocol.
    Sim {
        /// Builtin testbed name (toy1d, toy2d).
        #[arg(long)]
        testbed: String,
    },
}

fn load(shared: &Shared) -> Result<CampaignConfig> {
    let overrides: Vec<(String, String)> = shared
        .set
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Config(format!("--set needs KEY=VALUE, got '{kv}'")))
        })
        .collect::<Result<_>>()?;
    let mut cfg = load_config(&shared.config, &overrides)?;
    if let Some(seed) = shared.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &shared.out {
        cfg.output_dir = out.clone();
    }
    if let Some(jobs) = shared.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .ok();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_runs(path: &PathBuf) -> Result<(usize, Vec<campaign::RunRecord>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    campaign::parse_run_log(&text)
}

fn cmd_fit(shared: &Shared, runs_path: &PathBuf) -> Result<()> {
    let cfg = load(shared)?;
    let (d, runs) = read_runs(runs_path)?;
    if d != cfg.d {
        return Err(Error::Config(format!(
            "run log has {d} input columns, config says d = {}",
            cfg.d
        )));
    }
    let pairs: Vec<(Vec<f64>, f64)> = runs.iter().map(|r| (r.x.clone(), r.y)).collect();
    let design = DesignSet::aggregate(&pairs)?;
    let fit_seed = derive_seed(cfg.seed, &[purpose::FIT, 0]);
    let model = HetGPModel::fit(design, &cfg.fit.to_fit_config(fit_seed))?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join("model.json"), model.to_json()?)?;
    let diag = serde_json::json!({
        "loglik": model.loglik(),
        "theta": model.kernel_mean().lengthscales(),
        "theta_noise": model.kernel_noise().lengthscales(),
        "g_noise": model.g_noise(),
        "tau2": model.tau2(),
        "tau2_noise": model.tau2_noise(),
        "noise_mean": model.noise_mean(),
        "n_unique": model.design().n_unique(),
        "n_total": model.design().n_total(),
        "y_mean": model.y_mean(),
        "y_sd": model.y_sd(),
    });
    std::fs::write(
        cfg.output_dir.join("fit.json"),
        serde_json::to_string_pretty(&diag).map_err(Error::from)?,
    )?;
    println!(
        "fitted n={} (N={}), loglik={:.4}; snapshot at {}",
        model.design().n_unique(),
        model.design().n_total(),
        model.loglik(),
        cfg.output_dir.join("model.json").display()
    );
    Ok(())
}

fn cmd_propose(shared: &Shared, snapshot: &PathBuf, batch_size: Option<usize>) -> Result<()> {
    let cfg = load(shared)?;
    let m = batch_size.unwrap_or(cfg.batch_size);
    if m < 1 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let text = std::fs::read_to_string(snapshot)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", snapshot.display())))?;
    let model = HetGPModel::from_json(&text)?;
    let acq_seed = derive_seed(cfg.seed, &[purpose::ACQUIRE, 0]);
    let proposal = optimize_batch(&model, m, &cfg.acquisition.to_acq_config(acq_seed))?;
    let trace = merge_sequence(&model, &proposal.xtil)?;
    let (s_hat, sites) = select_batch(&trace)?;

    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut batch_csv = String::new();
    let header: Vec<String> = (1..=cfg.d).map(|k| format!("x{k}")).collect();
    batch_csv.push_str(&header.join(","));
    batch_csv.push_str(",multiplicity,origin\n");
    for site in &sites {
        let cells: Vec<String> = site.location.iter().map(|v| format!("{v}")).collect();
        let origin = match site.kind {
            SiteKind::New => "new",
            SiteKind::Snapped { .. } => "replicate",
        };
        batch_csv.push_str(&format!(
            "{},{},{origin}\n",
            cells.join(","),
            site.multiplicity
        ));
    }
    std::fs::write(cfg.output_dir.join("batch.csv"), batch_csv)?;
    let mut buf = Vec::new();
    trace.write_csv(&mut buf)?;
    std::fs::write(cfg.output_dir.join("trace.csv"), buf)?;
    println!(
        "proposed batch of {m} runs over {} sites (s_hat = {s_hat}, imspe = {:.6e})",
        sites.len(),
        trace.steps[s_hat].imspe
    );
    Ok(())
}

fn cmd_campaign(shared: &Shared, resume: bool, strategy: &str) -> Result<()> {
    let cfg = load(shared)?;
    let strategy = Strategy::by_name(strategy)?;
    let state = run_campaign_opts(&cfg, strategy, resume, None)?;
    let last = state.history.last().expect("history nonempty");
    println!(
        "campaign complete: {} batches, N = {}, n = {}, rmspe = {:.4}, score = {:.4}",
        state.completed_batches, last.n_total, last.n_unique, last.rmspe, last.score
    );
    println!("artifacts in {}", cfg.output_dir.display());
    Ok(())
}

fn cmd_sens(shared: &Shared, runs_path: &PathBuf, target: &str) -> Result<()> {
    let cfg = load(shared)?;
    let (d, runs) = read_runs(runs_path)?;
    if d != cfg.d {
        return Err(Error::Config(format!(
            "run log has {d} input columns, config says d = {}",
            cfg.d
        )));
    }
    let pairs: Vec<(Vec<f64>, f64)> = runs.iter().map(|r| (r.x.clone(), r.y)).collect();
    let design = DesignSet::aggregate(&pairs)?;
    let targets: Vec<SensTarget> = match target {
        "mean" => vec![SensTarget::Mean],
        "noise" => vec![SensTarget::Noise],
        "both" => vec![SensTarget::Mean, SensTarget::Noise],
        other => return Err(Error::Config(format!("unknown target '{other}'"))),
    };
    let sens_cfg = SensConfig {
        n_mc: cfg.sensitivity.n_mc,
        grid_size: cfg.sensitivity.grid_size,
        bootstrap: cfg.sensitivity.bootstrap,
        seed: cfg.seed,
        fit: cfg.fit.to_fit_config(derive_seed(cfg.seed, &[purpose::FIT, 0])),
    };
    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut proportions = String::from("process");
    for k in 1..=cfg.d {
        proportions.push_str(&format!(",x{k}"));
    }
    proportions.push('\n');
    for t in targets {
        let report = bootstrap_indices(&design, &sens_cfg, t)?;
        std::fs::write(
            cfg.output_dir.join(format!("sens_{}_indices.csv", t.name())),
            report.indices_csv(),
        )?;
        std::fs::write(
            cfg.output_dir
                .join(format!("sens_{}_main_effects.csv", t.name())),
            report.main_effects_csv(),
        )?;
        proportions.push_str(&format!("{},{}\n", t.name(), report.proportions_row()));
        println!(
            "{} process: S = {:?}, T = {:?}, prop(I>0) = {:?}",
            t.name(),
            report.indices.s,
            report.indices.t,
            report.prop_i_positive
        );
    }
    std::fs::write(cfg.output_dir.join("proportions.csv"), proportions)?;
    Ok(())
}

fn cmd_bench(shared: &Shared, reps: usize, strategies: &str) -> Result<()> {
    let cfg = load(shared)?;
    if cfg.simulator.kind == "external" {
        return Err(Error::Config("bench requires a builtin testbed".into()));
    }
    let strategies: Vec<Strategy> = strategies
        .split(',')
        .map(Strategy::by_name)
        .collect::<Result<_>>()?;
    let mut jobs = Vec::new();
    for rep in 0..reps {
        for &strategy in &strategies {
            jobs.push((rep, strategy));
        }
    }
    use rayon::prelude::*;
    let rows: Vec<String> = jobs
        .par_iter()
        .map(|&(rep, strategy)| -> Result<String> {
            let mut sub = cfg.clone();
            // Strategies share the repetition seed, so initial designs and
            // initial responses pair across strategies.
            sub.seed = derive_seed(cfg.seed, &[purpose::BENCH, rep as u64]);
            sub.output_dir = cfg
                .output_dir
                .join("bench")
                .join(format!("rep{rep:03}_{}", strategy.name()));
            let state = run_campaign_opts(&sub, strategy, false, None)?;
            let mut out = String::new();
            for h in state.history.iter().filter(|h| h.batch_index >= 1) {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    strategy.name(),
                    rep,
                    h.batch_index,
                    h.n_total,
                    h.n_unique,
                    h.s_hat,
                    h.rmspe,
                    h.score,
                    h.fit_seconds
                ));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut csv =
        String::from("strategy,repetition,batch_index,N,n,s_hat,rmspe,score,fit_seconds\n");
    for row in rows {
        csv.push_str(&row);
    }
    std::fs::write(cfg.output_dir.join("bench.csv"), csv)?;
    println!(
        "bench complete: {} repetitions x {} strategies, results in {}",
        reps,
        strategies.len(),
        cfg.output_dir.join("bench.csv").display()
    );
    Ok(())
}

fn cmd_diag(shared: &Shared, runs_path: &PathBuf, new_from_batch: usize) -> Result<()> {
    let cfg = load(shared)?;
    let (d, runs) = read_runs(runs_path)?;
    let mut old_rows: Vec<Vec<f64>> = Vec::new();
    let mut new_rows: Vec<Vec<f64>> = Vec::new();
    for r in &runs {
        let bucket = if r.batch_index >= new_from_batch {
            &mut new_rows
        } else {
            &mut old_rows
        };
        if !bucket
            .iter()
            .any(|row: &Vec<f64>| row.iter().zip(&r.x).all(|(a, b)| (a - b).abs() <= 1e-12))
        {
            bucket.push(r.x.clone());
        }
    }
    if old_rows.is_empty() || new_rows.is_empty() {
        return Err(Error::EmptyInput(
            "need at least one old and one new location".into(),
        ));
    }
    let old = DMatrix::from_fn(old_rows.len(), d, |i, j| old_rows[i][j]);
    let new = DMatrix::from_fn(new_rows.len(), d, |i, j| new_rows[i][j]);
    let diag = pairwise_distance_diag(&old, &new);
    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut buf = Vec::new();
    diag.write_csv(&mut buf)?;
    std::fs::write(cfg.output_dir.join("distances.csv"), buf)?;
    println!(
        "distances: {} old-old, {} new-new, {} new-old pairs",
        diag.old_old.len(),
        diag.new_new.len(),
        diag.new_old.len()
    );
    Ok(())
}

/// Builtin testbed behind the external batch protocol: header CSV on
/// stdin, one response per line on stdout.
fn cmd_sim(testbed: &str) -> Result<()> {
    let bed = Testbed::by_name(testbed)?;
    let seed: u64 = std::env::var("BATCHDESIGN_SEED")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let mut input = String::new();
    std::io::stdin().read_to_string(&mut input)?;
    let mut lines = input.lines().enumerate();
    let _header = lines.next();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let x: Vec<f64> = line
            .split(',')
            .map(|c| {
                c.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line: i + 1,
                    msg: format!("{e}"),
                })
            })
            .collect::<Result<_>>()?;
        if x.len() != bed.dim() {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("{} coordinates for {}d testbed", x.len(), bed.dim()),
            });
        }
        let mut rng = derive_rng(seed, &[purpose::SIMULATE, i as u64]);
        println!("{}", bed.sample(&x, &mut rng));
    }
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Fit { shared, runs } => cmd_fit(shared, runs),
        Command::Propose {
            shared,
            snapshot,
            batch_size,
        } => cmd_propose(shared, snapshot, *batch_size),
        Command::Campaign {
            shared,
            resume,
            strategy,
        } => cmd_campaign(shared, *resume, strategy),
        Command::Sens {
            shared,
            runs,
            target,
        } => cmd_sens(shared, runs, target),
        Command::Bench {
            shared,
            reps,
            strategies,
        } => cmd_bench(shared, *reps, strategies),
        Command::Diag {
            shared,
            runs,
            new_from_batch,
        } => cmd_diag(shared, runs, *new_from_batch),
        Command::Sim { testbed } => cmd_sim(testbed),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
