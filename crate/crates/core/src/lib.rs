//! Batch-sequential design engine for noisy, heteroskedastic simulators.
//!
//! The pipeline: fit a replicate-aware heteroskedastic GP surrogate
//! ([`surrogate`]), pick batches of new runs by minimizing integrated
//! mean-squared prediction error with analytic gradients ([`acquisition`]),
//! resolve near-replicates into exact replicates ([`backtrack`]), loop with
//! a simulator ([`campaign`]), and run variance-based sensitivity analysis
//! downstream ([`sensitivity`]).

pub mod acquisition;
pub mod backtrack;
pub mod campaign;
pub mod config;
pub mod error;
pub mod kernel;
pub mod linalg;
pub mod optim;
pub mod rng;
pub mod sampling;
pub mod sensitivity;
pub mod surrogate;
pub mod testbeds;

pub use acquisition::{
    imspe_batch, imspe_batch_grad, imspe_batch_with_multiplicity, imspe_current, optimize_batch,
    workspace, AcqConfig, BatchProposal, ImspeWorkspace,
};
pub use backtrack::{
    changepoint_select, merge_sequence, select_batch, BatchSite, ChangepointSelection, MergeStep,
    MergeTrace, SiteKind,
};
pub use campaign::{
    pairwise_distance_diag, resume_campaign, rmspe, run_campaign, run_campaign_opts, score,
    BatchRecord, CampaignState, DistanceDiag, RunRecord, Strategy,
};
pub use config::{load_config, parse_config, CampaignConfig, RepSpec, SimulatorRef, Transform};
pub use error::{Error, Result};
pub use kernel::{cov, dcov_dcoord, dw_scalar, w_matrix, w_scalar, KernelSpec};
pub use sampling::{maximin_batch, maximin_lhs, plain_lhs};
pub use sensitivity::{
    bootstrap_indices, main_effects, sobol_indices, MainEffect, SensConfig, SensTarget,
    SensitivityReport, SobolIndices,
};
pub use surrogate::{
    loglik, DesignSet, FitConfig, HetGPModel, HetGPParams, ModelSnapshot, Prediction,
};
pub use testbeds::Testbed;
