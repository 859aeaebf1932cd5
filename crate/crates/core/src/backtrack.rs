//! Backtracking: greedy merge of an optimized batch into candidates with
//! 0..M replicates, IMSPE re-evaluation per merge, and change-point
//! selection of the final batch.
//!
//! Each merge step either fuses the closest pair of new sites at their
//! midpoint or snaps a new site onto its nearest existing design location
//! (bit-identical coordinates, so aggregation merges them exactly).

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::acquisition::{imspe_batch_with_multiplicity, workspace, ImspeWorkspace};
use crate::error::{Error, Result};
use crate::linalg::{polyfit, polyval};
use crate::surrogate::HetGPModel;

/// Where a candidate batch site came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SiteKind {
    /// A genuinely new design location (possibly a fused midpoint).
    New,
    /// Replicates of an existing unique design location.
    Snapped { existing_index: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchSite {
    pub location: Vec<f64>,
    pub multiplicity: usize,
    pub kind: SiteKind,
}

/// One backtracking candidate: the merged batch after `s` merges.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergeStep {
    pub s: usize,
    /// Number of unique new sites, m_s = M - s.
    pub unique_new: usize,
    /// Euclidean distance of the pair merged at this step (0 at s = 0).
    pub merge_distance: f64,
    pub imspe: f64,
    pub sites: Vec<BatchSite>,
}

/// The full backtracking sequence, s = 0..=M.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergeTrace {
    pub steps: Vec<MergeStep>,
}

impl MergeTrace {
    pub fn imspe_by_s(&self) -> Vec<f64> {
        self.steps.iter().map(|st| st.imspe).collect()
    }

    /// CSV export (columns s, m_s, d_s, imspe).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "s,m_s,d_s,imspe")?;
        for st in &self.steps {
            writeln!(
                w,
                "{},{},{},{}",
                st.s, st.unique_new, st.merge_distance, st.imspe
            )?;
        }
        Ok(())
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

struct LiveSite {
    location: Vec<f64>,
    multiplicity: usize,
}

/// Evaluate the IMSPE of a candidate (new sites plus snapped replicates),
/// with multiplicity-aware noise scaling Lambda(x)/multiplicity.
fn candidate_imspe(
    ws: &ImspeWorkspace,
    model: &HetGPModel,
    live: &[LiveSite],
    snapped: &[(usize, usize)],
) -> Result<f64> {
    let d = model.design().dim();
    let rows = live.len() + snapped.len();
    let mut mat = DMatrix::zeros(rows, d);
    let mut mults = Vec::with_capacity(rows);
    for (r, site) in live.iter().enumerate() {
        for k in 0..d {
            mat[(r, k)] = site.location[k];
        }
        mults.push(site.multiplicity);
    }
    for (off, &(idx, mult)) in snapped.iter().enumerate() {
        let r = live.len() + off;
        let row = &model.design().unique_rows()[idx];
        for k in 0..d {
            mat[(r, k)] = row[k];
        }
        mults.push(mult);
    }
    imspe_batch_with_multiplicity(ws, model, &mat, &mults)
}

/// Greedy merge sequence for an optimized batch (no multiplicities yet:
/// every row of `xtil` is one prospective run).
pub fn merge_sequence(model: &HetGPModel, xtil: &DMatrix<f64>) -> Result<MergeTrace> {
    let ws = workspace(model)?;
    merge_sequence_with_workspace(&ws, model, xtil)
}

pub fn merge_sequence_with_workspace(
    ws: &ImspeWorkspace,
    model: &HetGPModel,
    xtil: &DMatrix<f64>,
) -> Result<MergeTrace> {
    let m_total = xtil.nrows();
    let d = model.design().dim();
    if m_total == 0 {
        return Err(Error::EmptyInput("empty batch for backtracking".into()));
    }
    if xtil.ncols() != d {
        return Err(Error::DimensionMismatch(format!(
            "batch has {} columns, design dimension {d}",
            xtil.ncols()
        )));
    }

    let existing = model.design().unique_rows();
    let mut live: Vec<LiveSite> = (0..m_total)
        .map(|r| LiveSite {
            location: (0..d).map(|k| xtil[(r, k)]).collect(),
            multiplicity: 1,
        })
        .collect();
    // existing unique index -> replicate multiplicity (ordered for
    // determinism).
    let mut snapped: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();

    let mut steps = Vec::with_capacity(m_total + 1);
    let snap_vec = |map: &std::collections::BTreeMap<usize, usize>| -> Vec<(usize, usize)> {
        map.iter().map(|(&k, &v)| (k, v)).collect()
    };
    let imspe0 = candidate_imspe(ws, model, &live, &snap_vec(&snapped))?;
    steps.push(MergeStep {
        s: 0,
        unique_new: m_total,
        merge_distance: 0.0,
        imspe: imspe0,
        sites: assemble_sites(&live, &snap_vec(&snapped), existing),
    });

    enum Pair {
        NewNew(usize, usize),
        NewExisting(usize, usize),
    }

    for s in 1..=m_total {
        // Closest pair among (new, new) and (new, existing); ties resolve
        // to the lowest site index, preferring new-new on exact ties.
        let mut best_dist = f64::INFINITY;
        let mut best_pair: Option<Pair> = None;
        for i in 0..live.len() {
            for j in (i + 1)..live.len() {
                let dist = euclid(&live[i].location, &live[j].location);
                if dist < best_dist {
                    best_dist = dist;
                    best_pair = Some(Pair::NewNew(i, j));
                }
            }
        }
        for (i, site) in live.iter().enumerate() {
            for (e, row) in existing.iter().enumerate() {
                let dist = euclid(&site.location, row);
                if dist < best_dist {
                    best_dist = dist;
                    best_pair = Some(Pair::NewExisting(i, e));
                }
            }
        }
        let pair = best_pair.expect("at least one live site remains");

        match pair {
            Pair::NewNew(i, j) => {
                let mut midpoint: Vec<f64> = live[i]
                    .location
                    .iter()
                    .zip(&live[j].location)
                    .map(|(a, b)| 0.5 * (a + b))
                    .collect();
                let mult = live[i].multiplicity + live[j].multiplicity;
                // A midpoint landing on an existing unique is pinned to
                // that row bit-for-bit; the fused site stays live (so each
                // step retires exactly one site) and snaps at distance zero
                // on the next step.
                if let Some(row) = existing
                    .iter()
                    .find(|row| row.iter().zip(&midpoint).all(|(a, b)| (a - b).abs() <= 1e-12))
                {
                    midpoint = row.clone();
                }
                live.remove(j);
                live[i].location = midpoint;
                live[i].multiplicity = mult;
            }
            Pair::NewExisting(i, e) => {
                let mult = live[i].multiplicity;
                live.remove(i);
                *snapped.entry(e).or_insert(0) += mult;
            }
        }

        let imspe = candidate_imspe(ws, model, &live, &snap_vec(&snapped))?;
        steps.push(MergeStep {
            s,
            unique_new: live.len(),
            merge_distance: best_dist,
            imspe,
            sites: assemble_sites(&live, &snap_vec(&snapped), existing),
        });
    }

    Ok(MergeTrace { steps })
}

fn assemble_sites(
    live: &[LiveSite],
    snapped: &[(usize, usize)],
    existing: &[Vec<f64>],
) -> Vec<BatchSite> {
    // Live sites bit-identical to an existing unique are emitted as
    // replicate requests; everything else is a genuinely new location.
    let mut out: Vec<BatchSite> = live
        .iter()
        .map(|s| {
            let hit = existing
                .iter()
                .position(|row| row.iter().zip(&s.location).all(|(a, b)| a.to_bits() == b.to_bits()));
            BatchSite {
                location: s.location.clone(),
                multiplicity: s.multiplicity,
                kind: match hit {
                    Some(existing_index) => SiteKind::Snapped { existing_index },
                    None => SiteKind::New,
                },
            }
        })
        .collect();
    for &(idx, mult) in snapped {
        out.push(BatchSite {
            location: existing[idx].clone(),
            multiplicity: mult,
            kind: SiteKind::Snapped {
                existing_index: idx,
            },
        });
    }
    out
}

/// Change-point selection over the IMSPE-versus-s curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangepointSelection {
    pub s_hat: usize,
    /// The break with the lowest pooled in-sample MSE.
    pub break_index: usize,
    /// Whether the right-regime-minimum fallback fired.
    pub fallback: bool,
    pub mse: f64,
}

/// Fit the M+1 two-segment models (constant left, quartic right), pick the
/// break with the lowest pooled in-sample MSE (ties keep the largest break,
/// the most-replicates option), and fall back to the right-regime IMSPE
/// minimizer when the right fit sits uniformly below the left constant.
pub fn changepoint_select(imspe_by_s: &[f64]) -> Result<ChangepointSelection> {
    let mp1 = imspe_by_s.len();
    if mp1 < 2 {
        return Err(Error::InvalidParameter(
            "need at least two candidates (M >= 1)".into(),
        ));
    }
    if imspe_by_s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("IMSPE trace".into()));
    }
    let m = mp1 - 1;

    let mut best_break = 0usize;
    let mut best_mse = f64::INFINITY;
    let mut best_right_fit: Vec<f64> = Vec::new();
    let mut best_left_mean = 0.0;

    for b in 0..=m {
        let left = &imspe_by_s[0..=b];
        let left_mean = left.iter().sum::<f64>() / left.len() as f64;
        let sse_left: f64 = left.iter().map(|v| (v - left_mean) * (v - left_mean)).sum();

        let right = &imspe_by_s[(b + 1)..];
        let (sse_right, right_fit) = if right.is_empty() {
            (0.0, Vec::new())
        } else {
            let degree = 4.min(right.len() - 1);
            let xs: Vec<f64> = (0..right.len()).map(|i| i as f64).collect();
            let center = xs.iter().sum::<f64>() / xs.len() as f64;
            let xs_c: Vec<f64> = xs.iter().map(|x| x - center).collect();
            let coef = polyfit(&xs_c, right, degree);
            let fit: Vec<f64> = xs_c.iter().map(|&x| polyval(&coef, x)).collect();
            let sse = right
                .iter()
                .zip(&fit)
                .map(|(y, f)| (y - f) * (y - f))
                .sum::<f64>();
            (sse, fit)
        };

        let mse = (sse_left + sse_right) / mp1 as f64;
        if mse < best_mse || (mse == best_mse && b > best_break) {
            best_mse = mse;
            best_break = b;
            best_right_fit = right_fit;
            best_left_mean = left_mean;
        }
    }

    let fallback = !best_right_fit.is_empty()
        && best_right_fit.iter().all(|&f| f < best_left_mean);
    let s_hat = if fallback {
        let offset = best_break + 1;
        let mut arg = offset;
        let mut best = imspe_by_s[offset];
        for (s, &v) in imspe_by_s.iter().enumerate().skip(offset) {
            if v < best {
                best = v;
                arg = s;
            }
        }
        arg
    } else {
        best_break
    };

    Ok(ChangepointSelection {
        s_hat,
        break_index: best_break,
        fallback,
        mse: best_mse,
    })
}

/// The candidate batch at the selected merge depth.
pub fn select_batch(trace: &MergeTrace) -> Result<(usize, Vec<BatchSite>)> {
    let sel = changepoint_select(&trace.imspe_by_s())?;
    Ok((sel.s_hat, trace.steps[sel.s_hat].sites.clone()))
}
