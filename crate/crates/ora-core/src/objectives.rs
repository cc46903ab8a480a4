//! The three pretraining objectives: next-token cross-entropy, a per-code
//! censored time-to-event likelihood over time bins, and the joint
//! time-value likelihood over time x value cells.
//!
//! All three are differentiable graphs built on a `Tape`. Observed targets
//! contribute `-log P[cell]` through a logsumexp path (never `log` of a
//! raw probability, so extreme logits cannot produce infinities). Censored
//! targets contribute `-log(1 - mass strictly before the censoring bin)`,
//! clamped at 1e-12 with a diagnostic counter rather than silently flooring.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Tensor, VarId};
use crate::discretizer::BinGrid;
use crate::error::{Error, Result};
use crate::event_stream::TargetSet;

/// Floor for the censored-survival argument; hits are counted per batch.
pub const CENSOR_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    Ntp,
    Tpp,
    Ora,
}

impl ObjectiveKind {
    pub fn all() -> [ObjectiveKind; 3] {
        [ObjectiveKind::Ntp, ObjectiveKind::Tpp, ObjectiveKind::Ora]
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObjectiveKind::Ntp => write!(f, "ntp"),
            ObjectiveKind::Tpp => write!(f, "tpp"),
            ObjectiveKind::Ora => write!(f, "ora"),
        }
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ntp" => Ok(ObjectiveKind::Ntp),
            "tpp" => Ok(ObjectiveKind::Tpp),
            "ora" => Ok(ObjectiveKind::Ora),
            other => Err(Error::Config(format!(
                "unknown objective {other:?} (expected ntp, tpp, or ora)"
            ))),
        }
    }
}

/// Per-code discretized distribution, as logits on the tape.
#[derive(Debug, Clone, Copy)]
pub struct CodeDistribution {
    pub code: usize,
    /// Value cells per time bin: the model's V for numeric codes under the
    /// joint objective, 1 otherwise.
    pub value_cells: usize,
    /// Logits of shape [n_anchors, time_bins * value_cells].
    pub logits: VarId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Mean negative log-likelihood per scoring term.
    Mean,
    /// Plain sum, for gradient accumulation across shards.
    Sum,
}

/// A loss node plus its diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct LossBatch {
    pub loss: VarId,
    pub value: f64,
    pub term_count: usize,
    pub observed_terms: usize,
    pub censored_terms: usize,
    pub clamped_terms: usize,
}

/// Mean (or summed) cross-entropy of the next code given history. Time and
/// value never enter.
pub fn ntp_loss(
    tape: &mut Tape,
    logits: VarId,
    labels: &[usize],
    reduction: Reduction,
) -> Result<LossBatch> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "ntp_loss",
            detail: format!("logits {shape:?} vs {} labels", labels.len()),
        });
    }
    let (n, k) = (shape[0], shape[1]);
    if n == 0 {
        return Err(Error::Validation("ntp batch has no positions".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Bounds(format!("label {bad} outside vocabulary of {k}")));
    }
    let mut onehot = vec![0.0; n * k];
    for (row, &label) in labels.iter().enumerate() {
        onehot[row * k + label] = 1.0;
    }
    let mask = tape.constant(Tensor::matrix(n, k, onehot)?);
    let picked = tape.mul(logits, mask)?;
    let picked = tape.sum_last(picked)?;
    let lse = tape.logsumexp_last(logits)?;
    let per_row = tape.sub(lse, picked)?;
    let loss = match reduction {
        Reduction::Mean => tape.mean_all(per_row)?,
        Reduction::Sum => tape.sum_all(per_row)?,
    };
    Ok(LossBatch {
        loss,
        value: tape.value(loss).scalar_value(),
        term_count: n,
        observed_terms: n,
        censored_terms: 0,
        clamped_terms: 0,
    })
}

/// One scoring term of the censored discrete likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellTarget {
    /// `-log P[cell]` for the flat cell index.
    Observed { cell: usize },
    /// `-log(1 - sum of the first `cells_before` cells)`, clamped.
    Censored { cells_before: usize },
}

/// Sum of censored-likelihood terms for one logits matrix `[n, cells]`,
/// one `CellTarget` per row. This is the primitive behind both pretraining
/// losses and the discrete survival probe head.
pub fn censored_cell_nll(
    tape: &mut Tape,
    logits: VarId,
    targets: &[CellTarget],
) -> Result<(VarId, usize, usize)> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "censored_cell_nll",
            detail: format!("logits {shape:?} vs {} targets", targets.len()),
        });
    }
    let (n, cells) = (shape[0], shape[1]);
    let mut obs_mask = vec![0.0; n * cells];
    let mut obs_rows = vec![0.0; n];
    let mut cen_mask = vec![0.0; n * cells];
    let mut cen_rows = vec![0.0; n];
    let mut observed = 0usize;
    let mut any_censored = false;

    for (row, target) in targets.iter().enumerate() {
        match *target {
            CellTarget::Observed { cell } => {
                if cell >= cells {
                    return Err(Error::Bounds(format!("cell {cell} out of {cells}")));
                }
                obs_mask[row * cells + cell] = 1.0;
                obs_rows[row] = 1.0;
                observed += 1;
            }
            CellTarget::Censored { cells_before } => {
                let limit = cells_before.min(cells);
                for cell in 0..limit {
                    cen_mask[row * cells + cell] = 1.0;
                }
                cen_rows[row] = 1.0;
                any_censored = true;
            }
        }
    }

    let mut total: Option<VarId> = None;
    let mut clamped = 0usize;
    if observed > 0 {
        let lse = tape.logsumexp_last(logits)?;
        let maskt = tape.constant(Tensor::matrix(n, cells, obs_mask)?);
        let picked = tape.mul(logits, maskt)?;
        let picked = tape.sum_last(picked)?;
        let per_row = tape.sub(lse, picked)?;
        let rows = tape.constant(Tensor::from_vec(vec![n], obs_rows)?);
        let masked = tape.mul(per_row, rows)?;
        total = Some(tape.sum_all(masked)?);
    }
    if any_censored {
        let probs = tape.softmax_last(logits)?;
        let maskt = tape.constant(Tensor::matrix(n, cells, cen_mask)?);
        let below = tape.mul(probs, maskt)?;
        let mass = tape.sum_last(below)?;
        let survival = tape.affine(mass, -1.0, 1.0)?;
        // count clamp hits among censored rows before flooring
        for (row, &flag) in cen_rows.iter().enumerate() {
            if flag > 0.0 && tape.value(survival).data()[row] < CENSOR_CLAMP {
                clamped += 1;
            }
        }
        let floored = tape.clamp_min(survival, CENSOR_CLAMP)?;
        let logs = tape.log(floored)?;
        let rows = tape.constant(Tensor::from_vec(vec![n], cen_rows)?);
        let masked = tape.mul(logs, rows)?;
        let cen_sum = tape.sum_all(masked)?;
        let neg = tape.affine(cen_sum, -1.0, 0.0)?;
        total = Some(match total {
            Some(prev) => tape.add(prev, neg)?,
            None => neg,
        });
    }
    // all rows censored before any cell: the likelihood is exactly 1
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    Ok((total, observed, clamped))
}

/// Censored discrete likelihood over every (anchor, code) pair. Shared by
/// the time-only and joint objectives; `value_cells` on each head decides
/// whether values pick a cell column or are ignored.
fn discrete_loss(
    tape: &mut Tape,
    heads: &[CodeDistribution],
    anchors: &[&TargetSet],
    grids: &[BinGrid],
    reduction: Reduction,
    joint_values: bool,
) -> Result<LossBatch> {
    let n = anchors.len();
    if n == 0 || heads.is_empty() {
        return Err(Error::Validation("empty loss batch".into()));
    }
    let mut total: Option<VarId> = None;
    let mut observed_terms = 0usize;
    let mut clamped_terms = 0usize;

    for head in heads {
        let grid = grids
            .get(head.code)
            .ok_or_else(|| Error::Validation(format!("missing grid for code {}", head.code)))?;
        let shape = tape.value(head.logits).shape().to_vec();
        if shape.len() != 2 || shape[0] != n || shape[1] % head.value_cells != 0 {
            return Err(Error::ShapeMismatch {
                op: "discrete_loss",
                detail: format!(
                    "head for code {} has shape {shape:?} for {n} anchors, {} value cells",
                    head.code, head.value_cells
                ),
            });
        }
        let cells = shape[1];
        let vc = head.value_cells;

        let targets: Vec<CellTarget> = anchors
            .iter()
            .map(|set| {
                let target = set.target_for(head.code);
                if target.observed {
                    let time_bin = grid.time_bin(target.delta_t);
                    let value_bin = if joint_values && vc > 1 {
                        match target.value {
                            Some(v) => grid.value_bin(v).unwrap_or(0),
                            None => {
                                return Err(Error::Validation(format!(
                                    "observed target for numeric code {} has no value",
                                    head.code
                                )))
                            }
                        }
                    } else {
                        0
                    };
                    let cell = time_bin * vc + value_bin;
                    if cell >= cells {
                        return Err(Error::Bounds(format!(
                            "cell {cell} out of {cells} for code {}; grid and head disagree",
                            head.code
                        )));
                    }
                    Ok(CellTarget::Observed { cell })
                } else {
                    // strictly-before convention: only bins below the
                    // censoring bin are known to be event-free
                    let k_c = grid.time_bin(set.censor_duration);
                    Ok(CellTarget::Censored {
                        cells_before: k_c * vc,
                    })
                }
            })
            .collect::<Result<_>>()?;

        let (code_loss, observed, clamped) = censored_cell_nll(tape, head.logits, &targets)?;
        observed_terms += observed;
        clamped_terms += clamped;
        total = Some(match total {
            Some(prev) => tape.add(prev, code_loss)?,
            None => code_loss,
        });
    }

    let term_count = n * heads.len();
    let total = total.expect("at least one head");
    let loss = match reduction {
        Reduction::Mean => tape.affine(total, 1.0 / term_count as f64, 0.0)?,
        Reduction::Sum => total,
    };
    Ok(LossBatch {
        loss,
        value: tape.value(loss).scalar_value(),
        term_count,
        observed_terms,
        censored_terms: term_count - observed_terms,
        clamped_terms,
    })
}

/// Time-only censored likelihood: every code carries a distribution over
/// time bins and values never enter.
pub fn tpp_loss(
    tape: &mut Tape,
    heads: &[CodeDistribution],
    anchors: &[&TargetSet],
    grids: &[BinGrid],
    reduction: Reduction,
) -> Result<LossBatch> {
    if let Some(bad) = heads.iter().find(|h| h.value_cells != 1) {
        return Err(Error::Validation(format!(
            "time-only objective got {} value cells for code {}",
            bad.value_cells, bad.code
        )));
    }
    discrete_loss(tape, heads, anchors, grids, reduction, false)
}

/// Joint time-value censored likelihood: numeric codes pick a time x value
/// cell when observed; censored terms marginalize over values.
pub fn ora_loss(
    tape: &mut Tape,
    heads: &[CodeDistribution],
    anchors: &[&TargetSet],
    grids: &[BinGrid],
    reduction: Reduction,
) -> Result<LossBatch> {
    discrete_loss(tape, heads, anchors, grids, reduction, true)
}
