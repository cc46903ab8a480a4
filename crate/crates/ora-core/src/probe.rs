//! Linear probes on frozen embeddings: logistic classification, ridge
//! regression, and a discrete-time survival head.
//!
//! Probing never touches backbone parameters. Features are the encoder
//! output at the last event at or before the prediction time; events after
//! it are never seen. Every head appends an intercept column and
//! regularizes all weights, so l2 -> infinity drives everything to zero.

use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::autodiff::{adam_step, AdamConfig, AdamState, Tape, Tensor};
use crate::discretizer::quantile_edges;
use crate::error::{Error, Result};
use crate::event_stream::PatientRecord;
use crate::model::{embed_events, Model};
use crate::objectives::{censored_cell_nll, CellTarget};
use crate::synth::{ProbeExample, TaskLabel};
use crate::vocab::Vocabulary;
use crate::discretizer::BinGrid;

pub const DEFAULT_L2: f64 = 1e-4;

/// Encoder output at the last event with time <= prediction time, one row
/// per example. An example whose prediction time precedes its record is an
/// error: the caller filtered eligibility upstream.
pub fn extract_embeddings(
    model: &Model,
    vocab: &Vocabulary,
    grids: &[BinGrid],
    examples: &[(&PatientRecord, f64)],
) -> Result<Vec<Vec<f64>>> {
    examples
        .par_iter()
        .map(|(record, t_pred)| {
            let keep = record.events.partition_point(|e| e.time <= *t_pred);
            if keep == 0 {
                return Err(Error::Validation(format!(
                    "patient {}: prediction time {t_pred} precedes every event",
                    record.patient_id
                )));
            }
            let history = PatientRecord {
                patient_id: record.patient_id.clone(),
                events: record.events[..keep].to_vec(),
            };
            let inputs = embed_events(&history, vocab, grids, &model.config);
            let mut tape = Tape::new();
            let pass = model.begin(&mut tape);
            let e = pass.encode(&mut tape, &inputs)?;
            let t = tape.value(e);
            let d = t.shape()[1];
            let last = t.shape()[0] - 1;
            Ok(t.data()[last * d..(last + 1) * d].to_vec())
        })
        .collect()
}

fn with_intercept(features: &[Vec<f64>]) -> Result<(Vec<f64>, usize, usize)> {
    let n = features.len();
    if n == 0 {
        return Err(Error::Validation("no probe examples".into()));
    }
    let d = features[0].len() + 1;
    let mut x = Vec::with_capacity(n * d);
    for row in features {
        if row.len() + 1 != d {
            return Err(Error::ShapeMismatch {
                op: "probe",
                detail: "ragged feature rows".into(),
            });
        }
        x.extend_from_slice(row);
        x.push(1.0);
    }
    Ok((x, n, d))
}

// ---- logistic probe ----

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticHead {
    /// Weights over features plus a trailing intercept.
    pub weights: Vec<f64>,
}

impl LogisticHead {
    pub fn scores(&self, features: &[Vec<f64>]) -> Vec<f64> {
        features
            .iter()
            .map(|row| {
                let z: f64 = row.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()
                    + self.weights[self.weights.len() - 1];
                1.0 / (1.0 + (-z).exp())
            })
            .collect()
    }
}

/// Gradient descent with backtracking on the l2-regularized mean
/// cross-entropy, run to gradient norm <= 1e-6 or `max_iter`.
pub fn fit_logistic(
    features: &[Vec<f64>],
    labels: &[bool],
    l2: f64,
    max_iter: usize,
) -> Result<LogisticHead> {
    let (x, n, d) = with_intercept(features)?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "fit_logistic",
            detail: format!("{n} rows vs {} labels", labels.len()),
        });
    }
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(Error::Validation("logistic probe needs both classes".into()));
    }
    let objective = |w: &[f64]| -> (f64, Vec<f64>) {
        let mut loss = 0.0;
        let mut grad = vec![0.0; d];
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let z: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum();
            let y = labels[i] as u8 as f64;
            // log(1 + e^z) - y z, stable at both tails
            loss += if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() } - y * z;
            let p = 1.0 / (1.0 + (-z).exp());
            for (g, &xi) in grad.iter_mut().zip(row) {
                *g += (p - y) * xi;
            }
        }
        loss /= n as f64;
        for g in grad.iter_mut() {
            *g /= n as f64;
        }
        for (g, &wi) in grad.iter_mut().zip(w) {
            *g += 2.0 * l2 * wi;
            loss += l2 * wi * wi / d as f64; // constant split, gradient is what matters
        }
        (loss, grad)
    };

    let mut w = vec![0.0; d];
    let mut step = 1.0;
    let (mut loss, mut grad) = objective(&w);
    for _ in 0..max_iter {
        let gnorm: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm <= 1e-6 {
            break;
        }
        // backtracking line search on the descent direction -grad
        step *= 2.0;
        loop {
            let cand: Vec<f64> = w.iter().zip(&grad).map(|(wi, gi)| wi - step * gi).collect();
            let (cand_loss, cand_grad) = objective(&cand);
            if cand_loss <= loss - 0.5 * step * gnorm * gnorm || step < 1e-12 {
                w = cand;
                loss = cand_loss;
                grad = cand_grad;
                break;
            }
            step *= 0.5;
        }
    }
    Ok(LogisticHead { weights: w })
}

// ---- ridge regression probe ----

#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub weights: Vec<f64>,
}

impl LinearHead {
    pub fn predict(&self, features: &[Vec<f64>]) -> Vec<f64> {
        features
            .iter()
            .map(|row| {
                row.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()
                    + self.weights[self.weights.len() - 1]
            })
            .collect()
    }
}

/// Closed-form ridge: (X'X + l2 I) w = X'y by Cholesky.
pub fn fit_linear(features: &[Vec<f64>], targets: &[f64], l2: f64) -> Result<LinearHead> {
    let (x, n, d) = with_intercept(features)?;
    if targets.len() != n {
        return Err(Error::ShapeMismatch {
            op: "fit_linear",
            detail: format!("{n} rows vs {} targets", targets.len()),
        });
    }
    if l2 < 0.0 {
        return Err(Error::Config("l2 must be >= 0".into()));
    }
    let mut gram = vec![0.0; d * d];
    let mut rhs = vec![0.0; d];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        for a in 0..d {
            rhs[a] += row[a] * targets[i];
            for b in a..d {
                gram[a * d + b] += row[a] * row[b];
            }
        }
    }
    for a in 0..d {
        gram[a * d + a] += l2;
        for b in 0..a {
            gram[a * d + b] = gram[b * d + a];
        }
    }
    let weights = cholesky_solve(&mut gram, &rhs, d).ok_or_else(|| {
        Error::Validation(
            "normal matrix is singular; pass l2 > 0 to regularize the probe".into(),
        )
    })?;
    Ok(LinearHead { weights })
}

/// In-place LL' factorization and solve; None when not positive definite.
fn cholesky_solve(a: &mut [f64], b: &[f64], d: usize) -> Option<Vec<f64>> {
    for j in 0..d {
        let mut diag = a[j * d + j];
        for k in 0..j {
            diag -= a[j * d + k] * a[j * d + k];
        }
        if diag <= 1e-300 || !diag.is_finite() {
            return None;
        }
        let diag = diag.sqrt();
        a[j * d + j] = diag;
        for i in (j + 1)..d {
            let mut v = a[i * d + j];
            for k in 0..j {
                v -= a[i * d + k] * a[j * d + k];
            }
            a[i * d + j] = v / diag;
        }
    }
    // forward then backward substitution
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut v = b[i];
        for k in 0..i {
            v -= a[i * d + k] * y[k];
        }
        y[i] = v / a[i * d + i];
    }
    let mut w = vec![0.0; d];
    for i in (0..d).rev() {
        let mut v = y[i];
        for k in (i + 1)..d {
            v -= a[k * d + i] * w[k];
        }
        w[i] = v / a[i * d + i];
    }
    Some(w)
}

// ---- discrete-time survival probe ----

/// Single linear layer + softmax over duration bins, trained with the same
/// censored discrete likelihood as the time-only pretraining objective.
/// The effective bin count is `edges.len() + 1` (degenerate duration
/// samples can collapse below the requested count).
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalHead {
    /// `[d_features + 1, cells]`, intercept row last.
    pub weights: Vec<f64>,
    /// Interior duration edges the bins were fit on.
    pub edges: Vec<f64>,
}

impl SurvivalHead {
    pub fn cells(&self) -> usize {
        self.edges.len() + 1
    }

    pub fn cell_probabilities(&self, features: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let cells = self.cells();
        let d = self.weights.len() / cells;
        features
            .iter()
            .map(|row| {
                let mut z = vec![0.0; cells];
                for (j, zj) in z.iter_mut().enumerate() {
                    let mut acc = self.weights[(d - 1) * cells + j]; // intercept
                    for (a, &xi) in row.iter().enumerate() {
                        acc += xi * self.weights[a * cells + j];
                    }
                    *zj = acc;
                }
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                for v in e.iter_mut() {
                    *v /= s;
                }
                e
            })
            .collect()
    }

    /// Survival curves `S(k) = 1 - cumulative mass through bin k`;
    /// non-increasing by construction.
    pub fn survival_curves(&self, features: &[Vec<f64>]) -> Vec<Vec<f64>> {
        self.cell_probabilities(features)
            .into_iter()
            .map(|p| {
                let mut acc = 0.0;
                p.iter()
                    .map(|&m| {
                        acc += m;
                        (1.0 - acc).max(0.0)
                    })
                    .collect()
            })
            .collect()
    }
}

pub fn fit_discrete_survival(
    features: &[Vec<f64>],
    durations: &[f64],
    observed: &[bool],
    bins: usize,
    max_iter: usize,
) -> Result<SurvivalHead> {
    let (x, n, d) = with_intercept(features)?;
    if durations.len() != n || observed.len() != n {
        return Err(Error::ShapeMismatch {
            op: "fit_discrete_survival",
            detail: "durations/indicators do not match features".into(),
        });
    }
    if bins < 2 {
        return Err(Error::Config("survival probe needs >= 2 bins".into()));
    }
    if durations.iter().any(|&t| t < 0.0) {
        return Err(Error::Validation("negative duration".into()));
    }
    let observed_durations: Vec<f64> = durations
        .iter()
        .zip(observed)
        .filter(|(_, &o)| o)
        .map(|(&t, _)| t)
        .collect();
    if observed_durations.is_empty() {
        return Err(Error::Validation(
            "all-censored dataset; the survival probe needs at least one observed event".into(),
        ));
    }
    let edges = quantile_edges(&observed_durations, bins);
    let targets: Vec<CellTarget> = durations
        .iter()
        .zip(observed)
        .map(|(&t, &o)| {
            let bin = edges.partition_point(|&e| e <= t);
            if o {
                CellTarget::Observed { cell: bin }
            } else {
                CellTarget::Censored { cells_before: bin }
            }
        })
        .collect();

    let features_tensor = Tensor::matrix(n, d, x)?;
    let cells = edges.len() + 1;
    let mut params = vec![Tensor::zeros(vec![d, cells]).with_grad()];
    let mut state = AdamState::for_params(&params);
    let cfg = AdamConfig::with_lr(0.05);
    for _ in 0..max_iter {
        let mut tape = Tape::new();
        let w = tape.leaf(&params[0]);
        let xs = tape.constant(features_tensor.clone());
        let logits = tape.matmul(xs, w)?;
        let (total, _, _) = censored_cell_nll(&mut tape, logits, &targets)?;
        let loss = tape.affine(total, 1.0 / n as f64, 0.0)?;
        let grads = tape.backward(loss)?;
        let g = grads.get(w);
        let gnorm = g
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>().sqrt())
            .unwrap_or(0.0);
        if gnorm <= 1e-7 {
            break;
        }
        adam_step(&mut params, &[g], &mut state, &cfg)?;
    }
    Ok(SurvivalHead {
        weights: params[0].data().to_vec(),
        edges,
    })
}

// ---- probe dataset and prediction files ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeTask {
    Binary,
    Regression,
    Survival,
}

impl std::str::FromStr for ProbeTask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(ProbeTask::Binary),
            "regression" => Ok(ProbeTask::Regression),
            "survival" => Ok(ProbeTask::Survival),
            other => Err(Error::Config(format!("unknown probe task {other:?}"))),
        }
    }
}

impl std::fmt::Display for ProbeTask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProbeTask::Binary => write!(f, "binary"),
            ProbeTask::Regression => write!(f, "regression"),
            ProbeTask::Survival => write!(f, "survival"),
        }
    }
}

pub fn write_probe_dataset(examples: &[ProbeExample], mut writer: impl Write) -> Result<()> {
    for e in examples {
        let line = match &e.label {
            TaskLabel::Binary(b) => format!("{}\t{}\t{}", e.patient_id, e.prediction_time, *b as u8),
            TaskLabel::Real(v) => format!("{}\t{}\t{}", e.patient_id, e.prediction_time, v),
            TaskLabel::Survival { duration, observed } => format!(
                "{}\t{}\t{}\t{}",
                e.patient_id, e.prediction_time, duration, *observed as u8
            ),
        };
        writeln!(writer, "{line}").map_err(|err| Error::io("<writer>", err))?;
    }
    Ok(())
}

pub fn read_probe_dataset(reader: impl BufRead, task: ProbeTask) -> Result<Vec<ProbeExample>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        let expect = if task == ProbeTask::Survival { 4 } else { 3 };
        if parts.len() != expect {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {expect} fields, got {}", parts.len()),
            });
        }
        let bad = |what: &str| Error::Parse {
            line: line_no,
            message: format!("bad {what}"),
        };
        let prediction_time: f64 = parts[1].parse().map_err(|_| bad("prediction time"))?;
        let label = match task {
            ProbeTask::Binary => TaskLabel::Binary(match parts[2] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("binary label")),
            }),
            ProbeTask::Regression => TaskLabel::Real(parts[2].parse().map_err(|_| bad("label"))?),
            ProbeTask::Survival => TaskLabel::Survival {
                duration: parts[2].parse().map_err(|_| bad("duration"))?,
                observed: match parts[3] {
                    "0" => false,
                    "1" => true,
                    _ => return Err(bad("event indicator")),
                },
            },
        };
        out.push(ProbeExample {
            patient_id: parts[0].to_string(),
            prediction_time,
            label,
        });
    }
    if out.is_empty() {
        return Err(Error::Validation("empty probe dataset".into()));
    }
    Ok(out)
}

/// Predictions: `patient_id<TAB>score` for scalar tasks, comma-joined
/// survival curves otherwise; survival files carry the duration-bin edges
/// on a leading comment line so curves stay interpretable downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub patient_ids: Vec<String>,
    pub values: PredictionValues,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PredictionValues {
    Scores(Vec<f64>),
    Curves { edges: Vec<f64>, curves: Vec<Vec<f64>> },
}

pub fn write_predictions(p: &Predictions, mut writer: impl Write) -> Result<()> {
    let io_err = |e| Error::io("<writer>", e);
    match &p.values {
        PredictionValues::Scores(scores) => {
            for (pid, s) in p.patient_ids.iter().zip(scores) {
                writeln!(writer, "{pid}\t{s}").map_err(io_err)?;
            }
        }
        PredictionValues::Curves { edges, curves } => {
            let joined: Vec<String> = edges.iter().map(|e| e.to_string()).collect();
            writeln!(writer, "# time_edges={}", joined.join(",")).map_err(io_err)?;
            for (pid, curve) in p.patient_ids.iter().zip(curves) {
                let joined: Vec<String> = curve.iter().map(|v| v.to_string()).collect();
                writeln!(writer, "{pid}\t{}", joined.join(",")).map_err(io_err)?;
            }
        }
    }
    Ok(())
}

pub fn read_predictions(reader: impl BufRead, task: ProbeTask) -> Result<Predictions> {
    let mut patient_ids = Vec::new();
    let mut scores = Vec::new();
    let mut curves = Vec::new();
    let mut edges = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("# time_edges=") {
            if !rest.is_empty() {
                edges = rest
                    .split(',')
                    .map(|t| {
                        t.parse::<f64>().map_err(|_| Error::Parse {
                            line: line_no,
                            message: format!("bad edge {t:?}"),
                        })
                    })
                    .collect::<Result<_>>()?;
            }
            continue;
        }
        let (pid, rest) = line.split_once('\t').ok_or(Error::Parse {
            line: line_no,
            message: "expected patient_id<TAB>value".into(),
        })?;
        patient_ids.push(pid.to_string());
        if task == ProbeTask::Survival {
            let curve: Vec<f64> = rest
                .split(',')
                .map(|t| {
                    t.parse::<f64>().map_err(|_| Error::Parse {
                        line: line_no,
                        message: format!("bad curve value {t:?}"),
                    })
                })
                .collect::<Result<_>>()?;
            curves.push(curve);
        } else {
            scores.push(rest.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad score {rest:?}"),
            })?);
        }
    }
    let values = if task == ProbeTask::Survival {
        PredictionValues::Curves { edges, curves }
    } else {
        PredictionValues::Scores(scores)
    };
    Ok(Predictions {
        patient_ids,
        values,
    })
}

pub fn write_predictions_file(p: &Predictions, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    write_predictions(p, std::io::BufWriter::new(file))
}

pub fn read_predictions_file(path: &Path, task: ProbeTask) -> Result<Predictions> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_predictions(std::io::BufReader::new(file), task)
}

// ---- embeddings file: patient_id<TAB>comma-joined features ----

pub fn write_embeddings(ids: &[String], features: &[Vec<f64>], mut writer: impl Write) -> Result<()> {
    for (pid, row) in ids.iter().zip(features) {
        let joined: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(writer, "{pid}\t{}", joined.join(","))
            .map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

pub fn read_embeddings(reader: impl BufRead) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.is_empty() {
            continue;
        }
        let (pid, rest) = line.split_once('\t').ok_or(Error::Parse {
            line: line_no,
            message: "expected patient_id<TAB>features".into(),
        })?;
        let row: Vec<f64> = rest
            .split(',')
            .map(|t| {
                t.parse::<f64>().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("bad feature {t:?}"),
                })
            })
            .collect::<Result<_>>()?;
        ids.push(pid.to_string());
        rows.push(row);
    }
    Ok((ids, rows))
}
