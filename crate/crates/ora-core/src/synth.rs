//! Synthetic marked-point-process cohorts with closed-form ground truth.
//!
//! Each patient carries a static binary latent state `z`. Conditional on
//! `z`, every code emits a homogeneous Poisson stream at rate
//! `lambda0 * exp(w . z)` inside an observation window, and numeric events
//! draw values from `Normal(mu0 + u . z, sd)`. Because the streams are
//! memoryless, the first-arrival law per code is exactly exponential, so
//! the discretized cell distribution has a closed form that generated data
//! can be checked against.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use rayon::prelude::*;

use crate::discretizer::BinGrid;
use crate::error::{Error, Result};
use crate::event_stream::{Event, PatientRecord};
use crate::rng::stream_indexed;

/// Hard cap on worst-case expected events per patient.
pub const MAX_EXPECTED_EVENTS: f64 = 1e4;

/// True generating parameters for one code.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeParams {
    pub code: String,
    pub numeric: bool,
    /// Base rate in events/day.
    pub lambda0: f64,
    /// Log-linear rate modulation by the latent bits.
    pub rate_weights: Vec<f64>,
    pub value_mean0: f64,
    /// Additive value-mean modulation by the latent bits.
    pub value_weights: Vec<f64>,
    pub value_sd: f64,
}

impl CodeParams {
    pub fn rate(&self, z: &[bool]) -> f64 {
        let dot: f64 = self
            .rate_weights
            .iter()
            .zip(z)
            .map(|(w, &b)| if b { *w } else { 0.0 })
            .sum();
        self.lambda0 * dot.exp()
    }

    pub fn value_mean(&self, z: &[bool]) -> f64 {
        let dot: f64 = self
            .value_weights
            .iter()
            .zip(z)
            .map(|(u, &b)| if b { *u } else { 0.0 })
            .sum();
        self.value_mean0 + dot
    }

    fn worst_case_rate(&self) -> f64 {
        let dot: f64 = self.rate_weights.iter().map(|w| w.max(0.0)).sum();
        self.lambda0 * dot.exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    pub latent_dim: usize,
    pub codes: Vec<CodeParams>,
    /// Observation-window length is uniform over this range (days).
    pub window_range: (f64, f64),
    pub seed: u64,
}

/// Everything the generator knows that a model should have to learn.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub codes: Vec<CodeParams>,
    pub latent_dim: usize,
    /// Per patient: id, latent bits, window length.
    pub patients: Vec<PatientTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientTruth {
    pub patient_id: String,
    pub z: Vec<bool>,
    pub window: f64,
}

fn validate(config: &GeneratorConfig) -> Result<()> {
    if config.n_patients == 0 || config.codes.is_empty() {
        return Err(Error::Config("need at least one patient and one code".into()));
    }
    let (lo, hi) = config.window_range;
    if !(lo.is_finite() && hi.is_finite()) || lo <= 0.0 || hi < lo {
        return Err(Error::Config(format!("bad window range ({lo}, {hi})")));
    }
    for c in &config.codes {
        if c.lambda0 <= 0.0 {
            return Err(Error::Config(format!("code {} has rate {} <= 0", c.code, c.lambda0)));
        }
        if c.numeric && c.value_sd <= 0.0 {
            return Err(Error::Config(format!("code {} has sd {} <= 0", c.code, c.value_sd)));
        }
        if c.rate_weights.len() != config.latent_dim || c.value_weights.len() != config.latent_dim {
            return Err(Error::Config(format!(
                "code {} weight lengths do not match latent dim {}",
                c.code, config.latent_dim
            )));
        }
    }
    let worst: f64 = config.codes.iter().map(|c| c.worst_case_rate()).sum::<f64>() * hi;
    if worst > MAX_EXPECTED_EVENTS {
        return Err(Error::Config(format!(
            "worst-case expected events per patient {worst:.0} exceeds {MAX_EXPECTED_EVENTS} (runaway rates)"
        )));
    }
    Ok(())
}

/// Generate a cohort. Deterministic given the config: every patient draws
/// from its own derived stream, so generation order (and parallelism)
/// cannot change the output.
pub fn generate_cohort(config: &GeneratorConfig) -> Result<(Vec<PatientRecord>, GroundTruth)> {
    validate(config)?;
    let width = config.n_patients.to_string().len().max(4);
    let per_patient: Vec<(PatientRecord, PatientTruth)> = (0..config.n_patients)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_indexed(config.seed, "synth-patient", i as u64);
            let patient_id = format!("p{i:0width$}");
            let z: Vec<bool> = (0..config.latent_dim).map(|_| rng.gen_bool(0.5)).collect();
            let (lo, hi) = config.window_range;
            let window = if lo == hi { lo } else { rng.gen_range(lo..hi) };
            let mut events: Vec<Event> = Vec::new();
            for c in &config.codes {
                let rate = c.rate(&z);
                let gap = Exp::new(rate).expect("validated rate > 0");
                let mut t = 0.0;
                loop {
                    t += gap.sample(&mut rng);
                    if t >= window {
                        break;
                    }
                    let value = if c.numeric {
                        let normal =
                            Normal::new(c.value_mean(&z), c.value_sd).expect("validated sd > 0");
                        Some(normal.sample(&mut rng))
                    } else {
                        None
                    };
                    events.push(Event {
                        time: t,
                        code: c.code.clone(),
                        value,
                    });
                }
            }
            events.sort_by(|a, b| {
                a.time
                    .partial_cmp(&b.time)
                    .expect("finite times")
                    .then_with(|| a.code.cmp(&b.code))
            });
            (
                PatientRecord {
                    patient_id: patient_id.clone(),
                    events,
                },
                PatientTruth {
                    patient_id,
                    z,
                    window,
                },
            )
        })
        .collect();

    let mut records = Vec::with_capacity(config.n_patients);
    let mut patients = Vec::with_capacity(config.n_patients);
    for (r, t) in per_patient {
        records.push(r);
        patients.push(t);
    }
    Ok((
        records,
        GroundTruth {
            codes: config.codes.clone(),
            latent_dim: config.latent_dim,
            patients,
        },
    ))
}

// ---- closed-form cell distribution ----

fn normal_cdf(x: f64, mean: f64, sd: f64) -> f64 {
    0.5 * (1.0 + libm::erf((x - mean) / (sd * std::f64::consts::SQRT_2)))
}

fn exp_cdf(t: f64, rate: f64) -> f64 {
    1.0 - (-rate * t).exp()
}

/// Axis masses over interior edges with the tail absorbed into the last
/// bin, so each axis sums to exactly one.
fn axis_masses(edges: &[f64], cdf: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut masses = Vec::with_capacity(edges.len() + 1);
    let mut prev = 0.0;
    let mut partial = 0.0;
    for &e in edges {
        let c = cdf(e);
        let m = (c - prev).max(0.0);
        masses.push(m);
        partial += m;
        prev = c;
    }
    masses.push(1.0 - partial);
    masses
}

/// True discretized first-arrival distribution of one code for latent
/// state `z`, over the grid's effective cells (row-major time x value).
/// The last cell absorbs accumulated rounding so the matrix sums to one.
pub fn oracle_cell_distribution(code: &CodeParams, z: &[bool], grid: &BinGrid) -> Vec<f64> {
    let rate = code.rate(z);
    let time = axis_masses(&grid.time_edges, |t| exp_cdf(t, rate));
    let value = match (&grid.value_edges, code.numeric) {
        (Some(edges), true) => {
            let mean = code.value_mean(z);
            axis_masses(edges, |v| normal_cdf(v, mean, code.value_sd))
        }
        _ => vec![1.0],
    };
    let mut cells = Vec::with_capacity(time.len() * value.len());
    for &tm in &time {
        for &vm in &value {
            cells.push(tm * vm);
        }
    }
    let partial: f64 = cells[..cells.len() - 1].iter().sum();
    let absorbed = 1.0 - partial;
    if absorbed >= 0.0 {
        *cells.last_mut().expect("at least one cell") = absorbed;
    }
    cells
}

// ---- probe task labels ----

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TaskKind {
    /// Does the target code occur within `horizon` days after prediction time?
    Classification { code: usize, horizon: f64 },
    /// Days until the first target-code occurrence, censored at window end.
    TimeToEvent { code: usize },
    /// Value of the first strictly-future target-code event.
    Regression { code: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskLabel {
    Binary(bool),
    Real(f64),
    Survival { duration: f64, observed: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeExample {
    pub patient_id: String,
    pub prediction_time: f64,
    pub label: TaskLabel,
}

/// Build probe labels at a fixed fraction of each patient's window.
/// Patients with no event at or before the prediction time are skipped
/// (their embedding would have no history). The onset tasks (classification
/// and time-to-event) are incident: a patient with a target-code event at
/// or before the prediction time is not at risk of a first occurrence and
/// is excluded from the cohort. Regression skips patients with no future
/// target value.
pub fn task_labels(
    records: &[PatientRecord],
    truth: &GroundTruth,
    kind: TaskKind,
    prediction_fraction: f64,
) -> Result<Vec<ProbeExample>> {
    if !(0.0..1.0).contains(&prediction_fraction) {
        return Err(Error::Config(format!(
            "prediction fraction {prediction_fraction} outside [0, 1)"
        )));
    }
    let code_name = |idx: usize| -> Result<&str> {
        truth
            .codes
            .get(idx)
            .map(|c| c.code.as_str())
            .ok_or_else(|| Error::Bounds(format!("task code {idx} out of range")))
    };
    let mut out = Vec::new();
    for (record, patient) in records.iter().zip(&truth.patients) {
        debug_assert_eq!(record.patient_id, patient.patient_id);
        let t_pred = patient.window * prediction_fraction;
        if !record.events.first().map(|e| e.time <= t_pred).unwrap_or(false) {
            continue;
        }
        let prior_occurrence = |name: &str| {
            record
                .events
                .iter()
                .any(|e| e.code == name && e.time <= t_pred)
        };
        let label = match kind {
            TaskKind::Classification { code, horizon } => {
                let name = code_name(code)?;
                if prior_occurrence(name) {
                    None
                } else {
                    let hit = record
                        .events
                        .iter()
                        .any(|e| e.code == name && e.time > t_pred && e.time <= t_pred + horizon);
                    Some(TaskLabel::Binary(hit))
                }
            }
            TaskKind::TimeToEvent { code } => {
                let name = code_name(code)?;
                if prior_occurrence(name) {
                    None
                } else {
                    let first = record
                        .events
                        .iter()
                        .find(|e| e.code == name && e.time > t_pred);
                    Some(match first {
                        Some(e) => TaskLabel::Survival {
                            duration: e.time - t_pred,
                            observed: true,
                        },
                        None => TaskLabel::Survival {
                            duration: patient.window - t_pred,
                            observed: false,
                        },
                    })
                }
            }
            TaskKind::Regression { code } => {
                let name = code_name(code)?;
                record
                    .events
                    .iter()
                    .find(|e| e.code == name && e.time > t_pred && e.value.is_some())
                    .map(|e| TaskLabel::Real(e.value.expect("filtered Some")))
            }
        };
        if let Some(label) = label {
            out.push(ProbeExample {
                patient_id: record.patient_id.clone(),
                prediction_time: t_pred,
                label,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::Validation("no eligible prediction anchors".into()));
    }
    Ok(out)
}

// ---- ground-truth file ----
// Two sections: "#codes" with the per-code parameter table, then
// "#patients" with one line per subject: id, latent bits, window length.

fn join_f64(xs: &[f64]) -> String {
    if xs.is_empty() {
        return "-".into();
    }
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_f64_list(field: &str, line_no: usize) -> Result<Vec<f64>> {
    if field == "-" {
        return Ok(Vec::new());
    }
    field
        .split(',')
        .map(|tok| {
            tok.parse::<f64>().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad number {tok:?}"),
            })
        })
        .collect()
}

pub fn write_ground_truth(truth: &GroundTruth, mut writer: impl Write) -> Result<()> {
    let io_err = |e| Error::io("<writer>", e);
    writeln!(writer, "#codes").map_err(io_err)?;
    for c in &truth.codes {
        writeln!(
            writer,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            c.code,
            c.numeric,
            c.lambda0,
            join_f64(&c.rate_weights),
            c.value_mean0,
            join_f64(&c.value_weights),
            c.value_sd
        )
        .map_err(io_err)?;
    }
    writeln!(writer, "#patients").map_err(io_err)?;
    for p in &truth.patients {
        let bits: String = p.z.iter().map(|&b| if b { '1' } else { '0' }).collect();
        writeln!(writer, "{}\t{}\t{}", p.patient_id, bits, p.window).map_err(io_err)?;
    }
    Ok(())
}

pub fn read_ground_truth(reader: impl BufRead) -> Result<GroundTruth> {
    let mut codes = Vec::new();
    let mut patients = Vec::new();
    let mut section = "";
    let mut latent_dim = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.is_empty() {
            continue;
        }
        if line == "#codes" || line == "#patients" {
            section = if line == "#codes" { "codes" } else { "patients" };
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        match section {
            "codes" => {
                if parts.len() != 7 {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("expected 7 fields in code table, got {}", parts.len()),
                    });
                }
                let bad = |what: &str| Error::Parse {
                    line: line_no,
                    message: format!("bad {what}"),
                };
                let params = CodeParams {
                    code: parts[0].to_string(),
                    numeric: parts[1].parse().map_err(|_| bad("numeric flag"))?,
                    lambda0: parts[2].parse().map_err(|_| bad("rate"))?,
                    rate_weights: parse_f64_list(parts[3], line_no)?,
                    value_mean0: parts[4].parse().map_err(|_| bad("value mean"))?,
                    value_weights: parse_f64_list(parts[5], line_no)?,
                    value_sd: parts[6].parse().map_err(|_| bad("value sd"))?,
                };
                latent_dim = latent_dim.max(params.rate_weights.len());
                codes.push(params);
            }
            "patients" => {
                if parts.len() != 3 {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("expected 3 fields in patient table, got {}", parts.len()),
                    });
                }
                let z = parts[1]
                    .chars()
                    .map(|c| match c {
                        '0' => Ok(false),
                        '1' => Ok(true),
                        other => Err(Error::Parse {
                            line: line_no,
                            message: format!("bad latent bit {other:?}"),
                        }),
                    })
                    .collect::<Result<Vec<bool>>>()?;
                let window = parts[2].parse().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("bad window {:?}", parts[2]),
                })?;
                patients.push(PatientTruth {
                    patient_id: parts[0].to_string(),
                    z,
                    window,
                });
            }
            _ => {
                return Err(Error::Parse {
                    line: line_no,
                    message: "content before a section header".into(),
                })
            }
        }
    }
    Ok(GroundTruth {
        codes,
        latent_dim,
        patients,
    })
}

pub fn write_ground_truth_file(truth: &GroundTruth, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    write_ground_truth(truth, std::io::BufWriter::new(file))
}

pub fn read_ground_truth_file(path: &Path) -> Result<GroundTruth> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_ground_truth(std::io::BufReader::new(file))
}

// ---- ready-made cohorts ----

/// Uncorrelated cohort with randomly drawn per-code parameters.
pub fn random_cohort_config(
    n_patients: usize,
    n_codes: usize,
    n_numeric: usize,
    latent_dim: usize,
    window_range: (f64, f64),
    seed: u64,
) -> Result<GeneratorConfig> {
    if n_numeric > n_codes {
        return Err(Error::Config(format!(
            "numeric codes {n_numeric} exceed total codes {n_codes}"
        )));
    }
    let mut rng = crate::rng::stream(seed, "synth-code-params");
    let codes = (0..n_codes)
        .map(|i| {
            let numeric = i < n_numeric;
            CodeParams {
                code: if numeric {
                    format!("lab{i:02}")
                } else {
                    format!("evt{i:02}")
                },
                numeric,
                lambda0: rng.gen_range(0.05..0.6),
                rate_weights: (0..latent_dim).map(|_| rng.gen_range(-0.4..0.4)).collect(),
                value_mean0: rng.gen_range(-2.0..2.0),
                value_weights: (0..latent_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                value_sd: rng.gen_range(0.5..1.5),
            }
        })
        .collect();
    Ok(GeneratorConfig {
        n_patients,
        latent_dim,
        codes,
        window_range,
        seed,
    })
}

/// Cohort whose labels depend on a latent state that is expressed through
/// event values and timing, laid out so that objectives which model values
/// have strictly more label-relevant signal to learn from:
///
/// * code 0 (`evt00`, non-numeric, rare): rate driven by latent bit 0 -
///   the time-to-event and classification target.
/// * code 1 (`lab01`, numeric): value mean driven by bits 0 and 1, rate
///   constant - the regression target.
/// * codes 2..n_numeric: a numeric panel whose value means carry bits 0
///   and 1 - the only place bit 1 is expressed at all.
/// * remaining codes: constant-rate background noise.
pub fn directional_cohort_config(
    n_patients: usize,
    n_codes: usize,
    n_numeric: usize,
    seed: u64,
) -> Result<GeneratorConfig> {
    if n_codes < 4 || n_numeric < 3 || n_numeric + 1 > n_codes {
        return Err(Error::Config(
            "directional cohort needs >= 4 codes with >= 3 numeric and >= 1 non-numeric".into(),
        ));
    }
    let latent_dim = 2;
    let mut codes = Vec::with_capacity(n_codes);
    codes.push(CodeParams {
        code: "evt00".into(),
        numeric: false,
        lambda0: 0.012,
        rate_weights: vec![1.6, 0.0],
        value_mean0: 0.0,
        value_weights: vec![0.0, 0.0],
        value_sd: 1.0,
    });
    for i in 1..n_codes {
        let numeric = i <= n_numeric;
        if numeric {
            // alternate which latent bit dominates the value mean
            let (w0, w1) = if i == 1 {
                (2.0, 2.0)
            } else if i % 2 == 0 {
                (2.2, 0.0)
            } else {
                (0.0, 1.4)
            };
            codes.push(CodeParams {
                code: format!("lab{i:02}"),
                numeric: true,
                lambda0: if i == 1 { 0.22 } else { 0.09 },
                rate_weights: vec![0.0, 0.0],
                value_mean0: (i as f64) * 0.5,
                value_weights: vec![w0, w1],
                value_sd: if i == 1 { 1.6 } else { 1.0 },
            });
        } else {
            codes.push(CodeParams {
                code: format!("evt{i:02}"),
                numeric: false,
                lambda0: 0.05 + 0.02 * ((i % 5) as f64),
                rate_weights: vec![0.0, 0.0],
                value_mean0: 0.0,
                value_weights: vec![0.0, 0.0],
                value_sd: 1.0,
            });
        }
    }
    Ok(GeneratorConfig {
        n_patients,
        latent_dim,
        codes,
        window_range: (20.0, 30.0),
        seed,
    })
}
