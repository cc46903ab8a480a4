//! Subcommand implementations: the pieces the `ora` binary wires together.
//!
//! Every artifact is written next to a `.manifest` JSON recording the
//! command, a hash of the effective config, content hashes of the inputs,
//! and the seed, so reruns can be checked byte-for-byte. All randomness
//! flows from the run seed through named streams.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::autodiff::{adam_step, AdamConfig, AdamState, Tape};
use crate::config::RunConfig;
use crate::discretizer::{
    fit_bins, read_grid_file, write_grid_file, BinGrid, CodeSamples, FitConfig, DEFAULT_MIN_COUNT,
};
use crate::error::{Error, Result};
use crate::event_stream::{
    extract_all_targets, read_event_file, write_event_file, PatientRecord, TargetSet,
};
use crate::metrics::{
    auroc, bootstrap_se, mae, r2, read_metric_file, rmse, td_concordance, write_metric_file,
    MetricReport, DEFAULT_BOOTSTRAP_RESAMPLES,
};
use crate::model::{
    count_parameters, embed_events, read_checkpoint, write_checkpoint, BackboneConfig, EventInputs,
    Model,
};
use crate::objectives::{ntp_loss, ora_loss, tpp_loss, ObjectiveKind, Reduction};
use crate::probe::{
    extract_embeddings, fit_discrete_survival, fit_linear, fit_logistic, read_embeddings,
    read_predictions_file, read_probe_dataset, write_embeddings, write_predictions_file,
    write_probe_dataset, PredictionValues, Predictions, ProbeTask, DEFAULT_L2,
};
use crate::rng::{fnv1a, stream, stream_indexed};
use crate::synth::{
    directional_cohort_config, generate_cohort, random_cohort_config, task_labels,
    write_ground_truth_file, GroundTruth, ProbeExample, TaskKind, TaskLabel,
};
use crate::vocab::{build_vocabulary, compute_code_stats, read_vocab_file, write_vocab_file, Vocabulary};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

// ---- manifests ----

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: String,
    inputs: BTreeMap<String, String>,
    seed: u64,
    tool_version: &'a str,
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(format!("{:016x}", fnv1a(&bytes)))
}

pub fn write_manifest(
    artifact: &Path,
    command: &str,
    cfg: &RunConfig,
    seed: u64,
    inputs: &[(&str, &Path)],
) -> Result<()> {
    let mut input_hashes = BTreeMap::new();
    for (name, path) in inputs {
        input_hashes.insert(name.to_string(), hash_file(path)?);
    }
    let manifest = Manifest {
        command,
        config_hash: format!("{:016x}", fnv1a(cfg.canonical().as_bytes())),
        inputs: input_hashes,
        seed,
        tool_version: TOOL_VERSION,
    };
    let json = serde_json::to_string(&manifest).map_err(|e| Error::Validation(e.to_string()))?;
    let path = manifest_path(artifact);
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest");
    artifact.with_file_name(name)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    Ok(())
}

// ---- synth ----

fn parse_task_code(truth: &GroundTruth, name: &str) -> Result<usize> {
    truth
        .codes
        .iter()
        .position(|c| c.code == name)
        .ok_or_else(|| Error::Config(format!("task code {name:?} is not in the cohort")))
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<String> {
    let seed = cfg.get_u64("seed", 0)?;
    let n_patients = cfg.require_usize("n_patients")?;
    let n_codes = cfg.get_usize("n_codes", 16)?;
    let n_numeric = cfg.get_usize("n_numeric", n_codes / 2)?;
    let latent_dim = cfg.get_usize("latent_dim", 2)?;
    let window_lo = cfg.get_f64("window_lo", 24.0)?;
    let window_hi = cfg.get_f64("window_hi", 40.0)?;
    let generator = match cfg.get("profile").unwrap_or("random") {
        "random" => random_cohort_config(
            n_patients,
            n_codes,
            n_numeric,
            latent_dim,
            (window_lo, window_hi),
            seed,
        )?,
        "directional" => directional_cohort_config(n_patients, n_codes, n_numeric, seed)?,
        other => return Err(Error::Config(format!("unknown synth profile {other:?}"))),
    };
    let (records, truth) = generate_cohort(&generator)?;

    let events_path = cfg.require_path("events")?;
    ensure_parent(&events_path)?;
    write_event_file(&records, &events_path)?;
    write_manifest(&events_path, "synth", cfg, seed, &[])?;

    let truth_path = cfg.require_path("truth")?;
    ensure_parent(&truth_path)?;
    write_ground_truth_file(&truth, &truth_path)?;
    write_manifest(&truth_path, "synth", cfg, seed, &[])?;

    let mut task_files = 0;
    if let Some(dir) = cfg.path("tasks_out") {
        let fraction = cfg.get_f64("prediction_fraction", 0.5)?;
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let mut tasks: Vec<(String, TaskKind)> = Vec::new();
        if let Some(spec) = cfg.get("task_classification") {
            let (code, horizon) = spec.split_once(':').ok_or_else(|| {
                Error::Config("task_classification wants code:horizon".into())
            })?;
            let horizon: f64 = horizon
                .parse()
                .map_err(|_| Error::Config(format!("bad horizon {horizon:?}")))?;
            tasks.push((
                "classification".into(),
                TaskKind::Classification {
                    code: parse_task_code(&truth, code)?,
                    horizon,
                },
            ));
        }
        if let Some(code) = cfg.get("task_timetoevent") {
            tasks.push((
                "timetoevent".into(),
                TaskKind::TimeToEvent {
                    code: parse_task_code(&truth, code)?,
                },
            ));
        }
        if let Some(code) = cfg.get("task_regression") {
            tasks.push((
                "regression".into(),
                TaskKind::Regression {
                    code: parse_task_code(&truth, code)?,
                },
            ));
        }
        for (name, kind) in tasks {
            let labels = task_labels(&records, &truth, kind, fraction)?;
            let path = dir.join(format!("task-{name}.tsv"));
            let file =
                std::fs::File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
            write_probe_dataset(&labels, std::io::BufWriter::new(file))?;
            write_manifest(&path, "synth", cfg, seed, &[("events", events_path.as_path())])?;
            task_files += 1;
        }
    }
    Ok(format!(
        "wrote {} records, {} codes, {} task datasets",
        records.len(),
        truth.codes.len(),
        task_files
    ))
}

// ---- build-vocab ----

pub fn cmd_build_vocab(cfg: &RunConfig) -> Result<String> {
    let events_path = cfg.require_path("events")?;
    let outcome = read_event_file(&events_path)?;
    let ontology = match cfg.path("ontology") {
        Some(path) => {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            let mut map = std::collections::HashMap::new();
            for (idx, line) in text.lines().enumerate() {
                if line.is_empty() {
                    continue;
                }
                let (child, parent) = line.split_once('\t').ok_or(Error::Parse {
                    line: idx + 1,
                    message: "ontology wants child<TAB>parent".into(),
                })?;
                // first listed parent wins
                map.entry(child.to_string()).or_insert_with(|| parent.to_string());
            }
            Some(map)
        }
        None => None,
    };
    let stats = compute_code_stats(&outcome.records, ontology.as_ref())?;
    let k = cfg.require_usize("k")?;
    let use_ontology = cfg.get_bool("use_ontology", false)?;
    let built = build_vocabulary(&stats, k, use_ontology)?;
    let vocab_path = cfg.require_path("vocab")?;
    ensure_parent(&vocab_path)?;
    write_vocab_file(&built.vocabulary, &vocab_path)?;
    write_manifest(
        &vocab_path,
        "build-vocab",
        cfg,
        cfg.get_u64("seed", 0)?,
        &[("events", events_path.as_path())],
    )?;
    let mut note = format!("vocabulary of {} codes", built.vocabulary.len());
    if built.truncated {
        note.push_str(" (warning: corpus has fewer distinct codes than requested)");
    }
    Ok(note)
}

// ---- fit-bins ----

/// Observed first-occurrence samples per vocabulary code, pooled over all
/// anchor positions of all records.
fn collect_observed_samples(records: &[PatientRecord], vocab: &Vocabulary) -> Vec<CodeSamples> {
    let mut samples = vec![CodeSamples::default(); vocab.len()];
    let lookup = |code: &str| vocab.index_of(code);
    for record in records {
        for set in extract_all_targets(record, &lookup) {
            for obs in set.observed() {
                samples[obs.code].gaps.push(obs.delta_t);
                if let Some(v) = obs.value {
                    samples[obs.code].values.push(v);
                }
            }
        }
    }
    samples
}

pub fn cmd_fit_bins(cfg: &RunConfig) -> Result<String> {
    let events_path = cfg.require_path("events")?;
    let vocab_path = cfg.require_path("vocab")?;
    let records = read_event_file(&events_path)?.records;
    let vocab = read_vocab_file(&vocab_path)?;
    let fit_cfg = FitConfig {
        time_bins: cfg.get_usize("time_bins", 4)?,
        value_bins: cfg.get_usize("value_bins", 4)?,
        min_count: cfg.get_usize("min_count", DEFAULT_MIN_COUNT)?,
    };
    let samples = collect_observed_samples(&records, &vocab);
    let numeric: Vec<bool> = (0..vocab.len()).map(|i| vocab.is_numeric(i)).collect();
    let grids = fit_bins(&samples, &numeric, &fit_cfg)?;
    let grids_path = cfg.require_path("grids")?;
    ensure_parent(&grids_path)?;
    write_grid_file(&grids, &grids_path)?;
    write_manifest(
        &grids_path,
        "fit-bins",
        cfg,
        cfg.get_u64("seed", 0)?,
        &[
            ("events", events_path.as_path()),
            ("vocab", vocab_path.as_path()),
        ],
    )?;
    Ok(format!("fit {} grids", grids.len()))
}

// ---- pretrain ----

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub objective: ObjectiveKind,
    pub backbone: BackboneConfig,
    pub lr: f64,
    pub batch_positions: usize,
    pub steps: usize,
    pub seed: u64,
}

pub struct TrainedModel {
    pub model: Model,
    pub log: Vec<String>,
    /// Sequences clipped to the context window during batch preparation.
    pub truncated_sequences: u64,
}

struct WorkingRecord {
    inputs: EventInputs,
    targets: Vec<TargetSet>,
    ntp_labels: Vec<Option<usize>>,
}

fn prepare_records(
    records: &[PatientRecord],
    vocab: &Vocabulary,
    grids: &[BinGrid],
    backbone: &BackboneConfig,
) -> (Vec<WorkingRecord>, u64) {
    let lookup = |code: &str| vocab.index_of(code);
    let mut truncated = 0u64;
    let working = records
        .iter()
        .filter(|r| !r.is_empty())
        .map(|record| {
            let inputs = embed_events(record, vocab, grids, backbone);
            if inputs.truncated {
                truncated += 1;
            }
            // targets and next-code labels live on the kept suffix; its
            // futures are intact because truncation drops old history only
            let kept = PatientRecord {
                patient_id: record.patient_id.clone(),
                events: record.events[inputs.offset..].to_vec(),
            };
            let targets = extract_all_targets(&kept, &lookup);
            let ntp_labels = (0..kept.events.len())
                .map(|j| {
                    kept.events
                        .get(j + 1)
                        .and_then(|next| vocab.index_of(&next.code))
                })
                .collect();
            WorkingRecord {
                inputs,
                targets,
                ntp_labels,
            }
        })
        .collect();
    (working, truncated)
}

fn validate_grids(grids: &[BinGrid], vocab: &Vocabulary, backbone: &BackboneConfig) -> Result<()> {
    if grids.len() != vocab.len() {
        return Err(Error::Config(format!(
            "{} grids for a vocabulary of {}",
            grids.len(),
            vocab.len()
        )));
    }
    for grid in grids {
        if grid.time_edges.len() + 1 > backbone.time_bins {
            return Err(Error::Config(format!(
                "grid {} has {} time bins but the model has {}",
                grid.code,
                grid.time_edges.len() + 1,
                backbone.time_bins
            )));
        }
        if let Some(edges) = &grid.value_edges {
            if edges.len() + 1 > backbone.value_bins {
                return Err(Error::Config(format!(
                    "grid {} has {} value bins but the model has {}",
                    grid.code,
                    edges.len() + 1,
                    backbone.value_bins
                )));
            }
        }
    }
    Ok(())
}

/// Train a model from scratch. Deterministic given (records, vocab, grids,
/// settings): batches are drawn from per-step derived streams and the
/// whole step runs on one tape.
pub fn pretrain(
    records: &[PatientRecord],
    vocab: &Vocabulary,
    grids: &[BinGrid],
    settings: &TrainSettings,
) -> Result<TrainedModel> {
    validate_grids(grids, vocab, &settings.backbone)?;
    let (working, truncated_sequences) = prepare_records(records, vocab, grids, &settings.backbone);
    if working.is_empty() {
        return Err(Error::Validation("no non-empty records to train on".into()));
    }

    // per-record anchor pools: every position for the censored objectives,
    // positions with an in-vocabulary next code for next-token prediction
    let pools: Vec<Vec<u32>> = working
        .iter()
        .map(|w| {
            (0..w.inputs.len() as u32)
                .filter(|&pos| match settings.objective {
                    ObjectiveKind::Ntp => w.ntp_labels[pos as usize].is_some(),
                    _ => true,
                })
                .collect()
        })
        .collect();
    let usable: Vec<usize> = (0..working.len()).filter(|&ri| !pools[ri].is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::Validation("no usable anchor positions".into()));
    }

    let mut model = Model::new(settings.backbone, settings.objective, vocab, settings.seed)?;
    let mut adam = AdamState::for_params(model.params());
    let mut log = Vec::with_capacity(settings.steps + 1);
    let counts = count_parameters(
        &settings.backbone,
        vocab.numeric_count(),
        vocab.len() - vocab.numeric_count(),
    );
    log.push(format!(
        "params objective={} total={} head_factorized={} head_direct={}",
        settings.objective,
        model.total_parameters(),
        counts.factorized,
        counts.direct
    ));

    for step in 0..settings.steps {
        // record-major batching: draw whole records and use their anchor
        // positions until the batch is full, so a step touches a handful
        // of sequences instead of scattering one forward pass per anchor
        let mut rng = stream_indexed(settings.seed, "train-batch", step as u64);
        let mut by_record: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        let mut remaining = settings.batch_positions;
        while remaining > 0 && by_record.len() < usable.len() {
            let ri = usable[rng.gen_range(0..usable.len())] as u32;
            if by_record.contains_key(&ri) {
                continue;
            }
            let pool = &pools[ri as usize];
            let positions: Vec<u32> = if pool.len() <= remaining {
                pool.clone()
            } else {
                let mut scratch = pool.clone();
                let (chosen, _) = scratch.partial_shuffle(&mut rng, remaining);
                let mut chosen = chosen.to_vec();
                chosen.sort_unstable();
                chosen
            };
            remaining -= positions.len();
            by_record.insert(ri, positions);
        }

        let mut tape = Tape::new();
        let pass = model.begin(&mut tape);
        let mut anchor_blocks = Vec::with_capacity(by_record.len());
        let mut batch_targets: Vec<&TargetSet> = Vec::with_capacity(settings.batch_positions);
        let mut batch_labels: Vec<usize> = Vec::with_capacity(settings.batch_positions);
        for (&ri, positions) in &by_record {
            let w = &working[ri as usize];
            let encoded = pass.encode(&mut tape, &w.inputs)?;
            let rows: Vec<usize> = positions.iter().map(|&p| p as usize).collect();
            anchor_blocks.push(tape.gather_rows(encoded, &rows)?);
            for &p in positions {
                match settings.objective {
                    ObjectiveKind::Ntp => {
                        batch_labels.push(w.ntp_labels[p as usize].expect("pooled label"));
                    }
                    _ => batch_targets.push(&w.targets[p as usize]),
                }
            }
        }
        let anchors = tape.concat_rows(&anchor_blocks)?;

        let batch = match settings.objective {
            ObjectiveKind::Ntp => {
                let logits = pass.ntp_logits(&mut tape, anchors)?;
                ntp_loss(&mut tape, logits, &batch_labels, Reduction::Mean)?
            }
            ObjectiveKind::Tpp => {
                let heads = pass.code_heads(&mut tape, anchors)?;
                tpp_loss(&mut tape, &heads, &batch_targets, grids, Reduction::Mean)?
            }
            ObjectiveKind::Ora => {
                let heads = pass.code_heads(&mut tape, anchors)?;
                ora_loss(&mut tape, &heads, &batch_targets, grids, Reduction::Mean)?
            }
        };
        let grads = tape.backward(batch.loss)?;
        let grad_refs: Vec<Option<&crate::autodiff::Tensor>> = pass
            .param_ids()
            .iter()
            .map(|&id| grads.get(id))
            .collect();
        // cosine decay to a tenth of the base rate sharpens the plateau
        let progress = step as f64 / settings.steps.max(1) as f64;
        let lr = settings.lr * (0.55 + 0.45 * (std::f64::consts::PI * progress).cos());
        adam_step(model.params_mut(), &grad_refs, &mut adam, &AdamConfig::with_lr(lr))?;

        log.push(format!(
            "step={} objective={} loss={} observed={} censored={} clamped={}",
            step + 1,
            settings.objective,
            batch.value,
            batch.observed_terms,
            batch.censored_terms,
            batch.clamped_terms
        ));
    }

    Ok(TrainedModel {
        model,
        log,
        truncated_sequences,
    })
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<String> {
    let events_path = cfg.require_path("events")?;
    let vocab_path = cfg.require_path("vocab")?;
    let grids_path = cfg.require_path("grids")?;
    let records = read_event_file(&events_path)?.records;
    let vocab = read_vocab_file(&vocab_path)?;
    let backbone = cfg.backbone(false)?;
    let grids = read_grid_file(&grids_path, backbone.time_bins, backbone.value_bins)?;
    let settings = TrainSettings {
        objective: cfg.objective()?,
        backbone,
        lr: cfg.get_f64("lr", 1e-3)?,
        batch_positions: cfg.get_usize("batch_positions", 256)?,
        steps: cfg.require_usize("steps")?,
        seed: cfg.get_u64("seed", 0)?,
    };
    let trained = pretrain(&records, &vocab, &grids, &settings)?;

    let out_dir = cfg.require_path("out")?;
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let ckpt_path = out_dir.join("checkpoint.bin");
    write_checkpoint(&trained.model, &ckpt_path)?;
    let log_path = out_dir.join("train.log");
    let mut log_file = std::fs::File::create(&log_path)
        .map_err(|e| Error::io(log_path.display().to_string(), e))?;
    for line in &trained.log {
        writeln!(log_file, "{line}").map_err(|e| Error::io(log_path.display().to_string(), e))?;
    }
    let inputs = [
        ("events", events_path.as_path()),
        ("vocab", vocab_path.as_path()),
        ("grids", grids_path.as_path()),
    ];
    write_manifest(&ckpt_path, "pretrain", cfg, settings.seed, &inputs)?;
    write_manifest(&log_path, "pretrain", cfg, settings.seed, &inputs)?;
    let last = trained.log.last().cloned().unwrap_or_default();
    Ok(format!(
        "trained {} steps ({} truncated sequences); {last}",
        settings.steps, trained.truncated_sequences
    ))
}

// ---- embed ----

pub fn cmd_embed(cfg: &RunConfig) -> Result<String> {
    let events_path = cfg.require_path("events")?;
    let vocab_path = cfg.require_path("vocab")?;
    let grids_path = cfg.require_path("grids")?;
    let ckpt_path = cfg.require_path("checkpoint")?;
    let dataset_path = cfg.require_path("dataset")?;
    let task: ProbeTask = cfg.require("task")?.parse()?;

    let records = read_event_file(&events_path)?.records;
    let vocab = read_vocab_file(&vocab_path)?;
    let backbone = cfg.backbone(false)?;
    let grids = read_grid_file(&grids_path, backbone.time_bins, backbone.value_bins)?;
    let model = read_checkpoint(&ckpt_path, backbone, cfg.objective()?, &vocab)?;

    let dataset_file = std::fs::File::open(&dataset_path)
        .map_err(|e| Error::io(dataset_path.display().to_string(), e))?;
    let examples = read_probe_dataset(std::io::BufReader::new(dataset_file), task)?;

    let by_id: BTreeMap<&str, &PatientRecord> = records
        .iter()
        .map(|r| (r.patient_id.as_str(), r))
        .collect();
    let wanted: Vec<(&PatientRecord, f64)> = examples
        .iter()
        .map(|e| {
            by_id
                .get(e.patient_id.as_str())
                .map(|&r| (r, e.prediction_time))
                .ok_or_else(|| {
                    Error::Validation(format!("dataset patient {} not in events", e.patient_id))
                })
        })
        .collect::<Result<_>>()?;
    let features = extract_embeddings(&model, &vocab, &grids, &wanted)?;

    let out_path = cfg.require_path("embeddings")?;
    ensure_parent(&out_path)?;
    let ids: Vec<String> = examples.iter().map(|e| e.patient_id.clone()).collect();
    let file =
        std::fs::File::create(&out_path).map_err(|e| Error::io(out_path.display().to_string(), e))?;
    write_embeddings(&ids, &features, std::io::BufWriter::new(file))?;
    write_manifest(
        &out_path,
        "embed",
        cfg,
        cfg.get_u64("seed", 0)?,
        &[
            ("events", events_path.as_path()),
            ("vocab", vocab_path.as_path()),
            ("grids", grids_path.as_path()),
            ("checkpoint", ckpt_path.as_path()),
            ("dataset", dataset_path.as_path()),
        ],
    )?;
    Ok(format!("embedded {} examples", features.len()))
}

// ---- probe ----

fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, "probe-split"));
    let cut = ((n as f64) * fraction).round() as usize;
    let cut = cut.clamp(1, n.saturating_sub(1).max(1));
    let mut train: Vec<usize> = order[..cut].to_vec();
    let mut eval: Vec<usize> = order[cut..].to_vec();
    train.sort_unstable();
    eval.sort_unstable();
    (train, eval)
}

pub fn cmd_probe(cfg: &RunConfig) -> Result<String> {
    let emb_path = cfg.require_path("embeddings")?;
    let dataset_path = cfg.require_path("dataset")?;
    let task: ProbeTask = cfg.require("task")?.parse()?;
    let seed = cfg.get_u64("seed", 0)?;

    let emb_file =
        std::fs::File::open(&emb_path).map_err(|e| Error::io(emb_path.display().to_string(), e))?;
    let (ids, features) = read_embeddings(std::io::BufReader::new(emb_file))?;
    let dataset_file = std::fs::File::open(&dataset_path)
        .map_err(|e| Error::io(dataset_path.display().to_string(), e))?;
    let examples = read_probe_dataset(std::io::BufReader::new(dataset_file), task)?;
    if ids.len() != examples.len() {
        return Err(Error::Validation(format!(
            "{} embeddings vs {} dataset rows",
            ids.len(),
            examples.len()
        )));
    }
    for (pid, e) in ids.iter().zip(&examples) {
        if pid != &e.patient_id {
            return Err(Error::Validation(format!(
                "embedding row for {pid} does not match dataset row for {}",
                e.patient_id
            )));
        }
    }

    let fraction = cfg.get_f64("split_fraction", 0.5)?;
    if !(0.0..1.0).contains(&fraction) || examples.len() < 2 {
        return Err(Error::Config("split_fraction must be in [0,1) with >= 2 examples".into()));
    }
    let (train_idx, eval_idx) = split_indices(examples.len(), fraction, seed);
    let take = |idx: &[usize]| -> Vec<Vec<f64>> { idx.iter().map(|&i| features[i].clone()).collect() };
    let train_x = take(&train_idx);
    let eval_x = take(&eval_idx);
    let eval_ids: Vec<String> = eval_idx.iter().map(|&i| ids[i].clone()).collect();
    let l2 = cfg.get_f64("l2", DEFAULT_L2)?;

    let values = match task {
        ProbeTask::Binary => {
            let labels: Vec<bool> = train_idx
                .iter()
                .map(|&i| match examples[i].label {
                    TaskLabel::Binary(b) => b,
                    _ => unreachable!("parsed as binary"),
                })
                .collect();
            let max_iter = cfg.get_usize("max_iter", 500)?;
            let head = fit_logistic(&train_x, &labels, l2, max_iter)?;
            PredictionValues::Scores(head.scores(&eval_x))
        }
        ProbeTask::Regression => {
            let targets: Vec<f64> = train_idx
                .iter()
                .map(|&i| match examples[i].label {
                    TaskLabel::Real(v) => v,
                    _ => unreachable!("parsed as regression"),
                })
                .collect();
            let head = fit_linear(&train_x, &targets, l2)?;
            PredictionValues::Scores(head.predict(&eval_x))
        }
        ProbeTask::Survival => {
            let (durations, observed): (Vec<f64>, Vec<bool>) = train_idx
                .iter()
                .map(|&i| match examples[i].label {
                    TaskLabel::Survival { duration, observed } => (duration, observed),
                    _ => unreachable!("parsed as survival"),
                })
                .unzip();
            let bins = cfg.get_usize("survival_bins", 4)?;
            let max_iter = cfg.get_usize("max_iter", 2000)?;
            let head = fit_discrete_survival(&train_x, &durations, &observed, bins, max_iter)?;
            PredictionValues::Curves {
                edges: head.edges.clone(),
                curves: head.survival_curves(&eval_x),
            }
        }
    };

    let out_path = cfg.require_path("predictions")?;
    ensure_parent(&out_path)?;
    write_predictions_file(
        &Predictions {
            patient_ids: eval_ids.clone(),
            values,
        },
        &out_path,
    )?;
    write_manifest(
        &out_path,
        "probe",
        cfg,
        seed,
        &[
            ("embeddings", emb_path.as_path()),
            ("dataset", dataset_path.as_path()),
        ],
    )?;
    Ok(format!(
        "fit {task} probe on {} examples, scored {}",
        train_idx.len(),
        eval_ids.len()
    ))
}

// ---- evaluate ----

fn join_examples<'a>(
    predictions_ids: &[String],
    examples: &'a [ProbeExample],
) -> Result<Vec<&'a ProbeExample>> {
    let by_id: BTreeMap<&str, &ProbeExample> = examples
        .iter()
        .map(|e| (e.patient_id.as_str(), e))
        .collect();
    if by_id.len() != examples.len() {
        return Err(Error::Validation("duplicate patient ids in dataset".into()));
    }
    predictions_ids
        .iter()
        .map(|pid| {
            by_id
                .get(pid.as_str())
                .copied()
                .ok_or_else(|| Error::Validation(format!("prediction for unknown patient {pid}")))
        })
        .collect()
}

pub fn evaluate_predictions(
    predictions: &Predictions,
    examples: &[ProbeExample],
    task: ProbeTask,
    task_name: &str,
    resamples: usize,
    seed: u64,
) -> Result<Vec<MetricReport>> {
    let joined = join_examples(&predictions.patient_ids, examples)?;
    let n = joined.len();
    let mut reports = Vec::new();
    match (&predictions.values, task) {
        (PredictionValues::Scores(scores), ProbeTask::Binary) => {
            let labels: Vec<bool> = joined
                .iter()
                .map(|e| match e.label {
                    TaskLabel::Binary(b) => b,
                    _ => unreachable!(),
                })
                .collect();
            let estimate = auroc(scores, &labels)?;
            let boot = bootstrap_se(n, resamples, seed, |idx| {
                let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
                let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
                auroc(&s, &l)
            })?;
            reports.push(MetricReport {
                task: task_name.into(),
                metric: "auroc".into(),
                estimate,
                se: boot.se,
                n,
            });
        }
        (PredictionValues::Scores(scores), ProbeTask::Regression) => {
            let truths: Vec<f64> = joined
                .iter()
                .map(|e| match e.label {
                    TaskLabel::Real(v) => v,
                    _ => unreachable!(),
                })
                .collect();
            for (name, f) in [
                ("r2", r2 as fn(&[f64], &[f64]) -> Result<f64>),
                ("rmse", rmse as fn(&[f64], &[f64]) -> Result<f64>),
                ("mae", mae as fn(&[f64], &[f64]) -> Result<f64>),
            ] {
                let estimate = f(scores, &truths)?;
                let boot = bootstrap_se(n, resamples, seed, |idx| {
                    let p: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
                    let t: Vec<f64> = idx.iter().map(|&i| truths[i]).collect();
                    f(&p, &t)
                })?;
                reports.push(MetricReport {
                    task: task_name.into(),
                    metric: name.into(),
                    estimate,
                    se: boot.se,
                    n,
                });
            }
        }
        (PredictionValues::Curves { edges, curves }, ProbeTask::Survival) => {
            let (durations, observed): (Vec<f64>, Vec<bool>) = joined
                .iter()
                .map(|e| match e.label {
                    TaskLabel::Survival { duration, observed } => (duration, observed),
                    _ => unreachable!(),
                })
                .unzip();
            let estimate = td_concordance(curves, edges, &durations, &observed)?;
            let boot = bootstrap_se(n, resamples, seed, |idx| {
                let c: Vec<Vec<f64>> = idx.iter().map(|&i| curves[i].clone()).collect();
                let d: Vec<f64> = idx.iter().map(|&i| durations[i]).collect();
                let o: Vec<bool> = idx.iter().map(|&i| observed[i]).collect();
                td_concordance(&c, edges, &d, &o)
            })?;
            reports.push(MetricReport {
                task: task_name.into(),
                metric: "td_concordance".into(),
                estimate,
                se: boot.se,
                n,
            });
        }
        _ => {
            return Err(Error::Validation(
                "prediction file does not match the task kind".into(),
            ))
        }
    }
    Ok(reports)
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<String> {
    let pred_path = cfg.require_path("predictions")?;
    let dataset_path = cfg.require_path("dataset")?;
    let task: ProbeTask = cfg.require("task")?.parse()?;
    let task_name = cfg.get("task_name").unwrap_or("task").to_string();
    let resamples = cfg.get_usize("bootstrap", DEFAULT_BOOTSTRAP_RESAMPLES)?;
    let seed = cfg.get_u64("seed", 0)?;

    let predictions = read_predictions_file(&pred_path, task)?;
    let dataset_file = std::fs::File::open(&dataset_path)
        .map_err(|e| Error::io(dataset_path.display().to_string(), e))?;
    let examples = read_probe_dataset(std::io::BufReader::new(dataset_file), task)?;
    let reports = evaluate_predictions(&predictions, &examples, task, &task_name, resamples, seed)?;

    let out_path = cfg.require_path("metrics")?;
    ensure_parent(&out_path)?;
    write_metric_file(&reports, &out_path)?;
    write_manifest(
        &out_path,
        "evaluate",
        cfg,
        seed,
        &[
            ("predictions", pred_path.as_path()),
            ("dataset", dataset_path.as_path()),
        ],
    )?;
    Ok(format!("{} metric rows", reports.len()))
}

// ---- report ----

/// Relative improvement of each objective over the next-token baseline,
/// as a percentage of the baseline's magnitude.
pub fn relative_improvement(baseline: f64, value: f64) -> Result<f64> {
    if baseline == 0.0 {
        return Err(Error::Metric("baseline metric is zero".into()));
    }
    Ok((value - baseline) / baseline.abs() * 100.0)
}

pub fn cmd_report(cfg: &RunConfig) -> Result<String> {
    let ntp_path = cfg.require_path("metrics_ntp")?;
    let tpp_path = cfg.require_path("metrics_tpp")?;
    let ora_path = cfg.require_path("metrics_ora")?;
    let index = |path: &Path| -> Result<BTreeMap<(String, String), f64>> {
        Ok(read_metric_file(path)?
            .into_iter()
            .map(|r| ((r.task, r.metric), r.estimate))
            .collect())
    };
    let ntp = index(&ntp_path)?;
    let tpp = index(&tpp_path)?;
    let ora = index(&ora_path)?;
    if ntp.keys().ne(tpp.keys()) || ntp.keys().ne(ora.keys()) {
        return Err(Error::Validation(
            "metric files do not cover the same (task, metric) set".into(),
        ));
    }
    let out_path = cfg.require_path("out")?;
    ensure_parent(&out_path)?;
    let mut out = String::new();
    out.push_str("task\tmetric\tntp\ttpp\tora\ttpp_vs_ntp_pct\tora_vs_ntp_pct\n");
    for ((task, metric), &base) in &ntp {
        let t = tpp[&(task.clone(), metric.clone())];
        let o = ora[&(task.clone(), metric.clone())];
        out.push_str(&format!(
            "{task}\t{metric}\t{base}\t{t}\t{o}\t{:+.2}\t{:+.2}\n",
            relative_improvement(base, t)?,
            relative_improvement(base, o)?,
        ));
    }
    std::fs::write(&out_path, out).map_err(|e| Error::io(out_path.display().to_string(), e))?;
    write_manifest(
        &out_path,
        "report",
        cfg,
        cfg.get_u64("seed", 0)?,
        &[
            ("metrics_ntp", ntp_path.as_path()),
            ("metrics_tpp", tpp_path.as_path()),
            ("metrics_ora", ora_path.as_path()),
        ],
    )?;
    Ok(format!("compared {} rows", ntp.len()))
}

// ---- params ----

pub fn cmd_params(cfg: &RunConfig) -> Result<String> {
    let backbone = cfg.backbone(true)?;
    let n_numeric = cfg.get_usize("params_numeric", 3500)?;
    let n_nonnumeric = cfg.get_usize("params_nonnumeric", 3500)?;
    let counts = count_parameters(&backbone, n_numeric, n_nonnumeric);
    Ok(format!(
        "factorized={} direct={} reduction_ratio={:.4}",
        counts.factorized, counts.direct, counts.reduction_ratio
    ))
}
