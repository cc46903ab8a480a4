//! Scratch harness for tuning the directional-fixture training settings.
//! Run manually: cargo test -p ora-core --test calibration --release -- --ignored --nocapture

use std::collections::BTreeMap;
use std::time::Instant;

use ora_core::discretizer::{fit_bins, BinGrid, CodeSamples, FitConfig};
use ora_core::event_stream::{extract_all_targets, PatientRecord};
use ora_core::metrics::{auroc, bootstrap_se, r2, td_concordance};
use ora_core::model::BackboneConfig;
use ora_core::objectives::ObjectiveKind;
use ora_core::pipeline::{pretrain, TrainSettings};
use ora_core::probe::{extract_embeddings, fit_discrete_survival, fit_linear, fit_logistic};
use ora_core::rng::stream;
use ora_core::synth::{directional_cohort_config, generate_cohort, task_labels, TaskKind, TaskLabel};
use ora_core::vocab::{build_vocabulary, compute_code_stats, Vocabulary};
use rand::seq::SliceRandom;

const MAX_EXAMPLES: usize = 2500;

struct Cohort {
    vocab: Vocabulary,
    grids: Vec<BinGrid>,
    records: Vec<PatientRecord>,
    /// per patient: prediction time (all tasks anchor at half the window)
    anchors: BTreeMap<String, f64>,
    class_examples: Vec<(String, bool)>,
    tte_examples: Vec<(String, f64, bool)>,
    reg_examples: Vec<(String, f64)>,
}

fn observed_samples(records: &[PatientRecord], vocab: &Vocabulary) -> Vec<CodeSamples> {
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

fn build_cohort(seed: u64, n_patients: usize) -> Cohort {
    let cfg = directional_cohort_config(n_patients, 16, 8, seed).unwrap();
    let (records, truth) = generate_cohort(&cfg).unwrap();
    let stats = compute_code_stats(&records, None).unwrap();
    let vocab = build_vocabulary(&stats, 16, false).unwrap().vocabulary;
    let samples = observed_samples(&records, &vocab);
    let numeric: Vec<bool> = (0..vocab.len()).map(|i| vocab.is_numeric(i)).collect();
    let grids = fit_bins(
        &samples,
        &numeric,
        &FitConfig { time_bins: 4, value_bins: 4, min_count: 50 },
    )
    .unwrap();

    let class = task_labels(&records, &truth, TaskKind::Classification { code: 0, horizon: 6.0 }, 0.5).unwrap();
    let tte = task_labels(&records, &truth, TaskKind::TimeToEvent { code: 0 }, 0.5).unwrap();
    let reg = task_labels(&records, &truth, TaskKind::Regression { code: 1 }, 0.5).unwrap();

    let mut anchors: BTreeMap<String, f64> = BTreeMap::new();
    for e in class.iter().chain(tte.iter()).chain(reg.iter()) {
        anchors.insert(e.patient_id.clone(), e.prediction_time);
    }

    let mut class_examples: Vec<(String, bool)> = class
        .into_iter()
        .map(|e| match e.label {
            TaskLabel::Binary(b) => (e.patient_id, b),
            _ => unreachable!(),
        })
        .collect();
    let mut tte_examples: Vec<(String, f64, bool)> = tte
        .into_iter()
        .map(|e| match e.label {
            TaskLabel::Survival { duration, observed } => (e.patient_id, duration, observed),
            _ => unreachable!(),
        })
        .collect();
    let mut reg_examples: Vec<(String, f64)> = reg
        .into_iter()
        .map(|e| match e.label {
            TaskLabel::Real(v) => (e.patient_id, v),
            _ => unreachable!(),
        })
        .collect();
    class_examples.truncate(MAX_EXAMPLES);
    tte_examples.truncate(MAX_EXAMPLES);
    reg_examples.truncate(MAX_EXAMPLES);

    Cohort { vocab, grids, records, anchors, class_examples, tte_examples, reg_examples }
}

struct TaskMetrics {
    auroc: (f64, f64),
    cindex: (f64, f64),
    r2: (f64, f64),
}

fn split<T: Clone>(items: &[T], seed: u64) -> (Vec<T>, Vec<T>) {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut stream(seed, "probe-split"));
    let cut = items.len() / 2;
    let train = order[..cut].iter().map(|&i| items[i].clone()).collect();
    let eval = order[cut..].iter().map(|&i| items[i].clone()).collect();
    (train, eval)
}

fn eval_objective(
    cohort: &Cohort,
    objective: ObjectiveKind,
    steps: usize,
    lr: f64,
    seed: u64,
) -> TaskMetrics {
    let backbone = BackboneConfig::desk();
    let settings = TrainSettings {
        objective,
        backbone,
        lr,
        batch_positions: 256,
        steps,
        seed,
    };
    let t0 = Instant::now();
    let trained = pretrain(&cohort.records, &cohort.vocab, &cohort.grids, &settings).unwrap();
    let t_train = t0.elapsed().as_secs_f64();
    if trained.log.len() > 3 {
        let mid = trained.log.len() / 2;
        eprintln!("    loss: {} | {} | {}", &trained.log[1], &trained.log[mid], trained.log.last().unwrap());
    }

    // one embedding per patient, shared across tasks
    let t0 = Instant::now();
    let by_id: BTreeMap<&str, &PatientRecord> =
        cohort.records.iter().map(|r| (r.patient_id.as_str(), r)).collect();
    let needed: Vec<&String> = {
        let mut set: std::collections::BTreeSet<&String> = Default::default();
        for (pid, _) in &cohort.class_examples { set.insert(pid); }
        for (pid, _, _) in &cohort.tte_examples { set.insert(pid); }
        for (pid, _) in &cohort.reg_examples { set.insert(pid); }
        set.into_iter().collect()
    };
    let wanted: Vec<(&PatientRecord, f64)> = needed
        .iter()
        .map(|pid| (by_id[pid.as_str()], cohort.anchors[pid.as_str()]))
        .collect();
    let rows = extract_embeddings(&trained.model, &cohort.vocab, &cohort.grids, &wanted).unwrap();
    let features: BTreeMap<&String, &Vec<f64>> = needed.iter().copied().zip(rows.iter()).collect();
    let t_embed = t0.elapsed().as_secs_f64();

    // classification
    let (train, eval) = split(&cohort.class_examples, seed);
    let fx = |pid: &String| features[pid].clone();
    let head = fit_logistic(
        &train.iter().map(|(p, _)| fx(p)).collect::<Vec<_>>(),
        &train.iter().map(|&(_, b)| b).collect::<Vec<_>>(),
        1e-4,
        500,
    )
    .unwrap();
    let scores = head.scores(&eval.iter().map(|(p, _)| fx(p)).collect::<Vec<_>>());
    let labels: Vec<bool> = eval.iter().map(|&(_, b)| b).collect();
    let auc = auroc(&scores, &labels).unwrap();
    let auc_se = bootstrap_se(labels.len(), 200, seed, |idx| {
        auroc(
            &idx.iter().map(|&i| scores[i]).collect::<Vec<_>>(),
            &idx.iter().map(|&i| labels[i]).collect::<Vec<_>>(),
        )
    })
    .unwrap()
    .se;

    // time-to-event
    let (train, eval) = split(&cohort.tte_examples, seed);
    let head = fit_discrete_survival(
        &train.iter().map(|(p, _, _)| fx(p)).collect::<Vec<_>>(),
        &train.iter().map(|&(_, d, _)| d).collect::<Vec<_>>(),
        &train.iter().map(|&(_, _, o)| o).collect::<Vec<_>>(),
        4,
        2000,
    )
    .unwrap();
    let curves = head.survival_curves(&eval.iter().map(|(p, _, _)| fx(p)).collect::<Vec<_>>());
    let durations: Vec<f64> = eval.iter().map(|&(_, d, _)| d).collect();
    let observed: Vec<bool> = eval.iter().map(|&(_, _, o)| o).collect();
    let cindex = td_concordance(&curves, &head.edges, &durations, &observed).unwrap();
    let cindex_se = bootstrap_se(durations.len(), 200, seed, |idx| {
        td_concordance(
            &idx.iter().map(|&i| curves[i].clone()).collect::<Vec<_>>(),
            &head.edges,
            &idx.iter().map(|&i| durations[i]).collect::<Vec<_>>(),
            &idx.iter().map(|&i| observed[i]).collect::<Vec<_>>(),
        )
    })
    .unwrap()
    .se;

    // regression
    let (train, eval) = split(&cohort.reg_examples, seed);
    let head = fit_linear(
        &train.iter().map(|(p, _)| fx(p)).collect::<Vec<_>>(),
        &train.iter().map(|&(_, v)| v).collect::<Vec<_>>(),
        1e-4,
    )
    .unwrap();
    let preds = head.predict(&eval.iter().map(|(p, _)| fx(p)).collect::<Vec<_>>());
    let truths: Vec<f64> = eval.iter().map(|&(_, v)| v).collect();
    let r2v = r2(&preds, &truths).unwrap();
    let r2_se = bootstrap_se(truths.len(), 200, seed, |idx| {
        r2(
            &idx.iter().map(|&i| preds[i]).collect::<Vec<_>>(),
            &idx.iter().map(|&i| truths[i]).collect::<Vec<_>>(),
        )
    })
    .unwrap()
    .se;

    eprintln!(
        "  {objective}: train {t_train:.1}s embed {t_embed:.1}s | auroc {auc:.3}({auc_se:.3}) cindex {cindex:.3}({cindex_se:.3}) r2 {r2v:.3}({r2_se:.3})"
    );
    TaskMetrics {
        auroc: (auc, auc_se),
        cindex: (cindex, cindex_se),
        r2: (r2v, r2_se),
    }
}

#[test]
#[ignore]
fn calibrate_directional() {
    let n_patients: usize = std::env::var("CAL_N").ok().and_then(|v| v.parse().ok()).unwrap_or(2000);
    let steps: usize = std::env::var("CAL_STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(150);
    let lr: f64 = std::env::var("CAL_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(0.003);
    let seeds: Vec<u64> = std::env::var("CAL_SEEDS")
        .unwrap_or_else(|_| "101".into())
        .split(',')
        .map(|s| s.parse().unwrap())
        .collect();

    for &seed in &seeds {
        let t0 = Instant::now();
        let cohort = build_cohort(seed, n_patients);
        eprintln!(
            "seed {seed}: cohort built in {:.1}s ({} records, {} class/{} tte/{} reg examples)",
            t0.elapsed().as_secs_f64(),
            cohort.records.len(),
            cohort.class_examples.len(),
            cohort.tte_examples.len(),
            cohort.reg_examples.len()
        );
        for objective in [ObjectiveKind::Ntp, ObjectiveKind::Tpp, ObjectiveKind::Ora] {
            eval_objective(&cohort, objective, steps, lr, seed);
        }
    }
}
