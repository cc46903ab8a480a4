//! Evaluation metrics with bootstrap standard errors: AUROC, the
//! time-dependent concordance of survival curves, and regression scores.
//!
//! AUROC uses midranks (ties credit half a win) and agrees exactly with
//! pairwise enumeration. The time-dependent concordance is defined by its
//! quadratic pair scan: a pair with the earlier event observed is
//! concordant when the earlier example's curve is lower at the bin holding
//! its own event time.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::stream_indexed;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub task: String,
    pub metric: String,
    pub estimate: f64,
    pub se: f64,
    pub n: usize,
}

/// Mann-Whitney AUROC via midranks; ties between classes count 0.5.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Metric("auroc needs both classes present".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric("auroc scores must be finite".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // midranks over tied groups; ranks are 1-based
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1 ..= j
        for &idx in &order[i..j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Time-dependent concordance over discrete survival curves. `edges` are
/// the interior duration-bin edges the curves were fit on; a pair is
/// comparable when the earlier duration belongs to an observed event.
pub fn td_concordance(
    curves: &[Vec<f64>],
    edges: &[f64],
    durations: &[f64],
    observed: &[bool],
) -> Result<f64> {
    let n = curves.len();
    if durations.len() != n || observed.len() != n {
        return Err(Error::Metric("curve/duration/indicator lengths differ".into()));
    }
    let mut concordant = 0.0;
    let mut comparable = 0usize;
    for i in 0..n {
        if !observed[i] {
            continue;
        }
        let bin = edges.partition_point(|&e| e <= durations[i]);
        for j in 0..n {
            if durations[i] < durations[j] {
                comparable += 1;
                let si = curves[i][bin.min(curves[i].len() - 1)];
                let sj = curves[j][bin.min(curves[j].len() - 1)];
                if si < sj {
                    concordant += 1.0;
                } else if si == sj {
                    concordant += 0.5;
                }
            }
        }
    }
    if comparable == 0 {
        return Err(Error::Metric("no comparable pairs".into()));
    }
    Ok(concordant / comparable as f64)
}

/// Coefficient of determination; constant truths are an error because the
/// total sum of squares vanishes.
pub fn r2(predictions: &[f64], truths: &[f64]) -> Result<f64> {
    if predictions.len() != truths.len() || truths.len() < 2 {
        return Err(Error::Metric("r2 needs >= 2 paired samples".into()));
    }
    let mean = truths.iter().sum::<f64>() / truths.len() as f64;
    let ss_tot: f64 = truths.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Metric("constant truths make r2 undefined".into()));
    }
    let ss_res: f64 = predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn rmse(predictions: &[f64], truths: &[f64]) -> Result<f64> {
    if predictions.len() != truths.len() || truths.is_empty() {
        return Err(Error::Metric("rmse needs paired samples".into()));
    }
    let mse: f64 = predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / truths.len() as f64;
    Ok(mse.sqrt())
}

pub fn mae(predictions: &[f64], truths: &[f64]) -> Result<f64> {
    if predictions.len() != truths.len() || truths.is_empty() {
        return Err(Error::Metric("mae needs paired samples".into()));
    }
    Ok(predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / truths.len() as f64)
}

pub const DEFAULT_BOOTSTRAP_RESAMPLES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapSe {
    pub se: f64,
    /// Resamples skipped because the metric's preconditions failed there.
    pub skipped: usize,
}

/// Standard error by seeded resampling with replacement at the example
/// level. The metric sees a list of resampled indices; resamples where it
/// errors (single-class, constant truths, ...) are skipped and counted.
pub fn bootstrap_se(
    n: usize,
    resamples: usize,
    seed: u64,
    metric: impl Fn(&[usize]) -> Result<f64>,
) -> Result<BootstrapSe> {
    if resamples < 2 {
        return Err(Error::Metric("bootstrap needs >= 2 resamples".into()));
    }
    if n == 0 {
        return Err(Error::Metric("bootstrap over an empty sample".into()));
    }
    let mut values = Vec::with_capacity(resamples);
    let mut skipped = 0usize;
    for b in 0..resamples {
        let mut rng = stream_indexed(seed, "bootstrap", b as u64);
        let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
        match metric(&idx) {
            Ok(v) => values.push(v),
            Err(_) => skipped += 1,
        }
    }
    if values.len() < 2 {
        return Err(Error::Metric(format!(
            "bootstrap failed: only {} of {resamples} resamples were valid",
            values.len()
        )));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (values.len() - 1) as f64;
    Ok(BootstrapSe {
        se: var.sqrt(),
        skipped,
    })
}

// ---- metric report file: task<TAB>metric<TAB>estimate<TAB>se<TAB>n ----

pub fn write_metric_reports(reports: &[MetricReport], mut writer: impl Write) -> Result<()> {
    for r in reports {
        writeln!(
            writer,
            "{}\t{}\t{}\t{}\t{}",
            r.task, r.metric, r.estimate, r.se, r.n
        )
        .map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

pub fn read_metric_reports(reader: impl std::io::BufRead) -> Result<Vec<MetricReport>> {
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
        if parts.len() != 5 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 5 fields, got {}", parts.len()),
            });
        }
        let bad = |what: &str| Error::Parse {
            line: line_no,
            message: format!("bad {what}"),
        };
        out.push(MetricReport {
            task: parts[0].to_string(),
            metric: parts[1].to_string(),
            estimate: parts[2].parse().map_err(|_| bad("estimate"))?,
            se: parts[3].parse().map_err(|_| bad("se"))?,
            n: parts[4].parse().map_err(|_| bad("n"))?,
        });
    }
    Ok(out)
}

pub fn write_metric_file(reports: &[MetricReport], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    write_metric_reports(reports, std::io::BufWriter::new(file))
}

pub fn read_metric_file(path: &Path) -> Result<Vec<MetricReport>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_metric_reports(std::io::BufReader::new(file))
}

/// Pairwise reference implementations, exported so integration tests can
/// check the production paths against independently written scans.
pub mod reference {
    /// AUROC by direct enumeration of positive-negative pairs.
    pub fn auroc_pairwise(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0usize;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_separated_tied_and_hand() {
        assert_eq!(
            auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(),
            1.0
        );
        assert_eq!(auroc(&[0.5; 6], &[true, false, true, false, true, false]).unwrap(), 0.5);
        // wins 3 of 4 positive-negative pairs, loses 1
        assert_eq!(
            auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(),
            0.75
        );
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn auroc_matches_pairwise_exactly() {
        let mut rng = crate::rng::stream(31, "auroc");
        for _ in 0..200 {
            let n = rng.gen_range(2..80);
            // coarse score grid so ties occur often
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..10) as f64 / 10.0).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
                continue;
            }
            let fast = auroc(&scores, &labels).unwrap();
            let slow = reference::auroc_pairwise(&scores, &labels);
            assert_eq!(fast, slow, "scores={scores:?} labels={labels:?}");
        }
    }

    #[test]
    fn auroc_rank_invariance_and_flip() {
        let mut rng = crate::rng::stream(32, "auroc-inv");
        for _ in 0..100 {
            let n = rng.gen_range(4..50);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let labels: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
            let transformed: Vec<f64> = scores.iter().map(|s| (s * 0.3).exp() + 7.0).collect();
            let a = auroc(&scores, &labels).unwrap();
            assert_eq!(a, auroc(&transformed, &labels).unwrap(), "monotone invariance");
            let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
            let b = auroc(&negated, &labels).unwrap();
            assert!((a + b - 1.0).abs() < 1e-12, "flip symmetry");
        }
    }

    #[test]
    fn concordance_perfect_tied_and_hand() {
        let edges = vec![2.0, 4.0];
        // curves indexed over 3 bins; lower curve = earlier expected event
        let perfect = vec![
            vec![0.1, 0.05, 0.0],
            vec![0.5, 0.3, 0.1],
            vec![0.9, 0.8, 0.7],
        ];
        let durations = [1.0, 3.0, 5.0];
        let observed = [true, true, true];
        assert_eq!(td_concordance(&perfect, &edges, &durations, &observed).unwrap(), 1.0);

        let identical = vec![vec![0.5, 0.4, 0.3]; 3];
        assert_eq!(
            td_concordance(&identical, &edges, &durations, &observed).unwrap(),
            0.5
        );

        // two comparable pairs, one concordant and one discordant
        let mixed = vec![
            vec![0.2, 0.1, 0.0], // event at bin 0
            vec![0.9, 0.8, 0.7], // later event, higher curve: concordant
            vec![0.1, 0.0, 0.0], // later event, lower curve: discordant
        ];
        let durations = [1.0, 3.0, 5.0];
        let observed = [true, false, false];
        assert_eq!(
            td_concordance(&mixed, &edges, &durations, &observed).unwrap(),
            0.5
        );

        // censored-first pairs are not comparable
        assert!(td_concordance(&perfect, &edges, &[1.0, 1.0, 1.0], &[true, true, true]).is_err());
    }

    #[test]
    fn concordance_monotone_transform_invariance() {
        let mut rng = crate::rng::stream(33, "cindex-inv");
        let edges = vec![1.0, 2.0, 3.0];
        let n = 30;
        let curves: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let mut c: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
                c.sort_by(|a, b| b.partial_cmp(a).unwrap());
                c
            })
            .collect();
        let durations: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..5.0)).collect();
        let observed: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
        let a = td_concordance(&curves, &edges, &durations, &observed).unwrap();
        // strictly monotone map of all curve values preserves order and ties
        let squashed: Vec<Vec<f64>> = curves
            .iter()
            .map(|c| c.iter().map(|v| v / (1.0 + v)).collect())
            .collect();
        let b = td_concordance(&squashed, &edges, &durations, &observed).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn regression_metrics() {
        let truths = [1.0, 2.0, 3.0];
        assert_eq!(r2(&truths, &truths).unwrap(), 1.0);
        assert_eq!(rmse(&truths, &truths).unwrap(), 0.0);
        assert_eq!(mae(&truths, &truths).unwrap(), 0.0);
        // predicting the mean: r2 = 0
        assert_eq!(r2(&[2.0, 2.0, 2.0], &truths).unwrap(), 0.0);
        // worse than the mean goes negative: 1 - 4/2
        assert_eq!(r2(&[1.0, 2.0, 5.0], &truths).unwrap(), -1.0);
        assert!(r2(&[1.0, 2.0], &[5.0, 5.0]).is_err());
        assert!(r2(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn r2_never_exceeds_one() {
        let mut rng = crate::rng::stream(34, "r2");
        for _ in 0..200 {
            let n = rng.gen_range(2..40);
            let truths: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let preds: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            if let Ok(v) = r2(&preds, &truths) {
                assert!(v <= 1.0);
            }
        }
    }

    #[test]
    fn bootstrap_constant_metric_and_determinism() {
        let data: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let constant = bootstrap_se(50, 100, 9, |idx| {
            let preds: Vec<f64> = idx.iter().map(|&i| data[i]).collect();
            let truths = preds.clone();
            rmse(&preds, &truths)
        })
        .unwrap();
        assert_eq!(constant.se, 0.0);
        assert_eq!(constant.skipped, 0);

        let run = |seed| {
            bootstrap_se(50, 50, seed, |idx| {
                let preds: Vec<f64> = idx.iter().map(|&i| data[i]).collect();
                mae(&preds, &data[..idx.len()])
            })
            .unwrap()
            .se
        };
        assert_eq!(run(7), run(7));
        assert!(bootstrap_se(50, 1, 7, |_| Ok(0.0)).is_err());
    }

    #[test]
    fn bootstrap_skips_invalid_resamples() {
        // metric fails unless both classes present; tiny sample makes
        // single-class resamples likely but not universal
        let labels = [true, false, false, false];
        let scores = [0.9, 0.1, 0.2, 0.3];
        let out = bootstrap_se(4, 200, 11, |idx| {
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
            auroc(&s, &l)
        })
        .unwrap();
        assert!(out.skipped > 0, "some resamples must drop the positive");
        assert!(out.se >= 0.0);

        let all_bad = bootstrap_se(4, 10, 11, |_| -> Result<f64> {
            Err(Error::Metric("always".into()))
        });
        assert!(all_bad.is_err());
    }

    #[test]
    fn bootstrap_auroc_tracks_hanley_mcneil() {
        let mut rng = crate::rng::stream(35, "hanley");
        let n = 200;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let a = auroc(&scores, &labels).unwrap();
        let (p, q) = (100.0, 100.0);
        let q1 = a / (2.0 - a);
        let q2 = 2.0 * a * a / (1.0 + a);
        let analytic =
            ((a * (1.0 - a) + (p - 1.0) * (q1 - a * a) + (q - 1.0) * (q2 - a * a)) / (p * q)).sqrt();
        let boot = bootstrap_se(n, 500, 13, |idx| {
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
            auroc(&s, &l)
        })
        .unwrap();
        assert!(
            boot.se < 3.0 * analytic && boot.se > analytic / 3.0,
            "bootstrap {} vs analytic {analytic}",
            boot.se
        );
    }

    #[test]
    fn report_file_round_trip() {
        let reports = vec![
            MetricReport {
                task: "next-value".into(),
                metric: "r2".into(),
                estimate: 0.42,
                se: 0.013,
                n: 512,
            },
            MetricReport {
                task: "onset".into(),
                metric: "auroc".into(),
                estimate: 0.87,
                se: 0.002,
                n: 1024,
            },
        ];
        let mut buf = Vec::new();
        write_metric_reports(&reports, &mut buf).unwrap();
        let parsed = read_metric_reports(buf.as_slice()).unwrap();
        assert_eq!(parsed, reports);
    }
}
