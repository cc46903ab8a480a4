//! Per-code quantile bins over next-event gaps and values.
//!
//! Edges sit at empirical quantiles (lower interpolation: the order
//! statistic at ceil(q*n)), deduplicated, with any edge that has no sample
//! mass strictly below it dropped so degenerate samples collapse to a
//! single effective bin. Bins are left-closed/right-open; a point on an
//! edge belongs to the bin on the right, the last bin is unbounded, and a
//! gap of zero always maps to bin 0.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BinGrid {
    pub code: usize,
    /// Interior time edges, strictly increasing; at most `time_bins - 1`.
    pub time_edges: Vec<f64>,
    /// Interior value edges for numeric codes.
    pub value_edges: Option<Vec<f64>>,
    /// Configured bin counts the grid was fit for.
    pub time_bins: usize,
    pub value_bins: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinIndex {
    pub time_bin: usize,
    pub value_bin: Option<usize>,
}

#[derive(Debug, Default, Clone)]
pub struct LookupStats {
    /// Values supplied for non-numeric grids (ignored, but counted).
    pub stray_values: u64,
}

impl BinGrid {
    pub fn effective_time_bins(&self) -> usize {
        self.time_edges.len() + 1
    }

    pub fn effective_value_bins(&self) -> Option<usize> {
        self.value_edges.as_ref().map(|e| e.len() + 1)
    }

    pub fn is_numeric(&self) -> bool {
        self.value_edges.is_some()
    }

    /// Count of interior edges at or below the duration: left-closed,
    /// right-open bins with an unbounded last bin.
    pub fn time_bin(&self, delta_t: f64) -> usize {
        self.time_edges.partition_point(|&e| e <= delta_t)
    }

    pub fn value_bin(&self, value: f64) -> Option<usize> {
        self.value_edges
            .as_ref()
            .map(|edges| edges.partition_point(|&e| e <= value))
    }
}

/// Map an observed (gap, value) pair to its cell. A value offered to a
/// non-numeric grid is ignored and counted; a numeric grid without a value
/// is an error because observed events of numeric codes carry one.
pub fn lookup(
    grid: &BinGrid,
    delta_t: f64,
    value: Option<f64>,
    stats: &mut LookupStats,
) -> Result<BinIndex> {
    if delta_t < 0.0 || !delta_t.is_finite() {
        return Err(Error::Domain(format!("duration {delta_t} must be finite and >= 0")));
    }
    let value_bin = match (grid.value_edges.as_ref(), value) {
        (Some(_), Some(v)) => grid.value_bin(v),
        (Some(_), None) => {
            return Err(Error::Validation(format!(
                "code {} is numeric but the observed target has no value",
                grid.code
            )))
        }
        (None, Some(_)) => {
            stats.stray_values += 1;
            None
        }
        (None, None) => None,
    };
    Ok(BinIndex {
        time_bin: grid.time_bin(delta_t),
        value_bin,
    })
}

/// Interior quantile edges for `bins` bins by lower interpolation.
/// Deduplicates and drops edges with no sample strictly below them.
pub fn quantile_edges(samples: &[f64], bins: usize) -> Vec<f64> {
    if samples.is_empty() || bins < 2 {
        return Vec::new();
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let n = sorted.len();
    let mut edges: Vec<f64> = (1..bins)
        .map(|i| {
            let rank = (i * n).div_ceil(bins); // ceil(q * n), 1-based
            sorted[rank - 1]
        })
        .collect();
    edges.dedup();
    let min = sorted[0];
    edges.retain(|&e| min < e);
    edges
}

/// Observed-target samples for one code.
#[derive(Debug, Default, Clone)]
pub struct CodeSamples {
    pub gaps: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct FitConfig {
    pub time_bins: usize,
    pub value_bins: usize,
    /// Codes with fewer observed targets fall back to the pooled grid.
    pub min_count: usize,
}

pub const DEFAULT_MIN_COUNT: usize = 50;

/// Fit one grid per code from observed first-occurrence targets.
/// `samples[code]` holds that code's gaps and (for numeric codes) values;
/// sparse codes inherit pooled global edges.
pub fn fit_bins(samples: &[CodeSamples], numeric: &[bool], cfg: &FitConfig) -> Result<Vec<BinGrid>> {
    if cfg.time_bins < 2 || cfg.value_bins < 2 {
        return Err(Error::Config("bin counts must be >= 2".into()));
    }
    if samples.len() != numeric.len() {
        return Err(Error::Config(format!(
            "{} sample groups for {} codes",
            samples.len(),
            numeric.len()
        )));
    }
    let total_observed: usize = samples.iter().map(|s| s.gaps.len()).sum();
    if total_observed == 0 {
        return Err(Error::Validation(
            "no observed targets anywhere in the corpus; cannot fit bins".into(),
        ));
    }
    let pooled_gaps: Vec<f64> = samples.iter().flat_map(|s| s.gaps.iter().copied()).collect();
    let global_time = quantile_edges(&pooled_gaps, cfg.time_bins);
    let pooled_values: Vec<f64> = samples
        .iter()
        .zip(numeric)
        .filter(|(_, &num)| num)
        .flat_map(|(s, _)| s.values.iter().copied())
        .collect();
    let global_value = quantile_edges(&pooled_values, cfg.value_bins);

    samples
        .iter()
        .enumerate()
        .map(|(code, s)| {
            let time_edges = if s.gaps.len() >= cfg.min_count {
                quantile_edges(&s.gaps, cfg.time_bins)
            } else {
                global_time.clone()
            };
            let value_edges = if numeric[code] {
                if pooled_values.is_empty() {
                    return Err(Error::Validation(format!(
                        "code {code} is numeric but the corpus has no observed values"
                    )));
                }
                Some(if s.values.len() >= cfg.min_count {
                    quantile_edges(&s.values, cfg.value_bins)
                } else {
                    global_value.clone()
                })
            } else {
                None
            };
            Ok(BinGrid {
                code,
                time_edges,
                value_edges,
                time_bins: cfg.time_bins,
                value_bins: cfg.value_bins,
            })
        })
        .collect()
}

// ---- grid file: index<TAB>time_edges(comma)<TAB>value_edges(comma or "-") ----

fn join_edges(edges: &[f64]) -> String {
    edges
        .iter()
        .map(|e| e.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_edges(field: &str, line_no: usize) -> Result<Vec<f64>> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(',')
        .map(|tok| {
            tok.parse::<f64>().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad edge {tok:?}"),
            })
        })
        .collect()
}

pub fn write_grids(grids: &[BinGrid], mut writer: impl Write) -> Result<()> {
    for g in grids {
        let values = match &g.value_edges {
            Some(edges) => join_edges(edges),
            None => "-".to_string(),
        };
        writeln!(writer, "{}\t{}\t{}", g.code, join_edges(&g.time_edges), values)
            .map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

pub fn read_grids(reader: impl BufRead, time_bins: usize, value_bins: usize) -> Result<Vec<BinGrid>> {
    let mut grids = Vec::new();
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
        if parts.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 3 tab-separated fields, got {}", parts.len()),
            });
        }
        let code: usize = parts[0].parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("bad code index {:?}", parts[0]),
        })?;
        if code != grids.len() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("grid indices must be dense, got {code}"),
            });
        }
        let time_edges = parse_edges(parts[1], line_no)?;
        let value_edges = if parts[2] == "-" {
            None
        } else {
            Some(parse_edges(parts[2], line_no)?)
        };
        grids.push(BinGrid {
            code,
            time_edges,
            value_edges,
            time_bins,
            value_bins,
        });
    }
    Ok(grids)
}

pub fn write_grid_file(grids: &[BinGrid], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    write_grids(grids, std::io::BufWriter::new(file))
}

pub fn read_grid_file(path: &Path, time_bins: usize, value_bins: usize) -> Result<Vec<BinGrid>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_grids(std::io::BufReader::new(file), time_bins, value_bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn grid(time_edges: Vec<f64>, value_edges: Option<Vec<f64>>) -> BinGrid {
        BinGrid {
            code: 0,
            time_edges,
            value_edges,
            time_bins: 4,
            value_bins: 4,
        }
    }

    #[test]
    fn quantile_edges_lower_interpolation() {
        let samples = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        assert_eq!(quantile_edges(&samples, 4), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn identical_samples_collapse_to_single_bin() {
        let samples = vec![5.0; 9];
        assert_eq!(quantile_edges(&samples, 4), Vec::<f64>::new());
    }

    #[test]
    fn boundary_belongs_to_right_bin() {
        let g = grid(vec![2.0, 5.0], None);
        assert_eq!(g.time_bin(0.0), 0);
        assert_eq!(g.time_bin(2.0), 1);
        assert_eq!(g.time_bin(1e9), 2);
        // every edge lands in the bin to its right
        for (i, &e) in g.time_edges.iter().enumerate() {
            assert_eq!(g.time_bin(e), i + 1);
        }
    }

    #[test]
    fn lookup_contracts() {
        let mut stats = LookupStats::default();
        let numeric = grid(vec![1.0], Some(vec![0.0]));
        let idx = lookup(&numeric, 0.5, Some(-2.0), &mut stats).unwrap();
        assert_eq!(idx, BinIndex { time_bin: 0, value_bin: Some(0) });
        assert!(lookup(&numeric, 0.5, None, &mut stats).is_err());
        assert!(lookup(&numeric, -1.0, Some(0.0), &mut stats).is_err());

        let plain = grid(vec![1.0], None);
        let idx = lookup(&plain, 3.0, Some(9.0), &mut stats).unwrap();
        assert_eq!(idx, BinIndex { time_bin: 1, value_bin: None });
        assert_eq!(stats.stray_values, 1);
    }

    #[test]
    fn lookup_monotone_in_duration_and_value() {
        let mut rng = crate::rng::stream(5, "monotone");
        for _ in 0..50 {
            let samples: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..30.0)).collect();
            let g = grid(quantile_edges(&samples, 5), None);
            let mut xs: Vec<f64> = (0..50).map(|_| rng.gen_range(0.0..40.0)).collect();
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let bins: Vec<usize> = xs.iter().map(|&x| g.time_bin(x)).collect();
            assert!(bins.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn fit_invariant_to_sample_order() {
        let mut rng = crate::rng::stream(6, "order");
        let mut samples: Vec<f64> = (0..101).map(|_| rng.gen_range(0.0..10.0)).collect();
        let a = quantile_edges(&samples, 4);
        samples.reverse();
        let b = quantile_edges(&samples, 4);
        assert_eq!(a, b);
    }

    #[test]
    fn occupancy_balance_on_tie_free_samples() {
        let mut rng = crate::rng::stream(7, "balance");
        for _ in 0..30 {
            let n = rng.gen_range(20..200);
            let bins = rng.gen_range(2..8);
            let samples: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 100.0).collect();
            let edges = quantile_edges(&samples, bins);
            let mut occupancy = vec![0usize; edges.len() + 1];
            for &s in &samples {
                occupancy[edges.partition_point(|&e| e <= s)] += 1;
            }
            let max = *occupancy.iter().max().unwrap();
            let min = *occupancy.iter().min().unwrap();
            let bound = usize::div_ceil(n, bins) + 1;
            assert!(max - min <= bound, "occupancy {occupancy:?} bound {bound}");
        }
    }

    #[test]
    fn sparse_code_falls_back_to_global() {
        let rich = CodeSamples {
            gaps: (1..=100).map(|i| i as f64).collect(),
            values: Vec::new(),
        };
        let sparse = CodeSamples {
            gaps: vec![2.0, 3.0],
            values: Vec::new(),
        };
        let cfg = FitConfig {
            time_bins: 4,
            value_bins: 4,
            min_count: 10,
        };
        let grids = fit_bins(&[rich.clone(), sparse], &[false, false], &cfg).unwrap();
        // the sparse code inherits pooled edges, which include the rich samples
        let pooled: Vec<f64> = rich.gaps.iter().copied().chain([2.0, 3.0]).collect();
        assert_eq!(grids[1].time_edges, quantile_edges(&pooled, 4));
        assert_ne!(grids[0].time_edges, grids[1].time_edges);
    }

    #[test]
    fn zero_observed_targets_is_an_error() {
        let cfg = FitConfig {
            time_bins: 4,
            value_bins: 4,
            min_count: 10,
        };
        assert!(fit_bins(&[CodeSamples::default()], &[false], &cfg).is_err());
    }

    #[test]
    fn grid_file_round_trip() {
        let grids = vec![
            BinGrid {
                code: 0,
                time_edges: vec![1.5, 3.25],
                value_edges: Some(vec![-0.5, 2.0]),
                time_bins: 3,
                value_bins: 3,
            },
            BinGrid {
                code: 1,
                time_edges: Vec::new(),
                value_edges: None,
                time_bins: 3,
                value_bins: 3,
            },
        ];
        let mut buf = Vec::new();
        write_grids(&grids, &mut buf).unwrap();
        let parsed = read_grids(buf.as_slice(), 3, 3).unwrap();
        assert_eq!(parsed, grids);
        let mut buf2 = Vec::new();
        write_grids(&parsed, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }
}
