//! Data model for irregular marked event sequences and extraction of
//! first-occurrence targets with censoring.
//!
//! A record is a time-ordered list of `(time, code, optional value)` events
//! for one subject. For an anchor position `j` and a code `m`, the target is
//! the earliest event of `m` strictly after the anchor time; if none exists
//! the code is censored at the record's last observation time. Censored
//! targets share one duration per anchor, so a `TargetSet` stores only the
//! observed ones and materializes the rest lazily.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One event: time in fractional days since the subject's origin, a code,
/// and an optional numeric value.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub time: f64,
    pub code: String,
    pub value: Option<f64>,
}

/// Time-ordered event sequence for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub events: Vec<Event>,
}

impl PatientRecord {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn last_time(&self) -> Option<f64> {
        self.events.last().map(|e| e.time)
    }
}

/// Per-code outcome at an anchor: the gap to the first strictly-future
/// occurrence (observed), or the gap to the end of the record (censored).
#[derive(Debug, Clone, PartialEq)]
pub struct FirstOccurrenceTarget {
    pub code: usize,
    pub delta_t: f64,
    pub value: Option<f64>,
    pub observed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservedTarget {
    pub code: usize,
    pub delta_t: f64,
    pub value: Option<f64>,
}

/// All per-code targets for one anchor position. Only observed targets are
/// materialized; every other vocabulary code is censored with the shared
/// `censor_duration`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    pub anchor: usize,
    pub censor_duration: f64,
    observed: Vec<ObservedTarget>,
}

impl TargetSet {
    /// Observed targets, sorted by code index.
    pub fn observed(&self) -> &[ObservedTarget] {
        &self.observed
    }

    /// Materialize the target for one code.
    pub fn target_for(&self, code: usize) -> FirstOccurrenceTarget {
        match self.observed.binary_search_by_key(&code, |t| t.code) {
            Ok(i) => FirstOccurrenceTarget {
                code,
                delta_t: self.observed[i].delta_t,
                value: self.observed[i].value,
                observed: true,
            },
            Err(_) => FirstOccurrenceTarget {
                code,
                delta_t: self.censor_duration,
                value: None,
                observed: false,
            },
        }
    }
}

/// Maps raw code strings to dense vocabulary indices. Out-of-vocabulary
/// codes return `None` and never produce targets.
pub trait CodeLookup {
    fn index_of(&self, code: &str) -> Option<usize>;
}

impl<F> CodeLookup for F
where
    F: Fn(&str) -> Option<usize>,
{
    fn index_of(&self, code: &str) -> Option<usize> {
        self(code)
    }
}

/// Extract target sets for every anchor position of a record with a single
/// backward scan over time groups; O(N + total observed targets).
pub fn extract_all_targets(record: &PatientRecord, lookup: &dyn CodeLookup) -> Vec<TargetSet> {
    let n = record.events.len();
    if n == 0 {
        return Vec::new();
    }
    let t_last = record.events[n - 1].time;
    let mut sets: Vec<Option<TargetSet>> = vec![None; n];
    // earliest strictly-future occurrence per code: (time, value)
    let mut earliest: HashMap<usize, (f64, Option<f64>)> = HashMap::new();

    let mut hi = n;
    while hi > 0 {
        let t = record.events[hi - 1].time;
        let mut lo = hi;
        while lo > 0 && record.events[lo - 1].time == t {
            lo -= 1;
        }
        // anchors in [lo, hi) share the same anchor time; events at that
        // time are not strictly future, so they see the current map
        for j in lo..hi {
            let mut observed: Vec<ObservedTarget> = earliest
                .iter()
                .map(|(&code, &(t_next, value))| ObservedTarget {
                    code,
                    delta_t: t_next - t,
                    value,
                })
                .collect();
            observed.sort_by_key(|o| o.code);
            sets[j] = Some(TargetSet {
                anchor: j,
                censor_duration: t_last - t,
                observed,
            });
        }
        // fold this time group into the map; within the group the first
        // event per code (canonical order) wins, and it overrides any
        // later-time entry
        let mut group_first: HashMap<usize, (f64, Option<f64>)> = HashMap::new();
        for j in lo..hi {
            if let Some(code) = lookup.index_of(&record.events[j].code) {
                group_first.entry(code).or_insert((t, record.events[j].value));
            }
        }
        for (code, tv) in group_first {
            earliest.insert(code, tv);
        }
        hi = lo;
    }
    sets.into_iter().map(|s| s.expect("every anchor filled")).collect()
}

/// Target set for a single anchor position (0-based).
pub fn extract_targets(
    record: &PatientRecord,
    lookup: &dyn CodeLookup,
    position: usize,
) -> Result<TargetSet> {
    if position >= record.events.len() {
        return Err(Error::Bounds(format!(
            "anchor {position} out of range for record of length {}",
            record.events.len()
        )));
    }
    Ok(extract_all_targets(record, lookup).swap_remove(position))
}

// ---- validation ----

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Empty,
    UnsortedAt { position: usize },
    NonFiniteTime { position: usize },
    NegativeTime { position: usize },
    NonFiniteValue { position: usize },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::Empty => write!(f, "empty record"),
            Violation::UnsortedAt { position } => write!(f, "unsorted at event {position}"),
            Violation::NonFiniteTime { position } => write!(f, "non-finite time at event {position}"),
            Violation::NegativeTime { position } => write!(f, "negative time at event {position}"),
            Violation::NonFiniteValue { position } => {
                write!(f, "non-finite value at event {position}")
            }
        }
    }
}

/// Report every violation in a record; a clean record yields an empty list.
pub fn validate_record(record: &PatientRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    if record.events.is_empty() {
        out.push(Violation::Empty);
        return out;
    }
    for (i, e) in record.events.iter().enumerate() {
        if !e.time.is_finite() {
            out.push(Violation::NonFiniteTime { position: i });
        } else if e.time < 0.0 {
            out.push(Violation::NegativeTime { position: i });
        }
        if let Some(v) = e.value {
            if !v.is_finite() {
                out.push(Violation::NonFiniteValue { position: i });
            }
        }
        if i > 0 && e.time < record.events[i - 1].time {
            out.push(Violation::UnsortedAt { position: i });
        }
    }
    out
}

// ---- event-file format ----
// One JSON object per line: {"patient_id": ..., "events": [[time, code, value-or-null], ...]}.
// The canonical writer sorts events by (time, code) and emits compact JSON,
// so parse -> write round-trips canonical input byte-identically.

#[derive(Serialize, Deserialize)]
struct RecordLine {
    patient_id: String,
    events: Vec<(f64, String, Option<f64>)>,
}

#[derive(Debug)]
pub struct ParseOutcome {
    pub records: Vec<PatientRecord>,
    /// Number of records whose events had to be reordered into canonical
    /// (time, code) order.
    pub reordered_records: u64,
}

/// Parse a line-delimited event stream. Malformed lines and non-finite
/// numbers are errors naming the 1-based line; out-of-order events are
/// sorted and counted, not rejected.
pub fn parse_event_stream(reader: impl BufRead) -> Result<ParseOutcome> {
    let mut records = Vec::new();
    let mut reordered = 0u64;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let mut events: Vec<Event> = parsed
            .events
            .into_iter()
            .map(|(time, code, value)| Event { time, code, value })
            .collect();
        for (i, e) in events.iter().enumerate() {
            if !e.time.is_finite() || e.time < 0.0 {
                return Err(Error::Validation(format!(
                    "line {line_no}: event {i} has invalid time {}",
                    e.time
                )));
            }
            if let Some(v) = e.value {
                if !v.is_finite() {
                    return Err(Error::Validation(format!(
                        "line {line_no}: event {i} has non-finite value"
                    )));
                }
            }
        }
        let in_order = events
            .windows(2)
            .all(|w| (w[0].time, w[0].code.as_str()) <= (w[1].time, w[1].code.as_str()));
        if !in_order {
            events.sort_by(|a, b| {
                a.time
                    .partial_cmp(&b.time)
                    .expect("times validated finite")
                    .then_with(|| a.code.cmp(&b.code))
            });
            reordered += 1;
        }
        records.push(PatientRecord {
            patient_id: parsed.patient_id,
            events,
        });
    }
    Ok(ParseOutcome {
        records,
        reordered_records: reordered,
    })
}

/// Canonical-form writer: one compact JSON object per line, events in
/// (time, code) order, no trailing whitespace.
pub fn write_event_stream(records: &[PatientRecord], mut writer: impl Write) -> Result<()> {
    for r in records {
        let mut events: Vec<&Event> = r.events.iter().collect();
        events.sort_by(|a, b| {
            a.time
                .partial_cmp(&b.time)
                .expect("finite times")
                .then_with(|| a.code.cmp(&b.code))
        });
        let line = RecordLine {
            patient_id: r.patient_id.clone(),
            events: events
                .iter()
                .map(|e| (e.time, e.code.clone(), e.value))
                .collect(),
        };
        let json = serde_json::to_string(&line).map_err(|e| Error::Validation(e.to_string()))?;
        writer
            .write_all(json.as_bytes())
            .and_then(|_| writer.write_all(b"\n"))
            .map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

pub fn read_event_file(path: &Path) -> Result<ParseOutcome> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_event_stream(std::io::BufReader::new(file))
}

pub fn write_event_file(records: &[PatientRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    write_event_stream(records, std::io::BufWriter::new(file))
}
