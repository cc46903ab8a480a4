//! Entropy-based vocabulary selection and numeric-code flagging.
//!
//! Codes are scored by the empirical entropy of their per-patient presence
//! probability, `-p ln p`, or by the conditional entropy relative to an
//! ontology parent when one is known. The top-k codes by score form the
//! vocabulary. Natural log throughout; the base only rescales the ranking.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::event_stream::PatientRecord;

/// Fraction of a code's events that must carry values before the code is
/// treated as numeric.
pub const NUMERIC_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct CodeStats {
    pub code: String,
    /// Probability that the code appears at least once in a patient.
    pub patient_frequency: f64,
    pub is_numeric: bool,
    /// `(p(code, parent present), p(code, parent absent))`, when the code
    /// has an ontology parent. The two sum to `patient_frequency`.
    pub joint_with_parent: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VocabEntry {
    pub code: String,
    pub index: usize,
    pub is_numeric: bool,
    pub score: f64,
}

/// Ordered code vocabulary; indices are dense `0..len`, highest score first.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    entries: Vec<VocabEntry>,
    by_code: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.by_code.get(code).copied()
    }

    pub fn entry(&self, index: usize) -> &VocabEntry {
        &self.entries[index]
    }

    pub fn is_numeric(&self, index: usize) -> bool {
        self.entries[index].is_numeric
    }

    pub fn numeric_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_numeric).count()
    }

    fn from_entries(entries: Vec<VocabEntry>) -> Self {
        let by_code = entries
            .iter()
            .map(|e| (e.code.clone(), e.index))
            .collect();
        Vocabulary { entries, by_code }
    }
}

/// Shannon term `-p ln p`, with `0 ln 0 = 0`.
pub fn entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
    }
    if p == 0.0 || p == 1.0 {
        Ok(0.0)
    } else {
        Ok(-p * p.ln())
    }
}

/// Conditional entropy of a code given its parent's presence:
/// `-p(m,n-) ln(p(m,n-)/p(m)) - p(m,n+) ln(p(m,n+)/p(m))` with
/// `p(m) = p(m,n+) + p(m,n-)`; zero terms follow the limit convention.
pub fn conditional_entropy(p_joint_present: f64, p_joint_absent: f64) -> Result<f64> {
    if p_joint_present < 0.0 || p_joint_absent < 0.0 {
        return Err(Error::Domain(format!(
            "negative joint probability ({p_joint_present}, {p_joint_absent})"
        )));
    }
    let p = p_joint_present + p_joint_absent;
    if p > 1.0 + 1e-12 {
        return Err(Error::Domain(format!("joint probabilities sum to {p} > 1")));
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    let term = |q: f64| if q == 0.0 { 0.0 } else { -q * (q / p).ln() };
    Ok(term(p_joint_absent) + term(p_joint_present))
}

/// Per-code corpus statistics: patient frequency, numeric flag, and joint
/// frequencies with the ontology parent when one is given. Returned sorted
/// by code so downstream ranking is record-order invariant.
pub fn compute_code_stats(
    records: &[PatientRecord],
    ontology: Option<&HashMap<String, String>>,
) -> Result<Vec<CodeStats>> {
    if records.is_empty() {
        return Err(Error::Validation("empty corpus".into()));
    }
    let n_patients = records.len() as f64;
    // per-code: patients containing it, events, events with values
    let mut patients: BTreeMap<&str, usize> = BTreeMap::new();
    let mut events: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut joint_present: BTreeMap<&str, usize> = BTreeMap::new();

    for record in records {
        let mut seen: HashSet<&str> = HashSet::new();
        for e in &record.events {
            let slot = events.entry(e.code.as_str()).or_insert((0, 0));
            slot.0 += 1;
            if e.value.is_some() {
                slot.1 += 1;
            }
            seen.insert(e.code.as_str());
        }
        for code in &seen {
            *patients.entry(code).or_insert(0) += 1;
        }
        if let Some(ontology) = ontology {
            for code in &seen {
                if let Some(parent) = ontology.get(*code) {
                    if seen.contains(parent.as_str()) {
                        *joint_present.entry(code).or_insert(0) += 1;
                    }
                }
            }
        }
    }

    Ok(patients
        .iter()
        .map(|(&code, &count)| {
            let (total, with_value) = events[code];
            let p = count as f64 / n_patients;
            let joint_with_parent = ontology.and_then(|o| o.get(code)).map(|_| {
                let present = joint_present.get(code).copied().unwrap_or(0) as f64 / n_patients;
                (present, p - present)
            });
            CodeStats {
                code: code.to_string(),
                patient_frequency: p,
                is_numeric: with_value as f64 / total as f64 > NUMERIC_THRESHOLD,
                joint_with_parent,
            }
        })
        .collect())
}

/// Outcome of vocabulary construction; `truncated` is set when the corpus
/// had fewer distinct codes than requested.
#[derive(Debug)]
pub struct VocabBuild {
    pub vocabulary: Vocabulary,
    pub truncated: bool,
}

/// Keep the `k` highest-scoring codes. With `use_ontology`, codes that have
/// a parent are scored by conditional entropy instead of marginal entropy.
/// Ties break lexicographically by code.
pub fn build_vocabulary(stats: &[CodeStats], k: usize, use_ontology: bool) -> Result<VocabBuild> {
    if k == 0 {
        return Err(Error::Validation("vocabulary size must be >= 1".into()));
    }
    let mut scored: Vec<(f64, &CodeStats)> = stats
        .iter()
        .map(|s| {
            let score = match (use_ontology, s.joint_with_parent) {
                (true, Some((present, absent))) => conditional_entropy(present, absent)?,
                _ => entropy(s.patient_frequency)?,
            };
            Ok((score, s))
        })
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("scores are finite")
            .then_with(|| a.1.code.cmp(&b.1.code))
    });
    let truncated = scored.len() < k;
    let entries = scored
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(index, (score, s))| VocabEntry {
            code: s.code.clone(),
            index,
            is_numeric: s.is_numeric,
            score,
        })
        .collect();
    Ok(VocabBuild {
        vocabulary: Vocabulary::from_entries(entries),
        truncated,
    })
}

// ---- vocabulary file: index<TAB>code<TAB>is_numeric<TAB>score ----

pub fn write_vocab(vocab: &Vocabulary, mut writer: impl Write) -> Result<()> {
    for e in &vocab.entries {
        writeln!(writer, "{}\t{}\t{}\t{}", e.index, e.code, e.is_numeric, e.score)
            .map_err(|err| Error::io("<writer>", err))?;
    }
    Ok(())
}

pub fn read_vocab(reader: impl BufRead) -> Result<Vocabulary> {
    let mut entries = Vec::new();
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
        if parts.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 4 tab-separated fields, got {}", parts.len()),
            });
        }
        let index: usize = parts[0].parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("bad index {:?}", parts[0]),
        })?;
        if index != entries.len() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("indices must be dense, got {index}"),
            });
        }
        let is_numeric: bool = parts[2].parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("bad numeric flag {:?}", parts[2]),
        })?;
        let score: f64 = parts[3].parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("bad score {:?}", parts[3]),
        })?;
        entries.push(VocabEntry {
            code: parts[1].to_string(),
            index,
            is_numeric,
            score,
        });
    }
    if entries.is_empty() {
        return Err(Error::Validation("empty vocabulary file".into()));
    }
    Ok(Vocabulary::from_entries(entries))
}

pub fn write_vocab_file(vocab: &Vocabulary, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    write_vocab(vocab, std::io::BufWriter::new(file))
}

pub fn read_vocab_file(path: &Path) -> Result<Vocabulary> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_vocab(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_stream::Event;
    use rand::Rng;

    fn record(id: &str, codes: &[(&str, Option<f64>)]) -> PatientRecord {
        PatientRecord {
            patient_id: id.into(),
            events: codes
                .iter()
                .enumerate()
                .map(|(i, (code, value))| Event {
                    time: i as f64,
                    code: (*code).into(),
                    value: *value,
                })
                .collect(),
        }
    }

    #[test]
    fn entropy_endpoints_and_half() {
        assert_eq!(entropy(0.0).unwrap(), 0.0);
        assert_eq!(entropy(1.0).unwrap(), 0.0);
        assert!((entropy(0.5).unwrap() - 0.5 * 2.0_f64.ln()).abs() < 1e-15);
        assert!(entropy(-0.1).is_err());
        assert!(entropy(1.1).is_err());
    }

    #[test]
    fn conditional_entropy_cases() {
        // fully determined by parent presence
        assert_eq!(conditional_entropy(0.4, 0.0).unwrap(), 0.0);
        // even split
        let h = conditional_entropy(0.25, 0.25).unwrap();
        assert!((h - 0.5 * 2.0_f64.ln()).abs() < 1e-15);
        // absent code
        assert_eq!(conditional_entropy(0.0, 0.0).unwrap(), 0.0);
        assert!(conditional_entropy(-0.1, 0.2).is_err());
    }

    #[test]
    fn conditioning_never_increases_entropy_for_minority_codes() {
        // The bound H(m|n) <= H(m) holds whenever p(m) <= 1/2: the
        // conditional term is p * H_b(split) <= p ln 2 <= -p ln p. For
        // codes present in more than half of patients an even split
        // exceeds the marginal term, so the property is restricted to
        // the minority-code domain.
        let mut rng = crate::rng::stream(3, "cond-entropy");
        for _ in 0..2000 {
            let p = rng.gen_range(0.0..=0.5);
            let split = rng.gen_range(0.0..=1.0);
            let plus = p * split;
            let minus = p - plus;
            let h = entropy(p).unwrap();
            let hc = conditional_entropy(plus, minus).unwrap();
            assert!(hc <= h + 1e-12, "H(m|n)={hc} > H(m)={h} for p={p}");
        }
    }

    #[test]
    fn entropy_concave_peak_at_inv_e() {
        let peak = 1.0 / std::f64::consts::E;
        let h_peak = entropy(peak).unwrap();
        let mut prev = entropy(0.0).unwrap();
        let mut increasing = true;
        for i in 1..=1000 {
            let p = i as f64 / 1000.0;
            let h = entropy(p).unwrap();
            assert!(h <= h_peak + 1e-12);
            if p <= peak {
                assert!(h >= prev - 1e-12, "rising before the peak");
            } else if increasing {
                increasing = h >= prev;
            } else {
                assert!(h <= prev + 1e-12, "falling after the peak");
            }
            prev = h;
        }
    }

    #[test]
    fn stats_counting() {
        let records = vec![
            record("p1", &[("A", None), ("B", Some(1.0))]),
            record("p2", &[("A", None)]),
            record("p3", &[("B", Some(2.0)), ("B", Some(3.0))]),
            record("p4", &[("B", None)]),
        ];
        let stats = compute_code_stats(&records, None).unwrap();
        let a = stats.iter().find(|s| s.code == "A").unwrap();
        assert_eq!(a.patient_frequency, 0.5);
        assert!(!a.is_numeric);
        let b = stats.iter().find(|s| s.code == "B").unwrap();
        assert_eq!(b.patient_frequency, 0.75);
        // 3 of 4 B events carry values -> numeric at the 0.5 threshold
        assert!(b.is_numeric);
        assert!(stats.iter().all(|s| s.code == "A" || s.code == "B"));
        assert!(compute_code_stats(&[], None).is_err());
    }

    #[test]
    fn joint_with_parent_sums_to_marginal() {
        let mut ontology = HashMap::new();
        ontology.insert("child".to_string(), "parent".to_string());
        let records = vec![
            record("p1", &[("child", None), ("parent", None)]),
            record("p2", &[("child", None)]),
            record("p3", &[("parent", None)]),
            record("p4", &[("other", None)]),
        ];
        let stats = compute_code_stats(&records, Some(&ontology)).unwrap();
        let child = stats.iter().find(|s| s.code == "child").unwrap();
        let (present, absent) = child.joint_with_parent.unwrap();
        assert_eq!(present, 0.25);
        assert_eq!(absent, 0.25);
        assert!((present + absent - child.patient_frequency).abs() < 1e-12);
    }

    #[test]
    fn top_k_selection_drops_zero_entropy() {
        let stats = vec![
            CodeStats {
                code: "A".into(),
                patient_frequency: 0.5,
                is_numeric: false,
                joint_with_parent: None,
            },
            CodeStats {
                code: "B".into(),
                patient_frequency: 0.01,
                is_numeric: false,
                joint_with_parent: None,
            },
            CodeStats {
                code: "C".into(),
                patient_frequency: 1.0,
                is_numeric: false,
                joint_with_parent: None,
            },
        ];
        let built = build_vocabulary(&stats, 2, false).unwrap();
        let codes: Vec<&str> = built
            .vocabulary
            .entries()
            .iter()
            .map(|e| e.code.as_str())
            .collect();
        assert_eq!(codes, vec!["A", "B"]);
        assert!(!built.truncated);
    }

    #[test]
    fn k_larger_than_corpus_warns() {
        let stats = vec![CodeStats {
            code: "A".into(),
            patient_frequency: 0.5,
            is_numeric: false,
            joint_with_parent: None,
        }];
        let built = build_vocabulary(&stats, 5, false).unwrap();
        assert_eq!(built.vocabulary.len(), 1);
        assert!(built.truncated);
    }

    #[test]
    fn ties_break_lexicographically() {
        let mk = |code: &str| CodeStats {
            code: code.into(),
            patient_frequency: 0.3,
            is_numeric: false,
            joint_with_parent: None,
        };
        let built = build_vocabulary(&[mk("zeta"), mk("alpha")], 1, false).unwrap();
        assert_eq!(built.vocabulary.entry(0).code, "alpha");
    }

    #[test]
    fn vocabulary_invariant_to_record_order() {
        let mut records = vec![
            record("p1", &[("A", None), ("B", Some(1.0))]),
            record("p2", &[("C", None)]),
            record("p3", &[("B", Some(2.0)), ("A", None)]),
        ];
        let stats1 = compute_code_stats(&records, None).unwrap();
        let v1 = build_vocabulary(&stats1, 3, false).unwrap().vocabulary;
        records.reverse();
        let stats2 = compute_code_stats(&records, None).unwrap();
        let v2 = build_vocabulary(&stats2, 3, false).unwrap().vocabulary;
        assert_eq!(v1, v2);
    }

    #[test]
    fn vocab_file_round_trip() {
        let stats = vec![
            CodeStats {
                code: "lab".into(),
                patient_frequency: 0.4,
                is_numeric: true,
                joint_with_parent: None,
            },
            CodeStats {
                code: "dx".into(),
                patient_frequency: 0.2,
                is_numeric: false,
                joint_with_parent: None,
            },
        ];
        let vocab = build_vocabulary(&stats, 2, false).unwrap().vocabulary;
        let mut buf = Vec::new();
        write_vocab(&vocab, &mut buf).unwrap();
        let parsed = read_vocab(buf.as_slice()).unwrap();
        assert_eq!(parsed, vocab);
        let mut buf2 = Vec::new();
        write_vocab(&parsed, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }
}
