//! Causal sequence encoder and the factorized two-stage prediction head.
//!
//! Events enter as the sum of three embeddings: code, time-gap bucket
//! (log2-scaled gap to the previous event), and value bucket (via the
//! code's value bins, with a reserved "no value" row). A pre-norm
//! transformer with causal attention produces per-position embeddings E.
//! The head shares one projection `E -> [T, D2]` across all codes, then
//! applies a small per-code map: `D2 -> V` for numeric codes (softmax over
//! all T*V cells) or `D2 -> 1` (softmax over the T cells).

use std::collections::HashMap;

use std::path::Path;

use crate::autodiff::{fan_in_scale, param_init, Gradients, Tape, Tensor, VarId, MASK_FILL};
use crate::discretizer::BinGrid;
use crate::error::{Error, Result};
use crate::event_stream::PatientRecord;
use crate::objectives::{CodeDistribution, ObjectiveKind};
use crate::vocab::Vocabulary;

pub const GAP_BUCKETS: usize = 16;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub context_length: usize,
    /// Hidden width of the shared head projection.
    pub d_head: usize,
    pub time_bins: usize,
    pub value_bins: usize,
}

impl BackboneConfig {
    /// Small configuration every test suite can train in minutes.
    pub fn desk() -> Self {
        BackboneConfig {
            d_model: 64,
            layers: 2,
            heads: 2,
            context_length: 128,
            d_head: 32,
            time_bins: 4,
            value_bins: 4,
        }
    }

    /// Large preset shipped for parameter-count arithmetic only; training
    /// with it is rejected.
    pub fn paper_transformer() -> Self {
        BackboneConfig {
            d_model: 768,
            layers: 11,
            heads: 12,
            context_length: 8192,
            d_head: 512,
            time_bins: 8,
            value_bins: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d_model", self.d_model),
            ("layers", self.layers),
            ("heads", self.heads),
            ("context_length", self.context_length),
            ("d_head", self.d_head),
            ("time_bins", self.time_bins),
            ("value_bins", self.value_bins),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// Head parameter counts: the shared-projection factorization vs a direct
/// projection onto every code's cell grid. Biases excluded on both sides.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamCounts {
    pub factorized: usize,
    pub direct: usize,
    /// `1 - factorized/direct`; negative when the factorization is larger.
    pub reduction_ratio: f64,
}

pub fn count_parameters(config: &BackboneConfig, n_numeric: usize, n_nonnumeric: usize) -> ParamCounts {
    let (d, d2, t, v) = (config.d_model, config.d_head, config.time_bins, config.value_bins);
    let factorized = d * t * d2 + n_numeric * d2 * v + n_nonnumeric * d2;
    let direct = d * (t * v * n_numeric + t * n_nonnumeric);
    ParamCounts {
        factorized,
        direct,
        reduction_ratio: 1.0 - factorized as f64 / direct as f64,
    }
}

// ---- event embedding inputs ----

/// Row indices into the three embedding tables, one entry per event kept.
#[derive(Debug, Clone, PartialEq)]
pub struct EventInputs {
    pub code_rows: Vec<usize>,
    pub gap_rows: Vec<usize>,
    pub value_rows: Vec<usize>,
    /// Offset of the first kept event in the original record.
    pub offset: usize,
    pub truncated: bool,
}

impl EventInputs {
    pub fn len(&self) -> usize {
        self.code_rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.code_rows.is_empty()
    }
}

/// Gap bucket on a fixed log2 scale: 0 = no previous event, 1 = zero gap,
/// 2..=15 cover roughly eleven minutes to two months.
pub fn gap_bucket(gap: Option<f64>) -> usize {
    match gap {
        None => 0,
        Some(g) if g <= 0.0 => 1,
        Some(g) => {
            let b = g.log2().floor() + 7.0;
            2 + (b.clamp(0.0, (GAP_BUCKETS - 3) as f64) as usize)
        }
    }
}

/// Map a record (optionally truncated to the most recent `context_length`
/// events) onto embedding-table rows. Out-of-vocabulary codes share one
/// reserved row and the "no value" row.
pub fn embed_events(
    record: &PatientRecord,
    vocab: &Vocabulary,
    grids: &[BinGrid],
    config: &BackboneConfig,
) -> EventInputs {
    let n = record.events.len();
    let offset = n.saturating_sub(config.context_length);
    let events = &record.events[offset..];
    let mut inputs = EventInputs {
        code_rows: Vec::with_capacity(events.len()),
        gap_rows: Vec::with_capacity(events.len()),
        value_rows: Vec::with_capacity(events.len()),
        offset,
        truncated: offset > 0,
    };
    let no_value_row = config.value_bins;
    for (i, e) in events.iter().enumerate() {
        let code_idx = vocab.index_of(&e.code);
        inputs.code_rows.push(code_idx.unwrap_or(vocab.len()));
        let gap = if i == 0 {
            None
        } else {
            Some(e.time - events[i - 1].time)
        };
        inputs.gap_rows.push(gap_bucket(gap));
        let value_row = match (code_idx, e.value) {
            (Some(ci), Some(v)) => grids
                .get(ci)
                .and_then(|g| g.value_bin(v))
                .unwrap_or(no_value_row),
            _ => no_value_row,
        };
        inputs.value_rows.push(value_row);
    }
    inputs
}

// ---- model ----

#[derive(Debug, Clone)]
pub struct Model {
    pub config: BackboneConfig,
    pub objective: ObjectiveKind,
    /// Per-code numeric flags (decides head shapes under the joint objective).
    numeric: Vec<bool>,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Model {
    /// Fresh model with deterministic init from `seed`.
    pub fn new(
        config: BackboneConfig,
        objective: ObjectiveKind,
        vocab: &Vocabulary,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut model = Model {
            config,
            objective,
            numeric: vocab.entries().iter().map(|e| e.is_numeric).collect(),
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        };
        let d = config.d_model;
        let k = vocab.len();
        let mut rng = crate::rng::stream(seed, "param-init");
        let mut add = |model: &mut Model, name: String, shape: Vec<usize>, scale: f64| {
            let t = param_init(shape, scale, &mut rng).with_grad();
            model.push_param(name, t);
        };

        let es = fan_in_scale(d);
        add(&mut model, "embed.code".into(), vec![k + 1, d], es);
        add(&mut model, "embed.gap".into(), vec![GAP_BUCKETS, d], es);
        add(&mut model, "embed.value".into(), vec![config.value_bins + 1, d], es);

        for l in 0..config.layers {
            let p = |s: &str| format!("layer{l}.{s}");
            for gate in ["ln1", "ln2"] {
                model.push_param(p(&format!("{gate}.gain")), ones(vec![d]));
                model.push_param(p(&format!("{gate}.bias")), Tensor::zeros(vec![d]).with_grad());
            }
            for w in ["wq", "wk", "wv", "wo"] {
                add(&mut model, p(w), vec![d, d], fan_in_scale(d));
            }
            for b in ["bq", "bk", "bv", "bo"] {
                model.push_param(p(b), Tensor::zeros(vec![d]).with_grad());
            }
            add(&mut model, p("mlp.w1"), vec![d, 4 * d], fan_in_scale(d));
            model.push_param(p("mlp.b1"), Tensor::zeros(vec![4 * d]).with_grad());
            add(&mut model, p("mlp.w2"), vec![4 * d, d], fan_in_scale(4 * d));
            model.push_param(p("mlp.b2"), Tensor::zeros(vec![d]).with_grad());
        }
        model.push_param("final.gain".into(), ones(vec![d]));
        model.push_param("final.bias".into(), Tensor::zeros(vec![d]).with_grad());

        match objective {
            ObjectiveKind::Ntp => {
                add(&mut model, "head.ntp".into(), vec![d, k], fan_in_scale(d));
            }
            ObjectiveKind::Tpp | ObjectiveKind::Ora => {
                let (t, d2, v) = (config.time_bins, config.d_head, config.value_bins);
                add(&mut model, "head.stage1".into(), vec![d, t * d2], fan_in_scale(d));
                for code in 0..k {
                    let cells = if objective == ObjectiveKind::Ora && model.numeric[code] {
                        v
                    } else {
                        1
                    };
                    add(
                        &mut model,
                        format!("head.code{code}"),
                        vec![d2, cells],
                        fan_in_scale(d2),
                    );
                }
            }
        }
        Ok(model)
    }

    fn push_param(&mut self, name: String, tensor: Tensor) {
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
    }

    pub fn vocab_size(&self) -> usize {
        self.numeric.len()
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn total_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Register all parameters on a tape and return a forward-pass handle.
    pub fn begin(&self, tape: &mut Tape) -> ModelPass<'_> {
        let ids = self.tensors.iter().map(|t| tape.leaf(t)).collect();
        ModelPass { model: self, ids }
    }
}

fn ones(shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, vec![1.0; n])
        .expect("consistent shape")
        .with_grad()
}

/// One forward pass of a model over a tape; `ids[i]` is the tape leaf for
/// parameter `i`, so gradients can be read back in parameter order.
pub struct ModelPass<'m> {
    model: &'m Model,
    ids: Vec<VarId>,
}

impl<'m> ModelPass<'m> {
    fn p(&self, name: &str) -> VarId {
        self.ids[*self
            .model
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    pub fn param_ids(&self) -> &[VarId] {
        &self.ids
    }

    pub fn grad_for<'g>(&self, grads: &'g Gradients, name: &str) -> Option<&'g Tensor> {
        self.model.index.get(name).and_then(|&i| grads.get(self.ids[i]))
    }

    /// Encode a sequence of embedded events into per-position embeddings
    /// `E in [L, D]`. Position j depends only on events 0..=j.
    pub fn encode(&self, tape: &mut Tape, inputs: &EventInputs) -> Result<VarId> {
        if inputs.is_empty() {
            return Err(Error::Validation("cannot encode an empty sequence".into()));
        }
        let len = inputs.len();
        if len > self.model.config.context_length {
            return Err(Error::Validation(format!(
                "sequence length {len} exceeds context {}",
                self.model.config.context_length
            )));
        }
        let code = tape.gather_rows(self.p("embed.code"), &inputs.code_rows)?;
        let gap = tape.gather_rows(self.p("embed.gap"), &inputs.gap_rows)?;
        let value = tape.gather_rows(self.p("embed.value"), &inputs.value_rows)?;
        let mut x = tape.add(code, gap)?;
        x = tape.add(x, value)?;

        let cfg = &self.model.config;
        let dh = cfg.d_model / cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let causal: Vec<bool> = (0..len * len)
            .map(|i| (i % len) > (i / len))
            .collect();

        for l in 0..cfg.layers {
            let name = |s: &str| format!("layer{l}.{s}");
            let normed = self.layer_norm(tape, x, &name("ln1"))?;
            let q = self.linear(tape, normed, &name("wq"), &name("bq"))?;
            let k = self.linear(tape, normed, &name("wk"), &name("bk"))?;
            let v = self.linear(tape, normed, &name("wv"), &name("bv"))?;
            let mut heads = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let (a, b) = (h * dh, (h + 1) * dh);
                let qh = tape.slice_cols(q, a, b)?;
                let kh = tape.slice_cols(k, a, b)?;
                let vh = tape.slice_cols(v, a, b)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.affine(scores, scale, 0.0)?;
                let scores = tape.masked_fill(scores, &causal, MASK_FILL)?;
                let attn = tape.softmax_last(scores)?;
                heads.push(tape.matmul(attn, vh)?);
            }
            let ctx = tape.concat_cols(&heads)?;
            let attn_out = self.linear(tape, ctx, &name("wo"), &name("bo"))?;
            x = tape.add(x, attn_out)?;

            let normed = self.layer_norm(tape, x, &name("ln2"))?;
            let mid = self.linear(tape, normed, &name("mlp.w1"), &name("mlp.b1"))?;
            let mid = tape.gelu(mid)?;
            let out = self.linear(tape, mid, &name("mlp.w2"), &name("mlp.b2"))?;
            x = tape.add(x, out)?;
        }
        self.layer_norm(tape, x, "final")
    }

    fn linear(&self, tape: &mut Tape, x: VarId, w: &str, b: &str) -> Result<VarId> {
        let y = tape.matmul(x, self.p(w))?;
        tape.add_row(y, self.p(b))
    }

    fn layer_norm(&self, tape: &mut Tape, x: VarId, prefix: &str) -> Result<VarId> {
        let n = tape.layer_norm_last(x, LN_EPS)?;
        let n = tape.mul_row(n, self.p(&format!("{prefix}.gain")))?;
        tape.add_row(n, self.p(&format!("{prefix}.bias")))
    }

    /// Vocabulary logits for next-code prediction, one row per position.
    pub fn ntp_logits(&self, tape: &mut Tape, embeddings: VarId) -> Result<VarId> {
        tape.matmul(embeddings, self.p("head.ntp"))
    }

    /// Factorized head over anchor embeddings `[A, D]`: one discretized
    /// distribution per vocabulary code.
    pub fn code_heads(&self, tape: &mut Tape, anchors: VarId) -> Result<Vec<CodeDistribution>> {
        let cfg = &self.model.config;
        let a = tape.value(anchors).shape()[0];
        let (t, d2) = (cfg.time_bins, cfg.d_head);
        let shared = tape.matmul(anchors, self.p("head.stage1"))?; // [A, T*D2]
        let stacked = tape.reshape(shared, vec![a * t, d2])?;
        let mut out = Vec::with_capacity(self.model.vocab_size());
        for code in 0..self.model.vocab_size() {
            let w = self.p(&format!("head.code{code}"));
            let cells_per_bin = tape.value(w).shape()[1];
            let z = tape.matmul(stacked, w)?; // [A*T, vc]
            let z = tape.reshape(z, vec![a, t * cells_per_bin])?;
            out.push(CodeDistribution {
                code,
                value_cells: cells_per_bin,
                logits: z,
            });
        }
        Ok(out)
    }

    /// Normalized per-code probability cells at each anchor (softmax over
    /// all cells of that code).
    pub fn head_probabilities(
        &self,
        tape: &mut Tape,
        anchors: VarId,
    ) -> Result<Vec<(CodeDistribution, VarId)>> {
        let heads = self.code_heads(tape, anchors)?;
        heads
            .into_iter()
            .map(|h| Ok((h, tape.softmax_last(h.logits)?)))
            .collect()
    }
}

// ---- checkpoint format ----
// magic "ORACKPT1", version u32, entry count u32, then per entry:
//   name_len u32 | name bytes | rank u32 | dims u32 x rank | f32 LE data

const CHECKPOINT_MAGIC: &[u8; 8] = b"ORACKPT1";
const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(model.names.len() as u32).to_le_bytes());
    for (name, tensor) in model.names.iter().zip(&model.tensors) {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in tensor.data() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Load parameters into a freshly structured model. Every parameter the
/// structure expects must be present with the right shape; unknown
/// versions and stray entries are rejected.
pub fn read_checkpoint(
    path: &Path,
    config: BackboneConfig,
    objective: ObjectiveKind,
    vocab: &Vocabulary,
) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = ByteReader { data: &bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unknown checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let count = r.u32()? as usize;
    let mut entries: HashMap<String, Tensor> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 parameter name".into()))?;
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 3 {
            return Err(Error::Checkpoint(format!("parameter {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        entries.insert(name, Tensor::from_vec(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last entry".into()));
    }

    // seed value is irrelevant: every tensor gets overwritten
    let mut model = Model::new(config, objective, vocab, 0)?;
    for (name, slot) in model.names.iter().zip(model.tensors.iter_mut()) {
        let loaded = entries.remove(name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint is missing parameter {name}"))
        })?;
        if loaded.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: shape {:?} in file, {:?} expected",
                loaded.shape(),
                slot.shape()
            )));
        }
        *slot = loaded.with_grad();
    }
    if let Some(extra) = entries.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_stream::Event;
    use crate::vocab::{build_vocabulary, CodeStats};

    fn vocab(numeric: &[bool]) -> Vocabulary {
        let stats: Vec<CodeStats> = numeric
            .iter()
            .enumerate()
            .map(|(i, &is_numeric)| CodeStats {
                code: format!("c{i:02}"),
                // frequencies below 1/e, where entropy is increasing in p,
                // so descending p keeps the ranking aligned with i
                patient_frequency: 0.3 - i as f64 * 0.01,
                is_numeric,
                joint_with_parent: None,
            })
            .collect();
        build_vocabulary(&stats, numeric.len(), false).unwrap().vocabulary
    }

    fn tiny_config() -> BackboneConfig {
        BackboneConfig {
            d_model: 16,
            layers: 2,
            heads: 2,
            context_length: 16,
            d_head: 8,
            time_bins: 3,
            value_bins: 2,
        }
    }

    fn record(events: Vec<(f64, &str, Option<f64>)>) -> PatientRecord {
        PatientRecord {
            patient_id: "p".into(),
            events: events
                .into_iter()
                .map(|(time, code, value)| Event {
                    time,
                    code: code.into(),
                    value,
                })
                .collect(),
        }
    }

    fn grids_for(vocab: &Vocabulary, config: &BackboneConfig) -> Vec<BinGrid> {
        (0..vocab.len())
            .map(|code| BinGrid {
                code,
                time_edges: vec![1.0, 3.0],
                value_edges: if vocab.is_numeric(code) {
                    Some(vec![0.0])
                } else {
                    None
                },
                time_bins: config.time_bins,
                value_bins: config.value_bins,
            })
            .collect()
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::desk().validate().is_ok());
        let mut bad = BackboneConfig::desk();
        bad.heads = 3;
        assert!(bad.validate().is_err());
        bad = BackboneConfig::desk();
        bad.layers = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn desk_preset_parameter_counts() {
        let cfg = BackboneConfig::desk();
        let counts = count_parameters(&cfg, 10, 10);
        assert_eq!(counts.factorized, 9792);
        assert_eq!(counts.direct, 12800);
        assert!((counts.reduction_ratio - 0.235).abs() < 1e-12);
    }

    #[test]
    fn factorization_can_be_larger_and_is_reported_honestly() {
        // V=1 and an oversized shared projection make the factorization lose
        let cfg = BackboneConfig {
            d_model: 8,
            layers: 1,
            heads: 1,
            context_length: 8,
            d_head: 8 * 3,
            time_bins: 3,
            value_bins: 1,
        };
        let counts = count_parameters(&cfg, 0, 4);
        assert!(counts.factorized > counts.direct);
        assert!(counts.reduction_ratio < 0.0);
    }

    #[test]
    fn paper_preset_reports_both_counts() {
        let cfg = BackboneConfig::paper_transformer();
        let counts = count_parameters(&cfg, 3500, 3500);
        assert!(counts.factorized > 0 && counts.direct > 0);
        // the ratio is reported, not asserted against any external figure
        assert!(counts.reduction_ratio.is_finite());
    }

    #[test]
    fn gap_bucket_scale() {
        assert_eq!(gap_bucket(None), 0);
        assert_eq!(gap_bucket(Some(0.0)), 1);
        assert_eq!(gap_bucket(Some(1e-9)), 2);
        assert!(gap_bucket(Some(0.5)) < gap_bucket(Some(5.0)));
        assert_eq!(gap_bucket(Some(1e9)), GAP_BUCKETS - 1);
    }

    #[test]
    fn embed_inputs_and_truncation() {
        let v = vocab(&[true, false]);
        let cfg = tiny_config();
        let grids = grids_for(&v, &cfg);
        let r = record(vec![
            (0.0, "c00", Some(-1.0)),
            (0.0, "c01", None),
            (2.0, "unknown", Some(9.0)),
        ]);
        let inputs = embed_events(&r, &v, &grids, &cfg);
        assert_eq!(inputs.code_rows, vec![0, 1, 2]); // OOV -> reserved row
        assert_eq!(inputs.gap_rows[0], 0); // no previous
        assert_eq!(inputs.gap_rows[1], 1); // zero gap
        assert_eq!(inputs.value_rows, vec![0, cfg.value_bins, cfg.value_bins]);
        assert!(!inputs.truncated);

        let mut long = Vec::new();
        for i in 0..40 {
            long.push((i as f64, "c00", None));
        }
        let inputs = embed_events(&record(long), &v, &grids, &cfg);
        assert!(inputs.truncated);
        assert_eq!(inputs.len(), cfg.context_length);
        assert_eq!(inputs.offset, 40 - cfg.context_length);
    }

    #[test]
    fn identical_events_embed_identically() {
        let v = vocab(&[false]);
        let cfg = tiny_config();
        let r = record(vec![(1.0, "c00", None), (1.0, "c00", None)]);
        let inputs = embed_events(&r, &v, &[], &cfg);
        // same code row, same value row; gaps differ only through order
        assert_eq!(inputs.code_rows[0], inputs.code_rows[1]);
        assert_eq!(inputs.value_rows[0], inputs.value_rows[1]);
    }

    #[test]
    fn median_value_lands_in_middle_bucket() {
        let v = vocab(&[true]);
        let cfg = BackboneConfig {
            value_bins: 4,
            ..tiny_config()
        };
        let grid = BinGrid {
            code: 0,
            time_edges: vec![1.0],
            value_edges: Some(vec![-1.0, 0.5, 2.0]), // quartile edges; 0.5 is the median
            time_bins: cfg.time_bins,
            value_bins: 4,
        };
        let r = record(vec![(0.0, "c00", Some(0.5))]);
        let inputs = embed_events(&r, &v, &[grid], &cfg);
        assert_eq!(inputs.value_rows[0], 2); // floor(V/2) under boundary-right
    }

    #[test]
    fn encode_is_causal_bitwise() {
        let v = vocab(&[true, false, false]);
        let cfg = tiny_config();
        let grids = grids_for(&v, &cfg);
        let model = Model::new(cfg, ObjectiveKind::Ora, &v, 5).unwrap();

        let base = record(vec![
            (0.0, "c00", Some(-2.0)),
            (1.0, "c01", None),
            (2.5, "c02", None),
            (4.0, "c01", None),
        ]);
        let mut changed = base.clone();
        changed.events[3] = Event {
            time: 9.0,
            code: "c00".into(),
            value: Some(3.0),
        };

        let run = |r: &PatientRecord| -> Vec<Vec<f64>> {
            let inputs = embed_events(r, &v, &grids, &cfg);
            let mut tape = Tape::new();
            let pass = model.begin(&mut tape);
            let e = pass.encode(&mut tape, &inputs).unwrap();
            let t = tape.value(e);
            let d = t.shape()[1];
            (0..t.shape()[0])
                .map(|i| t.data()[i * d..(i + 1) * d].to_vec())
                .collect()
        };
        let a = run(&base);
        let b = run(&changed);
        for j in 0..3 {
            assert_eq!(a[j], b[j], "position {j} must ignore later events");
        }
        assert_ne!(a[3], b[3]);
    }

    #[test]
    fn encode_single_event_is_finite() {
        let v = vocab(&[false]);
        let cfg = tiny_config();
        let model = Model::new(cfg, ObjectiveKind::Ntp, &v, 1).unwrap();
        let inputs = embed_events(&record(vec![(0.0, "c00", None)]), &v, &[], &cfg);
        let mut tape = Tape::new();
        let pass = model.begin(&mut tape);
        let e = pass.encode(&mut tape, &inputs).unwrap();
        assert!(tape.value(e).all_finite());
        assert_eq!(tape.value(e).shape(), &[1, cfg.d_model]);
    }

    #[test]
    fn permuting_events_with_distinct_times_changes_outputs() {
        let v = vocab(&[false, false]);
        let cfg = tiny_config();
        let model = Model::new(cfg, ObjectiveKind::Ntp, &v, 2).unwrap();
        let a = record(vec![(0.0, "c00", None), (1.0, "c01", None), (3.0, "c00", None)]);
        let b = record(vec![(0.0, "c01", None), (1.0, "c00", None), (3.0, "c00", None)]);
        let run = |r: &PatientRecord| -> Vec<f64> {
            let inputs = embed_events(r, &v, &[], &cfg);
            let mut tape = Tape::new();
            let pass = model.begin(&mut tape);
            let e = pass.encode(&mut tape, &inputs).unwrap();
            tape.value(e).data().to_vec()
        };
        assert_ne!(run(&a), run(&b));
    }

    #[test]
    fn head_outputs_normalize_and_zero_init_is_uniform() {
        let v = vocab(&[true, false]);
        let cfg = tiny_config();
        let mut model = Model::new(cfg, ObjectiveKind::Ora, &v, 3).unwrap();

        // zero the per-code stage-2 maps -> exactly uniform cells
        for (name, tensor) in model.names.clone().iter().zip(model.tensors.iter_mut()) {
            if name.starts_with("head.code") {
                tensor.data_mut().fill(0.0);
            }
        }
        let mut tape = Tape::new();
        let pass = model.begin(&mut tape);
        let anchors = tape.constant(Tensor::matrix(2, cfg.d_model, vec![0.3; 2 * cfg.d_model]).unwrap());
        let probs = pass.head_probabilities(&mut tape, anchors).unwrap();
        assert_eq!(probs.len(), 2);
        for (head, p) in &probs {
            let cells = cfg.time_bins * head.value_cells;
            let data = tape.value(*p).data();
            for row in 0..2 {
                let s: f64 = data[row * cells..(row + 1) * cells].iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                for &x in &data[row * cells..(row + 1) * cells] {
                    assert!((x - 1.0 / cells as f64).abs() < 1e-12);
                }
            }
        }
        // numeric code gets T*V cells, plain code gets T
        assert_eq!(probs[0].0.value_cells, cfg.value_bins);
        assert_eq!(probs[1].0.value_cells, 1);
    }

    #[test]
    fn head_normalization_random_inputs() {
        let v = vocab(&[true, true, false]);
        let cfg = tiny_config();
        let model = Model::new(cfg, ObjectiveKind::Ora, &v, 8).unwrap();
        let mut rng = crate::rng::stream(9, "head-norm");
        use rand::Rng;
        let data: Vec<f64> = (0..3 * cfg.d_model).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let pass = model.begin(&mut tape);
        let anchors = tape.constant(Tensor::matrix(3, cfg.d_model, data).unwrap());
        for (head, p) in pass.head_probabilities(&mut tape, anchors).unwrap() {
            let cells = cfg.time_bins * head.value_cells;
            for row in 0..3 {
                let s: f64 = tape.value(p).data()[row * cells..(row + 1) * cells].iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_version_gate() {
        let v = vocab(&[true, false]);
        let cfg = tiny_config();
        let model = Model::new(cfg, ObjectiveKind::Ora, &v, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        write_checkpoint(&model, &path).unwrap();
        let loaded = read_checkpoint(&path, cfg, ObjectiveKind::Ora, &v).unwrap();
        assert_eq!(loaded.names, model.names);
        for (a, b) in loaded.tensors.iter().zip(&model.tensors) {
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, *y as f32 as f64, "f32 round trip");
            }
        }

        // corrupt the version field
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99;
        std::fs::write(&path, &bytes).unwrap();
        let err = read_checkpoint(&path, cfg, ObjectiveKind::Ora, &v).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
