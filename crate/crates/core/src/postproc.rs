//! Online post-processing: per-frame NMS, the rolling confidence buffer, the
//! suppression network that decides which survivors to emit, the append-only
//! emitted set, and an auditor for the online constraint.

use std::collections::VecDeque;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, ByteReader, ByteWriter};
use crate::error::{HatError, Result};
use crate::eval::{tiou, Detection};
use crate::numerics::{Linear, NodeId, ParamStore, Scalar, Tape, Tensor};
use crate::prediction::ActionProposal;

pub const OSN_HIDDEN: usize = 128;
const OSN_MAGIC: &[u8; 4] = b"HATO";
const OSN_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PostprocConfig {
    pub theta_nms: f64,
    pub theta_s: f64,
    pub theta_dup: f64,
    pub osn_targets: OsnTargets,
}

/// Which frame of an offline-NMS cluster the suppression network learns to fire on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OsnTargets {
    /// The frame holding the proposal offline NMS keeps.
    Peak,
    /// The earliest frame holding a member of the kept proposal's cluster.
    #[default]
    Onset,
}

impl std::str::FromStr for OsnTargets {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "peak" => Ok(OsnTargets::Peak),
            "onset" => Ok(OsnTargets::Onset),
            other => Err(format!("unknown suppression target rule `{other}` (peak|onset)")),
        }
    }
}

impl std::fmt::Display for OsnTargets {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OsnTargets::Peak => "peak",
            OsnTargets::Onset => "onset",
        })
    }
}

impl Default for PostprocConfig {
    fn default() -> Self {
        PostprocConfig {
            theta_nms: 0.5,
            theta_s: 0.5,
            theta_dup: 0.5,
            osn_targets: OsnTargets::Onset,
        }
    }
}

impl PostprocConfig {
    pub fn violations(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        for (k, x) in [
            ("postproc.theta_nms", self.theta_nms),
            ("postproc.theta_s", self.theta_s),
            ("postproc.theta_dup", self.theta_dup),
        ] {
            if !(0.0..=1.0).contains(&x) {
                v.push((k, format!("must lie in [0, 1], got {x}")));
            }
        }
        v
    }
}

/// Descending score, then shorter segment, then lower class id.
fn nms_order(a: &ActionProposal, b: &ActionProposal) -> std::cmp::Ordering {
    b.score()
        .total_cmp(&a.score())
        .then(a.length().total_cmp(&b.length()))
        .then(a.class_id().cmp(&b.class_id()))
}

/// Greedy same-class NMS over the proposals of one step; background-argmax
/// proposals are dropped first.
pub fn frame_nms(proposals: &[ActionProposal], theta_nms: f64) -> Vec<ActionProposal> {
    let mut candidates: Vec<&ActionProposal> = proposals.iter().filter(|p| !p.is_background()).collect();
    candidates.sort_by(|a, b| nms_order(a, b));
    let mut kept: Vec<ActionProposal> = Vec::new();
    for p in candidates {
        let clear = kept
            .iter()
            .filter(|k| k.class_id() == p.class_id())
            .all(|k| tiou(k.segment(), p.segment()) <= theta_nms);
        if clear {
            kept.push(p.clone());
        }
    }
    kept
}

/// Drops proposals whose end lies beyond what the regression head may reach.
pub fn within_reach(proposals: Vec<ActionProposal>, t: u32, reach: f64) -> Vec<ActionProposal> {
    proposals
        .into_iter()
        .filter(|p| p.end <= t as f64 + reach)
        .collect()
}

/// Per-class maximum score among the proposals, zero for absent classes.
pub fn frame_confidences(survivors: &[ActionProposal], classes: usize) -> Vec<f64> {
    let mut row = vec![0.0f64; classes];
    for p in survivors {
        let j = p.class_id();
        row[j] = row[j].max(p.score());
    }
    row
}

/// The last `L_s` per-class confidence rows, oldest first, zero-filled at start.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceBuffer {
    classes: usize,
    rows: VecDeque<Vec<f64>>,
}

impl ConfidenceBuffer {
    pub fn new(l_s: usize, classes: usize) -> Self {
        ConfidenceBuffer {
            classes,
            rows: std::iter::repeat_n(vec![0.0; classes], l_s).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn push(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.classes {
            return Err(HatError::dim(
                "ConfidenceBuffer::push",
                format!("row of {} for {} classes", row.len(), self.classes),
            ));
        }
        if !self.rows.is_empty() {
            self.rows.pop_front();
            self.rows.push_back(row);
        }
        Ok(())
    }

    /// Row-major `L_s × C`.
    pub fn snapshot(&self) -> Vec<f64> {
        self.rows.iter().flatten().copied().collect()
    }
}

/// Flattened buffer → hidden ReLU layer → per-class sigmoid.
#[derive(Clone, Debug)]
pub struct Osn {
    pub hidden: Linear,
    pub output: Linear,
    pub input_dim: usize,
    pub classes: usize,
}

impl Osn {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        l_s: usize,
        classes: usize,
    ) -> Result<Self> {
        let input_dim = l_s * classes;
        Ok(Osn {
            hidden: Linear::new(store, rng, "osn.hidden", input_dim, OSN_HIDDEN)?,
            output: Linear::new(store, rng, "osn.output", OSN_HIDDEN, classes)?,
            input_dim,
            classes,
        })
    }

    /// Logits for a batch of flattened buffers (`N × input_dim`).
    pub fn logits<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: NodeId) -> Result<NodeId> {
        let h = self.hidden.forward(tape, x)?;
        let h = tape.relu(h);
        self.output.forward(tape, h)
    }

    pub fn probabilities<T: Scalar>(&self, store: &ParamStore<T>, snapshot: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(store);
        let x = tape.input(Tensor::new(
            vec![1, snapshot.len()],
            snapshot.iter().map(|&v| T::of(v)).collect(),
        )?);
        let z = self.logits(&mut tape, x)?;
        let p = tape.sigmoid(z);
        Ok(tape.value(p).data().iter().map(|v| v.f64()).collect())
    }
}

/// Masked binary cross-entropy over sigmoid logits; targets of `-1` are ignored.
/// Returns the summed loss node and the number of supervised entries.
pub fn osn_loss<T: Scalar>(tape: &mut Tape<'_, T>, logits: NodeId, targets: &[f32]) -> Result<(NodeId, usize)> {
    let z = tape.value(logits).cast::<f64>();
    if z.len() != targets.len() {
        return Err(HatError::dim("osn_loss", format!("{} logits vs {} targets", z.len(), targets.len())));
    }
    let mut grad = Tensor::zeros(z.shape());
    let mut value = 0.0;
    let mut count = 0;
    for (i, &y) in targets.iter().enumerate() {
        if y < 0.0 {
            continue;
        }
        let (v, g) = crate::losses::binary_afl_logit(z.data()[i], y > 0.5, 0.0);
        value += v;
        grad.data_mut()[i] = g;
        count += 1;
    }
    Ok((tape.scalar_fn(logits, T::of(value), grad.cast())?, count))
}

/// Ψ. Entries can only be appended.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmittedInstanceSet {
    items: Vec<ActionProposal>,
}

impl EmittedInstanceSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, p: ActionProposal) -> usize {
        self.items.push(p);
        self.items.len() - 1
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn as_slice(&self) -> &[ActionProposal] {
        &self.items
    }

    pub fn into_vec(self) -> Vec<ActionProposal> {
        self.items
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TraceEvent {
    /// The model read feature frame `frame` while processing step `t`.
    Read { t: u32, frame: u32 },
    Append { t: u32, index: usize, proposal: ActionProposal },
    Revise { t: u32, index: usize, proposal: ActionProposal },
    Remove { t: u32, index: usize },
}

impl TraceEvent {
    pub fn step(&self) -> u32 {
        match self {
            TraceEvent::Read { t, .. }
            | TraceEvent::Append { t, .. }
            | TraceEvent::Revise { t, .. }
            | TraceEvent::Remove { t, .. } => *t,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AuditTrace {
    pub events: Vec<TraceEvent>,
}

impl AuditTrace {
    pub fn record(&mut self, e: TraceEvent) {
        self.events.push(e);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub passed: bool,
    pub events: usize,
    pub appended: usize,
    /// `(event index, description)`.
    pub violations: Vec<(usize, String)>,
}

/// Checks that reads never look past the current step, that Ψ only grows at its
/// tail, and that no emitted end lies beyond `t + reach`.
pub fn audit_online(trace: &AuditTrace, reach: f64) -> Result<AuditReport> {
    let mut violations = Vec::new();
    let mut last_t = 0;
    let mut appended = 0usize;
    for (i, e) in trace.events.iter().enumerate() {
        if e.step() < last_t {
            return Err(HatError::Config(format!(
                "malformed trace: event {i} at step {} follows step {last_t}",
                e.step()
            )));
        }
        last_t = e.step();
        match e {
            TraceEvent::Read { t, frame } => {
                if frame >= t {
                    violations.push((i, format!("step {t} read future frame {frame}")));
                }
            }
            TraceEvent::Append { t, index, proposal } => {
                if *index != appended {
                    violations.push((i, format!("step {t} wrote Ψ[{index}] while Ψ holds {appended}")));
                }
                if proposal.emission_time != *t {
                    violations.push((
                        i,
                        format!("step {t} appended a proposal stamped {}", proposal.emission_time),
                    ));
                }
                if proposal.end > *t as f64 + reach {
                    violations.push((i, format!("step {t} emitted end {} beyond reach {reach}", proposal.end)));
                }
                appended = appended.max(*index + 1);
            }
            TraceEvent::Revise { t, index, .. } => {
                violations.push((i, format!("step {t} revised Ψ[{index}]")));
            }
            TraceEvent::Remove { t, index } => {
                violations.push((i, format!("step {t} removed Ψ[{index}]")));
            }
        }
    }
    Ok(AuditReport {
        passed: violations.is_empty(),
        events: trace.events.len(),
        appended,
        violations,
    })
}

/// Decides which frame-NMS survivors are emitted.
pub enum Gate<'a, T: Scalar> {
    Osn { osn: &'a Osn, store: &'a ParamStore<T> },
    /// Uses the buffered confidence of the current frame as the probability.
    Score,
}

impl<T: Scalar> Gate<'_, T> {
    fn probabilities(&self, buffer: &ConfidenceBuffer) -> Result<Vec<f64>> {
        match self {
            Gate::Osn { osn, store } => osn.probabilities(*store, &buffer.snapshot()),
            Gate::Score => {
                let snap = buffer.snapshot();
                let c = buffer.classes();
                Ok(if snap.len() >= c {
                    snap[snap.len() - c..].to_vec()
                } else {
                    vec![0.0; c]
                })
            }
        }
    }
}

/// Per-stream online selection state: buffer, Ψ and the audit trace.
#[derive(Clone, Debug)]
pub struct OnlineSelector {
    pub config: PostprocConfig,
    pub buffer: ConfidenceBuffer,
    pub psi: EmittedInstanceSet,
    pub trace: AuditTrace,
}

impl OnlineSelector {
    pub fn new(config: PostprocConfig, l_s: usize, classes: usize) -> Self {
        OnlineSelector {
            config,
            buffer: ConfidenceBuffer::new(l_s, classes),
            psi: EmittedInstanceSet::new(),
            trace: AuditTrace::default(),
        }
    }

    /// Pushes this step's confidences, scores the buffer, and appends every
    /// survivor whose class probability exceeds `θ_s` and which does not
    /// duplicate an emitted same-class instance.
    pub fn step<T: Scalar>(&mut self, t: u32, survivors: &[ActionProposal], gate: &Gate<'_, T>) -> Result<Vec<ActionProposal>> {
        self.buffer.push(frame_confidences(survivors, self.buffer.classes()))?;
        let probs = gate.probabilities(&self.buffer)?;
        let mut emitted = Vec::new();
        for p in survivors {
            let j = p.class_id();
            if probs[j] <= self.config.theta_s {
                continue;
            }
            let duplicate = self
                .psi
                .as_slice()
                .iter()
                .any(|e| e.class_id() == j && tiou(e.segment(), p.segment()) > self.config.theta_dup);
            if duplicate {
                continue;
            }
            let index = self.psi.append(p.clone());
            self.trace.record(TraceEvent::Append {
                t,
                index,
                proposal: p.clone(),
            });
            emitted.push(p.clone());
        }
        Ok(emitted)
    }
}

/// One step of a recorded inference pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordedFrame {
    pub t: u32,
    pub survivors: Vec<ActionProposal>,
    /// Buffer contents after pushing this step's confidences.
    pub snapshot: Vec<f64>,
}

/// Offline per-class greedy NMS over every survivor of a video. Returns the
/// kept `(frame index, survivor index)` pairs.
pub fn offline_nms(frames: &[RecordedFrame], theta_nms: f64) -> Vec<(usize, usize)> {
    let mut all: Vec<(usize, usize, &ActionProposal)> = frames
        .iter()
        .enumerate()
        .flat_map(|(f, fr)| fr.survivors.iter().enumerate().map(move |(k, p)| (f, k, p)))
        .collect();
    all.sort_by(|a, b| nms_order(a.2, b.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut kept: Vec<(usize, usize, &ActionProposal)> = Vec::new();
    for c in all {
        if kept
            .iter()
            .filter(|k| k.2.class_id() == c.2.class_id())
            .all(|k| tiou(k.2.segment(), c.2.segment()) <= theta_nms)
        {
            kept.push(c);
        }
    }
    let mut out: Vec<(usize, usize)> = kept.into_iter().map(|k| (k.0, k.1)).collect();
    out.sort();
    out
}

/// Moves every kept proposal to the earliest survivor it would suppress. A
/// survivor belongs to the same-class kept proposal it overlaps most.
fn cluster_onsets(frames: &[RecordedFrame], kept: &[(usize, usize)], theta_nms: f64) -> Vec<(usize, usize)> {
    let proposal = |(f, k): (usize, usize)| &frames[f].survivors[k];
    let mut onset: Vec<(usize, usize)> = kept.to_vec();
    for (f, frame) in frames.iter().enumerate() {
        for (k, p) in frame.survivors.iter().enumerate() {
            let best = kept
                .iter()
                .enumerate()
                .filter(|(_, &c)| proposal(c).class_id() == p.class_id())
                .map(|(i, &c)| (i, tiou(proposal(c).segment(), p.segment())))
                .filter(|&(_, o)| o > theta_nms)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            if let Some((i, _)) = best {
                if (f, k) < onset[i] {
                    onset[i] = (f, k);
                }
            }
        }
    }
    onset.sort();
    onset.dedup();
    onset
}

/// Training table for the suppression network. Targets are `C` wide: the
/// row's class holds 0 or 1, every other entry is `-1` (unsupervised).
#[derive(Clone, Debug, PartialEq)]
pub struct OsnDataset {
    pub input_dim: usize,
    pub classes: usize,
    pub inputs: Vec<f32>,
    pub targets: Vec<f32>,
}

impl OsnDataset {
    pub fn new(input_dim: usize, classes: usize) -> Self {
        OsnDataset {
            input_dim,
            classes,
            inputs: Vec::new(),
            targets: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        if self.classes == 0 {
            0
        } else {
            self.targets.len() / self.classes
        }
    }

    pub fn input(&self, r: usize) -> &[f32] {
        &self.inputs[r * self.input_dim..(r + 1) * self.input_dim]
    }

    pub fn target(&self, r: usize) -> &[f32] {
        &self.targets[r * self.classes..(r + 1) * self.classes]
    }

    pub fn extend(&mut self, other: &OsnDataset) -> Result<()> {
        if (other.input_dim, other.classes) != (self.input_dim, self.classes) {
            return Err(HatError::dim("OsnDataset::extend", "datasets have different widths"));
        }
        self.inputs.extend_from_slice(&other.inputs);
        self.targets.extend_from_slice(&other.targets);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = ByteWriter::new();
        w.bytes(OSN_MAGIC);
        w.u32(OSN_VERSION);
        w.u32(self.rows() as u32);
        w.u32(self.input_dim as u32);
        w.u32(self.classes as u32);
        w.f32s(&self.inputs);
        w.f32s(&self.targets);
        w.write_to(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let data = read_file(path)?;
        let mut r = ByteReader::new(path, &data);
        r.magic(OSN_MAGIC)?;
        r.version(OSN_VERSION)?;
        let rows = r.u32("rows")? as usize;
        let input_dim = r.u32("input_dim")? as usize;
        let classes = r.u32("classes")? as usize;
        let inputs = r.f32s(rows * input_dim, "inputs")?;
        let targets = r.f32s(rows * classes, "targets")?;
        r.finish()?;
        Ok(OsnDataset {
            input_dim,
            classes,
            inputs,
            targets,
        })
    }
}

/// One row per (frame, class with a survivor). The target is 1 iff offline NMS
/// over the whole video keeps one of that frame's proposals of that class.
pub fn build_osn_training_set(
    frames: &[RecordedFrame],
    classes: usize,
    theta_nms: f64,
    rule: OsnTargets,
) -> Result<OsnDataset> {
    let first = frames
        .first()
        .ok_or_else(|| HatError::Empty("no recorded frames for the suppression-network dataset".into()))?;
    let input_dim = first.snapshot.len();
    let mut kept = offline_nms(frames, theta_nms);
    if rule == OsnTargets::Onset {
        kept = cluster_onsets(frames, &kept, theta_nms);
    }
    let mut ds = OsnDataset::new(input_dim, classes);
    for (f, frame) in frames.iter().enumerate() {
        if frame.snapshot.len() != input_dim {
            return Err(HatError::dim("build_osn_training_set", "snapshot widths differ between frames"));
        }
        let mut present: Vec<usize> = frame.survivors.iter().map(|p| p.class_id()).collect();
        present.sort();
        present.dedup();
        for j in present {
            let positive = frame
                .survivors
                .iter()
                .enumerate()
                .any(|(k, p)| p.class_id() == j && kept.binary_search(&(f, k)).is_ok());
            ds.inputs.extend(frame.snapshot.iter().map(|&v| v as f32));
            let mut row = vec![-1.0f32; classes];
            row[j] = if positive { 1.0 } else { 0.0 };
            ds.targets.extend(row);
        }
    }
    Ok(ds)
}

/// One line of a proposals or Ψ file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub emission_time: u32,
    pub start: f64,
    pub end: f64,
    pub class_id: usize,
    pub score: f64,
}

impl From<&ActionProposal> for ProposalRecord {
    fn from(p: &ActionProposal) -> Self {
        ProposalRecord {
            emission_time: p.emission_time,
            start: p.start,
            end: p.end,
            class_id: p.class_id(),
            score: p.score(),
        }
    }
}

impl ProposalRecord {
    pub fn detection(&self, video: &str) -> Detection {
        Detection {
            video: video.to_string(),
            class: self.class_id,
            start: self.start,
            end: self.end,
            score: self.score,
            emission_time: self.emission_time,
        }
    }
}

pub fn write_proposals(path: &Path, proposals: &[ActionProposal]) -> Result<()> {
    let csv_err = |e: csv::Error| HatError::Config(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if proposals.is_empty() {
        w.write_record(["emission_time", "start", "end", "class_id", "score"])
            .map_err(csv_err)?;
    }
    for p in proposals {
        w.serialize(ProposalRecord::from(p)).map_err(csv_err)?;
    }
    w.flush().map_err(|e| HatError::io(path, e))
}

pub fn read_proposals(path: &Path) -> Result<Vec<ProposalRecord>> {
    let display = path.display().to_string();
    let mut r = csv::Reader::from_path(path).map_err(|e| HatError::Config(format!("{display}: {e}")))?;
    let mut out = Vec::new();
    for (i, rec) in r.deserialize().enumerate() {
        let rec: ProposalRecord = rec.map_err(|e| HatError::Parse {
            path: display.clone(),
            line: i + 2,
            detail: e.to_string(),
        })?;
        if !(rec.end > rec.start) {
            return Err(HatError::Parse {
                path: display.clone(),
                line: i + 2,
                detail: format!("end {} is not after start {}", rec.end, rec.start),
            });
        }
        out.push(rec);
    }
    Ok(out)
}
