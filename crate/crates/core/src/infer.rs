//! Strictly left-to-right streaming inference over one video.

use crate::error::Result;
use crate::model::HatModel;
use crate::numerics::{ParamStore, Scalar, Tape, Tensor};
use crate::postproc::{
    frame_nms, within_reach, AuditTrace, ConfidenceBuffer, Gate, OnlineSelector, RecordedFrame, TraceEvent,
    frame_confidences,
};
use crate::prediction::{anchor_geometry, decode_proposals, ActionProposal};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GateKind {
    /// The trained suppression network.
    #[default]
    Osn,
    /// The current frame's confidence stands in for the network's probability.
    Score,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct InferenceOptions {
    pub audit: bool,
    pub attention: bool,
    pub gate: GateKind,
}

pub struct StepOutput {
    pub survivors: Vec<ActionProposal>,
    /// Feature frames the model read at this step.
    pub read: Vec<usize>,
    /// `(absolute frame, mass)` over the history part of the queue.
    pub attention: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, Default)]
pub struct InferenceResult {
    /// Frame-NMS survivors of every step, in step order.
    pub proposals: Vec<ActionProposal>,
    /// Ψ, in emission order.
    pub psi: Vec<ActionProposal>,
    pub trace: Option<AuditTrace>,
    /// Attention mass summed per absolute frame over all steps.
    pub attention: Vec<(usize, f64)>,
    /// Per-step attention, `(t, [(frame, mass)])`, when requested.
    pub attention_steps: Vec<(u32, Vec<(usize, f64)>)>,
}

/// Runs the network on the queue ending at `t` and returns its frame-NMS survivors.
pub fn step<T: Scalar>(
    model: &HatModel,
    store: &ParamStore<T>,
    features: &Tensor<f32>,
    t: usize,
    want_attention: bool,
) -> Result<StepOutput> {
    let cfg = &model.config;
    let mut tape = Tape::new(store);
    let (h, s, read) = model.inputs_traced(&mut tape, features, t)?;
    let out = model.forward(&mut tape, h, s, false)?;
    tape.check_finite()?;
    let z_c = tape.value(out.heads.z_c).cast::<f64>();
    let z_o: Vec<f64> = tape.value(out.heads.z_o).data().iter().map(|v| v.f64()).collect();
    let z_l: Vec<f64> = tape.value(out.heads.z_l).data().iter().map(|v| v.f64()).collect();
    let geometry = anchor_geometry(t, &cfg.anchor.sizes);
    let decoded = decode_proposals(&z_c, &z_o, &z_l, &geometry, t as u32)?;
    let reach = cfg.anchor.max_size() as f64;
    let survivors = frame_nms(&within_reach(decoded, t as u32, reach), cfg.postproc.theta_nms);
    let mut attention = Vec::new();
    if want_attention && !out.history_attention.is_empty() {
        let l_h = model.l_h();
        let first = t as isize - cfg.l_q() as isize;
        for (r, m) in crate::history::export_history_attention(&tape, &out.history_attention, l_h) {
            let frame = first + r as isize;
            if frame >= 0 {
                attention.push((frame as usize, m));
            }
        }
    }
    Ok(StepOutput {
        survivors,
        read,
        attention,
    })
}

/// Processes steps `1..=T` in order, emitting into Ψ through the online selector.
pub fn run_stream<T: Scalar>(
    model: &HatModel,
    store: &ParamStore<T>,
    features: &Tensor<f32>,
    options: InferenceOptions,
) -> Result<InferenceResult> {
    let cfg = &model.config;
    let mut selector = OnlineSelector::new(cfg.postproc, cfg.anchor.l_s, cfg.classes);
    let gate = match options.gate {
        GateKind::Osn => Gate::Osn { osn: &model.osn, store },
        GateKind::Score => Gate::Score,
    };
    let mut result = InferenceResult::default();
    let mut totals = vec![0.0f64; features.rows()];
    for t in 1..=features.rows() {
        let out = step(model, store, features, t, options.attention)?;
        if options.audit {
            for &frame in &out.read {
                selector.trace.record(TraceEvent::Read {
                    t: t as u32,
                    frame: frame as u32,
                });
            }
        }
        selector.step(t as u32, &out.survivors, &gate)?;
        if options.attention {
            for &(f, m) in &out.attention {
                totals[f] += m;
            }
            result.attention_steps.push((t as u32, out.attention));
        }
        result.proposals.extend(out.survivors);
    }
    if options.attention {
        result.attention = totals.into_iter().enumerate().collect();
    }
    result.psi = selector.psi.into_vec();
    if options.audit {
        result.trace = Some(selector.trace);
    }
    Ok(result)
}

/// Records survivors and buffer snapshots for building the suppression-network dataset.
pub fn record_stream<T: Scalar>(
    model: &HatModel,
    store: &ParamStore<T>,
    features: &Tensor<f32>,
) -> Result<Vec<RecordedFrame>> {
    let cfg = &model.config;
    let mut buffer = ConfidenceBuffer::new(cfg.anchor.l_s, cfg.classes);
    let mut frames = Vec::with_capacity(features.rows());
    for t in 1..=features.rows() {
        let out = step(model, store, features, t, false)?;
        buffer.push(frame_confidences(&out.survivors, cfg.classes))?;
        frames.push(RecordedFrame {
            t: t as u32,
            survivors: out.survivors,
            snapshot: buffer.snapshot(),
        });
    }
    Ok(frames)
}

/// Writes `frame_index,attention_mass` rows.
pub fn write_attention(path: &std::path::Path, rows: &[(usize, f64)]) -> Result<()> {
    let mut s = String::from("frame_index,attention_mass\n");
    for (f, m) in rows {
        s.push_str(&format!("{f},{m}\n"));
    }
    std::fs::write(path, s).map_err(|e| crate::error::HatError::io(path, e))
}
