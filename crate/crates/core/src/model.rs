//! The full network: input projection and positional encoding over the
//! feature queue, history compression/anticipation/refinement, anchor
//! generation and integration, and the prediction heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::anchor::AnchorModule;
use crate::config::RunConfig;
use crate::error::{HatError, Result};
use crate::history::{AnticipationOutput, HistoryModule, RefinedHistory};
use crate::losses::{
    anticipation_loss, anticipation_targets, classification_loss, regression_loss, total_loss, FocalFactors,
};
use crate::numerics::{positional_encoding, Linear, NodeId, ParamStore, Scalar, Tape, Tensor};
use crate::postproc::Osn;
use crate::prediction::{anchor_geometry, assign_targets, GroundTruthInstance, HeadOutputs, PredictionHeads};

#[derive(Clone, Debug)]
pub struct HatModel {
    pub config: RunConfig,
    pub input_projection: Linear,
    pub history: Option<HistoryModule>,
    pub anchor: AnchorModule,
    pub heads: PredictionHeads,
    pub osn: Osn,
    positional: Tensor<f64>,
}

pub struct ForwardOutput {
    pub heads: HeadOutputs,
    pub anticipation: Option<AnticipationOutput>,
    /// Compressor cross-attention, `[block][head]`, each `L_comp×L_h`.
    pub history_attention: Vec<Vec<NodeId>>,
}

/// Frames `[t − L_q, t)` split into history and window rows; frames before the
/// stream start are zero. Also returns the frame indices actually copied.
pub fn queue_at<T: Scalar>(
    features: &Tensor<f32>,
    t: usize,
    l_h: usize,
    l_s: usize,
) -> (Tensor<T>, Tensor<T>, Vec<usize>) {
    let d = features.cols();
    let l_q = l_h + l_s;
    let mut data = vec![T::zero(); l_q * d];
    let mut read = Vec::with_capacity(l_q);
    for r in 0..l_q {
        let frame = t as isize - l_q as isize + r as isize;
        if frame >= 0 && (frame as usize) < features.rows() {
            read.push(frame as usize);
            for (o, v) in data[r * d..(r + 1) * d].iter_mut().zip(features.row(frame as usize)) {
                *o = T::of(*v as f64);
            }
        }
    }
    let window = data.split_off(l_h * d);
    (
        Tensor::new(vec![l_h, d], data).expect("history shape"),
        Tensor::new(vec![l_s, d], window).expect("window shape"),
        read,
    )
}

pub struct WindowLoss {
    pub total: NodeId,
    pub classification: f64,
    pub offset: f64,
    pub length: f64,
    pub anticipation: f64,
    pub logit_grads: Tensor<f64>,
    pub labels: Vec<usize>,
}

impl HatModel {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &RunConfig) -> Result<Self> {
        let v = config.violations();
        if !v.is_empty() {
            return Err(HatError::ConfigViolations(
                v.into_iter().map(|(k, m)| format!("{k}: {m}")).collect(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed());
        let d = config.d_model;
        let input_projection = Linear::new(store, &mut rng, "input.projection", config.feature_dim, d)?;
        let history = if config.history.enabled {
            Some(HistoryModule::new(store, &mut rng, &config.history, d, config.classes)?)
        } else {
            None
        };
        let anchor = AnchorModule::new(store, &mut rng, &config.anchor, d, config.history.enabled)?;
        let heads = PredictionHeads::new(store, &mut rng, d, config.classes)?;
        let osn = Osn::new(store, &mut rng, config.anchor.l_s, config.classes)?;
        Ok(HatModel {
            config: config.clone(),
            input_projection,
            history,
            anchor,
            heads,
            osn,
            positional: positional_encoding(config.l_q(), d),
        })
    }

    pub fn build<T: Scalar>(config: &RunConfig) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let model = Self::new(&mut store, config)?;
        Ok((model, store))
    }

    pub fn l_h(&self) -> usize {
        self.config.l_h()
    }

    /// Raw queue at step `t`, as tape inputs.
    pub fn inputs<T: Scalar>(&self, tape: &mut Tape<'_, T>, features: &Tensor<f32>, t: usize) -> Result<(NodeId, NodeId)> {
        let (h, s, _) = self.inputs_traced(tape, features, t)?;
        Ok((h, s))
    }

    /// As [`Self::inputs`], plus the feature frames that were read.
    pub fn inputs_traced<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        features: &Tensor<f32>,
        t: usize,
    ) -> Result<(NodeId, NodeId, Vec<usize>)> {
        if features.cols() != self.config.feature_dim {
            return Err(HatError::dim(
                "HatModel::inputs",
                format!("features have {} columns, model expects {}", features.cols(), self.config.feature_dim),
            ));
        }
        let (h, s, read) = queue_at::<T>(features, t, self.l_h(), self.config.anchor.l_s);
        Ok((tape.input(h), tape.input(s), read))
    }

    fn embed<T: Scalar>(&self, tape: &mut Tape<'_, T>, raw: NodeId, first_row: usize) -> Result<NodeId> {
        let x = self.input_projection.forward(tape, raw)?;
        let rows = tape.value(raw).rows();
        let d = self.config.d_model;
        let pe = Tensor::new(
            vec![rows, d],
            self.positional.data()[first_row * d..(first_row + rows) * d]
                .iter()
                .map(|&v| T::of(v))
                .collect(),
        )?;
        let pe = tape.input(pe);
        tape.add(x, pe)
    }

    /// `history_raw` is `L_h × feature_dim` (ignored without the history module),
    /// `window_raw` is `L_s × feature_dim`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        history_raw: NodeId,
        window_raw: NodeId,
        with_anticipation: bool,
    ) -> Result<ForwardOutput> {
        let s = self.embed(tape, window_raw, self.l_h())?;
        let s_enc = self.anchor.encode_window(tape, s)?;
        let mut anchors = self.anchor.decode_anchors(tape, s_enc)?;
        let mut anticipation = None;
        let mut history_attention = Vec::new();
        if let Some(hm) = &self.history {
            let h = self.embed(tape, history_raw, 0)?;
            let comp = hm.compress(tape, h)?;
            history_attention = comp.attention;
            if with_anticipation && hm.anticipation.is_some() {
                anticipation = Some(hm.anticipate(tape, comp.compressed)?);
            }
            let refined = if hm.config.refinement {
                hm.refine(tape, comp.compressed, s_enc)?
            } else {
                RefinedHistory(comp.compressed.0)
            };
            anchors = self.anchor.refine_anchors(tape, anchors, refined)?;
        }
        Ok(ForwardOutput {
            heads: self.heads.forward(tape, anchors.0)?,
            anticipation,
            history_attention,
        })
    }

    /// Total loss of the window ending at step `t`.
    pub fn window_loss<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        features: &Tensor<f32>,
        gt: &[GroundTruthInstance],
        t: usize,
        factors: &FocalFactors,
    ) -> Result<WindowLoss> {
        let (h, s) = self.inputs(tape, features, t)?;
        self.loss_from_inputs(tape, h, s, gt, t, factors)
    }

    pub fn loss_from_inputs<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        history_raw: NodeId,
        window_raw: NodeId,
        gt: &[GroundTruthInstance],
        t: usize,
        factors: &FocalFactors,
    ) -> Result<WindowLoss> {
        let out = self.forward(tape, history_raw, window_raw, true)?;
        let geometry = anchor_geometry(t, &self.config.anchor.sizes);
        let assignments = assign_targets(&geometry, gt, self.config.theta_m)?;
        let labels: Vec<usize> = assignments.iter().map(|a| a.label(self.config.classes)).collect();
        let cls = classification_loss(tape, out.heads.z_c, &labels, factors)?;
        let reg = regression_loss(tape, out.heads.z_o, out.heads.z_l, &assignments)?;
        let (ant_node, ant_value) = match out.anticipation {
            Some(a) => {
                let y = anticipation_targets(gt, t, self.config.anchor.l_s, self.config.classes);
                let (n, v) = anticipation_loss(tape, a.logits, &y, factors)?;
                (Some(n), v)
            }
            None => (None, 0.0),
        };
        let total = total_loss(tape, cls.node, &reg, ant_node, &self.config.weights)?;
        Ok(WindowLoss {
            total,
            classification: cls.value,
            offset: reg.offset_value,
            length: reg.length_value,
            anticipation: ant_value,
            logit_grads: cls.logit_grads,
            labels,
        })
    }

    /// Names of the main-network parameters (everything except the OSN).
    pub fn is_main_param(name: &str) -> bool {
        !name.starts_with("osn.")
    }
}

/// A model small enough for finite differences: `D = 8`, two heads everywhere.
pub fn gradcheck_config() -> RunConfig {
    let mut c = RunConfig::toy();
    c.d_model = 8;
    c.feature_dim = 5;
    c.classes = 3;
    c.history.l_h = 6;
    c.history.l_comp = 2;
    c.history.heads_c = 2;
    c.history.heads_r = 2;
    c.anchor.l_s = 4;
    c.anchor.sizes = vec![2, 4];
    c.anchor.heads_e = 2;
    c.anchor.heads_d = 2;
    c.anchor.heads_a = 2;
    c
}

/// Finite-difference check of the full training loss at 64-bit precision.
pub fn check_full_model(config: &RunConfig, seed: u64, tolerance: f64) -> Result<crate::numerics::GradCheckReport> {
    check_full_model_sampled(config, seed, tolerance, None)
}

/// Full training loss against central differences, perturbing at most
/// `sample` coordinates of every parameter and input tensor.
pub fn check_full_model_sampled(
    config: &RunConfig,
    seed: u64,
    tolerance: f64,
    sample: Option<usize>,
) -> Result<crate::numerics::GradCheckReport> {
    use crate::numerics::{grad_check_sampled, random_tensor};
    let (model, store) = HatModel::build::<f64>(config)?;
    let l_h = config.l_h();
    let l_s = config.anchor.l_s;
    let t = l_h + l_s;
    let hist = random_tensor(&[l_h, config.feature_dim], seed);
    let win = random_tensor(&[l_s, config.feature_dim], seed + 1);
    // One instance that ends at the current step so anchors get foreground targets.
    let gt = [
        GroundTruthInstance {
            start: (t - 3) as u32,
            end: t as u32,
            class: 1 % config.classes,
        },
        GroundTruthInstance {
            start: (t - l_s) as u32,
            end: (t - 1) as u32,
            class: 0,
        },
    ];
    let factors = crate::losses::compute_focal_factors(
        &crate::losses::GradientRatioAccumulator {
            g_pos: (0..config.classes).map(|j| 1.0 + j as f64).collect(),
            g_neg: vec![2.0; config.classes],
        },
        config.lambda_b,
        config.focal_scale,
    );
    grad_check_sampled(&store, &[hist, win], tolerance, sample.map(|n| (n, seed)), |tape, ids| {
        Ok(model.loss_from_inputs(tape, ids[0], ids[1], &gt, t, &factors)?.total)
    })
}

/// Finite-difference checks of each tape primitive, layer and loss at the
/// widths of `config`, one report per component.
pub fn check_components(
    config: &RunConfig,
    seed: u64,
    tolerance: f64,
) -> Result<Vec<(String, crate::numerics::GradCheckReport)>> {
    use crate::numerics::{
        grad_check, probe_loss, random_tensor, DecoderBlock, EncoderBlock, LayerNorm, MultiHeadAttention,
    };
    use crate::prediction::TargetAssignment;

    type Frag = fn(&mut Tape<'_, f64>, NodeId, NodeId) -> Result<NodeId>;
    let d = config.d_model;
    let c = config.classes;
    let mut out = Vec::new();
    let empty = ParamStore::<f64>::new();
    let x = random_tensor(&[3, 4], seed);
    let y = random_tensor(&[3, 4], seed + 1);
    let fragments: Vec<(&str, Frag)> = vec![
        ("matmul", |t, x, y| {
            let yt = t.reshape(y, &[4, 3])?;
            t.matmul(x, yt)
        }),
        ("matmul_t", |t, x, y| t.matmul_t(x, y)),
        ("add", |t, x, y| t.add(x, y)),
        ("add_row", |t, x, y| {
            let r = t.mean_rows(y)?;
            t.add_row(x, r)
        }),
        ("scale", |t, x, _| Ok(t.scale(x, -1.7))),
        ("relu", |t, x, _| Ok(t.relu(x))),
        ("sigmoid", |t, x, _| Ok(t.sigmoid(x))),
        ("softmax", |t, x, _| Ok(t.softmax_rows(x))),
        ("layer_norm", |t, x, y| {
            let g = t.slice_cols(y, 0, 4)?;
            let g = t.mean_rows(g)?;
            let b = t.mean_rows(x)?;
            t.layer_norm(x, g, b, 1e-5)
        }),
        ("slice", |t, x, _| t.slice_cols(x, 1, 2)),
        ("concat", |t, x, y| t.concat_cols(&[x, y])),
        ("mean_rows", |t, x, _| t.mean_rows(x)),
        ("repeat_rows", |t, x, _| {
            let m = t.mean_rows(x)?;
            t.repeat_rows(m, 3)
        }),
        ("reshape", |t, x, _| t.reshape(x, &[2, 6])),
        ("weighted_sum", |t, x, y| t.weighted_sum(&[(0.3, x), (-2.0, y)])),
    ];
    for (name, frag) in fragments {
        let r = grad_check(&empty, &[x.clone(), y.clone()], tolerance, |t, ids| {
            let o = frag(t, ids[0], ids[1])?;
            probe_loss(t, o, seed + 2)
        })?;
        out.push((format!("primitive {name}"), r));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let lin = Linear::new(&mut store, &mut rng, "linear", d, d)?;
    let ln = LayerNorm::new(&mut store, "ln", d)?;
    *store.value_mut(ln.gain) = random_tensor(&[d], seed + 3);
    let mha = MultiHeadAttention::new(&mut store, &mut rng, "mha", d, config.anchor.heads_e)?;
    let enc = EncoderBlock::new(&mut store, &mut rng, "enc", d, config.anchor.heads_e)?;
    let dec = DecoderBlock::new(&mut store, &mut rng, "dec", d, config.anchor.heads_d)?;
    let q = random_tensor(&[3, d], seed + 4);
    let kv = random_tensor(&[5, d], seed + 5);
    let r = grad_check(&store, std::slice::from_ref(&q), tolerance, |t, ids| {
        let o = lin.forward(t, ids[0])?;
        probe_loss(t, o, seed)
    })?;
    out.push(("layer linear".into(), r));
    let r = grad_check(&store, std::slice::from_ref(&q), tolerance, |t, ids| {
        let o = ln.forward(t, ids[0])?;
        probe_loss(t, o, seed)
    })?;
    out.push(("layer layer_norm".into(), r));
    let r = grad_check(&store, &[q.clone(), kv.clone()], tolerance, |t, ids| {
        let o = mha.forward(t, ids[0], ids[1])?;
        probe_loss(t, o.out, seed)
    })?;
    out.push(("layer attention".into(), r));
    let r = grad_check(&store, std::slice::from_ref(&kv), tolerance, |t, ids| {
        let o = enc.forward(t, ids[0])?;
        probe_loss(t, o, seed)
    })?;
    out.push(("layer encoder block".into(), r));
    let r = grad_check(&store, &[q, kv], tolerance, |t, ids| {
        let o = dec.forward(t, ids[0], ids[1])?;
        probe_loss(t, o.out, seed)
    })?;
    out.push(("layer decoder block".into(), r));

    let factors = crate::losses::compute_focal_factors(
        &crate::losses::GradientRatioAccumulator {
            g_pos: (0..c).map(|j| 0.5 + j as f64).collect(),
            g_neg: (0..c).map(|j| 3.0 - 0.2 * j as f64).collect(),
        },
        config.lambda_b,
        config.focal_scale,
    );
    let m = config.anchor.sizes.len();
    let z = random_tensor(&[m, c + 1], seed + 6).map(|v| 3.0 * v);
    let labels: Vec<usize> = (0..m).map(|i| if i % 2 == 0 { c } else { i % c }).collect();
    let r = grad_check(&empty, &[z], tolerance, |t, ids| {
        Ok(classification_loss(t, ids[0], &labels, &factors)?.node)
    })?;
    out.push(("loss adaptive focal".into(), r));
    let assignments: Vec<TargetAssignment> = (0..m)
        .map(|i| {
            if i % 2 == 0 {
                TargetAssignment::Background
            } else {
                TargetAssignment::Foreground {
                    class: i % c,
                    offset: 2.0 + i as f64,
                    log_length: -2.0 - i as f64,
                    instance: 0,
                    iou: 0.8,
                }
            }
        })
        .collect();
    let r = grad_check(
        &empty,
        &[random_tensor(&[m, 1], seed + 7), random_tensor(&[m, 1], seed + 8)],
        tolerance,
        |t, ids| {
            let reg = regression_loss(t, ids[0], ids[1], &assignments)?;
            t.weighted_sum(&[(1.0, reg.offset), (0.5, reg.length)])
        },
    )?;
    out.push(("loss regression".into(), r));
    let ant: Vec<bool> = (0..c).map(|j| j % 3 == 0).collect();
    let r = grad_check(&empty, &[random_tensor(&[1, c], seed + 9)], tolerance, |t, ids| {
        Ok(anticipation_loss(t, ids[0], &ant, &factors)?.0)
    })?;
    out.push(("loss anticipation".into(), r));
    let mut store = ParamStore::<f64>::new();
    let osn = Osn::new(&mut store, &mut rng, config.anchor.l_s, c)?;
    let targets: Vec<f32> = (0..2 * c).map(|k| [1.0, 0.0, -1.0][k % 3]).collect();
    let r = grad_check(&store, &[random_tensor(&[2, config.anchor.l_s * c], seed + 10)], tolerance, |t, ids| {
        let z = osn.logits(t, ids[0])?;
        Ok(crate::postproc::osn_loss(t, z, &targets)?.0)
    })?;
    out.push(("suppression network".into(), r));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchor::IntegrationMode;

    #[test]
    fn queue_is_zero_padded_on_the_left() {
        let f = Tensor::<f32>::new(vec![5, 2], (0..10).map(|v| v as f32 + 1.0).collect()).unwrap();
        let (h, s, read) = queue_at::<f64>(&f, 3, 2, 2);
        assert_eq!(h.data(), &[0.0, 0.0, 1.0, 2.0]);
        assert_eq!(s.data(), &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(read, vec![0, 1, 2]);
        assert_eq!(queue_at::<f64>(&f, 5, 2, 2).2, vec![1, 2, 3, 4]);
    }

    #[test]
    fn forward_shapes_at_toy_config() {
        let cfg = RunConfig::toy();
        let (model, store) = HatModel::build::<f32>(&cfg).unwrap();
        let mut tape = Tape::new(&store);
        let f = Tensor::<f32>::full(&[40, 32], 0.1);
        let (h, s) = model.inputs(&mut tape, &f, 30).unwrap();
        let out = model.forward(&mut tape, h, s, true).unwrap();
        assert_eq!(tape.value(out.heads.z_c).shape(), &[4, 9]);
        assert_eq!(tape.value(out.heads.z_o).shape(), &[4, 1]);
        assert_eq!(tape.value(out.anticipation.unwrap().probabilities).shape(), &[1, 8]);
        assert_eq!(out.history_attention.len(), 1);
        assert_eq!(tape.value(out.history_attention[0][0]).shape(), &[4, 24]);
    }

    #[test]
    fn disabling_history_removes_its_parameters() {
        let mut cfg = RunConfig::toy();
        cfg.history.enabled = false;
        let (model, store) = HatModel::build::<f32>(&cfg).unwrap();
        assert!(model.history.is_none());
        assert!(store.iter().all(|(_, p)| !p.name.starts_with("history.") && !p.name.starts_with("anchor.integrator")));
        let mut tape = Tape::new(&store);
        let f = Tensor::<f32>::full(&[10, 32], 0.1);
        let (h, s) = model.inputs(&mut tape, &f, 10).unwrap();
        assert_eq!(tape.value(h).rows(), 0);
        let out = model.forward(&mut tape, h, s, true).unwrap();
        assert!(out.anticipation.is_none());
        assert_eq!(tape.value(out.heads.z_c).shape(), &[4, 9]);
    }

    #[test]
    fn feature_width_is_checked() {
        let (model, store) = HatModel::build::<f32>(&RunConfig::toy()).unwrap();
        let mut tape = Tape::new(&store);
        assert!(model.inputs(&mut tape, &Tensor::<f32>::zeros(&[4, 7]), 2).is_err());
    }

    #[test]
    fn full_model_gradient_check() {
        let r = check_full_model(&gradcheck_config(), 3, 1e-4).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn ablated_variants_gradient_check() {
        for mode in [IntegrationMode::Concat, IntegrationMode::AvgPool] {
            let mut c = gradcheck_config();
            c.anchor.integration_mode = mode;
            c.history.refinement = false;
            let r = check_full_model(&c, 4, 1e-4).unwrap();
            assert!(r.passed, "{mode}: {r:?}");
        }
        let mut c = gradcheck_config();
        c.history.enabled = false;
        assert!(check_full_model(&c, 5, 1e-4).unwrap().passed);
    }
}
