//! Classification/regression heads over anchor features, training target
//! assignment and proposal decoding.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HatError, Result};
use crate::eval::tiou;
use crate::numerics::{softmax_slice, Linear, NodeId, ParamStore, Scalar, Tape, Tensor};

/// Ground-truth action `[start, end)` in feature steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthInstance {
    pub start: u32,
    pub end: u32,
    pub class: usize,
}

impl GroundTruthInstance {
    pub fn segment(&self) -> (f64, f64) {
        (self.start as f64, self.end as f64)
    }

    pub fn length(&self) -> f64 {
        (self.end - self.start) as f64
    }
}

/// End-aligned anchor: covers `[end - length, end]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorGeometry {
    pub end: f64,
    pub length: f64,
}

impl AnchorGeometry {
    pub fn segment(&self) -> (f64, f64) {
        (self.end - self.length, self.end)
    }
}

/// Anchors for step `t` (the number of frames observed so far).
pub fn anchor_geometry(t: usize, sizes: &[usize]) -> Vec<AnchorGeometry> {
    sizes
        .iter()
        .map(|&s| AnchorGeometry {
            end: t as f64,
            length: s as f64,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TargetAssignment {
    Background,
    Foreground {
        class: usize,
        /// `(y_e − a_e) / a_l`
        offset: f64,
        /// `ln(y_l / a_l)`
        log_length: f64,
        instance: usize,
        iou: f64,
    },
}

impl TargetAssignment {
    /// Class index with background mapped to `classes`.
    pub fn label(&self, classes: usize) -> usize {
        match self {
            TargetAssignment::Background => classes,
            TargetAssignment::Foreground { class, .. } => *class,
        }
    }
}

/// Matches each anchor to its best-overlapping instance. Foreground iff IoU > `theta_m`;
/// IoU ties go to the shorter instance, then the lower class id.
pub fn assign_targets(
    geometry: &[AnchorGeometry],
    gt: &[GroundTruthInstance],
    theta_m: f64,
) -> Result<Vec<TargetAssignment>> {
    if geometry.is_empty() {
        return Err(HatError::Config("target assignment needs at least one anchor".into()));
    }
    Ok(geometry
        .iter()
        .map(|a| {
            let mut best: Option<(f64, usize)> = None;
            for (k, g) in gt.iter().enumerate() {
                let iou = tiou(a.segment(), g.segment());
                let better = match best {
                    None => true,
                    Some((b_iou, b)) => {
                        let bg = &gt[b];
                        iou > b_iou
                            || (iou == b_iou
                                && (g.length(), g.class) < (bg.length(), bg.class))
                    }
                };
                if better {
                    best = Some((iou, k));
                }
            }
            match best {
                Some((iou, k)) if iou > theta_m => {
                    let g = &gt[k];
                    TargetAssignment::Foreground {
                        class: g.class,
                        offset: (g.end as f64 - a.end) / a.length,
                        log_length: (g.length() / a.length).ln(),
                        instance: k,
                        iou,
                    }
                }
                _ => TargetAssignment::Background,
            }
        })
        .collect())
}

/// Output of one streaming step for one anchor. Immutable once emitted.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionProposal {
    pub start: f64,
    pub end: f64,
    /// Softmax over `C + 1` classes, background last.
    pub class_scores: Vec<f64>,
    pub emission_time: u32,
}

impl ActionProposal {
    pub fn classes(&self) -> usize {
        self.class_scores.len() - 1
    }

    pub fn is_background(&self) -> bool {
        let bg = self.class_scores[self.classes()];
        self.class_scores[..self.classes()].iter().all(|&p| p < bg)
    }

    /// Most probable foreground class (lowest id on ties).
    pub fn class_id(&self) -> usize {
        let mut best = 0;
        for (j, &p) in self.class_scores[..self.classes()].iter().enumerate() {
            if p > self.class_scores[best] {
                best = j;
            }
        }
        best
    }

    /// Max foreground probability.
    pub fn score(&self) -> f64 {
        self.class_scores[self.class_id()]
    }

    pub fn segment(&self) -> (f64, f64) {
        (self.start, self.end)
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }
}

/// `c = softmax(z_c)`, `e = a_e + a_l·z_o`, `s = e − a_l·exp(z_l)`.
pub fn decode_proposals(
    z_c: &Tensor<f64>,
    z_o: &[f64],
    z_l: &[f64],
    geometry: &[AnchorGeometry],
    t: u32,
) -> Result<Vec<ActionProposal>> {
    let m = geometry.len();
    if z_c.rows() != m || z_o.len() != m || z_l.len() != m {
        return Err(HatError::dim(
            "decode_proposals",
            format!("{m} anchors, logits {:?}, {} offsets, {} lengths", z_c.shape(), z_o.len(), z_l.len()),
        ));
    }
    Ok(geometry
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let end = a.end + a.length * z_o[i];
            ActionProposal {
                start: end - a.length * z_l[i].exp(),
                end,
                class_scores: softmax_slice(z_c.row(i)),
                emission_time: t,
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    /// `M×(C+1)`
    pub z_c: NodeId,
    /// `M×1`
    pub z_o: NodeId,
    /// `M×1`
    pub z_l: NodeId,
}

/// Two independent two-layer heads (hidden width D, ReLU).
#[derive(Clone, Debug)]
pub struct PredictionHeads {
    pub cls_hidden: Linear,
    pub cls_out: Linear,
    pub reg_hidden: Linear,
    pub reg_out: Linear,
    pub classes: usize,
}

impl PredictionHeads {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        d: usize,
        classes: usize,
    ) -> Result<Self> {
        Ok(PredictionHeads {
            cls_hidden: Linear::new(store, rng, "heads.classifier.hidden", d, d)?,
            cls_out: Linear::new(store, rng, "heads.classifier.output", d, classes + 1)?,
            reg_hidden: Linear::new(store, rng, "heads.regressor.hidden", d, d)?,
            reg_out: Linear::new(store, rng, "heads.regressor.output", d, 2)?,
            classes,
        })
    }

    pub fn classify<T: Scalar>(&self, tape: &mut Tape<'_, T>, features: NodeId) -> Result<NodeId> {
        let h = self.cls_hidden.forward(tape, features)?;
        let h = tape.relu(h);
        self.cls_out.forward(tape, h)
    }

    pub fn regress<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        features: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let h = self.reg_hidden.forward(tape, features)?;
        let h = tape.relu(h);
        let out = self.reg_out.forward(tape, h)?;
        Ok((tape.slice_cols(out, 0, 1)?, tape.slice_cols(out, 1, 1)?))
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, features: NodeId) -> Result<HeadOutputs> {
        let z_c = self.classify(tape, features)?;
        let (z_o, z_l) = self.regress(tape, features)?;
        Ok(HeadOutputs { z_c, z_o, z_l })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, probe_loss, random_tensor};
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn gt(start: u32, end: u32, class: usize) -> GroundTruthInstance {
        GroundTruthInstance { start, end, class }
    }

    #[test]
    fn assignment_hand_example() {
        let geom = [AnchorGeometry { end: 16.0, length: 8.0 }];
        let a = assign_targets(&geom, &[gt(5, 16, 3)], 0.5).unwrap();
        match a[0] {
            TargetAssignment::Foreground {
                class,
                offset,
                log_length,
                iou,
                ..
            } => {
                assert_eq!(class, 3);
                // [8,16] vs [5,16]: overlap 8, union 11.
                assert!((iou - 8.0 / 11.0).abs() < 1e-12);
                assert_eq!(offset, 0.0);
                assert!((log_length - (11.0f64 / 8.0).ln()).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn assignment_empty_cases() {
        let geom = anchor_geometry(16, &[2, 4, 8]);
        assert!(assign_targets(&geom, &[], 0.5)
            .unwrap()
            .iter()
            .all(|a| *a == TargetAssignment::Background));
        assert!(matches!(
            assign_targets(&[], &[gt(0, 4, 0)], 0.5),
            Err(HatError::Config(_))
        ));
    }

    #[test]
    fn assignment_perfect_match() {
        let geom = anchor_geometry(12, &[4]);
        let a = assign_targets(&geom, &[gt(8, 12, 1)], 0.5).unwrap();
        assert_eq!(
            a[0],
            TargetAssignment::Foreground {
                class: 1,
                offset: 0.0,
                log_length: 0.0,
                instance: 0,
                iou: 1.0
            }
        );
    }

    #[test]
    fn assignment_tie_prefers_shorter_then_lower_class() {
        // Anchor [4,8]; [4,8] and [4,8] differ only by class.
        let geom = anchor_geometry(8, &[4]);
        let a = assign_targets(&geom, &[gt(4, 8, 5), gt(4, 8, 2)], 0.5).unwrap();
        assert_eq!(a[0].label(8), 2);
        // Equal IoU 2/3: [4,10] (len 6) vs [2,8] (len 6) tie on length -> lower class.
        let a = assign_targets(&geom, &[gt(2, 8, 4), gt(4, 10, 1)], 0.5).unwrap();
        assert_eq!(a[0].label(8), 1);
    }

    #[test]
    fn ongoing_short_overlap_is_background() {
        // Action started 1 step ago: IoU with every anchor <= 0.5.
        let geom = anchor_geometry(10, &[2, 4, 6, 8]);
        let a = assign_targets(&geom, &[gt(9, 20, 0)], 0.5).unwrap();
        assert!(a.iter().all(|x| *x == TargetAssignment::Background));
    }

    #[test]
    fn decode_examples() {
        let geom = [AnchorGeometry { end: 16.0, length: 8.0 }];
        let zc = Tensor::zeros(&[1, 3]);
        let p = decode_proposals(&zc, &[0.0], &[0.0], &geom, 16).unwrap();
        assert_eq!((p[0].start, p[0].end), (8.0, 16.0));
        assert_eq!(p[0].emission_time, 16);
        assert!(p[0].class_scores.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        // Encode y_e=10, y_l=4 against a_e=12, a_l=8.
        let geom = [AnchorGeometry { end: 12.0, length: 8.0 }];
        let (zo, zl) = ((10.0 - 12.0) / 8.0, (4.0f64 / 8.0).ln());
        assert_eq!(zo, -0.25);
        let p = decode_proposals(&Tensor::zeros(&[1, 2]), &[zo], &[zl], &geom, 12).unwrap();
        assert_eq!(p[0].end, 10.0);
        assert!((p[0].start - 6.0).abs() < 1e-12);
    }

    #[test]
    fn heads_shapes_zero_weights_and_gradients() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let heads = PredictionHeads::new(&mut store, &mut rng, 16, 22).unwrap();
        let mut tape = Tape::new(&store);
        let a = tape.input(random_tensor(&[6, 16], 1));
        let out = heads.forward(&mut tape, a).unwrap();
        assert_eq!(tape.value(out.z_c).shape(), &[6, 23]);
        assert_eq!(tape.value(out.z_o).shape(), &[6, 1]);
        assert_eq!(tape.value(out.z_l).shape(), &[6, 1]);

        let mut zeroed = store.clone();
        *zeroed.value_mut(heads.cls_out.weight) = Tensor::zeros(&[16, 23]);
        *zeroed.value_mut(heads.cls_out.bias) = Tensor::zeros(&[23]);
        let mut tape = Tape::new(&zeroed);
        let a = tape.input(random_tensor(&[6, 16], 1));
        let zc = heads.classify(&mut tape, a).unwrap();
        let zc = tape.value(zc);
        assert!(zc.data().iter().all(|&v| v == 0.0));
        for r in 0..6 {
            let p = softmax_slice(zc.row(r));
            assert!(p.iter().all(|&v| (v - 1.0 / 23.0).abs() < 1e-15));
        }

        let mut store = ParamStore::<f64>::new();
        let heads = PredictionHeads::new(&mut store, &mut rng, 8, 3).unwrap();
        let r = grad_check(&store, &[random_tensor(&[4, 8], 2)], 1e-4, |tape, ids| {
            let out = heads.forward(tape, ids[0])?;
            let c = probe_loss(tape, out.z_c, 1)?;
            let o = probe_loss(tape, out.z_o, 2)?;
            let l = probe_loss(tape, out.z_l, 3)?;
            tape.weighted_sum(&[(1.0, c), (1.0, o), (1.0, l)])
        })
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(
            start in 0u32..500, len in 1u32..40, t_off in -20i64..20, size_idx in 0usize..6
        ) {
            let g = gt(start, start + len, 0);
            let sizes = [2usize, 4, 6, 8, 12, 16];
            let t = (start as i64 + len as i64 + t_off).max(1) as usize;
            let a = anchor_geometry(t, &sizes[size_idx..=size_idx]);
            let offset = (g.end as f64 - a[0].end) / a[0].length;
            let log_len = (g.length() / a[0].length).ln();
            let p = decode_proposals(&Tensor::zeros(&[1, 2]), &[offset], &[log_len], &a, t as u32).unwrap();
            prop_assert!((p[0].end - g.end as f64).abs() < 1e-9);
            prop_assert!((p[0].start - g.start as f64).abs() < 1e-9);
            prop_assert!(p[0].start < p[0].end);
        }
    }
}
