//! Adaptive focal loss, its fixed-factor special cases, regression and
//! anticipation losses, and the gradient-ratio accumulator that drives the
//! per-class focal factors.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{HatError, Result};
use crate::numerics::{NodeId, Scalar, Tape, Tensor};
use crate::prediction::{GroundTruthInstance, TargetAssignment};

/// Lower clamp on probabilities inside the logarithm.
pub const PROB_CLAMP: f64 = 1e-12;
/// Added to the negative accumulator before dividing.
pub const RATIO_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct FocalFactors {
    /// `C+1` exponents, background last.
    pub lambda: Vec<f64>,
    pub base: f64,
    pub scale: f64,
}

impl FocalFactors {
    pub fn constant(classes: usize, value: f64) -> Self {
        FocalFactors {
            lambda: vec![value; classes + 1],
            base: value,
            scale: 0.0,
        }
    }

    pub fn classes(&self) -> usize {
        self.lambda.len() - 1
    }

    pub fn background(&self) -> f64 {
        self.lambda[self.classes()]
    }

    pub fn foreground(&self) -> &[f64] {
        &self.lambda[..self.classes()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientRatioAccumulator {
    pub g_pos: Vec<f64>,
    pub g_neg: Vec<f64>,
}

impl GradientRatioAccumulator {
    pub fn new(classes: usize) -> Self {
        GradientRatioAccumulator {
            g_pos: vec![0.0; classes],
            g_neg: vec![0.0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.g_pos.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.2,
        }
    }
}

impl LossWeights {
    pub fn violations(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        for (k, x) in [
            ("loss.alpha", self.alpha),
            ("loss.beta", self.beta),
            ("loss.gamma", self.gamma),
        ] {
            if !(x >= 0.0 && x.is_finite()) {
                v.push((k, format!("must be a nonnegative number, got {x}")));
            }
        }
        v
    }
}

/// Which focal-factor rule the classification loss uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossVariant {
    Adaptive,
    /// Background at `λ_b`, every foreground class fixed at `λ_b + s/2`.
    BackgroundSuppression,
    /// Every class at `λ_b`.
    Focal,
    /// Every exponent zero.
    CrossEntropy,
}

impl FromStr for LossVariant {
    type Err = HatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" | "afl" => Ok(LossVariant::Adaptive),
            "bg-suppression" | "bg_focal" => Ok(LossVariant::BackgroundSuppression),
            "focal" => Ok(LossVariant::Focal),
            "ce" | "cross-entropy" => Ok(LossVariant::CrossEntropy),
            other => Err(HatError::Config(format!(
                "unknown loss variant {other:?} (expected adaptive, bg-suppression, focal or ce)"
            ))),
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossVariant::Adaptive => "adaptive",
            LossVariant::BackgroundSuppression => "bg-suppression",
            LossVariant::Focal => "focal",
            LossVariant::CrossEntropy => "ce",
        })
    }
}

/// `Σ_j −y_j (1 − p_j)^{λ_j} log p_j`, log argument clamped at [`PROB_CLAMP`].
pub fn afl(p: &[f64], y: &[f64], lambda: &[f64]) -> f64 {
    p.iter()
        .zip(y)
        .zip(lambda)
        .map(|((&p, &y), &l)| -y * (1.0 - p).powf(l) * p.max(PROB_CLAMP).ln())
        .sum()
}

pub fn cross_entropy(p: &[f64], label: usize) -> f64 {
    -p[label].max(PROB_CLAMP).ln()
}

pub fn focal_loss(p: &[f64], label: usize, gamma: f64) -> f64 {
    let pt = p[label];
    -(1.0 - pt).powf(gamma) * pt.max(PROB_CLAMP).ln()
}

/// Background term at exponent `base`, foreground terms at `base + fg_extra`.
pub fn bg_suppression_focal(p: &[f64], label: usize, base: f64, fg_extra: f64) -> f64 {
    let background = p.len() - 1;
    let gamma = if label == background { base } else { base + fg_extra };
    focal_loss(p, label, gamma)
}

/// Value of `−q^λ log pt` and `G = pt · ∂/∂pt` of it, where `q = 1 − pt` is
/// passed separately so it keeps full precision near `pt = 1`.
fn focal_term(pt: f64, q: f64, log_pt: f64, lambda: f64) -> (f64, f64) {
    let clamped = log_pt < PROB_CLAMP.ln();
    let log_term = if clamped { PROB_CLAMP.ln() } else { log_pt };
    let q_pow = if lambda == 0.0 { 1.0 } else { q.powf(lambda) };
    let value = -q_pow * log_term;
    let through_q = if lambda == 0.0 || q <= 0.0 {
        0.0
    } else {
        lambda * q.powf(lambda - 1.0) * pt * log_term
    };
    let through_log = if clamped { 0.0 } else { q_pow };
    (value, through_q - through_log)
}

/// AFL of `softmax(z)` against `label`, with its gradient w.r.t. the logits.
pub fn afl_logits(z: &[f64], label: usize, lambda: &[f64]) -> (f64, Vec<f64>) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let p: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let log_pt = z[label] - max - total.ln();
    let q = exps
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != label)
        .map(|(_, e)| e)
        .sum::<f64>()
        / total;
    let (value, g) = focal_term(p[label], q, log_pt, lambda[label]);
    let grad = p
        .iter()
        .enumerate()
        .map(|(k, &pk)| g * (if k == label { 1.0 } else { 0.0 } - pk))
        .collect();
    (value, grad)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Binary AFL of `sigmoid(z)`: the true class of the two-way problem is
/// "present" when `positive`, "absent" otherwise. Returns value and `∂/∂z`.
pub fn binary_afl_logit(z: f64, positive: bool, lambda: f64) -> (f64, f64) {
    let p = crate::numerics::sigmoid(z);
    let not_p = crate::numerics::sigmoid(-z);
    if positive {
        let (v, g) = focal_term(p, not_p, -softplus(-z), lambda);
        (v, g * not_p)
    } else {
        let (v, g) = focal_term(not_p, p, -softplus(z), lambda);
        (v, -g * p)
    }
}

/// Focal factors from the accumulated gradient ratios.
pub fn compute_focal_factors(acc: &GradientRatioAccumulator, base: f64, scale: f64) -> FocalFactors {
    let ratios: Vec<f64> = acc
        .g_pos
        .iter()
        .zip(&acc.g_neg)
        .map(|(p, n)| p / (n + RATIO_EPS))
        .collect();
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let normalized: Vec<f64> = ratios
        .iter()
        .map(|g| if hi > lo { (g - lo) / (hi - lo) } else { 0.5 })
        .collect();
    let mu = if normalized.is_empty() {
        0.0
    } else {
        normalized.iter().sum::<f64>() / normalized.len() as f64
    };
    let mut lambda: Vec<f64> = normalized
        .iter()
        .map(|n| base + scale * (1.0 - crate::numerics::sigmoid(n - mu)))
        .collect();
    lambda.push(base);
    FocalFactors { lambda, base, scale }
}

pub fn focal_factors_for(
    variant: LossVariant,
    acc: &GradientRatioAccumulator,
    base: f64,
    scale: f64,
) -> FocalFactors {
    let classes = acc.classes();
    match variant {
        LossVariant::Adaptive => compute_focal_factors(acc, base, scale),
        LossVariant::BackgroundSuppression => {
            let mut lambda = vec![base + scale / 2.0; classes];
            lambda.push(base);
            FocalFactors { lambda, base, scale }
        }
        LossVariant::Focal => FocalFactors::constant(classes, base),
        LossVariant::CrossEntropy => FocalFactors::constant(classes, 0.0),
    }
}

/// Adds `|∂L_c/∂z_j|` of every anchor into `g_pos[j]` when the anchor's label is
/// `j` and into `g_neg[j]` otherwise. `grads` is `M×(C+1)`.
pub fn update_accumulator(acc: &mut GradientRatioAccumulator, grads: &Tensor<f64>, labels: &[usize]) {
    for (i, &label) in labels.iter().enumerate() {
        let row = grads.row(i);
        for j in 0..acc.classes() {
            if label == j {
                acc.g_pos[j] += row[j].abs();
            } else {
                acc.g_neg[j] += row[j].abs();
            }
        }
    }
}

pub struct ClassificationLoss {
    pub node: NodeId,
    pub value: f64,
    /// `∂L_c/∂z_c`, `M×(C+1)`, for the accumulator.
    pub logit_grads: Tensor<f64>,
}

/// `Σ_i AFL(softmax(z_i), y_i)` over all anchors of `z_c` (`M×(C+1)`).
pub fn classification_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    z_c: NodeId,
    labels: &[usize],
    factors: &FocalFactors,
) -> Result<ClassificationLoss> {
    let z = tape.value(z_c).cast::<f64>();
    if z.rows() != labels.len() || z.cols() != factors.lambda.len() {
        return Err(HatError::dim(
            "classification_loss",
            format!(
                "logits {:?} vs {} labels over {} classes",
                z.shape(),
                labels.len(),
                factors.lambda.len()
            ),
        ));
    }
    let mut grads = Tensor::zeros(z.shape());
    let mut value = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let (v, g) = afl_logits(z.row(i), label, &factors.lambda);
        value += v;
        grads.row_mut(i).copy_from_slice(&g);
    }
    let node = tape.scalar_fn(z_c, T::of(value), grads.cast())?;
    Ok(ClassificationLoss {
        node,
        value,
        logit_grads: grads,
    })
}

fn l1_sum<T: Scalar>(
    tape: &mut Tape<'_, T>,
    pred: NodeId,
    targets: &[Option<f64>],
) -> Result<(NodeId, f64)> {
    let z = tape.value(pred).cast::<f64>();
    if z.len() != targets.len() {
        return Err(HatError::dim(
            "regression_loss",
            format!("{} predictions vs {} targets", z.len(), targets.len()),
        ));
    }
    let mut grad = Tensor::zeros(z.shape());
    let mut value = 0.0;
    for (i, t) in targets.iter().enumerate() {
        if let Some(t) = t {
            let d = z.data()[i] - t;
            value += d.abs();
            grad.data_mut()[i] = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
        }
    }
    Ok((tape.scalar_fn(pred, T::of(value), grad.cast())?, value))
}

pub struct RegressionLoss {
    pub offset: NodeId,
    pub length: NodeId,
    pub offset_value: f64,
    pub length_value: f64,
}

/// L1 on offsets and log-lengths, foreground anchors only.
pub fn regression_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    z_o: NodeId,
    z_l: NodeId,
    assignments: &[TargetAssignment],
) -> Result<RegressionLoss> {
    let pick = |f: fn(&TargetAssignment) -> Option<f64>| assignments.iter().map(f).collect::<Vec<_>>();
    let offsets = pick(|a| match a {
        TargetAssignment::Foreground { offset, .. } => Some(*offset),
        TargetAssignment::Background => None,
    });
    let lengths = pick(|a| match a {
        TargetAssignment::Foreground { log_length, .. } => Some(*log_length),
        TargetAssignment::Background => None,
    });
    let (offset, offset_value) = l1_sum(tape, z_o, &offsets)?;
    let (length, length_value) = l1_sum(tape, z_l, &lengths)?;
    Ok(RegressionLoss {
        offset,
        length,
        offset_value,
        length_value,
    })
}

/// Class `j` is positive iff some instance of class `j` overlaps the window
/// `[t − l_s, t]` by at least one step.
pub fn anticipation_targets(gt: &[GroundTruthInstance], t: usize, l_s: usize, classes: usize) -> Vec<bool> {
    let lo = t.saturating_sub(l_s) as f64;
    let hi = t as f64;
    let mut y = vec![false; classes];
    for g in gt {
        let overlap = (g.end as f64).min(hi) - (g.start as f64).max(lo);
        if overlap >= 1.0 && g.class < classes {
            y[g.class] = true;
        }
    }
    y
}

/// Per-class binary AFL on the sigmoid of `logits` (`1×C`), using the
/// foreground focal factors.
pub fn anticipation_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    logits: NodeId,
    targets: &[bool],
    factors: &FocalFactors,
) -> Result<(NodeId, f64)> {
    let z = tape.value(logits).cast::<f64>();
    if z.len() != targets.len() || targets.len() != factors.classes() {
        return Err(HatError::dim(
            "anticipation_loss",
            format!("{} logits, {} targets, {} classes", z.len(), targets.len(), factors.classes()),
        ));
    }
    let mut grad = Tensor::zeros(z.shape());
    let mut value = 0.0;
    for (j, &y) in targets.iter().enumerate() {
        let (v, g) = binary_afl_logit(z.data()[j], y, factors.lambda[j]);
        value += v;
        grad.data_mut()[j] = g;
    }
    Ok((tape.scalar_fn(logits, T::of(value), grad.cast())?, value))
}

/// `α L_c + β (L_o + L_l) + γ L_a`.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    classification: NodeId,
    regression: &RegressionLoss,
    anticipation: Option<NodeId>,
    weights: &LossWeights,
) -> Result<NodeId> {
    let mut terms = vec![
        (T::of(weights.alpha), classification),
        (T::of(weights.beta), regression.offset),
        (T::of(weights.beta), regression.length),
    ];
    if let Some(a) = anticipation {
        terms.push((T::of(weights.gamma), a));
    }
    tape.weighted_sum(&terms)
}

/// Appends `epoch,class_id,g_pos,g_neg,lambda` rows, writing the header when
/// the file is new.
pub fn append_focal_log(
    path: &Path,
    epoch: usize,
    acc: &GradientRatioAccumulator,
    factors: &FocalFactors,
) -> Result<()> {
    let fresh = !path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| HatError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut out = String::new();
    if fresh {
        out.push_str("epoch,class_id,g_pos,g_neg,lambda\n");
    }
    for j in 0..acc.classes() {
        out.push_str(&format!(
            "{epoch},{j},{},{},{}\n",
            acc.g_pos[j], acc.g_neg[j], factors.lambda[j]
        ));
    }
    w.write_all(out.as_bytes()).map_err(|e| HatError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamStore;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn softmax(z: &[f64]) -> Vec<f64> {
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    fn one_hot(n: usize, k: usize) -> Vec<f64> {
        (0..n).map(|i| if i == k { 1.0 } else { 0.0 }).collect()
    }

    fn random_case(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, usize) {
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
        (softmax(&z), rng.random_range(0..n))
    }

    #[test]
    fn afl_examples() {
        let p = [0.5, 0.5];
        let y = one_hot(2, 0);
        assert!((afl(&p, &y, &[0.0, 0.0]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((afl(&p, &y, &[1.0, 0.0]) - 0.5 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!((0.5 * std::f64::consts::LN_2 - 0.3466).abs() < 1e-4);
    }

    #[test]
    fn reduction_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let acc = GradientRatioAccumulator {
            g_pos: vec![0.3, 1.2, 0.7, 2.0],
            g_neg: vec![1.0, 0.5, 0.9, 3.0],
        };
        for _ in 0..500 {
            let (p, label) = random_case(&mut rng, 5);
            let y = one_hot(5, label);
            let base: f64 = rng.random_range(0.0..2.0);
            let s: f64 = rng.random_range(0.0..2.0);
            let ce = focal_factors_for(LossVariant::CrossEntropy, &acc, base, s);
            assert!((afl(&p, &y, &ce.lambda) - cross_entropy(&p, label)).abs() < 1e-12);
            let zero = compute_focal_factors(&acc, 0.0, 0.0);
            assert!((afl(&p, &y, &zero.lambda) - cross_entropy(&p, label)).abs() < 1e-12);
            let flat = compute_focal_factors(&acc, base, 0.0);
            assert!((afl(&p, &y, &flat.lambda) - focal_loss(&p, label, base)).abs() < 1e-12);
            let focal = focal_factors_for(LossVariant::Focal, &acc, base, s);
            assert!((afl(&p, &y, &focal.lambda) - focal_loss(&p, label, base)).abs() < 1e-12);
            let bg = focal_factors_for(LossVariant::BackgroundSuppression, &acc, base, s);
            assert!(
                (afl(&p, &y, &bg.lambda) - bg_suppression_focal(&p, label, base, s / 2.0)).abs() < 1e-12
            );
        }
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let z: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let label = rng.random_range(0..4);
            let lambda: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..2.0)).collect();
            let (v, g) = afl_logits(&z, label, &lambda);
            assert!((v - afl(&softmax(&z), &one_hot(4, label), &lambda)).abs() < 1e-12);
            for k in 0..4 {
                let h = 1e-6;
                let mut zp = z.clone();
                zp[k] += h;
                let mut zm = z.clone();
                zm[k] -= h;
                let fd = (afl_logits(&zp, label, &lambda).0 - afl_logits(&zm, label, &lambda).0) / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-6, "{fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn binary_gradient_matches_finite_differences() {
        for &z in &[-5.0, -1.3, 0.0, 0.4, 3.7] {
            for &positive in &[true, false] {
                for &l in &[0.0, 0.05, 1.0, 2.0] {
                    let (v, g) = binary_afl_logit(z, positive, l);
                    let p = crate::numerics::sigmoid(z);
                    let pt = if positive { p } else { 1.0 - p };
                    assert!((v - focal_loss(&[pt, 1.0 - pt], 0, l)).abs() < 1e-12);
                    let h = 1e-6;
                    let fd = (binary_afl_logit(z + h, positive, l).0 - binary_afl_logit(z - h, positive, l).0) / (2.0 * h);
                    assert!((fd - g).abs() < 1e-6, "z={z} pos={positive} l={l}: {fd} vs {g}");
                }
            }
        }
    }

    #[test]
    fn saturated_logits_stay_finite() {
        let (v, g) = afl_logits(&[60.0, -60.0, -60.0], 0, &[0.025, 0.05, 0.025]);
        assert!(v.is_finite() && (0.0..1e-11).contains(&v));
        assert!(g.iter().all(|x| x.is_finite()));
        let (v, g) = afl_logits(&[-80.0, 80.0, 0.0], 0, &[0.5, 0.5, 0.5]);
        assert!((v - -(PROB_CLAMP.ln())).abs() < 1e-9 && g.iter().all(|x| x.is_finite()));
        let (v, g) = binary_afl_logit(50.0, true, 0.05);
        assert!(v.is_finite() && g.is_finite() && v < 1e-11);
    }

    #[test]
    fn equal_ratios_give_midpoint_factor() {
        let acc = GradientRatioAccumulator {
            g_pos: vec![2.0, 2.0],
            g_neg: vec![1.0, 1.0],
        };
        let f = compute_focal_factors(&acc, 0.025, 0.05);
        assert!(f.foreground().iter().all(|&l| (l - 0.05).abs() < 1e-9));
        assert_eq!(f.background(), 0.025);
    }

    #[test]
    fn fresh_accumulator_gives_base_plus_half_scale() {
        let f = compute_focal_factors(&GradientRatioAccumulator::new(6), 0.025, 0.05);
        assert!(f.foreground().iter().all(|&l| l == 0.025 + 0.05 / 2.0));
    }

    #[test]
    fn larger_ratio_gets_smaller_factor() {
        let acc = GradientRatioAccumulator {
            g_pos: vec![1.0, 3.0, 2.0],
            g_neg: vec![1.0, 1.0, 1.0],
        };
        let f = compute_focal_factors(&acc, 0.025, 0.05);
        assert!(f.lambda[1] < f.lambda[2] && f.lambda[2] < f.lambda[0]);
    }

    #[test]
    fn accumulator_hand_example() {
        // Two anchors, two foreground classes, uniform logits, cross-entropy:
        // ∂L/∂z = p − y with p = 1/3 everywhere.
        let mut acc = GradientRatioAccumulator::new(2);
        let z = [0.0, 0.0, 0.0];
        let ce = FocalFactors::constant(2, 0.0);
        let (_, g0) = afl_logits(&z, 0, &ce.lambda);
        let (_, g1) = afl_logits(&z, 2, &ce.lambda);
        let grads = Tensor::from_rows(&[g0, g1]).unwrap();
        update_accumulator(&mut acc, &grads, &[0, 2]);
        assert!((acc.g_pos[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((acc.g_neg[0] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(acc.g_pos[1], 0.0);
        assert!((acc.g_neg[1] - 2.0 / 3.0).abs() < 1e-15);
        // A second step with no class-1 foreground leaves g_pos[1] alone.
        update_accumulator(&mut acc, &grads, &[0, 2]);
        assert_eq!(acc.g_pos[1], 0.0);
        assert!((acc.g_pos[0] - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn all_background_has_zero_regression_loss() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let zo = tape.input(Tensor::full(&[3, 1], 0.7));
        let zl = tape.input(Tensor::full(&[3, 1], -0.2));
        let r = regression_loss(&mut tape, zo, zl, &[TargetAssignment::Background; 3]).unwrap();
        assert_eq!((r.offset_value, r.length_value), (0.0, 0.0));
    }

    #[test]
    fn perfect_predictions_have_near_zero_loss() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let fg = TargetAssignment::Foreground {
            class: 1,
            offset: 0.25,
            log_length: -0.5,
            instance: 0,
            iou: 1.0,
        };
        let zc = tape.input(Tensor::from_rows(&[vec![-60.0, 60.0, -60.0], vec![-60.0, -60.0, 60.0]]).unwrap());
        let zo = tape.input(Tensor::from_rows(&[vec![0.25], vec![3.0]]).unwrap());
        let zl = tape.input(Tensor::from_rows(&[vec![-0.5], vec![1.0]]).unwrap());
        let f = FocalFactors::constant(2, 0.025);
        let c = classification_loss(&mut tape, zc, &[1, 2], &f).unwrap();
        let r = regression_loss(&mut tape, zo, zl, &[fg, TargetAssignment::Background]).unwrap();
        let a = tape.input(Tensor::from_rows(&[vec![60.0, -60.0]]).unwrap());
        let (la, la_value) = anticipation_loss(&mut tape, a, &[true, false], &f).unwrap();
        let total = total_loss(&mut tape, c.node, &r, Some(la), &LossWeights::default()).unwrap();
        let v = tape.value(total).data()[0];
        assert!((0.0..1e-11).contains(&v), "{v}");
        assert!(la_value < 1e-11);
    }

    #[test]
    fn tape_gradient_equals_analytic_logit_gradient() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let z = Tensor::from_rows(&[vec![0.3, -1.0, 2.0], vec![1.5, 0.2, -0.7]]).unwrap();
        let zc = tape.input(z);
        let f = FocalFactors {
            lambda: vec![0.04, 0.06, 0.025],
            base: 0.025,
            scale: 0.05,
        };
        let c = classification_loss(&mut tape, zc, &[1, 2], &f).unwrap();
        let g = tape.backward(c.node).unwrap();
        assert_eq!(g.node(zc).unwrap().data(), c.logit_grads.data());
    }

    #[test]
    fn anticipation_targets_need_one_step_of_overlap() {
        let gt = [
            GroundTruthInstance { start: 2, end: 9, class: 0 },
            GroundTruthInstance { start: 19, end: 30, class: 1 },
            GroundTruthInstance { start: 0, end: 3, class: 2 },
        ];
        // Window [4, 20].
        assert_eq!(anticipation_targets(&gt, 20, 16, 3), vec![true, true, false]);
    }

    #[test]
    fn weights_default() {
        assert_eq!(LossWeights::default(), LossWeights { alpha: 1.0, beta: 1.0, gamma: 0.2 });
    }

    #[test]
    fn focal_log_has_header_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("focal.csv");
        let acc = GradientRatioAccumulator::new(2);
        let f = compute_focal_factors(&acc, 0.025, 0.05);
        append_focal_log(&path, 0, &acc, &f).unwrap();
        append_focal_log(&path, 1, &acc, &f).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert_eq!(text.lines().next().unwrap(), "epoch,class_id,g_pos,g_neg,lambda");
        assert!(text.lines().nth(4).unwrap().starts_with("1,1,0,0,0.05"));
    }

    proptest! {
        #[test]
        fn factors_stay_in_range(
            pos in proptest::collection::vec(0.0f64..100.0, 1..10),
            neg_scale in 0.0f64..10.0,
            base in 0.0f64..1.0,
            s in 0.0f64..1.0,
        ) {
            let acc = GradientRatioAccumulator {
                g_neg: pos.iter().map(|p| p * neg_scale + 0.1).collect(),
                g_pos: pos,
            };
            let f = compute_focal_factors(&acc, base, s);
            prop_assert_eq!(f.background(), base);
            for &l in f.foreground() {
                prop_assert!(l >= base && l <= base + s);
            }
        }

        #[test]
        fn losses_are_nonnegative(
            z in proptest::collection::vec(-20.0f64..20.0, 2..8),
            pick in 0usize..8,
            l in 0.0f64..3.0,
        ) {
            let label = pick % z.len();
            let lambda = vec![l; z.len()];
            let (v, _) = afl_logits(&z, label, &lambda);
            prop_assert!(v >= 0.0);
            let (b, _) = binary_afl_logit(z[0], pick % 2 == 0, l);
            prop_assert!(b >= 0.0);
        }
    }
}
