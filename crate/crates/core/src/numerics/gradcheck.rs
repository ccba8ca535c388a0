//! Central finite-difference verification of tape gradients (64-bit only).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use crate::error::{HatError, Result};

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for the relative error, so near-zero gradients are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Location of the worst entry, e.g. `param anchor.decoder.0.ffn.inner.weight[17]`.
    pub worst: Option<String>,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares every parameter and input gradient of `f` against central differences.
///
/// `f` builds a scalar loss from the tape and the input nodes created for `inputs`.
pub fn grad_check<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    tolerance: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>, &[NodeId]) -> Result<NodeId>,
{
    grad_check_sampled(store, inputs, tolerance, None, f)
}

/// Coordinates of a tensor of `len` entries to perturb: all of them, or
/// `n` distinct ones drawn from `seed`.
fn coordinates(len: usize, sample: Option<(usize, u64)>) -> Vec<usize> {
    match sample {
        Some((n, seed)) if n < len => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ len as u64);
            let mut picked = rand::seq::index::sample(&mut rng, len, n).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..len).collect(),
    }
}

/// As [`grad_check`], perturbing at most `n` coordinates per tensor when
/// `sample` is `Some((n, seed))`.
pub fn grad_check_sampled<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    tolerance: f64,
    sample: Option<(usize, u64)>,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new(store);
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let loss = f(&mut tape, &ids)?;
        tape.check_finite()?;
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = Tape::new(store);
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = f(&mut tape, &ids)?;
    tape.check_finite()?;
    let grads = tape.backward(loss)?;

    let mut max_err = 0.0f64;
    let mut worst = None;
    let mut checked = 0usize;
    let mut record = |err: f64, loc: String| {
        if err > max_err || worst.is_none() {
            max_err = max_err.max(err);
            worst = Some(loc);
        }
    };

    let mut perturbed = store.clone();
    for (pid, p) in store.iter() {
        let analytic = grads.param(pid);
        for k in coordinates(p.value.len(), sample.map(|(n, s)| (n, s ^ (pid.0 as u64).wrapping_mul(0x9e37_79b9)))) {
            let orig = p.value.data()[k];
            perturbed.value_mut(pid).data_mut()[k] = orig + FD_STEP;
            let up = eval(&perturbed, inputs)?;
            perturbed.value_mut(pid).data_mut()[k] = orig - FD_STEP;
            let down = eval(&perturbed, inputs)?;
            perturbed.value_mut(pid).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.map_or(0.0, |g| g.data()[k]);
            checked += 1;
            record(relative_error(a, numeric), format!("param {}[{k}]", p.name));
        }
    }

    let mut shifted: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, &node) in ids.iter().enumerate() {
        let analytic = grads.node(node);
        for k in coordinates(inputs[i].len(), sample.map(|(n, s)| (n, s.wrapping_add(1 + i as u64)))) {
            let orig = inputs[i].data()[k];
            shifted[i].data_mut()[k] = orig + FD_STEP;
            let up = eval(store, &shifted)?;
            shifted[i].data_mut()[k] = orig - FD_STEP;
            let down = eval(store, &shifted)?;
            shifted[i].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.map_or(0.0, |g| g.data()[k]);
            checked += 1;
            record(relative_error(a, numeric), format!("input {i}[{k}]"));
        }
    }

    if !max_err.is_finite() {
        return Err(HatError::NonFinite {
            node: 0,
            op: "finite difference",
        });
    }
    Ok(GradCheckReport {
        max_rel_error: max_err,
        worst,
        checked,
        tolerance,
        passed: max_err < tolerance,
    })
}

/// Scalar probe `Σ out · w` with a fixed random column `w`; avoids the
/// degenerate all-ones cotangent that normalisation layers ignore.
pub fn probe_loss(tape: &mut Tape<'_, f64>, out: NodeId, seed: u64) -> Result<NodeId> {
    let cols = tape.value(out).cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = tape.input(Tensor::matrix(cols, 1, w)?);
    let y = tape.matmul(out, w)?;
    Ok(tape.sum(y))
}

/// Random tensor in [-1, 1) for test fixtures and gradient checks.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("shape matches")
}
