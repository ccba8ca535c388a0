use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use hat_core::checkpoint::Checkpoint;
use hat_core::commands::{self, InferOptions};
use hat_core::config::RunConfig;
use hat_core::infer::GateKind;
use hat_core::losses::{afl, compute_focal_factors, GradientRatioAccumulator};
use hat_core::synthdata::ProceduralGrammar;
use hat_core::HatError;

fn err(e: HatError) -> PyErr {
    match e {
        HatError::Config(_) | HatError::ConfigViolations(_) | HatError::Dimension { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn config(toy: bool, sets: Vec<String>) -> PyResult<RunConfig> {
    let base = if toy { RunConfig::toy() } else { RunConfig::default() };
    let (mut cfg, _) = RunConfig::build(base, None, &sets, &[]).map_err(err)?;
    cfg.apply_env_seed().map_err(err)?;
    Ok(cfg)
}

/// Canonical config text for the toy or full-size defaults plus overrides.
#[pyfunction]
#[pyo3(signature = (toy = true, sets = Vec::new()))]
fn config_text(toy: bool, sets: Vec<String>) -> PyResult<String> {
    Ok(config(toy, sets)?.canonical_text())
}

/// Writes `n` synthetic videos and `annotations.csv` into `out`.
#[pyfunction]
#[pyo3(signature = (out, n = 4, steps = 400, seed = 0))]
fn synth(out: PathBuf, n: usize, steps: usize, seed: u64) -> PyResult<Vec<String>> {
    let report = commands::cmd_synth(&ProceduralGrammar::default(), n, steps, seed, &out).map_err(err)?;
    Ok(report.warnings)
}

/// Trains on a directory of feature files; returns per-epoch mean losses.
#[pyfunction]
#[pyo3(signature = (data, out, toy = true, sets = Vec::new()))]
fn train(data: PathBuf, out: PathBuf, toy: bool, sets: Vec<String>) -> PyResult<Vec<f64>> {
    let cfg = config(toy, sets)?;
    let ann = data.join(commands::ANNOTATION_FILE);
    let t = commands::cmd_train(&cfg, &data, &ann, &out).map_err(err)?;
    Ok(t.epochs.iter().map(|e| e.loss).collect())
}

/// Streams feature files through a checkpoint. Returns, per video, the
/// emitted instances as `(emission_time, start, end, class_id, score)`.
#[pyfunction]
#[pyo3(signature = (checkpoint, features, out, audit = false, gate = "osn"))]
fn infer<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    features: Vec<PathBuf>,
    out: PathBuf,
    audit: bool,
    gate: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let gate = match gate {
        "osn" => GateKind::Osn,
        "score" => GateKind::Score,
        other => return Err(PyValueError::new_err(format!("unknown gate `{other}` (osn|score)"))),
    };
    let ck = Checkpoint::load(&checkpoint, None, false).map_err(err)?;
    let opts = InferOptions {
        audit,
        attention: false,
        gate,
    };
    let dict = PyDict::new(py);
    for s in commands::cmd_infer(&ck, &features, &out, opts).map_err(err)? {
        if let Some(a) = &s.audit {
            if !a.passed {
                return Err(PyRuntimeError::new_err(format!("{}: online audit failed: {:?}", s.video, a.violations)));
            }
        }
        let rows: Vec<(u32, f64, f64, usize, f64)> = s
            .result
            .psi
            .iter()
            .map(|p| (p.emission_time, p.start, p.end, p.class_id(), p.score()))
            .collect();
        dict.set_item(s.video, rows)?;
    }
    Ok(dict)
}

/// mAP per threshold, their average and AEDT for a set of Ψ files.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, proposals: Vec<PathBuf>, annotations: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let m = commands::cmd_eval(&proposals, &annotations, &Default::default(), None, None).map_err(err)?;
    let dict = PyDict::new(py);
    for (k, v) in &m.map {
        dict.set_item(format!("map@{k}"), v)?;
    }
    dict.set_item("avg_map", m.avg_map)?;
    dict.set_item("aedt", m.aedt)?;
    Ok(dict)
}

/// Adaptive focal loss of probabilities `p` against one-hot targets `y`
/// (background last).
#[pyfunction]
fn adaptive_focal_loss(p: Vec<f64>, y: Vec<f64>, lambdas: Vec<f64>) -> PyResult<f64> {
    if p.len() != y.len() || p.len() != lambdas.len() {
        return Err(PyValueError::new_err("p, y and lambdas must have equal length"));
    }
    Ok(afl(&p, &y, &lambdas))
}

/// Focal factors `λ^j` from accumulated positive and negative gradient sums.
#[pyfunction]
fn focal_factors(g_pos: Vec<f64>, g_neg: Vec<f64>, lambda_b: f64, s: f64) -> PyResult<Vec<f64>> {
    if g_pos.len() != g_neg.len() {
        return Err(PyValueError::new_err("g_pos and g_neg differ in length"));
    }
    let acc = GradientRatioAccumulator { g_pos, g_neg };
    Ok(compute_focal_factors(&acc, lambda_b, s).lambda)
}

#[pymodule]
fn hat(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(config_text, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(infer, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(adaptive_focal_loss, m)?)?;
    m.add_function(wrap_pyfunction!(focal_factors, m)?)?;
    Ok(())
}
