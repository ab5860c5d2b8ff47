//! Python bindings: parameter accounting, the gradient-check suite and
//! verification metrics.

use std::collections::BTreeMap;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use focusface::checks::gradcheck_suite;
use focusface::metrics::{compute_metrics, ScoreSet};
use focusface::model::{paper_scale_descriptor, Frozen, ModuleRole};

fn value_error(e: focusface::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Per-module parameter counts of the paper-scale architecture, plus the
/// inference, scratch and frozen-backbone totals.
#[pyfunction]
fn paper_param_counts() -> BTreeMap<String, u64> {
    let arch = paper_scale_descriptor();
    let mut out = BTreeMap::new();
    for (key, role) in [
        ("backbone", ModuleRole::Backbone),
        ("recognition_embedding", ModuleRole::RecognitionEmbedding),
        ("mask_embedding", ModuleRole::MaskEmbedding),
        ("arcface", ModuleRole::ArcFace),
        ("mask_classifier", ModuleRole::MaskClassifier),
    ] {
        out.insert(key.to_string(), arch.count(role));
    }
    out.insert("inference".into(), arch.inference());
    out.insert("scratch".into(), arch.trainable(Frozen::None));
    out.insert("frozen".into(), arch.trainable(Frozen::Backbone));
    out
}

/// Runs the gradient-check suite. Returns `(name, points, max_rel_error, passed)` rows.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn gradcheck(py: Python<'_>, seed: u64) -> PyResult<Vec<(String, usize, f64, bool)>> {
    let outcomes = py.detach(|| gradcheck_suite(seed)).map_err(value_error)?;
    Ok(outcomes
        .into_iter()
        .map(|o| (o.name.to_string(), o.points, o.max_rel_error, o.passed()))
        .collect())
}

/// EER, AUC, FMR100, FMR10, GMean, IMean and the EER threshold of a score set.
#[pyfunction]
fn metrics(genuine: Vec<f64>, impostor: Vec<f64>) -> PyResult<BTreeMap<String, f64>> {
    let r = compute_metrics(&ScoreSet { genuine, impostor }).map_err(value_error)?;
    Ok(BTreeMap::from([
        ("eer".to_string(), r.eer),
        ("auc".to_string(), r.auc),
        ("fmr100".to_string(), r.fmr100),
        ("fmr10".to_string(), r.fmr10),
        ("gmean".to_string(), r.gmean),
        ("imean".to_string(), r.imean),
        ("threshold_at_eer".to_string(), r.threshold_at_eer),
    ]))
}

#[pymodule]
fn focusface_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(paper_param_counts, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    Ok(())
}
