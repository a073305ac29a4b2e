//! Python bindings: memory, losses, metrics and whole experiments.

use std::path::PathBuf;

use exmem::datagen::{generate, read_dataset, write_dataset, GenConfig};
use exmem::evalkit::{evaluate, ItemLabel};
use exmem::numerics::{DenseMat, EPS};
use exmem::trainer::{train, EvalSplit, TrainConfig, TrainData};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: exmem::Error) -> PyErr {
    match e {
        exmem::Error::NonFinite(_) => PyArithmeticError::new_err(e.to_string()),
        exmem::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>, cols: usize) -> PyResult<DenseMat> {
    if rows.is_empty() {
        return Ok(DenseMat::zeros(0, cols));
    }
    DenseMat::from_rows(&rows).map_err(to_py)
}

fn parse_json<T: serde::de::DeserializeOwned + Default>(text: Option<&str>) -> PyResult<T> {
    match text {
        None => Ok(T::default()),
        Some(t) => serde_json::from_str(t).map_err(|e| PyValueError::new_err(e.to_string())),
    }
}

/// Slot-per-image feature memory.
#[pyclass(name = "ExemplarMemory")]
struct PyMemory {
    inner: exmem::memory::ExemplarMemory,
}

#[pymethods]
impl PyMemory {
    #[new]
    fn new(n_slots: usize, dim: usize) -> PyResult<Self> {
        Ok(PyMemory {
            inner: exmem::memory::ExemplarMemory::new(n_slots, dim).map_err(to_py)?,
        })
    }

    #[getter]
    fn n_slots(&self) -> usize {
        self.inner.n_slots()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn values(&self) -> Vec<usize> {
        self.inner.values().to_vec()
    }

    fn key(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.inner.n_slots() {
            return Err(PyValueError::new_err(format!("slot {i} out of range")));
        }
        Ok(self.inner.key(i).to_vec())
    }

    fn keys(&self) -> Vec<Vec<f64>> {
        self.inner.keys().iter_rows().map(<[f64]>::to_vec).collect()
    }

    fn update(&mut self, i: usize, f: Vec<f64>, alpha: f64) -> PyResult<()> {
        self.inner.update(i, &f, alpha).map_err(to_py)
    }

    fn probabilities(&self, f: Vec<f64>, beta: f64) -> PyResult<Vec<f64>> {
        self.inner.probabilities(&f, beta).map_err(to_py)
    }

    /// `(indices, similarities)` with the anchor first.
    fn knn(&self, anchor: usize, f: Vec<f64>, k: usize) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let set = self.inner.knn(anchor, &f, k).map_err(to_py)?;
        Ok((set.indices, set.similarities))
    }
}

#[pyfunction]
fn l2_normalize(v: Vec<f64>) -> Vec<f64> {
    exmem::numerics::l2_normalize(&v, EPS)
}

#[pyfunction]
fn softmax_temp(scores: Vec<f64>, beta: f64) -> Vec<f64> {
    exmem::numerics::softmax_temp(&scores, beta)
}

#[pyfunction]
fn entropy(p: Vec<f64>) -> f64 {
    exmem::numerics::entropy(&p)
}

/// `(loss, grad_logits)`
#[pyfunction]
fn source_ce(logits: Vec<f64>, label: usize) -> PyResult<(f64, Vec<f64>)> {
    exmem::invariance::source_ce(&logits, label).map_err(to_py)
}

/// `(loss, grad_f, exemplar_or_camera_part, neighborhood_part)`
#[pyfunction]
fn target_loss(
    memory: &PyMemory,
    f: Vec<f64>,
    anchor: usize,
    k: usize,
    beta: f64,
) -> PyResult<(f64, Vec<f64>, f64, f64)> {
    let t = exmem::invariance::target_loss(&memory.inner, &f, anchor, k, beta).map_err(to_py)?;
    Ok((
        t.loss,
        t.grad_f,
        t.split.exemplar_or_camera,
        t.split.neighborhood,
    ))
}

#[pyfunction]
fn total_loss(src_loss: f64, tgt_loss: f64, lambda: f64) -> PyResult<f64> {
    exmem::invariance::total_loss(src_loss, tgt_loss, lambda).map_err(to_py)
}

/// Labels are `(pid, cam)` pairs. Returns a dict with `cmc`, `map`,
/// `n_queries`, `skipped` and `per_query_ap`.
#[pyfunction]
fn cmc_map<'py>(
    py: Python<'py>,
    query_feats: Vec<Vec<f64>>,
    query_labels: Vec<(u32, u32)>,
    gallery_feats: Vec<Vec<f64>>,
    gallery_labels: Vec<(u32, u32)>,
    ranks: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let dim = query_feats
        .first()
        .or(gallery_feats.first())
        .map_or(0, Vec::len);
    let label = |v: Vec<(u32, u32)>| -> Vec<ItemLabel> {
        v.into_iter()
            .map(|(pid, cam)| ItemLabel { pid, cam })
            .collect()
    };
    let r = exmem::evalkit::cmc_map(
        &matrix(query_feats, dim)?,
        &label(query_labels),
        &matrix(gallery_feats, dim)?,
        &label(gallery_labels),
        ranks,
    )
    .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("cmc", r.cmc)?;
    d.set_item("map", r.map)?;
    d.set_item("n_queries", r.n_queries)?;
    d.set_item("skipped", r.skipped)?;
    d.set_item("per_query_ap", r.per_query_ap)?;
    Ok(d)
}

/// Write a synthetic dataset to `out_dir`. `config_json` overrides the
/// generator defaults.
#[pyfunction]
#[pyo3(signature = (out_dir, config_json=None))]
fn generate_dataset(out_dir: PathBuf, config_json: Option<&str>) -> PyResult<()> {
    let cfg: GenConfig = parse_json(config_json)?;
    cfg.validate().map_err(to_py)?;
    let bundle = generate(&cfg).map_err(to_py)?;
    write_dataset(&bundle, &out_dir).map_err(to_py)
}

/// Train on the dataset in `data_dir` and evaluate on its query/gallery
/// split. Returns a dict with `map`, `cmc1`, `cmc5` and per-epoch `losses`.
#[pyfunction]
#[pyo3(signature = (data_dir, config_json=None))]
fn run_experiment<'py>(
    py: Python<'py>,
    data_dir: PathBuf,
    config_json: Option<&str>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg: TrainConfig = parse_json(config_json)?;
    let bundle = read_dataset(&data_dir).map_err(to_py)?;
    let eval = bundle
        .ground_truth
        .as_ref()
        .map(|_| EvalSplit::from_bundle(&bundle));
    let outcome = py
        .detach(|| train(&cfg, TrainData::from_bundle(&bundle), eval))
        .map_err(to_py)?;
    let r = evaluate(&outcome.net, &bundle.target_query, &bundle.target_gallery).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("mode", outcome.config.mode.name())?;
    d.set_item("map", r.map)?;
    d.set_item("cmc1", r.cmc_at(1))?;
    d.set_item("cmc5", r.cmc_at(5))?;
    d.set_item(
        "losses",
        outcome
            .logs
            .iter()
            .map(|l| l.loss_total)
            .collect::<Vec<_>>(),
    )?;
    Ok(d)
}

/// Run the command line with `args` (without the program name); returns
/// the exit code.
#[pyfunction]
fn cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv = std::iter::once("exmem".to_string()).chain(args);
    py.detach(|| exmem::cli::main_with_args(argv))
}

#[pymodule]
fn exmem_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMemory>()?;
    m.add_function(wrap_pyfunction!(l2_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_temp, m)?)?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(source_ce, m)?)?;
    m.add_function(wrap_pyfunction!(target_loss, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cmc_map, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
