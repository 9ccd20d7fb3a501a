//! Python bindings: chain inference, factorized KD losses, saved models
//! and the command line.

use ndarray::{Array1, Array2, Array3};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use structkd::chain_crf::{self, ChainLattice};
use structkd::distill::{self, MarginalTable};
use structkd::error::Error;
use structkd::model::{AnyModel, Family, ModelFile};
use structkd::corpus::Gold;
use structkd::oracle::{enumerate, exact_partition, ScoreSource};
use structkd::train_eval::evaluate;
use structkd::verify::{self, Suite};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyOSError::new_err(e.to_string()),
        Error::Usage(_) | Error::Parse { .. } | Error::Json(_) | Error::TooLarge { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>, what: &str) -> PyResult<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err(format!("{what} rows differ in length")));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn cube(slices: Vec<Vec<Vec<f64>>>, what: &str) -> PyResult<Array3<f64>> {
    let mats = slices
        .into_iter()
        .map(|s| matrix(s, what))
        .collect::<PyResult<Vec<_>>>()?;
    let (a, b) = mats.first().map_or((0, 0), |m| m.dim());
    if mats.iter().any(|m| m.dim() != (a, b)) {
        return Err(PyValueError::new_err(format!("{what} slices differ in shape")));
    }
    let n = mats.len();
    Array3::from_shape_vec((n, a, b), mats.into_iter().flat_map(|m| m.into_iter()).collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

type Rows = Vec<Vec<f64>>;

fn rows(a: &Array2<f64>) -> Rows {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn slices(a: &Array3<f64>) -> Vec<Vec<Vec<f64>>> {
    a.outer_iter().map(|m| m.rows().into_iter().map(|r| r.to_vec()).collect()).collect()
}

/// A chain lattice from nested lists: emissions `n × L`, transitions
/// `(n−1) × L × L`, start and stop of length `L`.
#[pyclass(name = "ChainLattice", frozen)]
struct PyChainLattice {
    inner: ChainLattice,
}

#[pymethods]
impl PyChainLattice {
    #[new]
    fn new(
        emissions: Vec<Vec<f64>>,
        transitions: Vec<Vec<Vec<f64>>>,
        start: Vec<f64>,
        stop: Vec<f64>,
    ) -> PyResult<Self> {
        let e = matrix(emissions, "emissions")?;
        let l = e.ncols();
        let t = if transitions.is_empty() {
            Array3::zeros((0, l, l))
        } else {
            cube(transitions, "transitions")?
        };
        let inner = ChainLattice::new(e, t, Array1::from(start), Array1::from(stop)).map_err(py_err)?;
        Ok(PyChainLattice { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn log_partition(&self) -> f64 {
        chain_crf::log_partition(&self.inner)
    }

    /// Log-partition by enumerating every tag sequence.
    fn exact_log_partition(&self) -> PyResult<f64> {
        Ok(exact_partition(&enumerate(ScoreSource::Chain(&self.inner)).map_err(py_err)?))
    }

    /// `(pairwise, unary)` marginals.
    fn marginals(&self) -> PyResult<(Vec<Rows>, Rows)> {
        let m = chain_crf::pairwise_marginals(&self.inner).map_err(py_err)?;
        Ok((slices(&m.pairwise), rows(&m.unary)))
    }

    fn viterbi(&self) -> Vec<usize> {
        chain_crf::viterbi(&self.inner).0
    }

    fn sequence_score(&self, tags: Vec<usize>) -> PyResult<f64> {
        if tags.len() != self.inner.len() || tags.iter().any(|&t| t >= self.inner.num_labels()) {
            return Err(PyValueError::new_err("tag sequence does not fit the lattice"));
        }
        Ok(self.inner.sequence_score(&tags))
    }

    /// KD loss of `self` as the student against `teacher`'s pairwise
    /// marginals at the given temperature and mode.
    #[pyo3(signature = (teacher, temperature = 1.0, mode = "local"))]
    fn kd_loss_global(&self, teacher: &PyChainLattice, temperature: f64, mode: &str) -> PyResult<f64> {
        let temp = distill::TemperatureConfig::new(temperature, mode.parse().map_err(py_err)?).map_err(py_err)?;
        let table = distill::crf_pairwise_table(&teacher.inner, &temp).map_err(py_err)?;
        Ok(distill::kd_loss_global(&table, &self.inner).map_err(py_err)?.0)
    }

    /// Teacher unary marginals after temperature.
    #[pyo3(signature = (temperature = 1.0, mode = "local"))]
    fn unary_table(&self, temperature: f64, mode: &str) -> PyResult<Vec<Vec<f64>>> {
        let temp = distill::TemperatureConfig::new(temperature, mode.parse().map_err(py_err)?).map_err(py_err)?;
        match distill::crf_unary_table(&self.inner, &temp).map_err(py_err)? {
            MarginalTable::Unary(u) => Ok(rows(&u)),
            _ => Err(PyRuntimeError::new_err("unexpected table shape")),
        }
    }
}

/// Per-site KD cross-entropy `−Σ p log q` with its gradient.
#[pyfunction]
fn kd_loss_local(teacher: Vec<Vec<f64>>, student_logp: Vec<Vec<f64>>) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let (loss, g) = distill::kd_loss_local(&matrix(teacher, "teacher")?, &matrix(student_logp, "student")?)
        .map_err(py_err)?;
    Ok((loss, rows(&g)))
}

/// A saved model.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: AnyModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let f = std::fs::File::open(path).map_err(|e| PyOSError::new_err(format!("{path}: {e}")))?;
        let m = ModelFile::read(std::io::BufReader::new(f)).map_err(py_err)?;
        Ok(PyModel { inner: m.model })
    }

    #[getter]
    fn family(&self) -> String {
        self.inner.family().to_string()
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.output_labels().labels().to_vec()
    }

    /// Tag names for sequence labelers, `(head, relation)` pairs for
    /// parsers, `(start, end, type)` triples for span models.
    fn predict<'py>(&self, py: Python<'py>, tokens: Vec<String>) -> PyResult<Bound<'py, PyAny>> {
        if tokens.is_empty() {
            return Err(PyValueError::new_err("empty sentence"));
        }
        let pred = self.inner.predict(&self.inner.features(&tokens)).map_err(py_err)?;
        let labels = self.inner.labels();
        let name = |i: usize| labels.label(i).unwrap_or("?").to_owned();
        Ok(match pred {
            Gold::Tags(t) => t.0.into_iter().map(name).collect::<Vec<_>>().into_pyobject(py)?.into_any(),
            Gold::Heads(h) => h
                .heads
                .into_iter()
                .zip(h.rels.into_iter().map(name))
                .collect::<Vec<_>>()
                .into_pyobject(py)?
                .into_any(),
            Gold::Spans(s) => s
                .spans()
                .iter()
                .map(|sp| (sp.start, sp.end, name(sp.label)))
                .collect::<Vec<_>>()
                .into_pyobject(py)?
                .into_any(),
        })
    }

    /// Evaluation report on an annotated file, as a JSON string.
    fn evaluate(&self, path: &str) -> PyResult<String> {
        let corpus = structkd::cli::read_corpus(std::path::Path::new(path), self.inner.family()).map_err(py_err)?;
        let r = evaluate(&self.inner, &corpus).map_err(py_err)?;
        serde_json::to_string(&r).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }
}

/// Runs the self-checks; returns `(passed, report_json)`.
#[pyfunction]
#[pyo3(signature = (suite = "all", instances = 100, seed = 0))]
fn run_verify(suite: &str, instances: usize, seed: u64) -> PyResult<(bool, String)> {
    let s: Suite = suite.parse().map_err(py_err)?;
    let r = verify::run(s, instances, seed).map_err(py_err)?;
    let json = serde_json::to_string(&r).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok((r.passed(), json))
}

/// Runs the command line with `argv` (without the program name) and
/// returns `(exit_code, stdout, stderr)`.
#[pyfunction]
fn run_cli(argv: Vec<String>) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let args = std::iter::once("structkd".to_owned()).chain(argv);
    let code = structkd::cli::run(args, &mut out, &mut err);
    (code, String::from_utf8_lossy(&out).into_owned(), String::from_utf8_lossy(&err).into_owned())
}

#[pyfunction]
fn families() -> Vec<&'static str> {
    Family::ALL.iter().map(|f| f.name()).collect()
}

#[pymodule]
fn structkd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyChainLattice>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(kd_loss_local, m)?)?;
    m.add_function(wrap_pyfunction!(run_verify, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_function(wrap_pyfunction!(families, m)?)?;
    Ok(())
}
