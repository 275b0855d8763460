//! Python bindings for `mcvos`. Matrices cross the boundary as lists of rows.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mcvos::checkpoint::Checkpoint;
use mcvos::config::{RunConfig, ScoreKind};
use mcvos::dataset::{Domain, LabeledDataset};
use mcvos::experiment::{self, ScoredRow};
use mcvos::mcdropout::{self, McSamples, McSummary};
use mcvos::metrics::{self, Positive, ScoredPopulations};
use mcvos::numerics::{Matrix, RngStream};

fn py_err(e: mcvos::Error) -> PyErr {
    match e {
        mcvos::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(py_err)
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

fn positive(name: &str) -> PyResult<Positive> {
    match name {
        "id" => Ok(Positive::Id),
        "ood" => Ok(Positive::Ood),
        _ => Err(PyValueError::new_err(format!(
            "positive must be 'id' or 'ood', got {name:?}"
        ))),
    }
}

fn populations(id: Vec<f64>, ood: Vec<f64>) -> PyResult<ScoredPopulations> {
    ScoredPopulations::new(id, ood).map_err(py_err)
}

fn summary_dict<'py>(py: Python<'py>, s: &McSummary) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("mean_probs", &s.mean_probs)?;
    d.set_item("predicted", s.predicted)?;
    d.set_item("entropy", s.entropy)?;
    d.set_item("mutual_info", s.mutual_info)?;
    d.set_item("ekl", s.ekl)?;
    d.set_item("variance", s.variance)?;
    d.set_item("energy_mean", s.energy_mean)?;
    d.set_item("energy_var", s.energy_var)?;
    d.set_item("energy_score", s.energy_score())?;
    Ok(d)
}

fn scored_dict<'py>(py: Python<'py>, r: &ScoredRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("sample_id", &r.sample_id)?;
    d.set_item("label", r.label)?;
    d.set_item("pred", r.pred)?;
    d.set_item("domain", r.domain.as_str())?;
    d.set_item("mi", r.mi)?;
    d.set_item("ekl", r.ekl)?;
    d.set_item("var", r.var)?;
    d.set_item("entropy", r.entropy)?;
    d.set_item("energy_mean", r.energy_mean)?;
    d.set_item("energy_var", r.energy_var)?;
    d.set_item("combined", r.combined)?;
    d.set_item("confidence", r.confidence)?;
    Ok(d)
}

/// Run configuration: a preset plus `key = value` overrides.
#[pyclass(name = "RunConfig", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (preset = "toy-vos"))]
    fn new(preset: &str) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: RunConfig::preset(preset).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: RunConfig::parse_str(text).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: RunConfig::load(path.as_ref()).map_err(py_err)?,
        })
    }

    /// Sets one key; the whole configuration must stay valid.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.set(key, value).map_err(py_err)?;
        next.validate().map_err(py_err)?;
        self.inner = next;
        Ok(())
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn mc_samples(&self) -> usize {
        self.inner.mc_samples
    }

    fn __repr__(&self) -> String {
        format!(
            "RunConfig(seed={}, loss={:?})",
            self.inner.seed, self.inner.loss
        )
    }
}

/// A trained classifier with the settings needed to save it as a checkpoint.
#[pyclass(name = "Model", from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: Checkpoint,
    log: Vec<String>,
}

#[pymethods]
impl PyModel {
    /// Trains on `features`/`labels`, or on the configured toy clusters when
    /// both are omitted.
    #[staticmethod]
    #[pyo3(signature = (config, features = None, labels = None))]
    fn train(
        py: Python<'_>,
        config: &PyRunConfig,
        features: Option<Vec<Vec<f64>>>,
        labels: Option<Vec<usize>>,
    ) -> PyResult<Self> {
        let cfg = config.inner.clone();
        let data = match (features, labels) {
            (Some(f), Some(l)) => {
                let classes = l.iter().max().map_or(0, |m| m + 1);
                LabeledDataset::new(matrix(f)?, l, classes).map_err(py_err)?
            }
            (None, None) => experiment::toy_data(&cfg).map_err(py_err)?.train,
            _ => return Err(PyValueError::new_err("features and labels go together")),
        };
        let trained = py
            .detach(|| experiment::train_model(&cfg, &data))
            .map_err(py_err)?;
        let tc = cfg.train_config();
        Ok(PyModel {
            log: trained.logs.iter().map(|l| l.csv_row()).collect(),
            inner: Checkpoint {
                model: trained.model,
                loss: tc.loss,
                tau: cfg.tau,
                beta: tc.beta,
                seed: cfg.seed,
                vos: trained.vos,
            },
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: Checkpoint::load(path).map_err(py_err)?,
            log: Vec::new(),
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.model.input_dim()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.model.num_classes()
    }

    /// Training log as CSV lines, header first; empty for loaded models.
    #[getter]
    fn train_log(&self) -> Vec<String> {
        if self.log.is_empty() {
            return Vec::new();
        }
        let header = mcvos::mlp::EpochLog::CSV_HEADER.to_string();
        std::iter::once(header)
            .chain(self.log.iter().cloned())
            .collect()
    }

    /// MC-dropout summaries, one dict per input row. Input `j` draws from
    /// substream `j` of `(seed, stream)`.
    #[pyo3(signature = (inputs, passes, seed, stream = 0))]
    fn mc_summaries<'py>(
        &self,
        py: Python<'py>,
        inputs: Vec<Vec<f64>>,
        passes: usize,
        seed: u64,
        stream: u64,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let x = matrix(inputs)?;
        let rng = RngStream::new(seed, stream);
        let sums = py
            .detach(|| experiment::mc_summaries(&self.inner.model, &x, passes, &rng, false))
            .map_err(py_err)?;
        sums.iter().map(|s| summary_dict(py, s)).collect()
    }

    /// Scores ID and OOD inputs as the `eval` command does.
    #[pyo3(signature = (config, id, ood, id_labels = None))]
    fn score<'py>(
        &self,
        py: Python<'py>,
        config: &PyRunConfig,
        id: Vec<Vec<f64>>,
        ood: Vec<Vec<f64>>,
        id_labels: Option<Vec<usize>>,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let (id, ood) = (matrix(id)?, matrix(ood)?);
        let (rows, _) = py
            .detach(|| {
                experiment::score_model(
                    &self.inner.model,
                    &id,
                    id_labels.as_deref(),
                    &ood,
                    &config.inner,
                )
            })
            .map_err(py_err)?;
        rows.iter().map(|r| scored_dict(py, r)).collect()
    }

    /// Aleatoric, epistemic and combined maps over the configured grid.
    fn uncertainty_maps<'py>(
        &self,
        py: Python<'py>,
        config: &PyRunConfig,
    ) -> PyResult<Bound<'py, PyDict>> {
        let maps = py
            .detach(|| experiment::uncertainty_maps(&self.inner.model, &config.inner))
            .map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("points", rows_of(&maps.points))?;
        d.set_item("aleatoric", maps.aleatoric)?;
        d.set_item("epistemic", maps.epistemic)?;
        d.set_item("combined", maps.combined)?;
        d.set_item("resolution", config.inner.resolution)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(input_dim={}, num_classes={}, seed={})",
            self.input_dim(),
            self.num_classes(),
            self.inner.seed
        )
    }
}

/// Toy clusters and background points for a configuration.
#[pyfunction]
fn toy_data<'py>(py: Python<'py>, config: &PyRunConfig) -> PyResult<Bound<'py, PyDict>> {
    let toy = experiment::toy_data(&config.inner).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("train_x", rows_of(toy.train.features()))?;
    d.set_item("train_y", toy.train.labels())?;
    d.set_item("test_x", rows_of(toy.test.features()))?;
    d.set_item("test_y", toy.test.labels())?;
    d.set_item("ood_x", rows_of(&toy.ood))?;
    Ok(d)
}

/// Summary of one input's `T × K` logits.
#[pyfunction]
fn summarize<'py>(py: Python<'py>, logits: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
    let s = McSamples::from_logits(&matrix(logits)?).map_err(py_err)?;
    summary_dict(py, &mcdropout::summarize(&s))
}

#[pyfunction]
fn auroc(id: Vec<f64>, ood: Vec<f64>) -> PyResult<f64> {
    Ok(metrics::auroc(&populations(id, ood)?))
}

#[pyfunction]
#[pyo3(signature = (id, ood, positive = "id"))]
fn aupr(id: Vec<f64>, ood: Vec<f64>, positive: &str) -> PyResult<f64> {
    Ok(metrics::aupr(
        &populations(id, ood)?,
        self::positive(positive)?,
    ))
}

#[pyfunction]
#[pyo3(signature = (id, ood, level = 0.95, positive = "id"))]
fn fpr_at_tpr(id: Vec<f64>, ood: Vec<f64>, level: f64, positive: &str) -> PyResult<f64> {
    metrics::fpr_at_tpr(&populations(id, ood)?, self::positive(positive)?, level).map_err(py_err)
}

/// Detection metrics of scored rows as returned by `Model.score`.
#[pyfunction]
#[pyo3(signature = (rows, score = "energy"))]
fn evaluate<'py>(
    py: Python<'py>,
    rows: Vec<Bound<'py, PyDict>>,
    score: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let kind: ScoreKind = score.parse().map_err(PyValueError::new_err)?;
    let rows = rows
        .iter()
        .map(row_from_dict)
        .collect::<PyResult<Vec<_>>>()?;
    let e = experiment::evaluate_rows("python", &rows, kind, 20, 15).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("id_accuracy", e.metrics.id_accuracy)?;
    d.set_item("fpr95_id", e.metrics.fpr95_id)?;
    d.set_item("fpr95_ood", e.metrics.fpr95_ood)?;
    d.set_item("auroc", e.metrics.auroc)?;
    d.set_item("aupr_id", e.metrics.aupr_id)?;
    d.set_item("aupr_ood", e.metrics.aupr_ood)?;
    d.set_item("ece", e.metrics.ece)?;
    d.set_item("mi_false_over_true", e.mi_ratios.map(|r| r.false_over_true))?;
    d.set_item("mi_ood_over_id", e.mi_ratios.map(|r| r.ood_over_id))?;
    Ok(d)
}

fn row_from_dict(d: &Bound<'_, PyDict>) -> PyResult<ScoredRow> {
    fn get<'py, T: for<'a> FromPyObject<'a, 'py, Error = PyErr>>(
        d: &Bound<'py, PyDict>,
        key: &str,
    ) -> PyResult<T> {
        match d.get_item(key)? {
            Some(v) => v.extract(),
            None => Err(PyValueError::new_err(format!("scored row lacks {key:?}"))),
        }
    }
    let domain: String = get(d, "domain")?;
    Ok(ScoredRow {
        sample_id: get(d, "sample_id")?,
        label: get(d, "label")?,
        pred: get(d, "pred")?,
        domain: domain.parse::<Domain>().map_err(PyValueError::new_err)?,
        mi: get(d, "mi")?,
        ekl: get(d, "ekl")?,
        var: get(d, "var")?,
        entropy: get(d, "entropy")?,
        energy_mean: get(d, "energy_mean")?,
        energy_var: get(d, "energy_var")?,
        combined: get(d, "combined")?,
        confidence: get(d, "confidence")?,
    })
}

#[pymodule]
fn mcvos_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(toy_data, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(aupr, m)?)?;
    m.add_function(wrap_pyfunction!(fpr_at_tpr, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
