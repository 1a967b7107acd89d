//! Python bindings: VideoMaps, synthetic tasks, the head model, training and
//! evaluation.

use pyo3::exceptions::{PyIOError, PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use tsm_core::data::{self, TaskKind, TaskSpec};
use tsm_core::eval;
use tsm_core::model::Checkpoint;
use tsm_core::train::{TrainConfig, Trainer};
use tsm_core::tsm::{build_videomap, resample_temporal};
use tsm_core::{AttentionLevels, FeatureSequence, ModelConfig, TsmError};

fn to_py(e: TsmError) -> PyErr {
    match e {
        TsmError::Index { .. } => PyIndexError::new_err(e.to_string()),
        TsmError::Io(_) => PyIOError::new_err(e.to_string()),
        TsmError::Numerical { .. } | TsmError::State(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

#[pyclass(name = "VideoMap", module = "tsm", from_py_object)]
#[derive(Clone)]
struct PyVideoMap {
    inner: tsm_core::VideoMap,
}

#[pymethods]
impl PyVideoMap {
    /// Stack per-frame feature vectors (one list per frame) into a map.
    #[new]
    #[pyo3(signature = (frames, label = 0, id = String::from("sequence")))]
    fn new(frames: Vec<Vec<f64>>, label: usize, id: String) -> PyResult<Self> {
        let dim = frames.first().map_or(0, Vec::len);
        let rows: Vec<f64> = frames.into_iter().flatten().collect();
        let seq = FeatureSequence::from_rows(id, label, dim, rows).map_err(to_py)?;
        Ok(Self {
            inner: build_videomap(&seq).map_err(to_py)?,
        })
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn label(&self) -> usize {
        self.inner.label
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.source_id.clone()
    }

    #[getter]
    fn relevance(&self) -> Option<Vec<bool>> {
        self.inner.relevance.clone()
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        self.inner.rows().map(<[f64]>::to_vec).collect()
    }

    /// Uniformly resample to `frames` rows.
    fn resample(&self, frames: usize) -> PyResult<Self> {
        Ok(Self {
            inner: resample_temporal(&self.inner, frames).map_err(to_py)?,
        })
    }

    fn reversed(&self) -> Self {
        Self {
            inner: self.inner.reversed(),
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "VideoMap(id={:?}, label={}, shape=({}, {}))",
            self.inner.source_id,
            self.inner.label,
            self.inner.height(),
            self.inner.width()
        )
    }
}

fn wrap_maps(seqs: &[FeatureSequence]) -> PyResult<Vec<PyVideoMap>> {
    seqs.iter()
        .map(|s| {
            Ok(PyVideoMap {
                inner: s.to_videomap().map_err(to_py)?,
            })
        })
        .collect()
}

fn unwrap_maps(maps: &[PyVideoMap]) -> Vec<tsm_core::VideoMap> {
    maps.iter().map(|m| m.inner.clone()).collect()
}

#[pyclass(name = "Dataset", module = "tsm")]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    #[getter]
    fn train(&self) -> PyResult<Vec<PyVideoMap>> {
        wrap_maps(&self.inner.train)
    }

    #[getter]
    fn test(&self) -> PyResult<Vec<PyVideoMap>> {
        wrap_maps(&self.inner.test)
    }

    #[pyo3(signature = (path, force = false))]
    fn save(&self, path: &str, force: bool) -> PyResult<()> {
        data::write_dataset(path, &self.inner, force).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: data::read_dataset(path).map_err(to_py)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[allow(clippy::too_many_arguments)]
fn task_spec(
    kind: &str,
    frames: usize,
    feature_dim: usize,
    classes: usize,
    n_train: usize,
    n_test: usize,
    noise_sigma: f64,
    seed: u64,
) -> PyResult<TaskSpec> {
    Ok(TaskSpec {
        kind: kind.parse::<TaskKind>().map_err(to_py)?,
        frames,
        feature_dim,
        classes,
        n_train,
        n_test,
        noise_sigma,
        seed,
    })
}

/// Generate a synthetic task: "order", "noise-frames" or "sparse-event".
#[pyfunction]
#[pyo3(signature = (kind, frames = 32, feature_dim = 16, classes = 2, n_train = 400, n_test = 200, noise_sigma = 0.1, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn generate_task(
    kind: &str,
    frames: usize,
    feature_dim: usize,
    classes: usize,
    n_train: usize,
    n_test: usize,
    noise_sigma: f64,
    seed: u64,
) -> PyResult<PyDataset> {
    let spec = task_spec(kind, frames, feature_dim, classes, n_train, n_test, noise_sigma, seed)?;
    Ok(PyDataset {
        inner: data::generate(&spec).map_err(to_py)?,
    })
}

/// Two aligned streams with complementary class information.
#[pyfunction]
#[pyo3(signature = (frames = 32, feature_dim = 16, classes = 4, n_train = 400, n_test = 200, noise_sigma = 0.1, seed = 0))]
fn generate_two_stream(
    frames: usize,
    feature_dim: usize,
    classes: usize,
    n_train: usize,
    n_test: usize,
    noise_sigma: f64,
    seed: u64,
) -> PyResult<(PyDataset, PyDataset)> {
    let spec = task_spec(
        "two-stream",
        frames,
        feature_dim,
        classes,
        n_train,
        n_test,
        noise_sigma,
        seed,
    )?;
    let (a, b) = data::gen_complementary_streams(&spec).map_err(to_py)?;
    Ok((PyDataset { inner: a }, PyDataset { inner: b }))
}

#[pyclass(name = "HeadModel", module = "tsm")]
struct PyHeadModel {
    inner: tsm_core::HeadModel,
}

#[pymethods]
impl PyHeadModel {
    #[new]
    #[pyo3(signature = (t_fixed, feature_dim, num_classes, widths = (16, 32, 32), attention_widths = (8, 16), attention = "a012", seed = 0))]
    fn new(
        t_fixed: usize,
        feature_dim: usize,
        num_classes: usize,
        widths: (usize, usize, usize),
        attention_widths: (usize, usize),
        attention: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let config = ModelConfig {
            t_fixed,
            feature_dim,
            num_classes,
            widths: [widths.0, widths.1, widths.2],
            attention_widths: [attention_widths.0, attention_widths.1],
            attention: attention.parse::<AttentionLevels>().map_err(to_py)?,
            seed,
        };
        Ok(Self {
            inner: tsm_core::HeadModel::init(config).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(path).map_err(to_py)?.model,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        Checkpoint {
            model: self.inner.clone(),
            state: None,
        }
        .save(path)
        .map_err(to_py)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    #[getter]
    fn t_fixed(&self) -> usize {
        self.inner.config().t_fixed
    }

    #[getter]
    fn attention_levels(&self) -> String {
        self.inner.config().attention.to_string()
    }

    /// Class logits; `map` is resampled to the model's height first.
    fn forward(&self, map: &PyVideoMap) -> PyResult<Vec<f64>> {
        let fixed = resample_temporal(&map.inner, self.inner.config().t_fixed).map_err(to_py)?;
        self.inner.head_forward(&fixed).map_err(to_py)
    }

    /// `(a0, a1, a2)` for a map of exactly `t_fixed` rows.
    fn attention(&self, map: &PyVideoMap) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let set = self.inner.attention_set(&map.inner).map_err(to_py)?;
        Ok((set.a0, set.a1, set.a2))
    }

    /// Gradient-weighted response over time for `class`, upsampled to `t_fixed`.
    fn response_map(&self, map: &PyVideoMap, class: usize) -> PyResult<Vec<f64>> {
        Ok(self
            .inner
            .temporal_response_map(&map.inner, class)
            .map_err(to_py)?
            .upsampled)
    }

    /// Train in place; returns `(epoch, loss, accuracy)` per epoch.
    #[pyo3(signature = (maps, epochs = 30, base_lr = 0.01, batch_size = 32, momentum = 0.9, decay_interval = 500, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        &mut self,
        maps: Vec<PyVideoMap>,
        epochs: u64,
        base_lr: f64,
        batch_size: usize,
        momentum: f64,
        decay_interval: u64,
        seed: u64,
    ) -> PyResult<Vec<(u64, f64, f64)>> {
        let cfg = TrainConfig {
            base_lr,
            batch_size,
            momentum,
            decay_interval,
            max_epochs: epochs,
            seed,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(self.inner.clone(), cfg).map_err(to_py)?;
        let log = trainer.fit(&unwrap_maps(&maps)).map_err(to_py)?;
        self.inner = trainer.into_model();
        Ok(log.epochs.iter().map(|r| (r.epoch, r.loss, r.accuracy)).collect())
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "HeadModel(t_fixed={}, feature_dim={}, num_classes={}, attention={})",
            c.t_fixed, c.feature_dim, c.num_classes, c.attention
        )
    }
}

#[pyclass(name = "EvalReport", module = "tsm", get_all)]
struct PyEvalReport {
    accuracy: f64,
    per_class_accuracy: Vec<f64>,
    confusion: Vec<Vec<usize>>,
    ids: Vec<String>,
    labels: Vec<usize>,
    predictions: Vec<usize>,
    scores: Vec<Vec<f64>>,
}

impl From<eval::EvalReport> for PyEvalReport {
    fn from(r: eval::EvalReport) -> Self {
        Self {
            accuracy: r.accuracy,
            per_class_accuracy: r.per_class_accuracy,
            confusion: r.confusion,
            ids: r.ids,
            labels: r.labels,
            predictions: r.predictions,
            scores: r.scores,
        }
    }
}

impl PyEvalReport {
    fn to_core(&self) -> PyResult<eval::EvalReport> {
        eval::EvalReport::from_scores(
            self.ids.clone(),
            self.labels.clone(),
            self.scores.clone(),
            self.confusion.len(),
            eval::ReportMeta::default(),
        )
        .map_err(to_py)
    }
}

#[pymethods]
impl PyEvalReport {
    fn __repr__(&self) -> String {
        format!("EvalReport(accuracy={:.4}, items={})", self.accuracy, self.ids.len())
    }
}

/// Accuracy after subsampling every map to `frames` rows (native height if omitted).
#[pyfunction]
#[pyo3(signature = (model, maps, frames = None))]
fn evaluate(model: &PyHeadModel, maps: Vec<PyVideoMap>, frames: Option<usize>) -> PyResult<PyEvalReport> {
    let maps = unwrap_maps(&maps);
    let t = frames.or_else(|| maps.first().map(|m| m.height())).unwrap_or(1);
    Ok(eval::evaluate(&model.inner, &maps, t).map_err(to_py)?.into())
}

/// Fit the order-invariant mean-pool baseline on `train`, report on `test`.
#[pyfunction]
fn mean_pool_baseline(train: Vec<PyVideoMap>, test: Vec<PyVideoMap>, num_classes: usize) -> PyResult<PyEvalReport> {
    Ok(
        eval::mean_pool_baseline(&unwrap_maps(&train), &unwrap_maps(&test), num_classes)
            .map_err(to_py)?
            .into(),
    )
}

/// Weighted late fusion of two reports over the same items.
#[pyfunction]
#[pyo3(signature = (a, b, weight_a = 0.5, weight_b = 0.5))]
fn fuse_streams(a: &PyEvalReport, b: &PyEvalReport, weight_a: f64, weight_b: f64) -> PyResult<PyEvalReport> {
    Ok(eval::fuse_streams(&a.to_core()?, &b.to_core()?, (weight_a, weight_b))
        .map_err(to_py)?
        .into())
}

#[pymodule]
#[pyo3(name = "tsm")]
fn tsm_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVideoMap>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyHeadModel>()?;
    m.add_class::<PyEvalReport>()?;
    m.add_function(wrap_pyfunction!(generate_task, m)?)?;
    m.add_function(wrap_pyfunction!(generate_two_stream, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(mean_pool_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_streams, m)?)?;
    Ok(())
}
