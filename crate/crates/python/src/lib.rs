//! Python bindings for the `advforge` core crate.
//!
//! Tensors cross the boundary as `(shape, flat list)` pairs; configs and
//! reports as JSON strings.

use advforge::analysis;
use advforge::attacks::{self, AdversarialSet, AttackConfig};
use advforge::cli::ModelConfig;
use advforge::data;
use advforge::models::{self, build_model};
use advforge::synth::{self, GlyphConfig};
use advforge::training::{self, TrainConfig};
use advforge::{Architecture, Error, LabeledDataset};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Config(_)
        | Error::Protocol(_)
        | Error::Shape(_)
        | Error::InvalidSpec(_)
        | Error::Json(_)
        | Error::Data(_)
        | Error::Checkpoint(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn arch(name: &str) -> PyResult<Architecture> {
    match name {
        "minivgg" => Ok(Architecture::Minivgg),
        "miniresnet" => Ok(Architecture::Miniresnet),
        "linear" => Ok(Architecture::Linear),
        other => Err(PyValueError::new_err(format!("unknown architecture {other:?}"))),
    }
}

#[pyclass(name = "Tensor", module = "advforge", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTensor(advforge::Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        advforge::Tensor::new(&shape, data).map(PyTensor).map_err(py_err)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f32> {
        self.0.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.0.shape().first().copied().unwrap_or(0)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

#[pyclass(name = "Dataset", module = "advforge", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyDataset(LabeledDataset);

#[pymethods]
impl PyDataset {
    #[new]
    fn new(images: &PyTensor, labels: Vec<usize>, num_classes: usize) -> PyResult<Self> {
        LabeledDataset::new(images.0.clone(), labels, num_classes)
            .map(PyDataset)
            .map_err(py_err)
    }

    /// Procedural 28x28 digit glyphs, `per_class` per class.
    #[staticmethod]
    #[pyo3(signature = (per_class = 200, seed = 0))]
    fn synthetic(per_class: usize, seed: u64) -> PyResult<Self> {
        let cfg = GlyphConfig {
            per_class,
            ..Default::default()
        };
        synth::glyphs(&cfg, seed).map(PyDataset).map_err(py_err)
    }

    #[staticmethod]
    fn load_idx(images: &str, labels: &str) -> PyResult<Self> {
        data::load_idx(images, labels).map(PyDataset).map_err(py_err)
    }

    #[staticmethod]
    fn load_cifar(paths: Vec<String>) -> PyResult<Self> {
        data::load_cifar_binary(&paths).map(PyDataset).map_err(py_err)
    }

    /// Stratified `(train, val)` split.
    fn split(&self, train_fraction: f64, seed: u64) -> PyResult<(PyDataset, PyDataset)> {
        let (a, b) = data::holdout_split(&self.0, train_fraction, seed).map_err(py_err)?;
        Ok((PyDataset(a), PyDataset(b)))
    }

    fn head(&self, n: usize) -> PyResult<Self> {
        let idx: Vec<usize> = (0..n.min(self.0.len())).collect();
        self.0.subset(&idx).map(PyDataset).map_err(py_err)
    }

    #[getter]
    fn images(&self) -> PyTensor {
        PyTensor(self.0.images().clone())
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.0.labels().to_vec()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }

    #[getter]
    fn image_shape(&self) -> [usize; 3] {
        self.0.image_shape()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(name = "Model", module = "advforge")]
struct PyModel(models::Model);

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (architecture, input_shape, num_classes, seed = 0, width = None, depth = None))]
    fn new(
        architecture: &str,
        input_shape: [usize; 3],
        num_classes: usize,
        seed: u64,
        width: Option<usize>,
        depth: Option<usize>,
    ) -> PyResult<Self> {
        let cfg = ModelConfig {
            architecture: arch(architecture)?,
            width,
            depth,
        };
        build_model(&cfg.spec(input_shape, num_classes), seed)
            .map(PyModel)
            .map_err(py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        models::Model::load(path).map(PyModel).map_err(py_err)
    }

    #[staticmethod]
    fn from_bytes(bytes: &[u8]) -> PyResult<Self> {
        models::Model::from_bytes(bytes).map(PyModel).map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).map_err(py_err)
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.0.to_bytes()
    }

    fn bit_eq(&self, other: &PyModel) -> bool {
        self.0.bit_eq(&other.0)
    }

    #[getter]
    fn architecture(&self) -> &'static str {
        match self.0.spec().architecture {
            Architecture::Minivgg => "minivgg",
            Architecture::Miniresnet => "miniresnet",
            Architecture::Linear => "linear",
        }
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.0.parameter_count()
    }

    fn logits(&self, x: &PyTensor) -> PyResult<PyTensor> {
        self.0.logits(&x.0).map(PyTensor).map_err(py_err)
    }

    fn classify(&self, x: &PyTensor) -> PyResult<Vec<usize>> {
        models::classify_all(&self.0, &x.0, 256).map_err(py_err)
    }

    fn accuracy(&self, ds: &PyDataset) -> PyResult<f64> {
        models::accuracy(&self.0, &ds.0).map_err(py_err)
    }

    /// Trains in place and returns the report as JSON. `config` is a
    /// training config as JSON; missing keys take their defaults.
    #[pyo3(signature = (train, val, config = None))]
    fn train(&mut self, py: Python<'_>, train: &PyDataset, val: &PyDataset, config: Option<&str>) -> PyResult<String> {
        let cfg: TrainConfig = match config {
            Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => TrainConfig::default(),
        };
        let model = &mut self.0;
        let report = py
            .detach(|| training::train(model, &train.0, &val.0, &cfg))
            .map_err(py_err)?;
        report.to_json().map_err(py_err)
    }
}

#[pyclass(name = "AdversarialSet", module = "advforge", frozen)]
struct PySet(AdversarialSet);

#[pymethods]
impl PySet {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        AdversarialSet::load(path).map(PySet).map_err(py_err)
    }

    /// Writes the manifest to `path` and returns the payload path.
    fn save(&self, path: &str) -> PyResult<String> {
        let p = self.0.save(path).map_err(py_err)?;
        Ok(p.display().to_string())
    }

    #[getter]
    fn ensemble_ids(&self) -> Vec<String> {
        self.0.ensemble_ids.clone()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.0.labels.clone()
    }

    #[getter]
    fn distances(&self) -> Vec<f32> {
        self.0.distances.clone()
    }

    #[getter]
    fn epsilon(&self) -> f32 {
        self.0.config.epsilon
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.0.config.iterations
    }

    fn adversarial(&self) -> Option<PyTensor> {
        self.0.adversarial().cloned().map(PyTensor)
    }

    fn originals(&self) -> Option<PyTensor> {
        self.0.originals().cloned().map(PyTensor)
    }

    fn bit_eq(&self, other: &PySet) -> bool {
        self.0.bit_eq(&other.0)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

fn attack_config(epsilon: f32, step_size: f32, iterations: Option<usize>) -> PyResult<AttackConfig> {
    AttackConfig::new(
        epsilon,
        step_size,
        iterations.unwrap_or_else(|| attacks::iteration_count(epsilon as f64)),
        (data::PIXEL_MIN, data::PIXEL_MAX),
    )
    .map_err(py_err)
}

#[pyfunction]
fn iteration_count(epsilon: f64) -> usize {
    attacks::iteration_count(epsilon)
}

#[pyfunction]
fn fgsm(model: &PyModel, x: &PyTensor, labels: Vec<usize>, epsilon: f32) -> PyResult<PyTensor> {
    attacks::fgsm(&model.0, &x.0, &labels, epsilon, (data::PIXEL_MIN, data::PIXEL_MAX))
        .map(PyTensor)
        .map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (models, x, labels, epsilon, step_size = 1.0, iterations = None))]
fn ensemble_attack(
    models: Vec<PyRef<'_, PyModel>>,
    x: &PyTensor,
    labels: Vec<usize>,
    epsilon: f32,
    step_size: f32,
    iterations: Option<usize>,
) -> PyResult<PyTensor> {
    let cfg = attack_config(epsilon, step_size, iterations)?;
    let refs: Vec<&models::Model> = models.iter().map(|m| &m.0).collect();
    attacks::ensemble_attack(&refs, &x.0, &labels, &cfg)
        .map(PyTensor)
        .map_err(py_err)
}

/// Crafts against `models` and keeps the adversaries every member misclassifies.
#[pyfunction]
#[pyo3(signature = (models, ids, images, epsilon, step_size = 1.0, iterations = None, workers = 1))]
fn craft_set(
    py: Python<'_>,
    models: Vec<PyRef<'_, PyModel>>,
    ids: Vec<String>,
    images: &PyDataset,
    epsilon: f32,
    step_size: f32,
    iterations: Option<usize>,
    workers: usize,
) -> PyResult<PySet> {
    let cfg = attack_config(epsilon, step_size, iterations)?;
    let refs: Vec<&models::Model> = models.iter().map(|m| &m.0).collect();
    let ds = &images.0;
    py.detach(|| {
        let cand = attacks::craft_adversaries(&refs, ds.images(), ds.labels(), &cfg, workers)?;
        attacks::extract_adversarial_set(&refs, &ids, ds.images(), &cand, ds.labels(), &cfg)
    })
    .map(PySet)
    .map_err(py_err)
}

/// Transfer accuracy of a held-out model on a set, as JSON.
#[pyfunction]
fn evaluate_transfer(model: &PyModel, model_id: &str, set: &PySet) -> PyResult<String> {
    let entry = analysis::evaluate_transfer(&model.0, model_id, &set.0).map_err(py_err)?;
    serde_json::to_string(&entry).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Loss landscape of one image as CSV text.
#[pyfunction]
#[pyo3(signature = (subject, surrogate, x, label, eps1 = analysis::DEFAULT_EPS1, eps2 = analysis::DEFAULT_EPS2, step = 1.0))]
fn landscape(
    subject: &PyModel,
    surrogate: &PyModel,
    x: &PyTensor,
    label: usize,
    eps1: (f64, f64),
    eps2: (f64, f64),
    step: f64,
) -> PyResult<String> {
    analysis::landscape_grid(&subject.0, "subject", &surrogate.0, "surrogate", &x.0, label, eps1, eps2, step)
        .map(|g| g.to_csv())
        .map_err(py_err)
}

/// FGSM loss and fool-rate curve over `0..=max_eps` as CSV text.
#[pyfunction]
#[pyo3(signature = (model, images, max_eps = 128.0, step = 1.0))]
fn loss_curve(model: &PyModel, images: &PyDataset, max_eps: f64, step: f64) -> PyResult<String> {
    let eps = analysis::eps_range(max_eps, step).map_err(py_err)?;
    analysis::loss_curve(&model.0, images.0.images(), images.0.labels(), &eps)
        .map(|c| c.to_csv())
        .map_err(py_err)
}

#[pymodule(name = "advforge")]
fn advforge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PySet>()?;
    m.add_function(wrap_pyfunction!(iteration_count, m)?)?;
    m.add_function(wrap_pyfunction!(fgsm, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble_attack, m)?)?;
    m.add_function(wrap_pyfunction!(craft_set, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_transfer, m)?)?;
    m.add_function(wrap_pyfunction!(landscape, m)?)?;
    m.add_function(wrap_pyfunction!(loss_curve, m)?)?;
    Ok(())
}
