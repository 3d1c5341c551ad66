//! Python bindings: corpus generation, training, path location, unlearning,
//! evaluation and the staged pipeline.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use neupath_core::attribution::{self, AttributionConfig};
use neupath_core::baselines::{self, BaselineConfig, Method, UnlearnContext};
use neupath_core::datagen::{generate_corpus, split, CorpusConfig, Example, Split, SplitSpec};
use neupath_core::editor::UnlearnConfig;
use neupath_core::evalkit::{self, EvalReport};
use neupath_core::model::{self, Branch, ModelConfig, ModelParams, NeuronRef, TrainConfig};
use neupath_core::pathfinder::{self, ExamplePaths};
use neupath_core::pipeline::{self, RunConfig};
use neupath_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::MissingArtifact(_) => PyFileNotFoundError::new_err(e.to_string()),
        Error::Divergence { .. } | Error::Io(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_branch(name: &str) -> PyResult<Branch> {
    match name {
        "textual" => Ok(Branch::Textual),
        "visual" => Ok(Branch::Visual),
        _ => Err(PyValueError::new_err(format!("unknown branch `{name}`"))),
    }
}

/// Forget/retain partition of a generated corpus.
#[pyclass(name = "Split", module = "neupath")]
pub struct PySplit {
    inner: Split,
}

#[pymethods]
impl PySplit {
    #[staticmethod]
    #[pyo3(signature = (seed=7, num_entities=60, qa_per_entity=6, forget_ratio=0.05))]
    fn generate(seed: u64, num_entities: usize, qa_per_entity: usize, forget_ratio: f64) -> PyResult<Self> {
        let layout = ModelConfig {
            seed,
            ..ModelConfig::default()
        };
        let corpus = generate_corpus(
            &CorpusConfig {
                num_entities,
                qa_per_entity,
                seed,
            },
            &layout,
        )
        .map_err(to_py)?;
        let inner = split(&corpus, &SplitSpec { forget_ratio, seed }).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn forget_count(&self) -> usize {
        self.inner.forget.len()
    }

    #[getter]
    fn retain_count(&self) -> usize {
        self.inner.retain.len()
    }

    #[getter]
    fn forget_entities(&self) -> Vec<usize> {
        self.inner.forget_entities.clone()
    }

    /// `{"forget": [...], "retain": [...]}` with one object per example.
    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&serde_json::json!({
            "forget": self.inner.forget,
            "retain": self.inner.retain,
        }))
        .map_err(json_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Split(forget={}, retain={})",
            self.inner.forget.len(),
            self.inner.retain.len()
        )
    }
}

impl PySplit {
    fn side(&self, which: &str) -> PyResult<&[Example]> {
        match which {
            "forget" => Ok(&self.inner.forget),
            "retain" => Ok(&self.inner.retain),
            _ => Err(PyValueError::new_err(format!("unknown split `{which}`"))),
        }
    }

    fn all(&self) -> Vec<Example> {
        let mut all: Vec<Example> = self.inner.forget.iter().chain(&self.inner.retain).cloned().collect();
        all.sort_by_key(|e| e.id);
        all
    }
}

/// Dual-branch model parameters.
#[pyclass(name = "Model", module = "neupath")]
pub struct PyModel {
    inner: ModelParams,
}

#[pymethods]
impl PyModel {
    /// Fresh model; `config_json` overrides the reference layout.
    #[new]
    #[pyo3(signature = (seed=7, config_json=None))]
    fn new(seed: u64, config_json: Option<&str>) -> PyResult<Self> {
        let config = match config_json {
            Some(text) => serde_json::from_str(text).map_err(json_err)?,
            None => ModelConfig {
                seed,
                ..ModelConfig::default()
            },
        };
        Ok(Self {
            inner: ModelParams::init(&config).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ModelParams::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path, None).map_err(to_py)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.config).map_err(json_err)
    }

    /// Train on every example of `split`; returns per-epoch losses.
    #[pyo3(signature = (data, epochs=None, seed=None))]
    fn train(&mut self, py: Python<'_>, data: &PySplit, epochs: Option<usize>, seed: Option<u64>) -> PyResult<Vec<f64>> {
        let mut cfg = TrainConfig::default();
        if let Some(e) = epochs {
            cfg.epochs = e;
        }
        cfg.seed = seed.unwrap_or(self.inner.config.seed);
        let examples = data.all();
        let params = self.inner.clone();
        let out = py
            .detach(move || model::train(&params, &examples, &cfg))
            .map_err(to_py)?;
        self.inner = out.params;
        Ok(out.epoch_losses)
    }

    /// First-token accuracy on `which` ("forget" or "retain").
    #[pyo3(signature = (data, which="retain"))]
    fn accuracy(&self, data: &PySplit, which: &str) -> PyResult<f64> {
        Ok(evalkit::metrics(&self.inner, data.side(which)?).map_err(to_py)?.accuracy)
    }

    /// Greedy answers for every example of `which`.
    #[pyo3(signature = (data, which="forget"))]
    fn predict(&self, data: &PySplit, which: &str) -> PyResult<Vec<Vec<usize>>> {
        model::predict(&self.inner, data.side(which)?).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Model(parameters={})", self.inner.parameter_count())
    }
}

/// Influential paths located on a set of examples.
#[pyclass(name = "Paths", module = "neupath")]
pub struct PyPaths {
    inner: Vec<ExamplePaths>,
}

#[pymethods]
impl PyPaths {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Selected `(layer, index)` pairs per example for one branch.
    #[pyo3(signature = (branch="textual"))]
    fn selections(&self, branch: &str) -> PyResult<Vec<Vec<(usize, usize)>>> {
        let b = parse_branch(branch)?;
        Ok(self
            .inner
            .iter()
            .filter_map(|p| match b {
                Branch::Textual => Some(&p.textual),
                Branch::Visual => p.visual.as_ref(),
            })
            .map(|path| path.selections.iter().map(|n| (n.layer, n.index)).collect())
            .collect())
    }

    /// Aggregated per-layer indices as JSON (`{"textual": [[...], ...], ...}`).
    fn prune_set_json(&self, top_k: usize) -> PyResult<String> {
        let ps = pathfinder::aggregate(&self.inner, top_k).map_err(to_py)?;
        serde_json::to_string(&ps.entries).map_err(json_err)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(json_err)
    }
}

#[pyfunction]
#[pyo3(signature = (model, data, steps=64))]
fn locate(py: Python<'_>, model: &PyModel, data: &PySplit, steps: usize) -> PyResult<PyPaths> {
    let cfg = AttributionConfig {
        steps,
        layer_horizon: None,
    };
    let params = model.inner.clone();
    let forget = data.inner.forget.clone();
    let inner = py
        .detach(move || pathfinder::locate_all(&params, &forget, &cfg))
        .map_err(to_py)?;
    Ok(PyPaths { inner })
}

/// Attribution score of a set of `(layer, index)` neurons on one forget
/// example: IGI for the textual branch, IFI for the visual one.
#[pyfunction]
#[pyo3(signature = (model, data, example, branch, neurons, steps=64))]
fn attribute(
    model: &PyModel,
    data: &PySplit,
    example: usize,
    branch: &str,
    neurons: Vec<(usize, usize)>,
    steps: usize,
) -> PyResult<f64> {
    let b = parse_branch(branch)?;
    let e = data
        .inner
        .forget
        .get(example)
        .ok_or_else(|| PyValueError::new_err(format!("no forget example {example}")))?;
    let refs: Vec<NeuronRef> = neurons
        .into_iter()
        .map(|(layer, index)| NeuronRef { branch: b, layer, index })
        .collect();
    let cfg = AttributionConfig {
        steps,
        layer_horizon: None,
    };
    let score = match b {
        Branch::Textual => attribution::igi(&model.inner, e, &refs, &cfg),
        Branch::Visual => attribution::ifi(&model.inner, e, &refs, &cfg),
    }
    .map_err(to_py)?;
    Ok(score.value)
}

/// Unlearn the forget split with `method`; path-based methods need `paths`.
#[pyfunction]
#[pyo3(signature = (model, data, method="mip_editor", paths=None, seed=7))]
fn unlearn(
    py: Python<'_>,
    model: &PyModel,
    data: &PySplit,
    method: &str,
    paths: Option<&PyPaths>,
    seed: u64,
) -> PyResult<PyModel> {
    let method: Method = method.parse().map_err(to_py)?;
    let frozen = model.inner.clone();
    let s = data.inner.clone();
    let paths = paths.map(|p| p.inner.clone()).unwrap_or_default();
    let out = py
        .detach(move || {
            let unlearn = UnlearnConfig {
                rng_seed: seed,
                ..UnlearnConfig::default()
            };
            let baseline = BaselineConfig {
                method,
                seed,
                ..BaselineConfig::default()
            };
            let train = TrainConfig {
                seed,
                ..TrainConfig::default()
            };
            let ctx = UnlearnContext {
                frozen: &frozen,
                forget: &s.forget,
                retain: &s.retain,
                paths: &paths,
                unlearn: &unlearn,
                baseline: &baseline,
                reference_train: &train,
            };
            baselines::run_method(method, &ctx)
        })
        .map_err(to_py)?;
    Ok(PyModel { inner: out.params })
}

/// Before/after report as JSON.
#[pyfunction]
fn evaluate(before: &PyModel, after: &PyModel, data: &PySplit) -> PyResult<String> {
    let b = evalkit::evaluate(&before.inner, &data.inner).map_err(to_py)?;
    let a = evalkit::evaluate(&after.inner, &data.inner).map_err(to_py)?;
    serde_json::to_string(&EvalReport::new("python", b, a, 0.0)).map_err(json_err)
}

#[pyfunction]
fn token_f1(pred: Vec<usize>, gold: Vec<usize>) -> f64 {
    evalkit::token_f1(&pred, &gold)
}

#[pyfunction]
fn kl_divergence(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    if p.len() != q.len() {
        return Err(PyValueError::new_err("distributions differ in length"));
    }
    Ok(baselines::kl_divergence(&p, &q))
}

#[pyfunction]
fn npo_term(ratio: f64, beta: f64) -> f64 {
    baselines::npo_term(ratio, beta)
}

#[pyfunction]
fn method_names() -> Vec<&'static str> {
    Method::ALL.iter().map(|m| m.name()).collect()
}

/// Reference run configuration as JSON, optionally reseeded.
#[pyfunction]
#[pyo3(signature = (seed=None, out_dir=None))]
fn default_config(seed: Option<u64>, out_dir: Option<PathBuf>) -> PyResult<String> {
    let mut cfg = RunConfig::default();
    if let Some(s) = seed {
        cfg.reseed(s);
    }
    if let Some(d) = out_dir {
        cfg.out_dir = d;
    }
    serde_json::to_string_pretty(&cfg).map_err(json_err)
}

#[pyfunction]
fn config_hash(config_json: &str) -> PyResult<String> {
    let cfg: RunConfig = serde_json::from_str(config_json).map_err(json_err)?;
    Ok(cfg.hash())
}

/// Run one pipeline stage (gen, train, locate, unlearn, baseline, eval,
/// sweep, report) against the artifacts in the config's output directory.
#[pyfunction]
#[pyo3(signature = (config_json, stage, method=None))]
fn run_stage(py: Python<'_>, config_json: &str, stage: &str, method: Option<&str>) -> PyResult<String> {
    let cfg: RunConfig = serde_json::from_str(config_json).map_err(json_err)?;
    let method = method.map(str::parse::<Method>).transpose().map_err(to_py)?;
    let stage = stage.to_string();
    py.detach(move || -> neupath_core::Result<String> {
        let out = cfg.out_dir.display().to_string();
        Ok(match stage.as_str() {
            "gen" => {
                pipeline::gen(&cfg)?;
                format!("{out}/{}", pipeline::CORPUS_FILE)
            }
            "train" => {
                pipeline::train_stage(&cfg)?;
                format!("{out}/{}", pipeline::MODEL_FILE)
            }
            "locate" => {
                pipeline::locate(&cfg)?;
                format!("{out}/{}", pipeline::PATHS_FILE)
            }
            "unlearn" => {
                pipeline::unlearn(&cfg, method.unwrap_or_else(|| cfg.default_method()))?;
                format!("{out}/{}", pipeline::UNLEARNED_FILE)
            }
            "baseline" => {
                let methods = method.map_or_else(|| Method::ALL.to_vec(), |m| vec![m]);
                pipeline::baseline(&cfg, &methods)?;
                format!("{out}/{}", pipeline::BASELINES_FILE)
            }
            "eval" => {
                pipeline::eval(&cfg)?;
                format!("{out}/{}", pipeline::REPORT_FILE)
            }
            "sweep" => {
                pipeline::sweep(&cfg)?;
                format!("{out}/{}", pipeline::SWEEP_FILE)
            }
            "report" => pipeline::report(&cfg)?,
            other => return Err(Error::InvalidConfig(format!("unknown stage `{other}`"))),
        })
    })
    .map_err(to_py)
}

#[pymodule]
fn neupath(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySplit>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyPaths>()?;
    m.add_function(wrap_pyfunction!(locate, m)?)?;
    m.add_function(wrap_pyfunction!(attribute, m)?)?;
    m.add_function(wrap_pyfunction!(unlearn, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(token_f1, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(npo_term, m)?)?;
    m.add_function(wrap_pyfunction!(method_names, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(run_stage, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
