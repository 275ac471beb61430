//! Python module `geoecon_py`. Structured results cross the boundary as
//! JSON and come back as plain dicts and lists.

use std::path::PathBuf;

use geoecon::align::PairOptions;
use geoecon::dataio::{decode_image, synth_corpus, CorpusLayout, SynthConfig};
use geoecon::dataset::{align_period, fit_policies, load_pair_images, load_period, to_samples};
use geoecon::geo::{self, BBox, GeoPoint, TileId};
use geoecon::model::{self as model, FusionModel, ModelConfig, TrainConfig, TrainedModel};
use geoecon::pipeline::{run_task, TaskEnv, TaskSpec};
use geoecon::store::{self, TaskStatus};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Serializes `v` and parses it with the `json` module.
fn to_py<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(runtime_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Accepts a dict or a JSON string.
fn from_py<T: serde::de::DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = match obj.extract::<String>() {
        Ok(s) => s,
        Err(_) => obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?,
    };
    serde_json::from_str(&text).map_err(value_err)
}

fn point(lat: f64, lon: f64) -> PyResult<GeoPoint> {
    GeoPoint::new(lat, lon).map_err(value_err)
}

/// `(zoom, x, y)` of the tile containing the point.
#[pyfunction]
#[pyo3(signature = (lat, lon, zoom = geo::SYSTEM_ZOOM))]
fn latlon_to_tile(lat: f64, lon: f64, zoom: u8) -> PyResult<(u8, u32, u32)> {
    let t = geo::latlon_to_tile(&point(lat, lon)?, zoom).map_err(value_err)?;
    Ok((t.zoom, t.x, t.y))
}

/// `(lat, lon)` of a tile centre.
#[pyfunction]
fn tile_center(zoom: u8, x: u32, y: u32) -> PyResult<(f64, f64)> {
    let c = TileId::new(zoom, x, y).map_err(value_err)?.center();
    Ok((c.lat, c.lon))
}

#[pyfunction]
fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> PyResult<f64> {
    Ok(geo::haversine_km(&point(lat1, lon1)?, &point(lat2, lon2)?))
}

#[pyfunction]
fn r_squared(yhat: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    model::r_squared(&yhat, &y).map_err(value_err)
}

/// Writes a synthetic corpus; `config` is a dict or JSON with the synth
/// fields. Returns the corpus summary.
#[pyfunction]
#[pyo3(signature = (out, config = None))]
fn synth<'py>(py: Python<'py>, out: PathBuf, config: Option<&Bound<'py, PyAny>>) -> PyResult<Bound<'py, PyAny>> {
    let cfg: SynthConfig = match config {
        Some(c) => from_py(c)?,
        None => SynthConfig::default(),
    };
    let summary = py.detach(|| synth_corpus(&cfg, &out)).map_err(runtime_err)?;
    to_py(py, &summary)
}

/// Aligned pairs of one corpus period.
#[pyfunction]
#[pyo3(signature = (corpus, period, options = None))]
fn align<'py>(py: Python<'py>, corpus: PathBuf, period: &str, options: Option<&Bound<'py, PyAny>>) -> PyResult<Bound<'py, PyAny>> {
    let opts: PairOptions = match options {
        Some(o) => from_py(o)?,
        None => PairOptions::default(),
    };
    let layout = CorpusLayout::new(&corpus);
    let outcome = py
        .detach(|| {
            let inputs = load_period(&layout, period).map_err(|e| e.to_string())?;
            align_period(&inputs, &opts).map_err(|e| e.to_string())
        })
        .map_err(runtime_err)?;
    to_py(py, &outcome)
}

/// Runs a scoring task into `store` and returns its report; a failed task
/// raises `RuntimeError` after its failure is recorded.
#[pyfunction]
fn run<'py>(py: Python<'py>, spec: &Bound<'py, PyAny>, corpus: PathBuf, checkpoint: PathBuf, store: &Store) -> PyResult<Bound<'py, PyAny>> {
    let spec: TaskSpec = from_py(spec)?;
    spec.validate().map_err(value_err)?;
    let env = TaskEnv::new(&corpus, Some(&checkpoint));
    env.check(&spec).map_err(value_err)?;
    let report = py.detach(|| run_task(&spec, &env, &store.inner)).map_err(runtime_err)?;
    if report.record.status == TaskStatus::Failed {
        let msg = report.record.message.as_deref().unwrap_or("unknown error");
        return Err(runtime_err(format!("task {} failed: {msg}", spec.task_id)));
    }
    to_py(py, &report)
}

/// A trained checkpoint.
#[pyclass(frozen)]
struct Model {
    inner: TrainedModel,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(py: Python<'_>, path: PathBuf) -> PyResult<Model> {
        let inner = py.detach(|| TrainedModel::load(&path)).map_err(runtime_err)?;
        Ok(Model { inner })
    }

    /// Trains on the aligned pairs of one corpus period. `model`, `train`
    /// and `pairs` are config dicts; missing ones take the defaults.
    /// Returns the model and the training report.
    #[staticmethod]
    #[pyo3(signature = (corpus, period, model = None, train = None, pairs = None))]
    fn train<'py>(
        py: Python<'py>,
        corpus: PathBuf,
        period: &str,
        model: Option<&Bound<'py, PyAny>>,
        train: Option<&Bound<'py, PyAny>>,
        pairs: Option<&Bound<'py, PyAny>>,
    ) -> PyResult<(Model, Bound<'py, PyAny>)> {
        let mc: ModelConfig = model.map(from_py).transpose()?.unwrap_or_default();
        let tc: TrainConfig = train.map(from_py).transpose()?.unwrap_or_default();
        let opts: PairOptions = pairs.map(from_py).transpose()?.unwrap_or_default();
        mc.validate().map_err(value_err)?;
        let layout = CorpusLayout::new(&corpus);
        let (inner, report) = py
            .detach(|| -> Result<_, String> {
                let inputs = load_period(&layout, period).map_err(|e| e.to_string())?;
                let aligned = align_period(&inputs, &opts).map_err(|e| e.to_string())?.pairs;
                let images = load_pair_images(&layout, &inputs, &aligned).map_err(|e| e.to_string())?;
                let policies = fit_policies(&images, mc.image_side).map_err(|e| e.to_string())?;
                let samples = to_samples(&images, &policies);
                let mut net = FusionModel::new(mc, tc.seed).map_err(|e| e.to_string())?;
                let report = model::train(&mut net, &samples, &tc, |_| {}).map_err(|e| e.to_string())?;
                let trained = TrainedModel::new(net, report.label_norm, policies.sat, policies.sv)
                    .map_err(|e| e.to_string())?;
                Ok((trained, report))
            })
            .map_err(runtime_err)?;
        Ok((Model { inner }, to_py(py, &report)?))
    }

    /// Writes a checkpoint directory that `load` and the CLI read.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(runtime_err)
    }

    /// Model configuration as a dict.
    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.model.config)
    }

    /// Score of one satellite/street-view PNG pair.
    fn score(&self, py: Python<'_>, satellite: PathBuf, streetview: PathBuf) -> PyResult<f64> {
        py.detach(|| {
            let sat = decode_image(&satellite).map_err(value_err)?;
            let sv = decode_image(&streetview).map_err(value_err)?;
            self.inner.score(&sat, &sv).map_err(runtime_err)
        })
    }
}

/// A score store directory.
#[pyclass(frozen)]
struct Store {
    inner: store::Store,
}

#[pymethods]
impl Store {
    #[new]
    fn open(path: PathBuf) -> PyResult<Store> {
        Ok(Store { inner: store::Store::open(&path).map_err(runtime_err)? })
    }

    fn tasks<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.tasks())
    }

    fn task<'py>(&self, py: Python<'py>, task_id: &str) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.task(task_id))
    }

    #[pyo3(signature = (task_id, after = 0))]
    fn events<'py>(&self, py: Python<'py>, task_id: &str, after: u64) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.events(task_id, after))
    }

    /// Fine-grained cells of `period` inside west, south, east, north.
    fn heatmap<'py>(&self, py: Python<'py>, period: &str, west: f64, south: f64, east: f64, north: f64) -> PyResult<Bound<'py, PyAny>> {
        let bbox = BBox::from_bounds(south, west, north, east).map_err(value_err)?;
        to_py(py, &self.inner.query_heatmap(&bbox, period))
    }

    fn county<'py>(&self, py: Python<'py>, county_id: &str, period: &str) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.county(county_id, period))
    }

    #[pyo3(signature = (county_id, start = "0000", end = "9999-12"))]
    fn trend<'py>(&self, py: Python<'py>, county_id: &str, start: &str, end: &str) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.query_trend(county_id, start, end))
    }
}

#[pymodule]
fn geoecon_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(latlon_to_tile, m)?)?;
    m.add_function(wrap_pyfunction!(tile_center, m)?)?;
    m.add_function(wrap_pyfunction!(haversine_km, m)?)?;
    m.add_function(wrap_pyfunction!(r_squared, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(align, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_class::<Model>()?;
    m.add_class::<Store>()?;
    m.add("SYSTEM_ZOOM", geo::SYSTEM_ZOOM)?;
    Ok(())
}
