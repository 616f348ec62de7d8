//! Python bindings for the pcnet toolkit: trace I/O, the synthetic
//! scenario generator, pseudorange solvers, the correction network, and the
//! evaluation metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use pcnet::eval::{self, Method};
use pcnet::features::{apply_correction, extract_features, make_label};
use pcnet::geodesy::{self, GeodeticPosition};
use pcnet::model::{load_trace as load_trace_rs, LoadOptions, TraceFormat};
use pcnet::pinet::{self, LabeledSet, PiDnnModel, TrainConfig};
use pcnet::simulate::{self, SimConfig};
use pcnet::solver::{kf_track, rwls_solve, wls_solve, KfConfig, SolverConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

/// One receiver trace: epochs of satellite measurements plus optional
/// ground truth.
#[pyclass(name = "Trace")]
#[derive(Clone)]
struct PyTrace {
    inner: pcnet::model::Trace,
}

#[pymethods]
impl PyTrace {
    #[getter]
    fn trace_id(&self) -> String {
        self.inner.trace_id.clone()
    }

    #[getter]
    fn num_epochs(&self) -> usize {
        self.inner.epochs.len()
    }

    /// Epoch timestamps, GPS milliseconds.
    fn times_ms(&self) -> Vec<i64> {
        self.inner.epochs.iter().map(|e| e.time_ms).collect()
    }

    /// Ground truth as (time_ms, lat_deg, lng_deg, height_m) tuples.
    fn ground_truth(&self) -> Vec<(i64, f64, f64, f64)> {
        self.inner
            .ground_truth
            .iter()
            .map(|(t, g)| (*t, g.latitude, g.longitude, g.height))
            .collect()
    }

    /// Satellite count per epoch.
    fn sats_per_epoch(&self) -> Vec<usize> {
        self.inner.epochs.iter().map(|e| e.measurements.len()).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Trace(id={:?}, epochs={}, truth={})",
            self.inner.trace_id,
            self.inner.epochs.len(),
            self.inner.ground_truth.len()
        )
    }
}

/// A single-epoch position fix.
#[pyclass(name = "Fix")]
#[derive(Clone)]
struct PyFix {
    #[pyo3(get)]
    time_ms: i64,
    /// ECEF position, meters.
    #[pyo3(get)]
    x: f64,
    #[pyo3(get)]
    y: f64,
    #[pyo3(get)]
    z: f64,
    /// Receiver clock bias, meters.
    #[pyo3(get)]
    clock_m: f64,
    #[pyo3(get)]
    gdop: f64,
    #[pyo3(get)]
    converged: bool,
    #[pyo3(get)]
    n_sats: usize,
}

impl PyFix {
    fn from_fix(time_ms: i64, fix: &pcnet::solver::PositionFix) -> Self {
        Self {
            time_ms,
            x: fix.position.x,
            y: fix.position.y,
            z: fix.position.z,
            clock_m: fix.clock_bias,
            gdop: fix.gdop,
            converged: fix.converged,
            n_sats: fix.residuals.len(),
        }
    }
}

#[pymethods]
impl PyFix {
    /// Geodetic (lat_deg, lng_deg, height_m) of the fix.
    fn geodetic(&self) -> PyResult<(f64, f64, f64)> {
        let g = geodesy::ecef_to_geodetic(&geodesy::EcefPosition::new(self.x, self.y, self.z))
            .map_err(value_err)?;
        Ok((g.latitude, g.longitude, g.height))
    }

    fn __repr__(&self) -> String {
        format!(
            "Fix(t={} ms, ecef=({:.1}, {:.1}, {:.1}), clock={:.1} m, gdop={:.2})",
            self.time_ms, self.x, self.y, self.z, self.clock_m, self.gdop
        )
    }
}

/// Trained permutation-invariant correction network.
#[pyclass(name = "Model")]
struct PyModel {
    inner: PiDnnModel,
}

#[pymethods]
impl PyModel {
    #[getter]
    fn param_count(&self) -> usize {
        pinet::param_count(&self.inner)
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        pinet::save_model(&self.inner, &path).map_err(io_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: pinet::load_model(&path).map_err(io_err)? })
    }

    fn __repr__(&self) -> String {
        format!("Model(params={}, output_dim={})", self.param_count(), self.output_dim())
    }
}

fn parse_trace_format(format: &str) -> PyResult<TraceFormat> {
    format.parse().map_err(value_err)
}

/// Load a trace from CSV files.
#[pyfunction]
#[pyo3(signature = (epochs_path, truth_path=None, format="canonical_csv"))]
fn load_trace(
    epochs_path: PathBuf,
    truth_path: Option<PathBuf>,
    format: &str,
) -> PyResult<PyTrace> {
    let format = parse_trace_format(format)?;
    let (trace, _) = load_trace_rs(
        &epochs_path,
        truth_path.as_deref(),
        format,
        &LoadOptions::default(),
    )
    .map_err(io_err)?;
    Ok(PyTrace { inner: trace })
}

/// Generate one synthetic trace. Unspecified knobs use the library
/// defaults (10 satellites, 0.5 m noise, 20% NLOS with 15 m mean bias).
#[pyfunction]
#[pyo3(signature = (seed=0, num_epochs=60, trace_id="sim", num_satellites=10,
                    noise_sigma_m=0.5, nlos_probability=0.2, lat_deg=37.4,
                    lng_deg=-122.1, height_m=30.0))]
#[allow(clippy::too_many_arguments)]
fn simulate_trace(
    seed: u64,
    num_epochs: usize,
    trace_id: &str,
    num_satellites: usize,
    noise_sigma_m: f64,
    nlos_probability: f64,
    lat_deg: f64,
    lng_deg: f64,
    height_m: f64,
) -> PyResult<PyTrace> {
    let config = SimConfig {
        seed,
        num_epochs,
        trace_id: trace_id.to_string(),
        num_satellites,
        noise_sigma_m,
        nlos_probability,
        path: simulate::PathSpec::Static(GeodeticPosition::new(lat_deg, lng_deg, height_m)),
        ..Default::default()
    };
    let (trace, _) = simulate::gen_trace(&config).map_err(value_err)?;
    Ok(PyTrace { inner: trace })
}

/// Solve every epoch of a trace; method is "wls", "rwls", or "kf".
#[pyfunction]
#[pyo3(signature = (trace, method="rwls"))]
fn solve(trace: &PyTrace, method: &str) -> PyResult<Vec<PyFix>> {
    let solver = SolverConfig::default();
    let mut out = Vec::new();
    match method {
        "wls" | "rwls" => {
            for epoch in &trace.inner.epochs {
                let fix = if method == "wls" {
                    wls_solve(epoch, &solver, None)
                } else {
                    rwls_solve(epoch, &solver)
                }
                .map_err(value_err)?;
                out.push(PyFix::from_fix(epoch.time_ms, &fix));
            }
        }
        "kf" => {
            let track =
                kf_track(&trace.inner, &solver, &KfConfig::default()).map_err(value_err)?;
            for (epoch, fix) in trace.inner.epochs.iter().zip(&track) {
                out.push(PyFix::from_fix(epoch.time_ms, fix));
            }
        }
        other => return Err(value_err(format!("unknown method: {other}"))),
    }
    Ok(out)
}

/// Train the correction network on traces that carry ground truth.
#[pyfunction]
#[pyo3(signature = (traces, max_epochs=30, seed=0))]
fn train(traces: Vec<PyTrace>, max_epochs: usize, seed: u64) -> PyResult<PyModel> {
    let solver = SolverConfig::default();
    let mut dataset = Vec::new();
    for trace in &traces {
        for epoch in &trace.inner.epochs {
            let Ok(fix) = rwls_solve(epoch, &solver) else { continue };
            let Ok(mut set) = extract_features(epoch, &fix) else { continue };
            let Some(gt) = trace.inner.ground_truth_at(epoch.time_ms) else { continue };
            let Ok(label) = make_label(&fix, gt) else { continue };
            set.label = Some(label);
            dataset.push(LabeledSet { trace_id: trace.inner.trace_id.clone(), set });
        }
    }
    let config = TrainConfig { max_epochs, seed, ..Default::default() };
    let (model, _) = pinet::train(&dataset, &config).map_err(value_err)?;
    Ok(PyModel { inner: model })
}

/// Solve a trace with r-WLS and apply the network correction per epoch.
#[pyfunction]
fn predict(model: &PyModel, trace: &PyTrace) -> PyResult<Vec<PyFix>> {
    let solver = SolverConfig::default();
    let mut out = Vec::new();
    for epoch in &trace.inner.epochs {
        let Ok(fix) = rwls_solve(epoch, &solver) else { continue };
        let correction = pinet::predict_correction(&model.inner, epoch, &fix).map_err(value_err)?;
        let mut corrected = fix.clone();
        corrected.position = apply_correction(&fix.position, &correction);
        out.push(PyFix::from_fix(epoch.time_ms, &corrected));
    }
    Ok(out)
}

/// Compare methods over traces with ground truth. Returns one dict per
/// (method, trace) with p50/p95/score and per-axis MAE.
#[pyfunction]
#[pyo3(signature = (traces, methods=vec!["wls".into(), "rwls".into()], model=None))]
fn evaluate(
    py: Python<'_>,
    traces: Vec<PyTrace>,
    methods: Vec<String>,
    model: Option<&PyModel>,
) -> PyResult<Vec<Py<PyDict>>> {
    let methods: Vec<Method> = methods
        .iter()
        .map(|m| m.parse().map_err(value_err))
        .collect::<PyResult<_>>()?;
    let traces: Vec<pcnet::model::Trace> = traces.into_iter().map(|t| t.inner).collect();
    let (reports, _) = eval::compare_methods(
        &traces,
        &methods,
        &SolverConfig::default(),
        &KfConfig::default(),
        model.map(|m| &m.inner),
    )
    .map_err(value_err)?;
    let mut rows = Vec::new();
    for report in &reports {
        for t in &report.traces {
            let d = PyDict::new_bound(py);
            d.set_item("method", report.method.as_str())?;
            d.set_item("trace_id", &t.trace_id)?;
            d.set_item("p50_m", t.p50_m)?;
            d.set_item("p95_m", t.p95_m)?;
            d.set_item("score_m", t.score_m)?;
            d.set_item("mae_n_m", t.north.mae)?;
            d.set_item("mae_e_m", t.east.mae)?;
            d.set_item("mae_d_m", t.down.mae)?;
            rows.push(d.unbind());
        }
    }
    Ok(rows)
}

/// Inverse geodesic distance between two (lat, lng) points, meters.
#[pyfunction]
fn vincenty(lat1: f64, lng1: f64, lat2: f64, lng2: f64) -> PyResult<f64> {
    geodesy::vincenty_distance(
        &GeodeticPosition::new(lat1, lng1, 0.0),
        &GeodeticPosition::new(lat2, lng2, 0.0),
    )
    .map_err(value_err)
}

/// Mean over traces of the per-trace (p50 + p95) / 2 horizontal error.
#[pyfunction]
fn score(per_trace_errors: Vec<Vec<f64>>) -> PyResult<f64> {
    let series: Vec<eval::ErrorSeries> = per_trace_errors
        .into_iter()
        .enumerate()
        .map(|(i, h)| eval::ErrorSeries {
            trace_id: i.to_string(),
            times_ms: (0..h.len() as i64).collect(),
            horizontal_m: h,
            ned: vec![],
        })
        .collect();
    eval::score(&series).map_err(value_err)
}

/// Write a trace corpus of canonical CSVs (returns the trace ids).
#[pyfunction]
#[pyo3(signature = (out_dir, num_traces=10, seed=0, num_epochs=30))]
fn simulate_corpus(
    out_dir: PathBuf,
    num_traces: usize,
    seed: u64,
    num_epochs: usize,
) -> PyResult<Vec<String>> {
    let base = SimConfig { seed, num_epochs, ..Default::default() };
    let manifest = simulate::gen_corpus(&base, num_traces, (0.75, 0.10, 0.15), &out_dir)
        .map_err(io_err)?;
    Ok(manifest.entries.into_iter().map(|e| e.trace_id).collect())
}

#[pymodule]
fn pcnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrace>()?;
    m.add_class::<PyFix>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(load_trace, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_trace, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(vincenty, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    Ok(())
}
