//! Python bindings: geometry helpers, stay detection, segregation metrics,
//! the scenario generator, the event-study estimator and the staged
//! pipeline.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;

use mobiscope::config::PipelineConfig;
use mobiscope::estimator::{fit_event_study, EventStudySpec, FitReport, SeMode, Solver};
use mobiscope::geo::{geodesic_distance, GeoPoint, GridSpec, HexId};
use mobiscope::ingest::Ping;
use mobiscope::panel::{Outcome, PanelCell};
use mobiscope::pipeline::{simulate_and_fit, Runner, Stage};
use mobiscope::stays::StayParams;
use mobiscope::synth::{perturb, Knob, ScenarioConfig, ScenarioPaths};
use mobiscope::time::Month;
use mobiscope::Error;
use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::MissingArtifact(m) => PyFileNotFoundError::new_err(m),
        Error::Singular(_) | Error::NonConvergence { .. } | Error::Estimation(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

fn point(lat: f64, lon: f64) -> PyResult<GeoPoint> {
    GeoPoint::new(lat, lon).map_err(py_err)
}

fn month(s: &str) -> PyResult<Month> {
    s.parse().map_err(py_err)
}

fn report_to_py<'py>(py: Python<'py>, value: &FitReport) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Great-circle distance in metres.
#[pyfunction]
fn distance_m(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> PyResult<f64> {
    Ok(geodesic_distance(point(lat1, lon1)?, point(lat2, lon2)?))
}

/// Axial `(q, r)` of the hexagon containing a point.
#[pyfunction]
#[pyo3(signature = (lat, lon, origin_lat, origin_lon, side_m = 100.0))]
fn hex_id(lat: f64, lon: f64, origin_lat: f64, origin_lon: f64, side_m: f64) -> PyResult<(i32, i32)> {
    let grid = GridSpec::new(point(origin_lat, origin_lon)?, side_m).map_err(py_err)?;
    let h = grid.hex_id(point(lat, lon)?).map_err(py_err)?;
    Ok((h.q, h.r))
}

/// Shannon entropy (nats) of visit counts.
#[pyfunction]
fn shannon_entropy(counts: Vec<u64>) -> f64 {
    mobiscope::segregation::shannon_entropy(&counts)
}

/// Stays of one time-ordered trace given as `(t, lat, lon)` tuples.
#[pyfunction]
#[pyo3(signature = (pings, radius_m = 100.0, min_duration_s = 300, max_duration_s = 86_400))]
fn detect_stays<'py>(
    py: Python<'py>,
    pings: Vec<(i64, f64, f64)>,
    radius_m: f64,
    min_duration_s: i64,
    max_duration_s: i64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let dev: Arc<str> = Arc::from("device");
    let pings: Vec<Ping> = pings
        .into_iter()
        .map(|(t, lat, lon)| {
            Ok(Ping {
                device_id: dev.clone(),
                t,
                loc: point(lat, lon)?,
                accuracy_m: None,
            })
        })
        .collect::<PyResult<_>>()?;
    let params = StayParams {
        radius_m,
        min_duration_s,
        max_duration_s,
    };
    let stays = py.detach(|| mobiscope::stays::detect_stays(&pings, &params)).map_err(py_err)?;
    stays
        .iter()
        .map(|s| {
            let d = PyDict::new(py);
            d.set_item("start", s.start)?;
            d.set_item("end", s.end)?;
            d.set_item("lat", s.centroid.lat())?;
            d.set_item("lon", s.centroid.lon())?;
            d.set_item("ping_count", s.ping_count)?;
            Ok(d)
        })
        .collect()
}

/// Synthetic city and device population.
#[pyclass(name = "Scenario")]
struct PyScenario {
    inner: mobiscope::synth::Scenario,
}

#[pymethods]
impl PyScenario {
    #[new]
    #[pyo3(signature = (seed = 1, n_devices_per_arm = 500, n_background_devices = 200, effect_trips = 6.5, knob = None))]
    fn new(
        seed: u64,
        n_devices_per_arm: usize,
        n_background_devices: usize,
        effect_trips: f64,
        knob: Option<&str>,
    ) -> PyResult<Self> {
        let mut config = ScenarioConfig {
            seed,
            n_devices_per_arm,
            n_background_devices,
            effect_trips,
            ..Default::default()
        };
        if let Some(k) = knob {
            config = perturb(&config, k.parse::<Knob>().map_err(py_err)?);
        }
        Ok(Self {
            inner: mobiscope::synth::Scenario::new(config).map_err(py_err)?,
        })
    }

    #[getter]
    fn n_devices(&self) -> usize {
        self.inner.config.n_devices()
    }

    fn device_id(&self, idx: usize) -> String {
        self.inner.device_id(idx)
    }

    /// Pings `(t, lat, lon)` and monthly true trip counts of one device.
    fn device(&self, py: Python<'_>, idx: usize) -> PyResult<(Vec<(i64, f64, f64)>, Vec<(String, u32)>)> {
        if idx >= self.inner.config.n_devices() {
            return Err(PyValueError::new_err(format!("device index {idx} out of range")));
        }
        let (pings, truth) = py.detach(|| self.inner.device(idx)).map_err(py_err)?;
        Ok((
            pings.iter().map(|p| (p.t, p.loc.lat(), p.loc.lon())).collect(),
            truth.months.iter().map(|m| (m.month.to_string(), m.trips)).collect(),
        ))
    }

    /// Writes the scenario files into `dir`; returns the total true trips.
    fn write(&self, py: Python<'_>, dir: PathBuf) -> PyResult<u64> {
        std::fs::create_dir_all(&dir)?;
        let truth = py.detach(|| self.inner.write(&ScenarioPaths::in_dir(&dir))).map_err(py_err)?;
        Ok(truth.total_trips())
    }

    /// Runs the in-memory pipeline and event study on one outcome.
    #[pyo3(signature = (outcome = "trips_total", base_period = "2018-11"))]
    fn fit<'py>(&self, py: Python<'py>, outcome: &str, base_period: &str) -> PyResult<Bound<'py, PyAny>> {
        let out: Outcome = outcome.parse().map_err(py_err)?;
        let spec = EventStudySpec::new(month(base_period)?);
        let (_, fit) = py.detach(|| simulate_and_fit(&self.inner, &out, &spec)).map_err(py_err)?;
        report_to_py(py, &FitReport::new(outcome, &fit))
    }
}

/// Event study on panel cells `(q, r, "YYYY-MM", y, n_devices, cable)`.
/// Returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (cells, base_period, treated = None, se_mode = "cluster_by_unit", weighted = false, solver = "demeaning"))]
fn fit_panel<'py>(
    py: Python<'py>,
    cells: Vec<(i32, i32, String, f64, u32, bool)>,
    base_period: &str,
    treated: Option<Vec<(i32, i32)>>,
    se_mode: &str,
    weighted: bool,
    solver: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let panel: Vec<PanelCell> = cells
        .into_iter()
        .map(|(q, r, m, y, n_devices, cable)| {
            Ok(PanelCell {
                hex_id: HexId { q, r },
                month: month(&m)?,
                y,
                n_devices,
                cable,
            })
        })
        .collect::<PyResult<_>>()?;
    let mut spec = EventStudySpec::new(month(base_period)?);
    spec.se_mode = se_mode.parse::<SeMode>().map_err(py_err)?;
    spec.weighted = weighted;
    spec.solver = match solver {
        "demeaning" => Solver::Demeaning,
        "dummy_ols" => Solver::DummyOls,
        other => return Err(PyValueError::new_err(format!("unknown solver {other:?}"))),
    };
    spec.treated_units = treated.map(|t| t.into_iter().map(|(q, r)| HexId { q, r }).collect::<BTreeSet<_>>());
    let fit = py.detach(|| fit_event_study(&panel, &spec)).map_err(py_err)?;
    report_to_py(py, &FitReport::new("y", &fit))
}

/// Runs pipeline stages from a config file; `stage` is a stage name or
/// `"all"`. Returns the names of stages that ran.
#[pyfunction]
#[pyo3(signature = (config, stage = "all", force = false))]
fn run_pipeline(py: Python<'_>, config: PathBuf, stage: &str, force: bool) -> PyResult<Vec<String>> {
    let cfg = PipelineConfig::from_file(&config).map_err(py_err)?;
    let stages: Vec<Stage> = if stage == "all" {
        Stage::ALL.to_vec()
    } else {
        vec![stage.parse().map_err(py_err)?]
    };
    py.detach(move || {
        let mut runner = Runner::new(cfg);
        runner.force = force;
        runner.log = Box::new(|_| {});
        let mut ran = Vec::new();
        for s in stages {
            if runner.run_stage(s)? == mobiscope::pipeline::StageStatus::Ran {
                ran.push(s.name().to_string());
            }
        }
        Ok(ran)
    })
    .map_err(py_err)
}

/// Report text for one outcome of a finished pipeline run.
#[pyfunction]
#[pyo3(signature = (config, outcome = None))]
fn report(config: PathBuf, outcome: Option<&str>) -> PyResult<String> {
    let cfg = PipelineConfig::from_file(&config).map_err(py_err)?;
    Runner::new(cfg).report(outcome).map_err(py_err)
}

/// Text of a default configuration file.
#[pyfunction]
fn default_config() -> String {
    PipelineConfig::default_text()
}

#[pymodule]
fn mobiscope_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(distance_m, m)?)?;
    m.add_function(wrap_pyfunction!(hex_id, m)?)?;
    m.add_function(wrap_pyfunction!(shannon_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(detect_stays, m)?)?;
    m.add_function(wrap_pyfunction!(fit_panel, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_class::<PyScenario>()?;
    Ok(())
}
