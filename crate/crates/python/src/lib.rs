//! Python bindings. Compound values cross the boundary as plain dicts and
//! lists; exact results come back as `fractions.Fraction`.

use std::path::PathBuf;

use num_bigint::BigInt;
use num_rational::BigRational;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;

use payslice::campaign;
use payslice::crypto::KeyRing;
use payslice::harness;
use payslice::insights;
use payslice::model::{CohortKey, CompensationData, MemberProfile, Timestamp};
use payslice::pipeline::{self as core_pipeline, PipelineConfig, PipelineError, PipelineKeys};
use payslice::prepare;
use payslice::timestamp;

create_exception!(payslice, ConfigError, PyException);
create_exception!(payslice, DataError, PyException);

fn pipeline_err(e: PipelineError) -> PyErr {
    match e.exit_code() {
        2 => ConfigError::new_err(e.to_string()),
        _ => DataError::new_err(e.to_string()),
    }
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

fn fraction(py: Python<'_>, r: &BigRational) -> PyResult<Py<PyAny>> {
    let cls = py.import("fractions")?.getattr("Fraction")?;
    Ok(cls.call1((r.numer().clone(), r.denom().clone()))?.unbind())
}

fn rational(obj: &Bound<'_, PyAny>) -> PyResult<BigRational> {
    if let Ok(i) = obj.extract::<BigInt>() {
        return Ok(BigRational::from_integer(i));
    }
    let f = obj.py().import("fractions")?.getattr("Fraction")?.call1((obj,))?;
    let n: BigInt = f.getattr("numerator")?.extract()?;
    let d: BigInt = f.getattr("denominator")?.extract()?;
    Ok(BigRational::new(n, d))
}

/// Linear-interpolation quantile at `h = (n-1)p`.
#[pyfunction]
fn quantile(values: Vec<i64>, p: f64) -> PyResult<f64> {
    insights::quantile(&values, p).map_err(value_err)
}

/// Exact quantile as a `Fraction`.
#[pyfunction]
fn quantile_exact(py: Python<'_>, values: Vec<i64>, p: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
    let q = insights::quantile_exact(&values, &rational(p)?).map_err(value_err)?;
    fraction(py, &q)
}

#[pyfunction]
#[pyo3(signature = (values, target_buckets = insights::DEFAULT_TARGET_BUCKETS))]
fn histogram(py: Python<'_>, values: Vec<i64>, target_buckets: usize) -> PyResult<Py<PyAny>> {
    to_py(py, &insights::histogram(&values, target_buckets).map_err(value_err)?)
}

/// Box-plot statistics; accepts ints, floats or Fractions.
#[pyfunction]
fn box_stats<'py>(py: Python<'py>, values: Vec<Bound<'py, PyAny>>) -> PyResult<Bound<'py, PyDict>> {
    let v = values.iter().map(rational).collect::<PyResult<Vec<_>>>()?;
    let b = harness::box_stats(&v).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("q1", fraction(py, &b.q1)?)?;
    d.set_item("median", fraction(py, &b.median)?)?;
    d.set_item("q3", fraction(py, &b.q3)?)?;
    d.set_item("lo", fraction(py, &b.lo)?)?;
    d.set_item("hi", fraction(py, &b.hi)?)?;
    let outliers = b.outliers.iter().map(|o| fraction(py, o)).collect::<PyResult<Vec<_>>>()?;
    d.set_item("outliers", outliers)?;
    Ok(d)
}

#[pyfunction]
fn plan_second_wave(alpha: u64, r1: u64, s1: u64) -> PyResult<u64> {
    campaign::plan_second_wave(alpha, r1, s1).map_err(value_err)
}

/// Response rate pooled from `(rate, responses)` pairs of similar cohorts.
#[pyfunction]
fn estimate_response_rate(similar: Vec<(f64, u64)>) -> PyResult<f64> {
    campaign::estimate_response_rate(&similar).map_err(value_err)
}

/// `(released, total)` entries at threshold `k`.
#[pyfunction]
fn data_availability(sizes: Vec<u64>, k: u32) -> PyResult<(u64, u64)> {
    let d = harness::data_availability(&sizes, k).map_err(value_err)?;
    Ok((d.released, d.total))
}

#[pyfunction]
#[pyo3(signature = (sizes, thresholds, k0 = harness::BASELINE_THRESHOLD))]
fn cohort_availability(py: Python<'_>, sizes: Vec<u64>, thresholds: Vec<u32>, k0: u32) -> PyResult<Py<PyAny>> {
    to_py(py, &harness::cohort_availability(&sizes, &thresholds, k0).map_err(value_err)?)
}

/// p-th percentile batching delay in seconds, as a `Fraction`.
#[pyfunction]
fn batching_delays(py: Python<'_>, instants: Vec<i64>, k: u32, p: u32) -> PyResult<Py<PyAny>> {
    let ts: Vec<Timestamp> = instants.into_iter().map(Timestamp).collect();
    fraction(py, &harness::batching_delays(&ts, k, p).map_err(value_err)?)
}

#[pyfunction]
fn round_value(amount: i64, granularity: i64) -> i64 {
    prepare::round_value(amount, granularity)
}

/// Coarsest-necessary shared timestamp as `(level, unix_seconds)`.
#[pyfunction]
fn generalize_batch(timestamps: Vec<i64>) -> PyResult<(String, i64)> {
    let ts: Vec<Timestamp> = timestamps.into_iter().map(Timestamp).collect();
    let g = timestamp::generalize_batch(&ts).ok_or_else(|| PyValueError::new_err("empty batch"))?;
    let level = serde_json::to_value(g.level).map_err(value_err)?;
    Ok((level.as_str().unwrap_or_default().to_string(), g.value.0))
}

#[pyfunction]
#[pyo3(signature = (values, ancestors = Vec::new(), tau = insights::DEFAULT_TAU))]
fn smooth(py: Python<'_>, values: Vec<i64>, ancestors: Vec<Vec<i64>>, tau: u32) -> PyResult<Py<PyAny>> {
    let (summary, provenance) = insights::smooth(&values, &ancestors, tau).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("summary", to_py(py, &summary)?)?;
    d.set_item("provenance", to_py(py, &provenance)?)?;
    Ok(d.into_any().unbind())
}

/// Creates missing keystores for a config file; returns `{purpose: version}`.
#[pyfunction]
fn keygen(config: PathBuf, passphrase: &str, at: i64) -> PyResult<Vec<(String, u32)>> {
    let cfg = PipelineConfig::load(&config).map_err(pipeline_err)?;
    let versions = core_pipeline::keygen(&cfg, passphrase, Timestamp(at)).map_err(pipeline_err)?;
    Ok(versions.into_iter().map(|(p, v)| (p.as_str().to_string(), v)).collect())
}

/// A pipeline over one data directory.
#[pyclass(unsendable)]
struct Pipeline {
    inner: core_pipeline::Pipeline,
}

#[pymethods]
impl Pipeline {
    #[new]
    fn new(config: PathBuf, passphrase: &str) -> PyResult<Self> {
        let cfg = PipelineConfig::load(&config).map_err(pipeline_err)?;
        let keys = PipelineKeys::load(&cfg, passphrase).map_err(pipeline_err)?;
        Ok(Pipeline { inner: core_pipeline::Pipeline::open(cfg, keys).map_err(pipeline_err)? })
    }

    /// Default catalog under `root` with freshly generated in-memory keys.
    #[staticmethod]
    #[pyo3(signature = (root, seed = 0))]
    fn ephemeral(root: PathBuf, seed: u64) -> PyResult<Self> {
        let ring = KeyRing::generate().map_err(|e| ConfigError::new_err(e.to_string()))?;
        let cfg = PipelineConfig::in_dir(&root, seed);
        let inner = core_pipeline::Pipeline::open(cfg, PipelineKeys::from_ring(&ring)).map_err(pipeline_err)?;
        Ok(Pipeline { inner })
    }

    /// Returns the submission id.
    fn submit(&mut self, profile: &Bound<'_, PyAny>, compensation: &Bound<'_, PyAny>, at: i64) -> PyResult<String> {
        let profile: MemberProfile = from_py(profile)?;
        let comp: CompensationData = from_py(compensation)?;
        let receipt = self.inner.submit(&profile, &comp, Timestamp(at)).map_err(pipeline_err)?;
        Ok(receipt.submission_id)
    }

    /// Feeds a JSONL campaign history file through the pipeline.
    fn ingest_history(&mut self, path: PathBuf) -> PyResult<()> {
        let text = std::fs::read_to_string(&path).map_err(|e| DataError::new_err(e.to_string()))?;
        let records = campaign::read_history(&text).map_err(|e| DataError::new_err(e.to_string()))?;
        self.inner.ingest_history(&records).map_err(pipeline_err)
    }

    /// Drains queues, publishes insights and returns the run manifest.
    fn finish(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.finish().map_err(pipeline_err)?)
    }

    fn manifest(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.manifest().map_err(pipeline_err)?)
    }

    fn query(&self, py: Python<'_>, cohort: &str, member: &str, at: i64) -> PyResult<Py<PyAny>> {
        let key: CohortKey = cohort.parse().map_err(value_err)?;
        to_py(py, &self.inner.query(&key, member, Timestamp(at)).map_err(pipeline_err)?)
    }

    fn offline_records(&self) -> usize {
        self.inner.dataset().len()
    }
}

#[pymodule]
#[pyo3(name = "payslice")]
fn payslice_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ConfigError", m.py().get_type::<ConfigError>())?;
    m.add("DataError", m.py().get_type::<DataError>())?;
    m.add_function(wrap_pyfunction!(quantile, m)?)?;
    m.add_function(wrap_pyfunction!(quantile_exact, m)?)?;
    m.add_function(wrap_pyfunction!(histogram, m)?)?;
    m.add_function(wrap_pyfunction!(box_stats, m)?)?;
    m.add_function(wrap_pyfunction!(plan_second_wave, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_response_rate, m)?)?;
    m.add_function(wrap_pyfunction!(data_availability, m)?)?;
    m.add_function(wrap_pyfunction!(cohort_availability, m)?)?;
    m.add_function(wrap_pyfunction!(batching_delays, m)?)?;
    m.add_function(wrap_pyfunction!(round_value, m)?)?;
    m.add_function(wrap_pyfunction!(generalize_batch, m)?)?;
    m.add_function(wrap_pyfunction!(smooth, m)?)?;
    m.add_function(wrap_pyfunction!(keygen, m)?)?;
    m.add_class::<Pipeline>()?;
    Ok(())
}

/// Registers the module in `sys.modules` so embedded interpreters can
/// `import payslice`.
pub fn register(py: Python<'_>) -> PyResult<Bound<'_, PyModule>> {
    let m = PyModule::new(py, "payslice")?;
    payslice_py(&m)?;
    py.import("sys")?.getattr("modules")?.set_item("payslice", &m)?;
    Ok(m)
}
