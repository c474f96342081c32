//! Python bindings. Structured results cross the boundary as JSON and are
//! decoded with the standard `json` module, so Python sees plain dicts
//! and lists with the same keys as the CLI outputs. Exact probabilities
//! are returned as `fractions.Fraction`.

use divex_core::analysis::{compare, compute_bounds_all, synthetic_image, worst_case, Exact};
use divex_core::diversifier::{diversify, BuildOptions, NopScope, DEFAULT_SEED};
use divex_core::faults::{execute_campaign, run_trial, CampaignResult, CampaignSpec, Injection, Prepared, ProgramSource};
use divex_core::image::{ImageContainer, ReplicaImage};
use divex_core::isa::{epsilon_bound, IsaConstants};
use divex_core::monitor::{run_to_completion, MonitorConfig};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyString;
use serde::Serialize;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Accepts a JSON string or any object `json.dumps` can encode.
fn from_py<T: serde::de::DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = match obj.cast::<PyString>() {
        Ok(s) => s.to_str()?.to_owned(),
        Err(_) => obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?,
    };
    serde_json::from_str(&text).map_err(err)
}

fn fraction<'py>(py: Python<'py>, x: &Exact) -> PyResult<Bound<'py, PyAny>> {
    py.import("fractions")?.getattr("Fraction")?.call1((x.0.numer().clone(), x.0.denom().clone()))
}

fn program_source(program: &str) -> ProgramSource {
    match program.strip_prefix("corpus:") {
        Some(name) => ProgramSource::Corpus(name.to_string()),
        None => ProgramSource::Source(program.to_string()),
    }
}

fn bounds<'py>(py: Python<'py>, images: &[ReplicaImage], k_max: usize) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &compute_bounds_all(images, &IsaConstants::default(), k_max).map_err(err)?)
}

/// Replica images of one program plus their layout certificate.
#[pyclass(name = "Container", module = "divex")]
struct PyContainer {
    inner: ImageContainer,
}

#[pymethods]
impl PyContainer {
    /// Builds `replicas` layouts of `program`, which is assembly source or
    /// `corpus:NAME`. Raises `ValueError` when the certificate fails.
    #[staticmethod]
    #[pyo3(signature = (program, replicas = 2, stride = None, seed = DEFAULT_SEED, critical_size = None, nop_scope = "global"))]
    fn build(
        program: &str,
        replicas: usize,
        stride: Option<u32>,
        seed: u64,
        critical_size: Option<u32>,
        nop_scope: &str,
    ) -> PyResult<Self> {
        let logical = program_source(program).load().map_err(err)?;
        let defaults = BuildOptions::default();
        let opts = BuildOptions {
            replicas,
            stride,
            seed,
            critical_size: critical_size.unwrap_or(defaults.critical_size),
            nop_scope: match nop_scope {
                "global" => NopScope::Global,
                "none" => NopScope::None,
                list => NopScope::Functions(list.split(',').map(|s| s.trim().to_string()).collect()),
            },
            ..defaults
        };
        let cfg = opts.to_config().map_err(err)?;
        let built = diversify(&logical, &cfg).map_err(err)?;
        Ok(PyContainer { inner: ImageContainer::new(logical, cfg, built.images, built.certificate) })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyContainer { inner: ImageContainer::from_json(text).map_err(err)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn replicas(&self) -> usize {
        self.inner.images.len()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.config.seed
    }

    fn certificate<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.certificate)
    }

    /// Runs all replicas in lockstep. `inject` takes `SLICE:WHO:MUTATION`
    /// strings as for `divex run --inject`. Returns the outcome dict and
    /// the per-replica canonical traces.
    #[pyo3(signature = (inject = Vec::new(), max_slices = None))]
    fn run<'py>(&self, py: Python<'py>, inject: Vec<String>, max_slices: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
        let images = &self.inner.images;
        let monitor = MonitorConfig::for_images(images);
        let (schedule, budget) = if inject.is_empty() {
            (Vec::new(), max_slices.unwrap_or(10_000_000))
        } else {
            let prep = self.prepared()?;
            let inj = Injection::from_flags(&inject, images.len()).map_err(err)?;
            (prep.schedule(&inj).map_err(err)?, max_slices.unwrap_or_else(|| prep.budget()))
        };
        let report = py.detach(|| run_to_completion(images, &monitor, &schedule, budget, &mut ())).map_err(err)?;
        #[derive(Serialize)]
        struct Run<'a> {
            outcome: &'a divex_core::monitor::Outcome,
            exit_code: i32,
            slices: u64,
            traces: Vec<&'a [divex_core::canonical::CanonicalRecord]>,
        }
        to_py(
            py,
            &Run {
                outcome: &report.outcome,
                exit_code: report.outcome.exit_code(),
                slices: report.slices,
                traces: report.traces.iter().map(|t| t.records.as_slice()).collect(),
            },
        )
    }

    /// One classified trial against the fault-free reference.
    fn inject<'py>(&self, py: Python<'py>, flags: Vec<String>) -> PyResult<Bound<'py, PyAny>> {
        let prep = self.prepared()?;
        let inj = Injection::from_flags(&flags, prep.images.len()).map_err(err)?;
        let trial = py.detach(|| run_trial(&prep, 0, &inj));
        to_py(py, &trial)
    }

    /// Per-replica undetected-execution bound reports.
    #[pyo3(signature = (k_max = 4))]
    fn bounds<'py>(&self, py: Python<'py>, k_max: usize) -> PyResult<Bound<'py, PyAny>> {
        bounds(py, &self.inner.images, k_max)
    }
}

impl PyContainer {
    fn prepared(&self) -> PyResult<Prepared> {
        let c = self.inner.clone();
        let monitor = MonitorConfig::for_images(&c.images);
        Prepared::from_images(c.program, c.config, c.images, monitor).map_err(err)
    }
}

/// Runs a campaign spec (dict or JSON string) and returns the result dict.
#[pyfunction]
#[pyo3(signature = (spec, workers = 0, analyze = false, k_max = 4))]
fn campaign<'py>(py: Python<'py>, spec: &Bound<'py, PyAny>, workers: usize, analyze: bool, k_max: usize) -> PyResult<Bound<'py, PyAny>> {
    let spec: CampaignSpec = from_py(spec)?;
    let result = py.detach(|| -> Result<CampaignResult, String> {
        let mut r = execute_campaign(&spec, workers).map_err(|e| e.to_string())?;
        if analyze {
            let program = spec.program.load().map_err(|e| e.to_string())?;
            let cfg = spec.build.to_config().map_err(|e| e.to_string())?;
            let images = diversify(&program, &cfg).map_err(|e| e.to_string())?.images;
            let b = compute_bounds_all(&images, &IsaConstants::default(), k_max).map_err(|e| e.to_string())?;
            r.comparison = worst_case(&b).map(|w| compare(&r, w));
        }
        Ok(r)
    });
    to_py(py, &result.map_err(err)?)
}

/// `[P(1), ..., P(k_max)]` for a synthetic image with `slots` entry points,
/// `equivalent` of which share one static projection.
#[pyfunction]
#[pyo3(signature = (slots, equivalent, k_max = 2))]
fn synthetic_bounds<'py>(py: Python<'py>, slots: u32, equivalent: u32, k_max: usize) -> PyResult<Vec<Bound<'py, PyAny>>> {
    if equivalent == 0 || equivalent > slots {
        return Err(err("need 1 <= equivalent <= slots"));
    }
    let img = synthetic_image(slots, equivalent);
    let b = compute_bounds_all(std::slice::from_ref(&img), &IsaConstants::default(), k_max).map_err(err)?;
    b[0].p_undetected.iter().map(|p| fraction(py, p)).collect()
}

/// Per-step value-coincidence bound `2^-(opcode + registers + value bits)`.
#[pyfunction]
#[pyo3(signature = (opcode_bits = 8, reg_bits = 12, value_bits = 32))]
fn epsilon<'py>(py: Python<'py>, opcode_bits: u32, reg_bits: u32, value_bits: u32) -> PyResult<Bound<'py, PyAny>> {
    let c = IsaConstants { opcode_bits, reg_field_bits: reg_bits, num_reg_fields: 1, value_bits, ..IsaConstants::default() };
    fraction(py, &Exact(epsilon_bound(&c).to_rational()))
}

#[pyfunction]
fn corpus_programs() -> Vec<&'static str> {
    divex_core::corpus::all().map(|c| c.name).collect()
}

#[pyfunction]
fn isa_reference() -> String {
    divex_core::isa::reference_markdown()
}

#[pymodule]
fn divex(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyContainer>()?;
    m.add_function(wrap_pyfunction!(campaign, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(epsilon, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_programs, m)?)?;
    m.add_function(wrap_pyfunction!(isa_reference, m)?)?;
    m.add("DEFAULT_SEED", DEFAULT_SEED)?;
    Ok(())
}
