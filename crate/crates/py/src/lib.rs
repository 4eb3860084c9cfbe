//! Python bindings. Structured values cross the boundary as plain Python
//! dicts and lists (converted through JSON).

use std::collections::BTreeSet;
use std::sync::Arc;

use mecflow::clock::SimClock;
use mecflow::envelope::{self, BlacklistPolicy, LicenseTag};
use mecflow::lifecycle::{signing_key_from_seed, PipelineDescriptor, TrustStore};
use mecflow::mecnode::{Destination, MecConfig, MecNode};
use mecflow::policy::{self, ConsumerTerms, SamplerState, SamplingRate};
use mecflow::sim::{self, Provisioning, Scenario, SimError};
use mecflow::tilegrid::{self, BoundingBox, GeoPosition, QuadKey, Tile};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn sim_err(e: SimError) -> PyErr {
    match e {
        SimError::Invalid(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = match obj.extract::<String>() {
        Ok(s) => s,
        Err(_) => obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?,
    };
    serde_json::from_str(&text).map_err(value_err)
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn position(lat: f64, lon: f64) -> PyResult<GeoPosition> {
    GeoPosition::new(lat, lon).map_err(value_err)
}

#[pyfunction]
fn latlon_to_tile(lat: f64, lon: f64, level: u8) -> PyResult<(u32, u32, u8)> {
    let t = tilegrid::latlon_to_tile(position(lat, lon)?, level).map_err(value_err)?;
    Ok((t.x(), t.y(), t.level()))
}

#[pyfunction]
fn tile_to_quadkey(x: u32, y: u32, level: u8) -> PyResult<String> {
    let t = Tile::new(x, y, level).map_err(value_err)?;
    Ok(tilegrid::tile_to_quadkey(t).to_string())
}

#[pyfunction]
fn quadkey_to_tile(quadkey: &str) -> PyResult<(u32, u32, u8)> {
    let t = tilegrid::parse_quadkey_tile(quadkey).map_err(value_err)?;
    Ok((t.x(), t.y(), t.level()))
}

#[pyfunction]
fn locate(lat: f64, lon: f64, level: u8) -> PyResult<String> {
    Ok(tilegrid::locate(position(lat, lon)?, level).map_err(value_err)?.to_string())
}

#[pyfunction]
fn quadkey_contains(ancestor: &str, other: &str) -> PyResult<bool> {
    let a = QuadKey::parse(ancestor).map_err(value_err)?;
    let b = QuadKey::parse(other).map_err(value_err)?;
    Ok(tilegrid::quadkey_contains(&a, &b))
}

#[pyfunction]
fn cover_roi(south: f64, west: f64, north: f64, east: f64, level: u8) -> PyResult<Vec<String>> {
    let b = BoundingBox::new(south, west, north, east).map_err(value_err)?;
    Ok(tilegrid::cover_roi(&b, level).map_err(value_err)?.iter().map(|k| k.to_string()).collect())
}

/// Parses wire bytes and returns the envelope as a dict.
#[pyfunction]
fn parse_envelope<'py>(py: Python<'py>, data: &[u8]) -> PyResult<Bound<'py, PyAny>> {
    let e = envelope::parse_envelope(data).map_err(value_err)?;
    let v: serde_json::Value = serde_json::from_slice(&envelope::serialize_envelope(&e)).expect("serialized envelope is JSON");
    to_py(py, &v)
}

/// Removes blacklisted keys at any depth. `blacklist` defaults to vin, plate and driver_id.
#[pyfunction]
#[pyo3(signature = (envelope, blacklist=None))]
fn scrub<'py>(envelope: &Bound<'py, PyAny>, blacklist: Option<Vec<String>>) -> PyResult<Bound<'py, PyAny>> {
    let raw: serde_json::Value = from_py(envelope)?;
    let e = envelope::parse_envelope(raw.to_string().as_bytes()).map_err(value_err)?;
    let policy = match blacklist {
        Some(keys) => BlacklistPolicy::new(keys).map_err(value_err)?,
        None => envelope::default_blacklist(),
    };
    let clean = envelope::scrub(&e, &policy);
    let v: serde_json::Value = serde_json::from_slice(&envelope::serialize_envelope(&clean)).expect("serialized envelope is JSON");
    to_py(envelope.py(), &v)
}

#[pyfunction]
#[pyo3(signature = (license, delivery_tile, now_ms, commercial_use=false, redistribution=false))]
fn license_permits(license: &Bound<'_, PyAny>, delivery_tile: &str, now_ms: u64, commercial_use: bool, redistribution: bool) -> PyResult<bool> {
    let lic: LicenseTag = from_py(license)?;
    let tile = QuadKey::parse(delivery_tile).map_err(value_err)?;
    let terms = ConsumerTerms {
        commercial_use,
        redistribution,
    };
    Ok(policy::license_permits(&lic, &terms, &tile, now_ms))
}

/// Deterministic count-based sampler.
#[pyclass]
struct Sampler(SamplerState);

#[pymethods]
impl Sampler {
    #[new]
    fn new(rate: f64) -> PyResult<Self> {
        Ok(Self(SamplerState::new(SamplingRate::from_f64(rate).map_err(value_err)?)))
    }

    fn admit(&mut self) -> bool {
        self.0.admit()
    }

    #[getter]
    fn accepted(&self) -> u64 {
        self.0.accepted_count
    }

    #[getter]
    fn seen(&self) -> u64 {
        self.0.seen_count
    }
}

/// A MEC node on its own simulated clock, with a signed pipeline for every
/// registered datatype.
#[pyclass(frozen)]
struct Node {
    node: Arc<MecNode>,
    clock: SimClock,
}

#[pymethods]
impl Node {
    #[new]
    #[pyo3(signature = (config, start_ms=1_700_000_000_000, pipeline_capacity=50.0))]
    fn new(config: &Bound<'_, PyAny>, start_ms: u64, pipeline_capacity: f64) -> PyResult<Self> {
        let cfg: MecConfig = from_py(config)?;
        let key = signing_key_from_seed([0x42; 32]);
        let mut trust = TrustStore::new();
        trust.pin("local", key.verifying_key());
        let descriptors = cfg
            .datatypes
            .iter()
            .map(|dt| {
                PipelineDescriptor {
                    datatype: dt.to_owned(),
                    image_ref: format!("registry.local/pipeline-{dt}:1"),
                    signature: vec![],
                    signer_key_id: "local".into(),
                    per_replica_capacity_msgs_per_s: pipeline_capacity,
                }
                .sign(&key)
            })
            .collect();
        let clock = SimClock::new(start_ms);
        let node = MecNode::new(cfg, trust, descriptors, Arc::new(clock.clone())).map_err(value_err)?;
        Ok(Self {
            node: Arc::new(node),
            clock,
        })
    }

    #[getter]
    fn now_ms(&self) -> u64 {
        self.node.now_ms()
    }

    fn advance(&self, ms: u64) -> u64 {
        self.clock.advance(ms)
    }

    /// Returns `{"status": ..., "reason": ...}`.
    fn ingest<'py>(&self, py: Python<'py>, data: &[u8]) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.node.ingest(data))
    }

    #[pyo3(signature = (consumer_ref, datatype, tier, roi, commercial_use=false, redistribution=false, local=false))]
    #[allow(clippy::too_many_arguments)]
    fn attach_consumer(
        &self,
        consumer_ref: &str,
        datatype: &str,
        tier: &str,
        roi: Vec<String>,
        commercial_use: bool,
        redistribution: bool,
        local: bool,
    ) -> PyResult<()> {
        let roi: BTreeSet<QuadKey> = roi.iter().map(|k| QuadKey::parse(k)).collect::<Result<_, _>>().map_err(value_err)?;
        let terms = ConsumerTerms {
            commercial_use,
            redistribution,
        };
        let dest = if local { Destination::Local } else { Destination::Cloud };
        self.node.attach_consumer(consumer_ref, datatype, tier, terms, roi, dest).map_err(value_err)?;
        Ok(())
    }

    fn detach_consumer(&self, consumer_ref: &str) -> bool {
        self.node.detach_consumer(consumer_ref)
    }

    /// Processes queues, meters compute, autoscales and reaps idle pipelines.
    fn tick<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.node.tick())
    }

    fn take_deliveries<'py>(&self, py: Python<'py>, consumer_ref: &str) -> PyResult<Vec<Bound<'py, PyAny>>> {
        self.node.pump();
        self.node
            .take_deliveries(consumer_ref)
            .iter()
            .map(|d| {
                let v: serde_json::Value = serde_json::from_slice(&envelope::serialize_envelope(&d.envelope)).expect("serialized envelope is JSON");
                to_py(py, &v)
            })
            .collect()
    }

    fn report_usage<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.node.report_usage())
    }

    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.node.metrics())
    }

    fn has_running_pipeline(&self, datatype: &str) -> bool {
        self.node.has_running_pipeline(datatype)
    }
}

/// Runs a scenario (dict or JSON string) and returns its metrics as a dict.
#[pyfunction]
#[pyo3(signature = (scenario, always_on=false))]
fn run_scenario<'py>(py: Python<'py>, scenario: &Bound<'py, PyAny>, always_on: bool) -> PyResult<Bound<'py, PyAny>> {
    let s: Scenario = from_py(scenario)?;
    let mode = if always_on { Provisioning::AlwaysOn } else { Provisioning::DemandDriven };
    let m = py.detach(|| sim::run_scenario(&s, mode)).map_err(sim_err)?;
    to_py(py, &m)
}

/// Runs a scenario and writes `summary.json` and `ticks.csv` into `out_dir`.
#[pyfunction]
#[pyo3(signature = (scenario, out_dir, always_on=false))]
fn run_and_export(py: Python<'_>, scenario: &Bound<'_, PyAny>, out_dir: std::path::PathBuf, always_on: bool) -> PyResult<()> {
    let s: Scenario = from_py(scenario)?;
    let mode = if always_on { Provisioning::AlwaysOn } else { Provisioning::DemandDriven };
    py.detach(|| sim::run_scenario(&s, mode).and_then(|m| sim::export_metrics(&m, &out_dir)))
        .map_err(sim_err)
}

#[pymodule]
#[pyo3(name = "mecflow")]
fn mecflow_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(latlon_to_tile, m)?)?;
    m.add_function(wrap_pyfunction!(tile_to_quadkey, m)?)?;
    m.add_function(wrap_pyfunction!(quadkey_to_tile, m)?)?;
    m.add_function(wrap_pyfunction!(locate, m)?)?;
    m.add_function(wrap_pyfunction!(quadkey_contains, m)?)?;
    m.add_function(wrap_pyfunction!(cover_roi, m)?)?;
    m.add_function(wrap_pyfunction!(parse_envelope, m)?)?;
    m.add_function(wrap_pyfunction!(scrub, m)?)?;
    m.add_function(wrap_pyfunction!(license_permits, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(run_and_export, m)?)?;
    m.add_class::<Sampler>()?;
    m.add_class::<Node>()?;
    Ok(())
}
