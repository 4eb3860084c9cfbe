#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;

use mecflow::clock::SimClock;
use mecflow::envelope::{self, Envelope, LicenseTag, Payload};
use mecflow::lifecycle::{signing_key_from_seed, PipelineDescriptor, TrustStore};
use mecflow::mecnode::{MecConfig, MecNode};
use mecflow::policy::Capacity;
use mecflow::tilegrid::{locate, GeoPosition, QuadKey};
use serde_json::{Map, Value};

pub const LAT: f64 = 43.3183;
pub const LON: f64 = -1.9812;
pub const START_MS: u64 = 1_700_000_000_000;

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

pub fn here(level: u8) -> QuadKey {
    locate(GeoPosition::new(LAT, LON).unwrap(), level).unwrap()
}

pub fn roi_here() -> BTreeSet<QuadKey> {
    [here(14)].into()
}

/// A node on the registration tile around (LAT, LON) with signed cam/denm pipelines.
pub fn node_with(clock: &SimClock, mec_id: &str, tweak: impl FnOnce(&mut MecConfig)) -> MecNode {
    let key = signing_key_from_seed([7; 32]);
    let mut trust = TrustStore::new();
    trust.pin("ops", key.verifying_key());
    let descs = ["cam", "denm"]
        .iter()
        .map(|dt| {
            PipelineDescriptor {
                datatype: dt.to_string(),
                image_ref: format!("registry.local/pipeline-{dt}:1"),
                signature: vec![],
                signer_key_id: "ops".into(),
                per_replica_capacity_msgs_per_s: 50.0,
            }
            .sign(&key)
        })
        .collect();
    let mut cfg = MecConfig::new(mec_id, here(10), Capacity::new(8000, 16384, 1));
    tweak(&mut cfg);
    MecNode::new(cfg, trust, descs, Arc::new(clock.clone())).unwrap()
}

pub fn sample(producer: &str, ts: u64, license: LicenseTag, payload: Map<String, Value>) -> Vec<u8> {
    envelope::serialize_envelope(&Envelope {
        producer_id: producer.into(),
        datatype: "cam".into(),
        timestamp_ms: ts,
        clock_offset_ms: 0,
        position: GeoPosition::new(LAT, LON).unwrap(),
        license,
        payload: Payload::Structured(payload),
        annotations: BTreeMap::new(),
    })
}

pub fn obj(v: Value) -> Map<String, Value> {
    v.as_object().cloned().unwrap()
}
