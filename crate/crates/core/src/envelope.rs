//! Geo-tagged sample envelopes, their JSON wire form, privacy scrubbing and
//! producer clock normalisation.

use std::collections::{BTreeMap, BTreeSet};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::is_name_token;
use crate::tilegrid::{GeoPosition, QuadKey};

/// Annotation key set on opaque payloads that skip key-level scrubbing.
pub const PRIVACY_ANNOTATION: &str = "privacy";
pub const OPAQUE_UNSCREENED: &str = "opaque-unscreened";

pub const DEFAULT_CLOCK_BOUND_MS: u64 = 60_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EnvelopeError {
    #[error("malformed envelope: {0}")]
    Malformed(String),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("implausible clock: corrected {corrected_ms} ms vs reference {reference_ms} ms (bound {bound_ms} ms)")]
    ClockImplausible {
        corrected_ms: i64,
        reference_ms: u64,
        bound_ms: u64,
    },
}

/// Licence terms declared by the producer as data owner.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LicenseTag {
    pub commercial_use: bool,
    pub redistribution: bool,
    #[serde(default)]
    pub geo_scope: Option<QuadKey>,
    #[serde(default)]
    pub expiry_ms: Option<u64>,
}

impl LicenseTag {
    pub fn open() -> Self {
        Self {
            commercial_use: true,
            redistribution: true,
            geo_scope: None,
            expiry_ms: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Structured(Map<String, Value>),
    Opaque(Vec<u8>),
}

impl Payload {
    /// Length of the encoded payload: compact JSON for structured payloads,
    /// raw length for opaque ones.
    pub fn encoded_len(&self) -> u64 {
        match self {
            Payload::Structured(map) => encoded_object_len(map),
            Payload::Opaque(bytes) => bytes.len() as u64,
        }
    }
}

fn encoded_object_len(map: &Map<String, Value>) -> u64 {
    struct Counter(u64);
    impl std::io::Write for Counter {
        fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
            self.0 += buf.len() as u64;
            Ok(buf.len())
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }
    let mut c = Counter(0);
    serde_json::to_writer(&mut c, map).expect("in-memory JSON encoding");
    c.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub producer_id: String,
    pub datatype: String,
    pub timestamp_ms: u64,
    pub clock_offset_ms: i64,
    pub position: GeoPosition,
    pub license: LicenseTag,
    pub payload: Payload,
    pub annotations: BTreeMap<String, String>,
}

impl Envelope {
    pub fn size_bytes(&self) -> u64 {
        self.payload.encoded_len()
    }

    pub fn validate(&self) -> Result<(), EnvelopeError> {
        if self.producer_id.is_empty() {
            return Err(EnvelopeError::Schema("producer_id is empty".into()));
        }
        if !is_name_token(&self.datatype) {
            return Err(EnvelopeError::Schema(format!("datatype {:?} must match [a-z0-9-]{{1,64}}", self.datatype)));
        }
        if self.timestamp_ms == 0 {
            return Err(EnvelopeError::Schema("timestamp_ms must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireEnvelope {
    producer_id: String,
    datatype: String,
    timestamp_ms: u64,
    #[serde(default)]
    clock_offset_ms: i64,
    position: GeoPosition,
    license: LicenseTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    payload: Option<Map<String, Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    payload_b64: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    annotations: BTreeMap<String, String>,
}

/// Decodes and validates one JSON envelope.
pub fn parse_envelope(bytes: &[u8]) -> Result<Envelope, EnvelopeError> {
    let value: Value = serde_json::from_slice(bytes).map_err(|e| EnvelopeError::Malformed(e.to_string()))?;
    if !value.is_object() {
        return Err(EnvelopeError::Malformed("top-level value is not an object".into()));
    }
    let wire: WireEnvelope = serde_json::from_value(value).map_err(|e| EnvelopeError::Schema(e.to_string()))?;
    let payload = match (wire.payload, wire.payload_b64) {
        (Some(map), None) => Payload::Structured(map),
        (None, Some(b64)) => Payload::Opaque(
            B64.decode(b64.as_bytes())
                .map_err(|e| EnvelopeError::Schema(format!("payload_b64: {e}")))?,
        ),
        (Some(_), Some(_)) => return Err(EnvelopeError::Schema("both payload and payload_b64 present".into())),
        (None, None) => return Err(EnvelopeError::Schema("missing payload".into())),
    };
    let env = Envelope {
        producer_id: wire.producer_id,
        datatype: wire.datatype,
        timestamp_ms: wire.timestamp_ms,
        clock_offset_ms: wire.clock_offset_ms,
        position: wire.position,
        license: wire.license,
        payload,
        annotations: wire.annotations,
    };
    env.validate()?;
    Ok(env)
}

pub fn serialize_envelope(e: &Envelope) -> Vec<u8> {
    let (payload, payload_b64) = match &e.payload {
        Payload::Structured(map) => (Some(map.clone()), None),
        Payload::Opaque(bytes) => (None, Some(B64.encode(bytes))),
    };
    let wire = WireEnvelope {
        producer_id: e.producer_id.clone(),
        datatype: e.datatype.clone(),
        timestamp_ms: e.timestamp_ms,
        clock_offset_ms: e.clock_offset_ms,
        position: e.position,
        license: e.license.clone(),
        payload,
        payload_b64,
        annotations: e.annotations.clone(),
    };
    serde_json::to_vec(&wire).expect("in-memory JSON encoding")
}

/// Key names stripped from structured payloads at any depth.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct BlacklistPolicy {
    keys: BTreeSet<String>,
}

impl BlacklistPolicy {
    pub fn new<I, S>(keys: I) -> Result<Self, EnvelopeError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let keys: BTreeSet<String> = keys.into_iter().map(Into::into).collect();
        if keys.iter().any(|k| k.is_empty()) {
            return Err(EnvelopeError::Schema("blacklist key names must be non-empty".into()));
        }
        Ok(Self { keys })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn keys(&self) -> &BTreeSet<String> {
        &self.keys
    }

    pub fn is_blacklisted(&self, key: &str) -> bool {
        self.keys.contains(key)
    }
}

/// Operator default: `vin`, `plate`, `driver_id`.
pub fn default_blacklist() -> BlacklistPolicy {
    BlacklistPolicy::new(["vin", "plate", "driver_id"]).expect("static keys")
}

impl TryFrom<Vec<String>> for BlacklistPolicy {
    type Error = EnvelopeError;

    fn try_from(v: Vec<String>) -> Result<Self, Self::Error> {
        BlacklistPolicy::new(v)
    }
}

impl From<BlacklistPolicy> for Vec<String> {
    fn from(p: BlacklistPolicy) -> Self {
        p.keys.into_iter().collect()
    }
}

fn scrub_value(v: &mut Value, policy: &BlacklistPolicy) {
    match v {
        Value::Object(map) => scrub_object(map, policy),
        Value::Array(items) => items.iter_mut().for_each(|item| scrub_value(item, policy)),
        _ => {}
    }
}

fn scrub_object(map: &mut Map<String, Value>, policy: &BlacklistPolicy) {
    map.retain(|k, _| !policy.is_blacklisted(k));
    for v in map.values_mut() {
        scrub_value(v, policy);
    }
}

/// Removes every blacklisted key from a structured payload. Opaque payloads
/// are left untouched and annotated as unscreened.
pub fn scrub(e: &Envelope, policy: &BlacklistPolicy) -> Envelope {
    let mut out = e.clone();
    match &mut out.payload {
        Payload::Structured(map) => scrub_object(map, policy),
        Payload::Opaque(_) => {
            out.annotations
                .insert(PRIVACY_ANNOTATION.to_owned(), OPAQUE_UNSCREENED.to_owned());
        }
    }
    out
}

/// Applies the producer-reported clock offset and checks the corrected time
/// against the node's reference clock.
pub fn normalize_timestamp(e: &Envelope, reference_ms: u64, bound_ms: u64) -> Result<Envelope, EnvelopeError> {
    let corrected = e.timestamp_ms as i64 + e.clock_offset_ms;
    let implausible = corrected <= 0 || (corrected as i128 - reference_ms as i128).unsigned_abs() > bound_ms as u128;
    if implausible {
        return Err(EnvelopeError::ClockImplausible {
            corrected_ms: corrected,
            reference_ms,
            bound_ms,
        });
    }
    let mut out = e.clone();
    out.timestamp_ms = corrected as u64;
    out.clock_offset_ms = 0;
    Ok(out)
}

/// Registered datatype keys accepted at ingest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DatatypeRegistry(BTreeSet<String>);

impl Default for DatatypeRegistry {
    fn default() -> Self {
        Self(["cam", "denm", "video", "lidar"].iter().map(|s| s.to_string()).collect())
    }
}

impl DatatypeRegistry {
    pub fn new<I: IntoIterator<Item = String>>(names: I) -> Result<Self, EnvelopeError> {
        let set: BTreeSet<String> = names.into_iter().collect();
        if let Some(bad) = set.iter().find(|n| !is_name_token(n)) {
            return Err(EnvelopeError::Schema(format!("invalid datatype {bad:?}")));
        }
        Ok(Self(set))
    }

    pub fn contains(&self, datatype: &str) -> bool {
        self.0.contains(datatype)
    }

    pub fn check(&self, datatype: &str) -> Result<(), EnvelopeError> {
        if self.contains(datatype) {
            Ok(())
        } else {
            Err(EnvelopeError::Schema(format!("datatype {datatype:?} not registered")))
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }
}

/// Counts occurrences of any blacklisted key at any depth.
pub fn count_blacklisted(payload: &Payload, policy: &BlacklistPolicy) -> usize {
    fn walk(v: &Value, policy: &BlacklistPolicy) -> usize {
        match v {
            Value::Object(map) => map
                .iter()
                .map(|(k, v)| usize::from(policy.is_blacklisted(k)) + walk(v, policy))
                .sum(),
            Value::Array(items) => items.iter().map(|v| walk(v, policy)).sum(),
            _ => 0,
        }
    }
    match payload {
        Payload::Structured(map) => map
            .iter()
            .map(|(k, v)| usize::from(policy.is_blacklisted(k)) + walk(v, policy))
            .sum(),
        Payload::Opaque(_) => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn sample(payload: Value) -> Envelope {
        Envelope {
            producer_id: "car-1".into(),
            datatype: "cam".into(),
            timestamp_ms: 1_000,
            clock_offset_ms: 0,
            position: GeoPosition::new(43.3, -1.98).unwrap(),
            license: LicenseTag::open(),
            payload: Payload::Structured(payload.as_object().unwrap().clone()),
            annotations: BTreeMap::new(),
        }
    }

    fn minimal_json() -> Value {
        json!({
            "producer_id": "car-1",
            "datatype": "cam",
            "timestamp_ms": 1000,
            "clock_offset_ms": 0,
            "position": {"lat": 43.3, "lon": -1.98},
            "license": {"commercial_use": true, "redistribution": false, "geo_scope": null, "expiry_ms": null},
            "payload": {"speed": 50}
        })
    }

    #[test]
    fn parses_minimal_message() {
        let e = parse_envelope(minimal_json().to_string().as_bytes()).unwrap();
        assert_eq!(e.producer_id, "car-1");
        assert_eq!(e.datatype, "cam");
        assert_eq!(e.timestamp_ms, 1000);
        assert!(e.license.commercial_use && !e.license.redistribution);
        assert_eq!(e.size_bytes(), br#"{"speed":50}"#.len() as u64);
    }

    #[test]
    fn missing_datatype_is_schema_violation() {
        let mut v = minimal_json();
        v.as_object_mut().unwrap().remove("datatype");
        assert!(matches!(parse_envelope(v.to_string().as_bytes()), Err(EnvelopeError::Schema(_))));
    }

    #[test]
    fn bad_latitude_is_schema_violation() {
        let mut v = minimal_json();
        v["position"]["lat"] = json!(123);
        assert!(matches!(parse_envelope(v.to_string().as_bytes()), Err(EnvelopeError::Schema(_))));
    }

    #[test]
    fn garbage_is_malformed() {
        assert!(matches!(parse_envelope(b"\x00\xffnot json"), Err(EnvelopeError::Malformed(_))));
        assert!(matches!(parse_envelope(b"[1,2]"), Err(EnvelopeError::Malformed(_))));
        let mut trailing = minimal_json().to_string().into_bytes();
        trailing.extend_from_slice(b" x");
        assert!(matches!(parse_envelope(&trailing), Err(EnvelopeError::Malformed(_))));
    }

    #[test]
    fn bad_datatype_and_geo_scope() {
        let mut v = minimal_json();
        v["datatype"] = json!("CAM!");
        assert!(matches!(parse_envelope(v.to_string().as_bytes()), Err(EnvelopeError::Schema(_))));
        let mut v = minimal_json();
        v["license"]["geo_scope"] = json!("129");
        assert!(matches!(parse_envelope(v.to_string().as_bytes()), Err(EnvelopeError::Schema(_))));
    }

    #[test]
    fn scrub_flat() {
        let e = sample(json!({"speed": 50, "vin": "X123"}));
        let s = scrub(&e, &BlacklistPolicy::new(["vin"]).unwrap());
        assert_eq!(s.payload, Payload::Structured(json!({"speed": 50}).as_object().unwrap().clone()));
        assert_eq!(s.size_bytes(), br#"{"speed":50}"#.len() as u64);
        assert_eq!(s.producer_id, e.producer_id);
    }

    #[test]
    fn scrub_nested_and_arrays() {
        let e = sample(json!({"a": {"vin": "X1"}, "b": [{"vin": "X2"}]}));
        let s = scrub(&e, &BlacklistPolicy::new(["vin"]).unwrap());
        assert_eq!(s.payload, Payload::Structured(json!({"a": {}, "b": [{}]}).as_object().unwrap().clone()));
    }

    #[test]
    fn scrub_empty_policy_is_identity() {
        let e = sample(json!({"a": {"vin": "X1"}, "speed": 3}));
        assert_eq!(scrub(&e, &BlacklistPolicy::empty()), e);
    }

    #[test]
    fn scrub_opaque_annotates() {
        let mut e = sample(json!({}));
        e.payload = Payload::Opaque(vec![1, 2, 3, 255]);
        let s = scrub(&e, &default_blacklist());
        assert_eq!(s.payload, e.payload);
        assert_eq!(s.annotations.get(PRIVACY_ANNOTATION).map(String::as_str), Some(OPAQUE_UNSCREENED));
        let back = parse_envelope(&serialize_envelope(&s)).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn blacklist_rejects_empty_names() {
        assert!(BlacklistPolicy::new([""]).is_err());
    }

    #[test]
    fn normalize_examples() {
        let mut e = sample(json!({}));
        e.clock_offset_ms = 50;
        let n = normalize_timestamp(&e, 1_050, DEFAULT_CLOCK_BOUND_MS).unwrap();
        assert_eq!((n.timestamp_ms, n.clock_offset_ms), (1050, 0));
        assert_eq!(normalize_timestamp(&n, 1_050, DEFAULT_CLOCK_BOUND_MS).unwrap(), n);

        let e = sample(json!({}));
        assert_eq!(normalize_timestamp(&e, 1_000, DEFAULT_CLOCK_BOUND_MS).unwrap(), e);

        let mut late = sample(json!({}));
        late.timestamp_ms = 1_000_000;
        let reference = 1_000_000 + 10 * 60_000;
        assert!(matches!(
            normalize_timestamp(&late, reference, DEFAULT_CLOCK_BOUND_MS),
            Err(EnvelopeError::ClockImplausible { .. })
        ));
        // exactly at the bound is still plausible
        assert!(normalize_timestamp(&late, 1_060_000, DEFAULT_CLOCK_BOUND_MS).is_ok());
    }

    #[test]
    fn registry_defaults() {
        let r = DatatypeRegistry::default();
        assert!(r.contains("cam") && r.contains("lidar"));
        assert!(r.check("radar").is_err());
        assert!(DatatypeRegistry::new(vec!["Bad Name".to_string()]).is_err());
    }

    fn arb_json(depth: u32) -> impl Strategy<Value = Value> {
        let leaf = prop_oneof![
            any::<i32>().prop_map(Value::from),
            "[a-z]{0,6}".prop_map(Value::from),
            any::<bool>().prop_map(Value::from),
        ];
        leaf.prop_recursive(depth, 48, 5, |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 0..4).prop_map(Value::Array),
                prop::collection::btree_map(prop_oneof![Just("vin".to_string()), Just("plate".to_string()), "[a-z]{1,5}"], inner, 0..5)
                    .prop_map(|m| Value::Object(m.into_iter().collect())),
            ]
        })
    }

    fn arb_envelope() -> impl Strategy<Value = Envelope> {
        (
            prop::collection::btree_map("[a-z_]{1,6}", arb_json(4), 0..6),
            -85.0f64..85.0,
            -180.0f64..179.9,
            1u64..u64::MAX / 4,
            -100_000i64..100_000,
            any::<(bool, bool)>(),
            prop::option::of(prop::collection::vec(any::<u8>(), 0..64)),
        )
            .prop_map(|(map, lat, lon, ts, off, (c, r), opaque)| Envelope {
                producer_id: "p".into(),
                datatype: "cam".into(),
                timestamp_ms: ts,
                clock_offset_ms: off,
                position: GeoPosition::new(lat, lon).unwrap(),
                license: LicenseTag {
                    commercial_use: c,
                    redistribution: r,
                    geo_scope: None,
                    expiry_ms: Some(ts),
                },
                payload: match opaque {
                    Some(b) => Payload::Opaque(b),
                    None => Payload::Structured(map.into_iter().collect()),
                },
                annotations: BTreeMap::new(),
            })
    }

    proptest! {
        #[test]
        fn scrub_is_complete_and_idempotent(e in arb_envelope()) {
            let policy = default_blacklist();
            let once = scrub(&e, &policy);
            prop_assert_eq!(count_blacklisted(&once.payload, &policy), 0);
            prop_assert_eq!(scrub(&once, &policy), once.clone());
            let back = parse_envelope(&serialize_envelope(&once)).unwrap();
            prop_assert_eq!(count_blacklisted(&back.payload, &policy), 0);
        }

        #[test]
        fn wire_roundtrip(e in arb_envelope()) {
            let bytes = serialize_envelope(&e);
            let back = parse_envelope(&bytes).unwrap();
            prop_assert_eq!(&back, &e);
            prop_assert_eq!(serialize_envelope(&back), bytes);
        }

        #[test]
        fn normalize_idempotent(e in arb_envelope()) {
            let reference = (e.timestamp_ms as i64 + e.clock_offset_ms).max(1) as u64;
            if let Ok(n) = normalize_timestamp(&e, reference, DEFAULT_CLOCK_BOUND_MS) {
                prop_assert_eq!(normalize_timestamp(&n, reference, DEFAULT_CLOCK_BOUND_MS).unwrap(), n.clone());
                prop_assert_eq!(&n.payload, &e.payload);
                prop_assert_eq!(&n.license, &e.license);
                prop_assert_eq!(n.position, e.position);
            }
        }
    }
}
