//! Deterministic scenario engine.
//!
//! Runs MEC nodes and the hub in one process on a simulated clock, moves
//! producers along their traces, opens and closes consumer subscriptions on
//! schedule and records what happened. Identical scenario and seed give
//! identical [`RunMetrics`].

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::clock::{Clock, SimClock};
use crate::cloudhub::{in_process_links, AccessToken, CloudHub, HubConfig, Scope, SubscribeRequest, DEFAULT_HEARTBEAT_PERIOD_MS};
use crate::envelope::{self, BlacklistPolicy, DatatypeRegistry, Envelope, LicenseTag, Payload, DEFAULT_CLOCK_BOUND_MS};
use crate::lifecycle::{
    signing_key_from_seed, HostedServiceDescriptor, PipelineDescriptor, ScriptedService, TrustStore, TrustVerdict, BanReason, DEFAULT_IDLE_GRACE_MS,
};
use crate::mecnode::{Destination, MecConfig, MecNode};
use crate::policy::{license_permits, Capacity, ConsumerTerms, TierCatalog};
use crate::tilegrid::{self, BoundingBox, GeoPosition, QuadKey, MAX_LEVEL, MIN_LEVEL};
use crate::broker::TopicName;

/// Simulated wall-clock time at scenario t = 0. Scenario times are relative to it.
pub const SIM_EPOCH_MS: u64 = 1_700_000_000_000;

const ADMIN_TOKEN: &str = "sim-admin";
const CONSUMER_TOKEN: &str = "sim-consumer";
const SIGNER: &str = "sim-signer";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("i/o failure: {0}")]
    Io(String),
    #[error("runtime failure: {0}")]
    Runtime(String),
}

fn invalid(msg: impl Into<String>) -> SimError {
    SimError::Invalid(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MecSpec {
    pub mec_id: String,
    /// Registration tile. If absent, derived from `lat`/`lon` at the scenario's registration level.
    #[serde(default)]
    pub tile: Option<QuadKey>,
    #[serde(default)]
    pub lat: Option<f64>,
    #[serde(default)]
    pub lon: Option<f64>,
    #[serde(default = "default_capacity")]
    pub capacity: Capacity,
}

fn default_capacity() -> Capacity {
    Capacity::new(4000, 8192, 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub lat: f64,
    pub lon: f64,
    /// Time held at this waypoint before leaving.
    #[serde(default)]
    pub dwell_ms: u64,
    /// Speed on the leg towards the next waypoint.
    #[serde(default)]
    pub speed_mps: Option<f64>,
}

fn default_resolve_period() -> u64 {
    1_000
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProducerSpec {
    pub producer_id: String,
    pub datatype: String,
    pub rate_hz: f64,
    pub payload_bytes: u64,
    /// `expiry_ms`, if set, is relative to the start of the run.
    #[serde(default = "LicenseTag::open")]
    pub license: LicenseTag,
    pub trace: Vec<Waypoint>,
    #[serde(default = "default_resolve_period")]
    pub resolve_period_ms: u64,
    #[serde(default)]
    pub start_ms: u64,
    #[serde(default)]
    pub stop_ms: Option<u64>,
    /// Producer clock error; a positive value means the producer clock runs ahead.
    #[serde(default)]
    pub clock_skew_ms: i64,
    /// Whether the producer reports its clock offset so the node can correct it.
    #[serde(default = "yes")]
    pub declares_offset: bool,
    /// Plant blacklisted keys at random depths 1 to 4 in every payload.
    #[serde(default)]
    pub plant_private_keys: bool,
    /// Send every n-th sample as unparseable bytes.
    #[serde(default)]
    pub corrupt_every: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsumerSpec {
    pub consumer_id: String,
    pub datatype: String,
    pub tier: String,
    #[serde(default)]
    pub terms: ConsumerTerms,
    pub roi: BoundingBox,
    pub start_ms: u64,
    pub stop_ms: u64,
    #[serde(default = "cloud")]
    pub destination: Destination,
}

fn cloud() -> Destination {
    Destination::Cloud
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostedTrial {
    pub service_id: String,
    pub image_ref: String,
    pub declared_topics: BTreeSet<TopicName>,
    pub declared_volume_bytes: u64,
    pub behaviour: ScriptedService,
    /// Target MEC; every MEC in declaration order when absent.
    #[serde(default)]
    pub mec_id: Option<String>,
    #[serde(default)]
    pub at_ms: u64,
    #[serde(default = "yes")]
    pub signed: bool,
}

fn default_registration_level() -> u8 {
    10
}

fn default_roi_level() -> u8 {
    14
}

fn default_grace() -> u64 {
    DEFAULT_IDLE_GRACE_MS
}

fn default_clock_bound() -> u64 {
    DEFAULT_CLOCK_BOUND_MS
}

fn default_pipeline_capacity() -> f64 {
    50.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub duration_ms: u64,
    pub tick_ms: u64,
    #[serde(default = "default_registration_level")]
    pub registration_level: u8,
    #[serde(default = "default_roi_level")]
    pub roi_level: u8,
    #[serde(default = "default_grace")]
    pub idle_grace_ms: u64,
    #[serde(default = "default_clock_bound")]
    pub clock_bound_ms: u64,
    #[serde(default = "default_pipeline_capacity")]
    pub pipeline_capacity_msgs_per_s: f64,
    #[serde(default)]
    pub tiers: TierCatalog,
    #[serde(default)]
    pub datatypes: DatatypeRegistry,
    #[serde(default = "envelope::default_blacklist")]
    pub blacklist: BlacklistPolicy,
    pub mecs: Vec<MecSpec>,
    #[serde(default)]
    pub producers: Vec<ProducerSpec>,
    #[serde(default)]
    pub consumers: Vec<ConsumerSpec>,
    #[serde(default)]
    pub hosted_services: Vec<HostedTrial>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provisioning {
    #[default]
    DemandDriven,
    AlwaysOn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TickRow {
    pub tick: u64,
    pub instances: u64,
    pub accepted: u64,
    pub discarded: u64,
    pub forwarded_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LifecycleEventKind {
    Deployed,
    Reaped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LifecycleEvent {
    pub t_ms: u64,
    pub mec_id: String,
    pub pipeline: String,
    pub datatype: String,
    pub kind: LifecycleEventKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServingChange {
    pub t_ms: u64,
    pub mec_id: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MecIngest {
    pub ingested: u64,
    pub accepted: u64,
    pub first_ms: Option<u64>,
    pub last_ms: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConsumerMetrics {
    pub subscription_id: Option<String>,
    pub subscribe_error: Option<String>,
    pub matched_mecs: Vec<String>,
    pub destination: Option<Destination>,
    /// Tap-side metered bytes, summed from node usage reports.
    pub forwarded_bytes: u64,
    pub forwarded_count: u64,
    /// Bytes and envelopes actually received by the consumer.
    pub received_bytes: u64,
    pub received_count: u64,
    pub received_by_producer: BTreeMap<String, u64>,
    pub license_violations: u64,
    pub privacy_violations: u64,
    pub roi_violations: u64,
    pub max_relay_hops: u8,
    pub billed_bytes: u64,
    pub billed_compute_mcpu_ms: u64,
    pub billed_compute_mcpu_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub service_id: String,
    pub image_ref: String,
    pub mec_id: String,
    pub t_ms: u64,
    pub trusted: bool,
    pub reason: Option<String>,
    pub ban_acks: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub provisioning: Provisioning,
    pub duration_ms: u64,
    pub tick_ms: u64,
    pub ingested: u64,
    pub accepted: u64,
    pub discarded_no_demand: u64,
    pub rejected: u64,
    /// Samples a producer could not send because no MEC served its position.
    pub unserved: u64,
    pub forwarded_bytes: BTreeMap<String, u64>,
    pub pipelines_deployed: u64,
    pub pipelines_reaped: u64,
    pub peak_instances: u64,
    pub peak_refcount: u64,
    pub events: Vec<LifecycleEvent>,
    pub handovers: BTreeMap<String, u64>,
    pub serving: BTreeMap<String, Vec<ServingChange>>,
    pub producer_ingest: BTreeMap<String, BTreeMap<String, MecIngest>>,
    pub compute_mcpu_s: BTreeMap<String, f64>,
    pub compute_mcpu_ms_total: u64,
    pub consumers: BTreeMap<String, ConsumerMetrics>,
    pub unattributed_bytes: u64,
    pub unattributed_compute_mcpu_ms: u64,
    pub trials: Vec<TrialOutcome>,
    pub ticks: Vec<TickRow>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.tick_ms == 0 {
            return Err(invalid("tick_ms must be positive"));
        }
        if !self.duration_ms.is_multiple_of(self.tick_ms) {
            return Err(invalid("tick_ms must divide duration_ms"));
        }
        for (name, level) in [("registration_level", self.registration_level), ("roi_level", self.roi_level)] {
            if !(MIN_LEVEL..=MAX_LEVEL).contains(&level) {
                return Err(invalid(format!("{name} must be in {MIN_LEVEL}..={MAX_LEVEL}")));
            }
        }
        if !(self.pipeline_capacity_msgs_per_s.is_finite() && self.pipeline_capacity_msgs_per_s > 0.0) {
            return Err(invalid("pipeline_capacity_msgs_per_s must be positive"));
        }
        let mut ids = BTreeSet::new();
        for m in &self.mecs {
            if !crate::is_name_token(&m.mec_id) {
                return Err(invalid(format!("mec_id {:?} must match [a-z0-9-]{{1,64}}", m.mec_id)));
            }
            if !ids.insert(m.mec_id.as_str()) {
                return Err(invalid(format!("duplicate mec_id {:?}", m.mec_id)));
            }
            self.mec_tile(m)?;
        }
        let mut pids = BTreeSet::new();
        for p in &self.producers {
            if !pids.insert(p.producer_id.as_str()) {
                return Err(invalid(format!("duplicate producer_id {:?}", p.producer_id)));
            }
            if !(p.rate_hz.is_finite() && p.rate_hz > 0.0) {
                return Err(invalid(format!("producer {}: rate_hz must be positive", p.producer_id)));
            }
            if !self.datatypes.contains(&p.datatype) {
                return Err(invalid(format!("producer {}: unknown datatype {:?}", p.producer_id, p.datatype)));
            }
            if p.trace.is_empty() {
                return Err(invalid(format!("producer {}: trace must not be empty", p.producer_id)));
            }
            if p.resolve_period_ms == 0 {
                return Err(invalid(format!("producer {}: resolve_period_ms must be positive", p.producer_id)));
            }
            if p.corrupt_every == Some(0) {
                return Err(invalid(format!("producer {}: corrupt_every must be positive", p.producer_id)));
            }
            for (i, w) in p.trace.iter().enumerate() {
                GeoPosition::new(w.lat, w.lon).map_err(|e| invalid(format!("producer {}: waypoint {i}: {e}", p.producer_id)))?;
                let last = i + 1 == p.trace.len();
                if !last && !w.speed_mps.is_some_and(|v| v.is_finite() && v > 0.0) {
                    return Err(invalid(format!("producer {}: waypoint {i} needs a positive speed_mps", p.producer_id)));
                }
            }
        }
        let mut cids = BTreeSet::new();
        for c in &self.consumers {
            if !cids.insert(c.consumer_id.as_str()) {
                return Err(invalid(format!("duplicate consumer_id {:?}", c.consumer_id)));
            }
            if !(c.start_ms < c.stop_ms && c.stop_ms <= self.duration_ms) {
                return Err(invalid(format!("consumer {}: need start_ms < stop_ms <= duration_ms", c.consumer_id)));
            }
            if !self.tiers.contains(&c.tier) {
                return Err(invalid(format!("consumer {}: unknown tier {:?}", c.consumer_id, c.tier)));
            }
            tilegrid::cover_roi(&c.roi, self.roi_level).map_err(|e| invalid(format!("consumer {}: roi: {e}", c.consumer_id)))?;
        }
        for h in &self.hosted_services {
            if let Some(m) = &h.mec_id {
                if !ids.contains(m.as_str()) {
                    return Err(invalid(format!("hosted service {}: unknown mec {m:?}", h.service_id)));
                }
            }
        }
        Ok(())
    }

    fn mec_tile(&self, m: &MecSpec) -> Result<QuadKey, SimError> {
        match (&m.tile, m.lat, m.lon) {
            (Some(t), None, None) => Ok(t.clone()),
            (None, Some(lat), Some(lon)) => {
                let pos = GeoPosition::new(lat, lon).map_err(|e| invalid(format!("mec {}: {e}", m.mec_id)))?;
                Ok(tilegrid::locate(pos, self.registration_level).expect("validated level"))
            }
            _ => Err(invalid(format!("mec {}: give either tile or lat and lon", m.mec_id))),
        }
    }
}

fn haversine_m(a: GeoPosition, b: GeoPosition) -> f64 {
    const R: f64 = 6_371_008.8;
    let (p1, p2) = (a.lat().to_radians(), b.lat().to_radians());
    let dl = (b.lon() - a.lon()).to_radians();
    let h = ((p2 - p1) / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * R * h.sqrt().asin()
}

/// Position along the trace at `t_ms` after the run start: dwell, then move
/// linearly in lat/lon towards the next waypoint at the leg's speed. Held at
/// the last waypoint once the trace is exhausted.
pub fn vehicle_position(spec: &ProducerSpec, t_ms: u64) -> GeoPosition {
    let pos = |w: &Waypoint| GeoPosition::new(w.lat, w.lon).expect("validated waypoint");
    let mut t = t_ms as f64;
    for pair in spec.trace.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if t < a.dwell_ms as f64 {
            return pos(a);
        }
        t -= a.dwell_ms as f64;
        let leg_ms = haversine_m(pos(a), pos(b)) / a.speed_mps.unwrap_or(f64::INFINITY) * 1000.0;
        if t < leg_ms {
            let f = t / leg_ms;
            return GeoPosition::new(a.lat + (b.lat - a.lat) * f, a.lon + (b.lon - a.lon) * f).expect("between valid waypoints");
        }
        t -= leg_ms;
    }
    pos(spec.trace.last().expect("non-empty trace"))
}

/// Number of adjacent pairs in the resolved serving sequence that differ.
pub fn count_handovers<S: PartialEq>(resolved: &[S]) -> u64 {
    resolved.windows(2).filter(|w| w[0] != w[1]).count() as u64
}

struct ProducerRuntime {
    serving: Option<String>,
    last_resolve: Option<u64>,
    resolved: Vec<String>,
    sent: u64,
}

struct ConsumerRuntime {
    roi: BTreeSet<QuadKey>,
    sub: Option<String>,
    done: bool,
}

fn make_payload(rng: &mut ChaCha8Rng, seq: u64, bytes: u64, plant: bool, blacklist: &BlacklistPolicy) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("seq".into(), json!(seq));
    m.insert("speed_mps".into(), json!(rng.random_range(0..400) as f64 / 10.0));
    m.insert("heading".into(), json!(rng.random_range(0..360)));
    if plant {
        let keys: Vec<&String> = blacklist.keys().iter().collect();
        if let Some(key) = keys.choose(rng) {
            let depth = rng.random_range(1..=4u32);
            let mut inner = Value::Object(Map::from_iter([((*key).clone(), json!(format!("secret-{seq}")))]));
            for _ in 1..depth {
                let name = ["meta", "ext", "detail", "source"].choose(rng).expect("non-empty");
                let wrapped = Value::Object(Map::from_iter([(name.to_string(), inner)]));
                inner = if rng.random_bool(0.5) { Value::Array(vec![wrapped]) } else { wrapped };
            }
            if let Value::Object(o) = inner {
                m.extend(o);
            } else {
                m.insert("nested".into(), inner);
            }
        }
    }
    let used = Payload::Structured(m.clone()).encoded_len();
    let pad = bytes.saturating_sub(used + 10) as usize;
    m.insert("pad".into(), json!("x".repeat(pad)));
    m
}

/// Runs the whole system for `s.duration_ms` of simulated time.
pub fn run_scenario(s: &Scenario, provisioning: Provisioning) -> Result<RunMetrics, SimError> {
    s.validate()?;
    let clock = SimClock::new(SIM_EPOCH_MS);
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut key_seed = [0u8; 32];
    rng.fill_bytes(&mut key_seed);
    let key = signing_key_from_seed(key_seed);
    let mut trust = TrustStore::new();
    trust.pin(SIGNER, key.verifying_key());

    let descriptors: Vec<PipelineDescriptor> = s
        .datatypes
        .iter()
        .map(|dt| {
            PipelineDescriptor {
                datatype: dt.to_owned(),
                image_ref: format!("registry.local/pipeline-{dt}:1"),
                signature: vec![],
                signer_key_id: SIGNER.into(),
                per_replica_capacity_msgs_per_s: s.pipeline_capacity_msgs_per_s,
            }
            .sign(&key)
        })
        .collect();

    let mut nodes: BTreeMap<String, Arc<MecNode>> = BTreeMap::new();
    let mut endpoints = BTreeMap::new();
    for m in &s.mecs {
        let mut cfg = MecConfig::new(&m.mec_id, s.mec_tile(m)?, m.capacity);
        cfg.blacklist = s.blacklist.clone();
        cfg.idle_grace_ms = s.idle_grace_ms;
        cfg.clock_bound_ms = s.clock_bound_ms;
        cfg.endpoint = format!("inproc://{}", m.mec_id);
        cfg.datatypes = s.datatypes.clone();
        cfg.tiers = s.tiers.clone();
        cfg.always_on = provisioning == Provisioning::AlwaysOn;
        let node = MecNode::new(cfg.clone(), trust.clone(), descriptors.clone(), Arc::new(clock.clone())).map_err(|e| invalid(e.to_string()))?;
        let node = Arc::new(node);
        endpoints.insert(cfg.endpoint.clone(), node.clone());
        nodes.insert(m.mec_id.clone(), node);
    }
    let hub_cfg = HubConfig {
        tokens: vec![
            AccessToken {
                token: ADMIN_TOKEN.into(),
                scopes: [Scope::Admin].into(),
                expiry_ms: None,
            },
            AccessToken {
                token: CONSUMER_TOKEN.into(),
                scopes: [Scope::Consume].into(),
                expiry_ms: None,
            },
        ]
        .into(),
        tiers: s.tiers.clone(),
        ..HubConfig::default()
    };
    let hub = CloudHub::new(hub_cfg, Arc::new(clock.clone()), in_process_links(endpoints));
    for (id, node) in &nodes {
        hub.register_mec(ADMIN_TOKEN, id, node.config().tile.clone(), &node.config().endpoint)
            .map_err(|e| SimError::Runtime(e.to_string()))?;
    }

    let mut metrics = RunMetrics {
        seed: s.seed,
        provisioning,
        duration_ms: s.duration_ms,
        tick_ms: s.tick_ms,
        ingested: 0,
        accepted: 0,
        discarded_no_demand: 0,
        rejected: 0,
        unserved: 0,
        forwarded_bytes: BTreeMap::new(),
        pipelines_deployed: 0,
        pipelines_reaped: 0,
        peak_instances: 0,
        peak_refcount: 0,
        events: Vec::new(),
        handovers: BTreeMap::new(),
        serving: BTreeMap::new(),
        producer_ingest: BTreeMap::new(),
        compute_mcpu_s: BTreeMap::new(),
        compute_mcpu_ms_total: 0,
        consumers: s.consumers.iter().map(|c| (c.consumer_id.clone(), ConsumerMetrics::default())).collect(),
        unattributed_bytes: 0,
        unattributed_compute_mcpu_ms: 0,
        trials: Vec::new(),
        ticks: Vec::new(),
    };

    let mut producers: Vec<ProducerRuntime> = s
        .producers
        .iter()
        .map(|_| ProducerRuntime {
            serving: None,
            last_resolve: None,
            resolved: Vec::new(),
            sent: 0,
        })
        .collect();
    let mut consumers: Vec<ConsumerRuntime> = s
        .consumers
        .iter()
        .map(|c| ConsumerRuntime {
            roi: tilegrid::cover_roi(&c.roi, s.roi_level).expect("validated roi"),
            sub: None,
            done: false,
        })
        .collect();
    let mut sub_to_consumer: BTreeMap<String, usize> = BTreeMap::new();
    let mut trials_done = vec![false; s.hosted_services.len()];
    let mut last_heartbeat = 0u64;
    let (mut prev_accepted, mut prev_discarded, mut prev_fwd) = (0u64, 0u64, 0u64);

    for tick in 0..s.duration_ms / s.tick_ms {
        let t = tick * s.tick_ms;
        clock.set(SIM_EPOCH_MS + t);

        if t >= last_heartbeat + DEFAULT_HEARTBEAT_PERIOD_MS {
            for (id, node) in &nodes {
                let seen = node.counters().last_seen_ms;
                hub.heartbeat(ADMIN_TOKEN, id, seen).map_err(|e| SimError::Runtime(e.to_string()))?;
            }
            last_heartbeat = t;
        }

        for (i, c) in s.consumers.iter().enumerate() {
            let rt = &mut consumers[i];
            if let Some(sub) = rt.sub.clone().filter(|_| t >= c.stop_ms) {
                hub.unsubscribe(CONSUMER_TOKEN, &sub).map_err(|e| SimError::Runtime(e.to_string()))?;
                rt.sub = None;
                rt.done = true;
            }
            if !rt.done && rt.sub.is_none() && t >= c.start_ms && t < c.stop_ms {
                let cm = metrics.consumers.get_mut(&c.consumer_id).expect("seeded");
                cm.destination = Some(c.destination);
                let req = SubscribeRequest {
                    datatype: c.datatype.clone(),
                    tier: c.tier.clone(),
                    terms: c.terms,
                    roi: rt.roi.clone(),
                    destination: c.destination,
                };
                match hub.subscribe(CONSUMER_TOKEN, req) {
                    Ok(sub) => {
                        cm.matched_mecs = sub.matched_mecs.clone();
                        cm.subscription_id = Some(sub.subscription_id.clone());
                        sub_to_consumer.insert(sub.subscription_id.clone(), i);
                        rt.sub = Some(sub.subscription_id);
                    }
                    Err(e) => {
                        cm.subscribe_error = Some(e.to_string());
                        rt.done = true;
                    }
                }
            }
        }

        for (i, h) in s.hosted_services.iter().enumerate() {
            if trials_done[i] || t < h.at_ms {
                continue;
            }
            trials_done[i] = true;
            let desc = HostedServiceDescriptor {
                service_id: h.service_id.clone(),
                declared_topics: h.declared_topics.clone(),
                declared_volume_bytes: h.declared_volume_bytes,
                image_ref: h.image_ref.clone(),
                signature: vec![],
                signer_key_id: SIGNER.into(),
            };
            let desc = if h.signed { desc.sign(&key) } else { desc };
            let targets: Vec<&String> = match &h.mec_id {
                Some(m) => vec![m],
                None => nodes.keys().collect(),
            };
            for mec_id in targets {
                let mut candidate = h.behaviour.clone();
                let verdict = nodes[mec_id].deploy_hosted_service(&desc, &mut candidate);
                let mut outcome = TrialOutcome {
                    service_id: h.service_id.clone(),
                    image_ref: h.image_ref.clone(),
                    mec_id: mec_id.clone(),
                    t_ms: t,
                    trusted: verdict.is_trusted(),
                    reason: None,
                    ban_acks: None,
                };
                if let TrustVerdict::Banned { reason } = verdict {
                    outcome.reason = Some(reason.code().to_owned());
                    if !matches!(reason, BanReason::GlobalBan | BanReason::Signature { .. }) {
                        let acks = hub.propagate_ban(ADMIN_TOKEN, &h.image_ref, reason.code()).map_err(|e| SimError::Runtime(e.to_string()))?;
                        outcome.ban_acks = Some(acks);
                    }
                }
                metrics.trials.push(outcome);
            }
        }

        for (i, p) in s.producers.iter().enumerate() {
            let stop = p.stop_ms.unwrap_or(s.duration_ms);
            if t + s.tick_ms <= p.start_ms || t >= stop {
                continue;
            }
            let rt = &mut producers[i];
            if rt.last_resolve.is_none_or(|last| t >= last + p.resolve_period_ms) {
                rt.last_resolve = Some(t);
                let here = vehicle_position(p, t);
                let serving = hub.resolve_serving_mec(here).ok().map(|r| r.mec_id);
                if let Some(m) = &serving {
                    if rt.resolved.last() != Some(m) {
                        metrics.serving.entry(p.producer_id.clone()).or_default().push(ServingChange { t_ms: t, mec_id: m.clone() });
                    }
                    rt.resolved.push(m.clone());
                }
                rt.serving = serving;
            }
            let lo = ((t.max(p.start_ms) - p.start_ms) as f64 * p.rate_hz / 1000.0).ceil() as u64;
            let hi = (((t + s.tick_ms).min(stop) - p.start_ms) as f64 * p.rate_hz / 1000.0).ceil() as u64;
            for j in lo..hi {
                let at = p.start_ms + (j as f64 * 1000.0 / p.rate_hz) as u64;
                let seq = rt.sent;
                rt.sent += 1;
                let payload = make_payload(&mut rng, seq, p.payload_bytes, p.plant_private_keys, &s.blacklist);
                let Some(mec_id) = &rt.serving else {
                    metrics.unserved += 1;
                    continue;
                };
                let bytes = if p.corrupt_every.is_some_and(|n| (seq + 1).is_multiple_of(n)) {
                    b"{\"producer_id\": <corrupt>".to_vec()
                } else {
                    let mut license = p.license.clone();
                    license.expiry_ms = license.expiry_ms.map(|e| e + SIM_EPOCH_MS);
                    let true_ms = SIM_EPOCH_MS + at;
                    envelope::serialize_envelope(&Envelope {
                        producer_id: p.producer_id.clone(),
                        datatype: p.datatype.clone(),
                        timestamp_ms: true_ms.saturating_add_signed(p.clock_skew_ms),
                        clock_offset_ms: if p.declares_offset { -p.clock_skew_ms } else { 0 },
                        position: vehicle_position(p, at),
                        license,
                        payload: Payload::Structured(payload),
                        annotations: BTreeMap::new(),
                    })
                };
                let outcome = nodes[mec_id].ingest(&bytes);
                let rec = metrics
                    .producer_ingest
                    .entry(p.producer_id.clone())
                    .or_default()
                    .entry(mec_id.clone())
                    .or_default();
                rec.ingested += 1;
                if outcome == crate::mecnode::IngestOutcome::Accepted {
                    rec.accepted += 1;
                }
                rec.first_ms.get_or_insert(at);
                rec.last_ms = Some(at);
            }
        }

        let mut instances = 0u64;
        for (id, node) in &nodes {
            let summary = node.tick();
            for (ids, kind) in [(&summary.deployed, LifecycleEventKind::Deployed), (&summary.reaped, LifecycleEventKind::Reaped)] {
                for pid in ids {
                    let datatype = node.with_lifecycle(|lc| lc.instance(*pid).map(|i| i.datatype.clone()).unwrap_or_default());
                    metrics.events.push(LifecycleEvent {
                        t_ms: t,
                        mec_id: id.clone(),
                        pipeline: pid.to_string(),
                        datatype,
                        kind: kind.clone(),
                    });
                }
            }
            let (live, refs) = node.with_lifecycle(|lc| {
                let live: Vec<_> = lc.instances().filter(|i| i.is_live()).collect();
                (live.len() as u64, live.iter().map(|i| i.consumer_count() as u64).max().unwrap_or(0))
            });
            instances += live;
            metrics.peak_refcount = metrics.peak_refcount.max(refs);
        }
        metrics.peak_instances = metrics.peak_instances.max(instances);

        for (i, c) in s.consumers.iter().enumerate() {
            let Some(sub) = &consumers[i].sub else { continue };
            let received: Vec<(Envelope, u8)> = match c.destination {
                Destination::Cloud => hub
                    .collect_deliveries(CONSUMER_TOKEN, sub)
                    .map_err(|e| SimError::Runtime(e.to_string()))?
                    .into_iter()
                    .map(|e| (e, 1))
                    .collect(),
                Destination::Local => metrics.consumers[&c.consumer_id]
                    .matched_mecs
                    .iter()
                    .flat_map(|m| nodes[m].take_deliveries(sub))
                    .map(|d| ((*d.envelope).clone(), d.relay_hops))
                    .collect(),
            };
            let cm = metrics.consumers.get_mut(&c.consumer_id).expect("seeded");
            for (e, hops) in received {
                cm.received_count += 1;
                cm.received_bytes += e.size_bytes();
                cm.max_relay_hops = cm.max_relay_hops.max(hops);
                *cm.received_by_producer.entry(e.producer_id.clone()).or_default() += 1;
                let tile = tilegrid::locate(e.position, MAX_LEVEL).expect("valid level");
                if !license_permits(&e.license, &c.terms, &tile, clock.now_ms()) {
                    cm.license_violations += 1;
                }
                if envelope::count_blacklisted(&e.payload, &s.blacklist) > 0 {
                    cm.privacy_violations += 1;
                }
                if !consumers[i].roi.contains(&tilegrid::locate(e.position, s.roi_level).expect("valid level")) {
                    cm.roi_violations += 1;
                }
            }
        }

        for node in nodes.values() {
            let report = node.report_usage();
            for u in &report.consumers {
                if let Some(&ci) = sub_to_consumer.get(&u.consumer_ref) {
                    let cm = metrics.consumers.get_mut(&s.consumers[ci].consumer_id).expect("seeded");
                    cm.forwarded_bytes += u.delivered_bytes_delta;
                    cm.forwarded_count += u.forwarded_delta;
                }
            }
            hub.ingest_usage(ADMIN_TOKEN, &report).map_err(|e| SimError::Runtime(e.to_string()))?;
        }

        let (acc, disc, fwd) = nodes.values().fold((0, 0, 0), |(a, d, f), n| {
            let c = n.counters();
            (a + c.accepted, d + c.discarded_no_demand, f + c.forwarded_bytes)
        });
        metrics.ticks.push(TickRow {
            tick,
            instances,
            accepted: acc - prev_accepted,
            discarded: disc - prev_discarded,
            forwarded_bytes: fwd - prev_fwd,
        });
        (prev_accepted, prev_discarded, prev_fwd) = (acc, disc, fwd);
    }

    for (i, p) in s.producers.iter().enumerate() {
        metrics.handovers.insert(p.producer_id.clone(), count_handovers(&producers[i].resolved));
    }
    for (id, node) in &nodes {
        let c = node.counters();
        metrics.ingested += c.ingested;
        metrics.accepted += c.accepted;
        metrics.discarded_no_demand += c.discarded_no_demand;
        metrics.rejected += c.rejected;
        node.with_lifecycle(|lc| {
            for inst in lc.instances() {
                metrics.compute_mcpu_s.insert(format!("{id}/{}", inst.id), inst.compute_mcpu_s());
                metrics.compute_mcpu_ms_total += inst.compute_meter_mcpu_ms;
            }
        });
    }
    metrics.pipelines_deployed = metrics.events.iter().filter(|e| e.kind == LifecycleEventKind::Deployed).count() as u64;
    metrics.pipelines_reaped = metrics.events.iter().filter(|e| e.kind == LifecycleEventKind::Reaped).count() as u64;
    for (id, cm) in metrics.consumers.iter_mut() {
        metrics.forwarded_bytes.insert(id.clone(), cm.forwarded_bytes);
        if let Some(sub) = &cm.subscription_id {
            let bill = hub.billing_report(CONSUMER_TOKEN, sub).map_err(|e| SimError::Runtime(e.to_string()))?;
            cm.billed_bytes = bill.bytes;
            cm.billed_compute_mcpu_ms = bill.compute_mcpu_ms;
            cm.billed_compute_mcpu_s = bill.compute_mcpu_s;
        }
    }
    let un = hub.unattributed();
    metrics.unattributed_bytes = un.bytes;
    metrics.unattributed_compute_mcpu_ms = un.compute_mcpu_ms;
    Ok(metrics)
}

pub const TICKS_HEADER: &str = "tick,instances,accepted,discarded,forwarded_bytes";

/// Writes `summary.json` and `ticks.csv` into `dir`.
pub fn export_metrics(m: &RunMetrics, dir: &Path) -> Result<(), SimError> {
    let io = |e: std::io::Error| SimError::Io(format!("{}: {e}", dir.display()));
    fs::create_dir_all(dir).map_err(io)?;
    let mut summary = serde_json::to_value(m).map_err(|e| SimError::Runtime(e.to_string()))?;
    if let Value::Object(o) = &mut summary {
        o.remove("ticks");
    }
    let mut text = serde_json::to_string_pretty(&summary).map_err(|e| SimError::Runtime(e.to_string()))?;
    text.push('\n');
    fs::write(dir.join("summary.json"), text).map_err(io)?;
    let mut csv = String::from(TICKS_HEADER);
    csv.push('\n');
    for r in &m.ticks {
        csv.push_str(&format!("{},{},{},{},{}\n", r.tick, r.instances, r.accepted, r.discarded, r.forwarded_bytes));
    }
    fs::write(dir.join("ticks.csv"), csv).map_err(io)?;
    Ok(())
}
