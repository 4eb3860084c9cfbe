//! Demand-driven pipeline life cycle on one MEC node: signature checks,
//! deploy on first consumer, reuse for later ones, horizontal scaling,
//! compute metering, idle reaping and third-party trust verification.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::broker::{Broker, Subscription, TopicError, TopicName, TopicPattern};
use crate::is_name_token;
use crate::policy::{PolicyError, Reservation, ResourceDemand, ResourceLedger, SlaTier};

pub const DEFAULT_IDLE_GRACE_MS: u64 = 30_000;
pub const DEFAULT_VOLUME_TOLERANCE: f64 = 0.10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LifecycleError {
    #[error("no pipeline descriptor for datatype {0:?}")]
    UnknownDatatype(String),
    #[error("image {0:?} is banned")]
    BannedImage(String),
    #[error(transparent)]
    Resources(#[from] PolicyError),
    #[error("signer key {0:?} is not pinned")]
    UnknownSigner(String),
    #[error("signature verification failed for {0:?}")]
    SignatureInvalid(String),
    #[error("unknown pipeline instance {0}")]
    UnknownInstance(PipelineId),
    #[error("consumer {consumer:?} does not hold pipeline {instance}")]
    UnknownConsumerRef { instance: PipelineId, consumer: String },
    #[error("invalid descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("descriptor io: {0}")]
    Io(String),
}

impl LifecycleError {
    pub fn is_insufficient_resources(&self) -> bool {
        matches!(self, LifecycleError::Resources(PolicyError::InsufficientResources { .. }))
    }
}

mod hex_sig {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s.trim()).map_err(serde::de::Error::custom)
    }
}

/// Compact JSON with object keys sorted, used as the signed form.
pub fn canonical_json<T: Serialize>(value: &T) -> Vec<u8> {
    // serde_json::Map is ordered by key, so re-encoding through Value sorts.
    let v = serde_json::to_value(value).expect("serialisable descriptor");
    serde_json::to_vec(&v).expect("in-memory JSON encoding")
}

fn canonical_without_signature<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_value(value).expect("serialisable descriptor");
    if let Value::Object(map) = &mut v {
        map.remove("signature");
    }
    serde_json::to_vec(&v).expect("in-memory JSON encoding")
}

/// Pinned public keys, by key id.
#[derive(Debug, Clone, Default)]
pub struct TrustStore {
    keys: BTreeMap<String, VerifyingKey>,
}

impl TrustStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pin(&mut self, key_id: impl Into<String>, key: VerifyingKey) {
        self.keys.insert(key_id.into(), key);
    }

    pub fn get(&self, key_id: &str) -> Option<&VerifyingKey> {
        self.keys.get(key_id)
    }

    /// Builds a store from `key id -> hex public key` pairs.
    pub fn from_hex_map(map: &BTreeMap<String, String>) -> Result<Self, LifecycleError> {
        let mut store = Self::new();
        for (id, hex_key) in map {
            let bytes: [u8; 32] = hex::decode(hex_key)
                .ok()
                .and_then(|b| b.try_into().ok())
                .ok_or_else(|| LifecycleError::InvalidDescriptor(format!("bad public key for {id:?}")))?;
            let key = VerifyingKey::from_bytes(&bytes)
                .map_err(|e| LifecycleError::InvalidDescriptor(format!("bad public key for {id:?}: {e}")))?;
            store.pin(id.clone(), key);
        }
        Ok(store)
    }

    pub fn to_hex_map(&self) -> BTreeMap<String, String> {
        self.keys.iter().map(|(k, v)| (k.clone(), hex::encode(v.as_bytes()))).collect()
    }
}

/// Deterministic Ed25519 key from a 32-byte seed.
pub fn signing_key_from_seed(seed: [u8; 32]) -> SigningKey {
    SigningKey::from_bytes(&seed)
}

pub fn sign_bytes(key: &SigningKey, bytes: &[u8]) -> Vec<u8> {
    key.sign(bytes).to_bytes().to_vec()
}

/// True iff `signature` is valid for `canonical` under the key pinned as `signer_key_id`.
pub fn verify_signature(canonical: &[u8], signature: &[u8], signer_key_id: &str, trust: &TrustStore) -> Result<bool, LifecycleError> {
    let key = trust
        .get(signer_key_id)
        .ok_or_else(|| LifecycleError::UnknownSigner(signer_key_id.to_owned()))?;
    let Ok(sig) = Signature::from_slice(signature) else {
        return Ok(false);
    };
    Ok(key.verify(canonical, &sig).is_ok())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineDescriptor {
    pub datatype: String,
    pub image_ref: String,
    #[serde(with = "hex_sig", default)]
    pub signature: Vec<u8>,
    pub signer_key_id: String,
    pub per_replica_capacity_msgs_per_s: f64,
}

impl PipelineDescriptor {
    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical_without_signature(self)
    }

    pub fn sign(mut self, key: &SigningKey) -> Self {
        self.signature = sign_bytes(key, &self.canonical_bytes());
        self
    }

    pub fn validate(&self) -> Result<(), LifecycleError> {
        if !is_name_token(&self.datatype) {
            return Err(LifecycleError::InvalidDescriptor(format!("datatype {:?}", self.datatype)));
        }
        if self.image_ref.is_empty() {
            return Err(LifecycleError::InvalidDescriptor("empty image_ref".into()));
        }
        if !(self.per_replica_capacity_msgs_per_s.is_finite() && self.per_replica_capacity_msgs_per_s > 0.0) {
            return Err(LifecycleError::InvalidDescriptor("per-replica capacity must be positive".into()));
        }
        Ok(())
    }

    pub fn verify(&self, trust: &TrustStore) -> Result<bool, LifecycleError> {
        verify_signature(&self.canonical_bytes(), &self.signature, &self.signer_key_id, trust)
    }
}

/// Reads a canonical descriptor document and its `<path>.sig` hex sidecar.
pub fn load_descriptor(path: &Path) -> Result<PipelineDescriptor, LifecycleError> {
    let body = std::fs::read(path).map_err(|e| LifecycleError::Io(format!("{}: {e}", path.display())))?;
    let mut sig_path = path.as_os_str().to_owned();
    sig_path.push(".sig");
    let sig_hex = std::fs::read_to_string(&sig_path).map_err(|e| LifecycleError::Io(format!("{}: {e}", Path::new(&sig_path).display())))?;
    let mut desc: PipelineDescriptor = serde_json::from_slice(&body).map_err(|e| LifecycleError::InvalidDescriptor(e.to_string()))?;
    desc.signature = hex::decode(sig_hex.trim()).map_err(|e| LifecycleError::InvalidDescriptor(format!("signature: {e}")))?;
    desc.validate()?;
    Ok(desc)
}

/// Writes the canonical descriptor body to `path` and the hex signature to `<path>.sig`.
pub fn write_descriptor(path: &Path, desc: &PipelineDescriptor) -> Result<(), LifecycleError> {
    std::fs::write(path, desc.canonical_bytes()).map_err(|e| LifecycleError::Io(e.to_string()))?;
    let mut sig_path = path.as_os_str().to_owned();
    sig_path.push(".sig");
    std::fs::write(sig_path, hex::encode(&desc.signature)).map_err(|e| LifecycleError::Io(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostedServiceDescriptor {
    pub service_id: String,
    pub declared_topics: BTreeSet<TopicName>,
    pub declared_volume_bytes: u64,
    pub image_ref: String,
    #[serde(with = "hex_sig", default)]
    pub signature: Vec<u8>,
    pub signer_key_id: String,
}

impl HostedServiceDescriptor {
    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical_without_signature(self)
    }

    pub fn sign(mut self, key: &SigningKey) -> Self {
        self.signature = sign_bytes(key, &self.canonical_bytes());
        self
    }

    pub fn verify(&self, trust: &TrustStore) -> Result<bool, LifecycleError> {
        verify_signature(&self.canonical_bytes(), &self.signature, &self.signer_key_id, trust)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BanEntry {
    pub reason: String,
    pub at_ms: u64,
}

/// Append-only set of banned image references.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BanList {
    entries: BTreeMap<String, BanEntry>,
}

impl BanList {
    /// Returns false if the ref was already banned; the first reason is kept.
    pub fn ban(&mut self, image_ref: &str, reason: &str, at_ms: u64) -> bool {
        if self.entries.contains_key(image_ref) {
            return false;
        }
        self.entries.insert(
            image_ref.to_owned(),
            BanEntry {
                reason: reason.to_owned(),
                at_ms,
            },
        );
        true
    }

    pub fn is_banned(&self, image_ref: &str) -> bool {
        self.entries.contains_key(image_ref)
    }

    pub fn get(&self, image_ref: &str) -> Option<&BanEntry> {
        self.entries.get(image_ref)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &BanEntry)> {
        self.entries.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PipelineId(pub u64);

impl fmt::Display for PipelineId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pipe-{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PipelineState {
    Verifying,
    Deploying,
    Running,
    Draining,
    Terminated,
}

impl PipelineState {
    fn can_move_to(self, next: PipelineState) -> bool {
        use PipelineState::*;
        matches!(
            (self, next),
            (Verifying, Deploying) | (Deploying, Running) | (Running, Draining) | (Draining, Terminated) | (Verifying, Terminated) | (Deploying, Terminated)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineInstance {
    pub id: PipelineId,
    pub datatype: String,
    pub image_ref: String,
    pub state: PipelineState,
    pub replicas: u32,
    /// Consumer refs holding this pipeline, with the tier each subscribed at.
    pub consumers: BTreeMap<String, SlaTier>,
    /// Per-replica reservation profile, fixed by the tier that deployed it.
    pub profile: ResourceDemand,
    pub reservation: Option<Reservation>,
    pub compute_meter_mcpu_ms: u64,
    pub idle_since_ms: Option<u64>,
    pub created_ms: u64,
    pub terminated_ms: Option<u64>,
    pub per_replica_capacity_msgs_per_s: f64,
    pub history: Vec<PipelineState>,
    last_metered_ms: u64,
}

impl PipelineInstance {
    fn transition(&mut self, next: PipelineState) {
        assert!(self.state.can_move_to(next), "illegal transition {:?} -> {:?}", self.state, next);
        self.state = next;
        self.history.push(next);
    }

    pub fn is_live(&self) -> bool {
        self.state != PipelineState::Terminated
    }

    pub fn compute_mcpu_s(&self) -> f64 {
        self.compute_meter_mcpu_ms as f64 / 1000.0
    }

    pub fn consumer_count(&self) -> usize {
        self.consumers.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifecycleConfig {
    pub idle_grace_ms: u64,
    pub volume_tolerance: f64,
    /// Messages per declared topic pushed at a hosted-service candidate.
    pub synthetic_messages_per_topic: u32,
    pub synthetic_message_bytes: u32,
}

impl Default for LifecycleConfig {
    fn default() -> Self {
        Self {
            idle_grace_ms: DEFAULT_IDLE_GRACE_MS,
            volume_tolerance: DEFAULT_VOLUME_TOLERANCE,
            synthetic_messages_per_topic: 10,
            synthetic_message_bytes: 256,
        }
    }
}

/// Isolated broker handed to a hosted-service candidate during its trust run.
/// Records what the candidate subscribes to and how many bytes it publishes.
pub struct Sandbox {
    broker: Broker<Arc<[u8]>>,
    subscriptions: Vec<Subscription<Arc<[u8]>>>,
    subscribed: BTreeSet<String>,
    published_bytes: u64,
}

impl Sandbox {
    fn new() -> Self {
        Self {
            broker: Broker::new(),
            subscriptions: Vec::new(),
            subscribed: BTreeSet::new(),
            published_bytes: 0,
        }
    }

    pub fn subscribe(&mut self, pattern: &str) -> Result<(), TopicError> {
        let p = TopicPattern::parse(pattern)?;
        self.subscribed.insert(p.as_str().to_owned());
        self.subscriptions.push(self.broker.subscribe(p, 1 << 16));
        Ok(())
    }

    pub fn publish(&mut self, topic: &str, payload: Arc<[u8]>) -> Result<usize, TopicError> {
        let t = TopicName::parse(topic)?;
        self.published_bytes += payload.len() as u64;
        Ok(self.broker.publish(&t, payload))
    }

    pub fn subscribed(&self) -> &BTreeSet<String> {
        &self.subscribed
    }

    pub fn published_bytes(&self) -> u64 {
        self.published_bytes
    }

    fn take_inbox(&mut self) -> Vec<(TopicName, Arc<[u8]>)> {
        self.subscriptions.iter().flat_map(|s| s.drain()).collect()
    }
}

/// A third-party workload as seen by the trust run.
pub trait HostedService {
    /// Called once before the synthetic feed starts.
    fn start(&mut self, sandbox: &mut Sandbox) -> Result<(), String>;
    /// Called for every synthetic message delivered to one of its subscriptions.
    fn on_message(&mut self, topic: &TopicName, payload: &[u8], sandbox: &mut Sandbox) -> Result<(), String>;
}

/// Data-driven candidate behaviour for simulations and the CLI.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ScriptedService {
    pub subscribes: Vec<String>,
    #[serde(default)]
    pub publish_topic: Option<String>,
    /// Bytes published once at start-up.
    #[serde(default)]
    pub publish_bytes: u64,
    /// Bytes published per synthetic input received.
    #[serde(default)]
    pub bytes_per_input: u64,
    #[serde(default)]
    pub crash: bool,
}

const SCRIPT_CHUNK: usize = 1 << 20;

impl ScriptedService {
    fn emit(&self, sandbox: &mut Sandbox, mut bytes: u64) -> Result<(), String> {
        let Some(topic) = &self.publish_topic else {
            return Ok(());
        };
        let chunk: Arc<[u8]> = Arc::from(vec![0u8; SCRIPT_CHUNK]);
        while bytes > 0 {
            let n = bytes.min(SCRIPT_CHUNK as u64) as usize;
            let payload = if n == SCRIPT_CHUNK { Arc::clone(&chunk) } else { Arc::from(vec![0u8; n]) };
            sandbox.publish(topic, payload).map_err(|e| e.to_string())?;
            bytes -= n as u64;
        }
        Ok(())
    }
}

impl HostedService for ScriptedService {
    fn start(&mut self, sandbox: &mut Sandbox) -> Result<(), String> {
        if self.crash {
            return Err("candidate exited during start-up".into());
        }
        for p in &self.subscribes {
            sandbox.subscribe(p).map_err(|e| e.to_string())?;
        }
        self.emit(sandbox, self.publish_bytes)
    }

    fn on_message(&mut self, _topic: &TopicName, _payload: &[u8], sandbox: &mut Sandbox) -> Result<(), String> {
        self.emit(sandbox, self.bytes_per_input)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "kebab-case")]
pub enum BanReason {
    UndeclaredTopic { topics: Vec<String> },
    VolumeMismatch { declared: u64, measured: u64 },
    Crash { message: String },
    Signature { message: String },
    GlobalBan,
}

impl BanReason {
    pub fn code(&self) -> &'static str {
        match self {
            BanReason::UndeclaredTopic { .. } => "undeclared-topic",
            BanReason::VolumeMismatch { .. } => "volume-mismatch",
            BanReason::Crash { .. } => "crash",
            BanReason::Signature { .. } => "signature",
            BanReason::GlobalBan => "global-ban",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "kebab-case")]
pub enum TrustVerdict {
    Trusted { subscribed: Vec<String>, measured_bytes: u64 },
    Banned { reason: BanReason },
}

impl TrustVerdict {
    pub fn is_trusted(&self) -> bool {
        matches!(self, TrustVerdict::Trusted { .. })
    }
}

/// Runs a candidate against a synthetic feed in an isolated broker and checks
/// its subscriptions and published volume against the declaration.
pub fn verify_hosted_service(desc: &HostedServiceDescriptor, candidate: &mut dyn HostedService, config: &LifecycleConfig) -> TrustVerdict {
    let mut sandbox = Sandbox::new();
    if let Err(message) = candidate.start(&mut sandbox) {
        return TrustVerdict::Banned {
            reason: BanReason::Crash { message },
        };
    }
    let synthetic: Arc<[u8]> = Arc::from(vec![b's'; config.synthetic_message_bytes as usize]);
    for topic in &desc.declared_topics {
        for _ in 0..config.synthetic_messages_per_topic {
            sandbox.broker.publish(topic, Arc::clone(&synthetic));
        }
    }
    // Outputs published while handling the feed may land on the candidate's
    // own subscriptions; keep delivering until the inbox is quiet.
    let mut rounds = 0;
    loop {
        let inbox = sandbox.take_inbox();
        if inbox.is_empty() || rounds > 64 {
            break;
        }
        rounds += 1;
        for (topic, payload) in inbox {
            if let Err(message) = candidate.on_message(&topic, &payload, &mut sandbox) {
                return TrustVerdict::Banned {
                    reason: BanReason::Crash { message },
                };
            }
        }
    }

    let declared: BTreeSet<&str> = desc.declared_topics.iter().map(TopicName::as_str).collect();
    let undeclared: Vec<String> = sandbox
        .subscribed()
        .iter()
        .filter(|p| !declared.contains(p.as_str()))
        .cloned()
        .collect();
    if !undeclared.is_empty() {
        return TrustVerdict::Banned {
            reason: BanReason::UndeclaredTopic { topics: undeclared },
        };
    }
    let measured = sandbox.published_bytes();
    let declared_bytes = desc.declared_volume_bytes;
    let deviation = measured.abs_diff(declared_bytes) as f64;
    if deviation > config.volume_tolerance * declared_bytes as f64 {
        return TrustVerdict::Banned {
            reason: BanReason::VolumeMismatch {
                declared: declared_bytes,
                measured,
            },
        };
    }
    TrustVerdict::Trusted {
        subscribed: sandbox.subscribed().iter().cloned().collect(),
        measured_bytes: measured,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LifecycleMetrics {
    pub instances_by_state: BTreeMap<String, u64>,
    pub live_instances: u64,
    pub reserved: ResourceDemand,
    pub saturation_count: u64,
    pub compute_mcpu_ms_total: u64,
    pub deployed_total: u64,
    pub reaped_total: u64,
    pub hosted_trusted: u64,
    pub hosted_banned: u64,
}

/// Owns every pipeline on one node. Not internally synchronised: the node
/// runs it behind a single lock so state changes are serialised.
pub struct LifecycleManager {
    config: LifecycleConfig,
    descriptors: BTreeMap<String, PipelineDescriptor>,
    trust: TrustStore,
    bans: BanList,
    ledger: ResourceLedger,
    instances: BTreeMap<PipelineId, PipelineInstance>,
    hosted: BTreeMap<String, HostedServiceDescriptor>,
    next_id: u64,
    saturation_count: u64,
    deployed_total: u64,
    reaped_total: u64,
    hosted_banned: u64,
}

impl LifecycleManager {
    pub fn new(config: LifecycleConfig, trust: TrustStore, ledger: ResourceLedger) -> Self {
        Self {
            config,
            descriptors: BTreeMap::new(),
            trust,
            bans: BanList::default(),
            ledger,
            instances: BTreeMap::new(),
            hosted: BTreeMap::new(),
            next_id: 1,
            saturation_count: 0,
            deployed_total: 0,
            reaped_total: 0,
            hosted_banned: 0,
        }
    }

    pub fn config(&self) -> &LifecycleConfig {
        &self.config
    }

    pub fn register_descriptor(&mut self, desc: PipelineDescriptor) -> Result<(), LifecycleError> {
        desc.validate()?;
        self.descriptors.insert(desc.datatype.clone(), desc);
        Ok(())
    }

    pub fn descriptor(&self, datatype: &str) -> Option<&PipelineDescriptor> {
        self.descriptors.get(datatype)
    }

    pub fn bans(&self) -> &BanList {
        &self.bans
    }

    /// Records a ban. Returns true if it was new.
    pub fn apply_ban(&mut self, image_ref: &str, reason: &str, now_ms: u64) -> bool {
        self.bans.ban(image_ref, reason, now_ms)
    }

    pub fn ledger(&self) -> &ResourceLedger {
        &self.ledger
    }

    pub fn instance(&self, id: PipelineId) -> Option<&PipelineInstance> {
        self.instances.get(&id)
    }

    pub fn instances(&self) -> impl Iterator<Item = &PipelineInstance> {
        self.instances.values()
    }

    pub fn live_instance_for(&self, datatype: &str) -> Option<&PipelineInstance> {
        self.instances.values().find(|i| i.is_live() && i.datatype == datatype)
    }

    pub fn running_instance_for(&self, datatype: &str) -> Option<&PipelineInstance> {
        self.instances
            .values()
            .find(|i| i.state == PipelineState::Running && i.datatype == datatype)
    }

    pub fn saturation_count(&self) -> u64 {
        self.saturation_count
    }

    /// Attaches `consumer_ref` to the pipeline for `datatype`, deploying one
    /// if none is live.
    pub fn acquire_pipeline(&mut self, datatype: &str, tier: &SlaTier, consumer_ref: &str, now_ms: u64) -> Result<PipelineId, LifecycleError> {
        let desc = self
            .descriptors
            .get(datatype)
            .ok_or_else(|| LifecycleError::UnknownDatatype(datatype.to_owned()))?
            .clone();
        if self.bans.is_banned(&desc.image_ref) {
            return Err(LifecycleError::BannedImage(desc.image_ref));
        }
        if let Some(inst) = self.instances.values_mut().find(|i| i.is_live() && i.datatype == datatype) {
            inst.consumers.insert(consumer_ref.to_owned(), tier.clone());
            inst.idle_since_ms = None;
            return Ok(inst.id);
        }

        let id = PipelineId(self.next_id);
        self.next_id += 1;
        let mut inst = PipelineInstance {
            id,
            datatype: datatype.to_owned(),
            image_ref: desc.image_ref.clone(),
            state: PipelineState::Verifying,
            replicas: 1,
            consumers: BTreeMap::new(),
            profile: tier.demand(),
            reservation: None,
            compute_meter_mcpu_ms: 0,
            idle_since_ms: None,
            created_ms: now_ms,
            terminated_ms: None,
            per_replica_capacity_msgs_per_s: desc.per_replica_capacity_msgs_per_s,
            history: vec![PipelineState::Verifying],
            last_metered_ms: now_ms,
        };

        let verified = desc.verify(&self.trust);
        if !matches!(verified, Ok(true)) {
            inst.transition(PipelineState::Terminated);
            inst.terminated_ms = Some(now_ms);
            self.instances.insert(id, inst);
            return Err(match verified {
                Err(e) => e,
                _ => LifecycleError::SignatureInvalid(desc.image_ref),
            });
        }
        inst.transition(PipelineState::Deploying);
        match self.ledger.admit(tier) {
            Ok(res) => inst.reservation = Some(res),
            Err(e) => {
                inst.transition(PipelineState::Terminated);
                inst.terminated_ms = Some(now_ms);
                self.instances.insert(id, inst);
                return Err(e.into());
            }
        }
        inst.transition(PipelineState::Running);
        inst.consumers.insert(consumer_ref.to_owned(), tier.clone());
        self.deployed_total += 1;
        self.instances.insert(id, inst);
        Ok(id)
    }

    pub fn release_pipeline(&mut self, id: PipelineId, consumer_ref: &str, now_ms: u64) -> Result<PipelineState, LifecycleError> {
        let inst = self.instances.get_mut(&id).ok_or(LifecycleError::UnknownInstance(id))?;
        if inst.consumers.remove(consumer_ref).is_none() {
            return Err(LifecycleError::UnknownConsumerRef {
                instance: id,
                consumer: consumer_ref.to_owned(),
            });
        }
        if inst.consumers.is_empty() {
            inst.idle_since_ms = Some(now_ms);
        }
        Ok(inst.state)
    }

    /// Terminates every running instance idle for at least the grace period.
    pub fn reap_idle(&mut self, now_ms: u64) -> Vec<PipelineId> {
        let grace = self.config.idle_grace_ms;
        let mut reaped = Vec::new();
        for inst in self.instances.values_mut() {
            let expired = inst.state == PipelineState::Running
                && inst.consumers.is_empty()
                && inst.idle_since_ms.is_some_and(|t| now_ms.saturating_sub(t) >= grace);
            if !expired {
                continue;
            }
            inst.transition(PipelineState::Draining);
            if let Some(res) = inst.reservation.take() {
                self.ledger.release(res.id).expect("live reservation");
            }
            inst.transition(PipelineState::Terminated);
            inst.terminated_ms = Some(now_ms);
            self.reaped_total += 1;
            reaped.push(inst.id);
        }
        reaped
    }

    /// Sets the replica count from the observed ingest rate, bounded by the
    /// strictest tier among current consumers and by free capacity.
    pub fn autoscale(&mut self, id: PipelineId, observed_msgs_per_s: f64) -> Result<u32, LifecycleError> {
        let inst = self.instances.get_mut(&id).ok_or(LifecycleError::UnknownInstance(id))?;
        if inst.state != PipelineState::Running {
            return Ok(inst.replicas);
        }
        let needed = (observed_msgs_per_s.max(0.0) / inst.per_replica_capacity_msgs_per_s).ceil();
        let needed = if needed.is_finite() { needed.max(1.0).min(u32::MAX as f64) as u32 } else { 1 };
        let ceiling = inst.consumers.values().map(|t| t.max_replicas).min().unwrap_or(1).max(1);
        let target = needed.clamp(1, ceiling);
        if target == inst.replicas {
            return Ok(target);
        }
        let res_id = inst.reservation.expect("running instance holds a reservation").id;
        let mut chosen = None;
        if target < inst.replicas {
            chosen = Some(target);
        } else {
            for k in (inst.replicas + 1..=target).rev() {
                if self.ledger.resize(res_id, inst.profile.scaled(k)).is_ok() {
                    chosen = Some(k);
                    break;
                }
            }
            if chosen != Some(target) {
                self.saturation_count += 1;
            }
        }
        if let Some(k) = chosen {
            if k < inst.replicas {
                self.ledger.resize(res_id, inst.profile.scaled(k)).expect("shrinking always fits");
            }
            inst.replicas = k;
            inst.reservation = Some(Reservation {
                id: res_id,
                demand: inst.profile.scaled(k),
            });
        }
        Ok(inst.replicas)
    }

    /// Adds `replicas · cpu · elapsed` to the instance's meter (mCPU·ms).
    pub fn meter_compute(&mut self, id: PipelineId, elapsed_ms: u64) -> Result<u64, LifecycleError> {
        let inst = self.instances.get_mut(&id).ok_or(LifecycleError::UnknownInstance(id))?;
        if inst.state == PipelineState::Running {
            inst.compute_meter_mcpu_ms += u64::from(inst.replicas) * inst.profile.cpu_millicores * elapsed_ms;
        }
        Ok(inst.compute_meter_mcpu_ms)
    }

    /// Meters every running instance up to `now_ms`. Returns per-instance increments.
    pub fn meter_all(&mut self, now_ms: u64) -> BTreeMap<PipelineId, u64> {
        let mut out = BTreeMap::new();
        let ids: Vec<PipelineId> = self
            .instances
            .values()
            .filter(|i| i.state == PipelineState::Running)
            .map(|i| i.id)
            .collect();
        for id in ids {
            let inst = &self.instances[&id];
            let elapsed = now_ms.saturating_sub(inst.last_metered_ms);
            let before = inst.compute_meter_mcpu_ms;
            let after = self.meter_compute(id, elapsed).expect("known id");
            self.instances.get_mut(&id).expect("known id").last_metered_ms = now_ms;
            out.insert(id, after - before);
        }
        out
    }

    /// Signature check, ban check and sandboxed trust run for a third-party
    /// service. A failed trust run bans the image on this node.
    pub fn deploy_hosted_service(&mut self, desc: &HostedServiceDescriptor, candidate: &mut dyn HostedService, now_ms: u64) -> TrustVerdict {
        if self.bans.is_banned(&desc.image_ref) {
            return TrustVerdict::Banned {
                reason: BanReason::GlobalBan,
            };
        }
        let verdict = match desc.verify(&self.trust) {
            Ok(true) => verify_hosted_service(desc, candidate, &self.config),
            Ok(false) => TrustVerdict::Banned {
                reason: BanReason::Signature {
                    message: "signature does not verify".into(),
                },
            },
            Err(e) => TrustVerdict::Banned {
                reason: BanReason::Signature { message: e.to_string() },
            },
        };
        match &verdict {
            TrustVerdict::Trusted { .. } => {
                self.hosted.insert(desc.service_id.clone(), desc.clone());
            }
            TrustVerdict::Banned { reason } => {
                self.hosted_banned += 1;
                // Unsigned or mis-signed images are refused without a global ban:
                // the trust checks never ran.
                if !matches!(reason, BanReason::Signature { .. }) {
                    self.bans.ban(&desc.image_ref, reason.code(), now_ms);
                }
            }
        }
        verdict
    }

    pub fn hosted_services(&self) -> impl Iterator<Item = &HostedServiceDescriptor> {
        self.hosted.values()
    }

    pub fn metrics(&self) -> LifecycleMetrics {
        let mut m = LifecycleMetrics::default();
        for inst in self.instances.values() {
            *m.instances_by_state.entry(format!("{:?}", inst.state)).or_default() += 1;
            if inst.is_live() {
                m.live_instances += 1;
            }
            m.compute_mcpu_ms_total += inst.compute_meter_mcpu_ms;
        }
        for (_, d) in self.ledger.outstanding() {
            m.reserved.cpu_millicores += d.cpu_millicores;
            m.reserved.memory_mb += d.memory_mb;
            m.reserved.gpu_units += d.gpu_units;
        }
        m.saturation_count = self.saturation_count;
        m.deployed_total = self.deployed_total;
        m.reaped_total = self.reaped_total;
        m.hosted_trusted = self.hosted.len() as u64;
        m.hosted_banned = self.hosted_banned;
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{Capacity, SamplingRate};

    fn key() -> SigningKey {
        signing_key_from_seed([7u8; 32])
    }

    fn trust() -> TrustStore {
        let mut t = TrustStore::new();
        t.pin("ops", key().verifying_key());
        t
    }

    fn descriptor(datatype: &str, image: &str) -> PipelineDescriptor {
        PipelineDescriptor {
            datatype: datatype.into(),
            image_ref: image.into(),
            signature: vec![],
            signer_key_id: "ops".into(),
            per_replica_capacity_msgs_per_s: 50.0,
        }
        .sign(&key())
    }

    fn tier(name: &str, cpu: u64, max_replicas: u32) -> SlaTier {
        SlaTier {
            name: name.into(),
            sampling_rate: SamplingRate::ONE,
            cpu_millicores: cpu,
            memory_mb: 256,
            gpu: false,
            max_replicas,
        }
    }

    fn manager(cpu: u64) -> LifecycleManager {
        let mut m = LifecycleManager::new(LifecycleConfig::default(), trust(), ResourceLedger::new(Capacity::new(cpu, 8192, 0)));
        m.register_descriptor(descriptor("cam", "registry/cam-pipe:1")).unwrap();
        m.register_descriptor(descriptor("video", "registry/video-pipe:1")).unwrap();
        m
    }

    #[test]
    fn signature_examples() {
        let d = descriptor("cam", "img");
        assert!(verify_signature(&d.canonical_bytes(), &d.signature, "ops", &trust()).unwrap());
        let mut tampered = d.canonical_bytes();
        tampered[3] ^= 1;
        assert!(!verify_signature(&tampered, &d.signature, "ops", &trust()).unwrap());
        assert_eq!(
            verify_signature(&d.canonical_bytes(), &d.signature, "stranger", &trust()),
            Err(LifecycleError::UnknownSigner("stranger".into()))
        );
        assert!(!verify_signature(&d.canonical_bytes(), b"short", "ops", &trust()).unwrap());
    }

    #[test]
    fn canonical_bytes_are_sorted_compact() {
        let d = descriptor("cam", "img");
        let s = String::from_utf8(d.canonical_bytes()).unwrap();
        assert_eq!(s, r#"{"datatype":"cam","image_ref":"img","per_replica_capacity_msgs_per_s":50.0,"signer_key_id":"ops"}"#);
    }

    #[test]
    fn first_consumer_deploys_second_reuses() {
        let mut m = manager(4000);
        let a = m.acquire_pipeline("cam", &tier("small", 250, 2), "c1", 0).unwrap();
        let inst = m.instance(a).unwrap();
        assert_eq!(inst.state, PipelineState::Running);
        assert_eq!(inst.history, vec![PipelineState::Verifying, PipelineState::Deploying, PipelineState::Running]);
        assert_eq!(inst.consumer_count(), 1);
        let b = m.acquire_pipeline("cam", &tier("large", 1000, 4), "c2", 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(m.instance(a).unwrap().consumer_count(), 2);
        assert_eq!(m.ledger().free().cpu_millicores_free, 3750);
    }

    #[test]
    fn acquire_errors() {
        let mut m = manager(100);
        assert_eq!(m.acquire_pipeline("lidar", &tier("s", 50, 1), "c", 0), Err(LifecycleError::UnknownDatatype("lidar".into())));
        let err = m.acquire_pipeline("cam", &tier("s", 500, 1), "c", 0).unwrap_err();
        assert!(err.is_insufficient_resources());
        assert!(m.live_instance_for("cam").is_none());
        m.apply_ban("registry/cam-pipe:1", "test", 0);
        assert_eq!(
            m.acquire_pipeline("cam", &tier("s", 50, 1), "c", 0),
            Err(LifecycleError::BannedImage("registry/cam-pipe:1".into()))
        );
    }

    #[test]
    fn tampered_descriptor_never_runs() {
        let mut m = manager(4000);
        let mut d = descriptor("denm", "img/denm");
        d.image_ref = "img/evil".into();
        m.register_descriptor(d).unwrap();
        assert!(matches!(m.acquire_pipeline("denm", &tier("s", 50, 1), "c", 0), Err(LifecycleError::SignatureInvalid(_))));
        let failed = m.instances().find(|i| i.datatype == "denm").unwrap();
        assert_eq!(failed.history, vec![PipelineState::Verifying, PipelineState::Terminated]);
        assert_eq!(m.ledger().free().cpu_millicores_free, 4000);
    }

    #[test]
    fn release_and_reap() {
        let mut m = manager(1000);
        let id = m.acquire_pipeline("cam", &tier("s", 500, 1), "c1", 0).unwrap();
        m.acquire_pipeline("cam", &tier("s", 500, 1), "c2", 0).unwrap();
        assert_eq!(m.release_pipeline(id, "c1", 1_000).unwrap(), PipelineState::Running);
        assert!(m.instance(id).unwrap().idle_since_ms.is_none());
        assert!(matches!(m.release_pipeline(id, "nobody", 1_000), Err(LifecycleError::UnknownConsumerRef { .. })));
        m.release_pipeline(id, "c2", 1_000).unwrap();
        assert_eq!(m.instance(id).unwrap().idle_since_ms, Some(1_000));
        assert!(m.reap_idle(1_000 + 29_999).is_empty());
        assert_eq!(m.reap_idle(1_000 + 31_000), vec![id]);
        let inst = m.instance(id).unwrap();
        assert_eq!(inst.state, PipelineState::Terminated);
        assert_eq!(inst.history.last(), Some(&PipelineState::Terminated));
        assert!(inst.history.contains(&PipelineState::Draining));
        assert_eq!(m.ledger().free(), m.ledger().total());
        assert!(m.reap_idle(100_000).is_empty());
    }

    #[test]
    fn reacquire_within_grace_cancels_idle() {
        let mut m = manager(1000);
        let id = m.acquire_pipeline("cam", &tier("s", 500, 1), "c1", 0).unwrap();
        m.release_pipeline(id, "c1", 10).unwrap();
        assert_eq!(m.acquire_pipeline("cam", &tier("s", 500, 1), "c2", 20).unwrap(), id);
        assert!(m.reap_idle(1_000_000).is_empty());
    }

    #[test]
    fn reap_two_idle() {
        let mut m = manager(4000);
        let a = m.acquire_pipeline("cam", &tier("s", 500, 1), "c1", 0).unwrap();
        let b = m.acquire_pipeline("video", &tier("s", 500, 1), "c2", 0).unwrap();
        m.release_pipeline(a, "c1", 0).unwrap();
        m.release_pipeline(b, "c2", 0).unwrap();
        assert_eq!(m.reap_idle(30_000), vec![a, b]);
    }

    #[test]
    fn autoscale_examples() {
        let mut m = manager(10_000);
        let id = m.acquire_pipeline("cam", &tier("s", 500, 3), "c1", 0).unwrap();
        assert_eq!(m.autoscale(id, 90.0).unwrap(), 2);
        assert_eq!(m.ledger().free().cpu_millicores_free, 9000);
        assert_eq!(m.autoscale(id, 10.0).unwrap(), 1);
        assert_eq!(m.ledger().free().cpu_millicores_free, 9500);
        assert_eq!(m.autoscale(id, 250.0).unwrap(), 3);
        assert_eq!(m.saturation_count(), 0);
    }

    #[test]
    fn autoscale_saturates_on_capacity() {
        let mut m = manager(1200);
        let id = m.acquire_pipeline("cam", &tier("s", 500, 4), "c1", 0).unwrap();
        assert_eq!(m.autoscale(id, 200.0).unwrap(), 2);
        assert_eq!(m.saturation_count(), 1);
        assert_eq!(m.ledger().free().cpu_millicores_free, 200);
    }

    #[test]
    fn autoscale_uses_strictest_consumer_tier() {
        let mut m = manager(10_000);
        let id = m.acquire_pipeline("cam", &tier("big", 500, 5), "c1", 0).unwrap();
        m.acquire_pipeline("cam", &tier("tiny", 500, 2), "c2", 0).unwrap();
        assert_eq!(m.autoscale(id, 1000.0).unwrap(), 2);
    }

    #[test]
    fn meter_examples() {
        let mut m = manager(10_000);
        let id = m.acquire_pipeline("cam", &tier("s", 500, 3), "c1", 0).unwrap();
        assert_eq!(m.meter_compute(id, 2000).unwrap(), 1_000_000);
        assert_eq!(m.meter_compute(id, 0).unwrap(), 1_000_000);
        assert_eq!(m.instance(id).unwrap().compute_mcpu_s(), 1000.0);

        let vid = m.acquire_pipeline("video", &tier("s", 250, 3), "c1", 0).unwrap();
        m.autoscale(vid, 150.0).unwrap();
        assert_eq!(m.meter_compute(vid, 4000).unwrap(), 3_000_000);
    }

    fn hosted(declared: &[&str], volume: u64) -> HostedServiceDescriptor {
        HostedServiceDescriptor {
            service_id: "twin".into(),
            declared_topics: declared.iter().map(|t| TopicName::parse(t).unwrap()).collect(),
            declared_volume_bytes: volume,
            image_ref: "thirdparty/twin:1".into(),
            signature: vec![],
            signer_key_id: "ops".into(),
        }
        .sign(&key())
    }

    const MB: u64 = 1_000_000;

    #[test]
    fn trust_examples() {
        let cfg = LifecycleConfig::default();
        let desc = hosted(&["mec/m1/proc/cam"], 100 * MB);
        let mut sneaky = ScriptedService {
            subscribes: vec!["mec/m1/proc/cam".into(), "mec/m1/raw/cam".into()],
            publish_topic: Some("apps/twin".into()),
            publish_bytes: 100 * MB,
            ..Default::default()
        };
        assert_eq!(
            verify_hosted_service(&desc, &mut sneaky, &cfg),
            TrustVerdict::Banned {
                reason: BanReason::UndeclaredTopic {
                    topics: vec!["mec/m1/raw/cam".into()]
                }
            }
        );
        let mut close = ScriptedService {
            subscribes: vec!["mec/m1/proc/cam".into()],
            publish_topic: Some("apps/twin".into()),
            publish_bytes: 104 * MB,
            ..Default::default()
        };
        assert!(verify_hosted_service(&desc, &mut close, &cfg).is_trusted());
        let mut loud = ScriptedService {
            publish_bytes: 150 * MB,
            ..close.clone()
        };
        assert!(matches!(
            verify_hosted_service(&desc, &mut loud, &cfg),
            TrustVerdict::Banned {
                reason: BanReason::VolumeMismatch { declared: 100_000_000, measured: 150_000_000 }
            }
        ));
        let mut crashing = ScriptedService { crash: true, ..close };
        assert!(!verify_hosted_service(&desc, &mut crashing, &cfg).is_trusted());
    }

    #[test]
    fn per_input_volume_is_measured() {
        let cfg = LifecycleConfig::default();
        // 10 inputs on one declared topic, 1000 bytes out per input.
        let desc = hosted(&["mec/m1/proc/cam"], 10_000);
        let mut svc = ScriptedService {
            subscribes: vec!["mec/m1/proc/cam".into()],
            publish_topic: Some("apps/out".into()),
            bytes_per_input: 1000,
            ..Default::default()
        };
        assert_eq!(
            verify_hosted_service(&desc, &mut svc, &cfg),
            TrustVerdict::Trusted {
                subscribed: vec!["mec/m1/proc/cam".into()],
                measured_bytes: 10_000
            }
        );
    }

    #[test]
    fn failed_trust_run_bans_image() {
        let mut m = manager(1000);
        let desc = hosted(&["mec/m1/proc/cam"], 1000);
        let mut loud = ScriptedService {
            subscribes: vec!["mec/m1/proc/cam".into()],
            publish_topic: Some("apps/out".into()),
            publish_bytes: 5000,
            ..Default::default()
        };
        assert!(!m.deploy_hosted_service(&desc, &mut loud, 7).is_trusted());
        assert_eq!(m.bans().get("thirdparty/twin:1").unwrap().reason, "volume-mismatch");
        let mut fine = ScriptedService {
            publish_bytes: 1000,
            ..loud
        };
        assert_eq!(
            m.deploy_hosted_service(&desc, &mut fine, 8),
            TrustVerdict::Banned {
                reason: BanReason::GlobalBan
            }
        );
    }

    #[test]
    fn ban_list_is_idempotent() {
        let mut b = BanList::default();
        assert!(b.ban("x", "first", 1));
        assert!(!b.ban("x", "second", 2));
        assert_eq!(b.get("x").unwrap().reason, "first");
        assert_eq!(b.len(), 1);
    }

    #[test]
    fn descriptor_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cam.json");
        let d = descriptor("cam", "registry/cam-pipe:1");
        write_descriptor(&path, &d).unwrap();
        let loaded = load_descriptor(&path).unwrap();
        assert_eq!(loaded, d);
        assert!(loaded.verify(&trust()).unwrap());
    }

    #[test]
    fn trust_store_hex_roundtrip() {
        let t = trust();
        let back = TrustStore::from_hex_map(&t.to_hex_map()).unwrap();
        assert_eq!(back.to_hex_map(), t.to_hex_map());
        assert!(TrustStore::from_hex_map(&[("k".to_string(), "zz".to_string())].into()).is_err());
    }
}
