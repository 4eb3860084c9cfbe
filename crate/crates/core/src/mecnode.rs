//! One MEC platform instance.
//!
//! Ingest path: parse, normalise the producer clock, scrub blacklisted keys,
//! then publish on `mec/<id>/raw/<datatype>` only if a pipeline for the
//! datatype is running. Everything else is discarded on the spot.
//!
//! Each running pipeline has a worker that moves samples from the raw topic
//! to `mec/<id>/proc/<datatype>`. Each consumer owns an egress tap on the
//! processed topic which applies ROI, licence and SLA sampling, in that
//! order, and meters the bytes it forwards.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::broker::{Broker, Subscription, TopicCounters, TopicError, TopicName, TopicPattern};
use crate::clock::Clock;
use crate::envelope::{self, BlacklistPolicy, DatatypeRegistry, Envelope, EnvelopeError, DEFAULT_CLOCK_BOUND_MS};
use crate::lifecycle::{
    HostedService, HostedServiceDescriptor, LifecycleConfig, LifecycleError, LifecycleManager, LifecycleMetrics, PipelineDescriptor, PipelineId, PipelineState,
    TrustStore, TrustVerdict, DEFAULT_IDLE_GRACE_MS, DEFAULT_VOLUME_TOLERANCE,
};
use crate::policy::{license_permits, Capacity, ConsumerTerms, ResourceLedger, SamplerState, SlaTier, TierCatalog};
use crate::tilegrid::{self, QuadKey, MAX_LEVEL};
use crate::is_name_token;

/// Consumer ref used for pipelines pinned by always-on provisioning.
pub const ALWAYS_ON_REF: &str = "always-on";

pub const DEFAULT_QUEUE_CAPACITY: usize = 65_536;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NodeError {
    #[error("unknown tier {0:?}")]
    UnknownTier(String),
    #[error("invalid roi: {0}")]
    InvalidRoi(String),
    #[error("consumer {0:?} already attached")]
    AlreadyAttached(String),
    #[error(transparent)]
    Lifecycle(#[from] LifecycleError),
    #[error(transparent)]
    Topic(#[from] TopicError),
    #[error("invalid config: {0}")]
    Config(String),
}

impl NodeError {
    /// Short machine-readable code, used on the HTTP surface.
    pub fn code(&self) -> &'static str {
        match self {
            NodeError::UnknownTier(_) => "unknown-tier",
            NodeError::InvalidRoi(_) => "invalid-roi",
            NodeError::AlreadyAttached(_) => "already-attached",
            NodeError::Lifecycle(LifecycleError::BannedImage(_)) => "banned-image",
            NodeError::Lifecycle(LifecycleError::UnknownDatatype(_)) => "unknown-datatype",
            NodeError::Lifecycle(e) if e.is_insufficient_resources() => "insufficient-resources",
            NodeError::Lifecycle(_) => "lifecycle",
            NodeError::Topic(_) => "topic",
            NodeError::Config(_) => "config",
        }
    }
}

fn default_grace() -> u64 {
    DEFAULT_IDLE_GRACE_MS
}

fn default_clock_bound() -> u64 {
    DEFAULT_CLOCK_BOUND_MS
}

fn default_queue() -> usize {
    DEFAULT_QUEUE_CAPACITY
}

fn default_tolerance() -> f64 {
    DEFAULT_VOLUME_TOLERANCE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MecConfig {
    pub mec_id: String,
    pub tile: QuadKey,
    pub capacity: Capacity,
    #[serde(default = "envelope::default_blacklist")]
    pub blacklist: BlacklistPolicy,
    #[serde(default = "default_grace")]
    pub idle_grace_ms: u64,
    #[serde(default = "default_clock_bound")]
    pub clock_bound_ms: u64,
    #[serde(default)]
    pub endpoint: String,
    #[serde(default)]
    pub datatypes: DatatypeRegistry,
    #[serde(default)]
    pub tiers: TierCatalog,
    #[serde(default = "default_queue")]
    pub queue_capacity: usize,
    #[serde(default = "default_tolerance")]
    pub volume_tolerance: f64,
    /// Baseline mode: deploy a pipeline for every produced datatype regardless of demand.
    #[serde(default)]
    pub always_on: bool,
}

impl MecConfig {
    pub fn new(mec_id: &str, tile: QuadKey, capacity: Capacity) -> Self {
        Self {
            mec_id: mec_id.to_owned(),
            tile,
            capacity,
            blacklist: envelope::default_blacklist(),
            idle_grace_ms: DEFAULT_IDLE_GRACE_MS,
            clock_bound_ms: DEFAULT_CLOCK_BOUND_MS,
            endpoint: String::new(),
            datatypes: DatatypeRegistry::default(),
            tiers: TierCatalog::default(),
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            volume_tolerance: DEFAULT_VOLUME_TOLERANCE,
            always_on: false,
        }
    }

    pub fn validate(&self) -> Result<(), NodeError> {
        if !is_name_token(&self.mec_id) {
            return Err(NodeError::Config(format!("mec_id {:?} must match [a-z0-9-]{{1,64}}", self.mec_id)));
        }
        if self.queue_capacity == 0 {
            return Err(NodeError::Config("queue_capacity must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum BusMessage {
    Sample(Arc<Envelope>),
    Notification(Arc<Value>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Destination {
    Cloud,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    Malformed,
    Schema,
    Clock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "lowercase")]
pub enum IngestOutcome {
    Accepted,
    Discarded(DiscardReason),
    Rejected(RejectReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscardReason {
    NoDemand,
}

/// A consumer's filtered, metered view of one pipeline's output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EgressTap {
    pub consumer_ref: String,
    pub datatype: String,
    pub tier: SlaTier,
    pub terms: ConsumerTerms,
    pub roi: BTreeSet<QuadKey>,
    pub roi_level: u8,
    pub sampler: SamplerState,
    pub delivered_bytes: u64,
    pub forwarded_count: u64,
    pub destination: Destination,
    pub pipeline: PipelineId,
}

impl EgressTap {
    /// ROI, then licence, then sampler. Only envelopes passing the first two
    /// advance the sampler.
    pub fn offer(&mut self, e: &Envelope, now_ms: u64) -> bool {
        let Ok(in_roi) = tilegrid::locate(e.position, self.roi_level) else {
            return false;
        };
        if !self.roi.contains(&in_roi) {
            return false;
        }
        let delivery_tile = tilegrid::locate(e.position, MAX_LEVEL).expect("valid level");
        if !license_permits(&e.license, &self.terms, &delivery_tile, now_ms) {
            return false;
        }
        if !self.sampler.admit() {
            return false;
        }
        self.delivered_bytes += e.size_bytes();
        self.forwarded_count += 1;
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub consumer_ref: String,
    pub envelope: Arc<Envelope>,
    pub relay_hops: u8,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProducerCounters {
    pub accepted: u64,
    pub discarded: u64,
    pub rejected_malformed: u64,
    pub rejected_schema: u64,
    pub rejected_clock: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeCounters {
    pub ingested: u64,
    pub accepted: u64,
    pub discarded_no_demand: u64,
    pub rejected: u64,
    pub processed: u64,
    pub forwarded: u64,
    pub forwarded_bytes: u64,
    pub per_producer: BTreeMap<String, ProducerCounters>,
    /// Bytes ingested and accepted, per datatype (declared produced volume).
    pub produced_bytes: BTreeMap<String, u64>,
    /// Last time any valid sample of the datatype arrived, accepted or not.
    pub last_seen_ms: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsumerUsage {
    pub consumer_ref: String,
    pub datatype: String,
    pub destination: Destination,
    pub delivered_bytes_delta: u64,
    pub forwarded_delta: u64,
    /// Produced volume of the datatype while attached, for local billing.
    pub declared_bytes_delta: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineUsage {
    pub pipeline: PipelineId,
    pub datatype: String,
    pub compute_mcpu_ms_delta: u64,
    /// Consumers that held the pipeline at any point during the interval.
    pub consumers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageReport {
    pub mec_id: String,
    pub seq: u64,
    pub now_ms: u64,
    pub consumers: Vec<ConsumerUsage>,
    pub pipelines: Vec<PipelineUsage>,
    pub produced_bytes_delta: BTreeMap<String, u64>,
    pub last_seen_ms: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TickSummary {
    pub processed: u64,
    pub forwarded: u64,
    pub reaped: Vec<PipelineId>,
    pub deployed: Vec<PipelineId>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeMetrics {
    pub mec_id: String,
    pub counters: NodeCounters,
    pub lifecycle: LifecycleMetrics,
    pub taps: usize,
    pub topics: BTreeMap<String, TopicCounters>,
    pub free_capacity: Capacity,
}

struct Worker {
    datatype: String,
    raw: Subscription<BusMessage>,
    proc_topic: TopicName,
    processed_since_tick: u64,
}

struct TapRuntime {
    tap: EgressTap,
    sub: Subscription<BusMessage>,
    outbox: VecDeque<Delivery>,
    reported_bytes: u64,
    reported_forwarded: u64,
    declared_baseline: u64,
}

struct Control {
    lifecycle: LifecycleManager,
    workers: BTreeMap<PipelineId, Worker>,
    taps: BTreeMap<String, TapRuntime>,
    /// Final unreported usage of detached taps.
    detached: Vec<ConsumerUsage>,
    pending_compute: BTreeMap<PipelineId, u64>,
    interval_consumers: BTreeMap<PipelineId, BTreeSet<String>>,
    reported_produced: BTreeMap<String, u64>,
    report_seq: u64,
    last_tick_ms: u64,
    deployed_since_tick: Vec<PipelineId>,
}

pub struct MecNode {
    config: MecConfig,
    clock: Arc<dyn Clock>,
    broker: Broker<BusMessage>,
    running: RwLock<BTreeSet<String>>,
    control: Mutex<Control>,
    counters: Mutex<NodeCounters>,
}

impl MecNode {
    pub fn new(config: MecConfig, trust: TrustStore, descriptors: Vec<PipelineDescriptor>, clock: Arc<dyn Clock>) -> Result<Self, NodeError> {
        config.validate()?;
        let lc = LifecycleConfig {
            idle_grace_ms: config.idle_grace_ms,
            volume_tolerance: config.volume_tolerance,
            ..LifecycleConfig::default()
        };
        let mut lifecycle = LifecycleManager::new(lc, trust, ResourceLedger::new(config.capacity));
        for d in descriptors {
            lifecycle.register_descriptor(d)?;
        }
        let now = clock.now_ms();
        Ok(Self {
            config,
            clock,
            broker: Broker::new(),
            running: RwLock::new(BTreeSet::new()),
            control: Mutex::new(Control {
                lifecycle,
                workers: BTreeMap::new(),
                taps: BTreeMap::new(),
                detached: Vec::new(),
                pending_compute: BTreeMap::new(),
                interval_consumers: BTreeMap::new(),
                reported_produced: BTreeMap::new(),
                report_seq: 0,
                last_tick_ms: now,
                deployed_since_tick: Vec::new(),
            }),
            counters: Mutex::new(NodeCounters::default()),
        })
    }

    pub fn id(&self) -> &str {
        &self.config.mec_id
    }

    pub fn config(&self) -> &MecConfig {
        &self.config
    }

    pub fn broker(&self) -> &Broker<BusMessage> {
        &self.broker
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    fn reject(&self, producer: &str, reason: RejectReason) -> IngestOutcome {
        let mut c = self.counters.lock();
        c.ingested += 1;
        c.rejected += 1;
        let p = c.per_producer.entry(producer.to_owned()).or_default();
        match reason {
            RejectReason::Malformed => p.rejected_malformed += 1,
            RejectReason::Schema => p.rejected_schema += 1,
            RejectReason::Clock => p.rejected_clock += 1,
        }
        IngestOutcome::Rejected(reason)
    }

    /// Producer entry point.
    pub fn ingest(&self, raw: &[u8]) -> IngestOutcome {
        let now = self.clock.now_ms();
        let parsed = match envelope::parse_envelope(raw) {
            Ok(e) => e,
            Err(EnvelopeError::Malformed(_)) => return self.reject(&producer_hint(raw), RejectReason::Malformed),
            Err(_) => return self.reject(&producer_hint(raw), RejectReason::Schema),
        };
        if self.config.datatypes.check(&parsed.datatype).is_err() {
            return self.reject(&parsed.producer_id, RejectReason::Schema);
        }
        let normalized = match envelope::normalize_timestamp(&parsed, now, self.config.clock_bound_ms) {
            Ok(e) => e,
            Err(_) => return self.reject(&parsed.producer_id, RejectReason::Clock),
        };
        let clean = envelope::scrub(&normalized, &self.config.blacklist);
        let datatype = clean.datatype.clone();
        self.counters.lock().last_seen_ms.insert(datatype.clone(), now);

        let mut live = self.running.read().contains(&datatype);
        if !live && self.config.always_on {
            live = self.pin_always_on(&datatype, now);
        }
        let mut c = self.counters.lock();
        c.ingested += 1;
        let p = c.per_producer.entry(clean.producer_id.clone()).or_default();
        if !live {
            p.discarded += 1;
            c.discarded_no_demand += 1;
            return IngestOutcome::Discarded(DiscardReason::NoDemand);
        }
        p.accepted += 1;
        c.accepted += 1;
        *c.produced_bytes.entry(datatype.clone()).or_default() += clean.size_bytes();
        drop(c);
        let topic = TopicName::raw(&self.config.mec_id, &datatype).expect("validated names");
        self.broker.publish(&topic, BusMessage::Sample(Arc::new(clean)));
        IngestOutcome::Accepted
    }

    fn pin_always_on(&self, datatype: &str, now: u64) -> bool {
        let Some(tier) = self.config.tiers.cheapest().cloned() else {
            return false;
        };
        let mut ctl = self.control.lock();
        match ctl.lifecycle.acquire_pipeline(datatype, &tier, ALWAYS_ON_REF, now) {
            Ok(id) => {
                self.ensure_worker(&mut ctl, id);
                true
            }
            Err(_) => false,
        }
    }

    fn ensure_worker(&self, ctl: &mut Control, id: PipelineId) {
        if ctl.workers.contains_key(&id) {
            return;
        }
        let inst = ctl.lifecycle.instance(id).expect("acquired instance");
        let datatype = inst.datatype.clone();
        let consumers: BTreeSet<String> = inst.consumers.keys().cloned().collect();
        let raw = TopicName::raw(&self.config.mec_id, &datatype).expect("validated names");
        let proc_topic = TopicName::processed(&self.config.mec_id, &datatype).expect("validated names");
        let sub = self.broker.subscribe(TopicPattern::from(raw), self.config.queue_capacity);
        ctl.workers.insert(
            id,
            Worker {
                datatype: datatype.clone(),
                raw: sub,
                proc_topic,
                processed_since_tick: 0,
            },
        );
        ctl.interval_consumers.entry(id).or_default().extend(consumers);
        ctl.deployed_since_tick.push(id);
        self.running.write().insert(datatype);
    }

    /// Subscribes a tap for `consumer_ref`, deploying the pipeline on first demand.
    pub fn attach_consumer(
        &self,
        consumer_ref: &str,
        datatype: &str,
        tier_name: &str,
        terms: ConsumerTerms,
        roi: BTreeSet<QuadKey>,
        destination: Destination,
    ) -> Result<EgressTap, NodeError> {
        let tier = self
            .config
            .tiers
            .get(tier_name)
            .map_err(|_| NodeError::UnknownTier(tier_name.to_owned()))?
            .clone();
        let roi_level = roi_level(&roi)?;
        let now = self.clock.now_ms();
        let mut ctl = self.control.lock();
        if ctl.taps.contains_key(consumer_ref) {
            return Err(NodeError::AlreadyAttached(consumer_ref.to_owned()));
        }
        let id = ctl.lifecycle.acquire_pipeline(datatype, &tier, consumer_ref, now)?;
        self.ensure_worker(&mut ctl, id);
        ctl.interval_consumers.entry(id).or_default().insert(consumer_ref.to_owned());

        let proc_topic = TopicName::processed(&self.config.mec_id, datatype)?;
        let sub = self.broker.subscribe(TopicPattern::from(proc_topic), self.config.queue_capacity);
        let tap = EgressTap {
            consumer_ref: consumer_ref.to_owned(),
            datatype: datatype.to_owned(),
            sampler: SamplerState::new(tier.sampling_rate),
            tier,
            terms,
            roi,
            roi_level,
            delivered_bytes: 0,
            forwarded_count: 0,
            destination,
            pipeline: id,
        };
        let declared_baseline = self.counters.lock().produced_bytes.get(datatype).copied().unwrap_or(0);
        ctl.taps.insert(
            consumer_ref.to_owned(),
            TapRuntime {
                tap: tap.clone(),
                sub,
                outbox: VecDeque::new(),
                reported_bytes: 0,
                reported_forwarded: 0,
                declared_baseline,
            },
        );
        Ok(tap)
    }

    /// Low-latency access: same filtering, delivered from the node without the cloud relay.
    pub fn serve_local(&self, consumer_ref: &str, datatype: &str, tier_name: &str, terms: ConsumerTerms, roi: BTreeSet<QuadKey>) -> Result<EgressTap, NodeError> {
        self.attach_consumer(consumer_ref, datatype, tier_name, terms, roi, Destination::Local)
    }

    pub fn detach_consumer(&self, consumer_ref: &str) -> bool {
        let now = self.clock.now_ms();
        // Move whatever is still queued for this consumer through its tap first.
        self.pump();
        let mut ctl = self.control.lock();
        let Some(rt) = ctl.taps.remove(consumer_ref) else {
            return false;
        };
        self.broker.unsubscribe(rt.sub.id());
        let produced = self.counters.lock().produced_bytes.get(&rt.tap.datatype).copied().unwrap_or(0);
        ctl.detached.push(ConsumerUsage {
            consumer_ref: rt.tap.consumer_ref.clone(),
            datatype: rt.tap.datatype.clone(),
            destination: rt.tap.destination,
            delivered_bytes_delta: rt.tap.delivered_bytes - rt.reported_bytes,
            forwarded_delta: rt.tap.forwarded_count - rt.reported_forwarded,
            declared_bytes_delta: produced - rt.declared_baseline,
        });
        // Undelivered outbox entries are dropped along with the tap; they were
        // already metered as forwarded.
        let _ = ctl.lifecycle.release_pipeline(rt.tap.pipeline, consumer_ref, now);
        true
    }

    pub fn tap(&self, consumer_ref: &str) -> Option<EgressTap> {
        self.control.lock().taps.get(consumer_ref).map(|rt| rt.tap.clone())
    }

    pub fn taps(&self) -> Vec<EgressTap> {
        self.control.lock().taps.values().map(|rt| rt.tap.clone()).collect()
    }

    /// Runs pipeline workers and egress taps over everything queued.
    /// Returns (processed, forwarded).
    pub fn pump(&self) -> (u64, u64) {
        let now = self.clock.now_ms();
        let mut ctl = self.control.lock();
        let mut processed = 0u64;
        let ctl = &mut *ctl;
        for (id, worker) in ctl.workers.iter_mut() {
            for (_, msg) in worker.raw.drain() {
                if let BusMessage::Sample(e) = msg {
                    let mut out = (*e).clone();
                    out.annotations.insert("pipeline".into(), id.to_string());
                    self.broker.publish(&worker.proc_topic, BusMessage::Sample(Arc::new(out)));
                    worker.processed_since_tick += 1;
                    processed += 1;
                }
            }
        }
        let mut forwarded = 0u64;
        let mut forwarded_bytes = 0u64;
        for rt in ctl.taps.values_mut() {
            let hops = match rt.tap.destination {
                Destination::Cloud => 1,
                Destination::Local => 0,
            };
            for (_, msg) in rt.sub.drain() {
                let BusMessage::Sample(e) = msg else { continue };
                if rt.tap.offer(&e, now) {
                    forwarded += 1;
                    forwarded_bytes += e.size_bytes();
                    rt.outbox.push_back(Delivery {
                        consumer_ref: rt.tap.consumer_ref.clone(),
                        envelope: e,
                        relay_hops: hops,
                    });
                }
            }
        }
        let mut c = self.counters.lock();
        c.processed += processed;
        c.forwarded += forwarded;
        c.forwarded_bytes += forwarded_bytes;
        (processed, forwarded)
    }

    /// Periodic maintenance: process queues, meter compute, autoscale from the
    /// observed ingest rate, reap idle pipelines.
    pub fn tick(&self) -> TickSummary {
        let (processed, forwarded) = self.pump();
        let now = self.clock.now_ms();
        let mut ctl = self.control.lock();
        let ctl = &mut *ctl;
        let elapsed_ms = now.saturating_sub(ctl.last_tick_ms);
        ctl.last_tick_ms = now;

        for (id, inc) in ctl.lifecycle.meter_all(now) {
            *ctl.pending_compute.entry(id).or_default() += inc;
        }
        if elapsed_ms > 0 {
            for (id, worker) in ctl.workers.iter_mut() {
                let rate = worker.processed_since_tick as f64 * 1000.0 / elapsed_ms as f64;
                worker.processed_since_tick = 0;
                let _ = ctl.lifecycle.autoscale(*id, rate);
            }
        }
        let reaped = ctl.lifecycle.reap_idle(now);
        for id in &reaped {
            if let Some(w) = ctl.workers.remove(id) {
                self.broker.unsubscribe(w.raw.id());
                self.running.write().remove(&w.datatype);
            }
        }
        TickSummary {
            processed,
            forwarded,
            reaped,
            deployed: std::mem::take(&mut ctl.deployed_since_tick),
        }
    }

    /// Deliveries waiting for `consumer_ref`, oldest first.
    pub fn take_deliveries(&self, consumer_ref: &str) -> Vec<Delivery> {
        let mut ctl = self.control.lock();
        ctl.taps
            .get_mut(consumer_ref)
            .map(|rt| rt.outbox.drain(..).collect())
            .unwrap_or_default()
    }

    /// Usage deltas since the previous report.
    pub fn report_usage(&self) -> UsageReport {
        let now = self.clock.now_ms();
        let counters = self.counters.lock().clone();
        let mut ctl = self.control.lock();
        let ctl = &mut *ctl;
        ctl.report_seq += 1;

        let mut consumers = std::mem::take(&mut ctl.detached);
        for rt in ctl.taps.values_mut() {
            let produced = counters.produced_bytes.get(&rt.tap.datatype).copied().unwrap_or(0);
            consumers.push(ConsumerUsage {
                consumer_ref: rt.tap.consumer_ref.clone(),
                datatype: rt.tap.datatype.clone(),
                destination: rt.tap.destination,
                delivered_bytes_delta: rt.tap.delivered_bytes - rt.reported_bytes,
                forwarded_delta: rt.tap.forwarded_count - rt.reported_forwarded,
                declared_bytes_delta: produced - rt.declared_baseline,
            });
            rt.reported_bytes = rt.tap.delivered_bytes;
            rt.reported_forwarded = rt.tap.forwarded_count;
            rt.declared_baseline = produced;
        }

        let mut pipelines = Vec::new();
        for (id, delta) in std::mem::take(&mut ctl.pending_compute) {
            let inst = ctl.lifecycle.instance(id).expect("metered instance");
            let mut held = ctl.interval_consumers.remove(&id).unwrap_or_default();
            held.extend(inst.consumers.keys().cloned());
            pipelines.push(PipelineUsage {
                pipeline: id,
                datatype: inst.datatype.clone(),
                compute_mcpu_ms_delta: delta,
                consumers: held.into_iter().collect(),
            });
        }
        // Start the next interval with whoever holds each live pipeline now.
        ctl.interval_consumers.clear();
        for inst in ctl.lifecycle.instances().filter(|i| i.state == PipelineState::Running) {
            ctl.interval_consumers.insert(inst.id, inst.consumers.keys().cloned().collect());
        }

        let mut produced_bytes_delta = BTreeMap::new();
        for (dt, total) in &counters.produced_bytes {
            let prev = ctl.reported_produced.insert(dt.clone(), *total).unwrap_or(0);
            if *total > prev {
                produced_bytes_delta.insert(dt.clone(), total - prev);
            }
        }
        UsageReport {
            mec_id: self.config.mec_id.clone(),
            seq: ctl.report_seq,
            now_ms: now,
            consumers,
            pipelines,
            produced_bytes_delta,
            last_seen_ms: counters.last_seen_ms,
        }
    }

    pub fn apply_ban(&self, image_ref: &str, reason: &str) -> bool {
        let now = self.clock.now_ms();
        self.control.lock().lifecycle.apply_ban(image_ref, reason, now);
        true
    }

    pub fn is_banned(&self, image_ref: &str) -> bool {
        self.control.lock().lifecycle.bans().is_banned(image_ref)
    }

    pub fn deploy_hosted_service(&self, desc: &HostedServiceDescriptor, candidate: &mut dyn HostedService) -> TrustVerdict {
        let now = self.clock.now_ms();
        self.control.lock().lifecycle.deploy_hosted_service(desc, candidate, now)
    }

    pub fn broadcast_downlink(&self, datatype: &str, notification: Value) -> Result<usize, NodeError> {
        Ok(crate::broker::broadcast_downlink(&self.broker, datatype, BusMessage::Notification(Arc::new(notification)))?)
    }

    pub fn subscribe_downlink(&self, datatype: &str) -> Result<Subscription<BusMessage>, NodeError> {
        let topic = TopicName::downlink(datatype)?;
        Ok(self.broker.subscribe(TopicPattern::from(topic), self.config.queue_capacity))
    }

    pub fn with_lifecycle<R>(&self, f: impl FnOnce(&LifecycleManager) -> R) -> R {
        f(&self.control.lock().lifecycle)
    }

    pub fn counters(&self) -> NodeCounters {
        self.counters.lock().clone()
    }

    pub fn has_running_pipeline(&self, datatype: &str) -> bool {
        self.running.read().contains(datatype)
    }

    pub fn metrics(&self) -> NodeMetrics {
        let ctl = self.control.lock();
        NodeMetrics {
            mec_id: self.config.mec_id.clone(),
            counters: self.counters(),
            lifecycle: ctl.lifecycle.metrics(),
            taps: ctl.taps.len(),
            topics: self.broker.counters().into_iter().map(|(t, c)| (t.to_string(), c)).collect(),
            free_capacity: ctl.lifecycle.ledger().free(),
        }
    }
}

fn roi_level(roi: &BTreeSet<QuadKey>) -> Result<u8, NodeError> {
    let mut levels = roi.iter().map(QuadKey::level);
    let Some(first) = levels.next() else {
        return Err(NodeError::InvalidRoi("empty roi".into()));
    };
    if levels.any(|l| l != first) {
        return Err(NodeError::InvalidRoi("roi keys must share one level".into()));
    }
    Ok(first)
}

/// Best-effort producer id for counting rejected input.
fn producer_hint(raw: &[u8]) -> String {
    serde_json::from_slice::<Value>(raw)
        .ok()
        .and_then(|v| v.get("producer_id").and_then(Value::as_str).map(str::to_owned))
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_owned())
}
