//! Cloud platform layer: MEC registry keyed by tile, consumer subscription
//! fan-out, scoped access tokens, the global ban list and billing accounts.
//!
//! The hub talks to MEC nodes through [`MecLink`], which has an in-process
//! implementation for [`MecNode`] (used by the simulator) and an HTTP one in
//! the service layer.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::envelope::Envelope;
use crate::lifecycle::BanList;
use crate::mecnode::{Delivery, Destination, MecNode, UsageReport, ALWAYS_ON_REF};
use crate::policy::{ConsumerTerms, TierCatalog};
use crate::tilegrid::{self, GeoPosition, QuadKey};

pub const DEFAULT_HEARTBEAT_PERIOD_MS: u64 = 10_000;
pub const DEFAULT_STALE_AFTER_MS: u64 = 30_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    Produce,
    Consume,
    HostService,
    Admin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessToken {
    pub token: String,
    pub scopes: BTreeSet<Scope>,
    #[serde(default)]
    pub expiry_ms: Option<u64>,
}

impl AccessToken {
    /// Admin tokens carry every scope.
    pub fn grants(&self, scope: Scope, now_ms: u64) -> bool {
        let fresh = self.expiry_ms.is_none_or(|exp| now_ms < exp);
        fresh && (self.scopes.contains(&scope) || self.scopes.contains(&Scope::Admin))
    }
}

/// Static token table shared by hub and nodes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<AccessToken>", into = "Vec<AccessToken>")]
pub struct TokenTable(BTreeMap<String, AccessToken>);

impl From<Vec<AccessToken>> for TokenTable {
    fn from(v: Vec<AccessToken>) -> Self {
        Self(v.into_iter().map(|t| (t.token.clone(), t)).collect())
    }
}

impl From<TokenTable> for Vec<AccessToken> {
    fn from(t: TokenTable) -> Self {
        t.0.into_values().collect()
    }
}

impl TokenTable {
    pub fn issue(&mut self, token: AccessToken) {
        self.0.insert(token.token.clone(), token);
    }

    pub fn check(&self, token: &str, scope: Scope, now_ms: u64) -> Result<(), HubError> {
        match self.0.get(token) {
            Some(t) if t.grants(scope, now_ms) => Ok(()),
            _ => Err(HubError::Unauthorized),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttachFailure {
    pub mec_id: String,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HubError {
    #[error("unauthorized")]
    Unauthorized,
    #[error("unknown mec {0:?}")]
    UnknownMec(String),
    #[error("no serving mec for position")]
    NoServingMec,
    #[error("roi matches no live mec")]
    NoMatchingMec,
    #[error("every matched mec rejected the subscription: {}", summarize(.0))]
    AllAttachesFailed(Vec<AttachFailure>),
    #[error("unknown subscription {0:?}")]
    UnknownSubscription(String),
    #[error("unknown tier {0:?}")]
    UnknownTier(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

fn summarize(fails: &[AttachFailure]) -> String {
    fails.iter().map(|f| format!("{}: {}", f.mec_id, f.code)).collect::<Vec<_>>().join(", ")
}

impl HubError {
    pub fn code(&self) -> &'static str {
        match self {
            HubError::Unauthorized => "unauthorized",
            HubError::UnknownMec(_) => "unknown-mec",
            HubError::NoServingMec => "no-serving-mec",
            HubError::NoMatchingMec => "no-matching-mec",
            HubError::AllAttachesFailed(_) => "all-attaches-failed",
            HubError::UnknownSubscription(_) => "unknown-subscription",
            HubError::UnknownTier(_) => "unknown-tier",
            HubError::InvalidRequest(_) => "invalid-request",
        }
    }
}

/// Body of a consumer attach, as sent from hub to node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttachRequest {
    #[serde(default)]
    pub consumer_ref: Option<String>,
    pub datatype: String,
    pub tier: String,
    #[serde(default)]
    pub terms: ConsumerTerms,
    pub roi: BTreeSet<QuadKey>,
    #[serde(default = "cloud")]
    pub destination: Destination,
}

fn cloud() -> Destination {
    Destination::Cloud
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkError {
    pub code: String,
    pub message: String,
}

/// Hub-side handle on one MEC node.
pub trait MecLink: Send + Sync {
    fn attach(&self, req: &AttachRequest) -> Result<(), LinkError>;
    fn detach(&self, consumer_ref: &str) -> bool;
    fn ban(&self, image_ref: &str, reason: &str) -> bool;
    fn fetch_deliveries(&self, consumer_ref: &str) -> Vec<Delivery>;
}

impl MecLink for MecNode {
    fn attach(&self, req: &AttachRequest) -> Result<(), LinkError> {
        let consumer_ref = req.consumer_ref.clone().unwrap_or_default();
        self.attach_consumer(&consumer_ref, &req.datatype, &req.tier, req.terms, req.roi.clone(), req.destination)
            .map(|_| ())
            .map_err(|e| LinkError {
                code: e.code().to_owned(),
                message: e.to_string(),
            })
    }

    fn detach(&self, consumer_ref: &str) -> bool {
        self.detach_consumer(consumer_ref)
    }

    fn ban(&self, image_ref: &str, reason: &str) -> bool {
        self.apply_ban(image_ref, reason)
    }

    fn fetch_deliveries(&self, consumer_ref: &str) -> Vec<Delivery> {
        self.take_deliveries(consumer_ref)
    }
}

/// Builds a link from a registered endpoint string.
pub type LinkFactory = Box<dyn Fn(&str) -> Option<Arc<dyn MecLink>> + Send + Sync>;

/// Factory resolving endpoints against a fixed set of in-process nodes.
pub fn in_process_links(nodes: BTreeMap<String, Arc<MecNode>>) -> LinkFactory {
    Box::new(move |endpoint| nodes.get(endpoint).map(|n| n.clone() as Arc<dyn MecLink>))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MecRecord {
    pub mec_id: String,
    pub tile: QuadKey,
    pub endpoint: String,
    /// Datatype → last production time reported by the node.
    pub datatypes_live: BTreeMap<String, u64>,
    pub last_heartbeat_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsumerSubscription {
    pub subscription_id: String,
    #[serde(skip_serializing)]
    pub token: String,
    pub datatype: String,
    pub tier: String,
    pub terms: ConsumerTerms,
    pub roi: BTreeSet<QuadKey>,
    pub destination: Destination,
    pub matched_mecs: Vec<String>,
    pub failures: Vec<AttachFailure>,
    pub created_ms: u64,
    pub active: bool,
    pub accrued_bytes: u64,
    pub accrued_compute_mcpu_ms: u64,
}

impl ConsumerSubscription {
    pub fn accrued_compute_mcpu_s(&self) -> f64 {
        self.accrued_compute_mcpu_ms as f64 / 1000.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubscribeRequest {
    pub datatype: String,
    pub tier: String,
    #[serde(default)]
    pub terms: ConsumerTerms,
    pub roi: BTreeSet<QuadKey>,
    #[serde(default = "cloud")]
    pub destination: Destination,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrowseEntry {
    pub mec_id: String,
    pub datatype: String,
    pub live: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BillingReport {
    pub subscription_id: String,
    pub destination: Destination,
    pub bytes: u64,
    pub compute_mcpu_ms: u64,
    pub compute_mcpu_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageAck {
    pub applied: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unattributed {
    pub bytes: u64,
    pub compute_mcpu_ms: u64,
}

fn default_heartbeat() -> u64 {
    DEFAULT_HEARTBEAT_PERIOD_MS
}

fn default_stale() -> u64 {
    DEFAULT_STALE_AFTER_MS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HubConfig {
    #[serde(default)]
    pub tokens: TokenTable,
    #[serde(default)]
    pub tiers: TierCatalog,
    #[serde(default = "default_heartbeat")]
    pub heartbeat_period_ms: u64,
    #[serde(default = "default_stale")]
    pub stale_after_ms: u64,
    /// How recent a datatype's production must be to show as live in browse.
    #[serde(default = "default_stale")]
    pub live_window_ms: u64,
}

impl Default for HubConfig {
    fn default() -> Self {
        Self {
            tokens: TokenTable::default(),
            tiers: TierCatalog::default(),
            heartbeat_period_ms: DEFAULT_HEARTBEAT_PERIOD_MS,
            stale_after_ms: DEFAULT_STALE_AFTER_MS,
            live_window_ms: DEFAULT_STALE_AFTER_MS,
        }
    }
}

struct State {
    mecs: BTreeMap<String, MecRecord>,
    links: BTreeMap<String, Arc<dyn MecLink>>,
    subscriptions: BTreeMap<String, ConsumerSubscription>,
    next_subscription: u64,
    seen_reports: BTreeMap<String, BTreeSet<u64>>,
    bans: BanList,
    unattributed: Unattributed,
}

pub struct CloudHub {
    config: HubConfig,
    clock: Arc<dyn Clock>,
    links: LinkFactory,
    state: Mutex<State>,
}

impl CloudHub {
    pub fn new(config: HubConfig, clock: Arc<dyn Clock>, links: LinkFactory) -> Self {
        Self {
            config,
            clock,
            links,
            state: Mutex::new(State {
                mecs: BTreeMap::new(),
                links: BTreeMap::new(),
                subscriptions: BTreeMap::new(),
                next_subscription: 1,
                seen_reports: BTreeMap::new(),
                bans: BanList::default(),
                unattributed: Unattributed::default(),
            }),
        }
    }

    pub fn config(&self) -> &HubConfig {
        &self.config
    }

    pub fn authorize(&self, token: &str, scope: Scope) -> Result<(), HubError> {
        self.auth(token, scope).map(|_| ())
    }

    fn auth(&self, token: &str, scope: Scope) -> Result<u64, HubError> {
        let now = self.clock.now_ms();
        self.config.tokens.check(token, scope, now)?;
        Ok(now)
    }

    fn is_live(&self, rec: &MecRecord, now: u64) -> bool {
        now.saturating_sub(rec.last_heartbeat_ms) <= self.config.stale_after_ms
    }

    pub fn register_mec(&self, token: &str, mec_id: &str, tile: QuadKey, endpoint: &str) -> Result<MecRecord, HubError> {
        let now = self.auth(token, Scope::Admin)?;
        if !crate::is_name_token(mec_id) {
            return Err(HubError::InvalidRequest(format!("mec_id {mec_id:?} must match [a-z0-9-]{{1,64}}")));
        }
        let link = (self.links)(endpoint).ok_or_else(|| HubError::InvalidRequest(format!("unreachable endpoint {endpoint:?}")))?;
        let mut st = self.state.lock();
        let rec = st.mecs.entry(mec_id.to_owned()).or_insert_with(|| MecRecord {
            mec_id: mec_id.to_owned(),
            tile: tile.clone(),
            endpoint: endpoint.to_owned(),
            datatypes_live: BTreeMap::new(),
            last_heartbeat_ms: now,
        });
        rec.tile = tile;
        rec.endpoint = endpoint.to_owned();
        rec.last_heartbeat_ms = now;
        let rec = rec.clone();
        // A late joiner must still refuse everything banned so far.
        for (image, entry) in st.bans.iter() {
            link.ban(image, &entry.reason);
        }
        st.links.insert(mec_id.to_owned(), link);
        Ok(rec)
    }

    pub fn heartbeat(&self, token: &str, mec_id: &str, datatypes_live: BTreeMap<String, u64>) -> Result<MecRecord, HubError> {
        let now = self.auth(token, Scope::Admin)?;
        let mut st = self.state.lock();
        let rec = st.mecs.get_mut(mec_id).ok_or_else(|| HubError::UnknownMec(mec_id.to_owned()))?;
        rec.last_heartbeat_ms = now;
        merge_last_seen(&mut rec.datatypes_live, &datatypes_live);
        Ok(rec.clone())
    }

    /// Live records, ordered by mec_id.
    pub fn list_mecs(&self) -> Vec<MecRecord> {
        let now = self.clock.now_ms();
        self.state.lock().mecs.values().filter(|r| self.is_live(r, now)).cloned().collect()
    }

    pub fn mec(&self, mec_id: &str) -> Option<MecRecord> {
        self.state.lock().mecs.get(mec_id).cloned()
    }

    /// Deepest containing tile first, then nearest tile centre, then mec_id.
    pub fn resolve_serving_mec(&self, pos: GeoPosition) -> Result<MecRecord, HubError> {
        let now = self.clock.now_ms();
        let st = self.state.lock();
        st.mecs
            .values()
            .filter(|r| self.is_live(r, now))
            .filter(|r| tilegrid::locate(pos, r.tile.level()).is_ok_and(|k| k == r.tile))
            .map(|r| {
                let (lat, lon) = r.tile.to_tile().center();
                (std::cmp::Reverse(r.tile.level()), haversine_m(pos.lat(), pos.lon(), lat, lon), r)
            })
            .min_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.mec_id.cmp(&b.2.mec_id)))
            .map(|(_, _, r)| r.clone())
            .ok_or(HubError::NoServingMec)
    }

    fn matching(&self, st: &State, roi: &BTreeSet<QuadKey>, now: u64) -> Vec<String> {
        st.mecs
            .values()
            .filter(|r| self.is_live(r, now) && roi.iter().any(|k| k.intersects(&r.tile)))
            .map(|r| r.mec_id.clone())
            .collect()
    }

    pub fn browse(&self, token: &str, roi: &BTreeSet<QuadKey>, datatype: &str) -> Result<Vec<BrowseEntry>, HubError> {
        let now = self.auth(token, Scope::Consume)?;
        let st = self.state.lock();
        Ok(self
            .matching(&st, roi, now)
            .into_iter()
            .map(|id| {
                let live = st.mecs[&id]
                    .datatypes_live
                    .get(datatype)
                    .is_some_and(|seen| now.saturating_sub(*seen) <= self.config.live_window_ms);
                BrowseEntry {
                    mec_id: id,
                    datatype: datatype.to_owned(),
                    live,
                }
            })
            .collect())
    }

    pub fn subscribe(&self, token: &str, req: SubscribeRequest) -> Result<ConsumerSubscription, HubError> {
        let now = self.auth(token, Scope::Consume)?;
        if !self.config.tiers.contains(&req.tier) {
            return Err(HubError::UnknownTier(req.tier));
        }
        if req.roi.is_empty() {
            return Err(HubError::InvalidRequest("roi must not be empty".into()));
        }
        let mut st = self.state.lock();
        let matched = self.matching(&st, &req.roi, now);
        if matched.is_empty() {
            return Err(HubError::NoMatchingMec);
        }
        let subscription_id = format!("sub-{}", st.next_subscription);
        let attach = AttachRequest {
            consumer_ref: Some(subscription_id.clone()),
            datatype: req.datatype.clone(),
            tier: req.tier.clone(),
            terms: req.terms,
            roi: req.roi.clone(),
            destination: req.destination,
        };
        let mut ok = Vec::new();
        let mut failures = Vec::new();
        for mec_id in matched {
            match st.links[&mec_id].attach(&attach) {
                Ok(()) => ok.push(mec_id),
                Err(e) => failures.push(AttachFailure {
                    mec_id,
                    code: e.code,
                    message: e.message,
                }),
            }
        }
        if ok.is_empty() {
            return Err(HubError::AllAttachesFailed(failures));
        }
        st.next_subscription += 1;
        let sub = ConsumerSubscription {
            subscription_id: subscription_id.clone(),
            token: token.to_owned(),
            datatype: req.datatype,
            tier: req.tier,
            terms: req.terms,
            roi: req.roi,
            destination: req.destination,
            matched_mecs: ok,
            failures,
            created_ms: now,
            active: true,
            accrued_bytes: 0,
            accrued_compute_mcpu_ms: 0,
        };
        st.subscriptions.insert(subscription_id, sub.clone());
        Ok(sub)
    }

    /// Detaches from every matched MEC. The account stays readable.
    pub fn unsubscribe(&self, token: &str, subscription_id: &str) -> Result<bool, HubError> {
        self.auth(token, Scope::Consume)?;
        let mut st = self.state.lock();
        let st = &mut *st;
        let Some(sub) = st.subscriptions.get_mut(subscription_id).filter(|s| s.active) else {
            return Ok(false);
        };
        sub.active = false;
        for mec_id in &sub.matched_mecs {
            if let Some(link) = st.links.get(mec_id) {
                link.detach(subscription_id);
            }
        }
        Ok(true)
    }

    pub fn subscription(&self, subscription_id: &str) -> Option<ConsumerSubscription> {
        self.state.lock().subscriptions.get(subscription_id).cloned()
    }

    pub fn subscriptions(&self) -> Vec<ConsumerSubscription> {
        self.state.lock().subscriptions.values().cloned().collect()
    }

    /// Applies one node usage report. Replays of an already applied
    /// `(mec_id, seq)` are acknowledged without effect.
    pub fn ingest_usage(&self, token: &str, report: &UsageReport) -> Result<UsageAck, HubError> {
        self.auth(token, Scope::Admin)?;
        let mut st = self.state.lock();
        let st = &mut *st;
        let rec = st.mecs.get_mut(&report.mec_id).ok_or_else(|| HubError::UnknownMec(report.mec_id.clone()))?;
        if !st.seen_reports.entry(report.mec_id.clone()).or_default().insert(report.seq) {
            return Ok(UsageAck { applied: false });
        }
        merge_last_seen(&mut rec.datatypes_live, &report.last_seen_ms);

        for c in &report.consumers {
            let billed = match c.destination {
                Destination::Cloud => c.delivered_bytes_delta,
                Destination::Local => c.declared_bytes_delta,
            };
            match st.subscriptions.get_mut(&c.consumer_ref) {
                Some(sub) => sub.accrued_bytes += billed,
                None => st.unattributed.bytes += billed,
            }
        }
        for p in &report.pipelines {
            let holders: Vec<&String> = p.consumers.iter().filter(|c| c.as_str() != ALWAYS_ON_REF).collect();
            if holders.is_empty() {
                st.unattributed.compute_mcpu_ms += p.compute_mcpu_ms_delta;
                continue;
            }
            for (holder, share) in holders.iter().zip(split_equally(p.compute_mcpu_ms_delta, holders.len())) {
                match st.subscriptions.get_mut(holder.as_str()) {
                    Some(sub) => sub.accrued_compute_mcpu_ms += share,
                    None => st.unattributed.compute_mcpu_ms += share,
                }
            }
        }
        Ok(UsageAck { applied: true })
    }

    pub fn billing_report(&self, token: &str, subscription_id: &str) -> Result<BillingReport, HubError> {
        self.auth(token, Scope::Consume)?;
        let st = self.state.lock();
        let sub = st
            .subscriptions
            .get(subscription_id)
            .ok_or_else(|| HubError::UnknownSubscription(subscription_id.to_owned()))?;
        Ok(BillingReport {
            subscription_id: sub.subscription_id.clone(),
            destination: sub.destination,
            bytes: sub.accrued_bytes,
            compute_mcpu_ms: sub.accrued_compute_mcpu_ms,
            compute_mcpu_s: sub.accrued_compute_mcpu_s(),
        })
    }

    /// Usage not attributable to any hub subscription (always-on pipelines,
    /// compute with no holder, consumers attached directly at a node).
    pub fn unattributed(&self) -> Unattributed {
        self.state.lock().unattributed.clone()
    }

    /// Adds to the global ban list and pushes it to every live MEC. Returns
    /// the number of acknowledgements.
    pub fn propagate_ban(&self, token: &str, image_ref: &str, reason: &str) -> Result<usize, HubError> {
        let now = self.auth(token, Scope::Admin)?;
        let mut st = self.state.lock();
        st.bans.ban(image_ref, reason, now);
        let mut acks = 0;
        for rec in st.mecs.values().filter(|r| self.is_live(r, now)) {
            if st.links.get(&rec.mec_id).is_some_and(|l| l.ban(image_ref, reason)) {
                acks += 1;
            }
        }
        Ok(acks)
    }

    pub fn bans(&self) -> BanList {
        self.state.lock().bans.clone()
    }

    /// Pulls relayed deliveries for a cloud subscription from every matched MEC.
    pub fn collect_deliveries(&self, token: &str, subscription_id: &str) -> Result<Vec<Envelope>, HubError> {
        self.auth(token, Scope::Consume)?;
        let st = self.state.lock();
        let sub = st
            .subscriptions
            .get(subscription_id)
            .ok_or_else(|| HubError::UnknownSubscription(subscription_id.to_owned()))?;
        let mut out = Vec::new();
        for mec_id in &sub.matched_mecs {
            if let Some(link) = st.links.get(mec_id) {
                out.extend(link.fetch_deliveries(subscription_id).into_iter().map(|d| (*d.envelope).clone()));
            }
        }
        Ok(out)
    }
}

fn merge_last_seen(into: &mut BTreeMap<String, u64>, from: &BTreeMap<String, u64>) {
    for (dt, t) in from {
        let slot = into.entry(dt.clone()).or_default();
        *slot = (*slot).max(*t);
    }
}

/// Splits `total` into `n` parts differing by at most one, larger parts first.
pub fn split_equally(total: u64, n: usize) -> Vec<u64> {
    if n == 0 {
        return Vec::new();
    }
    let n64 = n as u64;
    let (q, r) = (total / n64, total % n64);
    (0..n64).map(|i| q + u64::from(i < r)).collect()
}

fn haversine_m(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    const R: f64 = 6_371_008.8;
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * R * a.sqrt().asin()
}
