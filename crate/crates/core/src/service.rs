//! HTTP front ends for a MEC node and the cloud hub.
//!
//! Both wrap the same core objects the simulator drives. Hub to node calls go
//! through [`HttpMecLink`]; blocking client calls run on tokio's blocking pool.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path as FsPath, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::clock::{Clock, SystemClock};
use crate::cloudhub::{
    AttachRequest, CloudHub, HubConfig, HubError, LinkError, LinkFactory, MecLink, MecRecord, Scope, SubscribeRequest, TokenTable, UsageAck,
};
use crate::envelope;
use crate::lifecycle::{load_descriptor, BanReason, HostedServiceDescriptor, ScriptedService, TrustStore, TrustVerdict};
use crate::mecnode::{Delivery, IngestOutcome, MecConfig, MecNode, NodeError, UsageReport};
use crate::tilegrid::{GeoPosition, QuadKey};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

/// JSON error body shared by both services.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
}

struct Failure(StatusCode, ApiError);

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

fn failure(status: StatusCode, code: &str, message: impl Into<String>) -> Failure {
    Failure(
        status,
        ApiError {
            code: code.to_owned(),
            message: message.into(),
        },
    )
}

fn unauthorized() -> Failure {
    failure(StatusCode::UNAUTHORIZED, "unauthorized", "missing, expired or insufficiently scoped token")
}

impl From<HubError> for Failure {
    fn from(e: HubError) -> Self {
        let status = match &e {
            HubError::Unauthorized => StatusCode::UNAUTHORIZED,
            HubError::UnknownMec(_) | HubError::NoServingMec | HubError::NoMatchingMec | HubError::UnknownSubscription(_) => StatusCode::NOT_FOUND,
            HubError::AllAttachesFailed(_) => StatusCode::CONFLICT,
            HubError::UnknownTier(_) | HubError::InvalidRequest(_) => StatusCode::BAD_REQUEST,
        };
        failure(status, e.code(), e.to_string())
    }
}

impl From<NodeError> for Failure {
    fn from(e: NodeError) -> Self {
        let status = match e.code() {
            "unknown-tier" | "invalid-roi" | "topic" | "config" => StatusCode::BAD_REQUEST,
            "already-attached" => StatusCode::CONFLICT,
            "banned-image" => StatusCode::FORBIDDEN,
            "unknown-datatype" => StatusCode::NOT_FOUND,
            "insufficient-resources" => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        failure(status, e.code(), e.to_string())
    }
}

fn bearer(headers: &HeaderMap) -> &str {
    headers
        .get(axum::http::header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .unwrap_or("")
}

fn json_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, Failure> {
    serde_json::from_slice(body).map_err(|e| failure(StatusCode::BAD_REQUEST, "invalid-request", e.to_string()))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, Failure> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| failure(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))
}

/// A delivery as carried over HTTP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDelivery {
    pub consumer_ref: String,
    pub relay_hops: u8,
    pub envelope: Value,
}

impl From<&Delivery> for WireDelivery {
    fn from(d: &Delivery) -> Self {
        let bytes = envelope::serialize_envelope(&d.envelope);
        Self {
            consumer_ref: d.consumer_ref.clone(),
            relay_hops: d.relay_hops,
            envelope: serde_json::from_slice(&bytes).expect("serialized envelope is JSON"),
        }
    }
}

// ---------------------------------------------------------------- client

/// Hub-side link to a node reached over HTTP.
pub struct HttpMecLink {
    base: String,
    token: String,
    agent: ureq::Agent,
}

pub fn http_agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(10)))
        .http_status_as_error(false)
        .build()
        .into()
}

impl HttpMecLink {
    pub fn new(base: &str, token: &str) -> Self {
        Self {
            base: base.trim_end_matches('/').to_owned(),
            token: token.to_owned(),
            agent: http_agent(),
        }
    }

    fn auth(&self) -> String {
        format!("Bearer {}", self.token)
    }
}

fn link_error(code: &str, message: impl ToString) -> LinkError {
    LinkError {
        code: code.to_owned(),
        message: message.to_string(),
    }
}

impl MecLink for HttpMecLink {
    fn attach(&self, req: &AttachRequest) -> Result<(), LinkError> {
        let mut resp = self
            .agent
            .post(&format!("{}/consumers", self.base))
            .header("Authorization", &self.auth())
            .send_json(req)
            .map_err(|e| link_error("unreachable", e))?;
        if resp.status().is_success() {
            return Ok(());
        }
        match resp.body_mut().read_json::<ApiError>() {
            Ok(e) => Err(LinkError {
                code: e.code,
                message: e.message,
            }),
            Err(_) => Err(link_error("http", resp.status())),
        }
    }

    fn detach(&self, consumer_ref: &str) -> bool {
        let resp = self
            .agent
            .delete(&format!("{}/consumers/{consumer_ref}", self.base))
            .header("Authorization", &self.auth())
            .call();
        match resp {
            Ok(mut r) if r.status().is_success() => r.body_mut().read_json::<Value>().is_ok_and(|v| v["detached"] == json!(true)),
            _ => false,
        }
    }

    fn ban(&self, image_ref: &str, reason: &str) -> bool {
        self.agent
            .post(&format!("{}/bans", self.base))
            .header("Authorization", &self.auth())
            .send_json(json!({"image_ref": image_ref, "reason": reason}))
            .is_ok_and(|r| r.status().is_success())
    }

    fn fetch_deliveries(&self, consumer_ref: &str) -> Vec<Delivery> {
        let resp = self
            .agent
            .get(&format!("{}/consumers/{consumer_ref}/deliveries", self.base))
            .header("Authorization", &self.auth())
            .call();
        let Ok(mut resp) = resp.map_err(|e| tracing::warn!(error = %e, "fetching deliveries")) else {
            return Vec::new();
        };
        let wire: Vec<WireDelivery> = resp.body_mut().read_json().unwrap_or_default();
        wire.into_iter()
            .filter_map(|w| {
                let e = envelope::parse_envelope(w.envelope.to_string().as_bytes()).ok()?;
                Some(Delivery {
                    consumer_ref: w.consumer_ref,
                    envelope: Arc::new(e),
                    relay_hops: w.relay_hops,
                })
            })
            .collect()
    }
}

pub fn http_links(token: String) -> LinkFactory {
    Box::new(move |endpoint| {
        let ok = endpoint.starts_with("http://") || endpoint.starts_with("https://");
        ok.then(|| Arc::new(HttpMecLink::new(endpoint, &token)) as Arc<dyn MecLink>)
    })
}

// ---------------------------------------------------------------- node

fn default_node_listen() -> String {
    "127.0.0.1:8081".into()
}

fn default_tick() -> u64 {
    1_000
}

fn default_report() -> u64 {
    5_000
}

fn default_heartbeat() -> u64 {
    crate::cloudhub::DEFAULT_HEARTBEAT_PERIOD_MS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HubLinkConfig {
    pub url: String,
    /// Admin-scoped token used for registration, heartbeats and usage.
    pub token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeServiceConfig {
    #[serde(default = "default_node_listen")]
    pub listen: String,
    pub mec: MecConfig,
    #[serde(default)]
    pub tokens: TokenTable,
    /// key_id → hex Ed25519 public key.
    #[serde(default)]
    pub trust: BTreeMap<String, String>,
    /// Pipeline descriptor files; each needs a `.sig` sidecar. Relative paths
    /// resolve against the config file's directory.
    #[serde(default)]
    pub descriptors: Vec<PathBuf>,
    #[serde(default)]
    pub hub: Option<HubLinkConfig>,
    #[serde(default = "default_tick")]
    pub tick_ms: u64,
    #[serde(default = "default_report")]
    pub report_period_ms: u64,
    #[serde(default = "default_heartbeat")]
    pub heartbeat_period_ms: u64,
}

pub fn load_config<T: serde::de::DeserializeOwned>(path: &FsPath) -> Result<T, ServiceError> {
    let text = std::fs::read_to_string(path).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))
}

pub struct NodeApp {
    pub node: Arc<MecNode>,
    pub tokens: TokenTable,
    pub hub: Option<HubLinkConfig>,
    next_ref: AtomicU64,
    agent: ureq::Agent,
}

impl NodeApp {
    pub fn new(node: Arc<MecNode>, tokens: TokenTable, hub: Option<HubLinkConfig>) -> Self {
        Self {
            node,
            tokens,
            hub,
            next_ref: AtomicU64::new(1),
            agent: http_agent(),
        }
    }

    /// Builds a node from its service config, loading signed descriptors.
    pub fn from_config(cfg: &NodeServiceConfig, base_dir: &FsPath, clock: Arc<dyn Clock>) -> Result<Self, ServiceError> {
        let trust = TrustStore::from_hex_map(&cfg.trust).map_err(|e| ServiceError::Config(e.to_string()))?;
        let descriptors = cfg
            .descriptors
            .iter()
            .map(|p| load_descriptor(&base_dir.join(p)).map_err(|e| ServiceError::Config(format!("{}: {e}", p.display()))))
            .collect::<Result<Vec<_>, _>>()?;
        if cfg.tick_ms == 0 || cfg.report_period_ms == 0 || cfg.heartbeat_period_ms == 0 {
            return Err(ServiceError::Config("periods must be positive".into()));
        }
        let node = MecNode::new(cfg.mec.clone(), trust, descriptors, clock).map_err(|e| ServiceError::Config(e.to_string()))?;
        Ok(Self::new(Arc::new(node), cfg.tokens.clone(), cfg.hub.clone()))
    }

    fn check(&self, headers: &HeaderMap, scope: Scope) -> Result<(), Failure> {
        self.tokens
            .check(bearer(headers), scope, self.node.now_ms())
            .map_err(|_| unauthorized())
    }

    fn hub_post(&self, path: &str, body: &impl Serialize) -> Result<(), String> {
        let Some(hub) = &self.hub else { return Ok(()) };
        let resp = self
            .agent
            .post(&format!("{}{path}", hub.url.trim_end_matches('/')))
            .header("Authorization", &format!("Bearer {}", hub.token))
            .send_json(body)
            .map_err(|e| e.to_string())?;
        if resp.status().is_success() {
            Ok(())
        } else {
            Err(format!("hub answered {}", resp.status()))
        }
    }

    /// Produces the next usage report and forwards it to the hub if one is configured.
    pub fn report(&self) -> UsageReport {
        let report = self.node.report_usage();
        if let Err(e) = self.hub_post("/usage", &report) {
            tracing::warn!(error = %e, seq = report.seq, "usage report not delivered");
        }
        report
    }

    pub fn register_with_hub(&self) -> Result<(), String> {
        let c = self.node.config();
        self.hub_post("/mecs", &json!({"mec_id": c.mec_id, "tile": c.tile, "endpoint": c.endpoint}))
    }

    pub fn heartbeat(&self) -> Result<(), String> {
        let seen = self.node.counters().last_seen_ms;
        self.hub_post(&format!("/mecs/{}/heartbeat", self.node.id()), &json!({"datatypes_live": seen}))
    }
}

pub fn node_router(app: Arc<NodeApp>) -> Router {
    Router::new()
        .route("/ingest", post(node_ingest))
        .route("/consumers", post(node_attach))
        .route("/consumers/{consumer_ref}", delete(node_detach))
        .route("/consumers/{consumer_ref}/deliveries", get(node_deliveries))
        .route("/usage", get(node_usage))
        .route("/health", get(node_health))
        .route("/metrics", get(node_metrics))
        .route("/downlink", post(node_downlink))
        .route("/bans", post(node_ban))
        .route("/hosted-services", post(node_hosted))
        .with_state(app)
}

async fn node_ingest(State(app): State<Arc<NodeApp>>, headers: HeaderMap, body: Bytes) -> Result<Response, Failure> {
    app.check(&headers, Scope::Produce)?;
    let outcome = app.node.ingest(&body);
    let status = match outcome {
        IngestOutcome::Rejected(_) => StatusCode::UNPROCESSABLE_ENTITY,
        _ => StatusCode::OK,
    };
    Ok((status, Json(outcome)).into_response())
}

async fn node_attach(State(app): State<Arc<NodeApp>>, headers: HeaderMap, body: Bytes) -> Result<Response, Failure> {
    app.check(&headers, Scope::Consume)?;
    let req: AttachRequest = json_body(&body)?;
    let consumer_ref = req
        .consumer_ref
        .clone()
        .unwrap_or_else(|| format!("{}-c{}", app.node.id(), app.next_ref.fetch_add(1, Ordering::Relaxed)));
    let tap = app
        .node
        .attach_consumer(&consumer_ref, &req.datatype, &req.tier, req.terms, req.roi, req.destination)?;
    Ok((StatusCode::CREATED, Json(json!({"consumer_ref": tap.consumer_ref, "pipeline": tap.pipeline}))).into_response())
}

async fn node_detach(State(app): State<Arc<NodeApp>>, headers: HeaderMap, Path(consumer_ref): Path<String>) -> Result<Response, Failure> {
    app.check(&headers, Scope::Consume)?;
    let detached = app.node.detach_consumer(&consumer_ref);
    Ok(Json(json!({"detached": detached})).into_response())
}

async fn node_deliveries(State(app): State<Arc<NodeApp>>, headers: HeaderMap, Path(consumer_ref): Path<String>) -> Result<Response, Failure> {
    app.check(&headers, Scope::Consume)?;
    app.node.pump();
    let out: Vec<WireDelivery> = app.node.take_deliveries(&consumer_ref).iter().map(WireDelivery::from).collect();
    Ok(Json(out).into_response())
}

async fn node_usage(State(app): State<Arc<NodeApp>>, headers: HeaderMap) -> Result<Response, Failure> {
    app.check(&headers, Scope::Admin)?;
    let report = blocking(move || app.report()).await?;
    Ok(Json(report).into_response())
}

async fn node_health(State(app): State<Arc<NodeApp>>) -> Json<Value> {
    Json(json!({"status": "ok", "mec_id": app.node.id()}))
}

async fn node_metrics(State(app): State<Arc<NodeApp>>, headers: HeaderMap) -> Result<Response, Failure> {
    app.check(&headers, Scope::Admin)?;
    Ok(Json(app.node.metrics()).into_response())
}

#[derive(Deserialize)]
struct DownlinkBody {
    datatype: String,
    payload: Value,
}

async fn node_downlink(State(app): State<Arc<NodeApp>>, headers: HeaderMap, body: Bytes) -> Result<Response, Failure> {
    app.check(&headers, Scope::Consume)?;
    let b: DownlinkBody = json_body(&body)?;
    let delivered = app.node.broadcast_downlink(&b.datatype, b.payload)?;
    Ok(Json(json!({"delivered": delivered})).into_response())
}

#[derive(Deserialize)]
struct BanBody {
    image_ref: String,
    #[serde(default)]
    reason: String,
}

async fn node_ban(State(app): State<Arc<NodeApp>>, headers: HeaderMap, body: Bytes) -> Result<Response, Failure> {
    app.check(&headers, Scope::Admin)?;
    let b: BanBody = json_body(&body)?;
    app.node.apply_ban(&b.image_ref, &b.reason);
    Ok(Json(json!({"acknowledged": true})).into_response())
}

#[derive(Deserialize)]
struct HostedBody {
    descriptor: HostedServiceDescriptor,
    behaviour: ScriptedService,
}

async fn node_hosted(State(app): State<Arc<NodeApp>>, headers: HeaderMap, body: Bytes) -> Result<Response, Failure> {
    app.check(&headers, Scope::HostService)?;
    let b: HostedBody = json_body(&body)?;
    let verdict = blocking(move || {
        let mut candidate = b.behaviour;
        let verdict = app.node.deploy_hosted_service(&b.descriptor, &mut candidate);
        if let TrustVerdict::Banned { reason } = &verdict {
            if !matches!(reason, BanReason::GlobalBan | BanReason::Signature { .. }) {
                let body = json!({"image_ref": b.descriptor.image_ref, "reason": reason.code()});
                if let Err(e) = app.hub_post("/bans", &body) {
                    tracing::warn!(error = %e, "ban not propagated");
                }
            }
        }
        verdict
    })
    .await?;
    Ok(Json(verdict).into_response())
}

/// Runs the node API plus its maintenance loop until ctrl-c.
pub async fn serve_node(cfg: NodeServiceConfig, base_dir: &FsPath) -> Result<(), ServiceError> {
    let app = Arc::new(NodeApp::from_config(&cfg, base_dir, Arc::new(SystemClock))?);
    let addr: SocketAddr = cfg.listen.parse().map_err(|e| ServiceError::Config(format!("listen {:?}: {e}", cfg.listen)))?;
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| ServiceError::Runtime(format!("bind {addr}: {e}")))?;
    tracing::info!(%addr, mec_id = app.node.id(), "node listening");

    let bg = app.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_millis(cfg.tick_ms));
        let (mut since_report, mut since_heartbeat) = (0u64, u64::MAX);
        let mut registered = false;
        loop {
            tick.tick().await;
            let app = bg.clone();
            let (report_due, heartbeat_due) = (since_report >= cfg.report_period_ms, since_heartbeat >= cfg.heartbeat_period_ms);
            let reg = registered;
            let result = tokio::task::spawn_blocking(move || {
                app.node.tick();
                let mut reg = reg;
                if heartbeat_due && app.hub.is_some() {
                    let r = if reg { app.heartbeat() } else { app.register_with_hub() };
                    match r {
                        Ok(()) => reg = true,
                        Err(e) => tracing::warn!(error = %e, "hub unreachable"),
                    }
                }
                if report_due {
                    app.report();
                }
                reg
            })
            .await;
            registered = result.unwrap_or(registered);
            since_report = if report_due { cfg.tick_ms } else { since_report + cfg.tick_ms };
            since_heartbeat = if heartbeat_due { cfg.tick_ms } else { since_heartbeat.saturating_add(cfg.tick_ms) };
        }
    });

    axum::serve(listener, node_router(app))
        .with_graceful_shutdown(shutdown())
        .await
        .map_err(|e| ServiceError::Runtime(e.to_string()))
}

async fn shutdown() {
    let _ = tokio::signal::ctrl_c().await;
}

// ---------------------------------------------------------------- hub

fn default_hub_listen() -> String {
    "127.0.0.1:8080".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HubServiceConfig {
    #[serde(default = "default_hub_listen")]
    pub listen: String,
    /// Token presented to nodes when attaching consumers or pushing bans.
    pub node_token: String,
    #[serde(flatten)]
    pub hub: HubConfig,
}

pub type HubApp = CloudHub;

pub fn hub_router(hub: Arc<HubApp>) -> Router {
    Router::new()
        .route("/mecs", post(hub_register).get(hub_list))
        .route("/mecs/{mec_id}/heartbeat", post(hub_heartbeat))
        .route("/browse", get(hub_browse))
        .route("/subscriptions", post(hub_subscribe))
        .route("/subscriptions/{id}", delete(hub_unsubscribe))
        .route("/subscriptions/{id}/billing", get(hub_billing))
        .route("/subscriptions/{id}/deliveries", get(hub_deliveries))
        .route("/usage", post(hub_usage))
        .route("/bans", post(hub_ban))
        .route("/resolve", get(hub_resolve))
        .route("/health", get(|| async { Json(json!({"status": "ok"})) }))
        .with_state(hub)
}

#[derive(Deserialize)]
struct RegisterBody {
    mec_id: String,
    tile: QuadKey,
    endpoint: String,
}

async fn hub_register(State(hub): State<Arc<HubApp>>, headers: HeaderMap, body: Bytes) -> Result<Response, Failure> {
    let token = bearer(&headers).to_owned();
    hub.authorize(&token, Scope::Admin)?;
    let b: RegisterBody = json_body(&body)?;
    let rec: MecRecord = blocking(move || hub.register_mec(&token, &b.mec_id, b.tile, &b.endpoint)).await??;
    Ok((StatusCode::CREATED, Json(rec)).into_response())
}

async fn hub_list(State(hub): State<Arc<HubApp>>, headers: HeaderMap) -> Result<Response, Failure> {
    hub.authorize(bearer(&headers), Scope::Consume)?;
    Ok(Json(hub.list_mecs()).into_response())
}

#[derive(Deserialize, Default)]
struct HeartbeatBody {
    #[serde(default)]
    datatypes_live: BTreeMap<String, u64>,
}

async fn hub_heartbeat(State(hub): State<Arc<HubApp>>, headers: HeaderMap, Path(mec_id): Path<String>, body: Bytes) -> Result<Response, Failure> {
    hub.authorize(bearer(&headers), Scope::Admin)?;
    let b: HeartbeatBody = if body.is_empty() { HeartbeatBody::default() } else { json_body(&body)? };
    Ok(Json(hub.heartbeat(bearer(&headers), &mec_id, b.datatypes_live)?).into_response())
}

#[derive(Deserialize)]
struct BrowseQuery {
    roi: String,
    datatype: String,
}

fn parse_roi(s: &str) -> Result<std::collections::BTreeSet<QuadKey>, Failure> {
    s.split(',')
        .filter(|k| !k.is_empty())
        .map(|k| QuadKey::parse(k.trim()).map_err(|e| failure(StatusCode::BAD_REQUEST, "invalid-request", e.to_string())))
        .collect()
}

async fn hub_browse(State(hub): State<Arc<HubApp>>, headers: HeaderMap, Query(q): Query<BrowseQuery>) -> Result<Response, Failure> {
    hub.authorize(bearer(&headers), Scope::Consume)?;
    let roi = parse_roi(&q.roi)?;
    Ok(Json(hub.browse(bearer(&headers), &roi, &q.datatype)?).into_response())
}

async fn hub_subscribe(State(hub): State<Arc<HubApp>>, headers: HeaderMap, body: Bytes) -> Result<Response, Failure> {
    let token = bearer(&headers).to_owned();
    hub.authorize(&token, Scope::Consume)?;
    let req: SubscribeRequest = json_body(&body)?;
    let sub = blocking(move || hub.subscribe(&token, req)).await??;
    Ok((StatusCode::CREATED, Json(sub)).into_response())
}

async fn hub_unsubscribe(State(hub): State<Arc<HubApp>>, headers: HeaderMap, Path(id): Path<String>) -> Result<Response, Failure> {
    let token = bearer(&headers).to_owned();
    let done = blocking(move || hub.unsubscribe(&token, &id)).await??;
    Ok(Json(json!({"unsubscribed": done})).into_response())
}

async fn hub_billing(State(hub): State<Arc<HubApp>>, headers: HeaderMap, Path(id): Path<String>) -> Result<Response, Failure> {
    Ok(Json(hub.billing_report(bearer(&headers), &id)?).into_response())
}

async fn hub_deliveries(State(hub): State<Arc<HubApp>>, headers: HeaderMap, Path(id): Path<String>) -> Result<Response, Failure> {
    let token = bearer(&headers).to_owned();
    let envs = blocking(move || hub.collect_deliveries(&token, &id)).await??;
    let out: Vec<Value> = envs
        .iter()
        .map(|e| serde_json::from_slice(&envelope::serialize_envelope(e)).expect("serialized envelope is JSON"))
        .collect();
    Ok(Json(out).into_response())
}

async fn hub_usage(State(hub): State<Arc<HubApp>>, headers: HeaderMap, body: Bytes) -> Result<Response, Failure> {
    hub.authorize(bearer(&headers), Scope::Admin)?;
    let report: UsageReport = json_body(&body)?;
    let ack: UsageAck = hub.ingest_usage(bearer(&headers), &report)?;
    Ok(Json(ack).into_response())
}

async fn hub_ban(State(hub): State<Arc<HubApp>>, headers: HeaderMap, body: Bytes) -> Result<Response, Failure> {
    let token = bearer(&headers).to_owned();
    hub.authorize(&token, Scope::Admin)?;
    let b: BanBody = json_body(&body)?;
    let acks = blocking(move || hub.propagate_ban(&token, &b.image_ref, &b.reason)).await??;
    Ok(Json(json!({"acks": acks})).into_response())
}

#[derive(Deserialize)]
struct ResolveQuery {
    lat: f64,
    lon: f64,
}

async fn hub_resolve(State(hub): State<Arc<HubApp>>, headers: HeaderMap, Query(q): Query<ResolveQuery>) -> Result<Response, Failure> {
    hub.authorize(bearer(&headers), Scope::Produce)?;
    let pos = GeoPosition::new(q.lat, q.lon).map_err(|e| failure(StatusCode::BAD_REQUEST, "invalid-request", e.to_string()))?;
    Ok(Json(hub.resolve_serving_mec(pos)?).into_response())
}

pub fn hub_from_config(cfg: &HubServiceConfig, clock: Arc<dyn Clock>) -> CloudHub {
    CloudHub::new(cfg.hub.clone(), clock, http_links(cfg.node_token.clone()))
}

pub async fn serve_hub(cfg: HubServiceConfig) -> Result<(), ServiceError> {
    let addr: SocketAddr = cfg.listen.parse().map_err(|e| ServiceError::Config(format!("listen {:?}: {e}", cfg.listen)))?;
    let hub = Arc::new(hub_from_config(&cfg, Arc::new(SystemClock)));
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| ServiceError::Runtime(format!("bind {addr}: {e}")))?;
    tracing::info!(%addr, "hub listening");
    axum::serve(listener, hub_router(hub))
        .with_graceful_shutdown(shutdown())
        .await
        .map_err(|e| ServiceError::Runtime(e.to_string()))
}
