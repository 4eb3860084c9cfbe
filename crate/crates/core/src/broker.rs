//! In-process topic broker with single-segment wildcards and bounded,
//! drop-oldest subscription queues.
//!
//! Topic convention: raw ingest `mec/<mec_id>/raw/<datatype>`, processed
//! output `mec/<mec_id>/proc/<datatype>`, downlink `downlink/<datatype>`.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::is_name_token;

pub const MAX_SEGMENTS: usize = 8;
pub const WILDCARD: &str = "+";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopicError {
    #[error("topic must have 1 to {MAX_SEGMENTS} segments: {0:?}")]
    SegmentCount(String),
    #[error("invalid topic segment {0:?}")]
    Segment(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TopicName(String);

impl TopicName {
    pub fn parse(s: &str) -> Result<Self, TopicError> {
        split_checked(s, false)?;
        Ok(Self(s.to_owned()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn segments(&self) -> impl Iterator<Item = &str> {
        self.0.split('/')
    }

    pub fn raw(mec_id: &str, datatype: &str) -> Result<Self, TopicError> {
        Self::parse(&format!("mec/{mec_id}/raw/{datatype}"))
    }

    pub fn processed(mec_id: &str, datatype: &str) -> Result<Self, TopicError> {
        Self::parse(&format!("mec/{mec_id}/proc/{datatype}"))
    }

    pub fn downlink(datatype: &str) -> Result<Self, TopicError> {
        Self::parse(&format!("downlink/{datatype}"))
    }
}

impl fmt::Display for TopicName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for TopicName {
    type Err = TopicError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl Serialize for TopicName {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for TopicName {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        TopicName::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// A topic filter where any segment may be `+`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TopicPattern(String);

impl TopicPattern {
    pub fn parse(s: &str) -> Result<Self, TopicError> {
        split_checked(s, true)?;
        Ok(Self(s.to_owned()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn matches(&self, topic: &TopicName) -> bool {
        let mut pat = self.0.split('/');
        let mut top = topic.segments();
        loop {
            match (pat.next(), top.next()) {
                (None, None) => return true,
                (Some(p), Some(t)) if p == WILDCARD || p == t => {}
                _ => return false,
            }
        }
    }
}

impl From<TopicName> for TopicPattern {
    fn from(t: TopicName) -> Self {
        Self(t.0)
    }
}

impl fmt::Display for TopicPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn split_checked(s: &str, allow_wildcard: bool) -> Result<(), TopicError> {
    let segments: Vec<&str> = s.split('/').collect();
    if segments.is_empty() || segments.len() > MAX_SEGMENTS {
        return Err(TopicError::SegmentCount(s.to_owned()));
    }
    for seg in segments {
        let ok = is_name_token(seg) || (allow_wildcard && seg == WILDCARD);
        if !ok {
            return Err(TopicError::Segment(seg.to_owned()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SubscriptionId(pub u64);

impl fmt::Display for SubscriptionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sub-{}", self.0)
    }
}

struct Queue<M> {
    capacity: usize,
    items: Mutex<VecDeque<(TopicName, M)>>,
    dropped: AtomicU64,
}

/// Consumer side of a subscription. Dropping it does not unsubscribe.
pub struct Subscription<M> {
    id: SubscriptionId,
    pattern: TopicPattern,
    queue: Arc<Queue<M>>,
}

impl<M> Subscription<M> {
    pub fn id(&self) -> SubscriptionId {
        self.id
    }

    pub fn pattern(&self) -> &TopicPattern {
        &self.pattern
    }

    pub fn try_recv(&self) -> Option<(TopicName, M)> {
        self.queue.items.lock().pop_front()
    }

    pub fn drain(&self) -> Vec<(TopicName, M)> {
        self.queue.items.lock().drain(..).collect()
    }

    pub fn len(&self) -> usize {
        self.queue.items.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dropped(&self) -> u64 {
        self.queue.dropped.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicCounters {
    pub published: u64,
    pub delivered: u64,
    pub dropped: u64,
}

struct Entry<M> {
    pattern: TopicPattern,
    queue: Arc<Queue<M>>,
}

/// Thread-safe publish/subscribe hub. No retention: subscribers only see
/// messages published after they subscribed.
pub struct Broker<M> {
    next_id: AtomicU64,
    subs: RwLock<BTreeMap<SubscriptionId, Entry<M>>>,
    counters: Mutex<BTreeMap<TopicName, TopicCounters>>,
}

impl<M: Clone> Default for Broker<M> {
    fn default() -> Self {
        Self::new()
    }
}

impl<M: Clone> Broker<M> {
    pub fn new() -> Self {
        Self {
            next_id: AtomicU64::new(1),
            subs: RwLock::new(BTreeMap::new()),
            counters: Mutex::new(BTreeMap::new()),
        }
    }

    /// Enqueues `message` on every matching subscription and returns how many
    /// received it. Full queues drop their oldest entry.
    pub fn publish(&self, topic: &TopicName, message: M) -> usize {
        let subs = self.subs.read();
        let mut delivered = 0usize;
        let mut dropped = 0u64;
        for entry in subs.values().filter(|e| e.pattern.matches(topic)) {
            let mut q = entry.queue.items.lock();
            if q.len() >= entry.queue.capacity {
                q.pop_front();
                entry.queue.dropped.fetch_add(1, Ordering::Relaxed);
                dropped += 1;
            }
            q.push_back((topic.clone(), message.clone()));
            delivered += 1;
        }
        drop(subs);
        let mut counters = self.counters.lock();
        let c = counters.entry(topic.clone()).or_default();
        c.published += 1;
        c.delivered += delivered as u64;
        c.dropped += dropped;
        delivered
    }

    /// # Panics
    /// If `capacity` is zero.
    pub fn subscribe(&self, pattern: TopicPattern, capacity: usize) -> Subscription<M> {
        assert!(capacity > 0, "subscription capacity must be positive");
        let id = SubscriptionId(self.next_id.fetch_add(1, Ordering::Relaxed));
        let queue = Arc::new(Queue {
            capacity,
            items: Mutex::new(VecDeque::new()),
            dropped: AtomicU64::new(0),
        });
        self.subs.write().insert(
            id,
            Entry {
                pattern: pattern.clone(),
                queue: Arc::clone(&queue),
            },
        );
        Subscription { id, pattern, queue }
    }

    pub fn unsubscribe(&self, id: SubscriptionId) -> bool {
        self.subs.write().remove(&id).is_some()
    }

    pub fn subscription_count(&self) -> usize {
        self.subs.read().len()
    }

    /// Patterns of all live subscriptions, in subscription order.
    pub fn patterns(&self) -> Vec<TopicPattern> {
        self.subs.read().values().map(|e| e.pattern.clone()).collect()
    }

    pub fn counters(&self) -> BTreeMap<TopicName, TopicCounters> {
        self.counters.lock().clone()
    }

    pub fn topic_counters(&self, topic: &TopicName) -> TopicCounters {
        self.counters.lock().get(topic).copied().unwrap_or_default()
    }
}

/// Broadcasts a notification on `downlink/<datatype>`. No pipeline involved.
pub fn broadcast_downlink<M: Clone>(broker: &Broker<M>, datatype: &str, notification: M) -> Result<usize, TopicError> {
    Ok(broker.publish(&TopicName::downlink(datatype)?, notification))
}
