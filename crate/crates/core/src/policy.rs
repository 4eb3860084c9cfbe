//! SLA tiers, resource admission, licence matching and count-based
//! subsampling.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envelope::LicenseTag;
use crate::tilegrid::QuadKey;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("insufficient {resource}: requested {requested}, available {available}")]
    InsufficientResources {
        resource: Resource,
        requested: u64,
        available: u64,
    },
    #[error("reservation {0} already released")]
    AlreadyReleased(ReservationId),
    #[error("unknown reservation {0}")]
    UnknownReservation(ReservationId),
    #[error("invalid sampling rate {0}")]
    InvalidRate(String),
    #[error("invalid tier {name:?}: {reason}")]
    InvalidTier { name: String, reason: String },
    #[error("unknown tier {0:?}")]
    UnknownTier(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resource {
    Cpu,
    Memory,
    Gpu,
}

impl fmt::Display for Resource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Resource::Cpu => "cpu",
            Resource::Memory => "memory",
            Resource::Gpu => "gpu",
        })
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Rational sampling rate in (0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SamplingRate {
    num: u64,
    den: u64,
}

/// Resolution used when converting a decimal rate to a fraction.
const RATE_RESOLUTION: u64 = 1_000_000;

impl SamplingRate {
    pub const ONE: SamplingRate = SamplingRate { num: 1, den: 1 };

    pub fn new(num: u64, den: u64) -> Result<Self, PolicyError> {
        if num == 0 || den == 0 || num > den {
            return Err(PolicyError::InvalidRate(format!("{num}/{den}")));
        }
        let g = gcd(num, den);
        Ok(Self { num: num / g, den: den / g })
    }

    /// Rounds to the nearest millionth, so decimal rates such as 0.1 become exact fractions.
    pub fn from_f64(rate: f64) -> Result<Self, PolicyError> {
        if !rate.is_finite() || rate <= 0.0 || rate > 1.0 {
            return Err(PolicyError::InvalidRate(rate.to_string()));
        }
        Self::new((rate * RATE_RESOLUTION as f64).round() as u64, RATE_RESOLUTION)
    }

    pub fn numerator(&self) -> u64 {
        self.num
    }

    pub fn denominator(&self) -> u64 {
        self.den
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// floor(n · rate)
    pub fn floor_mul(&self, n: u64) -> u64 {
        ((n as u128 * self.num as u128) / self.den as u128) as u64
    }
}

impl fmt::Display for SamplingRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl Serialize for SamplingRate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_f64())
    }
}

impl<'de> Deserialize<'de> for SamplingRate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        SamplingRate::from_f64(f64::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlaTier {
    pub name: String,
    pub sampling_rate: SamplingRate,
    pub cpu_millicores: u64,
    pub memory_mb: u64,
    #[serde(default)]
    pub gpu: bool,
    #[serde(default = "one")]
    pub max_replicas: u32,
}

fn one() -> u32 {
    1
}

impl SlaTier {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let fail = |reason: &str| {
            Err(PolicyError::InvalidTier {
                name: self.name.clone(),
                reason: reason.into(),
            })
        };
        if self.name.is_empty() {
            return fail("empty name");
        }
        if self.cpu_millicores == 0 || self.memory_mb == 0 {
            return fail("cpu and memory must be positive");
        }
        if self.max_replicas == 0 {
            return fail("max_replicas must be at least 1");
        }
        Ok(())
    }

    /// Per-replica reservation for this tier.
    pub fn demand(&self) -> ResourceDemand {
        ResourceDemand {
            cpu_millicores: self.cpu_millicores,
            memory_mb: self.memory_mb,
            gpu_units: u64::from(self.gpu),
        }
    }
}

/// Named tiers available to consumers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<SlaTier>", into = "Vec<SlaTier>")]
pub struct TierCatalog(BTreeMap<String, SlaTier>);

impl TierCatalog {
    pub fn new(tiers: Vec<SlaTier>) -> Result<Self, PolicyError> {
        let mut map = BTreeMap::new();
        for t in tiers {
            t.validate()?;
            if map.insert(t.name.clone(), t.clone()).is_some() {
                return Err(PolicyError::InvalidTier {
                    name: t.name,
                    reason: "duplicate name".into(),
                });
            }
        }
        Ok(Self(map))
    }

    pub fn get(&self, name: &str) -> Result<&SlaTier, PolicyError> {
        self.0.get(name).ok_or_else(|| PolicyError::UnknownTier(name.to_owned()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn tiers(&self) -> impl Iterator<Item = &SlaTier> {
        self.0.values()
    }

    /// Tier with the smallest CPU reservation.
    pub fn cheapest(&self) -> Option<&SlaTier> {
        self.0.values().min_by_key(|t| (t.cpu_millicores, t.memory_mb, t.name.clone()))
    }
}

impl Default for TierCatalog {
    /// small / medium / large, the last one GPU-backed.
    fn default() -> Self {
        let tier = |name: &str, rate: (u64, u64), cpu, mem, gpu, max_replicas| SlaTier {
            name: name.into(),
            sampling_rate: SamplingRate::new(rate.0, rate.1).expect("static rate"),
            cpu_millicores: cpu,
            memory_mb: mem,
            gpu,
            max_replicas,
        };
        Self::new(vec![
            tier("small", (1, 10), 250, 256, false, 2),
            tier("medium", (1, 2), 500, 512, false, 3),
            tier("large", (1, 1), 1000, 1024, true, 4),
        ])
        .expect("static tiers")
    }
}

impl TryFrom<Vec<SlaTier>> for TierCatalog {
    type Error = PolicyError;
    fn try_from(v: Vec<SlaTier>) -> Result<Self, Self::Error> {
        TierCatalog::new(v)
    }
}

impl From<TierCatalog> for Vec<SlaTier> {
    fn from(c: TierCatalog) -> Self {
        c.0.into_values().collect()
    }
}

/// What the consumer intends to do with the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConsumerTerms {
    pub commercial_use: bool,
    pub redistribution: bool,
}

/// A licence permits delivery when every consumer intent is granted, the
/// delivery tile lies in the geo scope and the licence has not expired.
pub fn license_permits(lic: &LicenseTag, terms: &ConsumerTerms, delivery_tile: &QuadKey, now_ms: u64) -> bool {
    (!terms.commercial_use || lic.commercial_use)
        && (!terms.redistribution || lic.redistribution)
        && lic.geo_scope.as_ref().is_none_or(|scope| scope.contains(delivery_tile))
        && lic.expiry_ms.is_none_or(|exp| now_ms < exp)
}

/// Error-diffusion sampler: after `seen` messages exactly
/// `floor(seen · rate)` have been admitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub rate: SamplingRate,
    pub accepted_count: u64,
    pub seen_count: u64,
}

impl SamplerState {
    pub fn new(rate: SamplingRate) -> Self {
        Self {
            rate,
            accepted_count: 0,
            seen_count: 0,
        }
    }

    pub fn admit(&mut self) -> bool {
        let (ok, next) = sample_admit(*self);
        *self = next;
        ok
    }
}

pub fn sample_admit(state: SamplerState) -> (bool, SamplerState) {
    let seen = state.seen_count + 1;
    let target = state.rate.floor_mul(seen);
    let admit = target > state.accepted_count;
    (
        admit,
        SamplerState {
            rate: state.rate,
            accepted_count: target,
            seen_count: seen,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ResourceDemand {
    pub cpu_millicores: u64,
    pub memory_mb: u64,
    pub gpu_units: u64,
}

impl ResourceDemand {
    pub fn scaled(&self, replicas: u32) -> Self {
        let r = u64::from(replicas);
        Self {
            cpu_millicores: self.cpu_millicores * r,
            memory_mb: self.memory_mb * r,
            gpu_units: self.gpu_units * r,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Capacity {
    pub cpu_millicores_free: u64,
    pub memory_mb_free: u64,
    #[serde(default)]
    pub gpu_units_free: u64,
}

impl Capacity {
    pub fn new(cpu_millicores: u64, memory_mb: u64, gpu_units: u64) -> Self {
        Self {
            cpu_millicores_free: cpu_millicores,
            memory_mb_free: memory_mb,
            gpu_units_free: gpu_units,
        }
    }

    fn check(&self, d: &ResourceDemand) -> Result<(), PolicyError> {
        let checks = [
            (Resource::Cpu, d.cpu_millicores, self.cpu_millicores_free),
            (Resource::Memory, d.memory_mb, self.memory_mb_free),
            (Resource::Gpu, d.gpu_units, self.gpu_units_free),
        ];
        for (resource, requested, available) in checks {
            if requested > available {
                return Err(PolicyError::InsufficientResources {
                    resource,
                    requested,
                    available,
                });
            }
        }
        Ok(())
    }

    /// Subtracts `d` if it fits; otherwise names the first limiting resource.
    pub fn take(&mut self, d: &ResourceDemand) -> Result<(), PolicyError> {
        self.check(d)?;
        self.cpu_millicores_free -= d.cpu_millicores;
        self.memory_mb_free -= d.memory_mb;
        self.gpu_units_free -= d.gpu_units;
        Ok(())
    }

    pub fn give(&mut self, d: &ResourceDemand) {
        self.cpu_millicores_free += d.cpu_millicores;
        self.memory_mb_free += d.memory_mb;
        self.gpu_units_free += d.gpu_units;
    }
}

/// Admits one replica of `tier` against `cap`, decrementing it on success.
pub fn admit_request(tier: &SlaTier, cap: &mut Capacity) -> Result<ResourceDemand, PolicyError> {
    let d = tier.demand();
    cap.take(&d)?;
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ReservationId(pub u64);

impl fmt::Display for ReservationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "res-{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reservation {
    pub id: ReservationId,
    pub demand: ResourceDemand,
}

/// Node-wide bookkeeping of granted reservations. Callers serialise access;
/// each method is all-or-nothing.
#[derive(Debug, Clone)]
pub struct ResourceLedger {
    total: Capacity,
    free: Capacity,
    next_id: u64,
    outstanding: BTreeMap<ReservationId, ResourceDemand>,
    released: BTreeSet<ReservationId>,
}

impl ResourceLedger {
    pub fn new(total: Capacity) -> Self {
        Self {
            total,
            free: total,
            next_id: 1,
            outstanding: BTreeMap::new(),
            released: BTreeSet::new(),
        }
    }

    pub fn total(&self) -> Capacity {
        self.total
    }

    pub fn free(&self) -> Capacity {
        self.free
    }

    pub fn outstanding(&self) -> impl Iterator<Item = (&ReservationId, &ResourceDemand)> {
        self.outstanding.iter()
    }

    pub fn admit(&mut self, tier: &SlaTier) -> Result<Reservation, PolicyError> {
        self.grant(tier.demand())
    }

    pub fn grant(&mut self, demand: ResourceDemand) -> Result<Reservation, PolicyError> {
        self.free.take(&demand)?;
        let id = ReservationId(self.next_id);
        self.next_id += 1;
        self.outstanding.insert(id, demand);
        Ok(Reservation { id, demand })
    }

    pub fn release(&mut self, id: ReservationId) -> Result<Capacity, PolicyError> {
        match self.outstanding.remove(&id) {
            Some(d) => {
                self.free.give(&d);
                self.released.insert(id);
                Ok(self.free)
            }
            None if self.released.contains(&id) => Err(PolicyError::AlreadyReleased(id)),
            None => Err(PolicyError::UnknownReservation(id)),
        }
    }

    /// Changes an outstanding reservation to `demand`, atomically.
    pub fn resize(&mut self, id: ReservationId, demand: ResourceDemand) -> Result<(), PolicyError> {
        let current = *self.outstanding.get(&id).ok_or(if self.released.contains(&id) {
            PolicyError::AlreadyReleased(id)
        } else {
            PolicyError::UnknownReservation(id)
        })?;
        let mut trial = self.free;
        trial.give(&current);
        trial.take(&demand)?;
        self.free = trial;
        self.outstanding.insert(id, demand);
        Ok(())
    }
}
