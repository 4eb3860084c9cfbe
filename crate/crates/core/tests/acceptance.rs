//! Acceptance run. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::time::Instant;

use common::*;
use mecflow::clock::SimClock;
use mecflow::cloudhub::split_equally;
use mecflow::envelope::{default_blacklist, Envelope, LicenseTag, Payload};
use mecflow::mecnode::{Destination, IngestOutcome};
use mecflow::policy::{ConsumerTerms, SamplingRate, SlaTier, TierCatalog};
use mecflow::sim::{self, LifecycleEventKind, Provisioning, RunMetrics, Scenario};
use mecflow::tilegrid::{locate, quadkey_contains, quadkey_to_tile, tile_to_quadkey, BoundingBox, QuadKey, Tile};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn run(name: &str, mode: Provisioning) -> Result<(Scenario, RunMetrics), String> {
    let s = Scenario::load(&scenario_path(name)).map_err(|e| e.to_string())?;
    let m = sim::run_scenario(&s, mode).map_err(|e| e.to_string())?;
    ensure(m.ingested == m.accepted + m.discarded_no_demand + m.rejected, || format!("{name}: conservation broken"))?;
    Ok((s, m))
}

fn payload_of(e: &Envelope) -> Value {
    match &e.payload {
        Payload::Structured(m) => Value::Object(m.clone()),
        _ => Value::Null,
    }
}

fn inside(inner: &BoundingBox, outer: &BoundingBox) -> bool {
    inner.south >= outer.south && inner.north <= outer.north && inner.west >= outer.west && inner.east <= outer.east
}

fn quadkey_suite() -> Outcome {
    let started = Instant::now();
    let worked = Tile::new(3, 5, 3).unwrap();
    ensure(tile_to_quadkey(worked).as_str() == "213", || "Tile(3,5,3) does not encode to 213".into())?;
    ensure(quadkey_to_tile(&QuadKey::parse("213").unwrap()) == worked, || "213 does not decode to Tile(3,5,3)".into())?;

    let mut cases = 0u64;
    for level in 1..=10u8 {
        let side = 1u32 << level;
        for x in 0..side {
            for y in 0..side {
                let t = Tile::new(x, y, level).unwrap();
                let q = tile_to_quadkey(t);
                ensure(q.level() == level && quadkey_to_tile(&q) == t, || format!("roundtrip failed for {t:?}"))?;
                cases += 1;
            }
        }
    }

    let mut tiles = Vec::new();
    for level in 1..=5u8 {
        for x in 0..1u32 << level {
            for y in 0..1u32 << level {
                let t = Tile::new(x, y, level).unwrap();
                tiles.push((tile_to_quadkey(t), t.bounds()));
            }
        }
    }
    let mut pairs = 0u64;
    for (qa, ba) in &tiles {
        for (qb, bb) in &tiles {
            let geometric = qa.level() <= qb.level() && inside(bb, ba);
            ensure(quadkey_contains(qa, qb) == geometric, || format!("containment mismatch for {qa} / {qb}"))?;
            pairs += 1;
        }
    }
    let elapsed = started.elapsed();
    ensure(elapsed.as_secs() < 10, || format!("took {elapsed:?}"))?;
    Ok(format!("{cases} roundtrips at levels 1-10, {pairs} containment pairs at levels 1-5, {:.2}s", elapsed.as_secs_f64()))
}

fn discard_rule() -> Outcome {
    let (s, m) = run("no_consumer.json", Provisioning::DemandDriven)?;
    ensure(s.producers.len() == 5 && s.consumers.is_empty() && s.duration_ms == 60_000, || "unexpected scenario shape".into())?;
    ensure(m.ingested > 0 && m.discarded_no_demand == m.ingested - m.rejected, || {
        format!("discarded {} of {} (rejected {})", m.discarded_no_demand, m.ingested, m.rejected)
    })?;
    ensure(m.accepted == 0, || format!("{} accepted", m.accepted))?;
    ensure(m.pipelines_deployed == 0 && m.peak_instances == 0, || "pipelines deployed".into())?;
    ensure(m.compute_mcpu_ms_total == 0 && m.compute_mcpu_s.is_empty(), || "compute metered".into())?;
    ensure(m.unattributed_bytes == 0 && m.unattributed_compute_mcpu_ms == 0, || "bytes billed".into())?;
    ensure(m.ticks.iter().all(|r| r.instances == 0 && r.accepted == 0), || "per-tick activity".into())?;
    Ok(format!("{} samples discarded as no-demand", m.discarded_no_demand))
}

fn demand_lifecycle() -> Outcome {
    let (s, m) = run("lifecycle.json", Provisioning::DemandDriven)?;
    let c = &s.consumers[0];
    let tick = s.tick_ms;
    let of = |kind: LifecycleEventKind| m.events.iter().filter(move |e| e.kind == kind).map(|e| e.t_ms).collect::<Vec<_>>();
    let deployed = of(LifecycleEventKind::Deployed);
    let reaped = of(LifecycleEventKind::Reaped);
    ensure(deployed.len() == 1 && deployed[0].abs_diff(c.start_ms) <= tick, || format!("deployments at {deployed:?}"))?;
    let reap_due = c.stop_ms + s.idle_grace_ms;
    ensure(reaped.len() == 1 && reaped[0].abs_diff(reap_due) <= tick, || format!("reaps at {reaped:?}, expected ~{reap_due}"))?;
    for r in &m.ticks {
        let t = r.tick * tick;
        ensure(r.accepted == 0 || (t + tick > c.start_ms && t <= reap_due), || format!("accepted samples at {t} ms"))?;
    }

    let mut reuse = s.clone();
    let mut second = c.clone();
    second.consumer_id = "second-app".into();
    second.start_ms = 20_000;
    second.stop_ms = 50_000;
    reuse.consumers.push(second);
    let r = sim::run_scenario(&reuse, Provisioning::DemandDriven).map_err(|e| e.to_string())?;
    ensure(r.pipelines_deployed == 1 && r.peak_instances == 1, || format!("reuse deployed {} (peak {})", r.pipelines_deployed, r.peak_instances))?;
    ensure(r.peak_refcount == 2, || format!("peak refcount {}", r.peak_refcount))?;
    Ok(format!("deployed at {} ms, reaped at {} ms; reuse peak refcount {}", deployed[0], reaped[0], r.peak_refcount))
}

fn sampling_exactness() -> Outcome {
    let mut seen = Vec::new();
    for (rate, expected) in [(0.1, 100usize), (0.25, 250), (0.5, 500), (1.0, 1000)] {
        let clock = SimClock::new(START_MS);
        let tier = SlaTier {
            name: "t".into(),
            sampling_rate: SamplingRate::from_f64(rate).unwrap(),
            cpu_millicores: 100,
            memory_mb: 64,
            gpu: false,
            max_replicas: 1,
        };
        let node = node_with(&clock, "m1", |cfg| cfg.tiers = TierCatalog::new(vec![tier]).unwrap());
        node.attach_consumer("c", "cam", "t", ConsumerTerms::default(), roi_here(), Destination::Cloud)
            .map_err(|e| e.to_string())?;
        for i in 0..1000u64 {
            let out = node.ingest(&sample("car-1", START_MS + i, LicenseTag::open(), obj(json!({"seq": i}))));
            ensure(out == IngestOutcome::Accepted, || format!("ingest {i} was {out:?}"))?;
        }
        node.pump();
        let delivered = node.take_deliveries("c").len();
        let tap = node.tap("c").unwrap().forwarded_count as usize;
        ensure(delivered == expected && tap == expected, || format!("rate {rate}: delivered {delivered}, tap {tap}, expected {expected}"))?;
        seen.push(delivered.to_string());
    }
    Ok(format!("forwarded {{{}}}", seen.join(", ")))
}

fn license_filtering() -> Outcome {
    let clock = SimClock::new(START_MS);
    let node = node_with(&clock, "m1", |_| {});
    let commercial = ConsumerTerms {
        commercial_use: true,
        redistribution: false,
    };
    node.attach_consumer("strict", "cam", "large", commercial, roi_here(), Destination::Cloud)
        .map_err(|e| e.to_string())?;
    node.attach_consumer("open", "cam", "large", ConsumerTerms::default(), roi_here(), Destination::Cloud)
        .map_err(|e| e.to_string())?;
    let lic = |c: bool| LicenseTag {
        commercial_use: c,
        redistribution: true,
        geo_scope: None,
        expiry_ms: None,
    };
    for i in 0..1000u64 {
        let c = i % 2 == 0;
        let producer = if c { "fleet-commercial" } else { "fleet-private" };
        node.ingest(&sample(producer, START_MS + i, lic(c), obj(json!({"seq": i}))));
    }
    node.pump();
    let strict = node.take_deliveries("strict");
    let open = node.take_deliveries("open");
    for d in &strict {
        ensure(d.envelope.license.commercial_use && d.envelope.producer_id == "fleet-commercial", || {
            format!("leaked {} seq {}", d.envelope.producer_id, payload_of(&d.envelope)["seq"])
        })?;
    }
    ensure(strict.len() == 500, || format!("strict consumer got {}", strict.len()))?;
    ensure(open.len() == 1000, || format!("open consumer got {}", open.len()))?;

    let (_, m) = run("reference.json", Provisioning::DemandDriven)?;
    let insurer = &m.consumers["insurer"];
    ensure(insurer.license_violations == 0 && !insurer.received_by_producer.contains_key("car-2"), || {
        "non-commercial producer reached the commercial consumer".into()
    })?;
    Ok(format!("{} of 1000 forwarded, 0 leaked", strict.len()))
}

fn random_payload(rng: &mut ChaCha8Rng, planted: &[String]) -> Map<String, Value> {
    let mut root = Map::new();
    for i in 0..rng.random_range(1..5) {
        root.insert(format!("f{i}"), json!(rng.random_range(0..1000)));
    }
    for key in planted {
        let depth = rng.random_range(1..=4);
        let mut node = &mut root;
        for d in 1..depth {
            let name = format!("n{d}_{}", rng.random_range(0..3));
            let entry = node.entry(name).or_insert_with(|| Value::Object(Map::new()));
            if !entry.is_object() {
                *entry = Value::Object(Map::new());
            }
            node = entry.as_object_mut().unwrap();
        }
        node.insert(key.clone(), json!("secret"));
    }
    root
}

fn blacklisted_keys(v: &Value, blacklist: &BTreeSet<String>) -> usize {
    match v {
        Value::Object(m) => m.iter().map(|(k, v)| usize::from(blacklist.contains(k)) + blacklisted_keys(v, blacklist)).sum(),
        Value::Array(a) => a.iter().map(|v| blacklisted_keys(v, blacklist)).sum(),
        _ => 0,
    }
}

fn privacy() -> Outcome {
    let blacklist: BTreeSet<String> = default_blacklist().keys().clone();
    let keys: Vec<String> = blacklist.iter().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let clock = SimClock::new(START_MS);
    let node = node_with(&clock, "m1", |_| {});
    node.attach_consumer("c", "cam", "large", ConsumerTerms::default(), roi_here(), Destination::Local)
        .map_err(|e| e.to_string())?;
    let mut planted = 0;
    for i in 0..2000u64 {
        let n = rng.random_range(1..=keys.len());
        let chosen: Vec<String> = (0..n).map(|_| keys[rng.random_range(0..keys.len())].clone()).collect();
        let payload = random_payload(&mut rng, &chosen);
        planted += blacklisted_keys(&Value::Object(payload.clone()), &blacklist);
        node.ingest(&sample("car-1", START_MS + i, LicenseTag::open(), payload));
    }
    node.pump();
    let delivered = node.take_deliveries("c");
    ensure(delivered.len() == 2000, || format!("{} delivered", delivered.len()))?;
    for d in &delivered {
        let left = blacklisted_keys(&payload_of(&d.envelope), &blacklist);
        ensure(left == 0, || format!("{left} blacklisted keys forwarded"))?;
    }
    let (_, m) = run("reference.json", Provisioning::DemandDriven)?;
    let leaks: u64 = m.consumers.values().map(|c| c.privacy_violations).sum();
    ensure(leaks == 0, || format!("{leaks} leaks in the reference run"))?;
    Ok(format!("{planted} planted keys, 0 forwarded"))
}

fn accounting() -> Outcome {
    let (_, m) = run("reference.json", Provisioning::DemandDriven)?;
    let mut bytes = 0;
    for (id, c) in &m.consumers {
        ensure(c.forwarded_bytes > 0, || format!("{id}: nothing forwarded"))?;
        ensure(c.billed_bytes == c.forwarded_bytes, || format!("{id}: billed {} vs tap {}", c.billed_bytes, c.forwarded_bytes))?;
        if c.destination == Some(Destination::Cloud) {
            ensure(c.received_bytes == c.forwarded_bytes, || format!("{id}: received {} vs tap {}", c.received_bytes, c.forwarded_bytes))?;
        }
        bytes += c.billed_bytes;
    }
    let billed: u64 = m.consumers.values().map(|c| c.billed_compute_mcpu_ms).sum::<u64>() + m.unattributed_compute_mcpu_ms;
    ensure(billed == m.compute_mcpu_ms_total, || format!("compute billed {billed} vs metered {}", m.compute_mcpu_ms_total))?;
    for total in [0u64, 1, 7, 999, 1_000_001, u64::MAX] {
        for n in 1..=7 {
            let parts = split_equally(total, n);
            let sum: u128 = parts.iter().map(|&p| p as u128).sum();
            ensure(sum == total as u128 && parts.iter().max().unwrap() - parts.iter().min().unwrap() <= 1, || {
                format!("split of {total} into {n}: {parts:?}")
            })?;
        }
    }
    Ok(format!("{bytes} bytes billed = tapped, {} mCPU·ms fully attributed", m.compute_mcpu_ms_total))
}

fn trust_verification() -> Outcome {
    let (s, m) = run("trust.json", Provisioning::DemandDriven)?;
    let first: Vec<(bool, Option<&str>)> = m.trials.iter().take(3).map(|t| (t.trusted, t.reason.as_deref())).collect();
    let expected = vec![(false, Some("undeclared-topic")), (false, Some("volume-mismatch")), (true, None)];
    ensure(first == expected, || format!("verdicts {first:?}"))?;
    ensure(m.trials[0].ban_acks == Some(s.mecs.len()), || format!("ban acked by {:?}", m.trials[0].ban_acks))?;
    let banned = &m.trials[0].image_ref;
    let retries: BTreeMap<&str, Option<&str>> = m.trials[3..]
        .iter()
        .filter(|t| &t.image_ref == banned)
        .map(|t| (t.mec_id.as_str(), t.reason.as_deref()))
        .collect();
    ensure(retries.len() == 3 && retries.values().all(|r| *r == Some("global-ban")), || format!("retries {retries:?}"))?;
    ensure(m.trials[3..].iter().all(|t| !t.trusted), || "banned image deployed".into())?;
    Ok(format!("Banned, Banned, Trusted; {banned} refused on {} MECs", retries.len()))
}

fn handover() -> Outcome {
    let (s, m) = run("handover.json", Provisioning::DemandDriven)?;
    let p = &s.producers[0];
    let tiles: BTreeMap<QuadKey, &str> = s.mecs.iter().map(|mec| (mec.tile.clone().unwrap(), mec.mec_id.as_str())).collect();
    let mut sweep: Vec<&str> = Vec::new();
    let mut t = 0;
    while t < s.duration_ms {
        let tile = locate(sim::vehicle_position(p, t), s.registration_level).unwrap();
        if let Some(mec) = tiles.get(&tile) {
            sweep.push(mec);
        }
        t += p.resolve_period_ms;
    }
    let geometric = sweep.windows(2).filter(|w| w[0] != w[1]).count() as u64;
    let counted = m.handovers[&p.producer_id];
    ensure(counted == 1 && geometric == 1, || format!("handovers {counted}, geometric sweep {geometric}"))?;

    let changes = &m.serving[&p.producer_id];
    let (from, to) = (&changes[0].mec_id, &changes[1].mec_id);
    let at = changes[1].t_ms;
    let ingest = &m.producer_ingest[&p.producer_id];
    let old = &ingest[from];
    let new = &ingest[to];
    ensure(old.last_ms.unwrap() < at && new.first_ms.unwrap() >= at, || {
        format!("{from} last {:?}, {to} first {:?}, handover at {at}", old.last_ms, new.first_ms)
    })?;
    let c = m.consumers.values().next().unwrap();
    ensure(c.received_count == old.accepted + new.accepted, || "samples lost across handover".into())?;
    Ok(format!("1 handover {from} -> {to} at {at} ms; {} samples after it went to {to} only", new.ingested))
}

fn determinism() -> Outcome {
    let s = Scenario::load(&scenario_path("reference.json")).map_err(|e| e.to_string())?;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let m = sim::run_scenario(&s, Provisioning::DemandDriven).map_err(|e| e.to_string())?;
        sim::export_metrics(&m, d.path()).map_err(|e| e.to_string())?;
    }
    for file in ["summary.json", "ticks.csv"] {
        let a = fs::read(dirs[0].path().join(file)).unwrap();
        let b = fs::read(dirs[1].path().join(file)).unwrap();
        ensure(a == b, || format!("{file} differs between runs"))?;
    }
    let (_, demand) = run("no_consumer.json", Provisioning::DemandDriven)?;
    let (_, always) = run("no_consumer.json", Provisioning::AlwaysOn)?;
    ensure(demand.compute_mcpu_ms_total == 0, || "demand-driven burned compute".into())?;
    ensure(always.compute_mcpu_ms_total > 0, || "always-on burned no compute".into())?;
    Ok(format!(
        "identical exports; no-consumer compute {} vs {} mCPU·s (always-on)",
        demand.compute_mcpu_ms_total / 1000,
        always.compute_mcpu_ms_total / 1000
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("quadkey suite", quadkey_suite),
        ("discard rule", discard_rule),
        ("demand lifecycle", demand_lifecycle),
        ("sampling exactness", sampling_exactness),
        ("license filtering", license_filtering),
        ("privacy", privacy),
        ("accounting conservation", accounting),
        ("trust verification", trust_verification),
        ("handover", handover),
        ("determinism and baseline", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS criterion {}: {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {}: {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
