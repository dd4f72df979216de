//! Acceptance run. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Every tolerance is a named constant.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use ctxmesh_core::broker::Broker;
use ctxmesh_core::broker::Notification;
use ctxmesh_core::datamodel::{harmonize, validate, DataModel, ModelCatalog, RequiredAttribute};
use ctxmesh_core::discovery::Discovery;
use ctxmesh_core::federation::{merge_elements, FederationConfig, FederationNode, MergePolicy};
use ctxmesh_core::harness::{run_scenario, Recorder, ScenarioReport, Script, SimNet, CLIENT};
use ctxmesh_core::history::{
    segment_name, AggregateOp, AggregateQuery, HistoryStore, RawQuery, SegmentLog,
};
use ctxmesh_core::model::{from_value_typed, to_canonical_string, ANY_TYPE};
use ctxmesh_core::net::to_value;
use ctxmesh_core::{ContextElement, EntityRef};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};

const THETAS: [u64; 4] = [0, 50, 250, 1000];
const EVENTS_PER_SCHEDULE: usize = 1_000;
const SCHEDULE_SEEDS: [u64; 3] = [11, 12, 13];
/// Minimum spacing slack: none, the bound is exact.
const SPACING_SLACK_MS: u64 = 0;
/// Latency slack for aggregation: none, the bound is exact.
const LATENCY_SLACK_MS: u64 = 0;
const THROTTLE_TIME_LIMIT: Duration = Duration::from_secs(5);
const FEDERATION_STORES: usize = 200;
const FEDERATION_TIME_LIMIT: Duration = Duration::from_secs(10);
const DISCOVERY_EVENTS: usize = 1_000;
const AVG_RELATIVE_TOLERANCE: f64 = 1e-9;
const THROUGHPUT_TARGET: f64 = 10_000.0;
/// Within 2x of the target counts as passing.
const THROUGHPUT_FLOOR: f64 = THROUGHPUT_TARGET / 2.0;
const THROUGHPUT_STORE: usize = 1_000;
const THROUGHPUT_UPDATES: usize = 20_000;

type Outcome = Result<String, String>;

fn repo() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn element(ty: &str, id: &str, attrs: &[(&str, &str, Value, Option<u64>)]) -> Value {
    let attributes: Vec<Value> = attrs
        .iter()
        .map(|(name, t, v, ts)| {
            let metadata = match ts {
                Some(ts) => json!([{"name": "timestamp", "type": "number", "value": ts}]),
                None => json!([]),
            };
            json!({"name": name, "type": t, "value": v, "metadata": metadata})
        })
        .collect();
    json!({"entity": {"type": ty, "id": id}, "attributes": attributes})
}

fn call(net: &SimNet, node: &str, path: &str, body: &Value) -> Result<Value, String> {
    net.request_from(CLIENT, &format!("mem://{node}{path}"), body)
        .map_err(|e| format!("{node}{path}: {e}"))
}

// ---------------------------------------------------------------------------
// Throttling (criteria 1-3)

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Policy {
    Drop,
    AggregateSet,
}

struct ThrottleRun {
    theta: u64,
    seed: u64,
    /// `(publish time, entity id, value)`, values unique.
    events: Vec<(u64, String, i64)>,
    /// Per policy: `(arrival time, [(entity, value)])` in arrival order.
    notifications: BTreeMap<Policy, Vec<(u64, Vec<(String, i64)>)>>,
}

fn throttle_run(theta: u64, seed: u64) -> Result<ThrottleRun, String> {
    let mut rng = StdRng::seed_from_u64(seed * 1_000 + theta);
    let net = SimNet::default();
    net.add_node("b", Arc::new(Broker::new("b", net.clock_arc(), net.transport("b"))));
    let rec = Arc::new(Recorder::new(net.clock_arc()));
    net.add_node("c", rec.clone());

    let mut ids = BTreeMap::new();
    for (policy, name) in [(Policy::Drop, "drop"), (Policy::AggregateSet, "aggregateSet")] {
        let sub = json!({"entities": [{"type": "Sensor", "id": ".*", "isPattern": true}],
                         "notifyEndpoint": "mem://c/notify", "throttling": theta, "policy": name});
        let v = call(&net, "b", "/v1/subscribeContext", &sub)?;
        ids.insert(v["subscriptionId"].as_str().unwrap_or_default().to_string(), policy);
    }

    let mut t = 1u64;
    let mut events = Vec::with_capacity(EVENTS_PER_SCHEDULE);
    for i in 0..EVENTS_PER_SCHEDULE {
        if !rng.gen_bool(0.3) {
            t += rng.gen_range(0..=2 * theta.max(5));
        }
        let id = format!("s{}", rng.gen_range(0..5));
        net.run_until(t);
        let e = element("Sensor", &id, &[("v", "Number", json!(i), None)]);
        call(&net, "b", "/v1/updateContext", &json!({ "elements": [e] }))?;
        events.push((t, id, i as i64));
    }
    net.run_until(t + 3 * theta + 10);
    net.drain();

    let mut notifications: BTreeMap<Policy, Vec<(u64, Vec<(String, i64)>)>> = BTreeMap::new();
    for (at, _, body) in rec.received() {
        let sid = body["subscriptionId"].as_str().unwrap_or_default();
        let policy = *ids.get(sid).ok_or_else(|| format!("notification for unknown subscription {sid}"))?;
        let elems = body["elements"]
            .as_array()
            .cloned()
            .unwrap_or_default()
            .iter()
            .map(|e| {
                (
                    e["entity"]["id"].as_str().unwrap_or_default().to_string(),
                    e["attributes"][0]["value"].as_i64().unwrap_or(-1),
                )
            })
            .collect();
        notifications.entry(policy).or_default().push((at, elems));
    }
    Ok(ThrottleRun {
        theta,
        seed,
        events,
        notifications,
    })
}

fn throttle_runs() -> (Result<Vec<ThrottleRun>, String>, Duration) {
    let start = Instant::now();
    let mut runs = Vec::new();
    for theta in THETAS {
        for seed in SCHEDULE_SEEDS {
            match throttle_run(theta, seed) {
                Ok(r) => runs.push(r),
                Err(e) => return (Err(e), start.elapsed()),
            }
        }
    }
    (Ok(runs), start.elapsed())
}

fn criterion_spacing(runs: &[ThrottleRun], took: Duration) -> Outcome {
    let mut checked = 0;
    for r in runs {
        for (policy, ns) in &r.notifications {
            for w in ns.windows(2) {
                let gap = w[1].0 - w[0].0;
                ensure(gap + SPACING_SLACK_MS >= r.theta, || {
                    format!(
                        "theta {} seed {} {policy:?}: notifications at {} and {} are {gap} ms apart",
                        r.theta, r.seed, w[0].0, w[1].0
                    )
                })?;
                checked += 1;
            }
        }
    }
    ensure(took < THROTTLE_TIME_LIMIT, || format!("took {took:?}"))?;
    Ok(format!(
        "{} schedules x {EVENTS_PER_SCHEDULE} events, {checked} consecutive gaps all >= theta",
        runs.len()
    ))
}

fn delivered(r: &ThrottleRun, p: Policy) -> Vec<(String, i64)> {
    let mut v: Vec<(String, i64)> = r
        .notifications
        .get(&p)
        .map(|ns| ns.iter().flat_map(|(_, es)| es.iter().cloned()).collect())
        .unwrap_or_default();
    v.sort();
    v
}

fn criterion_no_loss(runs: &[ThrottleRun], took: Duration) -> Outcome {
    let mut dense = 0;
    let mut lost = 0usize;
    for r in runs {
        let mut published: Vec<(String, i64)> = r.events.iter().map(|(_, id, v)| (id.clone(), *v)).collect();
        published.sort();
        let agg = delivered(r, Policy::AggregateSet);
        ensure(agg == published, || {
            format!(
                "theta {} seed {}: aggregateSet delivered {} of {} events",
                r.theta,
                r.seed,
                agg.len(),
                published.len()
            )
        })?;
        let drop = delivered(r, Policy::Drop);
        let all: BTreeSet<&(String, i64)> = published.iter().collect();
        ensure(drop.iter().all(|x| all.contains(x)), || {
            format!("theta {} seed {}: drop delivered unpublished values", r.theta, r.seed)
        })?;
        let crowded = r.theta > 0 && r.events.windows(2).any(|w| w[1].0 - w[0].0 < r.theta);
        if crowded {
            dense += 1;
            ensure(drop.len() < published.len(), || {
                format!("theta {} seed {}: drop lost nothing despite crowded window", r.theta, r.seed)
            })?;
            lost += published.len() - drop.len();
        } else {
            ensure(drop == published, || format!("theta {} seed {}: drop lost events", r.theta, r.seed))?;
        }
    }
    ensure(took < THROTTLE_TIME_LIMIT, || format!("took {took:?}"))?;
    Ok(format!(
        "aggregateSet multiset exact in {} schedules; drop a proper subset in all {dense} crowded schedules ({lost} events dropped)",
        runs.len()
    ))
}

fn criterion_latency(runs: &[ThrottleRun]) -> Outcome {
    let mut worst = 0u64;
    for r in runs {
        let mut arrival: BTreeMap<i64, u64> = BTreeMap::new();
        for (at, es) in r.notifications.get(&Policy::AggregateSet).into_iter().flatten() {
            for (_, v) in es {
                arrival.insert(*v, *at);
            }
        }
        for (t, _, v) in &r.events {
            let at = *arrival
                .get(v)
                .ok_or_else(|| format!("theta {} seed {}: value {v} never delivered", r.theta, r.seed))?;
            let wait = at - t;
            worst = worst.max(wait);
            ensure(wait <= r.theta + LATENCY_SLACK_MS, || {
                format!("theta {} seed {}: value {v} waited {wait} ms", r.theta, r.seed)
            })?;
        }
    }
    Ok(format!("every buffered event emitted within theta of arrival (worst wait {worst} ms)"))
}

// ---------------------------------------------------------------------------
// Federation (criteria 4-5)

fn criterion_federation() -> Outcome {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(4);
    let mut queries = 0;
    for store in 0..FEDERATION_STORES {
        let k = 1 + store % 5;
        let net = SimNet::default();
        net.add_node("d", Arc::new(Discovery::new(net.clock_arc(), net.transport("d"))));
        let cfg = FederationConfig::new("f", "mem://f").with_discovery("mem://d");
        net.add_node("f", Arc::new(FederationNode::new(cfg, net.clock_arc(), net.transport("f"))));
        let brokers: Vec<String> = (0..k).map(|i| format!("b{i}")).collect();
        for b in &brokers {
            net.add_node(b, Arc::new(Broker::new(b, net.clock_arc(), net.transport(b))));
            let reg = json!({"entities": [{"type": "Room", "id": ".*", "isPattern": true}],
                             "providingEndpoint": format!("mem://{b}")});
            call(&net, "d", "/v1/registerContext", &reg)?;
            for _ in 0..rng.gen_range(0..8) {
                let id = format!("r{}", rng.gen_range(0..6));
                let mut attrs = Vec::new();
                for name in ["temperature", "humidity", "status"] {
                    if rng.gen_bool(0.6) {
                        let ts = if rng.gen_bool(0.8) { Some(rng.gen_range(0..5)) } else { None };
                        let (t, v) = if name == "status" {
                            ("Text", json!(["open", "closed"][rng.gen_range(0..2)]))
                        } else {
                            ("Number", json!(rng.gen_range(-50..50)))
                        };
                        attrs.push((name, t, v, ts));
                    }
                }
                if attrs.is_empty() {
                    continue;
                }
                call(&net, b, "/v1/updateContext", &json!({ "elements": [element("Room", &id, &attrs)] }))?;
            }
        }
        for _ in 0..3 {
            let entity = match rng.gen_range(0..3) {
                0 => json!({"type": "Room", "id": ".*", "isPattern": true}),
                1 => json!({"type": "Room", "id": format!("r{}", rng.gen_range(0..6))}),
                _ => json!({"type": "Room", "id": "r[0-2]", "isPattern": true}),
            };
            let attributes: Vec<&str> = ["temperature", "humidity", "status"]
                .into_iter()
                .filter(|_| rng.gen_bool(0.3))
                .collect();
            let q = json!({"entities": [entity], "attributes": attributes});
            let fed = call(&net, "f", "/v1/queryContext", &q)?;
            let mut groups = Vec::new();
            for b in &brokers {
                let direct = call(&net, b, "/v1/queryContext", &q)?;
                let elems: Vec<ContextElement> =
                    from_value_typed(direct["elements"].clone()).map_err(|e| e.to_string())?;
                groups.push((format!("mem://{b}"), elems));
            }
            let oracle = to_canonical_string(&to_value(&merge_elements(&groups, MergePolicy)));
            let got = to_canonical_string(&fed["elements"]);
            ensure(got == oracle, || format!("store {store} (k={k}) query {q}: {got} != {oracle}"))?;
            ensure(fed["partial"].as_array().is_none_or(|p| p.is_empty()), || {
                format!("store {store}: unexpected partial {}", fed["partial"])
            })?;
            queries += 1;
        }
    }
    let took = start.elapsed();
    ensure(took < FEDERATION_TIME_LIMIT, || format!("took {took:?}"))?;
    Ok(format!("{FEDERATION_STORES} stores, k in 1..=5, {queries} queries byte-identical to merge over direct queries"))
}

fn load_scenario(name: &str) -> Result<Script, String> {
    Script::load(&repo().join("scenarios").join(name)).map_err(|e| format!("{name}: {e}"))
}

fn run_twice(script: &Script) -> Result<ScenarioReport, String> {
    let a = run_scenario(script).map_err(|e| e.to_string())?;
    let b = run_scenario(script).map_err(|e| e.to_string())?;
    ensure(a.log == b.log, || format!("{}: event logs differ between runs", a.name))?;
    let failed: Vec<String> = a
        .outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| format!("line {}: {}", o.line, o.detail))
        .collect();
    ensure(a.passed, || format!("{}: {}", a.name, failed.join("; ")))?;
    Ok(a)
}

fn criterion_four_levels() -> Outcome {
    let report = run_twice(&load_scenario("autopilot.json")?)?;
    let partial = report.outcomes.iter().any(|o| o.detail.contains(r#"partial ["mem://fA"]"#));
    ensure(partial, || "no partial level-4 answer observed during the partition".into())?;
    Ok(format!(
        "autopilot.json: {} assertions pass, identical event logs over two runs",
        report.outcomes.len()
    ))
}

// ---------------------------------------------------------------------------
// Discovery (criterion 6)

struct OracleReg {
    entities: Vec<(String, Option<String>)>,
    expires: Option<u64>,
}

/// Brute-force match of one registration against one query pattern, where
/// ids are either literal or the `.*` wildcard.
fn oracle_matches(reg: &OracleReg, q_type: &str, q_id: Option<&str>) -> bool {
    reg.entities.iter().any(|(t, id)| {
        let types = q_type == ANY_TYPE || t == q_type;
        let ids = match (id, q_id) {
            (None, _) | (_, None) => true,
            (Some(a), Some(b)) => a == b,
        };
        types && ids
    })
}

fn pattern_json(t: &str, id: Option<&str>) -> Value {
    match id {
        Some(id) => json!({"type": t, "id": id}),
        None => json!({"type": t, "id": ".*", "isPattern": true}),
    }
}

fn criterion_discovery() -> Outcome {
    let mut rng = StdRng::seed_from_u64(6);
    let net = SimNet::default();
    net.add_node("d", Arc::new(Discovery::new(net.clock_arc(), net.transport("d"))));
    let rec = Arc::new(Recorder::new(net.clock_arc()));
    net.add_node("c", rec.clone());

    let watches: [(&str, Option<&str>); 3] = [("A", None), ("B", Some("x1")), (ANY_TYPE, None)];
    let mut sub_ids = Vec::new();
    for (t, id) in watches {
        let s = json!({"entities": [pattern_json(t, id)], "notifyEndpoint": "mem://c/availability"});
        let v = call(&net, "d", "/v1/subscribeContextAvailability", &s)?;
        sub_ids.push(v["subscriptionId"].as_str().unwrap_or_default().to_string());
    }

    let mut live: BTreeMap<String, OracleReg> = BTreeMap::new();
    let mut views: Vec<BTreeSet<String>> = vec![BTreeSet::new(); watches.len()];
    let mut seen = 0;
    let mut next = 0;
    let mut now = 0u64;
    let mut notified = 0usize;
    let random_reg = |rng: &mut StdRng, now: u64| {
        let n = rng.gen_range(1..=2);
        let entities: Vec<(String, Option<String>)> = (0..n)
            .map(|_| {
                let t = ["A", "B", "C"][rng.gen_range(0..3)].to_string();
                let id = if rng.gen_bool(0.5) { None } else { Some(format!("x{}", rng.gen_range(0..3))) };
                (t, id)
            })
            .collect();
        let expires = if rng.gen_bool(0.5) { None } else { Some(now + rng.gen_range(1..400)) };
        OracleReg { entities, expires }
    };
    for step in 0..DISCOVERY_EVENTS {
        let roll = rng.gen_range(0..100);
        let ids: Vec<String> = live.keys().cloned().collect();
        if roll < 35 || (roll < 70 && ids.is_empty()) {
            next += 1;
            let id = format!("reg-{next}");
            let reg = random_reg(&mut rng, now);
            register(&net, &id, &reg)?;
            live.insert(id, reg);
        } else if roll < 55 {
            let id = ids.choose(&mut rng).expect("non-empty").clone();
            let reg = random_reg(&mut rng, now);
            register(&net, &id, &reg)?;
            live.insert(id, reg);
        } else if roll < 70 {
            let id = ids.choose(&mut rng).expect("non-empty").clone();
            call(&net, "d", "/v1/unregisterContext", &json!({ "id": id }))?;
            live.remove(&id);
        } else {
            now += rng.gen_range(1..150);
            net.run_until(now);
        }
        net.drain();
        live.retain(|_, r| r.expires.is_none_or(|t| t > now));

        let received = rec.received();
        for (_, _, body) in &received[seen..] {
            let sid = body["subscriptionId"].as_str().unwrap_or_default();
            let Some(w) = sub_ids.iter().position(|s| s == sid) else { continue };
            notified += 1;
            for r in body["registrations"].as_array().into_iter().flatten() {
                views[w].insert(r["id"].as_str().unwrap_or_default().to_string());
            }
            for r in body["removed"].as_array().into_iter().flatten() {
                views[w].remove(r.as_str().unwrap_or_default());
            }
        }
        seen = received.len();

        for (w, (t, id)) in watches.iter().enumerate() {
            let expected: BTreeSet<String> = live
                .iter()
                .filter(|(_, r)| oracle_matches(r, t, *id))
                .map(|(k, _)| k.clone())
                .collect();
            ensure(views[w] == expected, || {
                format!("step {step} t={now}: availability view {w} {:?} != oracle {expected:?}", views[w])
            })?;
            let found = call(
                &net,
                "d",
                "/v1/discoverContextAvailability",
                &json!({"entities": [pattern_json(t, *id)]}),
            )?;
            let got: BTreeSet<String> = found["registrations"]
                .as_array()
                .or_else(|| found.as_array())
                .into_iter()
                .flatten()
                .map(|r| r["id"].as_str().unwrap_or_default().to_string())
                .collect();
            ensure(got == expected, || {
                format!("step {step} t={now}: discover {t}/{id:?} gave {got:?}, oracle {expected:?}")
            })?;
        }
    }
    Ok(format!(
        "{DISCOVERY_EVENTS} register/renew/unregister/expire events, {notified} availability notifications, discover and views exact at every step"
    ))
}

fn register(net: &SimNet, id: &str, r: &OracleReg) -> Result<(), String> {
    let entities: Vec<Value> = r.entities.iter().map(|(t, i)| pattern_json(t, i.as_deref())).collect();
    let mut body = json!({"id": id, "entities": entities, "providingEndpoint": format!("mem://p-{id}")});
    if let Some(t) = r.expires {
        body["expires"] = json!(t);
    }
    call(net, "d", "/v1/registerContext", &body).map(|_| ())
}

// ---------------------------------------------------------------------------
// History (criterion 7)

#[derive(Clone)]
struct SentRecord {
    key: (String, String, String),
    t: u64,
    value: Value,
    metadata: String,
}

fn notification(elements: Vec<Value>) -> Notification {
    from_value_typed(json!({"subscriptionId": "acc", "aggregation": "none", "elements": elements}))
        .expect("well-formed notification")
}

fn oracle_fold(op: AggregateOp, rs: &[&SentRecord]) -> Value {
    match op {
        AggregateOp::Count => json!(rs.len()),
        AggregateOp::Last => rs.last().map(|r| r.value.clone()).unwrap_or(Value::Null),
        AggregateOp::Avg => {
            let xs: Vec<f64> = rs.iter().map(|r| r.value.as_f64().unwrap()).collect();
            json!(xs.iter().sum::<f64>() / xs.len() as f64)
        }
        AggregateOp::Min => {
            let mut best = rs[0];
            for r in rs {
                if r.value.as_f64() < best.value.as_f64() {
                    best = r;
                }
            }
            best.value.clone()
        }
        AggregateOp::Max => {
            let mut best = rs[0];
            for r in rs {
                if r.value.as_f64() > best.value.as_f64() {
                    best = r;
                }
            }
            best.value.clone()
        }
    }
}

fn check_raw(store: &HistoryStore, sent: &[SentRecord], label: &str) -> Result<usize, String> {
    let keys: BTreeSet<&(String, String, String)> = sent.iter().map(|r| &r.key).collect();
    let mut n = 0;
    for key in keys {
        let mut expected: Vec<&SentRecord> = sent.iter().filter(|r| &r.key == key).collect();
        expected.sort_by_key(|r| r.t);
        let q = RawQuery {
            entity: EntityRef::new(&key.1, &key.0).unwrap(),
            attribute: key.2.clone(),
            from: 0,
            to: u64::MAX,
            limit: Some(usize::MAX),
            order: Default::default(),
        };
        let got = store.query_raw(&q).map_err(|e| e.to_string())?;
        ensure(got.len() == expected.len(), || {
            format!("{label}: {key:?} has {} records, expected {}", got.len(), expected.len())
        })?;
        for (g, e) in got.iter().zip(&expected) {
            ensure(g.t == e.t && to_canonical_string(&g.value) == to_canonical_string(&e.value), || {
                format!("{label}: {key:?} record mismatch at t={}", e.t)
            })?;
            ensure(to_canonical_string(&g.metadata) == e.metadata, || {
                format!("{label}: {key:?} metadata at t={} is {} not {}", e.t, to_canonical_string(&g.metadata), e.metadata)
            })?;
            n += 1;
        }
    }
    Ok(n)
}

fn criterion_history() -> Outcome {
    let mut rng = StdRng::seed_from_u64(7);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let open = || -> Result<HistoryStore, String> {
        let sink = SegmentLog::open(dir.path(), None).map_err(|e| e.to_string())?;
        HistoryStore::open(Box::new(sink)).map_err(|e| e.to_string())
    };
    let mut store = open()?;
    let mut sent: Vec<SentRecord> = Vec::new();
    let mut seen = BTreeSet::new();
    let mut arrival = 1_000u64;

    let mut ingest = |store: &mut HistoryStore,
                      sent: &mut Vec<SentRecord>,
                      rng: &mut StdRng,
                      batches: usize|
     -> Result<(), String> {
        for _ in 0..batches {
            arrival += rng.gen_range(0..20);
            let mut elements = Vec::new();
            let mut batch = Vec::new();
            for _ in 0..rng.gen_range(1..=3) {
                let ty = ["Room", "Pump", "Gauge"][rng.gen_range(0..3)];
                let id = format!("{}-{}", ty.to_lowercase(), rng.gen_range(0..3));
                if elements.iter().any(|e: &Value| e["entity"]["id"] == json!(id)) {
                    continue;
                }
                let mut attributes = Vec::new();
                for name in ["level", "flow", "state"] {
                    if !rng.gen_bool(0.6) {
                        continue;
                    }
                    let value = match name {
                        "state" => json!(["on", "off", "fault"][rng.gen_range(0..3)]),
                        "level" => json!(rng.gen_range(-100..100)),
                        _ => json!(rng.gen_range(-1e3..1e3)),
                    };
                    let ts = rng.gen_bool(0.7).then(|| arrival - rng.gen_range(0..500));
                    let mut metadata = vec![json!({"name": "unit", "type": "Text", "value": "m"})];
                    if rng.gen_bool(0.5) {
                        metadata.push(json!({"name": "quality", "type": "Number", "value": rng.gen_range(0.0..1.0)}));
                    }
                    if let Some(ts) = ts {
                        metadata.push(json!({"name": "timestamp", "type": "number", "value": ts}));
                    }
                    let t = ts.unwrap_or(arrival);
                    let attr = json!({"name": name, "type": if name == "state" { "Text" } else { "Number" },
                                      "value": value, "metadata": metadata});
                    batch.push(SentRecord {
                        key: (ty.to_string(), id.clone(), name.to_string()),
                        t,
                        value,
                        metadata: to_canonical_string(&attr["metadata"]),
                    });
                    attributes.push(attr);
                }
                if !attributes.is_empty() {
                    elements.push(json!({"entity": {"type": ty, "id": id}, "attributes": attributes}));
                }
            }
            if elements.is_empty() {
                continue;
            }
            let n = notification(elements);
            let repeat = rng.gen_bool(0.1);
            store.ingest(&n, arrival).map_err(|e| e.to_string())?;
            if repeat {
                store.ingest(&n, arrival).map_err(|e| e.to_string())?;
            }
            for r in batch {
                if seen.insert((r.key.clone(), r.t, to_canonical_string(&r.value))) {
                    sent.push(r);
                }
            }
        }
        Ok(())
    };
    ingest(&mut store, &mut sent, &mut rng, 800)?;

    let raw = check_raw(&store, &sent, "live")?;

    let mut aggregates = 0;
    let keys: BTreeSet<(String, String, String)> = sent.iter().map(|r| r.key.clone()).collect();
    for key in &keys {
        let numeric = key.2 != "state";
        for _ in 0..10 {
            let from = rng.gen_range(0..1_500);
            let to = from + rng.gen_range(1..20_000);
            let resolution = rng.gen_range(1..3_000);
            let ops: &[AggregateOp] = if numeric {
                &[AggregateOp::Count, AggregateOp::Min, AggregateOp::Max, AggregateOp::Last, AggregateOp::Avg]
            } else {
                &[AggregateOp::Count, AggregateOp::Last]
            };
            let mut in_range: Vec<&SentRecord> =
                sent.iter().filter(|r| &r.key == key && r.t >= from && r.t < to).collect();
            in_range.sort_by_key(|r| r.t);
            let mut buckets: BTreeMap<u64, Vec<&SentRecord>> = BTreeMap::new();
            for r in in_range {
                buckets.entry(from + (r.t - from) / resolution * resolution).or_default().push(r);
            }
            for &op in ops {
                let q = AggregateQuery {
                    entity: EntityRef::new(&key.1, &key.0).unwrap(),
                    attribute: key.2.clone(),
                    from,
                    to,
                    resolution,
                    op,
                };
                let got = store.query_aggregate(&q).map_err(|e| e.to_string())?;
                ensure(got.len() == buckets.len(), || {
                    format!("{key:?} {op:?}: {} buckets, oracle {}", got.len(), buckets.len())
                })?;
                for (g, (start, rs)) in got.iter().zip(&buckets) {
                    let want = oracle_fold(op, rs);
                    ensure(g.start == *start, || format!("{key:?} {op:?}: bucket start {} != {start}", g.start))?;
                    let same = match op {
                        AggregateOp::Avg => {
                            let (a, b) = (g.value.as_f64().unwrap_or(f64::NAN), want.as_f64().unwrap());
                            (a - b).abs() <= AVG_RELATIVE_TOLERANCE * b.abs().max(f64::MIN_POSITIVE)
                        }
                        _ => to_canonical_string(&g.value) == to_canonical_string(&want),
                    };
                    ensure(same, || format!("{key:?} {op:?} bucket {start}: {} != oracle {want}", g.value))?;
                    aggregates += 1;
                }
            }
        }
    }

    drop(store);
    let torn = dir.path().join(segment_name("Pump"));
    let mut f = OpenOptions::new().append(true).open(&torn).map_err(|e| e.to_string())?;
    f.write_all(&[0, 0, 4, 0, b'{', b'"', b'e']).map_err(|e| e.to_string())?;
    drop(f);
    let mut store = open()?;
    let recovered = check_raw(&store, &sent, "after crash")?;
    ingest(&mut store, &mut sent, &mut rng, 100)?;
    drop(store);
    let store = open()?;
    let second = check_raw(&store, &sent, "after second reopen")?;

    Ok(format!(
        "{raw} raw records and {aggregates} aggregate buckets match the brute-force fold (avg rel tol {AVG_RELATIVE_TOLERANCE:e}); metadata byte-identical; {recovered} of {raw} acknowledged records recovered after a torn write, {second} after further ingest and reopen"
    ))
}

// ---------------------------------------------------------------------------
// Orchestrator (criterion 8)

struct Trace {
    /// `(timestamp, station, rain)` in trace order.
    readings: Vec<(u64, String, f64)>,
    capacities: BTreeMap<String, f64>,
    threshold: f64,
    scale: f64,
    detect_type: String,
    setpoint_type: String,
}

fn read_trace(doc: &Value, buffer_model: &DataModel) -> Result<Trace, String> {
    let mut devices = BTreeMap::new();
    for n in doc["nodes"].as_array().into_iter().flatten() {
        if n["kind"] == "agent" {
            for (dev, m) in n["mapping"]["devices"].as_object().into_iter().flatten() {
                devices.insert(dev.clone(), m["entityId"].as_str().unwrap_or_default().to_string());
            }
        }
    }
    let mut readings = Vec::new();
    let mut capacities = BTreeMap::new();
    let mut params = (None, None, String::new(), String::new());
    for s in doc["steps"].as_array().into_iter().flatten() {
        match s["do"].as_str() {
            Some("device") => {
                for m in s["messages"].as_array().into_iter().flatten() {
                    let station = devices.get(m["device"].as_str().unwrap_or_default()).cloned();
                    if let (Some(station), Some(v)) = (station, m["fields"]["rain"].as_f64()) {
                        readings.push((m["ts"].as_u64().unwrap_or(0), station, v));
                    }
                }
            }
            Some("publish") => {
                for e in s["elements"].as_array().into_iter().flatten() {
                    let id = e["entity"]["id"].as_str().unwrap_or_default().to_string();
                    for a in e["attributes"].as_array().into_iter().flatten() {
                        let name = a["name"].as_str().unwrap_or_default();
                        let ts = a["metadata"]
                            .as_array()
                            .into_iter()
                            .flatten()
                            .find(|m| m["name"] == "timestamp")
                            .and_then(|m| m["value"].as_u64())
                            .unwrap_or(0);
                        match e["entity"]["type"].as_str() {
                            Some("WeatherObserved") if name == "precipitation" => {
                                readings.push((ts, id.clone(), a["value"].as_f64().unwrap_or(0.0)))
                            }
                            Some("WaterBuffer") if buffer_model.canonical(name) == "capacity" => {
                                capacities.insert(id.clone(), a["value"].as_f64().unwrap_or(0.0));
                            }
                            _ => {}
                        }
                    }
                }
            }
            Some("submit") => {
                for t in s["topology"]["tasks"].as_array().into_iter().flatten() {
                    match t["operator"].as_str() {
                        Some("threshold_detect") => {
                            params.0 = t["params"]["threshold"].as_f64();
                            params.2 = t["output"].as_str().unwrap_or_default().to_string();
                        }
                        Some("setpoint") => {
                            params.1 = t["params"]["scale"].as_f64();
                            params.3 = t["output"].as_str().unwrap_or_default().to_string();
                        }
                        _ => {}
                    }
                }
            }
            _ => {}
        }
    }
    Ok(Trace {
        readings,
        capacities,
        threshold: params.0.ok_or("no threshold_detect task")?,
        scale: params.1.ok_or("no setpoint task")?,
        detect_type: params.2,
        setpoint_type: params.3,
    })
}

/// Independent evaluation of the chain over the trace: a rising crossing
/// of the threshold per station raises an alarm, and every alarm yields a
/// fill target `capacity * (1 - min(1, max(0, rain / scale)))` per buffer.
fn chain_oracle(trace: &Trace) -> (BTreeMap<String, Vec<f64>>, BTreeMap<String, Vec<f64>>) {
    let mut readings = trace.readings.clone();
    readings.sort_by_key(|r| r.0);
    let mut above: BTreeMap<&str, bool> = BTreeMap::new();
    let mut alarms: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut targets: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (_, station, v) in &readings {
        let was = above.insert(station, *v >= trace.threshold).unwrap_or(false);
        if *v >= trace.threshold && !was {
            alarms.entry(station.clone()).or_default().push(*v);
            let ratio = (v / trace.scale).clamp(0.0, 1.0);
            for (buf, cap) in &trace.capacities {
                targets.entry(buf.clone()).or_default().push(cap * (1.0 - ratio));
            }
        }
    }
    (alarms, targets)
}

fn history_expectations(trace: &Trace) -> Vec<Value> {
    let (alarms, targets) = chain_oracle(trace);
    let mut steps = Vec::new();
    let mut push = |ty: &str, id: &str, attr: &str, values: &[f64]| {
        steps.push(json!({"do": "expectHistory", "node": "h",
            "query": {"entity": {"type": ty, "id": id}, "attribute": attr, "from": 0, "to": 1_000_000},
            "count": values.len(), "values": values}));
    };
    for (station, vs) in &alarms {
        push(&trace.detect_type, station, "precipitation", vs);
    }
    for (buf, vs) in &targets {
        push(&trace.setpoint_type, buf, "targetFill", vs);
    }
    steps
}

fn script_from(doc: &Value) -> Result<Script, String> {
    let mut script = Script::parse(&doc.to_string()).map_err(|e| e.to_string())?;
    script.base_dir = Some(repo().join("scenarios"));
    Ok(script)
}

fn criterion_orchestrator() -> Outcome {
    let path = repo().join("scenarios/waterproof.json");
    let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
    let mut doc: Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let models = ModelCatalog::load_dir(&repo().join("models")).map_err(|e| e.to_string())?;
    let buffer_model = models.get("WaterBuffer").ok_or("no WaterBuffer model")?.clone();
    let trace = read_trace(&doc, &buffer_model)?;

    let steps = doc["steps"].as_array_mut().ok_or("no steps")?;
    steps.retain(|s| s["do"] != "expectHistory");
    steps.extend(history_expectations(&trace));
    let expectations = steps.iter().filter(|s| s["do"] == "expectHistory").count();

    let single = run_twice(&script_from(&doc)?)?;

    // Late join: after the new provider registers, the worker must subscribe
    // to it before a second availability notification reaches the task.
    let log = &single.log;
    let reg = log
        .iter()
        .position(|l| l.contains("-> disc/v1/registerContext") && l.contains("rain-east"))
        .ok_or("late registration not in log")?;
    let first = log[reg..]
        .iter()
        .position(|l| l.contains(" deliver disc -> w1/v1/task/waterproof.detect/availability"))
        .map(|i| i + reg)
        .ok_or("no availability notification after the late registration")?;
    let bound = log[first..]
        .iter()
        .position(|l| l.contains("request w1 -> b-east/v1/subscribeContext"))
        .map(|i| i + first)
        .ok_or("late provider never subscribed")?;
    let extra = log[first + 1..bound]
        .iter()
        .filter(|l| l.contains("/v1/task/waterproof.detect/availability"))
        .count();
    ensure(extra == 0, || format!("binding took {} availability notifications", extra + 1))?;

    // Same trace on a different worker pool.
    let mut split = doc.clone();
    for n in split["nodes"].as_array_mut().into_iter().flatten() {
        if n["name"] == "w1" {
            n["capacity"] = json!(1);
        }
        if n["kind"] == "orchestrator" {
            n["workers"] = json!(["w1", "w2"]);
        }
    }
    let w2 = json!({"kind": "worker", "name": "w2", "broker": "b", "discovery": "disc", "tier": "cloud", "capacity": 1});
    let nodes = split["nodes"].as_array_mut().ok_or("no nodes")?;
    let at = nodes.iter().position(|n| n["kind"] == "orchestrator").unwrap_or(nodes.len());
    nodes.insert(at, w2);
    for s in split["steps"].as_array_mut().into_iter().flatten() {
        if s["do"] == "expectBinding" && s["instance"] == "waterproof.setpoint" {
            s["node"] = json!("w2");
        }
    }
    let moved = run_twice(&script_from(&split)?)?;
    ensure(moved.log.iter().any(|l| l.contains("-> w2/v1/worker/deploy")), || {
        "second configuration did not place anything on w2".into()
    })?;

    Ok(format!(
        "{expectations} history series equal the direct formula over the trace; late provider bound within one availability notification; same outputs with one and two workers"
    ))
}

// ---------------------------------------------------------------------------
// Harmonization (criterion 9)

fn criterion_harmonization() -> Outcome {
    let models = ModelCatalog::load_dir(&repo().join("models")).map_err(|e| e.to_string())?;
    let corpus: &[(&str, &str, &str)] = &[
        ("WeatherObserved", "position", "location"),
        ("WeatherObserved", "geolocation", "location"),
        ("WeatherObserved", "ubicacion", "location"),
        ("WeatherObserved", "posizione", "location"),
        ("WeatherObserved", "rain", "precipitation"),
        ("WeatherObserved", "rainfall", "precipitation"),
        ("WeatherObserved", "temp", "temperature"),
        ("WeatherObserved", "location", "location"),
        ("WeatherObserved", "humidity", "humidity"),
        ("ParkingSpot", "position", "location"),
        ("ParkingSpot", "geolocation", "location"),
        ("ParkingSpot", "ubicacion", "location"),
        ("ParkingSpot", "occupancy", "status"),
        ("ParkingSpot", "state", "status"),
        ("WaterBuffer", "position", "location"),
        ("WaterBuffer", "geolocation", "location"),
        ("WaterBuffer", "volume", "capacity"),
        ("WaterBuffer", "maxVolume", "capacity"),
    ];
    for (model, raw, canonical) in corpus {
        let m = models.get(model).ok_or_else(|| format!("model {model} missing"))?;
        let v = json!({"entity": {"type": model, "id": "x"}, "attributes": [
            {"name": raw, "type": "Text", "value": "v", "metadata": [{"name": "unit", "type": "Text", "value": "u"}]},
            {"name": "note", "type": "Text", "value": "n"}]});
        let e: ContextElement = from_value_typed(v).map_err(|e| e.to_string())?;
        let once = harmonize(&e, m).map_err(|e| e.to_string())?;
        let again = harmonize(&e, m).map_err(|e| e.to_string())?;
        let twice = harmonize(&once, m).map_err(|e| e.to_string())?;
        ensure(once.attributes()[0].name() == *canonical, || {
            format!("{model}.{raw} became {}", once.attributes()[0].name())
        })?;
        ensure(to_canonical_string(&once) == to_canonical_string(&again), || format!("{model}.{raw}: not deterministic"))?;
        ensure(once == twice, || format!("{model}.{raw}: not idempotent"))?;
        ensure(once.attributes()[0].value() == e.attributes()[0].value(), || format!("{model}.{raw}: value changed"))?;
        ensure(
            to_canonical_string(&once.attributes()[0].metadata()) == to_canonical_string(&e.attributes()[0].metadata()),
            || format!("{model}.{raw}: metadata changed"),
        )?;
    }

    let required = vec![
        RequiredAttribute { name: "location".into(), attr_type: "geo:point".into() },
        RequiredAttribute { name: "temperature".into(), attr_type: "Number".into() },
        RequiredAttribute { name: "status".into(), attr_type: "Text".into() },
        RequiredAttribute { name: "capacity".into(), attr_type: "Number".into() },
    ];
    let synonyms = [("position", "location"), ("temp", "temperature")]
        .into_iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
    let model = DataModel::new("Station", required.clone(), synonyms).map_err(|e| e.to_string())?;
    let mut rng = StdRng::seed_from_u64(9);
    let wrong_type = |t: &str| if t == "Number" { "Text" } else { "Number" };
    let mut seeded = 0;
    for trial in 0..500 {
        let mut missing = BTreeSet::new();
        let mut mistyped = BTreeSet::new();
        let mut attributes = Vec::new();
        for r in &required {
            match rng.gen_range(0..4) {
                0 => {
                    missing.insert(r.name.clone());
                }
                1 => {
                    mistyped.insert(r.name.clone());
                    attributes.push(json!({"name": r.name, "type": wrong_type(&r.attr_type), "value": 1}));
                }
                _ => {
                    let name = match r.name.as_str() {
                        "location" if rng.gen_bool(0.5) => "position",
                        "temperature" if rng.gen_bool(0.5) => "temp",
                        n => n,
                    };
                    attributes.push(json!({"name": name, "type": r.attr_type, "value": "1"}));
                }
            }
        }
        attributes.shuffle(&mut rng);
        let e: ContextElement = from_value_typed(json!({"entity": {"type": "Station", "id": format!("s{trial}")},
                                                        "attributes": attributes}))
        .map_err(|e| e.to_string())?;
        let h = harmonize(&e, &model).map_err(|e| e.to_string())?;
        let report = validate(&h, &model);
        let got_missing: BTreeSet<String> = report.missing.iter().cloned().collect();
        let got_mistyped: BTreeSet<String> = report.type_mismatches.iter().cloned().collect();
        ensure(got_missing == missing && got_mistyped == mistyped, || {
            format!("trial {trial}: seeded missing {missing:?} mistyped {mistyped:?}, report {report:?}")
        })?;
        ensure(report.is_ok() == (missing.is_empty() && mistyped.is_empty()), || format!("trial {trial}: is_ok wrong"))?;
        seeded += missing.len() + mistyped.len();
    }
    Ok(format!(
        "{} synonym cases deterministic and idempotent; {seeded} seeded defects over 500 elements all reported exactly",
        corpus.len()
    ))
}

// ---------------------------------------------------------------------------
// Throughput (criterion 10)

fn criterion_throughput() -> Outcome {
    let net = SimNet::default();
    net.add_node("b", Arc::new(Broker::new("b", net.clock_arc(), net.transport("b"))));
    let mut rng = StdRng::seed_from_u64(10);
    for chunk in (0..THROUGHPUT_STORE).collect::<Vec<_>>().chunks(100) {
        let elements: Vec<Value> = chunk
            .iter()
            .map(|i| element("Meter", &format!("m{i}"), &[("power", "Number", json!(0), None)]))
            .collect();
        call(&net, "b", "/v1/updateContext", &json!({ "elements": elements }))?;
    }
    let bodies: Vec<Value> = (0..THROUGHPUT_UPDATES)
        .map(|i| {
            let id = format!("m{}", rng.gen_range(0..THROUGHPUT_STORE));
            json!({"elements": [element("Meter", &id, &[("power", "Number", json!(i), Some(i as u64))])]})
        })
        .collect();
    let start = Instant::now();
    for b in &bodies {
        call(&net, "b", "/v1/updateContext", b)?;
    }
    let rate = THROUGHPUT_UPDATES as f64 / start.elapsed().as_secs_f64();
    let q = call(&net, "b", "/v1/queryContext", &json!({"entities": [{"type": "Meter", "id": ".*", "isPattern": true}]}))?;
    let stored = q["elements"].as_array().map_or(0, Vec::len);
    ensure(stored == THROUGHPUT_STORE, || format!("store holds {stored} entities"))?;
    let note = if rate >= THROUGHPUT_TARGET { "meets" } else { "below" };
    ensure(rate >= THROUGHPUT_FLOOR, || {
        format!("{rate:.0} updates/s is below the floor of {THROUGHPUT_FLOOR:.0}")
    })?;
    Ok(format!(
        "{rate:.0} updates/s over a {THROUGHPUT_STORE}-entity store ({note} the {THROUGHPUT_TARGET:.0}/s target; informational, floor {THROUGHPUT_FLOOR:.0}/s)"
    ))
}

fn main() -> ExitCode {
    let mut results: Vec<(u32, &str, Outcome, Duration)> = Vec::new();
    let mut timed = |n: u32, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = f();
        results.push((n, name, outcome, start.elapsed()));
    };

    let (runs, runs_took) = throttle_runs();
    match &runs {
        Ok(runs) => {
            timed(1, "throttle spacing", &mut || criterion_spacing(runs, runs_took));
            timed(2, "aggregate no-loss vs drop loss", &mut || criterion_no_loss(runs, runs_took));
            timed(3, "aggregation latency bound", &mut || criterion_latency(runs));
        }
        Err(e) => {
            for (n, name) in [(1, "throttle spacing"), (2, "aggregate no-loss vs drop loss"), (3, "aggregation latency bound")] {
                timed(n, name, &mut || Err(e.clone()));
            }
        }
    }
    timed(4, "federation oracle equivalence", &mut criterion_federation);
    timed(5, "four-level end-to-end", &mut criterion_four_levels);
    timed(6, "discovery completeness", &mut criterion_discovery);
    timed(7, "history aggregates, metadata, recovery", &mut criterion_history);
    timed(8, "orchestrated chain", &mut criterion_orchestrator);
    timed(9, "harmonization", &mut criterion_harmonization);
    timed(10, "smoke throughput", &mut criterion_throughput);

    let mut failed = 0;
    for (n, name, outcome, took) in &results {
        let extra = if *n <= 2 { runs_took + *took } else { *took };
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS {name}: {detail} [{} ms]", extra.as_millis()),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL {name}: {detail} [{} ms]", extra.as_millis());
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
