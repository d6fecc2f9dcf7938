//! Randomized property suites with brute-force oracles, run through a
//! bare proptest runner so the acceptance binary can report on them.

use std::cell::Cell;
use std::collections::BTreeMap;

use chrono::TimeDelta;
use mqttplus::clock::{Timestamp, VirtualClock};
use mqttplus::codec::{decode_packet, encode_packet, Connack, Connect, Packet, Publish, QoS, Suback, Subscribe, Unsubscribe, Will};
use mqttplus::grammar::{parse_subscription, NoProcessing, Stat, TimeWindow};
use mqttplus::pipeline::compile;
use mqttplus::spatial::SpatialSubscription;
use mqttplus::store::{format_value, AggregationStore};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

use super::harness::{publishes, Harness};
use super::reference::matches;

pub fn run<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let mut runner = TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn origin() -> Timestamp {
    VirtualClock::at_default_origin().now()
}

// ---- codec ----

fn topic() -> impl Strategy<Value = String> {
    "[a-z0-9$]{1,8}(/[a-z0-9]{0,8}){0,4}"
}

fn filter() -> impl Strategy<Value = String> {
    prop_oneof![topic(), topic().prop_map(|t| format!("{t}/#")), topic().prop_map(|t| format!("+/{t}"))]
}

fn qos01() -> impl Strategy<Value = QoS> {
    prop_oneof![Just(QoS::AtMostOnce), Just(QoS::AtLeastOnce)]
}

fn bytes(max: usize) -> impl Strategy<Value = Vec<u8>> {
    proptest::collection::vec(any::<u8>(), 0..max)
}

fn packet() -> impl Strategy<Value = Packet> {
    let connect = (
        "[A-Za-z0-9_-]{0,23}",
        any::<u16>(),
        any::<bool>(),
        proptest::option::of((topic(), bytes(64), qos01(), any::<bool>())),
        proptest::option::of(("[a-z]{1,8}", proptest::option::of(bytes(8)))),
    )
        .prop_map(|(id, ka, clean, will, auth)| {
            let mut c = Connect::new(id, ka, clean);
            c.will = will.map(|(topic, payload, qos, retain)| Will { topic, payload, qos, retain });
            if let Some((user, pass)) = auth {
                c.username = Some(user);
                c.password = pass;
            }
            Packet::Connect(c)
        });
    let publish = (qos01(), any::<bool>(), any::<bool>(), topic(), 1u16.., bytes(300)).prop_map(
        |(qos, dup, retain, topic, pid, payload)| {
            let acked = qos == QoS::AtLeastOnce;
            Packet::Publish(Publish { dup: dup && acked, qos, retain, topic, packet_id: acked.then_some(pid), payload })
        },
    );
    prop_oneof![
        connect,
        (any::<bool>(), 0u8..6).prop_map(|(session_present, code)| Packet::Connack(Connack { session_present, code })),
        publish,
        (1u16..).prop_map(Packet::Puback),
        (1u16.., proptest::collection::vec((filter(), qos01()), 1..5))
            .prop_map(|(packet_id, filters)| Packet::Subscribe(Subscribe { packet_id, filters })),
        (1u16.., proptest::collection::vec(prop_oneof![Just(0u8), Just(1), Just(0x80)], 1..5))
            .prop_map(|(packet_id, codes)| Packet::Suback(Suback { packet_id, codes })),
        (1u16.., proptest::collection::vec(filter(), 1..5))
            .prop_map(|(packet_id, filters)| Packet::Unsubscribe(Unsubscribe { packet_id, filters })),
        (1u16..).prop_map(Packet::Unsuback),
        Just(Packet::Pingreq),
        Just(Packet::Pingresp),
        Just(Packet::Disconnect),
    ]
}

pub fn codec_roundtrip(cases: u32) -> Result<(), String> {
    run(cases, packet(), |p| {
        let wire = encode_packet(&p).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let decoded = decode_packet(&wire).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(decoded, Some((p, wire.len())));
        Ok(())
    })
}

// ---- aggregation store ----

#[derive(Debug, Clone)]
enum Step {
    Publish { topic: usize, value: i32 },
    Wait(u32),
}

fn steps() -> impl Strategy<Value = Vec<Step>> {
    proptest::collection::vec(
        prop_oneof![
            3 => (0usize..3, -200i32..200).prop_map(|(topic, value)| Step::Publish { topic, value }),
            1 => (0u32..1500).prop_map(Step::Wait),
            // Whole minutes land publishes exactly on window edges.
            1 => (0u32..30).prop_map(|m| Step::Wait(m * 60)),
        ],
        1..60,
    )
}

fn window_sets() -> impl Strategy<Value = Vec<u32>> {
    prop_oneof![Just(vec![1440, 60, 15]), Just(vec![60, 15, 5]), Just(vec![6, 4]), Just(vec![3])]
}

/// (count, sum, min, max) of the values published in `[from, to)`.
fn brute(log: &[(Timestamp, usize, f64)], topic: usize, from: Timestamp, to: Timestamp) -> Option<(u64, f64, f64, f64)> {
    let vals: Vec<f64> = log.iter().filter(|(t, k, _)| *k == topic && *t >= from && *t < to).map(|e| e.2).collect();
    if vals.is_empty() {
        return None;
    }
    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some((vals.len() as u64, vals.iter().sum(), min, max))
}

/// Every closing window of every topic equals a recount of the raw log.
pub fn store_replay(cases: u32) -> Result<(), String> {
    let unit = TimeDelta::seconds(60);
    let populated = Cell::new(0u64);
    run(cases, (window_sets(), steps()), |(windows, steps)| {
        let start = origin();
        let far = start + TimeDelta::days(365);
        let mut store = AggregationStore::new(&windows, unit, start).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let mut log: Vec<(Timestamp, usize, f64)> = Vec::new();
        let mut now = start;
        let mut problems: Vec<String> = Vec::new();
        let mut fires = 0;
        let topics = ["a/t", "b/t", "c/h"];
        let mut check = |store: &mut AggregationStore, now: Timestamp, log: &[(Timestamp, usize, f64)]| {
            let done = store.advance_with(now, |fire, s| {
                for &w in &fire.due {
                    let from = fire.at - unit * w as i32;
                    for (k, topic) in topics.iter().enumerate() {
                        let want = brute(log, k, from, fire.at);
                        populated.set(populated.get() + u64::from(want.is_some()));
                        let got = s
                            .record(topic)
                            .and_then(|r| r.tuple(w))
                            .filter(|t| !t.is_empty())
                            .map(|t| (t.count, t.sum, t.min().unwrap(), t.max().unwrap()));
                        let same = match (want, got) {
                            (None, None) => true,
                            (Some(a), Some(b)) => a.0 == b.0 && (a.1 - b.1).abs() < 1e-6 && a.2 == b.2 && a.3 == b.3,
                            _ => false,
                        };
                        if !same {
                            problems.push(format!("fire {} window {w} {topic}: want {want:?} got {got:?}", fire.index));
                        }
                    }
                }
            });
            fires += done.len();
        };
        for step in steps {
            match step {
                Step::Wait(secs) => {
                    now += TimeDelta::seconds(i64::from(secs));
                    check(&mut store, now, &log);
                }
                Step::Publish { topic, value } => {
                    let v = f64::from(value) / 2.0;
                    store.record_publish(topics[topic], format_value(v).as_bytes(), far, now);
                    log.push((now, topic, v));
                }
            }
        }
        // Close every open window.
        now += unit * 1440;
        check(&mut store, now, &log);
        prop_assert!(problems.is_empty(), "{}", problems.join("; "));
        prop_assert!(fires > 0);
        Ok(())
    })?;
    nonvacuous(populated.get(), u64::from(cases), "populated windows")
}

/// A suite whose oracle side is almost always empty proves little.
fn nonvacuous(hits: u64, cases: u64, what: &str) -> Result<(), String> {
    if hits * 2 >= cases {
        Ok(())
    } else {
        Err(format!("only {hits} {what} over {cases} cases"))
    }
}

// ---- spatial participants ----

const SPATIAL_TOPICS: [&str; 8] = ["r1/a/t", "r1/b/t", "r1/c/t", "r2/a/t", "r2/b/t", "r1/a/h", "r2/c/h", "r2/a/x/t"];
const SPATIAL_FILTERS: [&str; 7] =
    ["$AVG/+/a/t", "$SUM/r1/+/t", "$MAX/r1/#", "$MIN/+/+/h", "$SUM$GT;3/+/+/t", "$COUNT/r2/a;b;c/t", "$SUM;RPT/#"];
const PAYLOADS: [&str; 8] = ["4", "2.5", "-1", "3", "7", "on", "{\"s\":1}", "12"];

pub fn spatial_vs_scan(cases: u32) -> Result<(), String> {
    let events = proptest::collection::vec((0..SPATIAL_TOPICS.len(), 0..PAYLOADS.len(), -100i64..100), 0..30);
    let nonempty = Cell::new(0u64);
    run(cases, (0..SPATIAL_FILTERS.len(), events), |(f, events)| {
        let now = origin();
        let mut store = AggregationStore::with_defaults(now);
        let mut last: BTreeMap<&str, (&str, Timestamp)> = BTreeMap::new();
        for (t, p, ttl) in events {
            let deadline = now + TimeDelta::seconds(ttl);
            store.record_publish(SPATIAL_TOPICS[t], PAYLOADS[p].as_bytes(), deadline, now);
            last.insert(SPATIAL_TOPICS[t], (PAYLOADS[p], deadline));
        }
        let filter = SPATIAL_FILTERS[f];
        let expr = parse_subscription(filter, &NoProcessing).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let sub = SpatialSubscription::from_expr(&expr).ok_or_else(|| TestCaseError::fail("not spatial"))?;
        let got: Vec<(String, f64)> = sub.participants(&store, now);

        let (_, base) = filter.split_once('/').unwrap();
        let named: Option<Vec<String>> = base.contains(';').then(|| {
            let (head, rest) = base.split_once('/').map(|(a, b)| (a.to_string(), b.to_string())).unwrap();
            let (list, tail) = rest.split_once('/').unwrap();
            list.split(';').map(|x| format!("{head}/{x}/{tail}")).collect()
        });
        let threshold = filter.contains("$GT;3").then_some(3.0);
        let want: Vec<(String, f64)> = last
            .iter()
            .filter(|(topic, _)| match &named {
                Some(list) => list.iter().any(|t| t == *topic),
                None => matches(base, topic),
            })
            .filter(|(_, (_, deadline))| now <= *deadline)
            .filter_map(|(topic, (payload, _))| payload.parse::<f64>().ok().map(|v| (topic.to_string(), v)))
            .filter(|(_, v)| threshold.is_none_or(|th| *v > th))
            .collect();
        let mut got_sorted = got.clone();
        got_sorted.sort_by(|a, b| a.0.cmp(&b.0));
        nonempty.set(nonempty.get() + u64::from(!want.is_empty()));
        prop_assert_eq!(got_sorted, want);
        Ok(())
    })?;
    nonvacuous(nonempty.get(), u64::from(cases), "non-empty participant sets")
}

// ---- equivalence collapse ----

fn stat() -> impl Strategy<Value = Stat> {
    prop::sample::select(Stat::ALL.to_vec())
}

/// A single concrete topic folded spatially gives its own temporal
/// statistic, so the collapsed plan must match the full spatial plan.
pub fn collapse_equivalence(cases: u32) -> Result<(), String> {
    let trace = proptest::collection::vec((0u32..900, -100i32..100), 1..40);
    let windows = [TimeWindow::Hourly, TimeWindow::QuarterHourly];
    let spatial_stat = stat().prop_filter("count is not collapsed", |s| *s != Stat::Count);
    let outputs = Cell::new(0u64);
    run(cases, (spatial_stat, stat(), prop::sample::select(windows.to_vec()), trace), |(s, t, w, trace)| {
        let start = origin();
        let far = start + TimeDelta::days(365);
        let windows = [1440, 60, 15];
        let mut store = AggregationStore::new(&windows, TimeDelta::seconds(60), start).unwrap();
        let filter = format!("${}${}{}/a/t", s.keyword(), w.keyword(), t.keyword());
        let expr = parse_subscription(&filter, &NoProcessing).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let collapsed = compile(&expr, &windows).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!(collapsed.collapsed);
        let full = SpatialSubscription::from_expr(&expr).unwrap();

        let mut now = start;
        let mut mismatches = Vec::new();
        let mut compare = |store: &mut AggregationStore, now| {
            store.advance_with(now, |fire, st| {
                if !fire.due.contains(&w.minutes()) {
                    return;
                }
                let fast: Vec<Vec<u8>> = collapsed.on_fire(fire, st).into_iter().map(|o| o.payload).collect();
                let slow: Vec<Vec<u8>> =
                    full.aggregate_now(st, fire.at).into_iter().map(|o| format_value(o.value).into_bytes()).collect();
                outputs.set(outputs.get() + fast.len() as u64);
                if fast != slow {
                    mismatches.push(format!("fire {}: {fast:?} vs {slow:?}", fire.index));
                }
            });
        };
        for (dt, v) in trace {
            now += TimeDelta::seconds(i64::from(dt));
            compare(&mut store, now);
            store.record_publish("a/t", v.to_string().as_bytes(), far, now);
        }
        compare(&mut store, now + TimeDelta::days(1));
        prop_assert!(mismatches.is_empty(), "{} {}", filter, mismatches.join("; "));
        Ok(())
    })?;
    nonvacuous(outputs.get(), u64::from(cases), "collapsed outputs")
}

// ---- rule placement ----

/// Rules after the spatial token filter participants; rules before it
/// filter the aggregate.
pub fn filter_then_sum_distinguished() -> Result<(), String> {
    let mut h = Harness::new();
    let s = h.connect("s");
    let pre = "$SUM$GT;5/+/t";
    let post = "$GT;5$SUM/+/t";
    for f in [pre, post] {
        if h.suback_codes(s, f) != vec![0] {
            return Err(format!("{f} refused"));
        }
    }
    let p = h.connect("p");
    let mut last = BTreeMap::new();
    for (topic, v) in [("a/t", "4"), ("b/t", "6"), ("c/t", "7")] {
        for got in publishes(&h.publish(p, topic, v.as_bytes()), s) {
            last.insert(got.topic.clone(), String::from_utf8_lossy(&got.payload).into_owned());
        }
    }
    let pre_value = last.get("$SUM$GT;5/$AGGREGATE/t").cloned();
    let post_value = last.get("$GT;5$SUM/$AGGREGATE/t").cloned();
    if pre_value.as_deref() == Some("13") && post_value.as_deref() == Some("17") {
        Ok(())
    } else {
        Err(format!("filter-then-sum {pre_value:?}, sum-then-filter {post_value:?}, want 13 and 17"))
    }
}
