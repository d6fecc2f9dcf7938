//! Reference MQTT 3.1.1 delivery semantics for a scripted workload,
//! written independently of the broker under test.

use std::collections::{BTreeMap, BTreeSet};

/// (client, topic, payload, qos, retain)
pub type Delivery = (String, String, Vec<u8>, u8, bool);

#[derive(Debug, Clone)]
pub enum Op {
    Connect { id: &'static str, keep_alive: u16 },
    Subscribe { id: &'static str, filter: &'static str, qos: u8 },
    Publish { id: &'static str, topic: &'static str, payload: &'static [u8], qos: u8, retain: bool },
    /// Stop talking and wait for the keep-alive to expire.
    GoSilent { id: &'static str },
}

#[derive(Default)]
pub struct ReferenceBroker {
    retained: BTreeMap<String, (Vec<u8>, u8)>,
    subs: BTreeMap<String, Vec<(String, u8)>>,
    connected: BTreeSet<String>,
}

/// Level-by-level filter match; `$` topics never match a leading wildcard.
pub fn matches(filter: &str, topic: &str) -> bool {
    if topic.starts_with('$') && (filter.starts_with('+') || filter.starts_with('#')) {
        return false;
    }
    fn go(f: &[&str], t: &[&str]) -> bool {
        match (f.first(), t.first()) {
            (Some(&"#"), _) => true,
            (Some(&"+"), Some(_)) => go(&f[1..], &t[1..]),
            (Some(a), Some(b)) if a == b => go(&f[1..], &t[1..]),
            (None, None) => true,
            _ => false,
        }
    }
    let f: Vec<&str> = filter.split('/').collect();
    let t: Vec<&str> = topic.split('/').collect();
    go(&f, &t)
}

impl ReferenceBroker {
    pub fn apply(&mut self, op: &Op) -> Vec<Delivery> {
        let mut out = Vec::new();
        match op {
            Op::Connect { id, .. } => {
                self.connected.insert(id.to_string());
                self.subs.insert(id.to_string(), Vec::new());
            }
            Op::Subscribe { id, filter, qos } => {
                self.subs.entry(id.to_string()).or_default().push((filter.to_string(), *qos));
                for (topic, (payload, rq)) in &self.retained {
                    if matches(filter, topic) {
                        out.push((id.to_string(), topic.clone(), payload.clone(), (*rq).min(*qos), true));
                    }
                }
            }
            Op::Publish { topic, payload, qos, retain, .. } => {
                for client in &self.connected {
                    for (filter, sq) in self.subs.get(client).into_iter().flatten() {
                        if matches(filter, topic) {
                            out.push((client.clone(), topic.to_string(), payload.to_vec(), (*qos).min(*sq), false));
                        }
                    }
                }
                if *retain {
                    if payload.is_empty() {
                        self.retained.remove(*topic);
                    } else {
                        self.retained.insert(topic.to_string(), (payload.to_vec(), *qos));
                    }
                }
            }
            Op::GoSilent { id } => {
                self.connected.remove(*id);
                self.subs.remove(*id);
            }
        }
        out
    }
}

pub fn script() -> Vec<Op> {
    use Op::*;
    vec![
        Connect { id: "pub", keep_alive: 0 },
        Connect { id: "watcher", keep_alive: 0 },
        Connect { id: "sleepy", keep_alive: 1 },
        Publish { id: "pub", topic: "home/kitchen/temp", payload: b"21", qos: 1, retain: true },
        Publish { id: "pub", topic: "home/hall/temp", payload: b"19", qos: 0, retain: true },
        Publish { id: "pub", topic: "home/kitchen/hum", payload: b"40", qos: 1, retain: false },
        Subscribe { id: "watcher", filter: "home/+/temp", qos: 1 },
        Subscribe { id: "sleepy", filter: "home/kitchen/#", qos: 0 },
        Connect { id: "everything", keep_alive: 0 },
        Subscribe { id: "everything", filter: "#", qos: 1 },
        Publish { id: "pub", topic: "home/kitchen/temp", payload: b"22", qos: 1, retain: false },
        Publish { id: "pub", topic: "$internal/x", payload: b"1", qos: 0, retain: false },
        GoSilent { id: "sleepy" },
        Publish { id: "pub", topic: "home/kitchen/hum", payload: b"41", qos: 1, retain: false },
        Publish { id: "pub", topic: "home/hall/temp", payload: b"", qos: 0, retain: true },
        Connect { id: "late", keep_alive: 0 },
        Subscribe { id: "late", filter: "home/+/temp", qos: 1 },
    ]
}
