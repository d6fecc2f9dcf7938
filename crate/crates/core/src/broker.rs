//! Broker state machine. It owns sessions, routing, retained messages and
//! the aggregation state, consumes decoded packets and returns the actions
//! the transport must perform. It does no I/O itself.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use chrono::TimeDelta;

use crate::clock::{Clock, Timestamp, VirtualClock};
use crate::codec::{connack_code, Connack, Connect, Packet, Publish, QoS, Suback, Subscribe, Unsubscribe, SUBACK_FAILURE};
use crate::config::{BrokerConfig, ClockMode};
use crate::grammar::{parse_subscription, OperatorToken, SubscriptionExpr};
use crate::pipeline::{compile, Output, Pipeline};
use crate::processing::{ProcessingError, ProcessingRegistry, ProcessingResult};
use crate::store::AggregationStore;
use crate::topic::{match_filter, validate_topic_name, FilterTrie};
use crate::ttl::strip_ttl;

pub type ConnId = u64;

pub const CAPABILITIES_TOPIC: &str = "$SYS/capabilities";
pub const ADVANCE_TOPIC: &str = "$SYS/ctl/advance";

/// Work to run off the event queue; its result comes back through
/// [`Broker::processing_complete`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProcessingJob {
    pub keyword: String,
    pub topic: String,
    pub payload: Vec<u8>,
    pub deadline: Timestamp,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Send(ConnId, Packet),
    Close(ConnId),
    Process(ProcessingJob),
}

#[derive(Debug)]
struct Connection {
    client_id: Option<String>,
    keep_alive: u16,
    last_seen: Timestamp,
}

#[derive(Debug, Clone)]
struct Inflight {
    publish: Publish,
    sent_at: Timestamp,
}

#[derive(Debug)]
struct Session {
    conn: Option<ConnId>,
    clean: bool,
    /// Filter as written → (parsed expression, granted QoS).
    subscriptions: BTreeMap<String, (SubscriptionExpr, QoS)>,
    inflight: BTreeMap<u16, Inflight>,
    next_packet_id: u16,
}

impl Session {
    fn new(conn: ConnId, clean: bool) -> Self {
        Self {
            conn: Some(conn),
            clean,
            subscriptions: BTreeMap::new(),
            inflight: BTreeMap::new(),
            next_packet_id: 0,
        }
    }

    fn allocate_packet_id(&mut self) -> u16 {
        loop {
            self.next_packet_id = self.next_packet_id.checked_add(1).unwrap_or(1);
            if !self.inflight.contains_key(&self.next_packet_id) {
                return self.next_packet_id;
            }
        }
    }
}

pub struct Broker {
    config: BrokerConfig,
    /// Time used for TTLs and windows; virtual in test mode.
    data_clock: Clock,
    /// Time used for keep-alive and retransmission.
    transport_clock: Clock,
    registry: Arc<ProcessingRegistry>,
    connections: HashMap<ConnId, Connection>,
    sessions: BTreeMap<String, Session>,
    plain: FilterTrie<BTreeMap<String, QoS>>,
    retained: BTreeMap<String, (Vec<u8>, QoS)>,
    store: AggregationStore,
    pipeline: Pipeline,
}

impl Broker {
    /// Clocks chosen from the configuration: the system clock, or a virtual
    /// data clock with real transport time.
    pub fn new(config: BrokerConfig, registry: Arc<ProcessingRegistry>) -> Self {
        let data_clock = match config.clock {
            ClockMode::Real => Clock::System,
            ClockMode::Virtual => Clock::Virtual(VirtualClock::at_default_origin()),
        };
        Self::with_clocks(config, registry, data_clock, Clock::System)
    }

    pub fn with_clocks(config: BrokerConfig, registry: Arc<ProcessingRegistry>, data_clock: Clock, transport_clock: Clock) -> Self {
        let store = AggregationStore::new(&config.windows, config.window_unit(), data_clock.now())
            .expect("configuration was validated");
        Self {
            config,
            data_clock,
            transport_clock,
            registry,
            connections: HashMap::new(),
            sessions: BTreeMap::new(),
            plain: FilterTrie::new(),
            retained: BTreeMap::new(),
            store,
            pipeline: Pipeline::new(),
        }
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.config
    }

    pub fn registry(&self) -> Arc<ProcessingRegistry> {
        Arc::clone(&self.registry)
    }

    pub fn store(&self) -> &AggregationStore {
        &self.store
    }

    pub fn data_clock(&self) -> &Clock {
        &self.data_clock
    }

    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_connected(&self, client_id: &str) -> bool {
        self.sessions.get(client_id).is_some_and(|s| s.conn.is_some())
    }

    pub fn retained(&self, topic: &str) -> Option<&[u8]> {
        self.retained.get(topic).map(|(p, _)| p.as_slice())
    }

    pub fn connection_opened(&mut self, conn: ConnId) {
        self.connections.insert(
            conn,
            Connection {
                client_id: None,
                keep_alive: 0,
                last_seen: self.transport_clock.now(),
            },
        );
    }

    /// The transport lost the connection without a DISCONNECT.
    pub fn connection_lost(&mut self, conn: ConnId) -> Vec<Action> {
        log::info!(target: "disconnect", "connection {conn} lost");
        self.drop_connection(conn);
        Vec::new()
    }

    pub fn handle_packet(&mut self, conn: ConnId, packet: Packet) -> Vec<Action> {
        let now = self.transport_clock.now();
        let Some(c) = self.connections.get_mut(&conn) else {
            return Vec::new();
        };
        c.last_seen = now;
        let client = c.client_id.clone();
        match (client, packet) {
            (None, Packet::Connect(p)) => self.handle_connect(conn, p),
            (None, other) => {
                log::warn!(target: "protocol_error", "connection {conn} sent {} before CONNECT", other.name());
                self.close(conn)
            }
            (Some(id), Packet::Connect(_)) => {
                log::warn!(target: "protocol_error", "client {id} sent a second CONNECT");
                self.close(conn)
            }
            (Some(id), Packet::Publish(p)) => self.handle_publish(conn, &id, p),
            (Some(id), Packet::Puback(pid)) => {
                if let Some(s) = self.sessions.get_mut(&id) {
                    s.inflight.remove(&pid);
                }
                Vec::new()
            }
            (Some(id), Packet::Subscribe(p)) => self.handle_subscribe(conn, &id, p),
            (Some(id), Packet::Unsubscribe(p)) => self.handle_unsubscribe(conn, &id, p),
            (Some(_), Packet::Pingreq) => vec![Action::Send(conn, Packet::Pingresp)],
            (Some(id), Packet::Disconnect) => {
                log::info!(target: "disconnect", "client {id} disconnected");
                self.close(conn)
            }
            (Some(id), other) => {
                log::warn!(target: "protocol_error", "client {id} sent unexpected {}", other.name());
                self.close(conn)
            }
        }
    }

    fn close(&mut self, conn: ConnId) -> Vec<Action> {
        self.drop_connection(conn);
        vec![Action::Close(conn)]
    }

    fn drop_connection(&mut self, conn: ConnId) {
        let Some(c) = self.connections.remove(&conn) else {
            return;
        };
        let Some(id) = c.client_id else {
            return;
        };
        let Some(session) = self.sessions.get_mut(&id) else {
            return;
        };
        if session.conn != Some(conn) {
            return;
        }
        session.conn = None;
        session.inflight.clear();
        if session.clean {
            self.remove_session(&id);
        }
    }

    fn remove_session(&mut self, id: &str) {
        let Some(session) = self.sessions.remove(id) else {
            return;
        };
        for (filter, (expr, _)) in &session.subscriptions {
            self.forget_subscription(id, filter, expr);
        }
    }

    fn forget_subscription(&mut self, id: &str, filter: &str, expr: &SubscriptionExpr) {
        if expr.is_plain() {
            if let Some(subs) = self.plain.get_mut(filter) {
                subs.remove(id);
                if subs.is_empty() {
                    self.plain.remove(filter);
                }
            }
        } else {
            self.pipeline.remove(id, filter);
        }
    }

    fn handle_connect(&mut self, conn: ConnId, p: Connect) -> Vec<Action> {
        let refuse = |code| {
            vec![
                Action::Send(conn, Packet::Connack(Connack { session_present: false, code })),
                Action::Close(conn),
            ]
        };
        if p.protocol_name != "MQTT" || p.protocol_level != 4 {
            log::warn!(target: "connect", "refused protocol {} level {}", p.protocol_name, p.protocol_level);
            self.connections.remove(&conn);
            return refuse(connack_code::UNACCEPTABLE_PROTOCOL_VERSION);
        }
        if (p.client_id.is_empty() && !p.clean_session) || p.client_id.chars().any(char::is_control) {
            log::warn!(target: "connect", "refused client id {:?}", p.client_id);
            self.connections.remove(&conn);
            return refuse(connack_code::IDENTIFIER_REJECTED);
        }
        let id = if p.client_id.is_empty() {
            format!("auto-{conn}")
        } else {
            p.client_id
        };
        let mut actions = Vec::new();
        if let Some(old) = self.sessions.get(&id).and_then(|s| s.conn) {
            log::info!(target: "connect", "client {id} taken over; closing connection {old}");
            self.drop_connection(old);
            actions.push(Action::Close(old));
        }
        if p.clean_session {
            self.remove_session(&id);
        }
        let session_present = match self.sessions.get_mut(&id) {
            Some(s) => {
                s.conn = Some(conn);
                s.clean = false;
                true
            }
            None => {
                self.sessions.insert(id.clone(), Session::new(conn, p.clean_session));
                false
            }
        };
        if let Some(c) = self.connections.get_mut(&conn) {
            c.client_id = Some(id.clone());
            c.keep_alive = p.keep_alive;
        }
        log::info!(target: "connect", "client {id} connected on {conn} (keep-alive {}s, clean {})", p.keep_alive, p.clean_session);
        actions.push(Action::Send(
            conn,
            Packet::Connack(Connack {
                session_present,
                code: connack_code::ACCEPTED,
            }),
        ));
        actions
    }

    fn handle_publish(&mut self, conn: ConnId, client: &str, p: Publish) -> Vec<Action> {
        if p.qos == QoS::ExactlyOnce {
            log::warn!(target: "protocol_error", "client {client} published with QoS 2; closing");
            return self.close(conn);
        }
        let mut actions = Vec::new();
        if let (QoS::AtLeastOnce, Some(pid)) = (p.qos, p.packet_id) {
            actions.push(Action::Send(conn, Packet::Puback(pid)));
        }
        if validate_topic_name(&p.topic).is_err() {
            log::warn!(target: "publish", "client {client} published on invalid topic {:?}", p.topic);
            return actions;
        }
        if p.topic == ADVANCE_TOPIC {
            actions.extend(self.handle_advance(client, &p.payload));
            return actions;
        }
        if p.topic.starts_with("$SYS") {
            log::info!(target: "publish", "dropped client publish on reserved topic {}", p.topic);
            return actions;
        }
        actions.extend(self.run_timers());
        actions.extend(self.publish(&p.topic, &p.payload, p.qos, p.retain));
        actions
    }

    fn handle_advance(&mut self, client: &str, payload: &[u8]) -> Vec<Action> {
        let Some(clock) = self.data_clock.as_virtual() else {
            log::warn!(target: "publish", "clock advance from {client} ignored: clock is real");
            return Vec::new();
        };
        let secs = std::str::from_utf8(payload).ok().and_then(|s| s.trim().parse::<f64>().ok());
        match secs {
            Some(s) if s.is_finite() && s >= 0.0 => {
                let now = clock.advance(TimeDelta::milliseconds((s * 1000.0).round() as i64));
                log::info!(target: "timer", "virtual clock advanced by {s}s to {}", crate::ttl::rfc3339(now));
                self.run_timers()
            }
            _ => {
                log::warn!(target: "publish", "clock advance from {client} has bad payload");
                Vec::new()
            }
        }
    }

    /// Route an accepted publish: plain subscribers, the store, operator
    /// subscriptions, processing jobs and finally the retained store.
    fn publish(&mut self, topic: &str, raw: &[u8], qos: QoS, retain: bool) -> Vec<Action> {
        let now = self.data_clock.now();
        let (payload, deadline) = strip_ttl(raw, now, self.config.default_ttl);
        let mut actions = Vec::new();

        let targets: Vec<(String, QoS)> = self
            .plain
            .matches(topic)
            .into_iter()
            .flat_map(|subs| subs.iter().map(|(c, q)| (c.clone(), *q)))
            .collect();
        log::info!(target: "publish", "{topic}: {} bytes, {} plain deliveries", payload.len(), targets.len());
        for (client, sub_qos) in targets {
            actions.extend(self.send_publish(&client, topic, &payload, qos.min(sub_qos), false));
        }

        if !topic.starts_with('$') {
            self.store.record_publish(topic, &payload, deadline, now);
            let outs = self.pipeline.on_publish(topic, &payload, &self.store, now);
            actions.extend(self.send_outputs(outs));
            for keyword in self.pipeline.processing_for(topic) {
                actions.push(Action::Process(ProcessingJob {
                    keyword,
                    topic: topic.to_string(),
                    payload: payload.clone(),
                    deadline,
                }));
            }
        }

        if retain {
            if payload.is_empty() {
                self.retained.remove(topic);
            } else {
                self.retained.insert(topic.to_string(), (payload, qos));
            }
        }
        actions
    }

    fn send_outputs(&mut self, outs: Vec<(String, Output)>) -> Vec<Action> {
        outs.into_iter()
            .flat_map(|(client, o)| self.send_publish(&client, &o.topic, &o.payload, QoS::AtMostOnce, false))
            .collect()
    }

    fn send_publish(&mut self, client: &str, topic: &str, payload: &[u8], qos: QoS, retain: bool) -> Vec<Action> {
        let now = self.transport_clock.now();
        let Some(session) = self.sessions.get_mut(client) else {
            return Vec::new();
        };
        let Some(conn) = session.conn else {
            return Vec::new();
        };
        let mut publish = Publish {
            dup: false,
            qos,
            retain,
            topic: topic.to_string(),
            packet_id: None,
            payload: payload.to_vec(),
        };
        if qos == QoS::AtLeastOnce {
            let pid = session.allocate_packet_id();
            publish.packet_id = Some(pid);
            session.inflight.insert(
                pid,
                Inflight {
                    publish: publish.clone(),
                    sent_at: now,
                },
            );
        }
        vec![Action::Send(conn, Packet::Publish(publish))]
    }

    fn handle_subscribe(&mut self, conn: ConnId, client: &str, p: Subscribe) -> Vec<Action> {
        let mut codes = Vec::with_capacity(p.filters.len());
        let mut accepted = Vec::new();
        for (filter, requested) in p.filters {
            match self.add_subscription(client, &filter, requested) {
                Ok((expr, granted)) => {
                    log::info!(target: "subscribe", "client {client} subscribed to {filter} (granted {})", granted.bits());
                    codes.push(granted.bits());
                    accepted.push((filter, expr, granted));
                }
                Err(reason) => {
                    log::info!(target: "subscribe", "client {client} refused {filter}: {reason}");
                    codes.push(SUBACK_FAILURE);
                }
            }
        }
        let mut actions = vec![Action::Send(conn, Packet::Suback(Suback { packet_id: p.packet_id, codes }))];
        for (filter, expr, granted) in accepted {
            actions.extend(self.initial_deliveries(client, &filter, &expr, granted));
        }
        actions
    }

    fn add_subscription(&mut self, client: &str, filter: &str, requested: QoS) -> Result<(SubscriptionExpr, QoS), String> {
        let expr = parse_subscription(filter, self.registry.as_ref()).map_err(|e| e.to_string())?;
        let granted = requested.min(QoS::AtLeastOnce);
        let session = self.sessions.get_mut(client).ok_or("no session")?;
        if let Some((old, _)) = session.subscriptions.remove(filter) {
            self.forget_subscription(client, filter, &old);
        }
        if expr.is_plain() {
            self.plain
                .entry_or_insert_with(filter, BTreeMap::new)
                .insert(client.to_string(), granted);
        } else {
            let compiled = compile(&expr, self.store.windows()).map_err(|e| e.to_string())?;
            self.pipeline.insert(client, filter, compiled);
        }
        if let Some(s) = self.sessions.get_mut(client) {
            s.subscriptions.insert(filter.to_string(), (expr.clone(), granted));
        }
        Ok((expr, granted))
    }

    /// Retained messages, the capabilities document, and retained messages
    /// passing a rule-only chain.
    fn initial_deliveries(&mut self, client: &str, filter: &str, expr: &SubscriptionExpr, granted: QoS) -> Vec<Action> {
        let mut actions = Vec::new();
        if expr.is_plain() {
            if match_filter(filter, CAPABILITIES_TOPIC) {
                let doc = self.registry.capabilities_document();
                actions.extend(self.send_publish(client, CAPABILITIES_TOPIC, &doc, QoS::AtMostOnce, false));
            }
            let retained: Vec<(String, Vec<u8>, QoS)> = self
                .retained
                .iter()
                .filter(|(t, _)| match_filter(filter, t))
                .map(|(t, (p, q))| (t.clone(), p.clone(), *q))
                .collect();
            for (topic, payload, qos) in retained {
                actions.extend(self.send_publish(client, &topic, &payload, qos.min(granted), true));
            }
        } else if expr.chain.iter().all(|t| matches!(t, OperatorToken::Rule(_))) {
            let retained: Vec<(String, Vec<u8>)> = self
                .retained
                .iter()
                .filter(|(t, _)| match_filter(&expr.base_filter, t))
                .filter(|(_, (p, _))| expr.rules().all(|r| r.forwards(p)))
                .map(|(t, (p, _))| (expr.reply_topic_for(t), p.clone()))
                .collect();
            for (topic, payload) in retained {
                actions.extend(self.send_publish(client, &topic, &payload, QoS::AtMostOnce, true));
            }
        }
        actions
    }

    fn handle_unsubscribe(&mut self, conn: ConnId, client: &str, p: Unsubscribe) -> Vec<Action> {
        for filter in &p.filters {
            let removed = self.sessions.get_mut(client).and_then(|s| s.subscriptions.remove(filter));
            if let Some((expr, _)) = removed {
                self.forget_subscription(client, filter, &expr);
                log::info!(target: "subscribe", "client {client} unsubscribed from {filter}");
            }
        }
        vec![Action::Send(conn, Packet::Unsuback(p.packet_id))]
    }

    /// Run every window close due by the data clock.
    pub fn run_timers(&mut self) -> Vec<Action> {
        let now = self.data_clock.now();
        let pipeline = &self.pipeline;
        let mut outs = Vec::new();
        let fires = self.store.advance_with(now, |fire, store| outs.extend(pipeline.on_fire(fire, store)));
        for fire in &fires {
            log::info!(target: "timer", "fire {} at {} closes windows {:?}", fire.index, crate::ttl::rfc3339(fire.at), fire.due);
        }
        self.send_outputs(outs)
    }

    /// Periodic housekeeping: window closes, keep-alive expiry and QoS 1
    /// retransmission.
    pub fn tick(&mut self) -> Vec<Action> {
        let mut actions = self.run_timers();
        actions.extend(self.expire_keepalive().into_iter().map(Action::Close));
        actions.extend(self.retransmit());
        actions
    }

    /// Close connections silent for more than 1.5 × their keep-alive.
    pub fn expire_keepalive(&mut self) -> Vec<ConnId> {
        let now = self.transport_clock.now();
        let expired: Vec<ConnId> = self
            .connections
            .iter()
            .filter(|(_, c)| c.keep_alive > 0)
            .filter(|(_, c)| now - c.last_seen > TimeDelta::milliseconds(i64::from(c.keep_alive) * 1500))
            .map(|(id, _)| *id)
            .collect();
        for conn in &expired {
            log::info!(target: "disconnect", "connection {conn} keep-alive expired");
            self.drop_connection(*conn);
        }
        expired
    }

    fn retransmit(&mut self) -> Vec<Action> {
        let now = self.transport_clock.now();
        let retry = self.config.retry_interval;
        let mut actions = Vec::new();
        for session in self.sessions.values_mut() {
            let Some(conn) = session.conn else { continue };
            for inflight in session.inflight.values_mut() {
                if now - inflight.sent_at >= retry {
                    inflight.publish.dup = true;
                    inflight.sent_at = now;
                    actions.push(Action::Send(conn, Packet::Publish(inflight.publish.clone())));
                }
            }
        }
        actions
    }

    /// Feed a processing result back: numeric results enter the store under
    /// `KEYWORD/topic`, then reach the subscribers.
    pub fn processing_complete(&mut self, job: &ProcessingJob, result: Result<ProcessingResult, ProcessingError>) -> Vec<Action> {
        let result = match result {
            Ok(r) => r,
            Err(e) => {
                log::warn!(target: "processing", "{} on {} failed: {e}", job.keyword, job.topic);
                return Vec::new();
            }
        };
        let now = self.data_clock.now();
        let key = format!("{}/{}", job.keyword, job.topic);
        if result.numeric().is_some() {
            self.store.record_publish(&key, &result.to_payload(), job.deadline, now);
        }
        log::info!(target: "processing", "{key} -> {} bytes", result.to_payload().len());
        let outs = self.pipeline.on_processed(&job.keyword, &job.topic, &result, &self.store, now);
        self.send_outputs(outs)
    }

    /// Run processing jobs in place; convenient when there is no worker.
    pub fn resolve_inline(&mut self, actions: Vec<Action>) -> Vec<Action> {
        let mut out = Vec::new();
        for a in actions {
            match a {
                Action::Process(job) => {
                    let result = self.registry.invoke(&job.keyword, &job.payload);
                    let more = self.processing_complete(&job, result);
                    out.extend(self.resolve_inline(more));
                }
                other => out.push(other),
            }
        }
        out
    }
}
