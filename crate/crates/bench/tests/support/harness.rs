//! Drives the sans-IO broker core directly with virtual clocks.

use std::sync::Arc;

use mqttplus::broker::{Action, Broker, ConnId};
use mqttplus::clock::{Clock, VirtualClock};
use mqttplus::codec::{Connect, Packet, Publish, QoS, Subscribe};
use mqttplus::config::BrokerConfig;
use mqttplus::processing::ProcessingRegistry;

pub struct Harness {
    pub broker: Broker,
    pub data: VirtualClock,
    next: ConnId,
}

impl Harness {
    pub fn new() -> Self {
        let data = VirtualClock::at_default_origin();
        let broker = Broker::with_clocks(
            BrokerConfig::default(),
            Arc::new(ProcessingRegistry::with_stub()),
            Clock::Virtual(data.clone()),
            Clock::Virtual(VirtualClock::at_default_origin()),
        );
        Self { broker, data, next: 1 }
    }

    pub fn connect(&mut self, id: &str) -> ConnId {
        let conn = self.next;
        self.next += 1;
        self.broker.connection_opened(conn);
        self.broker.handle_packet(conn, Packet::Connect(Connect::new(id, 0, true)));
        conn
    }

    pub fn send(&mut self, conn: ConnId, p: Packet) -> Vec<Action> {
        let actions = self.broker.handle_packet(conn, p);
        self.broker.resolve_inline(actions)
    }

    pub fn suback_codes(&mut self, conn: ConnId, filter: &str) -> Vec<u8> {
        let actions = self.send(
            conn,
            Packet::Subscribe(Subscribe { packet_id: 1, filters: vec![(filter.to_string(), QoS::AtMostOnce)] }),
        );
        actions
            .into_iter()
            .find_map(|a| match a {
                Action::Send(c, Packet::Suback(s)) if c == conn => Some(s.codes),
                _ => None,
            })
            .unwrap_or_default()
    }

    pub fn publish(&mut self, conn: ConnId, topic: &str, payload: &[u8]) -> Vec<Action> {
        self.send(conn, Packet::Publish(Publish::qos0(topic, payload.to_vec())))
    }
}

pub fn publishes(actions: &[Action], conn: ConnId) -> Vec<Publish> {
    actions
        .iter()
        .filter_map(|a| match a {
            Action::Send(c, Packet::Publish(p)) if *c == conn => Some(p.clone()),
            _ => None,
        })
        .collect()
}
