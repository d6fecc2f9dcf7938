use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::time::{Duration, Instant};

use mqttplus::broker::ADVANCE_TOPIC;
use mqttplus::client::{Client, ClientError};
use mqttplus::codec::{encode_packet, Packet, Publish, QoS, SUBACK_FAILURE};
use mqttplus::config::{BrokerConfig, ClockMode};
use mqttplus::server::{Server, ServerError};
use thiserror::Error;

use crate::scenario::{Mode, ScenarioConfig};

/// Wall-clock budget for one scenario.
pub const SCENARIO_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("broker unreachable: {0}")]
    BrokerUnreachable(String),
    #[error("scenario timed out: {0}")]
    ScenarioTimeout(String),
    #[error("broker refused subscription {0}")]
    SubscriptionRefused(String),
    #[error("client: {0}")]
    Client(#[from] ClientError),
    #[error("broker: {0}")]
    Server(#[from] ServerError),
    #[error("report: {0}")]
    Report(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn client_err(what: &str) -> impl Fn(ClientError) -> BenchError + '_ {
    move |e| match e {
        ClientError::Timeout => BenchError::ScenarioTimeout(what.to_string()),
        other => BenchError::Client(other),
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Measurement {
    /// Encoded PUBLISH bytes sent by the broker to subscribers.
    pub downlink_bytes: u64,
    pub messages_per_subscriber: Vec<u64>,
    /// Downlink bytes per delivered topic, summed over subscribers.
    pub topic_bytes: BTreeMap<String, u64>,
    /// Processed results that differ from the planted marker count.
    pub count_mismatches: u64,
    /// Processed results checked against planted counts.
    pub counts_checked: u64,
    /// Informational only.
    pub wall_time: Duration,
}

impl Measurement {
    pub fn messages(&self) -> u64 {
        self.messages_per_subscriber.iter().sum()
    }

    /// Mean delivered frame length.
    pub fn bytes_per_message(&self) -> f64 {
        match self.messages() {
            0 => 0.0,
            n => self.downlink_bytes as f64 / n as f64,
        }
    }
}

/// Start an in-process broker on a virtual clock, run the scenario
/// against it and stop it.
pub async fn run_scenario(config: &ScenarioConfig) -> Result<Measurement, BenchError> {
    config.validate()?;
    let broker = BrokerConfig {
        host: "127.0.0.1".into(),
        port: 0,
        clock: ClockMode::Virtual,
        window_unit_secs: config.window_unit_secs()?,
        ..BrokerConfig::default()
    };
    let server = Server::bind(broker).await?.spawn();
    let outcome = tokio::time::timeout(SCENARIO_TIMEOUT, run_against(config, server.addr())).await;
    server.shutdown().await?;
    outcome.map_err(|_| BenchError::ScenarioTimeout(format!("{} exceeded {SCENARIO_TIMEOUT:?}", config.mode)))?
}

struct Subscriber {
    client: Client,
    messages: u64,
    /// Processed values per sensor, in arrival order.
    values: HashMap<usize, Vec<String>>,
}

/// Drive a scenario against a broker already running with a virtual
/// clock whose window unit matches `config`.
pub async fn run_against(config: &ScenarioConfig, addr: SocketAddr) -> Result<Measurement, BenchError> {
    config.validate()?;
    let started = Instant::now();
    let connect = |id: String| async move {
        Client::connect(addr, &id)
            .await
            .map_err(|e| BenchError::BrokerUnreachable(format!("{addr} as {id}: {e}")))
    };

    let filter = config.subscription();
    let mut subs = Vec::with_capacity(config.n);
    for j in 0..config.n {
        let mut client = connect(format!("sub-{j}")).await?;
        let codes = client.subscribe(&[(&filter, QoS::AtMostOnce)]).await.map_err(client_err("suback"))?;
        if codes.first() == Some(&SUBACK_FAILURE) {
            return Err(BenchError::SubscriptionRefused(filter));
        }
        subs.push(Subscriber { client, messages: 0, values: HashMap::new() });
    }
    let mut pubs = Vec::with_capacity(config.m);
    for i in 0..config.m {
        pubs.push(connect(format!("pub-{i}")).await?);
    }
    let mut control = connect("ctl".into()).await?;

    let topics: Vec<String> = (0..config.m).map(|i| config.sensor_topic(i)).collect();
    let reply_prefix = config.reply_operator();
    let sensor_of: HashMap<String, usize> = topics
        .iter()
        .enumerate()
        .map(|(i, t)| (format!("{reply_prefix}/{t}"), i))
        .collect();
    let step = (1.0 / config.lambda).to_string();
    let mut measurement = Measurement::default();

    for round in 0..config.rounds() {
        for (i, p) in pubs.iter_mut().enumerate() {
            p.publish(&topics[i], &config.payload_for(round, i), QoS::AtLeastOnce, false)
                .await
                .map_err(client_err("puback"))?;
        }
        for s in subs.iter_mut() {
            if config.mode == Mode::ImageProcessing {
                // Results come back from the processing worker; wait for all of them.
                for _ in 0..config.m {
                    let p = s.client.recv().await.map_err(client_err("processing result"))?;
                    tally(&mut measurement, s, &sensor_of, p);
                }
            } else {
                barrier(&mut measurement, s, &sensor_of).await?;
            }
        }
        control
            .publish(ADVANCE_TOPIC, step.as_bytes(), QoS::AtLeastOnce, false)
            .await
            .map_err(client_err("clock advance"))?;
        for s in subs.iter_mut() {
            barrier(&mut measurement, s, &sensor_of).await?;
        }
    }

    for s in &subs {
        measurement.messages_per_subscriber.push(s.messages);
        measurement.downlink_bytes += s.client.publish_bytes_in;
        if config.mode == Mode::ImageProcessing {
            for (i, got) in &s.values {
                let expected = (0..config.rounds()).map(|r| config.planted(r, *i).to_string());
                measurement.counts_checked += got.len() as u64;
                let matched = got.iter().zip(expected).filter(|(g, e)| *g == e).count() as u64;
                measurement.count_mismatches += got.len() as u64 - matched;
            }
        }
    }
    for c in subs.into_iter().map(|s| s.client).chain(pubs).chain([control]) {
        let _ = c.disconnect().await;
    }
    measurement.wall_time = started.elapsed();
    Ok(measurement)
}

/// Ping round trip: every delivery the broker queued before it has arrived.
async fn barrier(m: &mut Measurement, s: &mut Subscriber, sensor_of: &HashMap<String, usize>) -> Result<(), BenchError> {
    s.client.ping().await.map_err(client_err("ping"))?;
    for p in s.client.drain() {
        tally(m, s, sensor_of, p);
    }
    Ok(())
}

fn tally(m: &mut Measurement, s: &mut Subscriber, sensor_of: &HashMap<String, usize>, p: Publish) {
    s.messages += 1;
    if let Some(&i) = sensor_of.get(&p.topic) {
        s.values.entry(i).or_default().push(String::from_utf8_lossy(&p.payload).into_owned());
    }
    let len = encode_packet(&Packet::Publish(p.clone())).map(|b| b.len() as u64).unwrap_or(0);
    *m.topic_bytes.entry(p.topic).or_default() += len;
}
