//! Minimal async MQTT 3.1.1 client used by tests and the benchmark.

use std::collections::VecDeque;
use std::net::SocketAddr;
use std::time::Duration;

use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;

use crate::codec::{Codec, CodecError, Connect, Packet, Publish, QoS, Subscribe, Unsubscribe};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("codec: {0}")]
    Codec(#[from] CodecError),
    #[error("connection refused with code {0}")]
    Refused(u8),
    #[error("unexpected {0}")]
    Unexpected(&'static str),
    #[error("timed out waiting for the broker")]
    Timeout,
    #[error("connection closed by the broker")]
    Closed,
}

pub struct Client {
    stream: TcpStream,
    codec: Codec,
    buf: Vec<u8>,
    pending: VecDeque<Publish>,
    next_packet_id: u16,
    timeout: Duration,
    /// Encoded size of every PUBLISH frame received.
    pub publish_bytes_in: u64,
    pub publishes_in: u64,
}

impl Client {
    pub async fn connect(addr: SocketAddr, client_id: &str) -> Result<Self, ClientError> {
        Self::connect_with(addr, Connect::new(client_id, 0, true)).await
    }

    pub async fn connect_with(addr: SocketAddr, connect: Connect) -> Result<Self, ClientError> {
        let stream = TcpStream::connect(addr).await?;
        stream.set_nodelay(true)?;
        let mut client = Self {
            stream,
            codec: Codec::default(),
            buf: Vec::new(),
            pending: VecDeque::new(),
            next_packet_id: 0,
            timeout: Duration::from_secs(10),
            publish_bytes_in: 0,
            publishes_in: 0,
        };
        client.send(&Packet::Connect(connect)).await?;
        match client.next_control().await? {
            Packet::Connack(c) if c.code == 0 => Ok(client),
            Packet::Connack(c) => Err(ClientError::Refused(c.code)),
            other => Err(ClientError::Unexpected(other.name())),
        }
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    fn packet_id(&mut self) -> u16 {
        self.next_packet_id = self.next_packet_id.checked_add(1).unwrap_or(1);
        self.next_packet_id
    }

    pub async fn send(&mut self, packet: &Packet) -> Result<(), ClientError> {
        let bytes = self.codec.encode(packet)?;
        self.stream.write_all(&bytes).await?;
        Ok(())
    }

    async fn read_packet(&mut self) -> Result<Packet, ClientError> {
        loop {
            if let Some((packet, used)) = self.codec.decode(&self.buf)? {
                self.buf.drain(..used);
                if let Packet::Publish(p) = &packet {
                    self.publish_bytes_in += used as u64;
                    self.publishes_in += 1;
                    if let (QoS::AtLeastOnce, Some(pid)) = (p.qos, p.packet_id) {
                        self.send(&Packet::Puback(pid)).await?;
                    }
                }
                return Ok(packet);
            }
            let mut chunk = [0u8; 16 * 1024];
            let n = tokio::time::timeout(self.timeout, self.stream.read(&mut chunk))
                .await
                .map_err(|_| ClientError::Timeout)??;
            if n == 0 {
                return Err(ClientError::Closed);
            }
            self.buf.extend_from_slice(&chunk[..n]);
        }
    }

    /// Next non-PUBLISH packet; publishes are queued for [`Self::recv`].
    async fn next_control(&mut self) -> Result<Packet, ClientError> {
        loop {
            match self.read_packet().await? {
                Packet::Publish(p) => self.pending.push_back(p),
                other => return Ok(other),
            }
        }
    }

    /// Granted codes.
    pub async fn subscribe(&mut self, filters: &[(&str, QoS)]) -> Result<Vec<u8>, ClientError> {
        let packet_id = self.packet_id();
        self.send(&Packet::Subscribe(Subscribe {
            packet_id,
            filters: filters.iter().map(|(f, q)| (f.to_string(), *q)).collect(),
        }))
        .await?;
        match self.next_control().await? {
            Packet::Suback(s) if s.packet_id == packet_id => Ok(s.codes),
            other => Err(ClientError::Unexpected(other.name())),
        }
    }

    pub async fn unsubscribe(&mut self, filters: &[&str]) -> Result<(), ClientError> {
        let packet_id = self.packet_id();
        self.send(&Packet::Unsubscribe(Unsubscribe {
            packet_id,
            filters: filters.iter().map(|f| f.to_string()).collect(),
        }))
        .await?;
        match self.next_control().await? {
            Packet::Unsuback(id) if id == packet_id => Ok(()),
            other => Err(ClientError::Unexpected(other.name())),
        }
    }

    /// QoS 1 publishes wait for their PUBACK.
    pub async fn publish(&mut self, topic: &str, payload: &[u8], qos: QoS, retain: bool) -> Result<(), ClientError> {
        let packet_id = (qos == QoS::AtLeastOnce).then(|| self.packet_id());
        self.send(&Packet::Publish(Publish {
            dup: false,
            qos,
            retain,
            topic: topic.to_string(),
            packet_id,
            payload: payload.to_vec(),
        }))
        .await?;
        if let Some(id) = packet_id {
            match self.next_control().await? {
                Packet::Puback(got) if got == id => {}
                other => return Err(ClientError::Unexpected(other.name())),
            }
        }
        Ok(())
    }

    /// PINGREQ/PINGRESP round trip; everything the broker sent before the
    /// PINGRESP has been received when this returns.
    pub async fn ping(&mut self) -> Result<(), ClientError> {
        self.send(&Packet::Pingreq).await?;
        match self.next_control().await? {
            Packet::Pingresp => Ok(()),
            other => Err(ClientError::Unexpected(other.name())),
        }
    }

    pub async fn recv(&mut self) -> Result<Publish, ClientError> {
        if let Some(p) = self.pending.pop_front() {
            return Ok(p);
        }
        loop {
            match self.read_packet().await? {
                Packet::Publish(p) => return Ok(p),
                Packet::Pingresp | Packet::Puback(_) => {}
                other => return Err(ClientError::Unexpected(other.name())),
            }
        }
    }

    /// Publishes received so far, without waiting.
    pub fn drain(&mut self) -> Vec<Publish> {
        self.pending.drain(..).collect()
    }

    pub async fn disconnect(mut self) -> Result<(), ClientError> {
        self.send(&Packet::Disconnect).await?;
        let _ = self.stream.shutdown().await;
        Ok(())
    }
}
