//! MQTT 3.1.1 control packet encoding and decoding.
//!
//! Only the subset the broker speaks is supported: QoS 2 handshake packets
//! (PUBREC/PUBREL/PUBCOMP) are rejected as unsupported packet types, while a
//! QoS 2 PUBLISH still decodes so the broker can refuse it explicitly.

use thiserror::Error;

/// Largest value the variable-length remaining-length field can carry.
pub const MAX_REMAINING_LENGTH: usize = 268_435_455;

/// Default payload ceiling (256 MB).
pub const DEFAULT_MAX_PAYLOAD: usize = 256 * 1024 * 1024;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("remaining length uses more than four bytes")]
    MalformedRemainingLength,
    #[error("unsupported packet type {0}")]
    UnsupportedPacketType(u8),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("malformed packet: {0}")]
    Malformed(String),
    #[error("payload of {size} bytes exceeds the {max} byte limit")]
    OversizePayload { size: usize, max: usize },
}

pub type Result<T> = std::result::Result<T, CodecError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum QoS {
    #[default]
    AtMostOnce = 0,
    AtLeastOnce = 1,
    ExactlyOnce = 2,
}

impl QoS {
    pub fn from_bits(bits: u8) -> Result<Self> {
        match bits {
            0 => Ok(QoS::AtMostOnce),
            1 => Ok(QoS::AtLeastOnce),
            2 => Ok(QoS::ExactlyOnce),
            other => Err(CodecError::Malformed(format!("invalid qos {other}"))),
        }
    }

    pub fn bits(self) -> u8 {
        self as u8
    }
}

/// SUBACK return code signalling a rejected filter.
pub const SUBACK_FAILURE: u8 = 0x80;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Will {
    pub topic: String,
    pub payload: Vec<u8>,
    pub qos: QoS,
    pub retain: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Connect {
    pub protocol_name: String,
    pub protocol_level: u8,
    pub clean_session: bool,
    pub keep_alive: u16,
    pub client_id: String,
    pub will: Option<Will>,
    pub username: Option<String>,
    pub password: Option<Vec<u8>>,
}

impl Connect {
    /// A plain 3.1.1 CONNECT with no will or credentials.
    pub fn new(client_id: impl Into<String>, keep_alive: u16, clean_session: bool) -> Self {
        Self {
            protocol_name: "MQTT".to_string(),
            protocol_level: 4,
            clean_session,
            keep_alive,
            client_id: client_id.into(),
            will: None,
            username: None,
            password: None,
        }
    }
}

/// CONNACK return codes.
pub mod connack_code {
    pub const ACCEPTED: u8 = 0;
    pub const UNACCEPTABLE_PROTOCOL_VERSION: u8 = 1;
    pub const IDENTIFIER_REJECTED: u8 = 2;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Connack {
    pub session_present: bool,
    pub code: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Publish {
    pub dup: bool,
    pub qos: QoS,
    pub retain: bool,
    pub topic: String,
    /// Present iff `qos > 0`.
    pub packet_id: Option<u16>,
    pub payload: Vec<u8>,
}

impl Publish {
    pub fn qos0(topic: impl Into<String>, payload: impl Into<Vec<u8>>) -> Self {
        Self {
            dup: false,
            qos: QoS::AtMostOnce,
            retain: false,
            topic: topic.into(),
            packet_id: None,
            payload: payload.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subscribe {
    pub packet_id: u16,
    pub filters: Vec<(String, QoS)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Suback {
    pub packet_id: u16,
    pub codes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unsubscribe {
    pub packet_id: u16,
    pub filters: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    Connect(Connect),
    Connack(Connack),
    Publish(Publish),
    Puback(u16),
    Subscribe(Subscribe),
    Suback(Suback),
    Unsubscribe(Unsubscribe),
    Unsuback(u16),
    Pingreq,
    Pingresp,
    Disconnect,
}

impl Packet {
    pub fn type_code(&self) -> u8 {
        match self {
            Packet::Connect(_) => 1,
            Packet::Connack(_) => 2,
            Packet::Publish(_) => 3,
            Packet::Puback(_) => 4,
            Packet::Subscribe(_) => 8,
            Packet::Suback(_) => 9,
            Packet::Unsubscribe(_) => 10,
            Packet::Unsuback(_) => 11,
            Packet::Pingreq => 12,
            Packet::Pingresp => 13,
            Packet::Disconnect => 14,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Packet::Connect(_) => "CONNECT",
            Packet::Connack(_) => "CONNACK",
            Packet::Publish(_) => "PUBLISH",
            Packet::Puback(_) => "PUBACK",
            Packet::Subscribe(_) => "SUBSCRIBE",
            Packet::Suback(_) => "SUBACK",
            Packet::Unsubscribe(_) => "UNSUBSCRIBE",
            Packet::Unsuback(_) => "UNSUBACK",
            Packet::Pingreq => "PINGREQ",
            Packet::Pingresp => "PINGRESP",
            Packet::Disconnect => "DISCONNECT",
        }
    }
}

/// Encoder/decoder with a configurable payload ceiling.
#[derive(Debug, Clone, Copy)]
pub struct Codec {
    pub max_payload: usize,
}

impl Default for Codec {
    fn default() -> Self {
        Self {
            max_payload: DEFAULT_MAX_PAYLOAD,
        }
    }
}

/// Decode one packet from the front of `buf` using the default limits.
///
/// `Ok(None)` means the buffer does not yet hold a complete frame.
pub fn decode_packet(buf: &[u8]) -> Result<Option<(Packet, usize)>> {
    Codec::default().decode(buf)
}

/// Encode a packet using the default limits.
pub fn encode_packet(packet: &Packet) -> Result<Vec<u8>> {
    Codec::default().encode(packet)
}

/// Number of bytes a remaining-length value occupies on the wire.
pub fn remaining_length_len(len: usize) -> usize {
    match len {
        0..=127 => 1,
        128..=16_383 => 2,
        16_384..=2_097_151 => 3,
        _ => 4,
    }
}

fn write_remaining_length(out: &mut Vec<u8>, mut len: usize) {
    loop {
        let mut byte = (len % 128) as u8;
        len /= 128;
        if len > 0 {
            byte |= 0x80;
        }
        out.push(byte);
        if len == 0 {
            break;
        }
    }
}

/// Returns `(value, bytes used)` or `None` when more bytes are needed.
fn read_remaining_length(buf: &[u8]) -> Result<Option<(usize, usize)>> {
    let mut value = 0usize;
    let mut multiplier = 1usize;
    for i in 0..4 {
        let Some(&byte) = buf.get(i) else {
            return Ok(None);
        };
        value += (byte & 0x7F) as usize * multiplier;
        if byte & 0x80 == 0 {
            return Ok(Some((value, i + 1)));
        }
        multiplier *= 128;
    }
    Err(CodecError::MalformedRemainingLength)
}

fn has_wildcard(topic: &str) -> bool {
    topic.contains(['+', '#'])
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_bytes(out, s.as_bytes())
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) -> Result<()> {
    let len = u16::try_from(b.len())
        .map_err(|_| CodecError::Malformed(format!("field of {} bytes exceeds 65535", b.len())))?;
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(b);
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8> {
        let b = *self
            .buf
            .get(self.pos)
            .ok_or_else(|| CodecError::Malformed("truncated packet".into()))?;
        self.pos += 1;
        Ok(b)
    }

    fn u16(&mut self) -> Result<u16> {
        let hi = self.u8()?;
        let lo = self.u8()?;
        Ok(u16::from_be_bytes([hi, lo]))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(CodecError::Malformed("truncated packet".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let len = self.u16()? as usize;
        self.take(len)
    }

    fn string(&mut self) -> Result<String> {
        let raw = self.bytes()?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| CodecError::Malformed("string is not valid UTF-8".into()))
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }
}

impl Codec {
    pub fn new(max_payload: usize) -> Self {
        Self { max_payload }
    }

    pub fn encode(&self, packet: &Packet) -> Result<Vec<u8>> {
        let mut body = Vec::new();
        let mut flags = 0u8;
        match packet {
            Packet::Connect(c) => {
                put_str(&mut body, &c.protocol_name)?;
                body.push(c.protocol_level);
                let mut cf = 0u8;
                if c.clean_session {
                    cf |= 0x02;
                }
                if let Some(w) = &c.will {
                    cf |= 0x04 | (w.qos.bits() << 3);
                    if w.retain {
                        cf |= 0x20;
                    }
                }
                if c.password.is_some() {
                    cf |= 0x40;
                }
                if c.username.is_some() {
                    cf |= 0x80;
                }
                body.push(cf);
                body.extend_from_slice(&c.keep_alive.to_be_bytes());
                put_str(&mut body, &c.client_id)?;
                if let Some(w) = &c.will {
                    put_str(&mut body, &w.topic)?;
                    put_bytes(&mut body, &w.payload)?;
                }
                if let Some(u) = &c.username {
                    put_str(&mut body, u)?;
                }
                if let Some(p) = &c.password {
                    put_bytes(&mut body, p)?;
                }
            }
            Packet::Connack(c) => {
                body.push(u8::from(c.session_present));
                body.push(c.code);
            }
            Packet::Publish(p) => {
                if has_wildcard(&p.topic) {
                    return Err(CodecError::ProtocolViolation(format!(
                        "wildcard in publish topic {:?}",
                        p.topic
                    )));
                }
                if p.payload.len() > self.max_payload {
                    return Err(CodecError::OversizePayload {
                        size: p.payload.len(),
                        max: self.max_payload,
                    });
                }
                flags = (u8::from(p.dup) << 3) | (p.qos.bits() << 1) | u8::from(p.retain);
                put_str(&mut body, &p.topic)?;
                match (p.qos, p.packet_id) {
                    (QoS::AtMostOnce, None) => {}
                    (QoS::AtMostOnce, Some(_)) => {
                        return Err(CodecError::ProtocolViolation(
                            "packet id on a qos 0 publish".into(),
                        ))
                    }
                    (_, Some(id)) => body.extend_from_slice(&id.to_be_bytes()),
                    (_, None) => {
                        return Err(CodecError::ProtocolViolation(
                            "qos > 0 publish without packet id".into(),
                        ))
                    }
                }
                body.extend_from_slice(&p.payload);
            }
            Packet::Puback(id) | Packet::Unsuback(id) => body.extend_from_slice(&id.to_be_bytes()),
            Packet::Subscribe(s) => {
                flags = 0x02;
                body.extend_from_slice(&s.packet_id.to_be_bytes());
                for (filter, qos) in &s.filters {
                    put_str(&mut body, filter)?;
                    body.push(qos.bits());
                }
            }
            Packet::Suback(s) => {
                body.extend_from_slice(&s.packet_id.to_be_bytes());
                body.extend_from_slice(&s.codes);
            }
            Packet::Unsubscribe(u) => {
                flags = 0x02;
                body.extend_from_slice(&u.packet_id.to_be_bytes());
                for filter in &u.filters {
                    put_str(&mut body, filter)?;
                }
            }
            Packet::Pingreq | Packet::Pingresp | Packet::Disconnect => {}
        }
        if body.len() > MAX_REMAINING_LENGTH {
            return Err(CodecError::OversizePayload {
                size: body.len(),
                max: MAX_REMAINING_LENGTH,
            });
        }
        let mut out = Vec::with_capacity(body.len() + 5);
        out.push((packet.type_code() << 4) | flags);
        write_remaining_length(&mut out, body.len());
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn decode(&self, buf: &[u8]) -> Result<Option<(Packet, usize)>> {
        let Some(&first) = buf.first() else {
            return Ok(None);
        };
        let kind = first >> 4;
        let flags = first & 0x0F;
        let Some((len, len_bytes)) = read_remaining_length(&buf[1..])? else {
            return Ok(None);
        };
        // Reject unknown kinds before waiting on a body that may never come.
        if !matches!(kind, 1..=4 | 8..=14) {
            return Err(CodecError::UnsupportedPacketType(kind));
        }
        if kind == 3 && len > self.max_payload.saturating_add(u16::MAX as usize + 4) {
            return Err(CodecError::OversizePayload {
                size: len,
                max: self.max_payload,
            });
        }
        let total = 1 + len_bytes + len;
        if buf.len() < total {
            return Ok(None);
        }
        let body = &buf[1 + len_bytes..total];
        let packet = self.decode_body(kind, flags, body)?;
        Ok(Some((packet, total)))
    }

    fn decode_body(&self, kind: u8, flags: u8, body: &[u8]) -> Result<Packet> {
        let expect_flags = |want: u8| -> Result<()> {
            if flags != want {
                Err(CodecError::Malformed(format!(
                    "invalid fixed header flags {flags:#06b} for packet type {kind}"
                )))
            } else {
                Ok(())
            }
        };
        let mut r = Reader::new(body);
        let packet = match kind {
            1 => {
                expect_flags(0)?;
                let protocol_name = r.string()?;
                let protocol_level = r.u8()?;
                let cf = r.u8()?;
                if cf & 0x01 != 0 {
                    return Err(CodecError::Malformed("reserved connect flag set".into()));
                }
                let keep_alive = r.u16()?;
                let client_id = r.string()?;
                let will = if cf & 0x04 != 0 {
                    let topic = r.string()?;
                    let payload = r.bytes()?.to_vec();
                    Some(Will {
                        topic,
                        payload,
                        qos: QoS::from_bits((cf >> 3) & 0x03)?,
                        retain: cf & 0x20 != 0,
                    })
                } else {
                    if cf & 0x38 != 0 {
                        return Err(CodecError::Malformed("will flags without will".into()));
                    }
                    None
                };
                let username = if cf & 0x80 != 0 { Some(r.string()?) } else { None };
                let password = if cf & 0x40 != 0 {
                    Some(r.bytes()?.to_vec())
                } else {
                    None
                };
                Packet::Connect(Connect {
                    protocol_name,
                    protocol_level,
                    clean_session: cf & 0x02 != 0,
                    keep_alive,
                    client_id,
                    will,
                    username,
                    password,
                })
            }
            2 => {
                expect_flags(0)?;
                let ack = r.u8()?;
                if ack & 0xFE != 0 {
                    return Err(CodecError::Malformed("reserved connack flags set".into()));
                }
                Packet::Connack(Connack {
                    session_present: ack & 0x01 != 0,
                    code: r.u8()?,
                })
            }
            3 => {
                let qos = QoS::from_bits((flags >> 1) & 0x03)?;
                let dup = flags & 0x08 != 0;
                if qos == QoS::AtMostOnce && dup {
                    return Err(CodecError::Malformed("dup flag on qos 0 publish".into()));
                }
                let topic = r.string()?;
                if has_wildcard(&topic) {
                    return Err(CodecError::ProtocolViolation(format!(
                        "wildcard in publish topic {topic:?}"
                    )));
                }
                let packet_id = if qos == QoS::AtMostOnce {
                    None
                } else {
                    Some(r.u16()?)
                };
                let payload = r.rest().to_vec();
                if payload.len() > self.max_payload {
                    return Err(CodecError::OversizePayload {
                        size: payload.len(),
                        max: self.max_payload,
                    });
                }
                Packet::Publish(Publish {
                    dup,
                    qos,
                    retain: flags & 0x01 != 0,
                    topic,
                    packet_id,
                    payload,
                })
            }
            4 => {
                expect_flags(0)?;
                Packet::Puback(r.u16()?)
            }
            8 => {
                expect_flags(0x02)?;
                let packet_id = r.u16()?;
                let mut filters = Vec::new();
                while r.remaining() > 0 {
                    let filter = r.string()?;
                    let q = r.u8()?;
                    if q & 0xFC != 0 {
                        return Err(CodecError::Malformed("reserved subscribe qos bits".into()));
                    }
                    filters.push((filter, QoS::from_bits(q)?));
                }
                if filters.is_empty() {
                    return Err(CodecError::ProtocolViolation("subscribe with no filters".into()));
                }
                Packet::Subscribe(Subscribe { packet_id, filters })
            }
            9 => {
                expect_flags(0)?;
                let packet_id = r.u16()?;
                Packet::Suback(Suback {
                    packet_id,
                    codes: r.rest().to_vec(),
                })
            }
            10 => {
                expect_flags(0x02)?;
                let packet_id = r.u16()?;
                let mut filters = Vec::new();
                while r.remaining() > 0 {
                    filters.push(r.string()?);
                }
                if filters.is_empty() {
                    return Err(CodecError::ProtocolViolation(
                        "unsubscribe with no filters".into(),
                    ));
                }
                Packet::Unsubscribe(Unsubscribe { packet_id, filters })
            }
            11 => {
                expect_flags(0)?;
                Packet::Unsuback(r.u16()?)
            }
            12 => {
                expect_flags(0)?;
                Packet::Pingreq
            }
            13 => {
                expect_flags(0)?;
                Packet::Pingresp
            }
            14 => {
                expect_flags(0)?;
                Packet::Disconnect
            }
            other => return Err(CodecError::UnsupportedPacketType(other)),
        };
        if r.remaining() != 0 {
            return Err(CodecError::Malformed(format!(
                "{} trailing bytes in packet type {kind}",
                r.remaining()
            )));
        }
        Ok(packet)
    }
}
