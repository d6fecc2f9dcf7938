//! Per-message validity deadlines carried as a payload prefix.
//!
//! A publisher marks a payload with `$TTL;<ISO 8601 UTC>|<payload>`. The
//! broker strips the envelope before storing or forwarding, so subscribers
//! never see it. Payloads without an envelope get `now + default_ttl`.

use chrono::{DateTime, NaiveDateTime, SecondsFormat, TimeDelta, Utc};
use thiserror::Error;

use crate::clock::Timestamp;

pub const TTL_MARKER: &[u8] = b"$TTL;";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TtlError {
    #[error("malformed TTL envelope: {0}")]
    MalformedTtl(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TtlEnvelope {
    pub deadline: Timestamp,
    pub inner_payload: Vec<u8>,
}

impl TtlEnvelope {
    pub fn new(deadline: Timestamp, inner_payload: impl Into<Vec<u8>>) -> Self {
        Self {
            deadline,
            inner_payload: inner_payload.into(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = TTL_MARKER.to_vec();
        out.extend_from_slice(format_deadline(self.deadline).as_bytes());
        out.push(b'|');
        out.extend_from_slice(&self.inner_payload);
        out
    }

    /// `Ok(None)` when the payload carries no marker at all.
    pub fn parse(payload: &[u8]) -> Result<Option<Self>, TtlError> {
        let Some(rest) = payload.strip_prefix(TTL_MARKER) else {
            return Ok(None);
        };
        let bar = rest
            .iter()
            .position(|&b| b == b'|')
            .ok_or_else(|| TtlError::MalformedTtl("missing '|' separator".into()))?;
        let stamp = std::str::from_utf8(&rest[..bar])
            .map_err(|_| TtlError::MalformedTtl("timestamp is not UTF-8".into()))?;
        let deadline = parse_deadline(stamp)?;
        Ok(Some(Self {
            deadline,
            inner_payload: rest[bar + 1..].to_vec(),
        }))
    }
}

/// Formats as `2018-05-24T15:36:25`.
pub fn format_deadline(ts: Timestamp) -> String {
    ts.naive_utc().format("%Y-%m-%dT%H:%M:%S").to_string()
}

/// Accepts `YYYY-MM-DDTHH:MM:SS`, optionally followed by `Z` or an offset.
pub fn parse_deadline(s: &str) -> Result<Timestamp, TtlError> {
    let s = s.trim();
    if let Ok(naive) = NaiveDateTime::parse_from_str(s.trim_end_matches('Z'), "%Y-%m-%dT%H:%M:%S")
    {
        return Ok(naive.and_utc());
    }
    DateTime::parse_from_rfc3339(s)
        .map(|dt| dt.with_timezone(&Utc))
        .map_err(|_| TtlError::MalformedTtl(format!("unparseable timestamp {s:?}")))
}

/// Split a payload into `(inner_payload, deadline)`.
///
/// Nested envelopes are all removed; the outermost deadline wins. A marker
/// with an unparseable timestamp is kept as ordinary payload data and gets
/// the default deadline.
pub fn strip_ttl(payload: &[u8], now: Timestamp, default_ttl: TimeDelta) -> (Vec<u8>, Timestamp) {
    let mut deadline = None;
    let mut inner = payload;
    loop {
        match TtlEnvelope::parse(inner) {
            Ok(Some(env)) => {
                deadline.get_or_insert(env.deadline);
                let offset = inner.len() - env.inner_payload.len();
                inner = &inner[offset..];
            }
            Ok(None) => break,
            Err(e) => {
                log::warn!(target: "ttl", "{e}; treating payload as envelope-free");
                break;
            }
        }
    }
    (inner.to_vec(), deadline.unwrap_or(now + default_ttl))
}

/// Wall-clock rendering used in log lines.
pub fn rfc3339(ts: Timestamp) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Secs, true)
}
