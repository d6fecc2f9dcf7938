//! Per-topic buffer: last value, validity deadline and tumbling window
//! statistics, reset by a single periodic timer.
//!
//! Every configured window `T_k` keeps a tuple `(N, S, A, L, U)`. The timer
//! period `D` is the greatest common divisor of the windows; window `T_k`
//! closes on every `T_k / D`-th fire, counted from the store origin.

use std::collections::BTreeMap;

use chrono::TimeDelta;
use thiserror::Error;

use crate::clock::Timestamp;
use crate::grammar::{Stat, TimeWindow};
use crate::rules::parse_decimal_bytes;
use crate::topic::match_filter;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("window of {0} units is not configured")]
    UnknownWindow(u32),
    #[error("invalid window configuration: {0}")]
    InvalidWindows(String),
}

/// Render a numeric value with at most six fractional digits, trailing
/// zeros trimmed.
pub fn format_value(v: f64) -> String {
    let s = format!("{v:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateTuple {
    pub window: u32,
    pub count: u64,
    pub sum: f64,
    min: Option<f64>,
    max: Option<f64>,
}

impl AggregateTuple {
    pub fn new(window: u32) -> Self {
        Self {
            window,
            count: 0,
            sum: 0.0,
            min: None,
            max: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn record(&mut self, v: f64) {
        self.count += 1;
        self.sum += v;
        self.min = Some(self.min.map_or(v, |m| m.min(v)));
        self.max = Some(self.max.map_or(v, |m| m.max(v)));
    }

    pub fn reset(&mut self) {
        *self = Self::new(self.window);
    }

    pub fn avg(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }

    pub fn min(&self) -> Option<f64> {
        self.min
    }

    pub fn max(&self) -> Option<f64> {
        self.max
    }

    /// `Count` is always defined; the others only when the window is non-empty.
    pub fn stat(&self, stat: Stat) -> Option<f64> {
        match stat {
            Stat::Count => Some(self.count as f64),
            Stat::Sum => (self.count > 0).then_some(self.sum),
            Stat::Avg => self.avg(),
            Stat::Min => self.min,
            Stat::Max => self.max,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopicRecord {
    pub topic: String,
    pub last_value: Vec<u8>,
    pub numeric_value: Option<f64>,
    pub ttl_deadline: Timestamp,
    pub tuples: Vec<AggregateTuple>,
}

impl TopicRecord {
    pub fn tuple(&self, window: u32) -> Option<&AggregateTuple> {
        self.tuples.iter().find(|t| t.window == window)
    }

    pub fn ttl_valid(&self, now: Timestamp) -> bool {
        now <= self.ttl_deadline
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// One timer expiry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fire {
    /// 1-based fire counter.
    pub index: u64,
    pub at: Timestamp,
    /// Windows that close on this fire, longest first.
    pub due: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct WindowClock {
    windows: Vec<u32>,
    period: u32,
    unit: TimeDelta,
    origin: Timestamp,
    fire_count: u64,
}

impl WindowClock {
    pub fn new(windows: &[u32], unit: TimeDelta, origin: Timestamp) -> Result<Self, StoreError> {
        validate_windows(windows)?;
        if unit <= TimeDelta::zero() {
            return Err(StoreError::InvalidWindows("window unit must be positive".into()));
        }
        let mut windows = windows.to_vec();
        windows.sort_unstable_by(|a, b| b.cmp(a));
        let period = windows.iter().copied().fold(0, gcd);
        Ok(Self {
            windows,
            period,
            unit,
            origin,
            fire_count: 0,
        })
    }

    /// Timer period `D` in window units.
    pub fn period(&self) -> u32 {
        self.period
    }

    pub fn fire_count(&self) -> u64 {
        self.fire_count
    }

    pub fn windows(&self) -> &[u32] {
        &self.windows
    }

    pub fn due_windows(&self, fire_index: u64) -> Vec<u32> {
        self.windows
            .iter()
            .copied()
            .filter(|w| fire_index.is_multiple_of(u64::from(w / self.period)))
            .collect()
    }

    pub fn next_fire_at(&self) -> Timestamp {
        self.origin + self.unit * self.period as i32 * (self.fire_count + 1) as i32
    }

    /// Consume every fire scheduled at or before `now`.
    pub fn poll(&mut self, now: Timestamp) -> Vec<Fire> {
        let mut fires = Vec::new();
        while self.next_fire_at() <= now {
            let at = self.next_fire_at();
            self.fire_count += 1;
            fires.push(Fire {
                index: self.fire_count,
                at,
                due: self.due_windows(self.fire_count),
            });
        }
        fires
    }
}

pub fn validate_windows(windows: &[u32]) -> Result<(), StoreError> {
    if windows.is_empty() {
        return Err(StoreError::InvalidWindows("no windows configured".into()));
    }
    if windows.contains(&0) {
        return Err(StoreError::InvalidWindows("window lengths must be positive".into()));
    }
    let mut sorted = windows.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != windows.len() {
        return Err(StoreError::InvalidWindows("window lengths must be distinct".into()));
    }
    Ok(())
}

/// A bare `$<TIME><OP>/filter` registration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemporalSubscription {
    pub filter: String,
    pub window: TimeWindow,
    pub stat: Stat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalPublication {
    /// `$<TIME><OP>/<source_topic>`.
    pub topic: String,
    pub source_topic: String,
    pub window: u32,
    pub stat: Stat,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct AggregationStore {
    records: BTreeMap<String, TopicRecord>,
    clock: WindowClock,
}

impl AggregationStore {
    pub fn new(windows: &[u32], unit: TimeDelta, origin: Timestamp) -> Result<Self, StoreError> {
        Ok(Self {
            records: BTreeMap::new(),
            clock: WindowClock::new(windows, unit, origin)?,
        })
    }

    /// Default windows {1440, 60, 15} minutes.
    pub fn with_defaults(origin: Timestamp) -> Self {
        Self::new(&[1440, 60, 15], TimeDelta::minutes(1), origin).expect("default windows are valid")
    }

    pub fn clock(&self) -> &WindowClock {
        &self.clock
    }

    pub fn windows(&self) -> &[u32] {
        self.clock.windows()
    }

    pub fn has_window(&self, window: u32) -> bool {
        self.clock.windows().contains(&window)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, topic: &str) -> Option<&TopicRecord> {
        self.records.get(topic)
    }

    pub fn records(&self) -> impl Iterator<Item = &TopicRecord> {
        self.records.values()
    }

    /// Store a TTL-stripped publish. Only numeric payloads touch the tuples.
    pub fn record_publish(
        &mut self,
        topic: &str,
        payload: &[u8],
        ttl_deadline: Timestamp,
        _now: Timestamp,
    ) -> &TopicRecord {
        let windows = self.clock.windows();
        let record = self
            .records
            .entry(topic.to_string())
            .or_insert_with(|| TopicRecord {
                topic: topic.to_string(),
                last_value: Vec::new(),
                numeric_value: None,
                ttl_deadline,
                tuples: windows.iter().map(|&w| AggregateTuple::new(w)).collect(),
            });
        record.last_value = payload.to_vec();
        record.ttl_deadline = ttl_deadline;
        record.numeric_value = parse_decimal_bytes(payload);
        if let Some(v) = record.numeric_value {
            for t in &mut record.tuples {
                t.record(v);
            }
        }
        record
    }

    pub fn query(&self, topic: &str, window: u32, stat: Stat) -> Result<Option<f64>, StoreError> {
        if !self.has_window(window) {
            return Err(StoreError::UnknownWindow(window));
        }
        Ok(self
            .records
            .get(topic)
            .and_then(|r| r.tuple(window))
            .and_then(|t| t.stat(stat)))
    }

    /// True iff the record exists and `now` has not passed its deadline.
    pub fn ttl_valid(&self, topic: &str, now: Timestamp) -> bool {
        self.records.get(topic).is_some_and(|r| r.ttl_valid(now))
    }

    /// Run every timer fire due by `now`. `before_reset` sees the store
    /// with the closing windows still populated.
    pub fn advance_with(&mut self, now: Timestamp, mut before_reset: impl FnMut(&Fire, &Self)) -> Vec<Fire> {
        let fires = self.clock.poll(now);
        for fire in &fires {
            before_reset(fire, self);
            self.reset_windows(&fire.due);
            self.collect_garbage(fire.at);
        }
        fires
    }

    /// Emit the statistic of every non-empty closing window for each
    /// matching subscription, then reset those windows.
    pub fn on_timer_fire(&mut self, now: Timestamp, subs: &[TemporalSubscription]) -> Vec<TemporalPublication> {
        let mut out = Vec::new();
        self.advance_with(now, |fire, store| {
            for sub in subs {
                let window = sub.window.minutes();
                if !fire.due.contains(&window) {
                    continue;
                }
                out.extend(store.temporal_values(&sub.filter, window, sub.stat).into_iter().map(
                    |(source_topic, value)| TemporalPublication {
                        topic: format!("${}{}/{}", sub.window.keyword(), sub.stat.keyword(), source_topic),
                        source_topic,
                        window,
                        stat: sub.stat,
                        value,
                    },
                ));
            }
        });
        out
    }

    /// `(topic, statistic)` for every record matching `filter` whose window
    /// is non-empty.
    pub fn temporal_values(&self, filter: &str, window: u32, stat: Stat) -> Vec<(String, f64)> {
        self.records
            .values()
            .filter(|r| match_filter(filter, &r.topic))
            .filter_map(|r| {
                let t = r.tuple(window)?;
                if t.is_empty() {
                    return None;
                }
                Some((r.topic.clone(), t.stat(stat)?))
            })
            .collect()
    }

    pub fn reset_windows(&mut self, windows: &[u32]) {
        for r in self.records.values_mut() {
            for t in r.tuples.iter_mut().filter(|t| windows.contains(&t.window)) {
                t.reset();
            }
        }
    }

    /// Drop records that are both expired and empty in every window.
    pub fn collect_garbage(&mut self, now: Timestamp) {
        self.records
            .retain(|_, r| r.ttl_valid(now) || r.tuples.iter().any(|t| !t.is_empty()));
    }
}
