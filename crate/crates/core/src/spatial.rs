//! Aggregates across the current values of several topics.

use thiserror::Error;

use crate::clock::Timestamp;
use crate::grammar::{render_publication_topic, GrammarError, OperatorToken, SpatialMode, Stat, SubscriptionExpr};
use crate::rules::Rule;
use crate::store::{format_value, AggregationStore, TopicRecord};
use crate::topic::match_filter;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SpatialError {
    #[error("cannot fold an empty set of values")]
    EmptyInput,
    #[error(transparent)]
    Grammar(#[from] GrammarError),
}

/// Where a participant's value comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    /// Last numeric value published on the topic.
    LastValue,
    /// A window statistic of the topic.
    TemporalStat(u32, Stat),
    /// Last numeric result of a processing function on the topic.
    ProcessedValue(String),
    /// A window statistic of a processing function's results.
    ProcessedStat(String, u32, Stat),
}

impl Source {
    pub fn processing(&self) -> Option<&str> {
        match self {
            Source::ProcessedValue(k) | Source::ProcessedStat(k, _, _) => Some(k),
            _ => None,
        }
    }

    pub fn value(&self, record: &TopicRecord) -> Option<f64> {
        match self {
            Source::LastValue | Source::ProcessedValue(_) => record.numeric_value,
            Source::TemporalStat(w, s) | Source::ProcessedStat(_, w, s) => {
                let t = record.tuple(*w)?;
                if t.is_empty() {
                    None
                } else {
                    t.stat(*s)
                }
            }
        }
    }
}

/// Store records viewed through a processing keyword: with `Some(kw)` the
/// records keyed `kw/<topic>` yielded as `<topic>`, otherwise every record
/// outside the `$` namespace.
pub fn source_entries<'a>(
    store: &'a AggregationStore,
    processing: Option<&'a str>,
) -> impl Iterator<Item = (&'a str, &'a TopicRecord)> + 'a {
    store.records().filter_map(move |r| {
        let topic = match processing {
            Some(kw) => r.topic.strip_prefix(kw)?.strip_prefix('/')?,
            None => r.topic.as_str(),
        };
        (!topic.starts_with('$')).then_some((topic, r))
    })
}

/// Expand `room1/sens1;sens2/temp` into its concrete topics.
pub fn parse_explicit_participants(base_filter: &str) -> Result<Vec<String>, SpatialError> {
    let levels: Vec<&str> = base_filter.split('/').collect();
    let Some(idx) = levels.iter().position(|l| l.contains(';')) else {
        return Ok(vec![base_filter.to_string()]);
    };
    let items: Vec<&str> = levels[idx].split(';').collect();
    if items.iter().any(|i| i.is_empty()) {
        return Err(GrammarError::MalformedList(levels[idx].to_string()).into());
    }
    Ok(items
        .into_iter()
        .map(|item| {
            let mut l = levels.clone();
            l[idx] = item;
            l.join("/")
        })
        .collect())
}

pub fn stat_fold(stat: Stat, values: &[f64]) -> Result<f64, SpatialError> {
    if values.is_empty() {
        return Err(SpatialError::EmptyInput);
    }
    let it = values.iter().copied();
    Ok(match stat {
        Stat::Count => values.len() as f64,
        Stat::Sum => it.sum(),
        Stat::Avg => it.sum::<f64>() / values.len() as f64,
        Stat::Min => it.fold(f64::INFINITY, f64::min),
        Stat::Max => it.fold(f64::NEG_INFINITY, f64::max),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialOutput {
    pub topic: String,
    pub value: f64,
    pub participants: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialSubscription {
    pub expr: SubscriptionExpr,
    pub stat: Stat,
    pub mode: SpatialMode,
    pub source: Source,
    /// Rules written after the spatial token; they filter participants.
    pub pre_rules: Vec<Rule>,
    explicit: Option<Vec<String>>,
}

impl SpatialSubscription {
    /// Derive the source and participant rules from the chain. `None` when
    /// the chain has no spatial token.
    pub fn from_expr(expr: &SubscriptionExpr) -> Option<Self> {
        let pos = expr
            .chain
            .iter()
            .position(|t| matches!(t, OperatorToken::Spatial { .. }))?;
        let (stat, mode) = expr.spatial()?;
        let pre_rules = expr.chain[pos + 1..]
            .iter()
            .filter_map(|t| match t {
                OperatorToken::Rule(r) => Some(r.clone()),
                _ => None,
            })
            .collect();
        let source = match (expr.processing(), expr.temporal()) {
            (None, None) => Source::LastValue,
            (None, Some((w, s))) => Source::TemporalStat(w.minutes(), s),
            (Some(k), None) => Source::ProcessedValue(k.to_string()),
            (Some(k), Some((w, s))) => Source::ProcessedStat(k.to_string(), w.minutes(), s),
        };
        Some(Self {
            explicit: expr.explicit_topics(),
            expr: expr.clone(),
            stat,
            mode,
            source,
            pre_rules,
        })
    }

    /// Whether `topic` (a source topic, never `$`-prefixed) can participate.
    pub fn accepts_topic(&self, topic: &str) -> bool {
        if topic.starts_with('$') {
            return false;
        }
        match &self.explicit {
            Some(list) => list.iter().any(|t| t == topic),
            None => match_filter(&self.expr.base_filter, topic),
        }
    }

    /// `(topic, value)` of every participant, sorted by topic.
    pub fn participants(&self, store: &AggregationStore, now: Timestamp) -> Vec<(String, f64)> {
        source_entries(store, self.source.processing())
            .filter(|(topic, _)| self.accepts_topic(topic))
            .filter(|(_, r)| r.ttl_valid(now))
            .filter_map(|(topic, r)| Some((topic.to_string(), self.source.value(r)?)))
            .filter(|(_, v)| {
                let text = format_value(*v);
                self.pre_rules.iter().all(|rule| rule.forwards(text.as_bytes()))
            })
            .collect()
    }

    pub fn aggregate_now(&self, store: &AggregationStore, now: Timestamp) -> Option<SpatialOutput> {
        let parts = self.participants(store, now);
        let values: Vec<f64> = parts.iter().map(|(_, v)| *v).collect();
        let value = stat_fold(self.stat, &values).ok()?;
        let participants: Vec<String> = parts.into_iter().map(|(t, _)| t).collect();
        Some(SpatialOutput {
            topic: render_publication_topic(&self.expr, &participants),
            value,
            participants,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::parse_subscription;
    use chrono::{TimeDelta, TimeZone, Utc};
    use proptest::prelude::*;

    fn t0() -> Timestamp {
        Utc.with_ymd_and_hms(2018, 5, 24, 0, 0, 0).unwrap()
    }

    fn sub(filter: &str) -> SpatialSubscription {
        let expr = parse_subscription(filter, &["$CNTPPL"]).unwrap();
        SpatialSubscription::from_expr(&expr).unwrap()
    }

    fn ok_until() -> Timestamp {
        t0() + TimeDelta::hours(1)
    }

    #[test]
    fn two_point_average() {
        let mut s = AggregationStore::with_defaults(t0());
        s.record_publish("room1/sens1/temp", b"22.5", ok_until(), t0());
        s.record_publish("room1/sens2/temp", b"23.5", ok_until(), t0());
        let out = sub("$AVG/room1/+/temp").aggregate_now(&s, t0()).unwrap();
        assert_eq!(out.value, 23.0);
        assert_eq!(out.topic, "$AVG/room1/$AGGREGATE/temp");
        let out = sub("$AVG;RPT/room1/+/temp").aggregate_now(&s, t0()).unwrap();
        assert_eq!(out.topic, "$AVG/room1/sens1;sens2/temp");
    }

    #[test]
    fn expired_participant_is_skipped() {
        let mut s = AggregationStore::with_defaults(t0());
        s.record_publish("room1/sens1/temp", b"22.5", ok_until(), t0());
        s.record_publish("room1/sens2/temp", b"23.5", t0() - TimeDelta::seconds(1), t0());
        let out = sub("$AVG;RPT/room1/+/temp").aggregate_now(&s, t0()).unwrap();
        assert_eq!(out.value, 22.5);
        assert_eq!(out.topic, "$AVG/room1/sens1/temp");
    }

    #[test]
    fn multi_level_wildcard_mixes_quantities() {
        let mut s = AggregationStore::with_defaults(t0());
        s.record_publish("room1/temp", b"20", ok_until(), t0());
        s.record_publish("room1/hum", b"60", ok_until(), t0());
        let out = sub("$AVG/room1/#").aggregate_now(&s, t0()).unwrap();
        assert_eq!(out.value, 40.0);
        assert_eq!(out.topic, "$AVG/room1/$AGGREGATE");
    }

    #[test]
    fn explicit_list() {
        assert_eq!(
            parse_explicit_participants("room1/sens1;sens2/temp").unwrap(),
            vec!["room1/sens1/temp", "room1/sens2/temp"]
        );
        assert_eq!(parse_explicit_participants("room1/sensA/temp").unwrap(), vec!["room1/sensA/temp"]);
        assert!(matches!(
            parse_explicit_participants("a;;b"),
            Err(SpatialError::Grammar(GrammarError::MalformedList(_)))
        ));
        let mut s = AggregationStore::with_defaults(t0());
        for (t, v) in [("room1/sens1/temp", "20"), ("room1/sens2/temp", "22"), ("room1/sens3/temp", "90")] {
            s.record_publish(t, v.as_bytes(), ok_until(), t0());
        }
        let out = sub("$AVG/room1/sens2;sens1/temp").aggregate_now(&s, t0()).unwrap();
        assert_eq!(out.value, 21.0);
        assert_eq!(out.topic, "$AVG/room1/sens1;sens2/temp");
    }

    #[test]
    fn folds() {
        assert_eq!(stat_fold(Stat::Sum, &[1063.0, 386.0]).unwrap(), 1449.0);
        assert_eq!(stat_fold(Stat::Min, &[12.3, 6.2]).unwrap(), 6.2);
        assert_eq!(stat_fold(Stat::Avg, &[7.5]).unwrap(), 7.5);
        assert_eq!(stat_fold(Stat::Count, &[1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(stat_fold(Stat::Max, &[]), Err(SpatialError::EmptyInput));
    }

    #[test]
    fn dollar_topics_never_participate() {
        let mut s = AggregationStore::with_defaults(t0());
        s.record_publish("$AVG/x", b"1000", ok_until(), t0());
        s.record_publish("x", b"1", ok_until(), t0());
        let out = sub("$SUM/#").aggregate_now(&s, t0()).unwrap();
        assert_eq!(out.value, 1.0);
    }

    #[test]
    fn processed_sources_read_prefixed_records() {
        let mut s = AggregationStore::with_defaults(t0());
        s.record_publish("$CNTPPL/room1/image", b"3", ok_until(), t0());
        s.record_publish("$CNTPPL/room2/image", b"4", ok_until(), t0());
        s.record_publish("room1/image", b"not a number", ok_until(), t0());
        let sp = sub("$SUM$CNTPPL/+/image");
        assert_eq!(sp.source, Source::ProcessedValue("$CNTPPL".into()));
        let out = sp.aggregate_now(&s, t0()).unwrap();
        assert_eq!(out.value, 7.0);
        assert_eq!(out.topic, "$SUM$CNTPPL/$AGGREGATE/image");
        let sp = sub("$SUM$DAILYAVG$CNTPPL/+/image");
        assert_eq!(sp.source, Source::ProcessedStat("$CNTPPL".into(), 1440, Stat::Avg));
        assert_eq!(sp.aggregate_now(&s, t0()).unwrap().value, 7.0);
    }

    #[test]
    fn participant_rules() {
        let mut s = AggregationStore::with_defaults(t0());
        for (t, v) in [("a/t", "4"), ("b/t", "6"), ("c/t", "7")] {
            s.record_publish(t, v.as_bytes(), ok_until(), t0());
        }
        let sp = sub("$SUM$GT;5$DAILYAVG/+/t");
        assert_eq!(sp.aggregate_now(&s, t0()).unwrap().value, 13.0);
        let sp = sub("$SUM$GT;50$DAILYAVG/+/t");
        assert_eq!(sp.aggregate_now(&s, t0()), None);
    }

    #[test]
    fn rpt_topic_grows_by_level_length() {
        let mut s = AggregationStore::with_defaults(t0());
        let sp = sub("$AVG;RPT/r/+/t");
        let mut prev = None;
        for i in 0..6 {
            s.record_publish(&format!("r/id{i:04}/t"), b"1", ok_until(), t0());
            let len = sp.aggregate_now(&s, t0()).unwrap().topic.len();
            if let Some(p) = prev {
                // six-byte id plus one delimiter
                assert_eq!(len - p, 7);
            }
            prev = Some(len);
        }
        let skr = sub("$AVG/r/+/t").aggregate_now(&s, t0()).unwrap();
        assert_eq!(skr.topic, "$AVG/r/$AGGREGATE/t");
    }

    #[derive(Debug, Clone)]
    struct Entry {
        topic: String,
        payload: String,
        ttl_offset: i64,
    }

    fn entry() -> impl Strategy<Value = Entry> {
        (
            prop::sample::select(vec!["r1", "r2", "$x"]),
            prop::sample::select(vec!["s1", "s2", "s3"]),
            prop::sample::select(vec!["temp", "hum"]),
            prop_oneof![(-50i32..50).prop_map(|v| v.to_string()), Just("n/a".to_string())],
            -5i64..5,
        )
            .prop_map(|(a, b, c, payload, ttl_offset)| Entry {
                topic: format!("{a}/{b}/{c}"),
                payload,
                ttl_offset,
            })
    }

    proptest! {
        /// Participant set equals a scan of every record in the store.
        #[test]
        fn participants_match_full_scan(entries in proptest::collection::vec(entry(), 0..20),
                                        filter in prop::sample::select(vec!["r1/+/temp", "+/s1/#", "#", "r2/s2/hum", "+/+/+"])) {
            let mut s = AggregationStore::with_defaults(t0());
            for e in &entries {
                s.record_publish(&e.topic, e.payload.as_bytes(), t0() + TimeDelta::seconds(e.ttl_offset), t0());
            }
            let sp = sub(&format!("$MAX/{filter}"));
            let got: Vec<String> = sp.participants(&s, t0()).into_iter().map(|(t, _)| t).collect();
            let mut want: Vec<String> = s.records()
                .filter(|r| !r.topic.starts_with('$'))
                .filter(|r| match_filter(filter, &r.topic))
                .filter(|r| t0() <= r.ttl_deadline)
                .filter(|r| r.numeric_value.is_some())
                .map(|r| r.topic.clone())
                .collect();
            want.sort();
            prop_assert_eq!(&got, &want);
            // Pure: same snapshot, same answer.
            prop_assert_eq!(sp.aggregate_now(&s, t0()), sp.aggregate_now(&s, t0()));
        }
    }
}
