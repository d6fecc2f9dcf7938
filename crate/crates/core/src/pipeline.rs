//! Turns a validated operator chain into the stages that run for it.
//!
//! Stages execute innermost first (right to left in the written chain):
//! processing, then the temporal window, then participant rules, the
//! spatial fold and finally the output rules.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::clock::Timestamp;
use crate::grammar::{validate_chain, InvalidReason, OperatorToken, SpatialMode, Stat, SubscriptionExpr, Validity};
use crate::processing::ProcessingResult;
use crate::rules::Rule;
use crate::spatial::{source_entries, SpatialSubscription};
use crate::store::{format_value, AggregationStore, Fire};
use crate::topic::{has_wildcard, match_filter};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CompileError {
    #[error("invalid operator chain: {0}")]
    Invalid(InvalidReason),
    #[error("window of {0} units is not configured")]
    UnknownWindow(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stage {
    Process(String),
    Temporal { window: u32, stat: Stat },
    ParticipantRules(Vec<Rule>),
    Spatial { stat: Stat, mode: SpatialMode },
    OutputRules(Vec<Rule>),
}

/// What makes a subscription produce output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trigger {
    /// Every matching publish.
    Publish,
    /// Every result of the named processing function.
    Processed(String),
    /// Every close of the window (in window units).
    Fire(u32),
}

/// A publication produced for one subscriber.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Output {
    pub topic: String,
    pub payload: Vec<u8>,
}

/// Drop the spatial token when it folds a single concrete topic over a
/// window statistic; the fold of one value is that value. `COUNT` is kept,
/// as counting one participant is not the participant's statistic.
pub fn equivalence_collapse(expr: &SubscriptionExpr) -> SubscriptionExpr {
    let single = !has_wildcard(&expr.base_filter) && expr.explicit_lists.is_empty();
    let collapsible = matches!(expr.spatial(), Some((stat, _)) if stat != Stat::Count);
    if !(single && collapsible && expr.temporal().is_some()) {
        return expr.clone();
    }
    SubscriptionExpr {
        chain: expr
            .chain
            .iter()
            .filter(|t| !matches!(t, OperatorToken::Spatial { .. }))
            .cloned()
            .collect(),
        ..expr.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledSubscription {
    /// The chain as written; reply topics are rendered from it.
    pub expr: SubscriptionExpr,
    pub stages: Vec<Stage>,
    pub trigger: Trigger,
    pub spatial: Option<SpatialSubscription>,
    pub output_rules: Vec<Rule>,
    pub collapsed: bool,
}

pub fn compile(expr: &SubscriptionExpr, windows: &[u32]) -> Result<CompiledSubscription, CompileError> {
    if let Validity::Invalid(reason) = validate_chain(expr) {
        return Err(CompileError::Invalid(reason));
    }
    if let Some((w, _)) = expr.temporal() {
        if !windows.contains(&w.minutes()) {
            return Err(CompileError::UnknownWindow(w.minutes()));
        }
    }
    let effective = equivalence_collapse(expr);
    let collapsed = effective != *expr;

    let mut stages = Vec::new();
    let mut pending: Vec<Rule> = Vec::new();
    let mut output_rules = Vec::new();
    for token in effective.chain.iter().rev() {
        if let OperatorToken::Rule(r) = token {
            pending.push(r.clone());
            continue;
        }
        if !pending.is_empty() {
            stages.push(Stage::ParticipantRules(std::mem::take(&mut pending)));
        }
        stages.push(match token {
            OperatorToken::Processing(k) => Stage::Process(k.clone()),
            OperatorToken::Temporal { window, stat } => Stage::Temporal {
                window: window.minutes(),
                stat: *stat,
            },
            OperatorToken::Spatial { stat, mode } => Stage::Spatial {
                stat: *stat,
                mode: *mode,
            },
            OperatorToken::Rule(_) => unreachable!(),
        });
    }
    if !pending.is_empty() {
        pending.reverse();
        output_rules = pending.clone();
        stages.push(Stage::OutputRules(pending));
    }
    let trigger = match (effective.temporal(), effective.processing()) {
        (Some((w, _)), _) => Trigger::Fire(w.minutes()),
        (None, Some(k)) => Trigger::Processed(k.to_string()),
        (None, None) => Trigger::Publish,
    };
    Ok(CompiledSubscription {
        spatial: SpatialSubscription::from_expr(&effective),
        expr: expr.clone(),
        stages,
        trigger,
        output_rules,
        collapsed,
    })
}

impl CompiledSubscription {
    pub fn processing(&self) -> Option<&str> {
        self.expr.processing()
    }

    /// Whether a publish (or processing result) on `topic` feeds this
    /// subscription.
    pub fn accepts_topic(&self, topic: &str) -> bool {
        match &self.spatial {
            Some(s) => s.accepts_topic(topic),
            None => match_filter(&self.expr.base_filter, topic),
        }
    }

    /// Apply the output rules and build the publication.
    pub fn deliver(&self, topic: String, payload: Vec<u8>) -> Option<Output> {
        self.output_rules
            .iter()
            .all(|r| r.forwards(&payload))
            .then_some(Output { topic, payload })
    }

    fn deliver_value(&self, topic: String, value: f64) -> Option<Output> {
        self.deliver(topic, format_value(value).into_bytes())
    }

    fn spatial_output(&self, spatial: &SpatialSubscription, store: &AggregationStore, now: Timestamp) -> Option<Output> {
        let out = spatial.aggregate_now(store, now)?;
        self.deliver_value(out.topic, out.value)
    }

    /// Reaction to a TTL-stripped publish already recorded in `store`.
    pub fn on_publish(&self, topic: &str, payload: &[u8], store: &AggregationStore, now: Timestamp) -> Option<Output> {
        if self.trigger != Trigger::Publish || !self.accepts_topic(topic) {
            return None;
        }
        match &self.spatial {
            Some(s) => self.spatial_output(s, store, now),
            None => self.deliver(self.expr.reply_topic_for(topic), payload.to_vec()),
        }
    }

    /// Reaction to a processing result for `topic`, already recorded in
    /// `store` when numeric.
    pub fn on_processed(
        &self,
        keyword: &str,
        topic: &str,
        result: &ProcessingResult,
        store: &AggregationStore,
        now: Timestamp,
    ) -> Option<Output> {
        if self.trigger != Trigger::Processed(keyword.to_string()) || !self.accepts_topic(topic) {
            return None;
        }
        match &self.spatial {
            Some(s) => {
                result.numeric()?;
                self.spatial_output(s, store, now)
            }
            None => self.deliver(self.expr.reply_topic_for(topic), result.to_payload()),
        }
    }

    /// Reaction to a timer fire, with the closing windows still populated.
    pub fn on_fire(&self, fire: &Fire, store: &AggregationStore) -> Vec<Output> {
        let Trigger::Fire(window) = self.trigger else {
            return Vec::new();
        };
        if !fire.due.contains(&window) {
            return Vec::new();
        }
        if let Some(s) = &self.spatial {
            return self.spatial_output(s, store, fire.at).into_iter().collect();
        }
        let Some((_, stat)) = self.expr.temporal() else {
            return Vec::new();
        };
        source_entries(store, self.processing())
            .filter(|(topic, _)| self.accepts_topic(topic))
            .filter_map(|(topic, r)| {
                let t = r.tuple(window)?;
                if t.is_empty() {
                    return None;
                }
                self.deliver_value(self.expr.reply_topic_for(topic), t.stat(stat)?)
            })
            .collect()
    }
}

/// Key of a registered subscription: (client id, filter as written).
pub type SubscriptionKey = (String, String);

/// All compiled subscriptions of the broker.
#[derive(Debug, Default)]
pub struct Pipeline {
    subs: BTreeMap<SubscriptionKey, CompiledSubscription>,
}

impl Pipeline {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.subs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subs.is_empty()
    }

    pub fn insert(&mut self, client: &str, filter: &str, sub: CompiledSubscription) {
        self.subs.insert((client.to_string(), filter.to_string()), sub);
    }

    pub fn remove(&mut self, client: &str, filter: &str) -> Option<CompiledSubscription> {
        self.subs.remove(&(client.to_string(), filter.to_string()))
    }

    pub fn remove_client(&mut self, client: &str) {
        self.subs.retain(|(c, _), _| c != client);
    }

    pub fn get(&self, client: &str, filter: &str) -> Option<&CompiledSubscription> {
        self.subs.get(&(client.to_string(), filter.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SubscriptionKey, &CompiledSubscription)> {
        self.subs.iter()
    }

    /// Processing keywords some subscription wants run on `topic`; each
    /// appears once however many subscribers share it.
    pub fn processing_for(&self, topic: &str) -> Vec<String> {
        self.subs
            .values()
            .filter_map(|s| Some((s.processing()?, s)))
            .filter(|(_, s)| s.accepts_topic(topic))
            .map(|(k, _)| k.to_string())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn on_publish(&self, topic: &str, payload: &[u8], store: &AggregationStore, now: Timestamp) -> Vec<(String, Output)> {
        self.subs
            .iter()
            .filter_map(|((c, _), s)| Some((c.clone(), s.on_publish(topic, payload, store, now)?)))
            .collect()
    }

    pub fn on_processed(
        &self,
        keyword: &str,
        topic: &str,
        result: &ProcessingResult,
        store: &AggregationStore,
        now: Timestamp,
    ) -> Vec<(String, Output)> {
        self.subs
            .iter()
            .filter_map(|((c, _), s)| Some((c.clone(), s.on_processed(keyword, topic, result, store, now)?)))
            .collect()
    }

    pub fn on_fire(&self, fire: &Fire, store: &AggregationStore) -> Vec<(String, Output)> {
        self.subs
            .iter()
            .flat_map(|((c, _), s)| s.on_fire(fire, store).into_iter().map(move |o| (c.clone(), o)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::parse_subscription;
    use crate::rules::RuleOp;
    use chrono::{TimeDelta, TimeZone, Utc};
    use proptest::prelude::*;

    const WINDOWS: [u32; 3] = [1440, 60, 15];

    fn t0() -> Timestamp {
        Utc.with_ymd_and_hms(2018, 5, 24, 0, 0, 0).unwrap()
    }

    fn far() -> Timestamp {
        t0() + TimeDelta::days(365)
    }

    fn compiled(filter: &str) -> CompiledSubscription {
        compile(&parse_subscription(filter, &["$CNTPPL"]).unwrap(), &WINDOWS).unwrap()
    }

    fn fire_day(store: &mut AggregationStore, subs: &[&CompiledSubscription]) -> Vec<Output> {
        let mut out = Vec::new();
        store.advance_with(t0() + TimeDelta::days(1), |fire, st| {
            for s in subs {
                out.extend(s.on_fire(fire, st));
            }
        });
        out
    }

    #[test]
    fn stages_run_right_to_left() {
        let c = compiled("$GT;10$SUM$GT;5$DAILYAVG$CNTPPL/+/image");
        assert_eq!(
            c.stages,
            vec![
                Stage::Process("$CNTPPL".into()),
                Stage::Temporal { window: 1440, stat: Stat::Avg },
                Stage::ParticipantRules(vec![Rule::new(RuleOp::Gt, "5")]),
                Stage::Spatial { stat: Stat::Sum, mode: SpatialMode::Skr },
                Stage::OutputRules(vec![Rule::new(RuleOp::Gt, "10")]),
            ]
        );
        assert_eq!(c.trigger, Trigger::Fire(1440));
        assert_eq!(compiled("$CNTPPL/room1/image").trigger, Trigger::Processed("$CNTPPL".into()));
        assert_eq!(compiled("$GT;1/a").trigger, Trigger::Publish);
    }

    #[test]
    fn invalid_and_unconfigured() {
        let e = parse_subscription("$DAILYAVG$SUM/+/temp", &["$CNTPPL"]).unwrap();
        assert_eq!(compile(&e, &WINDOWS), Err(CompileError::Invalid(InvalidReason::TemporalBeforeSpatial)));
        let e = parse_subscription("$DAILYAVG/x", &["$CNTPPL"]).unwrap();
        assert_eq!(compile(&e, &[60, 15]), Err(CompileError::UnknownWindow(1440)));
    }

    #[test]
    fn spatio_temporal_sum_of_daily_averages() {
        let mut st = AggregationStore::with_defaults(t0());
        for (t, vs) in [("a/temp", [10.0, 20.0]), ("b/temp", [1.0, 3.0])] {
            for v in vs {
                st.record_publish(t, v.to_string().as_bytes(), far(), t0());
            }
        }
        let c = compiled("$SUM$DAILYAVG/+/temp");
        let out = fire_day(&mut st, &[&c]);
        assert_eq!(
            out,
            vec![Output {
                topic: "$SUM$DAILYAVG/$AGGREGATE/temp".into(),
                payload: b"17".to_vec()
            }]
        );
    }

    #[test]
    fn filter_then_sum() {
        let mut st = AggregationStore::with_defaults(t0());
        for (t, v) in [("a/temp", "4"), ("b/temp", "6"), ("c/temp", "7")] {
            st.record_publish(t, v.as_bytes(), far(), t0());
        }
        let pre = compiled("$SUM$GT;5$DAILYAVG/+/temp");
        let hi = compiled("$GT;10$SUM$GT;5$DAILYAVG/+/temp");
        let lo = compiled("$GT;20$SUM$GT;5$DAILYAVG/+/temp");
        let out = fire_day(&mut st, &[&pre, &hi, &lo]);
        let values: Vec<&[u8]> = out.iter().map(|o| o.payload.as_slice()).collect();
        assert_eq!(values, [b"13", b"13"]);
    }

    #[test]
    fn pre_and_post_rules_differ() {
        let mut st = AggregationStore::with_defaults(t0());
        st.record_publish("a/temp", b"4", far(), t0());
        st.record_publish("b/temp", b"6", far(), t0());
        let filter_then_sum = compiled("$SUM$GT;5$DAILYAVG/+/temp");
        let sum_then_filter = compiled("$GT;5$SUM$DAILYAVG/+/temp");
        let a = fire_day(&mut st.clone(), &[&filter_then_sum]);
        let b = fire_day(&mut st, &[&sum_then_filter]);
        assert_eq!(a[0].payload, b"6");
        assert_eq!(b[0].payload, b"10");
    }

    #[test]
    fn deliver_applies_output_rules() {
        let c = compiled("$GT;10$SUM/+/t");
        assert!(c.deliver("x".into(), b"13".to_vec()).is_some());
        let c = compiled("$GT;20$SUM/+/t");
        assert!(c.deliver("x".into(), b"13".to_vec()).is_none());
        let c = compiled("$SUM/+/t");
        assert_eq!(c.deliver("x".into(), b"13".to_vec()).unwrap().payload, b"13");
    }

    #[test]
    fn rule_subscription_forwards_payload() {
        let mut st = AggregationStore::with_defaults(t0());
        st.record_publish("sens123/temp", b"22.5", far(), t0());
        let c = compiled("$GT;20/sens123/temp");
        let o = c.on_publish("sens123/temp", b"22.5", &st, t0()).unwrap();
        assert_eq!(o.topic, "$GT;20/sens123/temp");
        assert_eq!(o.payload, b"22.5");
        assert!(c.on_publish("sens123/temp", b"19", &st, t0()).is_none());
        assert!(c.on_publish("sens123/temp", b"hot", &st, t0()).is_none());
    }

    #[test]
    fn collapse_cases() {
        let e = parse_subscription("$SUM$DAILYAVG/room1/temp", &["$CNTPPL"]).unwrap();
        assert_eq!(equivalence_collapse(&e).render(), "$DAILYAVG/room1/temp");
        let e = parse_subscription("$AVG$HOURLYMAX/roomX/hum", &["$CNTPPL"]).unwrap();
        assert_eq!(equivalence_collapse(&e).render(), "$HOURLYMAX/roomX/hum");
        let e = parse_subscription("$SUM$DAILYAVG/+/temp", &["$CNTPPL"]).unwrap();
        assert_eq!(equivalence_collapse(&e), e);
        let c = compiled("$AVG$HOURLYMAX/roomX/hum");
        assert!(c.collapsed && c.spatial.is_none());
        let mut st = AggregationStore::with_defaults(t0());
        for v in ["40", "55", "47"] {
            st.record_publish("roomX/hum", v.as_bytes(), t0(), t0());
        }
        let mut out = Vec::new();
        st.advance_with(t0() + TimeDelta::hours(1), |f, s| out.extend(c.on_fire(f, s)));
        assert_eq!(out, vec![Output { topic: "$AVG$HOURLYMAX/roomX/hum".into(), payload: b"55".to_vec() }]);
    }

    #[test]
    fn processing_keywords_are_deduplicated() {
        let mut p = Pipeline::new();
        p.insert("a", "$CNTPPL/+/image", compiled("$CNTPPL/+/image"));
        p.insert("b", "$CNTPPL/room1/image", compiled("$CNTPPL/room1/image"));
        p.insert("c", "$SUM$DAILYAVG$CNTPPL/+/image", compiled("$SUM$DAILYAVG$CNTPPL/+/image"));
        assert_eq!(p.processing_for("room1/image"), vec!["$CNTPPL".to_string()]);
        assert!(p.processing_for("room1/temp").is_empty());
        p.remove_client("a");
        p.remove_client("b");
        p.remove_client("c");
        assert!(p.processing_for("room1/image").is_empty());
    }

    #[test]
    fn processed_results_reach_subscribers() {
        let mut st = AggregationStore::with_defaults(t0());
        st.record_publish("$CNTPPL/room1/image", b"3", far(), t0());
        let c = compiled("$CNTPPL/room1/image");
        let r = ProcessingResult::Value(3.0);
        let o = c.on_processed("$CNTPPL", "room1/image", &r, &st, t0()).unwrap();
        assert_eq!(o, Output { topic: "$CNTPPL/room1/image".into(), payload: b"3".to_vec() });
        let s = compiled("$SUM$CNTPPL/+/image");
        let o = s.on_processed("$CNTPPL", "room1/image", &r, &st, t0()).unwrap();
        assert_eq!(o.topic, "$SUM$CNTPPL/$AGGREGATE/image");
    }

    #[derive(Debug, Clone)]
    enum Ev {
        Pub(usize, i32),
        Wait(u32),
    }

    fn evs() -> impl Strategy<Value = Vec<Ev>> {
        proptest::collection::vec(
            prop_oneof![
                3 => (0usize..3, -40i32..40).prop_map(|(t, v)| Ev::Pub(t, v)),
                1 => (1u32..40).prop_map(Ev::Wait),
            ],
            1..60,
        )
    }

    fn drive(events: &[Ev], topics: &[&str], subs: &[&CompiledSubscription]) -> Vec<Vec<Output>> {
        let mut st = AggregationStore::with_defaults(t0());
        let mut now = t0();
        let mut out = vec![Vec::new(); subs.len()];
        for e in events {
            match e {
                Ev::Wait(m) => {
                    now += TimeDelta::minutes(i64::from(*m));
                    st.advance_with(now, |f, s| {
                        for (i, c) in subs.iter().enumerate() {
                            out[i].extend(c.on_fire(f, s));
                        }
                    });
                }
                Ev::Pub(t, v) => {
                    let p = format!("{}", f64::from(*v) / 2.0);
                    st.record_publish(topics[*t], p.as_bytes(), now + TimeDelta::minutes(20), now);
                    for (i, c) in subs.iter().enumerate() {
                        out[i].extend(c.on_publish(topics[*t], p.as_bytes(), &st, now));
                    }
                }
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn single_topic_collapse_is_value_identical(events in evs(),
                                                    w in prop::sample::select(vec!["DAILY", "HOURLY", "QUARTERHOURLY"]),
                                                    s in prop::sample::select(vec!["SUM", "AVG", "MIN", "MAX", "COUNT"]),
                                                    sp in prop::sample::select(vec!["SUM", "AVG", "MIN", "MAX"])) {
            let bare = compiled(&format!("${w}{s}/room1/temp"));
            let both = compiled(&format!("${sp}${w}{s}/room1/temp"));
            let out = drive(&events, &["room1/temp", "room2/temp", "room1/hum"], &[&bare, &both]);
            let a: Vec<&[u8]> = out[0].iter().map(|o| o.payload.as_slice()).collect();
            let b: Vec<&[u8]> = out[1].iter().map(|o| o.payload.as_slice()).collect();
            prop_assert_eq!(a, b);
        }

        /// Offline oracle: bucket every publish by quarter hour, average per
        /// topic, keep TTL-valid topics above the threshold, sum.
        #[test]
        fn composite_matches_offline_replay(events in evs()) {
            let topics = ["a/t", "b/t", "c/t"];
            let c = compiled("$SUM$GT;0$QUARTERHOURLYAVG/+/t");
            let out = drive(&events, &topics, &[&c]).remove(0);

            let mut now = 0i64;
            let mut log: Vec<(usize, i64, f64)> = Vec::new();
            let mut want = Vec::new();
            for e in &events {
                match e {
                    Ev::Pub(t, v) => {
                        log.push((*t, now, f64::from(*v) / 2.0));
                    }
                    Ev::Wait(m) => {
                        let end = now + i64::from(*m);
                        let mut k = now / 15 + 1;
                        while k * 15 <= end {
                            let fire = k * 15;
                            let mut total = Vec::new();
                            for ti in 0..3 {
                                let vals: Vec<f64> = log.iter()
                                    .filter(|(t, at, _)| *t == ti && *at >= fire - 15 && *at < fire)
                                    .map(|(_, _, v)| *v).collect();
                                let ttl_ok = log.iter().filter(|(t, at, _)| *t == ti && *at < fire)
                                    .map(|(_, at, _)| at + 20).next_back().is_some_and(|d| fire <= d);
                                if vals.is_empty() || !ttl_ok { continue; }
                                let avg = vals.iter().sum::<f64>() / vals.len() as f64;
                                if format_value(avg).parse::<f64>().unwrap() > 0.0 {
                                    total.push(avg);
                                }
                            }
                            if !total.is_empty() {
                                want.push(format_value(total.iter().sum()));
                            }
                            k += 1;
                        }
                        now = end;
                    }
                }
            }
            let got: Vec<String> = out.iter().map(|o| String::from_utf8(o.payload.clone()).unwrap()).collect();
            prop_assert_eq!(got, want);
        }
    }
}
