//! Operator syntax layered on top of MQTT topic filters.
//!
//! A subscription filter may start with one or more `$KEYWORD[;operand]`
//! tokens, written back to back in the leading level(s):
//!
//! ```text
//! $GT;20$SUM;RPT$DAILYAVG/+/temp
//! └─rule─┘└spatial┘└temporal┘└base┘
//! ```
//!
//! Tokens are listed outermost first; the broker evaluates them right to
//! left. Whatever follows the last `$` level is an ordinary MQTT filter.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::rules::{parse_decimal, Rule, RuleOp};
use crate::topic::{self, TopicError};

/// Replacement keyword for wildcard levels in single-keyword replies.
pub const AGGREGATE_KEYWORD: &str = "$AGGREGATE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stat {
    Count,
    Sum,
    Avg,
    Min,
    Max,
}

impl Stat {
    pub const ALL: [Stat; 5] = [Stat::Count, Stat::Sum, Stat::Avg, Stat::Min, Stat::Max];

    pub fn keyword(self) -> &'static str {
        match self {
            Stat::Count => "COUNT",
            Stat::Sum => "SUM",
            Stat::Avg => "AVG",
            Stat::Min => "MIN",
            Stat::Max => "MAX",
        }
    }

    pub fn from_keyword(kw: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.keyword() == kw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TimeWindow {
    Daily,
    Hourly,
    QuarterHourly,
}

impl TimeWindow {
    pub const ALL: [TimeWindow; 3] = [TimeWindow::Daily, TimeWindow::Hourly, TimeWindow::QuarterHourly];

    pub fn keyword(self) -> &'static str {
        match self {
            TimeWindow::Daily => "DAILY",
            TimeWindow::Hourly => "HOURLY",
            TimeWindow::QuarterHourly => "QUARTERHOURLY",
        }
    }

    /// Window length in window units (minutes by default).
    pub fn minutes(self) -> u32 {
        match self {
            TimeWindow::Daily => 1440,
            TimeWindow::Hourly => 60,
            TimeWindow::QuarterHourly => 15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum SpatialMode {
    /// Single keyword replacement.
    #[default]
    Skr,
    /// Replacement with participating topics.
    Rpt,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum OperatorToken {
    Rule(Rule),
    Temporal { window: TimeWindow, stat: Stat },
    Spatial { stat: Stat, mode: SpatialMode },
    /// Keyword including its leading `$`, e.g. `$CNTPPL`.
    Processing(String),
}

impl OperatorToken {
    fn write(&self, out: &mut String, with_mode: bool) {
        match self {
            OperatorToken::Rule(r) => {
                out.push('$');
                out.push_str(r.op.keyword());
                out.push(';');
                out.push_str(&r.operand);
            }
            OperatorToken::Temporal { window, stat } => {
                out.push('$');
                out.push_str(window.keyword());
                out.push_str(stat.keyword());
            }
            OperatorToken::Spatial { stat, mode } => {
                out.push('$');
                out.push_str(stat.keyword());
                if with_mode && *mode == SpatialMode::Rpt {
                    out.push_str(";RPT");
                }
            }
            OperatorToken::Processing(kw) => out.push_str(kw),
        }
    }
}

impl fmt::Display for OperatorToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        self.write(&mut s, true);
        f.write_str(&s)
    }
}

/// A `;`-separated level of the base filter naming explicit participants.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ExplicitList {
    pub level: usize,
    pub items: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SubscriptionExpr {
    pub chain: Vec<OperatorToken>,
    pub base_filter: String,
    pub explicit_lists: Vec<ExplicitList>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GrammarError {
    #[error("empty topic")]
    EmptyTopic,
    #[error("unknown operator keyword ${0}")]
    UnknownOperatorKeyword(String),
    #[error("malformed operand for ${keyword}: {reason}")]
    MalformedOperand { keyword: String, reason: String },
    #[error("malformed participant list {0:?}")]
    MalformedList(String),
    #[error("unsupported participant list in {0:?}: {1}")]
    UnsupportedList(String, &'static str),
    #[error(transparent)]
    Filter(#[from] TopicError),
}

/// Lookup of processing keywords known to the broker.
pub trait ProcessingKeywords {
    fn is_processing_keyword(&self, keyword: &str) -> bool;
}

/// No processing functions registered.
pub struct NoProcessing;

impl ProcessingKeywords for NoProcessing {
    fn is_processing_keyword(&self, _: &str) -> bool {
        false
    }
}

impl ProcessingKeywords for [&str] {
    fn is_processing_keyword(&self, keyword: &str) -> bool {
        self.contains(&keyword)
    }
}

impl<const N: usize> ProcessingKeywords for [&str; N] {
    fn is_processing_keyword(&self, keyword: &str) -> bool {
        self.contains(&keyword)
    }
}

fn malformed(keyword: &str, reason: impl Into<String>) -> GrammarError {
    GrammarError::MalformedOperand {
        keyword: keyword.to_string(),
        reason: reason.into(),
    }
}

fn parse_token(
    raw: &str,
    keywords: &(impl ProcessingKeywords + ?Sized),
) -> Result<OperatorToken, GrammarError> {
    let (kw, operand) = match raw.split_once(';') {
        Some((k, o)) => (k, Some(o)),
        None => (raw, None),
    };
    if let Some(op) = RuleOp::from_keyword(kw) {
        let operand = operand.ok_or_else(|| malformed(kw, "missing operand"))?;
        if op.is_numeric_only() && parse_decimal(operand).is_none() {
            return Err(malformed(kw, format!("{operand:?} is not a number")));
        }
        if op == RuleOp::Contains && operand.is_empty() {
            return Err(malformed(kw, "empty search text"));
        }
        return Ok(OperatorToken::Rule(Rule::new(op, operand)));
    }
    if let Some(stat) = Stat::from_keyword(kw) {
        let mode = match operand {
            None | Some("SKR") => SpatialMode::Skr,
            Some("RPT") => SpatialMode::Rpt,
            Some(other) => return Err(malformed(kw, format!("unknown mode {other:?}"))),
        };
        return Ok(OperatorToken::Spatial { stat, mode });
    }
    for window in TimeWindow::ALL {
        if let Some(stat) = kw.strip_prefix(window.keyword()).and_then(Stat::from_keyword) {
            if operand.is_some() {
                return Err(malformed(kw, "temporal operators take no operand"));
            }
            return Ok(OperatorToken::Temporal { window, stat });
        }
    }
    let dollar_kw = format!("${kw}");
    if keywords.is_processing_keyword(&dollar_kw) {
        if operand.is_some() {
            return Err(malformed(kw, "processing operators take no operand"));
        }
        return Ok(OperatorToken::Processing(dollar_kw));
    }
    Err(GrammarError::UnknownOperatorKeyword(kw.to_string()))
}

/// Split a subscription filter into its operator chain and base filter.
pub fn parse_subscription(
    filter: &str,
    keywords: &(impl ProcessingKeywords + ?Sized),
) -> Result<SubscriptionExpr, GrammarError> {
    if filter.is_empty() {
        return Err(GrammarError::EmptyTopic);
    }
    let levels: Vec<&str> = filter.split('/').collect();
    if levels[0] == "$SYS" {
        topic::validate_filter(filter)?;
        return Ok(SubscriptionExpr::plain(filter));
    }
    let mut chain = Vec::new();
    let mut consumed = 0;
    for level in &levels {
        let Some(ops) = level.strip_prefix('$') else {
            break;
        };
        for raw in ops.split('$') {
            chain.push(parse_token(raw, keywords)?);
        }
        consumed += 1;
    }
    let base_filter = levels[consumed..].join("/");
    if base_filter.is_empty() {
        return Err(GrammarError::EmptyTopic);
    }
    topic::validate_filter(&base_filter)?;

    let mut explicit_lists = Vec::new();
    if chain.iter().any(|t| matches!(t, OperatorToken::Spatial { .. })) {
        for (level, text) in base_filter.split('/').enumerate() {
            if text.contains(';') {
                let items: Vec<String> = text.split(';').map(str::to_string).collect();
                if items.iter().any(String::is_empty) {
                    return Err(GrammarError::MalformedList(text.to_string()));
                }
                explicit_lists.push(ExplicitList { level, items });
            }
        }
        if explicit_lists.len() > 1 {
            return Err(GrammarError::UnsupportedList(
                base_filter,
                "only one level may list participants",
            ));
        }
        if !explicit_lists.is_empty() && topic::has_wildcard(&base_filter) {
            return Err(GrammarError::UnsupportedList(
                base_filter,
                "participant lists cannot be mixed with wildcards",
            ));
        }
    }
    Ok(SubscriptionExpr {
        chain,
        base_filter,
        explicit_lists,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InvalidReason {
    TemporalBeforeSpatial,
    RuleAfterTemporal,
    ProcessingNotLast,
    DuplicateSpatial,
    DuplicateTemporal,
    NonNumericOperand,
}

impl fmt::Display for InvalidReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InvalidReason::TemporalBeforeSpatial => "temporal operator precedes spatial operator",
            InvalidReason::RuleAfterTemporal => "rule follows temporal operator",
            InvalidReason::ProcessingNotLast => "processing operator is not innermost",
            InvalidReason::DuplicateSpatial => "more than one spatial operator",
            InvalidReason::DuplicateTemporal => "more than one temporal operator",
            InvalidReason::NonNumericOperand => "numeric rule with non-numeric operand on aggregate",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Validity {
    Valid,
    Invalid(InvalidReason),
}

impl Validity {
    pub fn is_valid(self) -> bool {
        self == Validity::Valid
    }
}

/// Check the chain against `Rule* Spatial? Rule* Temporal? Processing?`.
pub fn validate_chain(expr: &SubscriptionExpr) -> Validity {
    #[derive(PartialEq, PartialOrd)]
    enum Phase {
        Start,
        Spatial,
        Temporal,
        Processing,
    }
    let mut phase = Phase::Start;
    for token in &expr.chain {
        let reason = match (token, &phase) {
            (_, Phase::Processing) => Some(InvalidReason::ProcessingNotLast),
            (OperatorToken::Rule(_), Phase::Temporal) => Some(InvalidReason::RuleAfterTemporal),
            (OperatorToken::Rule(_), _) => None,
            (OperatorToken::Spatial { .. }, Phase::Temporal) => {
                Some(InvalidReason::TemporalBeforeSpatial)
            }
            (OperatorToken::Spatial { .. }, Phase::Spatial) => Some(InvalidReason::DuplicateSpatial),
            (OperatorToken::Spatial { .. }, _) => {
                phase = Phase::Spatial;
                None
            }
            (OperatorToken::Temporal { .. }, Phase::Temporal) => {
                Some(InvalidReason::DuplicateTemporal)
            }
            (OperatorToken::Temporal { .. }, _) => {
                phase = Phase::Temporal;
                None
            }
            (OperatorToken::Processing(_), _) => {
                phase = Phase::Processing;
                None
            }
        };
        if let Some(r) = reason {
            return Validity::Invalid(r);
        }
    }
    let aggregates = expr.temporal().is_some()
        || (expr.spatial().is_some() && topic::has_wildcard(&expr.base_filter));
    if aggregates
        && expr
            .rules()
            .any(|r| r.op.is_numeric_only() && parse_decimal(&r.operand).is_none())
    {
        return Validity::Invalid(InvalidReason::NonNumericOperand);
    }
    Validity::Valid
}

impl SubscriptionExpr {
    pub fn plain(filter: &str) -> Self {
        Self {
            chain: Vec::new(),
            base_filter: filter.to_string(),
            explicit_lists: Vec::new(),
        }
    }

    pub fn is_plain(&self) -> bool {
        self.chain.is_empty()
    }

    pub fn rules(&self) -> impl Iterator<Item = &Rule> {
        self.chain.iter().filter_map(|t| match t {
            OperatorToken::Rule(r) => Some(r),
            _ => None,
        })
    }

    pub fn spatial(&self) -> Option<(Stat, SpatialMode)> {
        self.chain.iter().find_map(|t| match t {
            OperatorToken::Spatial { stat, mode } => Some((*stat, *mode)),
            _ => None,
        })
    }

    pub fn temporal(&self) -> Option<(TimeWindow, Stat)> {
        self.chain.iter().find_map(|t| match t {
            OperatorToken::Temporal { window, stat } => Some((*window, *stat)),
            _ => None,
        })
    }

    pub fn processing(&self) -> Option<&str> {
        self.chain.iter().find_map(|t| match t {
            OperatorToken::Processing(k) => Some(k.as_str()),
            _ => None,
        })
    }

    fn chain_string(&self, with_mode: bool) -> String {
        let mut s = String::new();
        for t in &self.chain {
            t.write(&mut s, with_mode);
        }
        s
    }

    /// Canonical subscription string; parses back to an equal expression.
    pub fn render(&self) -> String {
        if self.chain.is_empty() {
            self.base_filter.clone()
        } else {
            format!("{}/{}", self.chain_string(true), self.base_filter)
        }
    }

    /// Operator chain as it appears in reply topics (no spatial mode suffix).
    pub fn reply_prefix(&self) -> String {
        self.chain_string(false)
    }

    /// Reply topic for a per-topic (non-spatial) delivery on `topic`.
    pub fn reply_topic_for(&self, topic: &str) -> String {
        format!("{}/{}", self.reply_prefix(), topic)
    }

    /// Concrete topics named by an explicit participant list.
    pub fn explicit_topics(&self) -> Option<Vec<String>> {
        let list = self.explicit_lists.first()?;
        let levels: Vec<&str> = self.base_filter.split('/').collect();
        Some(
            list.items
                .iter()
                .map(|item| {
                    let mut l = levels.clone();
                    l[list.level] = item;
                    l.join("/")
                })
                .collect(),
        )
    }
}

impl fmt::Display for SubscriptionExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

fn sorted_level_values<S: AsRef<str>>(participants: &[S], level: usize) -> String {
    let values: BTreeSet<&str> = participants
        .iter()
        .filter_map(|p| p.as_ref().split('/').nth(level))
        .collect();
    values.into_iter().collect::<Vec<_>>().join(";")
}

/// Topic on which a spatial aggregate is published.
///
/// Single keyword replacement swaps every wildcard level for `$AGGREGATE`.
/// Participant replacement (and explicit lists) swaps the varying level for
/// the sorted, `;`-joined values the participants take there. Participant
/// replacement needs exactly one `+` and no `#`; otherwise it falls back to
/// keyword replacement.
pub fn render_publication_topic<S: AsRef<str>>(expr: &SubscriptionExpr, participants: &[S]) -> String {
    let mode = expr.spatial().map(|(_, m)| m).unwrap_or_default();
    let mut levels: Vec<String> = expr.base_filter.split('/').map(str::to_string).collect();
    if let Some(list) = expr.explicit_lists.first() {
        levels[list.level] = sorted_level_values(participants, list.level);
    } else {
        let plus: Vec<usize> = (0..levels.len()).filter(|&i| levels[i] == "+").collect();
        let has_hash = levels.last().is_some_and(|l| l == "#");
        if mode == SpatialMode::Rpt && plus.len() == 1 && !has_hash {
            levels[plus[0]] = sorted_level_values(participants, plus[0]);
        } else {
            if mode == SpatialMode::Rpt {
                log::info!(
                    target: "subscribe",
                    "participant replacement unsupported for {:?}; using {AGGREGATE_KEYWORD}",
                    expr.base_filter
                );
            }
            for l in levels.iter_mut() {
                if l == "+" || l == "#" {
                    *l = AGGREGATE_KEYWORD.to_string();
                }
            }
        }
    }
    format!("{}/{}", expr.reply_prefix(), levels.join("/"))
}
