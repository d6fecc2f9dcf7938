//! Content rules evaluated against publish payloads.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RuleOp {
    Eq,
    Neq,
    Gt,
    Gte,
    Lt,
    Lte,
    Contains,
}

impl RuleOp {
    pub const ALL: [RuleOp; 7] = [
        RuleOp::Eq,
        RuleOp::Neq,
        RuleOp::Gt,
        RuleOp::Gte,
        RuleOp::Lt,
        RuleOp::Lte,
        RuleOp::Contains,
    ];

    pub fn keyword(self) -> &'static str {
        match self {
            RuleOp::Eq => "EQ",
            RuleOp::Neq => "NEQ",
            RuleOp::Gt => "GT",
            RuleOp::Gte => "GTE",
            RuleOp::Lt => "LT",
            RuleOp::Lte => "LTE",
            RuleOp::Contains => "CONTAINS",
        }
    }

    pub fn from_keyword(kw: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.keyword() == kw)
    }

    /// Operators that only make sense for numeric payloads.
    pub fn is_numeric_only(self) -> bool {
        matches!(self, RuleOp::Gt | RuleOp::Gte | RuleOp::Lt | RuleOp::Lte)
    }
}

impl fmt::Display for RuleOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Rule {
    pub op: RuleOp,
    pub operand: String,
}

impl Rule {
    pub fn new(op: RuleOp, operand: impl Into<String>) -> Self {
        Self {
            op,
            operand: operand.into(),
        }
    }

    pub fn evaluate(&self, payload: &[u8]) -> RuleVerdict {
        evaluate(self.op, &self.operand, payload)
    }

    pub fn forwards(&self, payload: &[u8]) -> bool {
        self.evaluate(payload) == RuleVerdict::Forward
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleVerdict {
    Forward,
    Drop,
    /// A numeric operator met a non-numeric payload.
    NotApplicable,
}

/// Decimal number with optional sign, fraction and exponent, surrounding
/// whitespace ignored. `inf`, `nan` and hex forms are not numbers here.
pub fn parse_decimal(s: &str) -> Option<f64> {
    let t = s.trim();
    let body = t.strip_prefix(['+', '-']).unwrap_or(t);
    let (mantissa, exponent) = match body.find(['e', 'E']) {
        Some(i) => (&body[..i], Some(&body[i + 1..])),
        None => (body, None),
    };
    let (int, frac) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    let digits = |x: &str| x.bytes().all(|b| b.is_ascii_digit());
    if !(digits(int) && digits(frac)) || (int.is_empty() && frac.is_empty()) {
        return None;
    }
    if let Some(exp) = exponent {
        let e = exp.strip_prefix(['+', '-']).unwrap_or(exp);
        if e.is_empty() || !digits(e) {
            return None;
        }
    }
    t.parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn parse_decimal_bytes(payload: &[u8]) -> Option<f64> {
    std::str::from_utf8(payload).ok().and_then(parse_decimal)
}

fn verdict(b: bool) -> RuleVerdict {
    if b {
        RuleVerdict::Forward
    } else {
        RuleVerdict::Drop
    }
}

fn equal(operand: &str, payload: &[u8]) -> bool {
    match (parse_decimal(operand), parse_decimal_bytes(payload)) {
        (Some(a), Some(b)) => a == b,
        _ => payload == operand.as_bytes(),
    }
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    needle.is_empty() || haystack.windows(needle.len()).any(|w| w == needle)
}

/// Decide whether a payload passes a rule.
pub fn evaluate(op: RuleOp, operand: &str, payload: &[u8]) -> RuleVerdict {
    match op {
        RuleOp::Eq => verdict(equal(operand, payload)),
        RuleOp::Neq => verdict(!equal(operand, payload)),
        RuleOp::Contains => verdict(contains(payload, operand.as_bytes())),
        _ => {
            let text = String::from_utf8_lossy(payload);
            let (Some(value), Some(threshold)) = (parse_decimal(&text), parse_decimal(operand))
            else {
                return RuleVerdict::NotApplicable;
            };
            verdict(match op {
                RuleOp::Gt => value > threshold,
                RuleOp::Gte => value >= threshold,
                RuleOp::Lt => value < threshold,
                RuleOp::Lte => value <= threshold,
                _ => unreachable!(),
            })
        }
    }
}
