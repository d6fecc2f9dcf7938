//! Named processing functions applied to published payloads.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::grammar::{parse_subscription, GrammarError, NoProcessing, ProcessingKeywords, AGGREGATE_KEYWORD};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProcessingError {
    #[error("unknown processing keyword {0}")]
    UnknownKeyword(String),
    #[error("processing failed: {0}")]
    ProcessingFailure(String),
    #[error("keyword {0} is already registered")]
    DuplicateKeyword(String),
    #[error("keyword {0} is not a valid processing keyword: {1}")]
    InvalidKeyword(String, &'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Returns {
    Value,
    Json,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProcessingResult {
    Value(f64),
    Json(Vec<u8>),
}

impl ProcessingResult {
    pub fn numeric(&self) -> Option<f64> {
        match self {
            ProcessingResult::Value(v) => Some(*v),
            ProcessingResult::Json(_) => None,
        }
    }

    /// Payload forwarded to subscribers.
    pub fn to_payload(&self) -> Vec<u8> {
        match self {
            ProcessingResult::Value(v) => crate::store::format_value(*v).into_bytes(),
            ProcessingResult::Json(bytes) => bytes.clone(),
        }
    }
}

pub trait Processor: Send + Sync {
    fn process(&self, payload: &[u8]) -> Result<ProcessingResult, ProcessingError>;
}

impl<F> Processor for F
where
    F: Fn(&[u8]) -> Result<ProcessingResult, ProcessingError> + Send + Sync,
{
    fn process(&self, payload: &[u8]) -> Result<ProcessingResult, ProcessingError> {
        self(payload)
    }
}

#[derive(Clone, Serialize)]
pub struct Capability {
    pub keyword: String,
    pub desc: String,
    pub returns: Returns,
    #[serde(skip)]
    pub implementation: Arc<dyn Processor>,
}

impl fmt::Debug for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Capability")
            .field("keyword", &self.keyword)
            .field("desc", &self.desc)
            .field("returns", &self.returns)
            .finish_non_exhaustive()
    }
}

pub const CNTPPL: &str = "$CNTPPL";
const PERSON: &[u8] = b"person";

/// Non-overlapping occurrences of `person`.
pub fn count_people(payload: &[u8]) -> usize {
    let mut n = 0;
    let mut i = 0;
    while i + PERSON.len() <= payload.len() {
        if &payload[i..i + PERSON.len()] == PERSON {
            n += 1;
            i += PERSON.len();
        } else {
            i += 1;
        }
    }
    n
}

#[derive(Debug, Default)]
pub struct ProcessingRegistry {
    capabilities: Vec<Capability>,
    invocations: AtomicU64,
}

impl ProcessingRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry with the people-counting stub.
    pub fn with_stub() -> Self {
        let mut r = Self::new();
        r.register_stub_cntppl();
        r
    }

    pub fn register(&mut self, capability: Capability) -> Result<(), ProcessingError> {
        let kw = &capability.keyword;
        let bare = kw
            .strip_prefix('$')
            .ok_or_else(|| ProcessingError::InvalidKeyword(kw.clone(), "must start with '$'"))?;
        if bare.is_empty() || bare.contains(['$', ';', '/', '+', '#']) {
            return Err(ProcessingError::InvalidKeyword(kw.clone(), "reserved character"));
        }
        // Anything the grammar already understands is off limits.
        let known = !matches!(
            parse_subscription(&format!("{kw}/x"), &NoProcessing),
            Err(GrammarError::UnknownOperatorKeyword(_))
        );
        if known || kw == AGGREGATE_KEYWORD {
            return Err(ProcessingError::InvalidKeyword(kw.clone(), "collides with an operator keyword"));
        }
        if self.get(kw).is_some() {
            return Err(ProcessingError::DuplicateKeyword(kw.clone()));
        }
        self.capabilities.push(capability);
        Ok(())
    }

    pub fn register_stub_cntppl(&mut self) {
        self.register(Capability {
            keyword: CNTPPL.to_string(),
            desc: "counts people in an image".to_string(),
            returns: Returns::Value,
            implementation: Arc::new(|p: &[u8]| Ok(ProcessingResult::Value(count_people(p) as f64))),
        })
        .expect("stub keyword is free");
    }

    pub fn get(&self, keyword: &str) -> Option<&Capability> {
        self.capabilities.iter().find(|c| c.keyword == keyword)
    }

    pub fn keywords(&self) -> impl Iterator<Item = &str> {
        self.capabilities.iter().map(|c| c.keyword.as_str())
    }

    pub fn capabilities(&self) -> &[Capability] {
        &self.capabilities
    }

    /// JSON array of `{keyword, desc, returns}` in registration order.
    pub fn capabilities_document(&self) -> Vec<u8> {
        serde_json::to_vec(&self.capabilities).expect("capabilities serialize")
    }

    pub fn invocation_count(&self) -> u64 {
        self.invocations.load(Ordering::Relaxed)
    }

    pub fn invoke(&self, keyword: &str, payload: &[u8]) -> Result<ProcessingResult, ProcessingError> {
        let cap = self
            .get(keyword)
            .ok_or_else(|| ProcessingError::UnknownKeyword(keyword.to_string()))?;
        self.invocations.fetch_add(1, Ordering::Relaxed);
        cap.implementation.process(payload)
    }
}

impl ProcessingKeywords for ProcessingRegistry {
    fn is_processing_keyword(&self, keyword: &str) -> bool {
        self.get(keyword).is_some()
    }
}
