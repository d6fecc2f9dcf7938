//! Broker configuration: defaults, an optional TOML file, then flags.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::TimeDelta;
use clap::{Parser, ValueEnum};
use log::LevelFilter;
use serde::Deserialize;
use thiserror::Error;

use crate::codec::DEFAULT_MAX_PAYLOAD;
use crate::processing::CNTPPL;
use crate::store::validate_windows;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    UnreadableFile {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config file {path}: {message}")]
    UnparseableFile { path: PathBuf, message: String },
    #[error("invalid value for {key}: {reason}")]
    InvalidValue { key: &'static str, reason: String },
}

fn invalid(key: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue {
        key,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    #[default]
    Real,
    Virtual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BrokerConfig {
    pub host: String,
    pub port: u16,
    pub default_ttl: TimeDelta,
    /// Window lengths in window units.
    pub windows: Vec<u32>,
    /// Seconds per window unit (60 makes the windows minutes).
    pub window_unit_secs: u32,
    pub max_payload: usize,
    pub clock: ClockMode,
    pub log_level: LevelFilter,
    pub capabilities: Vec<String>,
    /// Delay before an unacknowledged QoS 1 delivery is resent.
    pub retry_interval: TimeDelta,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self {
            host: "0.0.0.0".into(),
            port: 1883,
            default_ttl: TimeDelta::seconds(3600),
            windows: vec![1440, 60, 15],
            window_unit_secs: 60,
            max_payload: DEFAULT_MAX_PAYLOAD,
            clock: ClockMode::Real,
            log_level: LevelFilter::Info,
            capabilities: vec![CNTPPL.to_string()],
            retry_interval: TimeDelta::seconds(10),
        }
    }
}

impl BrokerConfig {
    pub fn window_unit(&self) -> TimeDelta {
        TimeDelta::seconds(i64::from(self.window_unit_secs))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        validate_windows(&self.windows).map_err(|e| invalid("windows", e.to_string()))?;
        if self.default_ttl <= TimeDelta::zero() {
            return Err(invalid("default_ttl_secs", "must be positive"));
        }
        if self.window_unit_secs == 0 {
            return Err(invalid("window_unit_secs", "must be positive"));
        }
        if self.max_payload == 0 {
            return Err(invalid("max_payload", "must be positive"));
        }
        if let Some(bad) = self.capabilities.iter().find(|c| c.as_str() != CNTPPL) {
            return Err(invalid("capabilities", format!("no built-in capability {bad}")));
        }
        Ok(())
    }
}

/// Accepts `[1440,60,15]` or `1440,60,15`.
pub fn parse_windows(text: &str) -> Result<Vec<u32>, ConfigError> {
    let inner = text.trim();
    let inner = inner
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .unwrap_or(inner);
    let windows = inner
        .split(',')
        .map(|w| u32::from_str(w.trim()).map_err(|_| invalid("windows", format!("{:?} is not a whole number", w.trim()))))
        .collect::<Result<Vec<_>, _>>()?;
    validate_windows(&windows).map_err(|e| invalid("windows", e.to_string()))?;
    Ok(windows)
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum WindowsValue {
    List(Vec<i64>),
    Text(String),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    host: Option<String>,
    port: Option<u16>,
    default_ttl_secs: Option<i64>,
    windows: Option<WindowsValue>,
    window_unit_secs: Option<u32>,
    max_payload: Option<usize>,
    clock: Option<ClockMode>,
    log_level: Option<String>,
    capabilities: Option<Vec<String>>,
    retry_secs: Option<i64>,
}

#[derive(Debug, Clone, Default, Parser)]
#[command(name = "mqttplus-broker", version, about = "MQTT 3.1.1 broker with in-broker filtering, aggregation and processing")]
pub struct CliArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    /// Validity applied to publishes without a TTL envelope.
    #[arg(long)]
    pub default_ttl_secs: Option<i64>,
    /// Aggregation windows in window units, e.g. "1440,60,15".
    #[arg(long)]
    pub windows: Option<String>,
    /// Seconds per window unit.
    #[arg(long)]
    pub window_unit_secs: Option<u32>,
    #[arg(long)]
    pub max_payload: Option<usize>,
    #[arg(long, value_enum)]
    pub clock: Option<ClockMode>,
    #[arg(long)]
    pub log_level: Option<String>,
    /// Processing functions to enable, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub capabilities: Option<Vec<String>>,
    #[arg(long)]
    pub retry_secs: Option<i64>,
}

fn parse_level(text: &str) -> Result<LevelFilter, ConfigError> {
    LevelFilter::from_str(text).map_err(|_| invalid("log_level", format!("unknown level {text:?}")))
}

fn read_file(path: &Path) -> Result<FileConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::UnreadableFile {
        path: path.to_path_buf(),
        source,
    })?;
    toml::from_str(&text).map_err(|e| ConfigError::UnparseableFile {
        path: path.to_path_buf(),
        message: e.message().to_string(),
    })
}

fn apply_file(cfg: &mut BrokerConfig, file: FileConfig) -> Result<(), ConfigError> {
    if let Some(v) = file.host {
        cfg.host = v;
    }
    if let Some(v) = file.port {
        cfg.port = v;
    }
    if let Some(v) = file.default_ttl_secs {
        cfg.default_ttl = TimeDelta::seconds(v);
    }
    match file.windows {
        Some(WindowsValue::Text(t)) => cfg.windows = parse_windows(&t)?,
        Some(WindowsValue::List(l)) => {
            cfg.windows = l
                .into_iter()
                .map(|w| u32::try_from(w).map_err(|_| invalid("windows", format!("{w} is out of range"))))
                .collect::<Result<_, _>>()?
        }
        None => {}
    }
    if let Some(v) = file.window_unit_secs {
        cfg.window_unit_secs = v;
    }
    if let Some(v) = file.max_payload {
        cfg.max_payload = v;
    }
    if let Some(v) = file.clock {
        cfg.clock = v;
    }
    if let Some(v) = file.log_level {
        cfg.log_level = parse_level(&v)?;
    }
    if let Some(v) = file.capabilities {
        cfg.capabilities = v;
    }
    if let Some(v) = file.retry_secs {
        cfg.retry_interval = TimeDelta::seconds(v);
    }
    Ok(())
}

/// Defaults, then the file named by `--config`, then the flags.
pub fn load_config(args: &CliArgs) -> Result<BrokerConfig, ConfigError> {
    let mut cfg = BrokerConfig::default();
    if let Some(path) = &args.config {
        apply_file(&mut cfg, read_file(path)?)?;
    }
    if let Some(v) = &args.host {
        cfg.host = v.clone();
    }
    if let Some(v) = args.port {
        cfg.port = v;
    }
    if let Some(v) = args.default_ttl_secs {
        cfg.default_ttl = TimeDelta::seconds(v);
    }
    if let Some(v) = &args.windows {
        cfg.windows = parse_windows(v)?;
    }
    if let Some(v) = args.window_unit_secs {
        cfg.window_unit_secs = v;
    }
    if let Some(v) = args.max_payload {
        cfg.max_payload = v;
    }
    if let Some(v) = args.clock {
        cfg.clock = v;
    }
    if let Some(v) = &args.log_level {
        cfg.log_level = parse_level(v)?;
    }
    if let Some(v) = &args.capabilities {
        cfg.capabilities = v.iter().filter(|s| !s.is_empty()).cloned().collect();
    }
    if let Some(v) = args.retry_secs {
        cfg.retry_interval = TimeDelta::seconds(v);
    }
    cfg.validate()?;
    Ok(cfg)
}
