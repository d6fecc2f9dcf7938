//! One JSON object per line: `{"ts": ..., "event": ..., "detail": ...}`.
//! The log target becomes the event name.

use std::io::Write;
use std::sync::Mutex;

use chrono::{SecondsFormat, Utc};
use log::{LevelFilter, Log, Metadata, Record};
use serde::Serialize;

#[derive(Serialize)]
struct Line<'a> {
    ts: String,
    event: &'a str,
    detail: String,
}

pub struct JsonLogger<W: Write + Send> {
    level: LevelFilter,
    out: Mutex<W>,
}

impl<W: Write + Send> JsonLogger<W> {
    pub fn new(level: LevelFilter, out: W) -> Self {
        Self {
            level,
            out: Mutex::new(out),
        }
    }
}

pub fn render_line(event: &str, detail: String) -> String {
    let line = Line {
        ts: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
        event,
        detail,
    };
    serde_json::to_string(&line).expect("log line serializes")
}

impl<W: Write + Send> Log for JsonLogger<W> {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= self.level
    }

    fn log(&self, record: &Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let line = render_line(record.target(), record.args().to_string());
        if let Ok(mut out) = self.out.lock() {
            let _ = writeln!(out, "{line}");
        }
    }

    fn flush(&self) {
        if let Ok(mut out) = self.out.lock() {
            let _ = out.flush();
        }
    }
}

/// Install the JSON logger on stderr. Later calls are ignored.
pub fn init(level: LevelFilter) {
    if log::set_boxed_logger(Box::new(JsonLogger::new(level, std::io::stderr()))).is_ok() {
        log::set_max_level(level);
    }
}
