use std::fmt;
use std::str::FromStr;

use mqttplus::grammar::TimeWindow;
use rand::{Rng, SeedableRng};
use rand::rngs::StdRng;

use crate::run::BenchError;

pub const NUMERIC_PREFIX: &str = "numeric/polimi/deib/room1";
pub const IMAGE_PREFIX: &str = "image/polimi/deib/room1";
pub const MARKER: &[u8] = b"person";

/// Window used for aggregation scenarios; its length in seconds follows
/// from `lambda_a`.
pub const AGGREGATION_WINDOW: TimeWindow = TimeWindow::QuarterHourly;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    PlainMqtt,
    MqttplusSkr,
    MqttplusRpt,
    ImageProcessing,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::PlainMqtt => "plain-mqtt",
            Mode::MqttplusSkr => "mqttplus-skr",
            Mode::MqttplusRpt => "mqttplus-rpt",
            Mode::ImageProcessing => "image-processing",
        }
    }

    pub fn aggregates(self) -> bool {
        matches!(self, Mode::MqttplusSkr | Mode::MqttplusRpt)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadKind {
    Numeric,
    /// Image of `size` bytes with planted markers.
    Image { size: usize },
}

/// A publish/subscribe rate. Parses `0.25` or `1/15`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rate(pub f64);

impl FromStr for Rate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let v = match s.split_once('/') {
            Some((a, b)) => {
                let a: f64 = a.trim().parse().map_err(|e| format!("{s}: {e}"))?;
                let b: f64 = b.trim().parse().map_err(|e| format!("{s}: {e}"))?;
                a / b
            }
            None => s.trim().parse().map_err(|e| format!("{s}: {e}"))?,
        };
        if v.is_finite() && v > 0.0 {
            Ok(Rate(v))
        } else {
            Err(format!("{s}: rate must be positive"))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub mode: Mode,
    pub m: usize,
    pub n: usize,
    /// Publishes per second per sensor.
    pub lambda: f64,
    /// Aggregate publications per second.
    pub lambda_a: f64,
    /// Virtual seconds.
    pub duration: f64,
    pub payload: PayloadKind,
    /// Bytes in each sensor id level.
    pub id_len: usize,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            mode: Mode::MqttplusSkr,
            m: 4,
            n: 2,
            lambda: 1.0,
            lambda_a: 1.0 / 15.0,
            duration: 60.0,
            payload: PayloadKind::Numeric,
            id_len: 8,
            seed: 7,
        }
    }
}

impl ScenarioConfig {
    pub fn new(mode: Mode, m: usize, n: usize) -> Self {
        let payload = match mode {
            Mode::ImageProcessing => PayloadKind::Image { size: 4096 },
            _ => PayloadKind::Numeric,
        };
        Self { mode, m, n, payload, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |msg: String| Err(BenchError::InvalidScenario(msg));
        if self.m == 0 || self.n == 0 {
            return bad("m and n must be at least 1".into());
        }
        if self.mode.aggregates() && self.lambda <= self.lambda_a {
            return bad("lambda must exceed lambda_a for aggregation".into());
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return bad("duration must be positive".into());
        }
        if self.id_len == 0 || self.m >= 10usize.saturating_pow(self.id_len as u32 - 1) {
            return bad(format!("{} sensors do not fit {}-byte ids", self.m, self.id_len));
        }
        if self.mode == Mode::ImageProcessing && self.payload == PayloadKind::Numeric {
            return bad("image processing needs an image payload".into());
        }
        if self.mode.aggregates() && self.payload != PayloadKind::Numeric {
            return bad("aggregation needs a numeric payload".into());
        }
        if let PayloadKind::Image { size } = self.payload {
            if size < 8 * MARKER.len() {
                return bad(format!("image size {size} too small for markers"));
            }
        }
        self.window_unit_secs()?;
        Ok(())
    }

    /// Seconds per window unit so that the aggregation window lasts
    /// `1 / lambda_a` seconds.
    pub fn window_unit_secs(&self) -> Result<u32, BenchError> {
        let unit = 1.0 / (self.lambda_a * f64::from(AGGREGATION_WINDOW.minutes()));
        let rounded = unit.round();
        if rounded < 1.0 || (unit - rounded).abs() > 1e-6 || rounded > f64::from(u32::MAX) {
            return Err(BenchError::InvalidScenario(format!(
                "1/lambda_a must be a whole multiple of {} seconds",
                AGGREGATION_WINDOW.minutes()
            )));
        }
        Ok(rounded as u32)
    }

    /// Publishing rounds; every sensor publishes once per round.
    pub fn rounds(&self) -> u64 {
        (self.lambda * self.duration).round() as u64
    }

    pub fn image_size(&self) -> Option<usize> {
        match self.payload {
            PayloadKind::Image { size } => Some(size),
            PayloadKind::Numeric => None,
        }
    }

    pub fn topic_prefix(&self) -> &'static str {
        match self.payload {
            PayloadKind::Numeric => NUMERIC_PREFIX,
            PayloadKind::Image { .. } => IMAGE_PREFIX,
        }
    }

    pub fn sensor_id(&self, sensor: usize) -> String {
        format!("s{:0width$}", sensor + 1, width = self.id_len - 1)
    }

    pub fn sensor_topic(&self, sensor: usize) -> String {
        format!("{}/{}", self.topic_prefix(), self.sensor_id(sensor))
    }

    /// Operator chain without the trailing level separator.
    pub fn operator(&self) -> String {
        match self.mode {
            Mode::PlainMqtt => String::new(),
            Mode::MqttplusSkr => format!("$AVG${}AVG", AGGREGATION_WINDOW.keyword()),
            Mode::MqttplusRpt => format!("$AVG;RPT${}AVG", AGGREGATION_WINDOW.keyword()),
            Mode::ImageProcessing => mqttplus::processing::CNTPPL.to_string(),
        }
    }

    /// Chain as it appears on delivered topics.
    pub fn reply_operator(&self) -> String {
        let keywords = [mqttplus::processing::CNTPPL];
        mqttplus::grammar::parse_subscription(&self.subscription(), &keywords)
            .map(|e| e.reply_prefix())
            .unwrap_or_default()
    }

    pub fn subscription(&self) -> String {
        let base = format!("{}/+", self.topic_prefix());
        match self.mode {
            Mode::PlainMqtt => base,
            _ => format!("{}/{base}", self.operator()),
        }
    }

    /// Numeric readings cycle through three values so every window
    /// whose length is a multiple of three rounds averages to 21.5.
    pub fn numeric_payload(&self, round: u64, sensor: usize) -> Vec<u8> {
        const VALUES: [&str; 3] = ["20.5", "21.5", "22.5"];
        VALUES[(round as usize + sensor) % VALUES.len()].as_bytes().to_vec()
    }

    /// Markers planted in one image.
    pub fn planted(&self, round: u64, sensor: usize) -> usize {
        (round as usize + sensor) % 5
    }

    pub fn payload_for(&self, round: u64, sensor: usize) -> Vec<u8> {
        match self.payload {
            PayloadKind::Numeric => self.numeric_payload(round, sensor),
            PayloadKind::Image { size } => image_with_markers(size, self.planted(round, sensor), self.seed ^ sensor as u64),
        }
    }
}

/// Noise bytes that never spell a marker, with `markers` copies of the
/// marker spread over the image.
pub fn image_with_markers(size: usize, markers: usize, seed: u64) -> Vec<u8> {
    const NOISE: &[u8] = b"abcdfghijklmqtuvwxyz0123456789";
    let mut rng = StdRng::seed_from_u64(seed);
    let mut image: Vec<u8> = (0..size).map(|_| NOISE[rng.gen_range(0..NOISE.len())]).collect();
    if let Some(stride) = size.checked_div(markers) {
        assert!(stride >= MARKER.len(), "image too small for {markers} markers");
        for k in 0..markers {
            let at = k * stride;
            image[at..at + MARKER.len()].copy_from_slice(MARKER);
        }
    }
    image
}
