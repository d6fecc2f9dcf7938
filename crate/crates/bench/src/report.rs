use std::io::Write;

use serde::Serialize;

use crate::model::{Prediction, TrafficModel};
use crate::run::{BenchError, Measurement};
use crate::scenario::ScenarioConfig;

/// Relative error allowed between measured and predicted downlink.
pub const MODEL_TOLERANCE: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub mode: String,
    pub m: usize,
    pub n: usize,
    pub lambda: f64,
    pub lambda_a: f64,
    /// Predicted downlink bytes for the mode.
    pub predicted: f64,
    pub measured: u64,
    /// Predicted plain MQTT downlink over measured downlink.
    pub ratio: f64,
}

impl ReportRow {
    pub fn new(config: &ScenarioConfig, measurement: &Measurement, prediction: &Prediction) -> Self {
        let measured = measurement.downlink_bytes;
        Self {
            mode: config.mode.name().to_string(),
            m: config.m,
            n: config.n,
            lambda: config.lambda,
            lambda_a: config.lambda_a,
            predicted: prediction.for_mode(config.mode),
            measured,
            ratio: if measured == 0 { f64::INFINITY } else { prediction.b_mqtt / measured as f64 },
        }
    }

    pub fn relative_error(&self) -> f64 {
        (self.measured as f64 - self.predicted).abs() / self.predicted
    }

    pub fn within_tolerance(&self) -> bool {
        self.relative_error() <= MODEL_TOLERANCE
    }

    pub fn summary(&self) -> String {
        format!(
            "{} {} m={} n={} predicted={:.0} measured={} error={:.1}% ratio={:.2}",
            if self.within_tolerance() { "PASS" } else { "FAIL" },
            self.mode,
            self.m,
            self.n,
            self.predicted,
            self.measured,
            100.0 * self.relative_error(),
            self.ratio
        )
    }
}

/// One CSV row per scenario.
pub fn emit_report<W: Write>(rows: &[ReportRow], out: W) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Model, prediction and report row for a finished scenario.
pub fn evaluate(config: &ScenarioConfig, measurement: &Measurement) -> (TrafficModel, Prediction, ReportRow) {
    let model = TrafficModel::measure(config);
    let prediction = crate::model::predict_bytes(&model, config);
    let row = ReportRow::new(config, measurement, &prediction);
    (model, prediction, row)
}
