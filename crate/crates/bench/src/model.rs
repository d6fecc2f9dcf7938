use mqttplus::codec::{encode_packet, Packet, Publish};

use crate::scenario::{Mode, ScenarioConfig};

/// Packet lengths feeding the downlink model, in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrafficModel {
    /// Fixed header: type byte plus remaining-length varint.
    pub h: usize,
    /// Topic with its length prefix.
    pub j: usize,
    /// Payload.
    pub k: usize,
    /// Whole publish frame, `h + j + k`.
    pub p: usize,
    /// Operator chain on delivered topics.
    pub o: usize,
    /// Growth of an RPT topic per participant: the id plus its separator.
    pub w: usize,
    /// Frame carrying a one-digit numeric result on a sensor topic.
    pub p_numeric: usize,
}

impl TrafficModel {
    /// Lengths measured from encoded sensor publishes.
    pub fn measure(config: &ScenarioConfig) -> Self {
        let topic = config.sensor_topic(0);
        let payload = config.payload_for(0, 0);
        let p = frame_len(&topic, &payload);
        let j = 2 + topic.len();
        let k = payload.len();
        Self {
            h: p - j - k,
            j,
            k,
            p,
            o: config.reply_operator().len(),
            w: config.id_len + 1,
            p_numeric: frame_len(&topic, b"0"),
        }
    }
}

pub fn frame_len(topic: &str, payload: &[u8]) -> usize {
    let packet = Packet::Publish(Publish::qos0(topic, payload.to_vec()));
    encode_packet(&packet).map(|b| b.len()).unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    /// Plain MQTT downlink for the same sensors and subscribers.
    pub b_mqtt: f64,
    /// Downlink under the scenario's mode.
    pub b_mqttplus: f64,
}

impl Prediction {
    pub fn for_mode(&self, mode: Mode) -> f64 {
        match mode {
            Mode::PlainMqtt => self.b_mqtt,
            _ => self.b_mqttplus,
        }
    }
}

pub fn predict_bytes(model: &TrafficModel, scenario: &ScenarioConfig) -> Prediction {
    let (m, n) = (scenario.m as f64, scenario.n as f64);
    let t = scenario.duration;
    let b_mqtt = scenario.lambda * t * m * n * model.p as f64;
    let q = |extra: f64| (model.p + model.o) as f64 + extra;
    let b_mqttplus = match scenario.mode {
        Mode::PlainMqtt => b_mqtt,
        Mode::MqttplusSkr => scenario.lambda_a * t * n * q(0.0),
        Mode::MqttplusRpt => scenario.lambda_a * t * n * q(model.w as f64 * m),
        Mode::ImageProcessing => scenario.lambda * t * m * n * (model.p_numeric + model.o) as f64,
    };
    Prediction { b_mqtt, b_mqttplus }
}

/// Predicted downlink reduction of MQTT+ against plain MQTT.
pub fn predicted_ratio(model: &TrafficModel, scenario: &ScenarioConfig) -> f64 {
    let p = predict_bytes(model, scenario);
    p.b_mqtt / p.b_mqttplus
}
