//! Latency calibration: the per-component durations that drive the
//! discrete-event clock, loaded from a versioned TOML document.
//!
//! The shipped default file is produced by the calibration fitter (see
//! [`crate::fit`]) so that simulated end-to-end totals reproduce the six
//! measured reference totals; see `configs/calibration/default.toml`.

use crate::civ::ProfileKind;
use crate::dtmf::{DtmfPath, PathCosts};
use crate::signaling::NetworkKind;
use crate::time::SimDuration;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

pub const CALIBRATION_SCHEMA: &str = "civ-calibration/1";

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("calibration parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("calibration field {field}: {message}")]
    Invalid { field: String, message: String },
    #[error("io error reading calibration: {0}")]
    Io(#[from] std::io::Error),
}

fn invalid(field: &str, message: impl Into<String>) -> CalibrationError {
    CalibrationError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

/// Per-component durations, all in milliseconds as written in the file.
/// Accessors convert to integer microseconds for the engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyCalibration {
    pub schema: String,
    /// origin network -> destination network -> call setup time.
    pub call_setup_ms: BTreeMap<String, BTreeMap<String, f64>>,
    pub dtmf_per_digit_ms: DtmfPerDigit,
    pub recognition_ms: RecognitionDelays,
    pub misc_ms: MiscDurations,
    pub noise: NoiseCalibration,
    #[serde(default)]
    pub jitter: JitterConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtmfPerDigit {
    pub digital_event: f64,
    pub out_of_band: f64,
    /// Added on top of the mark + space signal time per analogue digit.
    pub analogue_extra: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognitionDelays {
    pub sip: f64,
    pub cellular: f64,
    pub landline_truecall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiscDurations {
    /// Extra time between ring-up and the missed-call record appearing at
    /// the callee once an abandoned call is torn down.
    pub missed_call_delivery_extra: f64,
    /// Per representation change when DTMF crosses a gateway.
    pub gateway_conversion: f64,
    pub cnam_lookup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseCalibration {
    /// SNR of the modeled analogue line, chosen by the reliability sweep.
    pub analogue_snr_db: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JitterConfig {
    /// Optional +/- percentage applied to call setups; measurements showed
    /// day and night approximately the same, so the default is 0.
    pub day_night_pct: f64,
}

impl LatencyCalibration {
    pub fn from_toml_str(text: &str) -> Result<Self, CalibrationError> {
        let cal: LatencyCalibration = toml::from_str(text)?;
        cal.validate()?;
        Ok(cal)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CalibrationError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("calibration serializes")
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        if !self.schema.starts_with("civ-calibration/") {
            return Err(invalid("schema", format!("unknown schema {:?}", self.schema)));
        }
        for kind in NetworkKind::ALL {
            let origin = self
                .call_setup_ms
                .get(kind.as_str())
                .ok_or_else(|| invalid("call_setup_ms", format!("missing origin {kind}")))?;
            for dest in NetworkKind::ALL {
                let v = origin.get(dest.as_str()).ok_or_else(|| {
                    invalid("call_setup_ms", format!("missing pair {kind} -> {dest}"))
                })?;
                if *v < 0.0 || !v.is_finite() {
                    return Err(invalid(
                        "call_setup_ms",
                        format!("{kind} -> {dest} must be finite and >= 0"),
                    ));
                }
            }
        }
        let nonneg = [
            ("dtmf_per_digit_ms.digital_event", self.dtmf_per_digit_ms.digital_event),
            ("dtmf_per_digit_ms.out_of_band", self.dtmf_per_digit_ms.out_of_band),
            ("dtmf_per_digit_ms.analogue_extra", self.dtmf_per_digit_ms.analogue_extra),
            ("recognition_ms.sip", self.recognition_ms.sip),
            ("recognition_ms.cellular", self.recognition_ms.cellular),
            ("recognition_ms.landline_truecall", self.recognition_ms.landline_truecall),
            (
                "misc_ms.missed_call_delivery_extra",
                self.misc_ms.missed_call_delivery_extra,
            ),
            ("misc_ms.gateway_conversion", self.misc_ms.gateway_conversion),
            ("misc_ms.cnam_lookup", self.misc_ms.cnam_lookup),
        ];
        for (field, v) in nonneg {
            if v < 0.0 || !v.is_finite() {
                return Err(invalid(field, "must be finite and >= 0"));
            }
        }
        if !self.noise.analogue_snr_db.is_finite() {
            return Err(invalid("noise.analogue_snr_db", "must be finite"));
        }
        if self.jitter.day_night_pct < 0.0 || self.jitter.day_night_pct > 100.0 {
            return Err(invalid("jitter.day_night_pct", "must be in 0..=100"));
        }
        Ok(())
    }

    pub fn call_setup(&self, origin: NetworkKind, dest: NetworkKind) -> SimDuration {
        let ms = self.call_setup_ms[origin.as_str()][dest.as_str()];
        SimDuration::from_ms_f64(ms)
    }

    pub fn path_costs(&self, path: DtmfPath) -> PathCosts {
        let per_digit = match path {
            DtmfPath::DigitalEvent => self.dtmf_per_digit_ms.digital_event,
            DtmfPath::OutOfBand => self.dtmf_per_digit_ms.out_of_band,
            DtmfPath::AnalogueInband => self.dtmf_per_digit_ms.analogue_extra,
        };
        PathCosts {
            fixed: SimDuration::ZERO,
            per_digit: SimDuration::from_ms_f64(per_digit),
        }
    }

    pub fn recognition_delay(&self, profile: ProfileKind) -> SimDuration {
        let ms = match profile {
            ProfileKind::Sip => self.recognition_ms.sip,
            ProfileKind::Cellular => self.recognition_ms.cellular,
            ProfileKind::LandlineTruecall => self.recognition_ms.landline_truecall,
        };
        SimDuration::from_ms_f64(ms)
    }

    pub fn missed_call_extra(&self) -> SimDuration {
        SimDuration::from_ms_f64(self.misc_ms.missed_call_delivery_extra)
    }

    pub fn gateway_conversion(&self) -> SimDuration {
        SimDuration::from_ms_f64(self.misc_ms.gateway_conversion)
    }

    pub fn cnam_lookup(&self) -> SimDuration {
        SimDuration::from_ms_f64(self.misc_ms.cnam_lookup)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"
schema = "civ-calibration/1"

[call_setup_ms.voip-sip]
voip-sip = 3100.0
pstn-analogue = 3600.0
cellular-cs = 3300.0

[call_setup_ms.pstn-analogue]
voip-sip = 3600.0
pstn-analogue = 4500.0
cellular-cs = 9450.0

[call_setup_ms.cellular-cs]
voip-sip = 3300.0
pstn-analogue = 9450.0
cellular-cs = 3000.0

[dtmf_per_digit_ms]
digital_event = 50.0
out_of_band = 75.0
analogue_extra = 150.0

[recognition_ms]
sip = 275.0
cellular = 1175.0
landline_truecall = 150.0

[misc_ms]
missed_call_delivery_extra = 300.0
gateway_conversion = 0.0
cnam_lookup = 0.0

[noise]
analogue_snr_db = 6.5

[jitter]
day_night_pct = 0.0
"#;

    #[test]
    fn parses_and_validates_sample() {
        let cal = LatencyCalibration::from_toml_str(SAMPLE).unwrap();
        assert_eq!(
            cal.call_setup(NetworkKind::VoipSip, NetworkKind::VoipSip),
            SimDuration::from_ms(3100)
        );
        assert_eq!(
            cal.call_setup(NetworkKind::PstnAnalogue, NetworkKind::CellularCs),
            SimDuration::from_ms(9450)
        );
        assert_eq!(cal.recognition_delay(ProfileKind::Cellular), SimDuration::from_ms(1175));
        assert_eq!(cal.missed_call_extra(), SimDuration::from_ms(300));
    }

    #[test]
    fn missing_pair_is_a_field_error() {
        let broken = SAMPLE.replace("pstn-analogue = 9450.0\n", "");
        let err = LatencyCalibration::from_toml_str(&broken).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("call_setup_ms"), "got: {msg}");
    }

    #[test]
    fn negative_duration_rejected() {
        let broken = SAMPLE.replace("digital_event = 50.0", "digital_event = -1.0");
        assert!(LatencyCalibration::from_toml_str(&broken).is_err());
    }

    #[test]
    fn toml_round_trip_preserves_values() {
        let cal = LatencyCalibration::from_toml_str(SAMPLE).unwrap();
        let out = cal.to_toml_string();
        let again = LatencyCalibration::from_toml_str(&out).unwrap();
        assert_eq!(cal, again);
    }
}
