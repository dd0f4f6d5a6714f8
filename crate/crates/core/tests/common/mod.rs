//! Shared builders for protocol-level tests: small topologies constructed in
//! code and the hand-checked calibration used throughout.

use civ_core::calibration::LatencyCalibration;
use civ_core::civ::ProfileKind;
use civ_core::signaling::{
    CnamConfig, EndpointConfig, EndpointRole, LinkNoise, NetworkKind, Topology,
};

pub const CALIBRATION: &str = r#"
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

pub fn calibration() -> LatencyCalibration {
    LatencyCalibration::from_toml_str(CALIBRATION).unwrap()
}

pub fn network_for(profile: ProfileKind) -> NetworkKind {
    match profile {
        ProfileKind::Sip => NetworkKind::VoipSip,
        ProfileKind::Cellular => NetworkKind::CellularCs,
        ProfileKind::LandlineTruecall => NetworkKind::PstnAnalogue,
    }
}

pub fn endpoint(id: &str, number: &str, name: &str, profile: ProfileKind) -> EndpointConfig {
    EndpointConfig {
        id: id.to_string(),
        number: number.to_string(),
        name: name.to_string(),
        network: network_for(profile),
        profile,
        role: EndpointRole::Civ,
        challenge_len: 4,
        local_contacts: Vec::new(),
        present_number: None,
        forward_to: None,
        pbx_host: None,
    }
}

pub fn topology(endpoints: Vec<EndpointConfig>) -> Topology {
    Topology {
        schema: "civ-topology/1".to_string(),
        endpoints,
        links: Vec::new(),
        mesh: true,
        mesh_noise: LinkNoise::None,
        cnam: CnamConfig::default(),
    }
}

/// Honest caller "alice" and verifying callee "bob" on a clean full mesh.
pub fn pair_topology(caller: ProfileKind, callee: ProfileKind) -> Topology {
    topology(vec![
        endpoint("alice", "5551230001", "Alice*", caller),
        endpoint("bob", "5551230002", "Bob*", callee),
    ])
}

/// Adversary "eve", verifying callee "bob", and the spoofed victim "alice"
/// who runs the verification program herself.
pub fn attack_topology() -> Topology {
    let mut eve = endpoint("eve", "5551230009", "Eve*", ProfileKind::Sip);
    eve.role = EndpointRole::Adversary;
    topology(vec![
        endpoint("alice", "5551230001", "Alice*", ProfileKind::Sip),
        endpoint("bob", "5551230002", "Bob*", ProfileKind::Sip),
        eve,
    ])
}
