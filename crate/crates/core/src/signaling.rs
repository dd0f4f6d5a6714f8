//! Abstract call control over heterogeneous networks: session state,
//! topology description and routing, CLI delivery, gateway conversion of
//! DTMF between in-band and out-of-band representations, and the CNAM
//! database. The discrete-event engine in [`crate::simnet`] drives these
//! types on its single logical timeline.

use crate::civ::ProfileKind;
use crate::domain::{CallerLine, PhoneNumber};
use crate::dtmf::{self, DtmfPath, DtmfSymbol, NoiseModel, TimingConfig};
use crate::time::SimTime;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

pub const TOPOLOGY_SCHEMA: &str = "civ-topology/1";

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum SignalError {
    #[error("no route between the endpoints")]
    Unroutable,
    #[error("callee is busy and has no call waiting")]
    Busy,
    #[error("invalid call state {state:?} for {op}")]
    InvalidState { op: &'static str, state: CallState },
    #[error("platform capability missing: {0}")]
    CapabilityMissing(&'static str),
    #[error("unknown endpoint {0:?}")]
    UnknownEndpoint(String),
}

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("topology parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("topology field {field}: {message}")]
    Invalid { field: String, message: String },
    #[error("io error reading topology: {0}")]
    Io(#[from] std::io::Error),
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> TopologyError {
    TopologyError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

/// The three modeled network families and how each carries DTMF.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetworkKind {
    PstnAnalogue,
    CellularCs,
    VoipSip,
}

impl NetworkKind {
    pub const ALL: [NetworkKind; 3] = [
        NetworkKind::PstnAnalogue,
        NetworkKind::CellularCs,
        NetworkKind::VoipSip,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NetworkKind::PstnAnalogue => "pstn-analogue",
            NetworkKind::CellularCs => "cellular-cs",
            NetworkKind::VoipSip => "voip-sip",
        }
    }

    /// Native DTMF representation on this network.
    pub fn dtmf_representation(self) -> DtmfPath {
        match self {
            NetworkKind::PstnAnalogue => DtmfPath::AnalogueInband,
            NetworkKind::CellularCs => DtmfPath::OutOfBand,
            NetworkKind::VoipSip => DtmfPath::DigitalEvent,
        }
    }
}

impl std::fmt::Display for NetworkKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EndpointId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SessionId(pub u32);

impl std::fmt::Display for SessionId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "s{}", self.0)
    }
}

/// Signaling state of one call leg.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CallState {
    Dialing,
    Ringing,
    Answered,
    Held,
    Ended,
}

/// One signaling leg between two endpoints. Transitions follow
/// dialing -> ringing -> {answered, ended}; answered <-> held; any -> ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallSession {
    pub id: SessionId,
    pub caller: EndpointId,
    pub callee: EndpointId,
    pub caller_line: CallerLine,
    pub callee_number: PhoneNumber,
    pub state: CallState,
    /// Network kinds along the route, caller first.
    pub path: Vec<NetworkKind>,
    pub charge_to_caller: bool,
    /// Digits appended to the dialed number after a pause, for platforms
    /// that cannot send DTMF in-call.
    pub dial_string_digits: Option<String>,
}

impl CallSession {
    pub fn ring(&mut self) -> Result<(), SignalError> {
        match self.state {
            CallState::Dialing => {
                self.state = CallState::Ringing;
                Ok(())
            }
            state => Err(SignalError::InvalidState { op: "ring", state }),
        }
    }

    pub fn answer(&mut self) -> Result<(), SignalError> {
        match self.state {
            CallState::Ringing => {
                self.state = CallState::Answered;
                self.charge_to_caller = true;
                Ok(())
            }
            state => Err(SignalError::InvalidState { op: "answer", state }),
        }
    }

    pub fn hold(&mut self) -> Result<(), SignalError> {
        match self.state {
            CallState::Answered => {
                self.state = CallState::Held;
                Ok(())
            }
            state => Err(SignalError::InvalidState { op: "hold", state }),
        }
    }

    pub fn resume(&mut self) -> Result<(), SignalError> {
        match self.state {
            CallState::Held => {
                self.state = CallState::Answered;
                Ok(())
            }
            state => Err(SignalError::InvalidState { op: "resume", state }),
        }
    }

    /// Hang up from any live state.
    pub fn end(&mut self) -> Result<(), SignalError> {
        match self.state {
            CallState::Ended => Err(SignalError::InvalidState {
                op: "end",
                state: CallState::Ended,
            }),
            _ => {
                self.state = CallState::Ended;
                Ok(())
            }
        }
    }

    /// Abandon before answer: ends the leg without any charge and entitles
    /// the callee to a missed-call record.
    pub fn abandon(&mut self) -> Result<(), SignalError> {
        match self.state {
            CallState::Dialing | CallState::Ringing => {
                self.state = CallState::Ended;
                self.charge_to_caller = false;
                Ok(())
            }
            state => Err(SignalError::InvalidState { op: "abandon", state }),
        }
    }

    pub fn is_live(&self) -> bool {
        self.state != CallState::Ended
    }
}

/// What the callee's phone logs when a call is abandoned while ringing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissedCallEvent {
    pub session: SessionId,
    pub displayed_cli: PhoneNumber,
    pub displayed_name: String,
    pub timestamp: SimTime,
}

/// A caller-name registration, optionally carrying the CIV-support flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnamRecord {
    pub number: String,
    pub registered_name: String,
    #[serde(default)]
    pub civ_flag: bool,
}

/// Shared caller-name database with a dip-fee counter; at most one record
/// per number.
#[derive(Debug, Clone, Default)]
pub struct CnamDb {
    records: BTreeMap<String, CnamRecord>,
    dips: u64,
}

impl CnamDb {
    pub fn new(records: impl IntoIterator<Item = CnamRecord>) -> Self {
        Self {
            records: records.into_iter().map(|r| (r.number.clone(), r)).collect(),
            dips: 0,
        }
    }

    /// Every query pays a dip fee, hit or miss.
    pub fn lookup(&mut self, number: &PhoneNumber) -> Option<&CnamRecord> {
        self.dips += 1;
        self.records.get(number.digits())
    }

    pub fn dip_count(&self) -> u64 {
        self.dips
    }
}

/// Line condition attached to a topology link.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LinkNoise {
    #[default]
    None,
    /// Use the SNR recorded in the latency calibration.
    Calibrated,
    AdditiveGaussian {
        snr_db: f64,
    },
}

impl LinkNoise {
    pub fn resolve(self, calibrated_snr_db: f64) -> NoiseModel {
        match self {
            LinkNoise::None => NoiseModel::None,
            LinkNoise::Calibrated => NoiseModel::AdditiveGaussian {
                snr_db: calibrated_snr_db,
            },
            LinkNoise::AdditiveGaussian { snr_db } => NoiseModel::AdditiveGaussian { snr_db },
        }
    }
}

// ---------------------------------------------------------------------------
// Topology description file
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EndpointRole {
    /// Runs the verification program, both caller and callee side.
    Civ,
    /// Ordinary phone: rings, logs missed calls, never verifies.
    Plain,
    /// Attacker-controlled endpoint.
    Adversary,
    /// Private branch exchange presenting one number for many extensions.
    Pbx,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub id: String,
    pub number: String,
    #[serde(default)]
    pub name: String,
    pub network: NetworkKind,
    pub profile: ProfileKind,
    #[serde(default = "default_role")]
    pub role: EndpointRole,
    /// Challenge length this endpoint generates and expects.
    #[serde(default = "default_n")]
    pub challenge_len: usize,
    /// Numbers verified even when the incoming call carries no flag.
    #[serde(default)]
    pub local_contacts: Vec<String>,
    /// Line presented on outbound calls when it differs from the owned
    /// number (legitimate spoofing, e.g. showing one's mobile number).
    #[serde(default)]
    pub present_number: Option<String>,
    /// Incoming calls to this endpoint ring at the named endpoint instead.
    #[serde(default)]
    pub forward_to: Option<String>,
    /// This endpoint is an extension behind the named PBX endpoint.
    #[serde(default)]
    pub pbx_host: Option<String>,
}

fn default_role() -> EndpointRole {
    EndpointRole::Civ
}

fn default_n() -> usize {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkConfig {
    pub a: String,
    pub b: String,
    #[serde(default)]
    pub noise: LinkNoise,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CnamConfig {
    /// Whether terminating delivery consults the CNAM database.
    #[serde(default)]
    pub use_cnam: bool,
    #[serde(default)]
    pub records: Vec<CnamRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Topology {
    pub schema: String,
    pub endpoints: Vec<EndpointConfig>,
    /// Explicit links; when `mesh` is set every endpoint pair is linked.
    #[serde(default)]
    pub links: Vec<LinkConfig>,
    #[serde(default)]
    pub mesh: bool,
    /// Noise applied to mesh-generated links that touch an analogue network.
    #[serde(default)]
    pub mesh_noise: LinkNoise,
    #[serde(default)]
    pub cnam: CnamConfig,
}

impl Topology {
    pub fn from_toml_str(text: &str) -> Result<Self, TopologyError> {
        let topo: Topology = toml::from_str(text)?;
        topo.validate()?;
        Ok(topo)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, TopologyError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        if !self.schema.starts_with("civ-topology/") {
            return Err(invalid("schema", format!("unknown schema {:?}", self.schema)));
        }
        if self.endpoints.is_empty() {
            return Err(invalid("endpoints", "at least one endpoint required"));
        }
        let mut ids = BTreeMap::new();
        let mut numbers = BTreeMap::new();
        for (i, ep) in self.endpoints.iter().enumerate() {
            if ids.insert(ep.id.clone(), i).is_some() {
                return Err(invalid("endpoints.id", format!("duplicate id {:?}", ep.id)));
            }
            if numbers.insert(ep.number.clone(), i).is_some() {
                return Err(invalid(
                    "endpoints.number",
                    format!("duplicate number {:?}", ep.number),
                ));
            }
            PhoneNumber::new(&ep.number)
                .map_err(|e| invalid(format!("endpoints[{}].number", i), e.to_string()))?;
            CallerLine::parse(&ep.number, &ep.name)
                .map_err(|e| invalid(format!("endpoints[{}].name", i), e.to_string()))?;
            if ep.challenge_len == 0 || ep.challenge_len > 15 {
                return Err(invalid(
                    format!("endpoints[{}].challenge_len", i),
                    "must be 1-15",
                ));
            }
            if let Some(p) = &ep.present_number {
                PhoneNumber::new(p).map_err(|e| {
                    invalid(format!("endpoints[{}].present_number", i), e.to_string())
                })?;
            }
        }
        for (i, ep) in self.endpoints.iter().enumerate() {
            if let Some(fwd) = &ep.forward_to {
                if !ids.contains_key(fwd) {
                    return Err(invalid(
                        format!("endpoints[{}].forward_to", i),
                        format!("unknown endpoint {fwd:?}"),
                    ));
                }
                let target = &self.endpoints[ids[fwd]];
                if target.forward_to.is_some() {
                    return Err(invalid(
                        format!("endpoints[{}].forward_to", i),
                        "forwarding chains are not supported",
                    ));
                }
            }
            if let Some(host) = &ep.pbx_host {
                match ids.get(host) {
                    Some(&h) if self.endpoints[h].role == EndpointRole::Pbx => {}
                    Some(_) => {
                        return Err(invalid(
                            format!("endpoints[{}].pbx_host", i),
                            format!("{host:?} is not a pbx endpoint"),
                        ))
                    }
                    None => {
                        return Err(invalid(
                            format!("endpoints[{}].pbx_host", i),
                            format!("unknown endpoint {host:?}"),
                        ))
                    }
                }
            }
        }
        for (i, link) in self.links.iter().enumerate() {
            for end in [&link.a, &link.b] {
                if !ids.contains_key(end) {
                    return Err(invalid(
                        format!("links[{}]", i),
                        format!("unknown endpoint {end:?}"),
                    ));
                }
            }
            if link.a == link.b {
                return Err(invalid(format!("links[{}]", i), "self links not allowed"));
            }
        }
        Ok(())
    }

    pub fn endpoint_index(&self, id: &str) -> Result<EndpointId, SignalError> {
        self.endpoints
            .iter()
            .position(|e| e.id == id)
            .map(|i| EndpointId(i as u32))
            .ok_or_else(|| SignalError::UnknownEndpoint(id.to_string()))
    }

    pub fn endpoint(&self, id: EndpointId) -> &EndpointConfig {
        &self.endpoints[id.0 as usize]
    }

    pub fn endpoint_by_number(&self, number: &str) -> Option<EndpointId> {
        self.endpoints
            .iter()
            .position(|e| e.number == number)
            .map(|i| EndpointId(i as u32))
    }

    /// Delivery target for calls to an endpoint, following one forwarding
    /// hop if configured.
    pub fn delivery_target(&self, id: EndpointId) -> EndpointId {
        match &self.endpoint(id).forward_to {
            Some(fwd) => self.endpoint_index(fwd).expect("validated"),
            None => id,
        }
    }

    fn linked(&self, a: EndpointId, b: EndpointId) -> Option<LinkNoise> {
        if self.mesh && a != b {
            return Some(self.mesh_noise);
        }
        let (an, bn) = (&self.endpoint(a).id, &self.endpoint(b).id);
        self.links
            .iter()
            .find(|l| (&l.a == an && &l.b == bn) || (&l.a == bn && &l.b == an))
            .map(|l| l.noise)
    }

    /// Shortest endpoint path (BFS over links), caller first.
    pub fn route(&self, from: EndpointId, to: EndpointId) -> Result<Route, SignalError> {
        if from == to {
            return Err(SignalError::Unroutable);
        }
        let n = self.endpoints.len();
        let mut prev: Vec<Option<EndpointId>> = vec![None; n];
        let mut seen = vec![false; n];
        let mut queue = std::collections::VecDeque::new();
        seen[from.0 as usize] = true;
        queue.push_back(from);
        while let Some(cur) = queue.pop_front() {
            if cur == to {
                break;
            }
            for i in 0..n {
                let cand = EndpointId(i as u32);
                if !seen[i] && self.linked(cur, cand).is_some() {
                    seen[i] = true;
                    prev[i] = Some(cur);
                    queue.push_back(cand);
                }
            }
        }
        if !seen[to.0 as usize] {
            return Err(SignalError::Unroutable);
        }
        let mut hops = vec![to];
        while let Some(p) = prev[hops.last().unwrap().0 as usize] {
            hops.push(p);
        }
        hops.reverse();
        let legs = hops
            .windows(2)
            .map(|w| Leg {
                from_network: self.endpoint(w[0]).network,
                to_network: self.endpoint(w[1]).network,
                noise: self.linked(w[0], w[1]).unwrap_or_default(),
            })
            .collect();
        Ok(Route { hops, legs })
    }
}

/// One link along a route.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Leg {
    pub from_network: NetworkKind,
    pub to_network: NetworkKind,
    pub noise: LinkNoise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub hops: Vec<EndpointId>,
    pub legs: Vec<Leg>,
}

impl Route {
    pub fn network_kinds(&self, topo: &Topology) -> Vec<NetworkKind> {
        let mut kinds: Vec<NetworkKind> =
            self.hops.iter().map(|&h| topo.endpoint(h).network).collect();
        kinds.dedup();
        kinds
    }

    /// Transport class that dominates DTMF timing on this route: any
    /// analogue leg makes it analogue, otherwise any cellular leg makes it
    /// out-of-band, otherwise pure digital events.
    pub fn dtmf_path_kind(&self) -> DtmfPath {
        let mut kind = DtmfPath::DigitalEvent;
        for leg in &self.legs {
            for net in [leg.from_network, leg.to_network] {
                match net {
                    NetworkKind::PstnAnalogue => return DtmfPath::AnalogueInband,
                    NetworkKind::CellularCs => kind = DtmfPath::OutOfBand,
                    NetworkKind::VoipSip => {}
                }
            }
        }
        kind
    }

    /// Number of representation changes gateways perform along the route.
    pub fn gateway_conversions(&self) -> usize {
        self.legs
            .iter()
            .filter(|l| {
                l.from_network.dtmf_representation() != l.to_network.dtmf_representation()
            })
            .count()
    }
}

/// Carries a symbol sequence across one route. Analogue legs re-synthesize
/// the tones, pass them through the leg's noise model and decode on the far
/// side, so a noisy line can lose or corrupt digits. Digital and out-of-band
/// legs copy the symbol values losslessly.
pub fn gateway_transport<R: Rng + ?Sized>(
    symbols: &[DtmfSymbol],
    route: &Route,
    timing: &TimingConfig,
    calibrated_snr_db: f64,
    rng: &mut R,
) -> Vec<DtmfSymbol> {
    let mut current = symbols.to_vec();
    for leg in &route.legs {
        let analogue = leg.from_network == NetworkKind::PstnAnalogue
            || leg.to_network == NetworkKind::PstnAnalogue;
        if !analogue {
            continue;
        }
        let noise = leg.noise.resolve(calibrated_snr_db);
        if noise.is_none() {
            continue; // clean analogue lines are exact by construction
        }
        let audio = dtmf::synthesize(&current, timing, dtmf::DEFAULT_SAMPLE_RATE);
        let noisy = dtmf::apply_noise(&audio, &noise, rng);
        current = dtmf::decode(&noisy, timing);
    }
    current
}
