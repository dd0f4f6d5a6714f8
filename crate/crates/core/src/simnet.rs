//! Discrete-event simulation engine: a single logical timeline per run on
//! which the signaling layer and the verification protocol execute, plus
//! scenario/attack drivers, latency metrics with exact four-component
//! breakdowns, call detail records and line-oriented traces.
//!
//! Runs are deterministic: identical (topology, scenario, calibration, seed)
//! inputs produce byte-identical traces. Batch drivers fan independent runs
//! out over threads; nothing mutable is shared between runs.

use crate::batch;
use crate::calibration::LatencyCalibration;
use crate::civ::{
    extract_pbx_index, pbx_caller_name, recognize_verification_call, MissedCallClass,
    PbxIndex, PbxState, PlatformProfile, Variant, CHALLENGE_TIMEOUT,
};
use crate::domain::{
    generate_challenge, CallerLine, Challenge, PhoneNumber, VerificationStatus,
};
use crate::dtmf::transmission_time;
use crate::signaling::{
    gateway_transport, CallSession, CallState, CnamDb, EndpointConfig, EndpointId, EndpointRole,
    MissedCallEvent, Route, SessionId, SignalError, Topology,
};
use crate::time::{SimDuration, SimTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use thiserror::Error;

pub const SCENARIO_SCHEMA: &str = "civ-scenario/1";

/// Safety valve against runaway event loops; honest runs use a few dozen
/// events, a full DoS campaign a few thousand.
const MAX_EVENTS: u64 = 50_000_000;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("scenario field {field}: {message}")]
    Invalid { field: String, message: String },
    #[error("io error reading scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

// ---------------------------------------------------------------------------
// Scenario description
// ---------------------------------------------------------------------------

/// Adversary behavior for attack scenarios. The engine enforces the
/// capability wall: no strategy ever receives a challenge addressed to a
/// number outside the adversary's owned set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "kebab-case")]
pub enum AdversaryStrategy {
    /// Present the victim's number with a CIV flag and answer the challenge
    /// with uniformly random guessed digits.
    SpoofAndGuess {
        victim: String,
        #[serde(default = "default_guess_len")]
        guess_digits: usize,
    },
    /// Present the victim's number without any CIV flag so no verification
    /// runs at all.
    Downgrade { victim: String },
    /// Leverage the callee's verifier to bounce abandoned challenge calls
    /// off an uninvolved victim.
    ReflectedDos {
        victim: String,
        #[serde(default = "default_dos_calls")]
        calls: u32,
        /// Spacing between consecutive spoofed calls, milliseconds.
        #[serde(default = "default_dos_interval")]
        interval_ms: u64,
    },
}

fn default_guess_len() -> usize {
    4
}
fn default_dos_calls() -> u32 {
    100
}
fn default_dos_interval() -> u64 {
    35_000
}

/// Deliveries the test harness can suppress to exercise timeout paths.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FaultInjection {
    #[serde(default)]
    pub drop_challenge: bool,
    #[serde(default)]
    pub drop_response: bool,
}

impl FaultInjection {
    pub const NONE: FaultInjection = FaultInjection {
        drop_challenge: false,
        drop_response: false,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub schema: String,
    /// Topology file this scenario runs on, relative to the scenario file.
    #[serde(default)]
    pub topology: String,
    pub caller: String,
    pub callee: String,
    #[serde(default)]
    pub attack: Option<AdversaryStrategy>,
    #[serde(default)]
    pub variant_override: Option<Variant>,
    /// Challenge length override applied to both endpoints.
    #[serde(default)]
    pub n_override: Option<usize>,
    #[serde(default = "default_repeat")]
    pub repeat: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub fault: FaultInjection,
    /// Additional honest callers kicked off at the same instant, all dialing
    /// the same callee; exercises verification queueing.
    #[serde(default)]
    pub extra_callers: Vec<String>,
}

fn default_repeat() -> u32 {
    1
}

impl Scenario {
    pub fn honest(caller: &str, callee: &str, seed: u64) -> Self {
        Self {
            schema: SCENARIO_SCHEMA.to_string(),
            topology: String::new(),
            caller: caller.to_string(),
            callee: callee.to_string(),
            attack: None,
            variant_override: None,
            n_override: None,
            repeat: 1,
            seed,
            fault: FaultInjection::NONE,
            extra_callers: Vec::new(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let sc: Scenario = toml::from_str(text)?;
        if !sc.schema.starts_with("civ-scenario/") {
            return Err(invalid("schema", format!("unknown schema {:?}", sc.schema)));
        }
        if sc.repeat == 0 {
            return Err(invalid("repeat", "must be >= 1"));
        }
        if let Some(n) = sc.n_override {
            if n == 0 || n > 15 {
                return Err(invalid("n_override", "must be 1-15"));
            }
        }
        Ok(sc)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ScenarioError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

/// True when the pair of profiles can physically execute the variant. The
/// 2-setup forms keep the initial call alive, which requires call waiting on
/// both sides: the callee to hold it, the caller to still receive the
/// verification call on an engaged line. CLI challenges only fit challenge
/// lengths that a non-dialable short number can carry.
pub fn variant_supported(
    variant: Variant,
    caller: &PlatformProfile,
    callee: &PlatformProfile,
    n: usize,
) -> bool {
    let both_wait = caller.has_call_waiting && callee.has_call_waiting;
    match variant {
        Variant::CliDtmf => {
            callee.can_modify_cli && caller.can_send_incall_dtmf && both_wait && n <= 4
        }
        Variant::CliCli => callee.can_modify_cli && caller.can_modify_cli && both_wait && n <= 4,
        Variant::DtmfDtmf2Setup => caller.can_send_incall_dtmf && both_wait,
        Variant::DtmfDtmf3Setup => true,
    }
}

/// First supported variant in preference order: cli-dtmf, then cli-cli, then
/// the 2-setup DTMF form, then the universal 3-setup form.
pub fn preferred_variant(caller: &PlatformProfile, callee: &PlatformProfile, n: usize) -> Variant {
    [
        Variant::CliDtmf,
        Variant::CliCli,
        Variant::DtmfDtmf2Setup,
        Variant::DtmfDtmf3Setup,
    ]
    .into_iter()
    .find(|&v| variant_supported(v, caller, callee, n))
    .expect("dtmf-dtmf-3setup is always supported")
}

// ---------------------------------------------------------------------------
// Events, trace, CDR
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum EventKind {
    Kickoff { endpoint: EndpointId, step: u32 },
    Ring { session: SessionId },
    Busy { session: SessionId },
    Missed { session: SessionId },
    Answered { session: SessionId },
    DtmfDelivered { session: SessionId, to: EndpointId, digits: String },
    DtmfAck { session: SessionId, to: EndpointId },
    HangupSeen { session: SessionId, to: EndpointId },
    Timer { endpoint: EndpointId, token: u64 },
    PbxForward { to: EndpointId, event: MissedCallEvent },
}

#[derive(Debug)]
struct Scheduled {
    at: SimTime,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// One line of the run trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub at: SimTime,
    pub endpoint: String,
    pub event: String,
    pub detail: String,
}

pub fn trace_to_string(records: &[TraceRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!(
            "{} {:<12} {:<22} {}\n",
            r.at, r.endpoint, r.event, r.detail
        ));
    }
    out
}

/// Call detail record, one per placed call including abandoned ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdrEntry {
    pub session: SessionId,
    pub caller: String,
    pub callee: String,
    pub presented_number: String,
    pub presented_name: String,
    pub dialed_number: String,
    pub placed_at: SimTime,
    pub ringing_at: Option<SimTime>,
    pub answered_at: Option<SimTime>,
    pub ended_at: Option<SimTime>,
    pub abandoned: bool,
}

// ---------------------------------------------------------------------------
// Verification records and metrics
// ---------------------------------------------------------------------------

/// The four measured components of one verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Breakdown {
    pub verification_call_setup: SimDuration,
    pub challenge_transmit: SimDuration,
    pub response_call_setup: SimDuration,
    pub response_transmit: SimDuration,
}

impl Breakdown {
    pub fn total(&self) -> SimDuration {
        self.verification_call_setup
            + self.challenge_transmit
            + self.response_call_setup
            + self.response_transmit
    }

    pub fn components(&self) -> [(&'static str, SimDuration); 4] {
        [
            ("verification-call-setup", self.verification_call_setup),
            ("challenge-transmit", self.challenge_transmit),
            ("response-call-setup", self.response_call_setup),
            ("response-transmit", self.response_transmit),
        ]
    }
}

/// Everything measured about one verification at one callee.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationRecord {
    pub verifier: String,
    pub initial_session: SessionId,
    pub variant: Option<Variant>,
    pub outcome: VerificationStatus,
    pub challenge: String,
    pub started: SimTime,
    pub rang: Option<SimTime>,
    pub channel_ready: Option<SimTime>,
    pub challenge_received: Option<SimTime>,
    pub response_channel_ready: Option<SimTime>,
    pub response_received: Option<SimTime>,
    pub timed_out: bool,
}

impl VerificationRecord {
    pub fn total_added_latency(&self) -> SimDuration {
        match self.rang {
            Some(r) => r.since(self.started),
            None => SimDuration::ZERO,
        }
    }

    /// Milestone-telescoped components; they sum to the total by
    /// construction, with any missing milestone collapsing its component to
    /// zero and the tail absorbing waits (timeouts).
    pub fn breakdown(&self) -> Breakdown {
        let m0 = self.started;
        let m1 = self.channel_ready.unwrap_or(m0);
        let m2 = self.challenge_received.unwrap_or(m1);
        let m3 = self.response_channel_ready.unwrap_or(m2);
        let m4 = self.rang.unwrap_or(m3);
        Breakdown {
            verification_call_setup: m1.since(m0),
            challenge_transmit: m2.since(m1),
            response_call_setup: m3.since(m2),
            response_transmit: m4.since(m3),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BreakdownError {
    #[error("no latency breakdown: verification was not attempted")]
    NotApplicable,
}

/// Named four-component breakdown of a completed run.
pub fn latency_breakdown(
    metrics: &RunMetrics,
) -> Result<[(&'static str, SimDuration); 4], BreakdownError> {
    if metrics.outcome == VerificationStatus::NotAttempted {
        return Err(BreakdownError::NotApplicable);
    }
    Ok(metrics.breakdown.components())
}

/// A ring presented to the human at an endpoint: the call always connects,
/// annotated with the verification status.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingRecord {
    pub at: SimTime,
    pub endpoint: String,
    pub session: SessionId,
    pub displayed_number: String,
    pub displayed_name: String,
    /// None when the endpoint runs no verification program.
    pub status: Option<VerificationStatus>,
}

impl RingRecord {
    /// The UI warning shown for any non-verified outcome.
    pub fn shows_unverified_warning(&self) -> bool {
        matches!(
            self.status,
            Some(VerificationStatus::NotVerified) | Some(VerificationStatus::NotAttempted)
        )
    }
}

/// Per-run results: the primary verification outcome, its exact latency
/// accounting, and the engine-level logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub outcome: VerificationStatus,
    pub variant: Option<Variant>,
    pub total_added_latency: SimDuration,
    pub breakdown: Breakdown,
    pub call_setups: u32,
    pub charges: BTreeMap<String, u64>,
    pub cnam_dips: u64,
    pub rings: Vec<RingRecord>,
    pub filtered_unsolicited: BTreeMap<String, u64>,
    pub missed_calls: BTreeMap<String, u64>,
    pub verifications: Vec<VerificationRecord>,
    pub cdr: Vec<CdrEntry>,
}

// ---------------------------------------------------------------------------
// Agents
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Signal {
    Kickoff { step: u32 },
    IncomingRing { session: SessionId },
    RingbackStarted { session: SessionId },
    PeerAnswered { session: SessionId },
    PeerBusy { session: SessionId },
    MissedCall(MissedCallEvent),
    DtmfReceived { session: SessionId, digits: String },
    DtmfDeliveredAck { session: SessionId },
    PeerHungUp { session: SessionId },
    Timer { token: u64 },
    PbxChallenge(MissedCallEvent),
}

/// Caller-side state: one outbound flagged call awaiting verification.
#[derive(Debug, Clone)]
struct OutboundCall {
    initial: SessionId,
    dialed_number: String,
    awaiting: bool,
    /// Verification call we auto-answered to receive a DTMF challenge.
    inbound_ver: Option<SessionId>,
    /// Response call placed for the 3-setup flows.
    response_call: Option<SessionId>,
    response_digits: Option<String>,
}

/// Callee-side state: one verification in progress.
#[derive(Debug, Clone)]
struct ActiveVerification {
    initial: SessionId,
    displayed_number: String,
    variant: Variant,
    challenge: Challenge,
    held_initial: bool,
    ver_session: Option<SessionId>,
    /// Inbound session expected to carry the response (3-setup DTMF).
    response_session: Option<SessionId>,
    timer_token: u64,
    record: usize,
}

#[derive(Debug)]
enum Agent {
    Civ(CivAgent),
    Plain,
    Adversary(AdversaryAgent),
    Pbx(PbxAgent),
}

#[derive(Debug)]
struct CivAgent {
    ep: EndpointId,
    n: usize,
    local_contacts: Vec<String>,
    variant_override: Option<Variant>,
    rng: ChaCha8Rng,
    outbound: Option<OutboundCall>,
    verify: Option<ActiveVerification>,
    queued: VecDeque<SessionId>,
    next_timer: u64,
}

#[derive(Debug)]
struct AdversaryAgent {
    ep: EndpointId,
    strategy: AdversaryStrategy,
    target: String,
    rng: ChaCha8Rng,
    session: Option<SessionId>,
    guess_timer: u64,
}

#[derive(Debug)]
struct PbxAgent {
    ep: EndpointId,
    state: PbxState,
    index_session: BTreeMap<u32, PbxIndex>,
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

struct EndpointState {
    charges: u64,
    filtered_unsolicited: u64,
    missed_calls: u64,
}

pub struct Engine<'a> {
    topo: &'a Topology,
    cal: &'a LatencyCalibration,
    profiles: Vec<PlatformProfile>,
    scenario_fault: FaultInjection,
    scenario_callee_number: String,
    clock: SimTime,
    seq: u64,
    events_processed: u64,
    queue: BinaryHeap<Reverse<Scheduled>>,
    sessions: Vec<CallSession>,
    routes: Vec<Route>,
    displayed: Vec<Option<CallerLine>>,
    ring_at: Vec<Option<SimTime>>,
    endpoints: Vec<EndpointState>,
    agents: Vec<Option<Agent>>,
    cnam: CnamDb,
    cdr: Vec<CdrEntry>,
    rings: Vec<RingRecord>,
    records: Vec<VerificationRecord>,
    trace: Option<Vec<TraceRecord>>,
    rng: ChaCha8Rng,
}

impl<'a> Engine<'a> {
    pub fn new(
        topo: &'a Topology,
        cal: &'a LatencyCalibration,
        seed: u64,
        with_trace: bool,
    ) -> Self {
        let profiles = topo
            .endpoints
            .iter()
            .map(|e| PlatformProfile::builtin(e.profile, cal))
            .collect();
        let endpoints = topo
            .endpoints
            .iter()
            .map(|_| EndpointState {
                charges: 0,
                filtered_unsolicited: 0,
                missed_calls: 0,
            })
            .collect();
        Self {
            topo,
            cal,
            profiles,
            scenario_fault: FaultInjection::NONE,
            scenario_callee_number: String::new(),
            clock: SimTime::ZERO,
            seq: 0,
            events_processed: 0,
            queue: BinaryHeap::new(),
            sessions: Vec::new(),
            routes: Vec::new(),
            displayed: Vec::new(),
            ring_at: Vec::new(),
            endpoints,
            agents: topo.endpoints.iter().map(|_| None).collect(),
            cnam: CnamDb::new(topo.cnam.records.iter().cloned()),
            cdr: Vec::new(),
            rings: Vec::new(),
            records: Vec::new(),
            trace: with_trace.then(Vec::new),
            rng: ChaCha8Rng::seed_from_u64(batch::derive_seed(seed, 0)),
        }
    }

    fn schedule(&mut self, delay: SimDuration, kind: EventKind) {
        let at = self.clock + delay;
        self.queue.push(Reverse(Scheduled {
            at,
            seq: self.seq,
            kind,
        }));
        self.seq += 1;
    }

    fn trace(&mut self, endpoint: EndpointId, event: &str, detail: String) {
        if let Some(trace) = &mut self.trace {
            trace.push(TraceRecord {
                at: self.clock,
                endpoint: self.topo.endpoint(endpoint).id.clone(),
                event: event.to_string(),
                detail,
            });
        }
    }

    fn profile(&self, ep: EndpointId) -> &PlatformProfile {
        &self.profiles[ep.0 as usize]
    }

    fn session(&self, id: SessionId) -> &CallSession {
        &self.sessions[id.0 as usize]
    }

    fn session_mut(&mut self, id: SessionId) -> &mut CallSession {
        &mut self.sessions[id.0 as usize]
    }

    fn peer_of(&self, id: SessionId, ep: EndpointId) -> EndpointId {
        let s = self.session(id);
        if s.caller == ep {
            self.topo.delivery_target(s.callee)
        } else {
            s.caller
        }
    }

    /// The endpoint a session's inbound events are delivered to (callee
    /// after forwarding).
    fn inbound_target(&self, id: SessionId) -> EndpointId {
        self.topo.delivery_target(self.session(id).callee)
    }

    fn endpoint_busy(&self, ep: EndpointId) -> bool {
        if self.profile(ep).has_call_waiting {
            return false;
        }
        self.sessions.iter().any(|s| {
            s.is_live() && (s.caller == ep || self.topo.delivery_target(s.callee) == ep)
        })
    }

    fn may_present(&self, ep: EndpointId, number: &str) -> bool {
        let cfg = self.topo.endpoint(ep);
        if cfg.number == number {
            return true;
        }
        if let Some(host) = &cfg.pbx_host {
            if self.topo.endpoints[self.topo.endpoint_index(host).unwrap().0 as usize].number
                == number
            {
                return true;
            }
        }
        self.profile(ep).can_modify_cli
    }

    fn jittered(&mut self, d: SimDuration) -> SimDuration {
        let pct = self.cal.jitter.day_night_pct;
        if pct <= 0.0 {
            return d;
        }
        let u: f64 = self.rng.random_range(-1.0..=1.0);
        SimDuration::from_ms_f64(d.as_ms_f64() * (1.0 + pct / 100.0 * u))
    }

    /// Places a call. The presented line is delivered unmodified end to end;
    /// the platform gate is whether this endpoint may present a line it does
    /// not own. Returns the new session.
    pub fn place_call(
        &mut self,
        caller: EndpointId,
        to_number: &str,
        presented: CallerLine,
        dial_string_digits: Option<String>,
    ) -> Result<SessionId, SignalError> {
        if !self.may_present(caller, presented.number.digits()) {
            return Err(SignalError::CapabilityMissing("modifying the CLI"));
        }
        let callee = self
            .topo
            .endpoint_by_number(to_number)
            .ok_or(SignalError::Unroutable)?;
        let target = self.topo.delivery_target(callee);
        let route = self.topo.route(caller, target)?;
        let busy = self.endpoint_busy(target);
        let id = SessionId(self.sessions.len() as u32);
        let origin = self.topo.endpoint(caller).network;
        let dest = self.topo.endpoint(target).network;
        let mut setup = self.jittered(self.cal.call_setup(origin, dest));
        if self.topo.cnam.use_cnam {
            setup += self.cal.cnam_lookup();
        }
        let session = CallSession {
            id,
            caller,
            callee,
            caller_line: presented.clone(),
            callee_number: PhoneNumber::new(to_number)
                .map_err(|_| SignalError::UnknownEndpoint(to_number.to_string()))?,
            state: CallState::Dialing,
            path: route.network_kinds(self.topo),
            charge_to_caller: false,
            dial_string_digits,
        };
        self.cdr.push(CdrEntry {
            session: id,
            caller: self.topo.endpoint(caller).id.clone(),
            callee: self.topo.endpoint(target).id.clone(),
            presented_number: presented.number.digits().to_string(),
            presented_name: presented.name.clone(),
            dialed_number: to_number.to_string(),
            placed_at: self.clock,
            ringing_at: None,
            answered_at: None,
            ended_at: None,
            abandoned: false,
        });
        self.sessions.push(session);
        self.routes.push(route);
        self.displayed.push(None);
        self.ring_at.push(None);
        self.trace(
            caller,
            "place_call",
            format!("{id} to={to_number} cli={} name={:?}", presented.number, presented.name),
        );
        if busy {
            self.schedule(setup, EventKind::Busy { session: id });
        } else {
            self.ring_at[id.0 as usize] = Some(self.clock + setup);
            self.schedule(setup, EventKind::Ring { session: id });
        }
        Ok(id)
    }

    /// Answer an inbound ringing session at its delivery target.
    pub fn answer(&mut self, ep: EndpointId, id: SessionId) -> Result<(), SignalError> {
        self.session_mut(id).answer()?;
        self.cdr[id.0 as usize].answered_at = Some(self.clock);
        let caller = self.session(id).caller;
        self.endpoints[caller.0 as usize].charges += 1;
        self.trace(ep, "answer", format!("{id}"));
        self.schedule(SimDuration::ZERO, EventKind::Answered { session: id });
        Ok(())
    }

    pub fn hold(&mut self, ep: EndpointId, id: SessionId) -> Result<(), SignalError> {
        if !self.profile(ep).has_call_waiting {
            return Err(SignalError::CapabilityMissing("call waiting"));
        }
        self.session_mut(id).hold()?;
        self.trace(ep, "hold", format!("{id}"));
        Ok(())
    }

    pub fn resume(&mut self, ep: EndpointId, id: SessionId) -> Result<(), SignalError> {
        if !self.profile(ep).has_call_waiting {
            return Err(SignalError::CapabilityMissing("call waiting"));
        }
        self.session_mut(id).resume()?;
        self.trace(ep, "resume", format!("{id}"));
        Ok(())
    }

    /// Abandon an unanswered call: no charge, one missed-call record at the
    /// callee once the teardown propagates.
    pub fn abandon(&mut self, ep: EndpointId, id: SessionId) -> Result<(), SignalError> {
        self.session_mut(id).abandon()?;
        self.cdr[id.0 as usize].ended_at = Some(self.clock);
        self.cdr[id.0 as usize].abandoned = true;
        self.trace(ep, "abandon", format!("{id}"));
        // CLI delivery completes at ring time even if the caller hung up
        // while the call was still dialing.
        let ring_at = self.ring_at[id.0 as usize].unwrap_or(self.clock);
        let deliver_at = ring_at.max(self.clock) + self.cal.missed_call_extra();
        self.queue.push(Reverse(Scheduled {
            at: deliver_at,
            seq: self.seq,
            kind: EventKind::Missed { session: id },
        }));
        self.seq += 1;
        Ok(())
    }

    /// Hang up a live session; the peer learns immediately.
    pub fn hangup(&mut self, ep: EndpointId, id: SessionId) -> Result<(), SignalError> {
        self.session_mut(id).end()?;
        self.cdr[id.0 as usize].ended_at = Some(self.clock);
        self.trace(ep, "hangup", format!("{id}"));
        let peer = self.peer_of(id, ep);
        self.schedule(SimDuration::ZERO, EventKind::HangupSeen { session: id, to: peer });
        Ok(())
    }

    /// Transmit digits during an established call. Delivery time is the
    /// path's affine transmission time plus the receiver's per-digit
    /// recognition delay and any gateway conversions; symbols additionally
    /// pass through the signal-level transport, so noisy analogue legs can
    /// corrupt them.
    pub fn send_dtmf(
        &mut self,
        ep: EndpointId,
        id: SessionId,
        digits: &str,
    ) -> Result<(), SignalError> {
        if !self.profile(ep).can_send_incall_dtmf {
            return Err(SignalError::CapabilityMissing("in-call DTMF"));
        }
        let state = self.session(id).state;
        if state != CallState::Answered {
            return Err(SignalError::InvalidState { op: "send_dtmf", state });
        }
        let to = self.peer_of(id, ep);
        self.trace(ep, "send_dtmf", format!("{id} digits={digits}"));
        self.transmit_dtmf(ep, id, to, digits, SimDuration::ZERO);
        Ok(())
    }

    fn transmit_dtmf(
        &mut self,
        from: EndpointId,
        id: SessionId,
        to: EndpointId,
        digits: &str,
        lead_in: SimDuration,
    ) {
        let route = &self.routes[id.0 as usize];
        let kind = route.dtmf_path_kind();
        let timing = self.profile(from).dtmf_timing;
        let costs = self.cal.path_costs(kind);
        let n = digits.len();
        let mut delay = lead_in + transmission_time(n, kind, &timing, &costs);
        delay += self.profile(to).dtmf_recognition_delay * n as u64;
        delay += self.cal.gateway_conversion() * route.gateway_conversions() as u64;
        let symbols = crate::dtmf::symbols_from_str(digits).unwrap_or_default();
        let snr = self.cal.noise.analogue_snr_db;
        let route = self.routes[id.0 as usize].clone();
        let delivered = gateway_transport(&symbols, &route, &timing, snr, &mut self.rng);
        let delivered = crate::dtmf::symbols_to_string(&delivered);
        // Ack at the sender is inserted first so a holder can resume the
        // initial call before the receiver reacts at the same instant.
        self.schedule(delay, EventKind::DtmfAck { session: id, to: from });
        self.schedule(
            delay,
            EventKind::DtmfDelivered { session: id, to, digits: delivered },
        );
    }

    /// The phone at `ep` finally rings through to the human; in every flow,
    /// including failed or skipped verification, some live leg reaches this.
    pub fn ring_user(
        &mut self,
        ep: EndpointId,
        session: SessionId,
        status: Option<VerificationStatus>,
    ) {
        let line = self.displayed[session.0 as usize]
            .clone()
            .unwrap_or_else(|| self.session(session).caller_line.clone());
        self.trace(
            ep,
            "ring_user",
            format!("{session} cli={} status={status:?}", line.number),
        );
        self.rings.push(RingRecord {
            at: self.clock,
            endpoint: self.topo.endpoint(ep).id.clone(),
            session,
            displayed_number: line.number.digits().to_string(),
            displayed_name: line.name,
            status,
        });
    }

    fn schedule_timer(&mut self, ep: EndpointId, token: u64, delay: SimDuration) {
        self.schedule(delay, EventKind::Timer { endpoint: ep, token });
    }

    fn start_record(
        &mut self,
        verifier: EndpointId,
        initial: SessionId,
        variant: Option<Variant>,
        challenge: &str,
        outcome: VerificationStatus,
    ) -> usize {
        self.records.push(VerificationRecord {
            verifier: self.topo.endpoint(verifier).id.clone(),
            initial_session: initial,
            variant,
            outcome,
            challenge: challenge.to_string(),
            started: self.clock,
            rang: None,
            channel_ready: None,
            challenge_received: None,
            response_channel_ready: None,
            response_received: None,
            timed_out: false,
        });
        self.records.len() - 1
    }

    /// Challenges may only ever be delivered to the endpoint that owns (or
    /// receives forwards for) the number they were sent to. Violations are
    /// engine bugs, checked on every delivery.
    fn assert_capability_wall(&self, id: SessionId, to: EndpointId) {
        let expected = self.inbound_target(id);
        assert_eq!(
            to, expected,
            "capability wall: session {id} delivered to {} instead of owner {}",
            self.topo.endpoint(to).id,
            self.topo.endpoint(expected).id,
        );
    }

    fn dispatch(&mut self, ep: EndpointId, signal: Signal) {
        let mut agent = self.agents[ep.0 as usize].take().expect("agent present");
        agent.on_signal(self, ep, signal);
        self.agents[ep.0 as usize] = Some(agent);
    }

    fn open_verification_sessions(&self) -> (Vec<SessionId>, Vec<SessionId>) {
        // Sessions currently carrying a challenge or an expected response,
        // for fault injection.
        let mut ver = Vec::new();
        let mut resp = Vec::new();
        for agent in self.agents.iter().flatten() {
            if let Agent::Civ(c) = agent {
                if let Some(v) = &c.verify {
                    if let Some(s) = v.ver_session {
                        ver.push(s);
                    }
                    if v.variant.response_via_initial() {
                        resp.push(v.initial);
                    }
                    if let Some(s) = v.response_session {
                        resp.push(s);
                    }
                }
            }
        }
        (ver, resp)
    }

    fn run_loop(&mut self) {
        while let Some(Reverse(ev)) = self.queue.pop() {
            assert!(ev.at >= self.clock, "clock went backwards");
            self.clock = ev.at;
            self.events_processed += 1;
            assert!(self.events_processed < MAX_EVENTS, "event budget exceeded");
            self.handle(ev.kind);
        }
    }

    fn handle(&mut self, kind: EventKind) {
        match kind {
            EventKind::Kickoff { endpoint, step } => {
                self.dispatch(endpoint, Signal::Kickoff { step });
            }
            EventKind::Ring { session } => {
                if !self.session(session).is_live() {
                    return;
                }
                if self.session_mut(session).ring().is_err() {
                    return;
                }
                self.cdr[session.0 as usize].ringing_at = Some(self.clock);
                // Terminating side resolves the display: CNAM when in use,
                // otherwise the in-band presented line.
                let presented = self.session(session).caller_line.clone();
                let display = if self.topo.cnam.use_cnam {
                    match self.cnam.lookup(&presented.number) {
                        Some(rec) => CallerLine {
                            number: presented.number.clone(),
                            name: rec.registered_name.clone(),
                            civ_flag: rec.civ_flag,
                        },
                        None => presented.clone(),
                    }
                } else {
                    presented.clone()
                };
                self.displayed[session.0 as usize] = Some(display);
                let target = self.inbound_target(session);
                let caller = self.session(session).caller;
                self.trace(target, "ringing", format!("{session} cli={}", presented.number));
                self.assert_capability_wall(session, target);
                self.dispatch(target, Signal::IncomingRing { session });
                self.dispatch(caller, Signal::RingbackStarted { session });
            }
            EventKind::Busy { session } => {
                if self.session_mut(session).end().is_ok() {
                    self.cdr[session.0 as usize].ended_at = Some(self.clock);
                }
                let caller = self.session(session).caller;
                self.trace(caller, "busy", format!("{session}"));
                self.dispatch(caller, Signal::PeerBusy { session });
            }
            EventKind::Missed { session } => {
                let target = self.inbound_target(session);
                let line = self.displayed[session.0 as usize]
                    .clone()
                    .unwrap_or_else(|| self.session(session).caller_line.clone());
                let event = MissedCallEvent {
                    session,
                    displayed_cli: line.number,
                    displayed_name: line.name,
                    timestamp: self.clock,
                };
                self.endpoints[target.0 as usize].missed_calls += 1;
                self.trace(target, "missed_call", format!("{session} cli={}", event.displayed_cli));
                self.assert_capability_wall(session, target);
                let (ver_sessions, _) = self.open_verification_sessions();
                if self.scenario_fault.drop_challenge && ver_sessions.contains(&session) {
                    self.trace(target, "dropped", format!("{session} challenge"));
                    return;
                }
                self.dispatch(target, Signal::MissedCall(event));
            }
            EventKind::Answered { session } => {
                let caller = self.session(session).caller;
                self.dispatch(caller, Signal::PeerAnswered { session });
                // Dial-string extensions go out automatically after the
                // platform pause once the call connects.
                if let Some(digits) = self.session(session).dial_string_digits.clone() {
                    let to = self.inbound_target(session);
                    let pause = self.profile(caller).dial_string_pause;
                    self.trace(caller, "dial_string_dtmf", format!("{session} digits={digits}"));
                    self.transmit_dtmf(caller, session, to, &digits, pause);
                }
            }
            EventKind::DtmfDelivered { session, to, digits } => {
                if !self.session(session).is_live() {
                    return;
                }
                let (ver_sessions, resp_sessions) = self.open_verification_sessions();
                if self.scenario_fault.drop_challenge && ver_sessions.contains(&session) {
                    self.trace(to, "dropped", format!("{session} challenge digits"));
                    return;
                }
                if self.scenario_fault.drop_response && resp_sessions.contains(&session) {
                    self.trace(to, "dropped", format!("{session} response digits"));
                    return;
                }
                self.trace(to, "dtmf_received", format!("{session} digits={digits}"));
                self.dispatch(to, Signal::DtmfReceived { session, digits });
            }
            EventKind::DtmfAck { session, to } => {
                self.dispatch(to, Signal::DtmfDeliveredAck { session });
            }
            EventKind::HangupSeen { session, to } => {
                self.dispatch(to, Signal::PeerHungUp { session });
            }
            EventKind::Timer { endpoint, token } => {
                self.dispatch(endpoint, Signal::Timer { token });
            }
            EventKind::PbxForward { to, event } => {
                self.dispatch(to, Signal::PbxChallenge(event));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Agent behavior
// ---------------------------------------------------------------------------

impl Agent {
    fn on_signal(&mut self, eng: &mut Engine<'_>, ep: EndpointId, signal: Signal) {
        match self {
            Agent::Civ(a) => a.on_signal(eng, signal),
            Agent::Plain => plain_on_signal(eng, ep, signal),
            Agent::Adversary(a) => a.on_signal(eng, signal),
            Agent::Pbx(a) => a.on_signal(eng, signal),
        }
    }
}

fn plain_on_signal(eng: &mut Engine<'_>, ep: EndpointId, signal: Signal) {
    match signal {
        Signal::IncomingRing { session } => {
            // No verification program: the phone just rings.
            eng.ring_user(ep, session, None);
        }
        Signal::MissedCall(_) => {
            // Logged by the engine; a silent missed call is all the user sees.
        }
        _ => {}
    }
}

impl CivAgent {
    fn new(ep: EndpointId, cfg: &EndpointConfig, seed: u64, scenario: &Scenario) -> Self {
        let n = scenario.n_override.unwrap_or(cfg.challenge_len);
        Self {
            ep,
            n,
            local_contacts: cfg.local_contacts.clone(),
            variant_override: scenario.variant_override,
            rng: ChaCha8Rng::seed_from_u64(batch::derive_seed(seed, 1_000 + ep.0 as u64)),
            outbound: None,
            verify: None,
            queued: VecDeque::new(),
            next_timer: 0,
        }
    }

    fn on_signal(&mut self, eng: &mut Engine<'_>, signal: Signal) {
        match signal {
            Signal::Kickoff { .. } => self.start_outbound(eng),
            Signal::IncomingRing { session } => self.incoming_ring(eng, session),
            Signal::RingbackStarted { session } => self.ringback(eng, session),
            Signal::PeerAnswered { session } => self.peer_answered(eng, session),
            Signal::MissedCall(event) => self.missed_call(eng, event),
            Signal::PbxChallenge(event) => self.pbx_challenge(eng, event),
            Signal::DtmfReceived { session, digits } => self.dtmf_received(eng, session, digits),
            Signal::DtmfDeliveredAck { session } => self.dtmf_ack(eng, session),
            Signal::PeerHungUp { session } => self.peer_hung_up(eng, session),
            Signal::Timer { token } => self.timer(eng, token),
            Signal::PeerBusy { .. } => {}
        }
    }

    // ---- caller side -----------------------------------------------------

    fn start_outbound(&mut self, eng: &mut Engine<'_>) {
        let me = eng.topo.endpoint(self.ep).clone();
        let callee_number = eng.scenario_callee_number.clone();
        let (presented, pbx_index) = match &me.pbx_host {
            Some(host) => {
                let host_id = eng.topo.endpoint_index(host).expect("validated");
                let host_cfg = eng.topo.endpoint(host_id).clone();
                let index = match eng.with_pbx(host_id, |pbx, rng| pbx.register_outbound(self.ep, rng))
                {
                    Ok(i) => i,
                    Err(e) => {
                        eng.trace(self.ep, "pbx_exhausted", e.to_string());
                        return;
                    }
                };
                let base = host_cfg.name.trim_end_matches('*');
                let name = pbx_caller_name(base, index);
                let line = CallerLine::parse(&host_cfg.number, &name).expect("valid pbx line");
                (line, Some(index))
            }
            None => {
                let number = me.present_number.clone().unwrap_or_else(|| me.number.clone());
                (CallerLine::parse(&number, &me.name).expect("validated"), None)
            }
        };
        // The program answers challenges for any call it has outstanding;
        // the flag only tells the callee that verification is supported.
        let awaiting = true;
        match eng.place_call(self.ep, &callee_number, presented, None) {
            Ok(initial) => {
                if let Some(index) = pbx_index {
                    if let Some(host) = &me.pbx_host {
                        let host_id = eng.topo.endpoint_index(host).unwrap();
                        if let Some(Agent::Pbx(p)) = &mut eng.agents[host_id.0 as usize] {
                            p.index_session.insert(initial.0, index);
                        }
                    }
                }
                self.outbound = Some(OutboundCall {
                    initial,
                    dialed_number: callee_number,
                    awaiting,
                    inbound_ver: None,
                    response_call: None,
                    response_digits: None,
                });
            }
            Err(e) => eng.trace(self.ep, "place_failed", e.to_string()),
        }
    }

    fn respond(&mut self, eng: &mut Engine<'_>, challenge: &str) {
        let Some(out) = &mut self.outbound else { return };
        if !out.awaiting {
            return;
        }
        out.awaiting = false;
        let profile = eng.profile(self.ep).clone();
        let initial_live = eng.session(out.initial).is_live();
        let forced_cli = self.variant_override == Some(Variant::CliCli);
        let initial = out.initial;
        let dialed = out.dialed_number.clone();

        if !forced_cli && profile.can_send_incall_dtmf && initial_live {
            // Response through the held initial call.
            let _ = eng.send_dtmf(self.ep, initial, challenge);
            return;
        }
        if forced_cli || (profile.can_modify_cli && !profile.can_send_incall_dtmf) {
            // Response as a spoofed CLI on an abandoned call back to the
            // verifier; abandoned at ringback.
            let line = CallerLine::parse(challenge, "").expect("digits form a number");
            match eng.place_call(self.ep, &dialed, line, None) {
                Ok(resp) => {
                    if let Some(out) = &mut self.outbound {
                        out.response_call = Some(resp);
                        out.response_digits = None;
                    }
                }
                Err(e) => eng.trace(self.ep, "response_failed", e.to_string()),
            }
            return;
        }
        // Fresh call carrying the response as DTMF: as a dial-string
        // extension when the platform cannot send in-call DTMF, otherwise
        // in-call once the verifier answers.
        let me_line = {
            let me = eng.topo.endpoint(self.ep);
            CallerLine::parse(&me.number, &me.name).expect("validated")
        };
        let dial_string = (!profile.can_send_incall_dtmf).then(|| challenge.to_string());
        match eng.place_call(self.ep, &dialed, me_line, dial_string.clone()) {
            Ok(resp) => {
                if let Some(out) = &mut self.outbound {
                    out.response_call = Some(resp);
                    out.response_digits =
                        profile.can_send_incall_dtmf.then(|| challenge.to_string());
                }
            }
            Err(e) => eng.trace(self.ep, "response_failed", e.to_string()),
        }
    }

    fn missed_call(&mut self, eng: &mut Engine<'_>, event: MissedCallEvent) {
        // Verifier side: a short-CLI missed call may be the cli-cli response.
        let mut cli_response = None;
        if let Some(v) = &self.verify {
            if v.variant == Variant::CliCli
                && event.displayed_cli.is_nondialable_short()
                && event.displayed_cli.digits().len() == self.n
            {
                eng.note_response_received(v.record, self.ep, event.timestamp, true);
                cli_response = Some(crate::domain::verify_response(
                    &v.challenge,
                    event.displayed_cli.digits(),
                ));
            }
        }
        if let Some(outcome) = cli_response {
            self.finish_verification(eng, outcome, false);
            return;
        }
        // Caller side classification.
        let awaiting = self.outbound.as_ref().is_some_and(|o| o.awaiting);
        match recognize_verification_call(&event, self.n, awaiting) {
            MissedCallClass::Challenge(c) => {
                eng.note_challenge_at_caller(&event);
                self.respond(eng, &c.digits().to_string());
            }
            MissedCallClass::UnsolicitedVerification => {
                eng.endpoints[self.ep.0 as usize].filtered_unsolicited += 1;
                eng.trace(self.ep, "filtered_unsolicited", format!("cli={}", event.displayed_cli));
            }
            MissedCallClass::Ordinary => {
                eng.trace(self.ep, "ordinary_missed_call", format!("cli={}", event.displayed_cli));
            }
        }
    }

    fn pbx_challenge(&mut self, eng: &mut Engine<'_>, event: MissedCallEvent) {
        let awaiting = self.outbound.as_ref().is_some_and(|o| o.awaiting);
        if let MissedCallClass::Challenge(c) =
            recognize_verification_call(&event, self.n, awaiting)
        {
            eng.note_challenge_at_caller(&event);
            self.respond(eng, &c.digits().to_string());
        }
    }

    fn ringback(&mut self, eng: &mut Engine<'_>, session: SessionId) {
        // Abandon our own CLI-carrying calls the moment they ring.
        if let Some(v) = &mut self.verify {
            if v.ver_session == Some(session) && v.variant.cli_challenge() {
                let _ = eng.abandon(self.ep, session);
                // The initial call comes off hold as soon as the challenge
                // is on its way, ready to carry the response.
                if v.held_initial {
                    let _ = eng.resume(self.ep, v.initial);
                    v.held_initial = false;
                }
                return;
            }
        }
        if let Some(out) = &self.outbound {
            if out.response_call == Some(session) && out.response_digits.is_none() {
                // cli-cli response rings at the verifier; abandon to leave
                // only the CLI behind.
                let maybe_resp = out.response_call.unwrap();
                let is_cli_response = eng
                    .session(maybe_resp)
                    .caller_line
                    .number
                    .is_nondialable_short();
                if is_cli_response {
                    let _ = eng.abandon(self.ep, session);
                }
            }
        }
    }

    fn peer_answered(&mut self, eng: &mut Engine<'_>, session: SessionId) {
        // DTMF challenge call answered by the caller's phone.
        if let Some(v) = &mut self.verify {
            if v.ver_session == Some(session) && !v.variant.cli_challenge() {
                eng.note_channel_ready(v.record, session);
                if eng.profile(self.ep).can_send_incall_dtmf {
                    let challenge = v.challenge.digits().to_string();
                    let _ = eng.send_dtmf(self.ep, session, &challenge);
                }
                // Dial-string challenges flow automatically after the pause.
                return;
            }
        }
        // Response call answered by the verifier: send in-call response.
        if let Some(out) = &mut self.outbound {
            if out.response_call == Some(session) {
                if let Some(digits) = out.response_digits.take() {
                    let _ = eng.send_dtmf(self.ep, session, &digits);
                }
            }
        }
    }

    fn dtmf_ack(&mut self, eng: &mut Engine<'_>, session: SessionId) {
        // Challenge went out on a DTMF verification call: hand the initial
        // call back so it can carry the response.
        if let Some(v) = &mut self.verify {
            if v.ver_session == Some(session) {
                if v.held_initial && v.variant.response_via_initial() {
                    let _ = eng.resume(self.ep, v.initial);
                    v.held_initial = false;
                }
            }
        }
    }

    fn dtmf_received(&mut self, eng: &mut Engine<'_>, session: SessionId, digits: String) {
        // Verifier side: response digits on the initial call or on an
        // inbound response call.
        let mut response_outcome = None;
        if let Some(v) = &self.verify {
            let on_initial = session == v.initial && v.variant.response_via_initial();
            let on_response = v.response_session == Some(session);
            if on_initial || on_response {
                let now = eng.clock;
                eng.note_response_received(v.record, self.ep, now, false);
                response_outcome = Some(crate::domain::verify_response(&v.challenge, &digits));
            } else if v.ver_session == Some(session) {
                // Echo of our own challenge transmission; nothing to do.
                return;
            }
        }
        if let Some(outcome) = response_outcome {
            self.finish_verification(eng, outcome, false);
            return;
        }
        // Caller side: challenge digits arriving on the verification call we
        // answered.
        if let Some(out) = &mut self.outbound {
            if out.inbound_ver == Some(session) && out.awaiting {
                if digits.len() == self.n {
                    eng.note_challenge_at_caller_session(session);
                    let _ = eng.hangup(self.ep, session);
                    out.inbound_ver = None;
                    self.respond(eng, &digits);
                } else {
                    eng.trace(self.ep, "challenge_length_mismatch", format!("got {}", digits.len()));
                }
            }
        }
    }

    fn peer_hung_up(&mut self, eng: &mut Engine<'_>, session: SessionId) {
        // An extension tells its PBX when the indexed outbound call is over
        // so the index can be reused.
        let ended_initial = self.outbound.as_ref().is_some_and(|o| o.initial == session);
        if !ended_initial {
            return;
        }
        if let Some(host) = eng.topo.endpoint(self.ep).pbx_host.clone() {
            let host_id = eng.topo.endpoint_index(&host).expect("validated");
            if let Some(Agent::Pbx(p)) = &mut eng.agents[host_id.0 as usize] {
                if let Some(index) = p.index_session.remove(&session.0) {
                    p.state.release(index);
                }
            }
        }
    }

    fn timer(&mut self, eng: &mut Engine<'_>, token: u64) {
        let fired = match &self.verify {
            Some(v) if v.timer_token == token => {
                eng.records[v.record].timed_out = true;
                true
            }
            _ => false,
        };
        if fired {
            self.finish_verification(eng, VerificationStatus::NotVerified, true);
        }
    }

    // ---- callee (verifier) side -------------------------------------------

    fn incoming_ring(&mut self, eng: &mut Engine<'_>, session: SessionId) {
        // The caller's own phone answering its verification call.
        if let Some(out) = &mut self.outbound {
            if out.awaiting {
                let line = eng.session(session).caller_line.clone();
                if line.number.digits() == out.dialed_number
                    && !line.number.is_nondialable_short()
                {
                    out.inbound_ver = Some(session);
                    let _ = eng.answer(self.ep, session);
                    return;
                }
            }
        }
        // The verifier's inbound response call (3-setup flows).
        if let Some(v) = &mut self.verify {
            let line = eng.session(session).caller_line.clone();
            if !v.variant.response_via_initial()
                && v.variant != Variant::CliCli
                && line.number.digits() == v.displayed_number
            {
                v.response_session = Some(session);
                eng.note_response_channel(v.record, session);
                let _ = eng.answer(self.ep, session);
                return;
            }
        }
        // A ringing non-dialable short CLI is a verification call in flight
        // (ours, someone else's response, or unsolicited). The program
        // handles it transparently; the user never sees it ring. Its missed
        // call record drives classification and filtering.
        if eng.session(session).caller_line.number.is_nondialable_short() {
            return;
        }

        let display = eng.displayed[session.0 as usize]
            .clone()
            .unwrap_or_else(|| eng.session(session).caller_line.clone());
        let wants_verification =
            display.civ_flag || self.local_contacts.iter().any(|c| c == display.number.digits());
        if !wants_verification {
            // No flag, no override: ring straight through, flagged as
            // unverified by the program.
            let record = eng.start_record(
                self.ep,
                session,
                None,
                "",
                VerificationStatus::NotAttempted,
            );
            eng.records[record].rang = Some(eng.clock);
            eng.ring_user(self.ep, session, Some(VerificationStatus::NotAttempted));
            return;
        }
        if self.verify.is_some() {
            // One verification at a time; later flagged calls wait their
            // turn so challenges can never cross-match.
            self.queued.push_back(session);
            eng.trace(self.ep, "verification_queued", format!("{session}"));
            return;
        }
        self.begin_verification(eng, session, display);
    }

    fn begin_verification(&mut self, eng: &mut Engine<'_>, session: SessionId, display: CallerLine) {
        let callee_profile = eng.profile(self.ep).clone();
        let caller_profile = eng.profile(eng.session(session).caller).clone();
        let variant = match self.variant_override {
            Some(v) if variant_supported(v, &caller_profile, &callee_profile, self.n) => v,
            Some(v) => {
                eng.trace(self.ep, "override_unsupported", v.to_string());
                preferred_variant(&caller_profile, &callee_profile, self.n)
            }
            None => preferred_variant(&caller_profile, &callee_profile, self.n),
        };
        let challenge = generate_challenge(self.n, &mut self.rng).expect("1 <= n <= 15");
        let record = eng.start_record(
            self.ep,
            session,
            Some(variant),
            challenge.digits(),
            VerificationStatus::NotVerified,
        );

        // Keep the initial call only when the response will ride it or the
        // pair can afford concurrent legs; platforms without call waiting
        // tear it down instead.
        let both_wait = caller_profile.has_call_waiting && callee_profile.has_call_waiting;
        let mut held = false;
        if both_wait {
            let _ = eng.answer(self.ep, session);
            let _ = eng.hold(self.ep, session);
            held = true;
        } else {
            let _ = eng.hangup(self.ep, session);
        }

        let token = self.next_timer;
        self.next_timer += 1;
        eng.schedule_timer(self.ep, token, CHALLENGE_TIMEOUT);

        let displayed_number = display.number.digits().to_string();
        let mut verify = ActiveVerification {
            initial: session,
            displayed_number: displayed_number.clone(),
            variant,
            challenge: challenge.clone(),
            held_initial: held,
            ver_session: None,
            response_session: None,
            timer_token: token,
            record,
        };

        if variant.cli_challenge() {
            // Challenge as the CLI of an abandoned call; echo any PBX index
            // from the incoming caller name so the far exchange can route it.
            let name = match extract_pbx_index(&display.name) {
                Some(idx) => format!("{idx}{}", crate::domain::CIV_FLAG_CHAR),
                None => String::new(),
            };
            let line = CallerLine::parse(challenge.digits(), &name).expect("challenge line");
            match eng.place_call(self.ep, &displayed_number, line, None) {
                Ok(ver) => verify.ver_session = Some(ver),
                Err(e) => eng.trace(self.ep, "challenge_failed", e.to_string()),
            }
        } else {
            // Challenge as DTMF on a verification call, as a dial-string
            // extension when in-call sending is unavailable.
            let me = eng.topo.endpoint(self.ep).clone();
            let own_line = CallerLine::parse(&me.number, &me.name).expect("validated");
            let dial_string =
                (!callee_profile.can_send_incall_dtmf).then(|| challenge.digits().to_string());
            match eng.place_call(self.ep, &displayed_number, own_line, dial_string) {
                Ok(ver) => verify.ver_session = Some(ver),
                Err(e) => eng.trace(self.ep, "challenge_failed", e.to_string()),
            }
        }
        self.verify = Some(verify);
    }

    fn finish_verification(&mut self, eng: &mut Engine<'_>, outcome: VerificationStatus, timed_out: bool) {
        let Some(v) = self.verify.take() else { return };
        eng.records[v.record].outcome = outcome;
        eng.records[v.record].rang = Some(eng.clock);
        if timed_out {
            eng.trace(self.ep, "verification_timeout", format!("{}", v.initial));
        }
        // Clean up any live verification leg.
        if let Some(s) = v.ver_session {
            if eng.session(s).is_live() {
                let _ = eng.hangup(self.ep, s);
            }
        }
        if v.held_initial && eng.session(v.initial).state == CallState::Held {
            let _ = eng.resume(self.ep, v.initial);
        }
        eng.ring_user(self.ep, v.initial, Some(outcome));
        // Next queued flagged call gets its verification now.
        if let Some(next) = self.queued.pop_front() {
            if eng.session(next).is_live() {
                let display = eng.displayed[next.0 as usize]
                    .clone()
                    .unwrap_or_else(|| eng.session(next).caller_line.clone());
                self.begin_verification(eng, next, display);
            }
        }
    }
}

impl AdversaryAgent {
    fn on_signal(&mut self, eng: &mut Engine<'_>, signal: Signal) {
        match signal {
            Signal::Kickoff { step } => match self.strategy.clone() {
                AdversaryStrategy::SpoofAndGuess { victim, .. } => {
                    let line = CallerLine::parse(&victim, "Spoofed*").expect("victim number");
                    match eng.place_call(self.ep, &self.target, line, None) {
                        Ok(s) => self.session = Some(s),
                        Err(e) => eng.trace(self.ep, "place_failed", e.to_string()),
                    }
                }
                AdversaryStrategy::Downgrade { victim } => {
                    // False caller name, no flag: verification never starts.
                    let line = CallerLine::parse(&victim, "Spoofed").expect("victim number");
                    if let Err(e) = eng.place_call(self.ep, &self.target, line, None) {
                        eng.trace(self.ep, "place_failed", e.to_string());
                    }
                }
                AdversaryStrategy::ReflectedDos { victim, calls, interval_ms } => {
                    let line = CallerLine::parse(&victim, "Spoofed*").expect("victim number");
                    if let Err(e) = eng.place_call(self.ep, &self.target, line, None) {
                        eng.trace(self.ep, "place_failed", e.to_string());
                    }
                    if step + 1 < calls {
                        eng.schedule(
                            SimDuration::from_ms(interval_ms),
                            EventKind::Kickoff { endpoint: self.ep, step: step + 1 },
                        );
                    }
                }
            },
            Signal::PeerAnswered { session } => {
                if matches!(self.strategy, AdversaryStrategy::SpoofAndGuess { .. })
                    && self.session == Some(session)
                {
                    // Wait long enough for the challenge (which this endpoint
                    // can never see) to have gone out, then send a guess.
                    self.guess_timer += 1;
                    eng.schedule_timer(self.ep, self.guess_timer, SimDuration::from_ms(15_000));
                }
            }
            Signal::Timer { .. } => {
                if let (AdversaryStrategy::SpoofAndGuess { guess_digits, .. }, Some(s)) =
                    (&self.strategy, self.session)
                {
                    if eng.session(s).state == CallState::Answered {
                        let guess = generate_challenge(*guess_digits, &mut self.rng)
                            .expect("guess length valid");
                        let _ = eng.send_dtmf(self.ep, s, guess.digits());
                    }
                }
            }
            Signal::MissedCall(event) => {
                // The capability wall guarantees this can only be a call o
                // the adversary's own number; a challenge for the victim
                // must never appear here.
                eng.trace(self.ep, "adversary_missed_call", format!("cli={}", event.displayed_cli));
            }
            _ => {}
        }
    }
}

impl PbxAgent {
    fn on_signal(&mut self, eng: &mut Engine<'_>, signal: Signal) {
        match signal {
            Signal::MissedCall(event) => {
                // A verification call for one of our outbound legs: the
                // caller name echoes the index we put on the initial call.
                match extract_pbx_index(&event.displayed_name) {
                    Some(index) => match self.state.forward_challenge(index) {
                        Ok(extension) => {
                            eng.trace(
                                self.ep,
                                "pbx_forward",
                                format!("index={index} -> {}", eng.topo.endpoint(extension).id),
                            );
                            eng.schedule(
                                SimDuration::ZERO,
                                EventKind::PbxForward { to: extension, event },
                            );
                        }
                        Err(_) => {
                            eng.endpoints[self.ep.0 as usize].filtered_unsolicited += 1;
                            eng.trace(self.ep, "pbx_dropped_unknown_index", index.to_string());
                        }
                    },
                    None => {
                        eng.endpoints[self.ep.0 as usize].filtered_unsolicited += 1;
                        eng.trace(self.ep, "pbx_dropped_unsolicited", String::new());
                    }
                }
            }
            Signal::PeerHungUp { session } | Signal::PeerBusy { session } => {
                if let Some(index) = self.index_session.remove(&session.0) {
                    self.state.release(index);
                }
            }
            _ => {}
        }
    }
}

// ---------------------------------------------------------------------------
// Recorder hooks
// ---------------------------------------------------------------------------

impl<'a> Engine<'a> {
    fn open_record_for(&mut self, pred: impl Fn(&VerificationRecord) -> bool) -> Option<usize> {
        self.records
            .iter()
            .rposition(|r| r.rang.is_none() && pred(r))
    }

    fn note_channel_ready(&mut self, record: usize, _session: SessionId) {
        let now = self.clock;
        let r = &mut self.records[record];
        if r.channel_ready.is_none() {
            r.channel_ready = Some(now);
        }
    }

    fn note_response_channel(&mut self, record: usize, _session: SessionId) {
        let now = self.clock;
        let r = &mut self.records[record];
        if r.response_channel_ready.is_none() {
            r.response_channel_ready = Some(now);
        }
    }

    fn note_response_received(&mut self, record: usize, _ep: EndpointId, at: SimTime, cli: bool) {
        let r = &mut self.records[record];
        if cli {
            // The response CLI arrives complete with its call record; its
            // delivery is both channel-ready and response in one instant.
            if r.response_channel_ready.is_none() {
                r.response_channel_ready = Some(at);
            }
        }
        if r.response_received.is_none() {
            r.response_received = Some(at);
        }
    }

    /// A challenge reached the caller side: for CLI challenges the missed
    /// call is both channel-ready and challenge in one instant.
    fn note_challenge_at_caller(&mut self, event: &MissedCallEvent) {
        let at = event.timestamp;
        if let Some(idx) = self.open_record_for(|r| {
            r.challenge == event.displayed_cli.digits()
                && r.variant.map(Variant::cli_challenge).unwrap_or(false)
        }) {
            let r = &mut self.records[idx];
            if r.channel_ready.is_none() {
                r.channel_ready = Some(at);
            }
            if r.challenge_received.is_none() {
                r.challenge_received = Some(at);
            }
        }
    }

    /// DTMF challenge digits arrived on a verification call; attribute them
    /// to the verifier that placed that call.
    fn note_challenge_at_caller_session(&mut self, session: SessionId) {
        let now = self.clock;
        let verifier = self.topo.endpoint(self.session(session).caller).id.clone();
        if let Some(idx) = self.open_record_for(|r| r.verifier == verifier) {
            let r = &mut self.records[idx];
            if r.challenge_received.is_none() {
                r.challenge_received = Some(now);
            }
        }
    }

    fn with_pbx<T>(
        &mut self,
        host: EndpointId,
        f: impl FnOnce(&mut PbxState, &mut ChaCha8Rng) -> T,
    ) -> T {
        let mut agent = self.agents[host.0 as usize].take().expect("pbx agent");
        let out = match &mut agent {
            Agent::Pbx(p) => {
                let mut rng = self.rng.clone();
                let out = f(&mut p.state, &mut rng);
                self.rng = rng;
                out
            }
            _ => panic!("pbx_host does not point at a pbx endpoint"),
        };
        self.agents[host.0 as usize] = Some(agent);
        out
    }
}

// ---------------------------------------------------------------------------
// Run drivers
// ---------------------------------------------------------------------------

pub struct RunResult {
    pub metrics: RunMetrics,
    pub trace: Vec<TraceRecord>,
}

// The scenario's dialed number travels through the engine so agents can
// place the initial call; stored on the engine to keep the agent signatures
// small.
impl<'a> Engine<'a> {
    fn install_agents(&mut self, scenario: &Scenario, seed: u64) -> Result<(), ScenarioError> {
        let topo = self.topo;
        for (i, cfg) in topo.endpoints.iter().enumerate() {
            let ep = EndpointId(i as u32);
            let agent = match cfg.role {
                EndpointRole::Civ => Agent::Civ(CivAgent::new(ep, cfg, seed, scenario)),
                EndpointRole::Plain => Agent::Plain,
                EndpointRole::Pbx => Agent::Pbx(PbxAgent {
                    ep,
                    state: PbxState::new(),
                    index_session: BTreeMap::new(),
                }),
                EndpointRole::Adversary => {
                    let strategy = scenario.attack.clone().ok_or_else(|| {
                        invalid("attack", "adversary endpoint requires an attack strategy")
                    })?;
                    Agent::Adversary(AdversaryAgent {
                        ep,
                        strategy,
                        target: String::new(),
                        rng: ChaCha8Rng::seed_from_u64(batch::derive_seed(seed, 5_000 + i as u64)),
                        session: None,
                        guess_timer: 10_000,
                    })
                }
            };
            self.agents[i] = Some(agent);
        }
        Ok(())
    }
}

/// Executes one scenario run to completion and collects metrics plus the
/// full event trace. Deterministic in all inputs.
pub fn run_scenario(
    topo: &Topology,
    scenario: &Scenario,
    cal: &LatencyCalibration,
    seed: u64,
) -> Result<RunResult, ScenarioError> {
    run_scenario_inner(topo, scenario, cal, seed, true)
}

fn run_scenario_inner(
    topo: &Topology,
    scenario: &Scenario,
    cal: &LatencyCalibration,
    seed: u64,
    with_trace: bool,
) -> Result<RunResult, ScenarioError> {
    let caller = topo.endpoint_index(&scenario.caller)?;
    let callee = topo.endpoint_index(&scenario.callee)?;
    if scenario.attack.is_some() && topo.endpoint(caller).role != EndpointRole::Adversary {
        return Err(invalid("caller", "attack scenarios need an adversary caller"));
    }
    if scenario.attack.is_none() && topo.endpoint(caller).role == EndpointRole::Adversary {
        return Err(invalid("caller", "honest scenarios cannot use an adversary caller"));
    }
    if let Some(v) = scenario.variant_override {
        let n = scenario
            .n_override
            .unwrap_or(topo.endpoint(callee).challenge_len);
        let cp = PlatformProfile::builtin(topo.endpoint(caller).profile, cal);
        let ep = PlatformProfile::builtin(topo.endpoint(callee).profile, cal);
        if !variant_supported(v, &cp, &ep, n) {
            return Err(invalid(
                "variant_override",
                format!("variant {v} is not executable between these endpoints"),
            ));
        }
    }
    let mut engine = Engine::new(topo, cal, seed, with_trace);
    engine.scenario_fault = scenario.fault;
    engine.scenario_callee_number = topo.endpoint(callee).number.clone();
    if let Some(AdversaryStrategy::SpoofAndGuess { victim, .. })
    | Some(AdversaryStrategy::Downgrade { victim })
    | Some(AdversaryStrategy::ReflectedDos { victim, .. }) = &scenario.attack
    {
        if topo.endpoint_by_number(victim).is_none() {
            return Err(invalid("attack.victim", format!("no endpoint owns {victim:?}")));
        }
    }
    engine.install_agents(scenario, seed)?;
    if let Some(Agent::Adversary(a)) = &mut engine.agents[caller.0 as usize] {
        a.target = topo.endpoint(callee).number.clone();
    }
    engine.schedule(SimDuration::ZERO, EventKind::Kickoff { endpoint: caller, step: 0 });
    for extra in &scenario.extra_callers {
        let ep = topo.endpoint_index(extra)?;
        engine.schedule(SimDuration::ZERO, EventKind::Kickoff { endpoint: ep, step: 0 });
    }
    engine.run_loop();

    // Primary verification: the one the scenario's callee performed.
    let callee_id = &topo.endpoint(callee).id;
    let primary = engine
        .records
        .iter()
        .find(|r| &r.verifier == callee_id)
        .cloned();
    let (outcome, variant, total, breakdown) = match &primary {
        Some(r) => (
            r.outcome,
            r.variant,
            r.total_added_latency(),
            r.breakdown(),
        ),
        None => (
            VerificationStatus::NotAttempted,
            None,
            SimDuration::ZERO,
            Breakdown::default(),
        ),
    };
    let charges = engine
        .endpoints
        .iter()
        .enumerate()
        .map(|(i, s)| (topo.endpoints[i].id.clone(), s.charges))
        .collect();
    let filtered = engine
        .endpoints
        .iter()
        .enumerate()
        .map(|(i, s)| (topo.endpoints[i].id.clone(), s.filtered_unsolicited))
        .collect();
    let missed = engine
        .endpoints
        .iter()
        .enumerate()
        .map(|(i, s)| (topo.endpoints[i].id.clone(), s.missed_calls))
        .collect();
    let metrics = RunMetrics {
        outcome,
        variant,
        total_added_latency: total,
        breakdown,
        call_setups: engine.sessions.len() as u32,
        charges,
        cnam_dips: engine.cnam.dip_count(),
        rings: engine.rings.clone(),
        filtered_unsolicited: filtered,
        missed_calls: missed,
        verifications: engine.records.clone(),
        cdr: engine.cdr.clone(),
    };
    Ok(RunResult {
        metrics,
        trace: engine.trace.unwrap_or_default(),
    })
}

/// Aggregate statistics over an attack campaign.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackStats {
    pub trials: u64,
    pub verified: u64,
    pub not_verified: u64,
    pub not_attempted: u64,
    pub rings: u64,
    pub warning_rings: u64,
    pub victim_missed_calls: u64,
    pub victim_filtered: u64,
    /// Reflected verification calls that correlate with the spoofed call
    /// that triggered them, and those that do not.
    pub reflected_paired: u64,
    pub reflected_unpaired: u64,
}

/// Runs `trials` independent attack executions (each a full simulation) and
/// aggregates outcomes. For the reflected-DoS strategy one trial is one
/// whole campaign of `calls` spoofed calls.
pub fn run_attack(
    topo: &Topology,
    scenario: &Scenario,
    cal: &LatencyCalibration,
    trials: u64,
    seed: u64,
) -> Result<AttackStats, ScenarioError> {
    let strategy = scenario
        .attack
        .clone()
        .ok_or_else(|| invalid("attack", "run_attack requires an attack strategy"))?;
    let victim_number = match &strategy {
        AdversaryStrategy::SpoofAndGuess { victim, .. }
        | AdversaryStrategy::Downgrade { victim }
        | AdversaryStrategy::ReflectedDos { victim, .. } => victim.clone(),
    };
    let victim_ep = topo
        .endpoint_by_number(&victim_number)
        .ok_or_else(|| invalid("attack.victim", format!("no endpoint owns {victim_number:?}")))?;
    let victim_id = topo.endpoint(victim_ep).id.clone();
    // Validate once before fanning out.
    run_scenario_inner(topo, scenario, cal, seed, false)?;

    let caller_id = scenario.caller.clone();
    let results = batch::indexed_map(trials, |t| {
        let run_seed = batch::derive_seed(seed, t);
        let result = run_scenario_inner(topo, scenario, cal, run_seed, false)
            .expect("validated scenario");
        let m = result.metrics;
        let mut stats = AttackStats {
            trials: 1,
            ..AttackStats::default()
        };
        for v in &m.verifications {
            match v.outcome {
                VerificationStatus::Verified => stats.verified += 1,
                VerificationStatus::NotVerified => stats.not_verified += 1,
                VerificationStatus::NotAttempted => stats.not_attempted += 1,
            }
        }
        stats.rings += m.rings.len() as u64;
        stats.warning_rings += m.rings.iter().filter(|r| r.shows_unverified_warning()).count() as u64;
        stats.victim_missed_calls += m.missed_calls.get(&victim_id).copied().unwrap_or(0);
        stats.victim_filtered += m.filtered_unsolicited.get(&victim_id).copied().unwrap_or(0);
        // CDR correlation: every abandoned short-CLI verification call pairs
        // with the most recent spoofed call into its originator.
        for (i, e) in m.cdr.iter().enumerate() {
            let is_reflected = e.abandoned
                && e.presented_number.len() <= 4
                && e.dialed_number == victim_number;
            if !is_reflected {
                continue;
            }
            let paired = m.cdr[..i].iter().any(|f| {
                f.callee == e.caller
                    && f.presented_number == victim_number
                    && f.caller == caller_id
                    && f.placed_at <= e.placed_at
            });
            if paired {
                stats.reflected_paired += 1;
            } else {
                stats.reflected_unpaired += 1;
            }
        }
        stats
    });
    let mut total = AttackStats::default();
    for s in results {
        total.trials += s.trials;
        total.verified += s.verified;
        total.not_verified += s.not_verified;
        total.not_attempted += s.not_attempted;
        total.rings += s.rings;
        total.warning_rings += s.warning_rings;
        total.victim_missed_calls += s.victim_missed_calls;
        total.victim_filtered += s.victim_filtered;
        total.reflected_paired += s.reflected_paired;
        total.reflected_unpaired += s.reflected_unpaired;
    }
    Ok(total)
}
