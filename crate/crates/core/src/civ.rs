//! The verification protocol proper: platform capability profiles, selection
//! of the challenge/response channel pair (the protocol variant), missed-call
//! classification on the caller side, and the PBX index registry that lets an
//! organization verify many concurrent calls behind one outbound number.
//!
//! The event-driven caller and callee state machines that execute these
//! rules on the simulated network live in [`crate::simnet::agents`].

use crate::domain::{Challenge, CIV_FLAG_CHAR, MAX_NAME_LEN};
use crate::dtmf::TimingConfig;
use crate::signaling::{EndpointId, MissedCallEvent};
use crate::time::SimDuration;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// How long the verifier waits for a response before giving up and ringing
/// with a not-verified status. Sits above the slowest honest path (29 s) so
/// honest callers never time out.
pub const CHALLENGE_TIMEOUT: SimDuration = SimDuration(30_000_000);

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum CivError {
    #[error("all 1000 concurrent PBX indices are in use")]
    Exhausted,
    #[error("unknown PBX index {0}")]
    UnknownIndex(u16),
}

/// The three prototype platforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileKind {
    Sip,
    Cellular,
    LandlineTruecall,
}

impl ProfileKind {
    pub const ALL: [ProfileKind; 3] = [
        ProfileKind::Sip,
        ProfileKind::Cellular,
        ProfileKind::LandlineTruecall,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProfileKind::Sip => "sip",
            ProfileKind::Cellular => "cellular",
            ProfileKind::LandlineTruecall => "landline-truecall",
        }
    }
}

impl std::fmt::Display for ProfileKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Capability vector of one phone platform plus its calibrated speeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatformProfile {
    pub kind: ProfileKind,
    /// May present a caller line other than its own (spoofed CLI).
    pub can_modify_cli: bool,
    /// May transmit DTMF during an established call.
    pub can_send_incall_dtmf: bool,
    /// May hold one call while handling another.
    pub has_call_waiting: bool,
    /// Per-digit decode latency at this platform's receiving side.
    pub dtmf_recognition_delay: SimDuration,
    /// Pause inserted before dial-string extension digits.
    pub dial_string_pause: SimDuration,
    /// Mark/space timing this platform sends DTMF with.
    pub dtmf_timing: TimingConfig,
}

impl PlatformProfile {
    /// The capability rows of the three prototypes:
    /// sip {cli yes, in-call yes, waiting yes}, cellular {no, no, yes},
    /// landline-truecall {no, yes, no}. Speeds come from the calibration.
    pub fn builtin(kind: ProfileKind, cal: &crate::calibration::LatencyCalibration) -> Self {
        let recognition = cal.recognition_delay(kind);
        match kind {
            ProfileKind::Sip => Self {
                kind,
                can_modify_cli: true,
                can_send_incall_dtmf: true,
                has_call_waiting: true,
                dtmf_recognition_delay: recognition,
                dial_string_pause: SimDuration::ZERO,
                dtmf_timing: TimingConfig::sip_incall(),
            },
            ProfileKind::Cellular => Self {
                kind,
                can_modify_cli: false,
                can_send_incall_dtmf: false,
                has_call_waiting: true,
                dtmf_recognition_delay: recognition,
                // Dialing "<number>,<digits>" pauses two seconds before the
                // digits go out.
                dial_string_pause: SimDuration::from_ms(2_000),
                dtmf_timing: TimingConfig::analogue_landline(),
            },
            ProfileKind::LandlineTruecall => Self {
                kind,
                can_modify_cli: false,
                can_send_incall_dtmf: true,
                has_call_waiting: false,
                dtmf_recognition_delay: recognition,
                dial_string_pause: SimDuration::ZERO,
                dtmf_timing: TimingConfig::analogue_landline(),
            },
        }
    }
}

/// Channel pair used for challenge/response, distinguished by how many call
/// setups the whole verification needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Challenge as spoofed CLI on an abandoned call; response as DTMF on
    /// the held initial call.
    CliDtmf,
    /// Challenge and response both as spoofed CLIs on abandoned calls.
    CliCli,
    /// Challenge as DTMF on one verification call; response on the held
    /// initial call.
    DtmfDtmf2Setup,
    /// Challenge and response each need their own call setup.
    DtmfDtmf3Setup,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::CliDtmf => "cli-dtmf",
            Variant::CliCli => "cli-cli",
            Variant::DtmfDtmf2Setup => "dtmf-dtmf-2setup",
            Variant::DtmfDtmf3Setup => "dtmf-dtmf-3setup",
        }
    }

    /// Challenge travels as the CLI of an abandoned call.
    pub fn cli_challenge(self) -> bool {
        matches!(self, Variant::CliDtmf | Variant::CliCli)
    }

    /// Response travels over the held initial call; no response call setup.
    pub fn response_via_initial(self) -> bool {
        matches!(self, Variant::CliDtmf | Variant::DtmfDtmf2Setup)
    }

    /// Total call setups including the initial call.
    pub fn call_setups(self) -> u32 {
        if self.response_via_initial() {
            2
        } else {
            3
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Deterministic variant choice from the two capability profiles, preferring
/// cli-dtmf, then cli-cli, then the DTMF forms.
///
/// cli-cli additionally requires the caller to be able to modify its CLI,
/// since the response is itself a spoofed-CLI abandoned call; a caller that
/// cannot spoof falls through to a DTMF response with its own call setup.
pub fn select_variant(caller: &PlatformProfile, callee: &PlatformProfile) -> Variant {
    let can_respond_via_initial = caller.can_send_incall_dtmf && callee.has_call_waiting;
    if callee.can_modify_cli {
        if can_respond_via_initial {
            return Variant::CliDtmf;
        }
        if caller.can_modify_cli {
            return Variant::CliCli;
        }
    }
    if can_respond_via_initial {
        Variant::DtmfDtmf2Setup
    } else {
        Variant::DtmfDtmf3Setup
    }
}

/// What a missed call means to a caller-side verification program.
#[derive(Debug, Clone, PartialEq)]
pub enum MissedCallClass {
    /// A verification is pending and the CLI carries the challenge.
    Challenge(Challenge),
    /// Plain missed call; shown to the user as usual.
    Ordinary,
    /// Looks like a verification call but nothing is pending here; filtered
    /// out silently.
    UnsolicitedVerification,
}

/// Classifies a missed call: a non-dialable short CLI of the expected length
/// is a verification call, which carries a challenge only if this endpoint
/// is actually awaiting one.
pub fn recognize_verification_call(
    event: &MissedCallEvent,
    expected_len: usize,
    verification_pending: bool,
) -> MissedCallClass {
    let cli = &event.displayed_cli;
    if !cli.is_nondialable_short() || cli.digits().len() != expected_len {
        return MissedCallClass::Ordinary;
    }
    if !verification_pending {
        return MissedCallClass::UnsolicitedVerification;
    }
    match Challenge::from_digits(cli.digits()) {
        Ok(c) => MissedCallClass::Challenge(c),
        Err(_) => MissedCallClass::Ordinary,
    }
}

/// Index assigned to one concurrent outbound PBX call, 000-999.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PbxIndex(pub u16);

impl std::fmt::Display for PbxIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:03}", self.0)
    }
}

pub const PBX_INDEX_SPACE: u16 = 1000;

/// Active outbound calls of one PBX, keyed by random 3-digit index.
#[derive(Debug, Clone, Default)]
pub struct PbxState {
    active: BTreeMap<u16, EndpointId>,
}

impl PbxState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn active_count(&self) -> usize {
        self.active.len()
    }

    /// Assigns a fresh index, uniform over the currently free ones, and maps
    /// it to the extension placing the call.
    pub fn register_outbound<R: Rng + ?Sized>(
        &mut self,
        extension: EndpointId,
        rng: &mut R,
    ) -> Result<PbxIndex, CivError> {
        let free = PBX_INDEX_SPACE as usize - self.active.len();
        if free == 0 {
            return Err(CivError::Exhausted);
        }
        let pick = rng.random_range(0..free);
        let idx = (0..PBX_INDEX_SPACE)
            .filter(|i| !self.active.contains_key(i))
            .nth(pick)
            .expect("pick < free");
        self.active.insert(idx, extension);
        Ok(PbxIndex(idx))
    }

    /// Looks up which extension a verification event belongs to; unknown
    /// indices are dropped by the caller as unsolicited.
    pub fn forward_challenge(&self, index: PbxIndex) -> Result<EndpointId, CivError> {
        self.active
            .get(&index.0)
            .copied()
            .ok_or(CivError::UnknownIndex(index.0))
    }

    /// Frees the index when the outbound call ends; it may be reused.
    pub fn release(&mut self, index: PbxIndex) {
        self.active.remove(&index.0);
    }
}

/// Builds the outbound caller name for a PBX call: organization name, the
/// 3-digit index, and the CIV flag, within the 15-character name limit.
pub fn pbx_caller_name(org_name: &str, index: PbxIndex) -> String {
    let suffix = format!(" {index}{CIV_FLAG_CHAR}");
    let keep = MAX_NAME_LEN.saturating_sub(suffix.chars().count());
    let base: String = org_name.chars().take(keep).collect();
    format!("{base}{suffix}")
}

/// Recovers the PBX index from a caller name of the form "... NNN*".
pub fn extract_pbx_index(name: &str) -> Option<PbxIndex> {
    let trimmed = name.strip_suffix(CIV_FLAG_CHAR)?;
    if trimmed.len() < 3 {
        return None;
    }
    let digits = &trimmed[trimmed.len() - 3..];
    digits.parse::<u16>().ok().map(PbxIndex)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::LatencyCalibration;
    use crate::domain::PhoneNumber;
    use crate::signaling::SessionId;
    use crate::time::SimTime;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cal() -> LatencyCalibration {
        LatencyCalibration::from_toml_str(crate::calibration::tests::SAMPLE).unwrap()
    }

    fn profile(kind: ProfileKind) -> PlatformProfile {
        PlatformProfile::builtin(kind, &cal())
    }

    #[test]
    fn builtin_capability_rows() {
        let sip = profile(ProfileKind::Sip);
        assert!(sip.can_modify_cli && sip.can_send_incall_dtmf && sip.has_call_waiting);
        let cell = profile(ProfileKind::Cellular);
        assert!(!cell.can_modify_cli && !cell.can_send_incall_dtmf && cell.has_call_waiting);
        assert_eq!(cell.dial_string_pause, SimDuration::from_ms(2000));
        let tc = profile(ProfileKind::LandlineTruecall);
        assert!(!tc.can_modify_cli && tc.can_send_incall_dtmf && !tc.has_call_waiting);
        assert_eq!(sip.dtmf_timing, TimingConfig::new(50, 50));
        assert_eq!(tc.dtmf_timing, TimingConfig::new(100, 100));
    }

    #[test]
    fn variant_selection_table() {
        use ProfileKind::*;
        use Variant::*;
        let cases = [
            (Sip, Sip, CliDtmf),
            (Sip, Cellular, DtmfDtmf2Setup),
            (Sip, LandlineTruecall, DtmfDtmf3Setup),
            (Cellular, Sip, DtmfDtmf3Setup),
            (Cellular, Cellular, DtmfDtmf3Setup),
            (Cellular, LandlineTruecall, DtmfDtmf3Setup),
            (LandlineTruecall, Sip, CliDtmf),
            (LandlineTruecall, Cellular, DtmfDtmf2Setup),
            (LandlineTruecall, LandlineTruecall, DtmfDtmf3Setup),
        ];
        for (caller, callee, expected) in cases {
            assert_eq!(
                select_variant(&profile(caller), &profile(callee)),
                expected,
                "({caller}, {callee})"
            );
        }
    }

    #[test]
    fn setups_per_variant() {
        assert_eq!(Variant::CliDtmf.call_setups(), 2);
        assert_eq!(Variant::DtmfDtmf2Setup.call_setups(), 2);
        assert_eq!(Variant::CliCli.call_setups(), 3);
        assert_eq!(Variant::DtmfDtmf3Setup.call_setups(), 3);
    }

    fn missed(cli: &str) -> MissedCallEvent {
        MissedCallEvent {
            session: SessionId(1),
            displayed_cli: PhoneNumber::new(cli).unwrap(),
            displayed_name: String::new(),
            timestamp: SimTime::ZERO,
        }
    }

    #[test]
    fn recognizes_pending_challenge() {
        match recognize_verification_call(&missed("0391"), 4, true) {
            MissedCallClass::Challenge(c) => assert_eq!(c.digits(), "0391"),
            other => panic!("expected challenge, got {other:?}"),
        }
    }

    #[test]
    fn full_length_cli_is_ordinary() {
        assert_eq!(
            recognize_verification_call(&missed("5551234567"), 4, true),
            MissedCallClass::Ordinary
        );
        // Short but not the expected length.
        assert_eq!(
            recognize_verification_call(&missed("039"), 4, true),
            MissedCallClass::Ordinary
        );
    }

    #[test]
    fn unsolicited_verification_filtered() {
        assert_eq!(
            recognize_verification_call(&missed("0391"), 4, false),
            MissedCallClass::UnsolicitedVerification
        );
    }

    #[test]
    fn pbx_indices_unique_and_reusable() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pbx = PbxState::new();
        let a = pbx.register_outbound(EndpointId(10), &mut rng).unwrap();
        let b = pbx.register_outbound(EndpointId(11), &mut rng).unwrap();
        let c = pbx.register_outbound(EndpointId(12), &mut rng).unwrap();
        assert!(a != b && b != c && a != c);
        assert_eq!(pbx.forward_challenge(a), Ok(EndpointId(10)));
        assert_eq!(pbx.forward_challenge(c), Ok(EndpointId(12)));

        pbx.release(b);
        assert_eq!(pbx.forward_challenge(b), Err(CivError::UnknownIndex(b.0)));
        // Freed index may come around again; drain the space to force it.
        let mut seen = std::collections::BTreeSet::new();
        while pbx.active_count() < PBX_INDEX_SPACE as usize {
            seen.insert(pbx.register_outbound(EndpointId(99), &mut rng).unwrap().0);
        }
        assert!(seen.contains(&b.0));
        assert_eq!(
            pbx.register_outbound(EndpointId(99), &mut rng),
            Err(CivError::Exhausted)
        );
    }

    #[test]
    fn pbx_exhaustion_at_thousand() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut pbx = PbxState::new();
        for _ in 0..1000 {
            pbx.register_outbound(EndpointId(1), &mut rng).unwrap();
        }
        assert_eq!(
            pbx.register_outbound(EndpointId(1), &mut rng),
            Err(CivError::Exhausted)
        );
    }

    #[test]
    fn pbx_name_embeds_and_extracts_index() {
        let name = pbx_caller_name("Acme Corp", PbxIndex(42));
        assert_eq!(name, "Acme Corp 042*");
        assert!(name.chars().count() <= MAX_NAME_LEN);
        assert_eq!(extract_pbx_index(&name), Some(PbxIndex(42)));
        // Long organization names are truncated to respect the limit.
        let long = pbx_caller_name("A Very Long Organization", PbxIndex(999));
        assert!(long.chars().count() <= MAX_NAME_LEN);
        assert_eq!(extract_pbx_index(&long), Some(PbxIndex(999)));
        assert_eq!(extract_pbx_index("Bob*"), None);
        assert_eq!(extract_pbx_index("742"), None);
    }
}
