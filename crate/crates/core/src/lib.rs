//! Caller ID Verification (CIV): a challenge-response protocol that
//! authenticates the displayed caller ID of a phone call, together with a
//! discrete-event simulator of heterogeneous telephone networks (analogue
//! PSTN, circuit-switched cellular, SIP) on which the protocol runs.
//!
//! The verifying side calls back the number shown on the incoming call and
//! transmits a random n-digit challenge, either as a spoofed CLI on an
//! abandoned call or as DTMF on a short verification call. Only the true
//! owner of that number can receive the challenge and echo it back, so a
//! matching response proves possession of the number. Verification never
//! blocks the call; it only annotates the ring with a verified / not
//! verified status.
//!
//! Module map:
//! - [`domain`]: phone numbers, caller lines, challenges, verification status
//! - [`dtmf`]: tone synthesis, Goertzel decoding, noise channel, timing
//! - [`signaling`]: call sessions, CLI delivery, gateways, CNAM
//! - [`civ`]: the protocol state machines, variant selection, PBX forwarding
//! - [`simnet`]: the event engine, scenarios, adversaries, metrics, traces
//! - [`calibration`] / [`fit`]: latency model parameters and the solver that
//!   fits them to measured end-to-end totals

pub mod batch;
pub mod calibration;
pub mod civ;
pub mod domain;
pub mod dtmf;
pub mod fit;
pub mod signaling;
pub mod simnet;
pub mod time;


pub use domain::{CallerLine, Challenge, PhoneNumber, VerificationStatus};

