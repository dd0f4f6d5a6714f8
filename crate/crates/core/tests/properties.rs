//! Property tests for the load-bearing invariants: codec round-trips, the
//! session state machine, verbatim CLI delivery, lossless gateway chains,
//! the never-block guarantee under fault injection, and exact breakdown
//! accounting.

mod common;

use civ_core::civ::ProfileKind;
use civ_core::domain::{parse_caller_line, CallerLine, PhoneNumber, VerificationStatus};
use civ_core::dtmf::{decode, symbols_to_string, synthesize, DtmfSymbol, TimingConfig};
use civ_core::signaling::{
    gateway_transport, CallSession, CallState, EndpointId, EndpointRole, Leg, LinkNoise,
    NetworkKind, Route, SessionId,
};
use civ_core::simnet::{run_scenario, FaultInjection, Scenario};
use civ_core::time::SimDuration;
use common::{calibration, endpoint, pair_topology, topology};
use proptest::prelude::*;

fn any_symbol() -> impl Strategy<Value = DtmfSymbol> {
    prop::sample::select("0123456789*#ABCD".chars().collect::<Vec<_>>())
        .prop_map(|c| DtmfSymbol::from_char(c).unwrap())
}

fn any_profile() -> impl Strategy<Value = ProfileKind> {
    prop::sample::select(vec![
        ProfileKind::Sip,
        ProfileKind::Cellular,
        ProfileKind::LandlineTruecall,
    ])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    // decode(synthesize(s)) = s for every symbol string and any timing at or
    // above the 40 ms floor, on a clean line.
    #[test]
    fn clean_round_trip_identity(
        symbols in prop::collection::vec(any_symbol(), 1..=6),
        mark in 40u32..=120,
        space in 40u32..=120,
    ) {
        let cfg = TimingConfig::new(mark, space);
        let audio = synthesize(&symbols, &cfg, 8000);
        let decoded = decode(&audio, &cfg);
        prop_assert_eq!(
            symbols_to_string(&decoded),
            symbols_to_string(&symbols),
            "mark={} space={}", mark, space
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    // Gateway chains of any length preserve symbol sequences when every
    // analogue leg is clean.
    #[test]
    fn clean_gateway_chains_are_lossless(
        symbols in prop::collection::vec(any_symbol(), 1..=6),
        kinds in prop::collection::vec(
            prop::sample::select(vec![
                NetworkKind::PstnAnalogue,
                NetworkKind::CellularCs,
                NetworkKind::VoipSip,
            ]),
            2..=5,
        ),
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        let legs: Vec<Leg> = kinds
            .windows(2)
            .map(|w| Leg { from_network: w[0], to_network: w[1], noise: LinkNoise::None })
            .collect();
        let route = Route {
            hops: (0..kinds.len() as u32).map(EndpointId).collect(),
            legs,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let out = gateway_transport(&symbols, &route, &TimingConfig::new(100, 100), 6.5, &mut rng);
        prop_assert_eq!(out, symbols);
    }

    // The session state machine accepts exactly the declared transitions.
    #[test]
    fn state_machine_matches_reference_model(ops in prop::collection::vec(0u8..6, 1..24)) {
        let mut session = CallSession {
            id: SessionId(0),
            caller: EndpointId(0),
            callee: EndpointId(1),
            caller_line: parse_caller_line("5551230001", "Alice*").unwrap(),
            callee_number: PhoneNumber::new("5551230002").unwrap(),
            state: CallState::Dialing,
            path: vec![NetworkKind::VoipSip],
            charge_to_caller: false,
            dial_string_digits: None,
        };
        use CallState::*;
        for op in ops {
            let before = session.state;
            let (result, expected) = match op {
                0 => (session.ring().is_ok(), before == Dialing),
                1 => (session.answer().is_ok(), before == Ringing),
                2 => (session.hold().is_ok(), before == Answered),
                3 => (session.resume().is_ok(), before == Held),
                4 => (session.abandon().is_ok(), matches!(before, Dialing | Ringing)),
                _ => (session.end().is_ok(), before != Ended),
            };
            prop_assert_eq!(result, expected, "op {} from {:?}", op, before);
            if !result {
                prop_assert_eq!(session.state, before, "failed op must not move state");
            }
        }
    }

    // The presented caller line reaches the far end byte-for-byte, whatever
    // the networks in between; nothing validates it.
    #[test]
    fn presented_line_is_delivered_verbatim(
        callee_profile in any_profile(),
        adversary_network in prop::sample::select(vec![
            NetworkKind::PstnAnalogue,
            NetworkKind::CellularCs,
            NetworkKind::VoipSip,
        ]),
        victim_digits in "[0-9]{7,12}",
        name in "[A-Za-z ]{0,13}",
        flagged in any::<bool>(),
        seed in any::<u64>(),
    ) {
        use civ_core::simnet::AdversaryStrategy;
        prop_assume!(victim_digits != "5551230002" && victim_digits != "5551230009");
        let mut eve = endpoint("eve", "5551230009", "", ProfileKind::Sip);
        eve.network = adversary_network;
        eve.role = EndpointRole::Adversary;
        let victim = endpoint("victim", &victim_digits, "", ProfileKind::Sip);
        let bob = endpoint("bob", "5551230002", "Bob*", callee_profile);
        let topo = topology(vec![eve, victim, bob]);
        let cal = calibration();

        let raw_name = if flagged { format!("{name}*") } else { name.clone() };
        prop_assume!(CallerLine::parse(&victim_digits, &raw_name).is_ok());
        let mut scenario = Scenario::honest("eve", "bob", seed);
        scenario.attack = Some(if flagged {
            AdversaryStrategy::SpoofAndGuess { victim: victim_digits.clone(), guess_digits: 4 }
        } else {
            AdversaryStrategy::Downgrade { victim: victim_digits.clone() }
        });
        // The adversary agents present fixed names; check verbatim delivery
        // through the session record instead of the ring (rings for flagged
        // calls happen post-verification).
        let result = run_scenario(&topo, &scenario, &cal, seed).unwrap();
        let m = &result.metrics;
        let initial = m.cdr.iter().find(|e| e.caller == "eve").unwrap();
        prop_assert_eq!(&initial.presented_number, &victim_digits);
        let ring = m.rings.iter().find(|r| r.endpoint == "bob").unwrap();
        prop_assert_eq!(&ring.displayed_number, &victim_digits);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Every verification run terminates with exactly one user ring at the
    // callee, whatever is dropped on the way.
    #[test]
    fn never_block_under_fault_injection(
        caller in any_profile(),
        callee in any_profile(),
        drop_challenge in any::<bool>(),
        drop_response in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let topo = pair_topology(caller, callee);
        let cal = calibration();
        let mut scenario = Scenario::honest("alice", "bob", seed);
        scenario.fault = FaultInjection { drop_challenge, drop_response };
        let result = run_scenario(&topo, &scenario, &cal, seed).unwrap();
        let m = &result.metrics;
        let bob_rings: Vec<_> = m.rings.iter().filter(|r| r.endpoint == "bob").collect();
        prop_assert_eq!(bob_rings.len(), 1, "exactly one ring, got {:?}", m.rings);
        let clean = !drop_challenge && !drop_response;
        if clean {
            prop_assert_eq!(m.outcome, VerificationStatus::Verified);
        } else {
            prop_assert_eq!(m.outcome, VerificationStatus::NotVerified);
        }
        // Exact accounting holds on every path, including timeouts.
        prop_assert_eq!(m.breakdown.total(), m.total_added_latency);
        // 2-setup forms never pay a response call setup; 3-setup forms do
        // (when the flow got that far).
        if let Some(v) = m.variant {
            if v.response_via_initial() {
                prop_assert_eq!(m.breakdown.response_call_setup, SimDuration::ZERO);
            } else if clean {
                prop_assert!(m.breakdown.response_call_setup > SimDuration::ZERO);
            }
        }
    }
}
