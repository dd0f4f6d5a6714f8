//! End-to-end protocol flows on the simulated networks: honest verification
//! across every platform pair, the exact latency accounting, attacks,
//! forwarding and PBX topologies, queueing and fault handling.

mod common;

use civ_core::civ::{ProfileKind, Variant};
use civ_core::domain::VerificationStatus;
use civ_core::signaling::EndpointRole;
use civ_core::simnet::{
    latency_breakdown, run_attack, run_scenario, trace_to_string, AdversaryStrategy,
    BreakdownError, FaultInjection, Scenario,
};
use civ_core::time::SimDuration;
use common::{attack_topology, calibration, endpoint, pair_topology, topology};

use ProfileKind::{Cellular, LandlineTruecall, Sip};

#[test]
fn honest_sip_to_sip_verifies_with_expected_latency() {
    let topo = pair_topology(Sip, Sip);
    let cal = calibration();
    let scenario = Scenario::honest("alice", "bob", 7);
    let result = run_scenario(&topo, &scenario, &cal, 7).unwrap();
    let m = &result.metrics;
    assert_eq!(m.outcome, VerificationStatus::Verified, "trace:\n{}", trace_to_string(&result.trace));
    assert_eq!(m.variant, Some(Variant::CliDtmf));
    // (3100 + 300) abandoned-call CLI delivery + 4 * (50 + 275) response.
    assert_eq!(m.total_added_latency, SimDuration::from_ms(4700));
    assert_eq!(m.call_setups, 2);
    let b = &m.breakdown;
    assert_eq!(b.verification_call_setup, SimDuration::from_ms(3400));
    assert_eq!(b.challenge_transmit, SimDuration::ZERO);
    assert_eq!(b.response_call_setup, SimDuration::ZERO);
    assert_eq!(b.response_transmit, SimDuration::from_ms(1300));
    // The verified ring happened at bob and shows no warning.
    let ring = m.rings.iter().find(|r| r.endpoint == "bob").unwrap();
    assert_eq!(ring.status, Some(VerificationStatus::Verified));
    assert!(!ring.shows_unverified_warning());
}

#[test]
fn all_nine_profile_pairs_verify() {
    let cal = calibration();
    for caller in ProfileKind::ALL {
        for callee in ProfileKind::ALL {
            let topo = pair_topology(caller, callee);
            for seed in 0..5u64 {
                let scenario = Scenario::honest("alice", "bob", seed);
                let result = run_scenario(&topo, &scenario, &cal, seed).unwrap();
                assert_eq!(
                    result.metrics.outcome,
                    VerificationStatus::Verified,
                    "({caller}, {callee}) seed {seed} outcome {:?}\ntrace:\n{}",
                    result.metrics.outcome,
                    trace_to_string(&result.trace),
                );
            }
        }
    }
}

#[test]
fn latency_totals_match_reference_values() {
    let cal = calibration();
    let cases: [(ProfileKind, ProfileKind, Option<Variant>, u64); 6] = [
        (Sip, Sip, None, 4700),
        (Sip, Sip, Some(Variant::DtmfDtmf2Setup), 5700),
        (Sip, Sip, Some(Variant::CliCli), 6800),
        (LandlineTruecall, LandlineTruecall, None, 13000),
        (Cellular, Cellular, None, 20000),
        (Cellular, LandlineTruecall, None, 29000),
    ];
    for (caller, callee, variant, expected_ms) in cases {
        let topo = pair_topology(caller, callee);
        let mut scenario = Scenario::honest("alice", "bob", 1);
        scenario.variant_override = variant;
        let result = run_scenario(&topo, &scenario, &cal, 1).unwrap();
        assert_eq!(result.metrics.outcome, VerificationStatus::Verified);
        assert_eq!(
            result.metrics.total_added_latency,
            SimDuration::from_ms(expected_ms),
            "({caller}, {callee}, {variant:?})\ntrace:\n{}",
            trace_to_string(&result.trace),
        );
        // Accounting identity.
        assert_eq!(
            result.metrics.breakdown.total(),
            result.metrics.total_added_latency
        );
    }
}

#[test]
fn three_setup_variants_pay_a_response_call_setup() {
    let cal = calibration();
    for (caller, callee) in [
        (LandlineTruecall, LandlineTruecall),
        (Cellular, Cellular),
        (Cellular, Sip),
    ] {
        let topo = pair_topology(caller, callee);
        let scenario = Scenario::honest("alice", "bob", 2);
        let m = run_scenario(&topo, &scenario, &cal, 2).unwrap().metrics;
        assert_eq!(m.variant, Some(Variant::DtmfDtmf3Setup));
        assert!(m.breakdown.response_call_setup > SimDuration::ZERO);
        assert_eq!(m.call_setups, 3);
    }
    // 2-setup forms record zero there.
    let topo = pair_topology(Sip, Cellular);
    let m = run_scenario(&topo, &Scenario::honest("alice", "bob", 2), &cal, 2)
        .unwrap()
        .metrics;
    assert_eq!(m.variant, Some(Variant::DtmfDtmf2Setup));
    assert_eq!(m.breakdown.response_call_setup, SimDuration::ZERO);
}

#[test]
fn unflagged_call_rings_immediately_without_verification() {
    let cal = calibration();
    let mut topo = pair_topology(Sip, Sip);
    topo.endpoints[0].name = "Alice".to_string(); // no flag
    let scenario = Scenario::honest("alice", "bob", 3);
    let m = run_scenario(&topo, &scenario, &cal, 3).unwrap().metrics;
    assert_eq!(m.outcome, VerificationStatus::NotAttempted);
    assert_eq!(m.total_added_latency, SimDuration::ZERO);
    assert_eq!(m.call_setups, 1);
    let ring = &m.rings[0];
    assert!(ring.shows_unverified_warning());
    assert_eq!(
        latency_breakdown(&m).unwrap_err(),
        BreakdownError::NotApplicable
    );
}

#[test]
fn local_contact_triggers_verification_without_flag() {
    let cal = calibration();
    let mut topo = pair_topology(Sip, Sip);
    topo.endpoints[0].name = "Alice".to_string();
    topo.endpoints[1].local_contacts = vec!["5551230001".to_string()];
    let scenario = Scenario::honest("alice", "bob", 3);
    let m = run_scenario(&topo, &scenario, &cal, 3).unwrap().metrics;
    assert_eq!(m.outcome, VerificationStatus::Verified);
}

#[test]
fn charges_only_for_answered_calls() {
    let cal = calibration();
    // cli-dtmf: initial call answered (charged to alice), verification call
    // abandoned (free for bob).
    let topo = pair_topology(Sip, Sip);
    let m = run_scenario(&topo, &Scenario::honest("alice", "bob", 5), &cal, 5)
        .unwrap()
        .metrics;
    assert_eq!(m.charges["alice"], 1);
    assert_eq!(m.charges["bob"], 0);
    // Abandoned verification call present in the CDR.
    assert!(m.cdr.iter().any(|e| e.abandoned && e.caller == "bob"));
    assert_eq!(m.cdr.len(), 2);
}

#[test]
fn timeout_on_dropped_challenge_still_rings() {
    let cal = calibration();
    let topo = pair_topology(Sip, Sip);
    let mut scenario = Scenario::honest("alice", "bob", 8);
    scenario.fault = FaultInjection {
        drop_challenge: true,
        drop_response: false,
    };
    let result = run_scenario(&topo, &scenario, &cal, 8).unwrap();
    let m = &result.metrics;
    assert_eq!(m.outcome, VerificationStatus::NotVerified);
    assert_eq!(m.total_added_latency, SimDuration::from_ms(30_000));
    assert_eq!(m.breakdown.total(), m.total_added_latency);
    assert_eq!(m.rings.len(), 1);
    assert!(m.rings[0].shows_unverified_warning());
    assert!(m.verifications[0].timed_out);
}

#[test]
fn timeout_on_dropped_response_still_rings() {
    let cal = calibration();
    for (caller, callee) in [(Sip, Sip), (Cellular, Cellular), (LandlineTruecall, Sip)] {
        let topo = pair_topology(caller, callee);
        let mut scenario = Scenario::honest("alice", "bob", 9);
        scenario.fault = FaultInjection {
            drop_challenge: false,
            drop_response: true,
        };
        let result = run_scenario(&topo, &scenario, &cal, 9).unwrap();
        let m = &result.metrics;
        assert_eq!(m.outcome, VerificationStatus::NotVerified, "({caller},{callee})");
        assert_eq!(m.rings.len(), 1, "({caller},{callee})");
        assert_eq!(m.breakdown.total(), m.total_added_latency);
    }
}

#[test]
fn spoofed_line_is_delivered_verbatim_and_challenge_goes_to_owner() {
    let cal = calibration();
    let topo = attack_topology();
    let mut scenario = Scenario::honest("eve", "bob", 4);
    scenario.attack = Some(AdversaryStrategy::SpoofAndGuess {
        victim: "5551230001".to_string(),
        guess_digits: 4,
    });
    let result = run_scenario(&topo, &scenario, &cal, 4).unwrap();
    let m = &result.metrics;
    // Bob's display shows the victim's number even though eve placed the call.
    let ring = m.rings.iter().find(|r| r.endpoint == "bob").unwrap();
    assert_eq!(ring.displayed_number, "5551230001");
    // The challenge went to alice (the true owner), who filtered it.
    assert_eq!(m.filtered_unsolicited["alice"], 1);
    // Eve's guess almost surely misses; the call still rings.
    assert_eq!(m.outcome, VerificationStatus::NotVerified);
}

#[test]
fn downgrade_attack_yields_not_attempted_with_warning() {
    let cal = calibration();
    let topo = attack_topology();
    let mut scenario = Scenario::honest("eve", "bob", 4);
    scenario.attack = Some(AdversaryStrategy::Downgrade {
        victim: "5551230001".to_string(),
    });
    let stats = run_attack(&topo, &scenario, &cal, 50, 11).unwrap();
    assert_eq!(stats.verified, 0);
    assert_eq!(stats.not_attempted, 50);
    assert_eq!(stats.rings, 50);
    assert_eq!(stats.warning_rings, 50);
}

#[test]
fn reflected_dos_calls_are_filtered_and_traceable() {
    let cal = calibration();
    let topo = attack_topology();
    let mut scenario = Scenario::honest("eve", "bob", 4);
    scenario.attack = Some(AdversaryStrategy::ReflectedDos {
        victim: "5551230001".to_string(),
        calls: 10,
        interval_ms: 35_000,
    });
    let stats = run_attack(&topo, &scenario, &cal, 1, 13).unwrap();
    assert_eq!(stats.victim_filtered, 10);
    assert_eq!(stats.reflected_paired, 10);
    assert_eq!(stats.reflected_unpaired, 0);
    assert_eq!(stats.verified, 0);
    // Every spoofed call still rang at bob, with the warning.
    assert_eq!(stats.rings, 10);
    assert_eq!(stats.warning_rings, 10);
}

#[test]
fn forwarded_number_verifies_through_the_forward() {
    // A VoIP endpoint presents its cellular number on outbound calls; the
    // cellular endpoint forwards incoming (verification) calls back to the
    // VoIP device, so the challenge reaches the right program.
    let cal = calibration();
    let mut desk = endpoint("desk", "5551230001", "Alice*", Sip);
    desk.present_number = Some("5551230002".to_string());
    let mut mobile = endpoint("mobile", "5551230002", "", Cellular);
    mobile.forward_to = Some("desk".to_string());
    mobile.role = EndpointRole::Plain;
    let bob = endpoint("bob", "5551230003", "Bob*", Sip);
    let topo = topology(vec![desk, mobile, bob]);

    let scenario = Scenario::honest("desk", "bob", 6);
    let result = run_scenario(&topo, &scenario, &cal, 6).unwrap();
    let m = &result.metrics;
    assert_eq!(
        m.outcome,
        VerificationStatus::Verified,
        "trace:\n{}",
        trace_to_string(&result.trace)
    );
    // Bob saw and verified the mobile number, not the desk's.
    let ring = m.rings.iter().find(|r| r.endpoint == "bob").unwrap();
    assert_eq!(ring.displayed_number, "5551230002");
    // The verification call was dialed to the mobile number.
    assert!(m.cdr.iter().any(|e| e.caller == "bob" && e.dialed_number == "5551230002"));
}

#[test]
fn pbx_extension_verifies_behind_the_org_number() {
    // An extension presents the organization's single outbound number. The
    // verifier calls that number back; the PBX matches the index echoed in
    // the caller name and forwards the challenge to the extension.
    let cal = calibration();
    let mut org = endpoint("org", "5551239000", "Acme*", Sip);
    org.role = EndpointRole::Pbx;
    let mut ext = endpoint("ext1", "5551237001", "", Sip);
    ext.pbx_host = Some("org".to_string());
    let bob = endpoint("bob", "5551230002", "Bob*", Sip);
    let topo = topology(vec![org, ext, bob]);

    let scenario = Scenario::honest("ext1", "bob", 12);
    let result = run_scenario(&topo, &scenario, &cal, 12).unwrap();
    let m = &result.metrics;
    assert_eq!(
        m.outcome,
        VerificationStatus::Verified,
        "trace:\n{}",
        trace_to_string(&result.trace)
    );
    // Bob saw the org number with an indexed, flagged name.
    let ring = m.rings.iter().find(|r| r.endpoint == "bob").unwrap();
    assert_eq!(ring.displayed_number, "5551239000");
    assert!(ring.displayed_name.starts_with("Acme "));
    assert!(ring.displayed_name.ends_with('*'));
    // The verification call was dialed to the org number, not the extension.
    assert!(m.cdr.iter().any(|e| e.caller == "bob" && e.dialed_number == "5551239000"));
    // The PBX forwarded rather than filtering.
    assert_eq!(m.filtered_unsolicited["org"], 0);
}

#[test]
fn multi_hop_route_with_gateways_verifies() {
    // No direct link: sip <-> pstn <-> cellular. DTMF crosses two gateways.
    let cal = calibration();
    let mut topo = topology(vec![
        endpoint("alice", "5551230001", "Alice*", Sip),
        endpoint("relay", "5551230005", "Relay*", LandlineTruecall),
        endpoint("bob", "5551230002", "Bob*", Cellular),
    ]);
    topo.mesh = false;
    topo.links = vec![
        civ_core::signaling::LinkConfig {
            a: "alice".to_string(),
            b: "relay".to_string(),
            noise: Default::default(),
        },
        civ_core::signaling::LinkConfig {
            a: "relay".to_string(),
            b: "bob".to_string(),
            noise: Default::default(),
        },
    ];
    let scenario = Scenario::honest("alice", "bob", 14);
    let result = run_scenario(&topo, &scenario, &cal, 14).unwrap();
    assert_eq!(
        result.metrics.outcome,
        VerificationStatus::Verified,
        "trace:\n{}",
        trace_to_string(&result.trace)
    );
}

#[test]
fn partitioned_topology_is_unroutable() {
    let cal = calibration();
    let mut topo = pair_topology(Sip, Sip);
    topo.mesh = false; // no links at all
    let scenario = Scenario::honest("alice", "bob", 15);
    let result = run_scenario(&topo, &scenario, &cal, 15).unwrap();
    // The call never goes anywhere: no sessions, no verification, no rings.
    assert_eq!(result.metrics.call_setups, 0);
    assert_eq!(result.metrics.outcome, VerificationStatus::NotAttempted);
}

#[test]
fn mismatched_challenge_lengths_end_not_verified() {
    // The verifier issues 5-digit challenges; the caller expects 4. The
    // challenge is not recognized, nothing is echoed, and the verifier times
    // out into NotVerified while the call still rings.
    let cal = calibration();
    let mut topo = pair_topology(Sip, Sip);
    topo.endpoints[1].challenge_len = 5;
    let scenario = Scenario::honest("alice", "bob", 16);
    let result = run_scenario(&topo, &scenario, &cal, 16).unwrap();
    let m = &result.metrics;
    assert_eq!(m.outcome, VerificationStatus::NotVerified);
    assert_eq!(m.rings.len(), 1);
    assert!(m.rings[0].shows_unverified_warning());
}

#[test]
fn deterministic_traces_for_same_seed() {
    let cal = calibration();
    let topo = pair_topology(Cellular, LandlineTruecall);
    let scenario = Scenario::honest("alice", "bob", 21);
    let a = run_scenario(&topo, &scenario, &cal, 21).unwrap();
    let b = run_scenario(&topo, &scenario, &cal, 21).unwrap();
    assert_eq!(trace_to_string(&a.trace), trace_to_string(&b.trace));
    assert_eq!(a.metrics, b.metrics);
    let c = run_scenario(&topo, &scenario, &cal, 22).unwrap();
    assert_ne!(
        a.metrics.verifications[0].challenge,
        c.metrics.verifications[0].challenge
    );
}

#[test]
fn concurrent_flagged_calls_queue_and_both_verify() {
    // Two flagged callers hitting the same verifier at once: the second
    // verification waits for the first; both end Verified with distinct
    // challenges and no cross-matching.
    let cal = calibration();
    let topo = topology(vec![
        endpoint("alice", "5551230001", "Alice*", Sip),
        endpoint("bob", "5551230002", "Bob*", Sip),
        endpoint("carol", "5551230003", "Carol*", Sip),
    ]);
    let mut scenario = Scenario::honest("alice", "bob", 31);
    scenario.extra_callers = vec!["carol".to_string()];
    let result = run_scenario(&topo, &scenario, &cal, 31).unwrap();
    let m = &result.metrics;
    assert_eq!(
        m.verifications.len(),
        2,
        "trace:\n{}",
        trace_to_string(&result.trace)
    );
    for v in &m.verifications {
        assert_eq!(v.outcome, VerificationStatus::Verified);
    }
    assert_ne!(m.verifications[0].challenge, m.verifications[1].challenge);
    // The second verification started only after the first rang.
    assert!(m.verifications[1].started >= m.verifications[0].rang.unwrap());
    assert_eq!(m.rings.len(), 2);
}
