// Copyright 2026 The flexheg-sim Authors
// SPDX-License-Identifier: Apache-2.0

use flexheg_core::device::DeviceConfig;
use flexheg_core::identity::generate_identity;
use flexheg_core::netsim::{measure_rtt, verify_location, Landmark, LocationMode, NetworkModel, Node, Position};
use flexheg_core::policy::{QuorumConfig, Ruleset};
use flexheg_core::time::SimTime;
use flexheg_core::GuaranteeProcessorState;
use proptest::prelude::*;

const SPAN_M: i64 = 5_000_000;

fn device(seed: u8) -> GuaranteeProcessorState {
    let auth = generate_identity([250; 32]);
    let quorum = QuorumConfig::new(vec![*auth.public_key()], 1).unwrap();
    let config = DeviceConfig::new(Ruleset::full("main", 1, vec![], SimTime::MAX), quorum);
    GuaranteeProcessorState::new(generate_identity([seed; 32]), config, SimTime(0)).unwrap()
}

/// `rtt` proves no more than the true distance iff
/// `(rtt * v / 2e6)^2 >= dx^2 + dy^2`, compared exactly.
fn bound_covers(rtt_ns: u64, v_km_s: u64, dx: i64, dy: i64) -> bool {
    let lhs = rtt_ns as u128 * v_km_s as u128;
    let d2 = (dx as i128 * dx as i128 + dy as i128 * dy as i128) as u128;
    lhs * lhs >= 4_000_000_000_000 * d2
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn bounds_never_undercut_true_distance(
        a in (-SPAN_M..SPAN_M, -SPAN_M..SPAN_M),
        b in (-SPAN_M..SPAN_M, -SPAN_M..SPAN_M),
        proc_ns in (0u64..50_000, 0u64..50_000),
        v in 50_000u64..300_000,
        delays in (0u64..20_000_000, 0u64..20_000_000),
    ) {
        let lm = Landmark::new(generate_identity([9; 32]));
        let dev = device(1);
        let mut net = NetworkModel::new(v);
        net.add_node(lm.device_id(), Node { position: Position::from_m(a.0, a.1), processing_delay_ns: proc_ns.0 });
        net.add_node(dev.device_id(), Node { position: Position::from_m(b.0, b.1), processing_delay_ns: proc_ns.1 });
        let (lo, hi) = (delays.0.min(delays.1), delays.0.max(delays.1));
        let r_lo = measure_rtt(&mut net, lm.device_id(), dev.identity(), [1; 32], lo, SimTime(0)).unwrap().rtt_ns;
        let r_hi = measure_rtt(&mut net, lm.device_id(), dev.identity(), [2; 32], hi, SimTime(0)).unwrap().rtt_ns;
        prop_assert!(r_lo <= r_hi);
        prop_assert!(bound_covers(r_lo, v, a.0 - b.0, a.1 - b.1));

        let d_true = ((a.0 - b.0) as f64).hypot((a.1 - b.1) as f64);
        prop_assert!(net.bound_m(r_lo) as f64 >= d_true.floor());
        for mode in [LocationMode::LandmarkInitiated, LocationMode::DeviceInitiatedAnonymous] {
            let radius = d_true.floor() as u64;
            let out = verify_location(&mut net, &dev, &lm, radius.saturating_sub(1), mode, lo, [3; 32], SimTime(0)).unwrap();
            prop_assert!(!out.region_ok || radius == 0);
        }
    }

    #[test]
    fn far_devices_fail_radius_checks(angle in 0.0f64..std::f64::consts::TAU, extra_m in 0i64..2_000_000, delay in 0u64..5_000_000) {
        let lm = Landmark::new(generate_identity([9; 32]));
        let dev = device(1);
        let r = 1_500_000.0 + extra_m as f64;
        let mut net = NetworkModel::default();
        net.add_node(lm.device_id(), Node::default());
        net.add_node(dev.device_id(), Node { position: Position::from_m((r * angle.cos()).round() as i64, (r * angle.sin()).round() as i64), processing_delay_ns: 0 });
        for mode in [LocationMode::LandmarkInitiated, LocationMode::DeviceInitiatedAnonymous] {
            let out = verify_location(&mut net, &dev, &lm, 1_000_000, mode, delay, [4; 32], SimTime(0)).unwrap();
            prop_assert!(!out.region_ok);
            prop_assert!(out.claim.is_none());
        }
    }
}
