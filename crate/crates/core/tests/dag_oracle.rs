// Copyright 2026 The flexheg-sim Authors
// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeSet;

use flexheg_core::claim::Statement;
use flexheg_core::identity::generate_identity;
use flexheg_core::receipts::{claim_flop_below, emit_receipt, recheck_claim, ReceiptError, ReceiptRequest, INIT_TAG};
use flexheg_core::time::SimTime;
use flexheg_core::{DeviceIdentity, OpClass, ReceiptDag, ReceiptId};
use proptest::prelude::*;

/// A DAG as plain parent lists over node indices.
#[derive(Clone, Debug)]
struct Shape {
    flop: Vec<u64>,
    parents: Vec<Vec<usize>>,
}

fn shape(max_nodes: usize) -> impl Strategy<Value = Shape> {
    (1..=max_nodes).prop_flat_map(|n| {
        let flop = prop::collection::vec(0u64..1_000_000, n);
        let parents = (0..n)
            .map(|i| if i == 0 { Just(vec![]).boxed() } else { prop::collection::vec(0..i, 0..4).boxed() })
            .collect::<Vec<_>>();
        (flop, parents).prop_map(|(flop, parents)| Shape {
            flop,
            parents: parents.into_iter().map(|p| p.into_iter().collect::<BTreeSet<_>>().into_iter().collect()).collect(),
        })
    })
}

fn build(shape: &Shape, devices: &[DeviceIdentity]) -> (ReceiptDag, Vec<ReceiptId>) {
    let mut dag = ReceiptDag::new();
    let mut ids = Vec::new();
    for (i, parents) in shape.parents.iter().enumerate() {
        let mut req = ReceiptRequest::new(OpClass::TrainingStep)
            .parents(parents.iter().map(|p| ids[*p]))
            .flop(shape.flop[i])
            .interval(SimTime(i as u64), SimTime(i as u64 + 1));
        if parents.is_empty() {
            req = req.tag(INIT_TAG);
        }
        let r = emit_receipt(&devices[i % devices.len()], &dag, req).unwrap();
        ids.push(r.id());
        dag.insert(r).unwrap();
    }
    (dag, ids)
}

/// Sums FLOP over the ancestor set found by exhaustive search.
fn oracle_total(shape: &Shape, node: usize) -> u64 {
    let mut seen = vec![false; shape.flop.len()];
    let mut stack = vec![node];
    while let Some(n) = stack.pop() {
        if !std::mem::replace(&mut seen[n], true) {
            stack.extend(&shape.parents[n]);
        }
    }
    seen.iter().zip(&shape.flop).filter(|(s, _)| **s).map(|(_, f)| f).sum()
}

fn devices() -> Vec<DeviceIdentity> {
    (1..=3).map(|i| generate_identity([i; 32])).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn totals_match_oracle(s in shape(60)) {
        let (dag, ids) = build(&s, &devices());
        for (i, id) in ids.iter().enumerate() {
            prop_assert_eq!(dag.total_flop(id).unwrap(), oracle_total(&s, i));
        }
    }

    #[test]
    fn redundant_edges_do_not_change_totals(s in shape(40), extra in prop::collection::vec(any::<prop::sample::Index>(), 1..4)) {
        let n = s.flop.len();
        prop_assume!(n >= 3);
        let devs = devices();
        let (dag, ids) = build(&s, &devs);
        let last = n - 1;
        let mut redundant = s.clone();
        // Linking the tip to one of its own ancestors adds a path, not a node.
        let ancestors: Vec<usize> = (0..last).filter(|a| oracle_total(&Shape { flop: (0..n).map(|k| u64::from(k == *a)).collect(), ..s.clone() }, last) == 1).collect();
        prop_assume!(!ancestors.is_empty());
        for e in &extra {
            let a = ancestors[e.index(ancestors.len())];
            if !redundant.parents[last].contains(&a) {
                redundant.parents[last].push(a);
            }
        }
        let (dag2, ids2) = build(&redundant, &devs);
        prop_assert_eq!(dag.total_flop(&ids[last]).unwrap(), dag2.total_flop(&ids2[last]).unwrap());
    }

    #[test]
    fn totals_are_monotone_along_edges(s in shape(60)) {
        let (dag, ids) = build(&s, &devices());
        for (i, parents) in s.parents.iter().enumerate() {
            let t = dag.total_flop(&ids[i]).unwrap();
            for p in parents {
                prop_assert!(dag.total_flop(&ids[*p]).unwrap() <= t);
            }
        }
    }

    #[test]
    fn below_claims_are_sound(s in shape(30)) {
        let devs = devices();
        let (dag, ids) = build(&s, &devs);
        let tip = *ids.last().unwrap();
        let total = dag.total_flop(&tip).unwrap();
        for l in [total.saturating_sub(1), total, total + 1] {
            match claim_flop_below(&dag, &tip, l, &devs[0], SimTime(0)) {
                Ok(claim) => {
                    prop_assert!(total < l);
                    prop_assert_eq!(&claim.body.statement, &Statement::FlopBelow { threshold: l });
                    prop_assert_eq!(recheck_claim(&dag, &claim), Some(true));
                }
                Err(ReceiptError::ThresholdExceeded { .. }) => prop_assert!(total >= l),
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }
    }
}
