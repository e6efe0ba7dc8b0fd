// Copyright 2026 The flexheg-sim Authors
// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeSet;

use flexheg_core::device::{DeviceConfig, DeviceError, EvalSuite, Probe};
use flexheg_core::identity::generate_identity;
use flexheg_core::policy::{QuorumConfig, Rule, Ruleset};
use flexheg_core::receipts::INIT_TAG;
use flexheg_core::time::SimTime;
use flexheg_core::{DeviceIdentity, GuaranteeProcessorState, OpClass, ReceiptId, WorkloadRequest};
use proptest::prelude::*;

const LIMIT: u64 = 5_000;
const EVAL_EVERY: u64 = 1_200;

#[derive(Clone, Debug)]
enum Op {
    Init,
    Train { lineage: prop::sample::Index, flop: u64 },
    Merge { a: prop::sample::Index, b: prop::sample::Index, flop: u64 },
    Eval { lineage: prop::sample::Index },
    Wait { ms: u64 },
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        1 => Just(Op::Init),
        8 => (any::<prop::sample::Index>(), 0u64..500).prop_map(|(lineage, flop)| Op::Train { lineage, flop }),
        1 => (any::<prop::sample::Index>(), any::<prop::sample::Index>(), 0u64..300).prop_map(|(a, b, flop)| Op::Merge { a, b, flop }),
        2 => any::<prop::sample::Index>().prop_map(|lineage| Op::Eval { lineage }),
        1 => (0u64..1_000).prop_map(|ms| Op::Wait { ms }),
    ]
}

fn device() -> GuaranteeProcessorState {
    let auth = generate_identity([90; 32]);
    let quorum = QuorumConfig::new(vec![*auth.public_key()], 1).unwrap();
    let rules = vec![Rule::MaxTrainingFlop { limit: LIMIT }, Rule::RequireEvalEvery { interval_flop: EVAL_EVERY }];
    let config = DeviceConfig::new(Ruleset::full("main", 1, rules, SimTime::MAX), quorum);
    GuaranteeProcessorState::new(generate_identity([1; 32]), config, SimTime(0)).unwrap()
}

fn suite() -> EvalSuite {
    EvalSuite { name: "hidden-suite-plaintext".into(), probes: (0..16).map(|i| Probe { index: i * 7, threshold: 128 }).collect() }
}

/// Checks, from the DAG alone, that every training receipt carries at most
/// `EVAL_EVERY` FLOP outside the ancestries of models evaluated before it.
fn eval_gate_holds(dev: &GuaranteeProcessorState) -> bool {
    let dag = dev.dag();
    let ancestry = |id: ReceiptId| {
        let mut seen = BTreeSet::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            if seen.insert(n) {
                stack.extend(dag.get(&n).unwrap().parents().iter().copied());
            }
        }
        seen
    };
    let mut evaluated: Vec<ReceiptId> = Vec::new();
    for r in dag.iter() {
        match r.op_class() {
            OpClass::Evaluation => evaluated.extend(r.parents()),
            OpClass::TrainingStep => {
                let anc = ancestry(r.id());
                let covered: BTreeSet<ReceiptId> =
                    evaluated.iter().filter(|m| anc.contains(m)).flat_map(|m| ancestry(*m)).collect();
                let uncovered: u64 = anc.difference(&covered).map(|id| dag.get(id).unwrap().flop()).sum();
                if uncovered > EVAL_EVERY {
                    return false;
                }
            }
            _ => {}
        }
    }
    true
}

fn run(ops: &[Op], evaluator: &DeviceIdentity) -> Result<(), TestCaseError> {
    let mut dev = device();
    let mut heads: Vec<ReceiptId> = Vec::new();
    let mut now = SimTime(0);
    for op in ops {
        let before = dev.fingerprint();
        let outcome = match op {
            Op::Init => dev.handle_workload(&WorkloadRequest::new(OpClass::TrainingStep).tag(INIT_TAG), now).map(|r| {
                heads.push(r.id());
            }),
            Op::Train { lineage, flop } if !heads.is_empty() => {
                let i = lineage.index(heads.len());
                dev.handle_workload(&WorkloadRequest::new(OpClass::TrainingStep).parents([heads[i]]).flop(*flop), now)
                    .map(|r| heads[i] = r.id())
            }
            Op::Merge { a, b, flop } if heads.len() >= 2 && heads[a.index(heads.len())] != heads[b.index(heads.len())] =>
            {
                let (i, j) = (a.index(heads.len()), b.index(heads.len()));
                let req = WorkloadRequest::new(OpClass::TrainingStep).parents([heads[i], heads[j]]).flop(*flop);
                dev.handle_workload(&req, now).map(|r| {
                    heads[i] = r.id();
                    heads[j] = r.id();
                })
            }
            Op::Eval { lineage } if !heads.is_empty() => {
                let model = heads[lineage.index(heads.len())];
                let sealed = evaluator.seal_to(dev.identity().public_key(), &suite().to_bytes(), now).unwrap();
                dev.run_private_eval(&model, &sealed, &evaluator.public(), now).map(|_| ())
            }
            Op::Wait { ms } => {
                now = now + *ms;
                Ok(())
            }
            _ => Ok(()),
        };
        match outcome {
            Ok(()) => {}
            Err(DeviceError::Denied(_)) => prop_assert_eq!(dev.fingerprint(), before),
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
        for (root, head) in dev.lineage_heads() {
            prop_assert_eq!(dev.flop_counters()[root], dev.dag().total_flop(head).unwrap());
        }
        for r in dev.dag().iter() {
            if r.op_class() == OpClass::TrainingStep {
                prop_assert!(dev.dag().total_flop(&r.id()).unwrap() <= LIMIT);
            }
        }
    }
    prop_assert!(eval_gate_holds(&dev));
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn counters_gating_and_denials(ops in prop::collection::vec(op(), 500..600)) {
        run(&ops, &generate_identity([91; 32]))?;
    }
}

#[test]
fn eval_result_leaks_neither_suite_nor_weights() {
    let evaluator = generate_identity([91; 32]);
    let mut dev = device();
    let root = dev.handle_workload(&WorkloadRequest::new(OpClass::TrainingStep).tag(INIT_TAG), SimTime(0)).unwrap().id();
    let model = dev.handle_workload(&WorkloadRequest::new(OpClass::TrainingStep).parents([root]).flop(10), SimTime(1)).unwrap().id();
    let suite_bytes = suite().to_bytes();
    let sealed = evaluator.seal_to(dev.identity().public_key(), &suite_bytes, SimTime(2)).unwrap();
    let out = dev.run_private_eval(&model, &sealed, &evaluator.public(), SimTime(2)).unwrap();
    let weights = flexheg_core::device::toy_weights(&model);
    for blob in [out.result.to_bytes(), out.sealed_result.to_bytes(), sealed.to_bytes()] {
        assert!(!blob.windows(b"hidden-suite-plaintext".len()).any(|w| w == b"hidden-suite-plaintext"));
        assert!(!blob.windows(16).any(|w| weights.windows(16).any(|x| x == w)));
    }
}
