// Copyright 2026 The flexheg-sim Authors
// SPDX-License-Identifier: Apache-2.0

use flexheg_core::identity::{generate_identity, Attestation};
use flexheg_core::receipts::{claim_flop_below, emit_receipt, Receipt, ReceiptRequest, INIT_TAG};
use flexheg_core::time::SimTime;
use flexheg_core::{Claim, KeyRing, OpClass, ReceiptDag};
use proptest::prelude::*;

struct Fixture {
    ring: KeyRing,
    receipt: Vec<u8>,
    claim: Vec<u8>,
    attestation: Vec<u8>,
}

fn fixture() -> Fixture {
    let dev = generate_identity([3; 32]);
    let mut dag = ReceiptDag::new();
    let root = emit_receipt(&dev, &dag, ReceiptRequest::new(OpClass::TrainingStep).tag(INIT_TAG)).unwrap();
    dag.insert(root.clone()).unwrap();
    let step = emit_receipt(
        &dev,
        &dag,
        ReceiptRequest::new(OpClass::TrainingStep).parents([root.id()]).flop(600).tag("dataset:open").interval(SimTime(1), SimTime(9)),
    )
    .unwrap();
    dag.insert(step.clone()).unwrap();
    let claim = claim_flop_below(&dag, &step.id(), 1000, &dev, SimTime(10)).unwrap();
    Fixture {
        ring: [*dev.public_key()].into_iter().collect(),
        receipt: step.to_bytes(),
        claim: claim.to_bytes(),
        attestation: dev.sign(b"payload", SimTime(4)).unwrap().to_bytes(),
    }
}

fn flip(bytes: &[u8], bit: usize) -> Vec<u8> {
    let mut out = bytes.to_vec();
    out[bit / 8] ^= 1 << (bit % 8);
    out
}

#[test]
fn untouched_artifacts_verify() {
    let f = fixture();
    Receipt::from_bytes(&f.receipt).unwrap().verify(&f.ring).unwrap();
    Claim::from_bytes(&f.claim).unwrap().verify(&f.ring).unwrap();
    let att = Attestation::from_bytes(&f.attestation).unwrap();
    assert!(att.verify_in(&f.ring));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1500))]

    #[test]
    fn flipped_receipt_bits_are_detected(bit in any::<prop::sample::Index>()) {
        let f = fixture();
        let mutated = flip(&f.receipt, bit.index(f.receipt.len() * 8));
        if let Ok(r) = Receipt::from_bytes(&mutated) {
            prop_assert!(r.verify(&f.ring).is_err());
        }
    }

    #[test]
    fn flipped_claim_bits_are_detected(bit in any::<prop::sample::Index>()) {
        let f = fixture();
        let mutated = flip(&f.claim, bit.index(f.claim.len() * 8));
        if let Ok(c) = Claim::from_bytes(&mutated) {
            prop_assert!(c.verify(&f.ring).is_err());
        }
    }

    #[test]
    fn flipped_attestation_bits_are_detected(bit in any::<prop::sample::Index>()) {
        let f = fixture();
        let mutated = flip(&f.attestation, bit.index(f.attestation.len() * 8));
        if let Ok(a) = Attestation::from_bytes(&mutated) {
            prop_assert!(!a.verify_in(&f.ring) || a.payload != b"payload");
        }
    }

    #[test]
    fn truncated_receipts_do_not_decode(cut in any::<prop::sample::Index>()) {
        let f = fixture();
        let n = cut.index(f.receipt.len());
        prop_assert!(Receipt::from_bytes(&f.receipt[..n]).is_err());
    }
}
