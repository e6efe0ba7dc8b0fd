// Copyright 2026 The flexheg-sim Authors
// SPDX-License-Identifier: Apache-2.0

//! Simulation core for hardware-enabled compute governance: device
//! identities, receipt DAGs and claims, on-device policy, the guarantee
//! processor, and a deterministic network model.

pub mod claim;
pub mod codec;
pub mod device;
pub mod identity;
pub mod netsim;
pub mod policy;
pub mod receipts;
pub mod time;

pub use claim::{Claim, ClaimBody, ClaimKind, Recipient, Statement, Subject};
pub use codec::Digest;
pub use device::{GuaranteeProcessorState, Restriction, WorkloadRequest};
pub use identity::{generate_identity, DeviceId, DeviceIdentity, KeyRing, PublicIdentity, PublicKey};
pub use receipts::{OpClass, Receipt, ReceiptDag, ReceiptId};
pub use time::SimTime;
