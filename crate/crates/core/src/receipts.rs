// Copyright 2026 The flexheg-sim Authors
// SPDX-License-Identifier: Apache-2.0

//! Workload receipts, the provenance DAG they form, and aggregation of that
//! DAG into minimal-disclosure claims.
//!
//! FLOP and data volumes are attributed to receipts (nodes), never to edges.
//! Every total is a sum over the *set* of ancestors of a result, so a shared
//! ancestor reached along several paths is counted once.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::claim::{Claim, ClaimBody, Recipient, Statement, Subject, QUALIFIER_EXTERNAL_INPUTS};
use crate::codec::{DecodeError, Decoder, Digest, Encoder};
use crate::identity::{DeviceId, DeviceIdentity, IdentityError, KeyRing, Signature};
use crate::time::{Interval, SimTime};

const DOMAIN_RECEIPT: &str = "flexheg/receipt/v1";
const DOMAIN_RECEIPT_BODY: &str = "flexheg/receipt-body/v1";
const DOMAIN_RECEIPT_SIGNATURE: &str = "flexheg/receipt-signature/v1";

/// Tag carried by the origin receipt of a model lineage.
pub const INIT_TAG: &str = "random_init";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReceiptError {
    #[error("parent {0} is neither a known receipt nor a declared root")]
    UnknownParent(ReceiptId),
    #[error("parent {0} listed more than once")]
    DuplicateParent(ReceiptId),
    #[error("receipt {0} would create a cycle")]
    CycleDetected(ReceiptId),
    #[error("unknown receipt {0}")]
    UnknownReceipt(ReceiptId),
    #[error("receipt interval ends before it starts")]
    InvalidInterval,
    #[error("receipt id does not match its body")]
    IdMismatch(ReceiptId),
    #[error("signature on receipt {0} does not verify")]
    BadSignature(ReceiptId),
    #[error("no key known for producer {0}")]
    UnknownProducer(DeviceId),
    #[error("threshold {threshold} not met by the result")]
    ThresholdExceeded { threshold: u64 },
    #[error("claim refused: {0}")]
    ClaimRefused(String),
    #[error("accounting gap: receipts cover {observed_mflop} mFLOP of {capacity_mflop} mFLOP capacity")]
    AccountingGap { observed_mflop: u128, capacity_mflop: u128 },
    #[error("no capacity declared for device {0}")]
    UnknownDevice(DeviceId),
    #[error(transparent)]
    Identity(#[from] IdentityError),
}

/// Digest of a receipt's canonical body.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReceiptId(pub Digest);

impl fmt::Debug for ReceiptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ReceiptId({})", self.0.short())
    }
}

impl fmt::Display for ReceiptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.short())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpClass {
    TrainingStep,
    Inference,
    DataTransform,
    Simulation,
    Evaluation,
    Transfer,
    Idle,
}

impl OpClass {
    pub const ALL: [OpClass; 7] = [
        OpClass::TrainingStep,
        OpClass::Inference,
        OpClass::DataTransform,
        OpClass::Simulation,
        OpClass::Evaluation,
        OpClass::Transfer,
        OpClass::Idle,
    ];

    /// Operation classes that count as AI workloads for `not_used_for_ai`.
    pub fn is_ai(self) -> bool {
        matches!(self, OpClass::TrainingStep | OpClass::Inference | OpClass::Evaluation)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OpClass::TrainingStep => "training_step",
            OpClass::Inference => "inference",
            OpClass::DataTransform => "data_transform",
            OpClass::Simulation => "simulation",
            OpClass::Evaluation => "evaluation",
            OpClass::Transfer => "transfer",
            OpClass::Idle => "idle",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.code() == code)
    }
}

impl fmt::Display for OpClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// External data consumed by a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DataRef {
    pub digest: Digest,
    pub bytes: u64,
}

/// Everything a producer attests to about one workload step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceiptBody {
    pub producer: DeviceId,
    pub op_class: OpClass,
    pub parents: Vec<ReceiptId>,
    pub flop: u64,
    pub data_in: Vec<DataRef>,
    pub tags: BTreeSet<String>,
    pub interval: Interval,
}

impl ReceiptBody {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.digest(&self.producer.0).u8(self.op_class.code());
        enc.list(self.parents.iter(), |e, p| {
            e.digest(&p.0);
        });
        enc.u64(self.flop);
        enc.list(self.data_in.iter(), |e, d| {
            e.digest(&d.digest).u64(d.bytes);
        });
        enc.list(self.tags.iter(), |e, t| {
            e.str(t);
        });
        enc.u64(self.interval.start.as_ms()).u64(self.interval.end.as_ms());
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new(DOMAIN_RECEIPT_BODY);
        self.encode_into(&mut enc);
        enc.finish()
    }

    fn decode_from(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut dec = Decoder::new(bytes, DOMAIN_RECEIPT_BODY)?;
        let producer = DeviceId(dec.digest("producer")?);
        let code = dec.u8("op class")?;
        let op_class =
            OpClass::from_code(code).ok_or(DecodeError::InvalidValue { field: "op class", value: u64::from(code) })?;
        let n = dec.count()?;
        let parents = (0..n).map(|_| dec.digest("parent").map(ReceiptId)).collect::<Result<_, _>>()?;
        let flop = dec.u64()?;
        let n = dec.count()?;
        let mut data_in = Vec::with_capacity(n);
        for _ in 0..n {
            data_in.push(DataRef { digest: dec.digest("data digest")?, bytes: dec.u64()? });
        }
        let n = dec.count()?;
        let tags = (0..n).map(|_| dec.str()).collect::<Result<_, _>>()?;
        let interval = Interval::new(SimTime(dec.u64()?), SimTime(dec.u64()?));
        dec.finish()?;
        Ok(Self { producer, op_class, parents, flop, data_in, tags, interval })
    }

    pub fn id(&self) -> ReceiptId {
        ReceiptId(Digest::tagged(DOMAIN_RECEIPT_BODY, &self.to_bytes()))
    }
}

fn signature_message(id: &ReceiptId) -> Vec<u8> {
    let mut enc = Encoder::new(DOMAIN_RECEIPT_SIGNATURE);
    enc.digest(&id.0);
    enc.finish()
}

/// A signed, immutable record of one workload step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    id: ReceiptId,
    body: ReceiptBody,
    signature: Signature,
}

impl Receipt {
    pub fn id(&self) -> ReceiptId {
        self.id
    }

    pub fn body(&self) -> &ReceiptBody {
        &self.body
    }

    pub fn producer(&self) -> DeviceId {
        self.body.producer
    }

    pub fn op_class(&self) -> OpClass {
        self.body.op_class
    }

    pub fn parents(&self) -> &[ReceiptId] {
        &self.body.parents
    }

    pub fn flop(&self) -> u64 {
        self.body.flop
    }

    pub fn data_bytes(&self) -> u64 {
        self.body.data_in.iter().map(|d| d.bytes).sum()
    }

    pub fn tags(&self) -> &BTreeSet<String> {
        &self.body.tags
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        self.body.tags.contains(tag)
    }

    pub fn interval(&self) -> Interval {
        self.body.interval
    }

    pub fn signature(&self) -> &Signature {
        &self.signature
    }

    /// Checks the id against the body and the signature against `ring`.
    pub fn verify(&self, ring: &KeyRing) -> Result<(), ReceiptError> {
        if self.body.id() != self.id {
            return Err(ReceiptError::IdMismatch(self.id));
        }
        let key = ring.get(&self.body.producer).ok_or(ReceiptError::UnknownProducer(self.body.producer))?;
        if !key.verify_raw(&signature_message(&self.id), &self.signature) {
            return Err(ReceiptError::BadSignature(self.id));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new(DOMAIN_RECEIPT);
        enc.digest(&self.id.0).nested(&self.body.to_bytes()).bytes(&self.signature.0);
        enc.finish()
    }

    /// Decodes without checking the id or signature; call [`Receipt::verify`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut dec = Decoder::new(bytes, DOMAIN_RECEIPT)?;
        let id = ReceiptId(dec.digest("receipt id")?);
        let body = ReceiptBody::decode_from(dec.bytes()?)?;
        let signature = Signature(dec.fixed::<64>("signature")?);
        dec.finish()?;
        Ok(Self { id, body, signature })
    }
}

/// Parameters of a step about to be receipted.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReceiptRequest {
    pub op_class: Option<OpClass>,
    pub parents: Vec<ReceiptId>,
    pub flop: u64,
    pub data_in: Vec<DataRef>,
    pub tags: BTreeSet<String>,
    pub interval: Interval,
}

impl ReceiptRequest {
    pub fn new(op_class: OpClass) -> Self {
        Self { op_class: Some(op_class), ..Default::default() }
    }

    pub fn parents(mut self, parents: impl IntoIterator<Item = ReceiptId>) -> Self {
        self.parents = parents.into_iter().collect();
        self
    }

    pub fn flop(mut self, flop: u64) -> Self {
        self.flop = flop;
        self
    }

    pub fn data(mut self, digest: Digest, bytes: u64) -> Self {
        self.data_in.push(DataRef { digest, bytes });
        self
    }

    pub fn tag(mut self, tag: &str) -> Self {
        self.tags.insert(tag.to_string());
        self
    }

    pub fn interval(mut self, start: SimTime, end: SimTime) -> Self {
        self.interval = Interval::new(start, end);
        self
    }
}

/// Signs a new receipt after checking its parents against `dag`.
///
/// The receipt is not inserted; callers append it with [`ReceiptDag::insert`].
pub fn emit_receipt(producer: &DeviceIdentity, dag: &ReceiptDag, request: ReceiptRequest) -> Result<Receipt, ReceiptError> {
    if !producer.is_active() {
        return Err(IdentityError::IdentityWiped(producer.device_id()).into());
    }
    let body = ReceiptBody {
        producer: producer.device_id(),
        op_class: request.op_class.unwrap_or(OpClass::Idle),
        parents: request.parents,
        flop: request.flop,
        data_in: request.data_in,
        tags: request.tags,
        interval: request.interval,
    };
    let id = body.id();
    dag.check_links(id, &body)?;
    let signature = producer.sign_raw(&signature_message(&id))?;
    Ok(Receipt { id, body, signature })
}

/// Receipts known to some party, keyed by id, plus declared origin digests.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReceiptDag {
    receipts: BTreeMap<ReceiptId, Receipt>,
    roots: BTreeSet<ReceiptId>,
    order: Vec<ReceiptId>,
}

impl ReceiptDag {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declares an origin that is not itself a receipt, such as an audited
    /// dataset digest. Parents and data inputs may reference it.
    pub fn declare_root(&mut self, origin: Digest) {
        self.roots.insert(ReceiptId(origin));
    }

    pub fn is_declared_root(&self, id: &ReceiptId) -> bool {
        self.roots.contains(id)
    }

    pub fn roots(&self) -> &BTreeSet<ReceiptId> {
        &self.roots
    }

    fn check_links(&self, id: ReceiptId, body: &ReceiptBody) -> Result<(), ReceiptError> {
        if !body.interval.is_valid() {
            return Err(ReceiptError::InvalidInterval);
        }
        let mut seen = BTreeSet::new();
        for parent in &body.parents {
            // A node is content-addressed over its parent list, so it can only
            // close a cycle by naming itself.
            if *parent == id {
                return Err(ReceiptError::CycleDetected(id));
            }
            if !seen.insert(*parent) {
                return Err(ReceiptError::DuplicateParent(*parent));
            }
            if !self.receipts.contains_key(parent) && !self.roots.contains(parent) {
                return Err(ReceiptError::UnknownParent(*parent));
            }
        }
        Ok(())
    }

    /// Appends a receipt, checking its id and links but not its signature.
    pub fn insert(&mut self, receipt: Receipt) -> Result<(), ReceiptError> {
        if receipt.body.id() != receipt.id {
            return Err(ReceiptError::IdMismatch(receipt.id));
        }
        if self.receipts.contains_key(&receipt.id) {
            return Ok(());
        }
        self.check_links(receipt.id, &receipt.body)?;
        if receipt.body.parents.is_empty() {
            self.roots.insert(receipt.id);
        }
        self.order.push(receipt.id);
        self.receipts.insert(receipt.id, receipt);
        Ok(())
    }

    /// Appends a receipt after verifying its signature against `ring`.
    pub fn insert_verified(&mut self, receipt: Receipt, ring: &KeyRing) -> Result<(), ReceiptError> {
        receipt.verify(ring)?;
        self.insert(receipt)
    }

    pub fn get(&self, id: &ReceiptId) -> Option<&Receipt> {
        self.receipts.get(id)
    }

    pub fn contains(&self, id: &ReceiptId) -> bool {
        self.receipts.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.receipts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.receipts.is_empty()
    }

    /// Receipts in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &Receipt> {
        self.order.iter().map(|id| &self.receipts[id])
    }

    /// The set of receipts `result` depends on, including itself. Declared
    /// roots that are not receipts are skipped.
    pub fn ancestors(&self, result: &ReceiptId) -> Result<BTreeSet<ReceiptId>, ReceiptError> {
        self.ancestors_of_all(std::slice::from_ref(result))
    }

    /// Union of the ancestor sets of several results.
    pub fn ancestors_of_all(&self, results: &[ReceiptId]) -> Result<BTreeSet<ReceiptId>, ReceiptError> {
        let mut seen = BTreeSet::new();
        let mut stack = Vec::new();
        for r in results {
            if self.receipts.contains_key(r) {
                stack.push(*r);
            } else if !self.roots.contains(r) {
                return Err(ReceiptError::UnknownReceipt(*r));
            }
        }
        while let Some(id) = stack.pop() {
            if !seen.insert(id) {
                continue;
            }
            for p in &self.receipts[&id].body.parents {
                if self.receipts.contains_key(p) && !seen.contains(p) {
                    stack.push(*p);
                }
            }
        }
        Ok(seen)
    }

    fn sum_over<F: Fn(&Receipt) -> u64>(&self, set: &BTreeSet<ReceiptId>, f: F) -> u64 {
        set.iter().map(|id| f(&self.receipts[id])).fold(0u64, u64::saturating_add)
    }

    /// Total FLOP that went into `result`, each ancestor counted once.
    pub fn total_flop(&self, result: &ReceiptId) -> Result<u64, ReceiptError> {
        self.require(result)?;
        Ok(self.sum_over(&self.ancestors(result)?, Receipt::flop))
    }

    /// Total FLOP over the union of ancestor sets of `results`.
    pub fn total_flop_of_all(&self, results: &[ReceiptId]) -> Result<u64, ReceiptError> {
        Ok(self.sum_over(&self.ancestors_of_all(results)?, Receipt::flop))
    }

    /// Total external data bytes consumed anywhere in the ancestry of `result`.
    pub fn total_data(&self, result: &ReceiptId) -> Result<u64, ReceiptError> {
        self.require(result)?;
        Ok(self.sum_over(&self.ancestors(result)?, Receipt::data_bytes))
    }

    fn require(&self, id: &ReceiptId) -> Result<&Receipt, ReceiptError> {
        self.receipts.get(id).ok_or(ReceiptError::UnknownReceipt(*id))
    }

    /// Origin receipts of the model lineages `results` belong to.
    pub fn lineage_roots(&self, results: &[ReceiptId]) -> Result<BTreeSet<ReceiptId>, ReceiptError> {
        Ok(self
            .ancestors_of_all(results)?
            .into_iter()
            .filter(|id| {
                let r = &self.receipts[id];
                r.body.parents.is_empty() && r.has_tag(INIT_TAG)
            })
            .collect())
    }

    /// Data inputs in the ancestry of `result` that trace to neither a
    /// receipt nor a declared root.
    pub fn external_inputs(&self, result: &ReceiptId) -> Result<Vec<DataRef>, ReceiptError> {
        let mut out = Vec::new();
        for id in self.ancestors(result)? {
            for d in &self.receipts[&id].body.data_in {
                let as_id = ReceiptId(d.digest);
                if !self.receipts.contains_key(&as_id) && !self.roots.contains(&as_id) {
                    out.push(*d);
                }
            }
        }
        Ok(out)
    }

    /// Whether any receipt in the ancestry of `result` carries `tag`.
    pub fn tag_in_ancestry(&self, result: &ReceiptId, tag: &str) -> Result<bool, ReceiptError> {
        self.require(result)?;
        Ok(self.ancestors(result)?.iter().any(|id| self.receipts[id].has_tag(tag)))
    }

    /// Ancestors that consumed external data without carrying `tag`.
    pub fn untagged_data_receipts(&self, result: &ReceiptId, tag: &str) -> Result<Vec<ReceiptId>, ReceiptError> {
        self.require(result)?;
        Ok(self
            .ancestors(result)?
            .into_iter()
            .filter(|id| {
                let r = &self.receipts[id];
                !r.body.data_in.is_empty() && !r.has_tag(tag)
            })
            .collect())
    }
}

/// Verifies every receipt `result` depends on: ids, signatures, and links.
pub fn verify_receipt_chain(dag: &ReceiptDag, ring: &KeyRing, result: &ReceiptId) -> Result<(), ReceiptError> {
    dag.require(result)?;
    for id in dag.ancestors(result)? {
        let receipt = &dag.receipts[&id];
        receipt.verify(ring)?;
        for p in &receipt.body.parents {
            if !dag.receipts.contains_key(p) && !dag.roots.contains(p) {
                return Err(ReceiptError::UnknownParent(*p));
            }
        }
    }
    Ok(())
}

fn qualified(body: ClaimBody, dag: &ReceiptDag, result: &ReceiptId) -> Result<ClaimBody, ReceiptError> {
    Ok(if dag.external_inputs(result)?.is_empty() { body } else { body.with_qualifier(QUALIFIER_EXTERNAL_INPUTS) })
}

/// "`result` was produced with less than `threshold` FLOP". Discloses the
/// threshold and the result id only.
pub fn claim_flop_below(
    dag: &ReceiptDag,
    result: &ReceiptId,
    threshold: u64,
    attester: &DeviceIdentity,
    now: SimTime,
) -> Result<Claim, ReceiptError> {
    if dag.total_flop(result)? >= threshold {
        return Err(ReceiptError::ThresholdExceeded { threshold });
    }
    let body = ClaimBody::new(Statement::FlopBelow { threshold }, Subject::Receipt(*result));
    Ok(Claim::issue(qualified(body, dag, result)?, attester, now)?)
}

/// Discloses the exact FLOP total of `result`.
pub fn claim_flop_exact(dag: &ReceiptDag, result: &ReceiptId, attester: &DeviceIdentity, now: SimTime) -> Result<Claim, ReceiptError> {
    let total = dag.total_flop(result)?;
    let body = ClaimBody::new(Statement::FlopExact { total }, Subject::Receipt(*result));
    Ok(Claim::issue(qualified(body, dag, result)?, attester, now)?)
}

/// "`result` was produced from less than `threshold` bytes of data".
pub fn claim_data_below(
    dag: &ReceiptDag,
    result: &ReceiptId,
    threshold: u64,
    attester: &DeviceIdentity,
    now: SimTime,
) -> Result<Claim, ReceiptError> {
    if dag.total_data(result)? >= threshold {
        return Err(ReceiptError::ThresholdExceeded { threshold });
    }
    let body = ClaimBody::new(Statement::DataBelow { threshold }, Subject::Receipt(*result));
    Ok(Claim::issue(qualified(body, dag, result)?, attester, now)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagMode {
    PresentAnywhere,
    AbsentEverywhere,
}

/// Claims that `tag` appears (or never appears) in the ancestry of `result`.
/// Refuses when the requested mode contradicts the DAG.
pub fn query_tags(
    dag: &ReceiptDag,
    result: &ReceiptId,
    tag: &str,
    mode: TagMode,
    attester: &DeviceIdentity,
    now: SimTime,
) -> Result<Claim, ReceiptError> {
    let present = dag.tag_in_ancestry(result, tag)?;
    let statement = match (mode, present) {
        (TagMode::PresentAnywhere, true) => Statement::TagPresent { tag: tag.to_string() },
        (TagMode::AbsentEverywhere, false) => Statement::TagAbsent { tag: tag.to_string() },
        (TagMode::PresentAnywhere, false) => {
            return Err(ReceiptError::ClaimRefused(format!("tag {tag:?} absent from ancestry")))
        }
        (TagMode::AbsentEverywhere, true) => {
            return Err(ReceiptError::ClaimRefused(format!("tag {tag:?} present in ancestry")))
        }
    };
    let body = ClaimBody::new(statement, Subject::Receipt(*result));
    Ok(Claim::issue(qualified(body, dag, result)?, attester, now)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccountingMode {
    /// Receipts (including idle receipts) add up to capacity.
    Balanced,
    /// Balanced, and no AI-class workload ran in the period.
    NotUsedForAi,
}

/// Compute accounting over a fleet for one period.
///
/// Sums the FLOP of every receipt produced by `capacity`'s devices whose
/// interval lies inside `period` and compares it with
/// `Σ rate × duration`. Arithmetic is in milli-FLOP so millisecond periods
/// stay exact.
#[allow(clippy::too_many_arguments)]
pub fn compute_accounting(
    dag: &ReceiptDag,
    devices: &BTreeSet<DeviceId>,
    period: Interval,
    capacity_flop_per_s: &BTreeMap<DeviceId, u64>,
    tolerance_flop: u64,
    mode: AccountingMode,
    attester: &DeviceIdentity,
    now: SimTime,
) -> Result<Claim, ReceiptError> {
    for d in devices {
        if !capacity_flop_per_s.contains_key(d) {
            return Err(ReceiptError::UnknownDevice(*d));
        }
    }
    let capacity_mflop: u128 =
        devices.iter().map(|d| u128::from(capacity_flop_per_s[d]) * u128::from(period.duration_ms())).sum();

    let in_scope: Vec<&Receipt> =
        dag.iter().filter(|r| devices.contains(&r.producer()) && period.contains(&r.interval())).collect();
    let observed_mflop: u128 = in_scope.iter().map(|r| u128::from(r.flop()) * 1000).sum();

    let gap = observed_mflop.abs_diff(capacity_mflop);
    if gap > u128::from(tolerance_flop) * 1000 {
        return Err(ReceiptError::AccountingGap { observed_mflop, capacity_mflop });
    }

    let subject = Subject::Devices(devices.clone());
    let statement = match mode {
        AccountingMode::Balanced => Statement::AccountingBalanced {
            period,
            capacity_flop_per_s: devices.iter().map(|d| (*d, capacity_flop_per_s[d])).collect(),
            tolerance_flop,
        },
        AccountingMode::NotUsedForAi => {
            if let Some(r) = in_scope.iter().find(|r| r.op_class().is_ai()) {
                return Err(ReceiptError::ClaimRefused(format!("{} receipt {} in period", r.op_class(), r.id())));
            }
            Statement::NotUsedForAi { period }
        }
    };
    Ok(Claim::issue(ClaimBody::new(statement, subject), attester, now)?)
}

/// One entry of a device's append-only transfer log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharingLogEntry {
    pub result: ReceiptId,
    pub recipient: Recipient,
    pub at: SimTime,
    pub sealed: bool,
}

/// Claims the exact set of recipients `result` was ever sent to, per the
/// attester's complete log.
pub fn sharing_claim(log: &[SharingLogEntry], result: &ReceiptId, attester: &DeviceIdentity, now: SimTime) -> Result<Claim, ReceiptError> {
    let recipients: BTreeSet<Recipient> = log.iter().filter(|e| e.result == *result).map(|e| e.recipient).collect();
    let body = ClaimBody::new(Statement::SharedOnlyWith { recipients }, Subject::Receipt(*result));
    Ok(Claim::issue(body, attester, now)?)
}

/// Re-runs the aggregation behind a receipt-derived claim and reports
/// whether the DAG still supports it. Claims not derived from a single
/// result are out of scope and return `None`.
pub fn recheck_claim(dag: &ReceiptDag, claim: &Claim) -> Option<bool> {
    let Subject::Receipt(result) = &claim.body.subject else {
        return None;
    };
    let external = dag.external_inputs(result).ok()?.is_empty();
    let qualifier_ok = external != claim.body.qualifiers.contains(QUALIFIER_EXTERNAL_INPUTS);
    let holds = match &claim.body.statement {
        Statement::FlopBelow { threshold } => dag.total_flop(result).ok()? < *threshold,
        Statement::FlopExact { total } => dag.total_flop(result).ok()? == *total,
        Statement::DataBelow { threshold } => dag.total_data(result).ok()? < *threshold,
        Statement::TagPresent { tag } => dag.tag_in_ancestry(result, tag).ok()?,
        Statement::TagAbsent { tag } => !dag.tag_in_ancestry(result, tag).ok()?,
        _ => return None,
    };
    Some(holds && qualifier_ok)
}

/// A training run as seen from the receipts: one lineage and its span.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRun {
    pub lineage: ReceiptId,
    pub head: ReceiptId,
    pub producers: BTreeSet<DeviceId>,
    pub span: Interval,
    pub total_flop: u64,
    pub tags: BTreeSet<String>,
}

/// Groups training runs by lineage. The head of a run is its training
/// receipt with the largest FLOP total.
pub fn training_runs(dag: &ReceiptDag) -> Vec<TrainingRun> {
    let mut runs: BTreeMap<ReceiptId, TrainingRun> = BTreeMap::new();
    for r in dag.iter().filter(|r| r.op_class() == OpClass::TrainingStep && !r.parents().is_empty()) {
        let Ok(lineages) = dag.lineage_roots(&[r.id()]) else { continue };
        let Ok(total) = dag.total_flop(&r.id()) else { continue };
        for lineage in lineages {
            let run = runs.entry(lineage).or_insert_with(|| TrainingRun {
                lineage,
                head: r.id(),
                producers: BTreeSet::new(),
                span: r.interval(),
                total_flop: 0,
                tags: BTreeSet::new(),
            });
            run.producers.insert(r.producer());
            run.span.start = run.span.start.min(r.interval().start);
            run.span.end = run.span.end.max(r.interval().end);
            run.tags.extend(r.tags().iter().cloned());
            if total > run.total_flop {
                run.total_flop = total;
                run.head = r.id();
            }
        }
    }
    runs.into_values().collect()
}

/// Flags groups of at least `min_runs` training runs that overlap in time,
/// share a tag set, and have FLOP totals within `tolerance_pct` percent of
/// each other. Several similar runs at once is a hint that one system is
/// being trained in pieces (e.g. independent experts) to stay under a
/// per-run limit.
pub fn concurrent_similar_runs(dag: &ReceiptDag, min_runs: usize, tolerance_pct: u64) -> Vec<Vec<TrainingRun>> {
    let runs = training_runs(dag);
    let similar = |a: &TrainingRun, b: &TrainingRun| {
        let hi = a.total_flop.max(b.total_flop);
        let lo = a.total_flop.min(b.total_flop);
        a.tags == b.tags
            && a.span.overlaps(&b.span)
            && u128::from(hi - lo) * 100 <= u128::from(hi) * u128::from(tolerance_pct)
    };

    let mut flagged: Vec<Vec<TrainingRun>> = Vec::new();
    let mut used = vec![false; runs.len()];
    for i in 0..runs.len() {
        if used[i] {
            continue;
        }
        let group: Vec<usize> = (0..runs.len()).filter(|&j| !used[j] && similar(&runs[i], &runs[j])).collect();
        if group.len() >= min_runs {
            for &j in &group {
                used[j] = true;
            }
            flagged.push(group.into_iter().map(|j| runs[j].clone()).collect());
        }
    }
    flagged
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::generate_identity;

    fn dev(b: u8) -> DeviceIdentity {
        generate_identity([b; 32])
    }

    fn add(dag: &mut ReceiptDag, who: &DeviceIdentity, req: ReceiptRequest) -> ReceiptId {
        let r = emit_receipt(who, dag, req).unwrap();
        let id = r.id();
        dag.insert(r).unwrap();
        id
    }

    fn init(dag: &mut ReceiptDag, who: &DeviceIdentity) -> ReceiptId {
        add(dag, who, ReceiptRequest::new(OpClass::TrainingStep).tag(INIT_TAG))
    }

    #[test]
    fn three_device_chain_sums_each_contribution() {
        let (a, b, c) = (dev(1), dev(2), dev(3));
        let mut dag = ReceiptDag::new();
        let root = init(&mut dag, &a);
        let r1 = add(&mut dag, &a, ReceiptRequest::new(OpClass::TrainingStep).parents([root]).flop(100));
        let r2 = add(&mut dag, &b, ReceiptRequest::new(OpClass::TrainingStep).parents([r1]).flop(200));
        let r3 = add(&mut dag, &c, ReceiptRequest::new(OpClass::TrainingStep).parents([r2]).flop(300));
        assert_eq!(dag.total_flop(&r3).unwrap(), 600);
        assert_eq!(dag.total_flop(&root).unwrap(), 0);
    }

    #[test]
    fn diamond_counts_shared_ancestor_once() {
        let a = dev(1);
        let mut dag = ReceiptDag::new();
        let r0 = add(&mut dag, &a, ReceiptRequest::new(OpClass::TrainingStep).flop(10).data(Digest([1; 32]), 1000));
        let r1 = add(&mut dag, &a, ReceiptRequest::new(OpClass::TrainingStep).parents([r0]).flop(5));
        let r2 = add(&mut dag, &a, ReceiptRequest::new(OpClass::TrainingStep).parents([r0]).flop(7).data(Digest([2; 32]), 20));
        let r3 = add(&mut dag, &a, ReceiptRequest::new(OpClass::TrainingStep).parents([r1, r2]).flop(1));
        // {r0, r1, r2, r3}: 10 + 5 + 7 + 1
        assert_eq!(dag.total_flop(&r3).unwrap(), 23);
        assert_eq!(dag.total_data(&r3).unwrap(), 1020);
    }

    #[test]
    fn unknown_and_duplicate_parents_are_rejected() {
        let a = dev(1);
        let mut dag = ReceiptDag::new();
        let missing = ReceiptId(Digest([9; 32]));
        let err = emit_receipt(&a, &dag, ReceiptRequest::new(OpClass::TrainingStep).parents([missing])).unwrap_err();
        assert_eq!(err, ReceiptError::UnknownParent(missing));

        let root = init(&mut dag, &a);
        let err = emit_receipt(&a, &dag, ReceiptRequest::new(OpClass::TrainingStep).parents([root, root])).unwrap_err();
        assert_eq!(err, ReceiptError::DuplicateParent(root));
    }

    #[test]
    fn self_parent_is_a_cycle() {
        let a = dev(1);
        let dag = ReceiptDag::new();
        // A body naming its own digest as parent cannot be produced by hashing,
        // so build the check directly.
        let body = ReceiptBody {
            producer: a.device_id(),
            op_class: OpClass::TrainingStep,
            parents: vec![],
            flop: 0,
            data_in: vec![],
            tags: BTreeSet::new(),
            interval: Interval::default(),
        };
        let id = body.id();
        let mut cyclic = body;
        cyclic.parents.push(id);
        assert_eq!(dag.check_links(id, &cyclic), Err(ReceiptError::CycleDetected(id)));
    }

    #[test]
    fn wiped_producer_cannot_emit() {
        let mut a = dev(1);
        a.wipe(false);
        let err = emit_receipt(&a, &ReceiptDag::new(), ReceiptRequest::new(OpClass::Idle)).unwrap_err();
        assert!(matches!(err, ReceiptError::Identity(IdentityError::IdentityWiped(_))));
    }

    #[test]
    fn flop_below_is_strict() {
        let a = dev(1);
        let mut dag = ReceiptDag::new();
        let root = init(&mut dag, &a);
        let r = add(&mut dag, &a, ReceiptRequest::new(OpClass::TrainingStep).parents([root]).flop(600));
        assert!(claim_flop_below(&dag, &r, 1000, &a, SimTime(0)).is_ok());
        assert_eq!(
            claim_flop_below(&dag, &r, 600, &a, SimTime(0)).unwrap_err(),
            ReceiptError::ThresholdExceeded { threshold: 600 }
        );
        let c1 = claim_flop_below(&dag, &r, 601, &a, SimTime(0)).unwrap();
        let c2 = claim_flop_below(&dag, &r, 601, &a, SimTime(0)).unwrap();
        assert_eq!(c1.to_bytes(), c2.to_bytes());
        assert_eq!(recheck_claim(&dag, &c1), Some(true));
    }

    #[test]
    fn tag_queries_are_exclusive() {
        let a = dev(1);
        let mut dag = ReceiptDag::new();
        let root = init(&mut dag, &a);
        let rl = add(&mut dag, &a, ReceiptRequest::new(OpClass::TrainingStep).parents([root]).flop(1).tag("reinforcement_learning"));
        assert!(query_tags(&dag, &rl, "reinforcement_learning", TagMode::PresentAnywhere, &a, SimTime(0)).is_ok());
        assert!(matches!(
            query_tags(&dag, &rl, "reinforcement_learning", TagMode::AbsentEverywhere, &a, SimTime(0)),
            Err(ReceiptError::ClaimRefused(_))
        ));
        assert!(query_tags(&dag, &root, "reinforcement_learning", TagMode::AbsentEverywhere, &a, SimTime(0)).is_ok());
    }

    #[test]
    fn audited_dataset_provenance() {
        let a = dev(1);
        let mut dag = ReceiptDag::new();
        let corpus = Digest::tagged("corpus", b"audited_corpus_7");
        dag.declare_root(corpus);
        let root = init(&mut dag, &a);
        let data =
            add(&mut dag, &a, ReceiptRequest::new(OpClass::DataTransform).data(corpus, 1_000_000).tag("dataset:audited_corpus_7"));
        let step = add(&mut dag, &a, ReceiptRequest::new(OpClass::TrainingStep).parents([root, data]).flop(10));
        assert!(query_tags(&dag, &step, "dataset:audited_corpus_7", TagMode::PresentAnywhere, &a, SimTime(0)).is_ok());
        assert!(dag.untagged_data_receipts(&step, "dataset:audited_corpus_7").unwrap().is_empty());
        assert!(dag.external_inputs(&step).unwrap().is_empty());
        assert_eq!(dag.total_data(&step).unwrap(), 1_000_000);
    }

    #[test]
    fn external_inputs_qualify_claims() {
        let a = dev(1);
        let mut dag = ReceiptDag::new();
        let root = init(&mut dag, &a);
        let smuggled = Digest::tagged("x", b"supposedly training data");
        let r = add(&mut dag, &a, ReceiptRequest::new(OpClass::TrainingStep).parents([root]).flop(5).data(smuggled, 64));
        let claim = claim_flop_below(&dag, &r, 100, &a, SimTime(0)).unwrap();
        assert!(claim.body.qualifiers.contains(QUALIFIER_EXTERNAL_INPUTS));
        assert_eq!(recheck_claim(&dag, &claim), Some(true));
    }

    #[test]
    fn accounting_balances_and_detects_gaps() {
        let (a, b) = (dev(1), dev(2));
        let auditor = dev(3);
        let period = Interval::new(SimTime::from_secs(0), SimTime::from_secs(10));
        let capacity: BTreeMap<_, _> = [(a.device_id(), 100), (b.device_id(), 100)].into();
        let devices: BTreeSet<_> = capacity.keys().copied().collect();

        let build = |withhold: bool| {
            let mut dag = ReceiptDag::new();
            let iv = |s, e| (SimTime::from_secs(s), SimTime::from_secs(e));
            let (s, e) = iv(0, 10);
            add(&mut dag, &a, ReceiptRequest::new(OpClass::Simulation).flop(1000).interval(s, e));
            let (s, e) = iv(0, 5);
            add(&mut dag, &b, ReceiptRequest::new(OpClass::Simulation).flop(500).interval(s, e));
            if !withhold {
                let (s, e) = iv(5, 10);
                add(&mut dag, &b, ReceiptRequest::new(OpClass::Idle).flop(500).interval(s, e));
            } else {
                let (s, e) = iv(5, 6);
                add(&mut dag, &b, ReceiptRequest::new(OpClass::Idle).flop(100).interval(s, e));
            }
            dag
        };

        let dag = build(false);
        let claim = compute_accounting(&dag, &devices, period, &capacity, 0, AccountingMode::Balanced, &auditor, SimTime(0)).unwrap();
        assert_eq!(claim.kind(), crate::claim::ClaimKind::AccountingBalanced);
        let claim =
            compute_accounting(&dag, &devices, period, &capacity, 0, AccountingMode::NotUsedForAi, &auditor, SimTime(0)).unwrap();
        assert_eq!(claim.kind(), crate::claim::ClaimKind::NotUsedForAi);

        let dag = build(true);
        let err = compute_accounting(&dag, &devices, period, &capacity, 0, AccountingMode::Balanced, &auditor, SimTime(0)).unwrap_err();
        assert_eq!(err, ReceiptError::AccountingGap { observed_mflop: 1_600_000, capacity_mflop: 2_000_000 });
    }

    #[test]
    fn accounting_requires_known_devices() {
        let a = dev(1);
        let devices: BTreeSet<_> = [a.device_id()].into();
        let err = compute_accounting(
            &ReceiptDag::new(),
            &devices,
            Interval::default(),
            &BTreeMap::new(),
            0,
            AccountingMode::Balanced,
            &a,
            SimTime(0),
        )
        .unwrap_err();
        assert_eq!(err, ReceiptError::UnknownDevice(a.device_id()));
    }

    #[test]
    fn sharing_claim_lists_exact_recipients() {
        let (a, b, c) = (dev(1), dev(2), dev(3));
        let result = ReceiptId(Digest([7; 32]));
        let other = ReceiptId(Digest([8; 32]));
        let entry = |r, to| SharingLogEntry { result: r, recipient: to, at: SimTime(0), sealed: true };
        let log = vec![
            entry(result, Recipient::Device(b.device_id())),
            entry(other, Recipient::External),
            entry(result, Recipient::Device(c.device_id())),
            entry(result, Recipient::Device(b.device_id())),
        ];
        let claim = sharing_claim(&log, &result, &a, SimTime(0)).unwrap();
        let Statement::SharedOnlyWith { recipients } = &claim.body.statement else { panic!() };
        assert_eq!(recipients, &[Recipient::Device(b.device_id()), Recipient::Device(c.device_id())].into());

        let claim = sharing_claim(&[], &result, &a, SimTime(0)).unwrap();
        let Statement::SharedOnlyWith { recipients } = &claim.body.statement else { panic!() };
        assert!(recipients.is_empty());

        let claim = sharing_claim(&log, &other, &a, SimTime(0)).unwrap();
        let Statement::SharedOnlyWith { recipients } = &claim.body.statement else { panic!() };
        assert!(recipients.contains(&Recipient::External));
    }

    #[test]
    fn receipt_bytes_round_trip_and_verify() {
        let a = dev(1);
        let mut dag = ReceiptDag::new();
        let root = init(&mut dag, &a);
        let r = emit_receipt(&a, &dag, ReceiptRequest::new(OpClass::TrainingStep).parents([root]).flop(3).tag("x")).unwrap();
        let ring: KeyRing = [*a.public_key()].into_iter().collect();
        let back = Receipt::from_bytes(&r.to_bytes()).unwrap();
        assert_eq!(back, r);
        back.verify(&ring).unwrap();
    }

    #[test]
    fn concurrent_similar_runs_are_flagged() {
        let experts: Vec<_> = (10..14).map(dev).collect();
        let mut dag = ReceiptDag::new();
        for (i, d) in experts.iter().enumerate() {
            let root = add(&mut dag, d, ReceiptRequest::new(OpClass::TrainingStep).tag(INIT_TAG).tag(&format!("expert{i}")));
            add(
                &mut dag,
                d,
                ReceiptRequest::new(OpClass::TrainingStep)
                    .parents([root])
                    .flop(400 + i as u64)
                    .tag("moe_expert")
                    .interval(SimTime(0), SimTime(100)),
            );
        }
        let groups = concurrent_similar_runs(&dag, 3, 10);
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].len(), 4);
        assert!(concurrent_similar_runs(&dag, 5, 10).is_empty());
    }
}
