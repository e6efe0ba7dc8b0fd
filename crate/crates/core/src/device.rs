// Copyright 2026 The flexheg-sim Authors
// SPDX-License-Identifier: Apache-2.0

//! The guarantee-processor state machine.
//!
//! Every workload passes through [`GuaranteeProcessorState::handle_workload`]:
//! deadlines are checked first, then the effective ruleset decides, then an
//! allowed step is receipted and the per-lineage counters advance. A denied
//! request leaves everything but the clock untouched.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::claim::{Claim, Recipient};
use crate::codec::{DecodeError, Decoder, Digest, Encoder};
use crate::identity::{Attestation, DeviceId, DeviceIdentity, IdentityError, KeyRing, LifeState, PublicIdentity, SealedBlob};
use crate::policy::{
    self, check_license, first_violation, scopes_for, BindingCommitment, Decision, License, PolicyError, QuorumConfig,
    Rule, RuleId, Ruleset, UpdatePackage, DEFAULT_UPDATE_INTERVAL_MS,
};
use crate::receipts::{self, DataRef, OpClass, Receipt, ReceiptDag, ReceiptError, ReceiptId, ReceiptRequest, SharingLogEntry};
use crate::time::{Interval, SimTime};

const DOMAIN_WEIGHTS: &str = "flexheg/toy-weights/v1";
const DOMAIN_SUITE: &str = "flexheg/eval-suite/v1";
const DOMAIN_EVAL_RESULT: &str = "flexheg/eval-result/v1";
const DOMAIN_STATE: &str = "flexheg/device-state/v1";

/// Size of the stand-in weight blob for a model.
pub const TOY_WEIGHTS_LEN: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeviceError {
    #[error("device has been tampered with")]
    Tampered,
    #[error("denied by {0}")]
    Denied(RuleId),
    #[error("unknown model {0}")]
    UnknownModel(ReceiptId),
    #[error("recipient {0} is not approved for this deployment")]
    UnapprovedRecipient(Recipient),
    #[error("deployment lacks required safeguard tag {0:?}")]
    MissingSafeguardTag(String),
    #[error("malformed payload: {0}")]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Receipt(#[from] ReceiptError),
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Why a device is running under its baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Restriction {
    UpdateOverdue,
    RulesetExpired,
    Location,
}

/// A workload the host asks the accelerator to run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadRequest {
    pub op_class: OpClass,
    pub parents: Vec<ReceiptId>,
    pub declared_flop: u64,
    pub data_in: Vec<DataRef>,
    pub tags: BTreeSet<String>,
    pub destination: Option<Recipient>,
    /// Digest identifying a specific workload, for whitelists and
    /// workload-scoped licenses.
    pub workload: Option<Digest>,
    pub duration_ms: u64,
}

impl WorkloadRequest {
    pub fn new(op_class: OpClass) -> Self {
        Self {
            op_class,
            parents: vec![],
            declared_flop: 0,
            data_in: vec![],
            tags: BTreeSet::new(),
            destination: None,
            workload: None,
            duration_ms: 0,
        }
    }

    pub fn parents(mut self, parents: impl IntoIterator<Item = ReceiptId>) -> Self {
        self.parents = parents.into_iter().collect();
        self
    }

    pub fn flop(mut self, flop: u64) -> Self {
        self.declared_flop = flop;
        self
    }

    pub fn tag(mut self, tag: &str) -> Self {
        self.tags.insert(tag.to_string());
        self
    }

    pub fn data(mut self, digest: Digest, bytes: u64) -> Self {
        self.data_in.push(DataRef { digest, bytes });
        self
    }

    pub fn workload(mut self, digest: Digest) -> Self {
        self.workload = Some(digest);
        self
    }

    pub fn destination(mut self, to: Recipient) -> Self {
        self.destination = Some(to);
        self
    }

    pub fn duration(mut self, ms: u64) -> Self {
        self.duration_ms = ms;
        self
    }
}

/// Membership in an attested cluster, as recorded by each member.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterMembership {
    pub config_digest: Digest,
    pub members: BTreeSet<DeviceId>,
    pub egress_cap: u64,
    /// Set once the cluster's size and egress have been verified against
    /// small-cluster constraints.
    pub verified_small: bool,
}

/// Static configuration of one device.
pub struct DeviceConfig {
    pub ruleset: Ruleset,
    pub baseline: Option<Ruleset>,
    pub quorum: QuorumConfig,
    pub update_interval_ms: u64,
    pub owner: Option<DeviceId>,
}

impl DeviceConfig {
    pub fn new(ruleset: Ruleset, quorum: QuorumConfig) -> Self {
        Self { ruleset, baseline: None, quorum, update_interval_ms: DEFAULT_UPDATE_INTERVAL_MS, owner: None }
    }
}

/// Everything a guarantee processor knows and enforces.
#[derive(Debug)]
pub struct GuaranteeProcessorState {
    pub(crate) identity: DeviceIdentity,
    pub(crate) active_ruleset: Ruleset,
    pub(crate) baseline_ruleset: Option<Ruleset>,
    pub(crate) licenses: Vec<License>,
    pub(crate) quorum: QuorumConfig,
    pub(crate) update_interval_ms: u64,
    pub(crate) update_deadline: SimTime,
    pub(crate) restrictions: BTreeSet<Restriction>,
    pub(crate) bindings: Vec<BindingCommitment>,
    pub(crate) owner: Option<DeviceId>,
    dag_view: ReceiptDag,
    peers: KeyRing,
    sharing_log: Vec<SharingLogEntry>,
    flop_counters: BTreeMap<ReceiptId, u64>,
    lineage_heads: BTreeMap<ReceiptId, ReceiptId>,
    evaluated_models: BTreeSet<ReceiptId>,
    cluster: Option<ClusterMembership>,
    tampered: bool,
    clock: SimTime,
}

impl GuaranteeProcessorState {
    pub fn new(identity: DeviceIdentity, config: DeviceConfig, now: SimTime) -> Result<Self, PolicyError> {
        config.ruleset.validate()?;
        if let Some(b) = &config.baseline {
            b.validate()?;
        }
        let mut peers = KeyRing::new();
        let _ = peers.insert(*identity.public_key());
        Ok(Self {
            identity,
            active_ruleset: config.ruleset,
            baseline_ruleset: config.baseline,
            licenses: vec![],
            quorum: config.quorum,
            update_interval_ms: config.update_interval_ms,
            update_deadline: now + config.update_interval_ms,
            restrictions: BTreeSet::new(),
            bindings: vec![],
            owner: config.owner,
            dag_view: ReceiptDag::new(),
            peers,
            sharing_log: vec![],
            flop_counters: BTreeMap::new(),
            lineage_heads: BTreeMap::new(),
            evaluated_models: BTreeSet::new(),
            cluster: None,
            tampered: false,
            clock: now,
        })
    }

    pub fn device_id(&self) -> DeviceId {
        self.identity.device_id()
    }

    pub fn identity(&self) -> &DeviceIdentity {
        &self.identity
    }

    pub fn public(&self) -> PublicIdentity {
        self.identity.public()
    }

    pub fn active_ruleset(&self) -> &Ruleset {
        &self.active_ruleset
    }

    pub fn baseline_ruleset(&self) -> Option<&Ruleset> {
        self.baseline_ruleset.as_ref()
    }

    pub fn update_deadline(&self) -> SimTime {
        self.update_deadline
    }

    pub fn restrictions(&self) -> &BTreeSet<Restriction> {
        &self.restrictions
    }

    pub fn is_restricted(&self) -> bool {
        !self.restrictions.is_empty()
    }

    pub fn bindings(&self) -> &[BindingCommitment] {
        &self.bindings
    }

    pub fn licenses(&self) -> &[License] {
        &self.licenses
    }

    pub fn dag(&self) -> &ReceiptDag {
        &self.dag_view
    }

    pub fn sharing_log(&self) -> &[SharingLogEntry] {
        &self.sharing_log
    }

    pub fn flop_counters(&self) -> &BTreeMap<ReceiptId, u64> {
        &self.flop_counters
    }

    pub fn lineage_heads(&self) -> &BTreeMap<ReceiptId, ReceiptId> {
        &self.lineage_heads
    }

    /// Models that have been through an evaluation on this device.
    pub fn evaluated_models(&self) -> &BTreeSet<ReceiptId> {
        &self.evaluated_models
    }

    pub fn cluster(&self) -> Option<&ClusterMembership> {
        self.cluster.as_ref()
    }

    pub fn is_tampered(&self) -> bool {
        self.tampered
    }

    pub fn clock(&self) -> SimTime {
        self.clock
    }

    /// Total FLOP the request's result would carry: the union of its
    /// parents' ancestries plus the declared step.
    pub fn prospective_flop(&self, request: &WorkloadRequest) -> u64 {
        let known: Vec<ReceiptId> = request.parents.iter().copied().filter(|p| self.dag_view.contains(p)).collect();
        self.dag_view.total_flop_of_all(&known).unwrap_or(0).saturating_add(request.declared_flop)
    }

    /// Training FLOP in the request's prospective ancestry that no
    /// evaluated ancestor model covers.
    pub fn flop_since_eval(&self, request: &WorkloadRequest) -> u64 {
        let known: Vec<ReceiptId> = request.parents.iter().copied().filter(|p| self.dag_view.contains(p)).collect();
        let ancestry = self.dag_view.ancestors_of_all(&known).unwrap_or_default();
        let evaluated: Vec<ReceiptId> = ancestry.intersection(&self.evaluated_models).copied().collect();
        let covered = self.dag_view.total_flop_of_all(&evaluated).unwrap_or(0);
        self.prospective_flop(request).saturating_sub(covered)
    }

    pub fn licensed_for(&self, request: &WorkloadRequest, now: SimTime) -> bool {
        let me = self.device_id();
        scopes_for(request).iter().any(|s| check_license(&self.licenses, s, &me, now, self.quorum.ring()))
    }

    /// Egress cap of the cluster this device sits in, if that cluster has
    /// been verified as small.
    pub fn verified_cluster_egress(&self) -> Option<u64> {
        self.cluster.as_ref().filter(|c| c.verified_small).map(|c| c.egress_cap)
    }

    fn ensure_live(&mut self, now: SimTime) -> Result<(), DeviceError> {
        if self.tampered {
            return Err(DeviceError::Tampered);
        }
        self.clock = self.clock.max(now);
        Ok(())
    }

    /// Applies deadline and expiry checks.
    pub fn tick(&mut self, now: SimTime) -> Result<(), DeviceError> {
        self.ensure_live(now)?;
        policy::expire_tick(self, now);
        Ok(())
    }

    /// The decision the device would take for `request` right now. Pure.
    pub fn evaluate(&self, request: &WorkloadRequest, now: SimTime) -> Result<Decision, DeviceError> {
        let decision = if self.is_restricted() {
            match &self.baseline_ruleset {
                Some(baseline) => policy::evaluate_rules(baseline, request, self, now)?,
                None => Decision::Deny(RuleId::blocked()),
            }
        } else {
            match policy::evaluate_rules(&self.active_ruleset, request, self, now)? {
                // A lapsed operating license drops the device to its baseline
                // for this request rather than blocking it outright.
                Decision::Deny(rule) if rule.kind == "require_license" => match &self.baseline_ruleset {
                    Some(baseline) => match policy::evaluate_rules(baseline, request, self, now)? {
                        Decision::Allow => Decision::Allow,
                        Decision::Deny(_) => Decision::Deny(rule),
                    },
                    None => Decision::Deny(rule),
                },
                d => d,
            }
        };
        if let Decision::Deny(_) = decision {
            return Ok(decision);
        }
        for binding in &self.bindings {
            if let Some(rule) = first_violation(&binding.ruleset, request, self, now) {
                return Ok(Decision::Deny(rule));
            }
        }
        if let Some(rule) = self.cross_device_violation(request) {
            return Ok(Decision::Deny(rule));
        }
        Ok(Decision::Allow)
    }

    /// Steps that consume results produced elsewhere are only allowed inside
    /// a cluster containing the producer.
    fn cross_device_violation(&self, request: &WorkloadRequest) -> Option<RuleId> {
        let me = self.device_id();
        let foreign = request
            .parents
            .iter()
            .filter_map(|p| self.dag_view.get(p))
            .map(Receipt::producer)
            .filter(|p| *p != me)
            .collect::<BTreeSet<_>>();
        if foreign.is_empty() {
            return None;
        }
        match &self.cluster {
            Some(c) if foreign.is_subset(&c.members) => None,
            _ => Some(RuleId::cluster_required()),
        }
    }

    /// Admits or denies a workload. On admission a signed receipt is appended
    /// to the device's DAG and returned.
    pub fn handle_workload(&mut self, request: &WorkloadRequest, now: SimTime) -> Result<Receipt, DeviceError> {
        self.tick(now)?;
        for p in &request.parents {
            if !self.dag_view.contains(p) && !self.dag_view.is_declared_root(p) {
                return Err(ReceiptError::UnknownParent(*p).into());
            }
        }
        if let Decision::Deny(rule) = self.evaluate(request, now)? {
            return Err(DeviceError::Denied(rule));
        }
        let receipt = self.emit(
            ReceiptRequest {
                op_class: Some(request.op_class),
                parents: request.parents.clone(),
                flop: request.declared_flop,
                data_in: request.data_in.clone(),
                tags: request.tags.clone(),
                interval: Interval::new(now, now + request.duration_ms),
            },
        )?;
        Ok(receipt)
    }

    fn emit(&mut self, request: ReceiptRequest) -> Result<Receipt, DeviceError> {
        let receipt = receipts::emit_receipt(&self.identity, &self.dag_view, request)?;
        self.record(receipt.clone())?;
        Ok(receipt)
    }

    /// Appends a receipt, advancing lineage counters and the evaluated set.
    fn record(&mut self, receipt: Receipt) -> Result<(), DeviceError> {
        let id = receipt.id();
        let op = receipt.op_class();
        let parents = receipt.parents().to_vec();
        self.dag_view.insert(receipt)?;
        let total = self.dag_view.total_flop(&id)?;
        for root in self.dag_view.lineage_roots(&[id])? {
            self.lineage_heads.insert(root, id);
            self.flop_counters.insert(root, total);
        }
        if op == OpClass::Evaluation {
            self.evaluated_models.extend(parents.into_iter().filter(|p| self.dag_view.contains(p)));
        }
        Ok(())
    }

    /// Trusts `key` for verifying receipts imported from that device.
    pub fn add_peer(&mut self, peer: &PublicIdentity) {
        let _ = self.peers.insert(peer.public_key);
    }

    /// Imports another device's receipt after verifying it.
    pub fn import_receipt(&mut self, receipt: Receipt) -> Result<(), DeviceError> {
        if self.tampered {
            return Err(DeviceError::Tampered);
        }
        Ok(self.dag_view.insert_verified(receipt, &self.peers)?)
    }

    pub fn declare_root(&mut self, origin: Digest) {
        self.dag_view.declare_root(origin);
    }

    pub fn install_license(&mut self, license: License, now: SimTime) -> Result<(), DeviceError> {
        self.ensure_live(now)?;
        self.licenses.push(license);
        Ok(())
    }

    pub fn install_update(&mut self, update: &UpdatePackage, now: SimTime) -> Result<(), DeviceError> {
        self.ensure_live(now)?;
        Ok(policy::install_update(self, update, now)?)
    }

    pub fn commit_binding(&mut self, ruleset: Ruleset, until: SimTime, owner: &DeviceIdentity, now: SimTime) -> Result<Claim, DeviceError> {
        self.ensure_live(now)?;
        Ok(policy::commit_binding(self, ruleset, until, owner, now)?)
    }

    pub fn remove_binding(&mut self, ruleset_id: &str, now: SimTime) -> Result<Ruleset, DeviceError> {
        self.ensure_live(now)?;
        Ok(policy::remove_binding(self, ruleset_id, now)?)
    }

    pub fn restrict(&mut self, why: Restriction) {
        self.restrictions.insert(why);
    }

    pub fn lift(&mut self, why: Restriction) {
        self.restrictions.remove(&why);
    }

    pub fn join_cluster(&mut self, membership: ClusterMembership) -> Result<(), DeviceError> {
        if self.tampered {
            return Err(DeviceError::Tampered);
        }
        self.cluster = Some(membership);
        Ok(())
    }

    pub fn mark_cluster_verified(&mut self, config_digest: &Digest) {
        if let Some(c) = self.cluster.as_mut().filter(|c| c.config_digest == *config_digest) {
            c.verified_small = true;
        }
    }

    pub fn leave_cluster(&mut self) {
        self.cluster = None;
    }

    /// Signs a payload as this device.
    pub fn attest(&mut self, payload: &[u8], now: SimTime) -> Result<Attestation, DeviceError> {
        self.ensure_live(now)?;
        Ok(self.identity.sign(payload, now)?)
    }

    /// Releases `model` to the given recipients. Device recipients receive
    /// the weights sealed to their key; external recipients (when the
    /// ruleset permits any) receive plaintext, which is logged as unsealed.
    pub fn controlled_deploy(
        &mut self,
        model: &ReceiptId,
        recipients: &[ShareTarget],
        safeguards: &BTreeSet<String>,
        now: SimTime,
    ) -> Result<Deployment, DeviceError> {
        self.tick(now)?;
        if !self.dag_view.contains(model) {
            return Err(DeviceError::UnknownModel(*model));
        }
        let total = self.dag_view.total_flop(model)?;
        let effective: Vec<&Ruleset> = self.enforced_rulesets();
        for ruleset in &effective {
            for rule in &ruleset.rules {
                let Rule::ControlledDeployment { min_flop, approved, required_tags } = rule else { continue };
                if total < *min_flop {
                    continue;
                }
                for target in recipients {
                    let recipient = target.recipient();
                    if !matches!(recipient, Recipient::Device(id) if approved.contains(&id)) {
                        return Err(DeviceError::UnapprovedRecipient(recipient));
                    }
                }
                if let Some(missing) = required_tags.iter().find(|t| !safeguards.contains(*t)) {
                    return Err(DeviceError::MissingSafeguardTag(missing.clone()));
                }
            }
        }
        for target in recipients {
            let mut request = WorkloadRequest::new(OpClass::Transfer).parents([*model]).destination(target.recipient());
            request.tags = safeguards.clone();
            if let Decision::Deny(rule) = self.evaluate(&request, now)? {
                return Err(DeviceError::Denied(rule));
            }
        }

        let weights = toy_weights(model);
        let mut blobs = Vec::new();
        let mut external_payloads = Vec::new();
        for target in recipients {
            match target {
                ShareTarget::Device(peer) => blobs.push(self.identity.seal_to(&peer.public_key, &weights, now)?),
                ShareTarget::External => external_payloads.push(weights.clone()),
            }
        }
        let receipt = self.emit(ReceiptRequest {
            op_class: Some(OpClass::Transfer),
            parents: vec![*model],
            flop: 0,
            data_in: vec![],
            tags: safeguards.clone(),
            interval: Interval::new(now, now),
        })?;
        for target in recipients {
            self.sharing_log.push(SharingLogEntry {
                result: *model,
                recipient: target.recipient(),
                at: now,
                sealed: matches!(target, ShareTarget::Device(_)),
            });
        }
        let claim = receipts::sharing_claim(&self.sharing_log, model, &self.identity, now)?;
        Ok(Deployment { receipt, blobs, external_payloads, claim })
    }

    fn enforced_rulesets(&self) -> Vec<&Ruleset> {
        let mut out = Vec::new();
        if self.is_restricted() {
            out.extend(self.baseline_ruleset.as_ref());
        } else {
            out.push(&self.active_ruleset);
        }
        out.extend(self.bindings.iter().map(|b| &b.ruleset));
        out
    }

    /// Claims the exact set of recipients `result` was ever sent to.
    pub fn sharing_claim(&mut self, result: &ReceiptId, now: SimTime) -> Result<Claim, DeviceError> {
        self.ensure_live(now)?;
        Ok(receipts::sharing_claim(&self.sharing_log, result, &self.identity, now)?)
    }

    /// Runs a sealed evaluation suite against `model` without revealing the
    /// suite to the developer or the model to the evaluator. The result is
    /// sealed to the evaluator, and the receipted evaluation covers `model`'s
    /// ancestry for eval gating.
    pub fn run_private_eval(
        &mut self,
        model: &ReceiptId,
        sealed_suite: &SealedBlob,
        evaluator: &PublicIdentity,
        now: SimTime,
    ) -> Result<PrivateEval, DeviceError> {
        self.tick(now)?;
        let suite = EvalSuite::from_bytes(&self.identity.open(sealed_suite)?)?;
        if !self.dag_view.contains(model) {
            return Err(DeviceError::UnknownModel(*model));
        }
        let request = WorkloadRequest::new(OpClass::Evaluation).parents([*model]);
        if let Decision::Deny(rule) = self.evaluate(&request, now)? {
            return Err(DeviceError::Denied(rule));
        }
        let score = suite.score(&toy_weights(model));
        let suite_digest = suite.digest();
        let receipt = self.emit(ReceiptRequest {
            op_class: Some(OpClass::Evaluation),
            parents: vec![*model],
            flop: 0,
            data_in: vec![],
            tags: BTreeSet::from([format!("eval_suite:{}", suite_digest.short())]),
            interval: Interval::new(now, now),
        })?;
        let body = EvalResult::body_bytes(model, &suite_digest, score);
        let attestation = self.identity.sign(&body, now)?;
        let result = EvalResult { model: *model, suite_digest, score, attestation };
        let sealed_result = self.identity.seal_to(&evaluator.public_key, &result.to_bytes(), now)?;
        Ok(PrivateEval { result, sealed_result, receipt })
    }

    /// Tamper response: wipes keys (and bricks if asked), drops cluster
    /// membership, and makes every later operation fail.
    pub fn tamper_event(&mut self, brick: bool) {
        self.identity.wipe(brick);
        self.tampered = true;
        self.cluster = None;
    }

    pub fn life_state(&self) -> LifeState {
        self.identity.life_state()
    }

    /// Digest of all enforcement-relevant state except the clock.
    pub fn fingerprint(&self) -> Digest {
        let mut enc = Encoder::new(DOMAIN_STATE);
        enc.digest(&self.device_id().0).u8(self.identity.life_state() as u8).bool(self.tampered);
        enc.digest(&self.active_ruleset.digest());
        enc.digest(&self.baseline_ruleset.as_ref().map(Ruleset::digest).unwrap_or_default());
        enc.list(self.licenses.iter(), |e, l| {
            e.digest(&l.digest());
        });
        enc.u64(self.update_deadline.as_ms()).u64(self.update_interval_ms);
        enc.list(self.restrictions.iter(), |e, r| {
            e.u8(*r as u8);
        });
        enc.list(self.bindings.iter(), |e, b| {
            e.digest(&b.ruleset.digest()).u64(b.irrevocable_until.as_ms());
        });
        let ids: Vec<ReceiptId> = self.dag_view.iter().map(Receipt::id).collect();
        enc.list(ids.iter(), |e, id| {
            e.digest(&id.0);
        });
        enc.list(self.sharing_log.iter(), |e, s| {
            e.digest(&s.result.0).str(&s.recipient.to_string()).u64(s.at.as_ms()).bool(s.sealed);
        });
        enc.list(self.flop_counters.iter(), |e, (k, v)| {
            e.digest(&k.0).u64(*v);
        });
        enc.list(self.evaluated_models.iter(), |e, m| {
            e.digest(&m.0);
        });
        enc.list(self.lineage_heads.iter(), |e, (k, v)| {
            e.digest(&k.0).digest(&v.0);
        });
        match &self.cluster {
            Some(c) => enc.bool(true).digest(&c.config_digest).bool(c.verified_small),
            None => enc.bool(false),
        };
        Digest::tagged(DOMAIN_STATE, &enc.finish())
    }
}

/// Where a deployment goes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ShareTarget {
    Device(PublicIdentity),
    External,
}

impl ShareTarget {
    pub fn recipient(&self) -> Recipient {
        match self {
            ShareTarget::Device(p) => Recipient::Device(p.device_id),
            ShareTarget::External => Recipient::External,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Deployment {
    pub receipt: Receipt,
    pub blobs: Vec<SealedBlob>,
    pub external_payloads: Vec<Vec<u8>>,
    pub claim: Claim,
}

/// Deterministic stand-in for a model's weights.
pub fn toy_weights(model: &ReceiptId) -> Vec<u8> {
    let mut out = Vec::with_capacity(TOY_WEIGHTS_LEN);
    let mut counter = 0u64;
    while out.len() < TOY_WEIGHTS_LEN {
        let mut enc = Encoder::new(DOMAIN_WEIGHTS);
        enc.digest(&model.0).u64(counter);
        out.extend_from_slice(Digest::tagged(DOMAIN_WEIGHTS, &enc.finish()).as_bytes());
        counter += 1;
    }
    out.truncate(TOY_WEIGHTS_LEN);
    out
}

/// One check of an evaluation suite: does the weight at `index` reach
/// `threshold`?
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    pub index: u32,
    pub threshold: u8,
}

/// A scripted scoring function over a model's weights. The evaluator keeps
/// it secret from the developer by sealing it to the device.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSuite {
    pub name: String,
    pub probes: Vec<Probe>,
}

impl EvalSuite {
    /// Number of probes the weights pass.
    pub fn score(&self, weights: &[u8]) -> u64 {
        if weights.is_empty() {
            return 0;
        }
        self.probes.iter().filter(|p| weights[p.index as usize % weights.len()] >= p.threshold).count() as u64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new(DOMAIN_SUITE);
        enc.str(&self.name);
        enc.list(self.probes.iter(), |e, p| {
            e.u64(u64::from(p.index)).u8(p.threshold);
        });
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut dec = Decoder::new(bytes, DOMAIN_SUITE)?;
        let name = dec.str()?;
        let n = dec.count()?;
        let mut probes = Vec::with_capacity(n);
        for _ in 0..n {
            let index = dec.u64()?;
            let index = u32::try_from(index).map_err(|_| DecodeError::InvalidValue { field: "probe index", value: index })?;
            probes.push(Probe { index, threshold: dec.u8("probe threshold")? });
        }
        dec.finish()?;
        Ok(Self { name, probes })
    }

    pub fn digest(&self) -> Digest {
        Digest::tagged(DOMAIN_SUITE, &self.to_bytes())
    }
}

/// Outcome of a private evaluation: score and digests only.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalResult {
    pub model: ReceiptId,
    pub suite_digest: Digest,
    pub score: u64,
    pub attestation: Attestation,
}

impl EvalResult {
    fn body_bytes(model: &ReceiptId, suite_digest: &Digest, score: u64) -> Vec<u8> {
        let mut enc = Encoder::new(DOMAIN_EVAL_RESULT);
        enc.digest(&model.0).digest(suite_digest).u64(score);
        enc.finish()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new(DOMAIN_EVAL_RESULT);
        enc.nested(&Self::body_bytes(&self.model, &self.suite_digest, self.score));
        self.attestation.encode_into(&mut enc);
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut dec = Decoder::new(bytes, DOMAIN_EVAL_RESULT)?;
        let body = dec.bytes()?;
        let attestation = Attestation::decode_from(&mut dec)?;
        dec.finish()?;
        let mut inner = Decoder::new(body, DOMAIN_EVAL_RESULT)?;
        let model = ReceiptId(inner.digest("model")?);
        let suite_digest = inner.digest("suite digest")?;
        let score = inner.u64()?;
        inner.finish()?;
        Ok(Self { model, suite_digest, score, attestation })
    }

    pub fn verify(&self, device: &crate::identity::PublicKey) -> bool {
        self.attestation.payload == Self::body_bytes(&self.model, &self.suite_digest, self.score) && self.attestation.verify(device)
    }
}

#[derive(Clone, Debug)]
pub struct PrivateEval {
    pub result: EvalResult,
    pub sealed_result: SealedBlob,
    pub receipt: Receipt,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::generate_identity;
    use crate::policy::{ActionClass, LicenseScope, ShareScope};
    use crate::receipts::INIT_TAG;
    use crate::time::MS_PER_DAY;

    struct Fixture {
        authorities: Vec<DeviceIdentity>,
        device: GuaranteeProcessorState,
    }

    fn fixture(rules: Vec<Rule>, baseline: Option<Ruleset>) -> Fixture {
        let authorities: Vec<_> = (100..103).map(|b| generate_identity([b; 32])).collect();
        let quorum = QuorumConfig::new(authorities.iter().map(|a| *a.public_key()).collect(), 2).unwrap();
        let mut config = DeviceConfig::new(Ruleset::full("main", 1, rules, SimTime::MAX), quorum);
        config.baseline = baseline;
        let device = GuaranteeProcessorState::new(generate_identity([1; 32]), config, SimTime(0)).unwrap();
        Fixture { authorities, device }
    }

    fn init(dev: &mut GuaranteeProcessorState) -> ReceiptId {
        dev.handle_workload(&WorkloadRequest::new(OpClass::TrainingStep).tag(INIT_TAG), SimTime(0)).unwrap().id()
    }

    fn train(dev: &mut GuaranteeProcessorState, parent: ReceiptId, flop: u64) -> Result<Receipt, DeviceError> {
        dev.handle_workload(&WorkloadRequest::new(OpClass::TrainingStep).parents([parent]).flop(flop), SimTime(1))
    }

    #[test]
    fn training_threshold_is_enforced() {
        let mut f = fixture(vec![Rule::MaxTrainingFlop { limit: 1000 }], None);
        let root = init(&mut f.device);
        let r = train(&mut f.device, root, 600).unwrap();
        assert_eq!(f.device.flop_counters()[&root], 600);

        let before = f.device.fingerprint();
        let err = train(&mut f.device, r.id(), 500).unwrap_err();
        assert!(matches!(err, DeviceError::Denied(ref id) if id.kind == "max_training_flop"));
        assert_eq!(f.device.fingerprint(), before);
        assert_eq!(f.device.flop_counters()[&root], 600);

        let r = train(&mut f.device, r.id(), 300).unwrap();
        assert_eq!(f.device.flop_counters()[&root], 900);
        assert_eq!(f.device.dag().total_flop(&r.id()).unwrap(), 900);
    }

    #[test]
    fn license_requirement() {
        let mut f = fixture(vec![Rule::RequireLicense { action: ActionClass::Training }], None);
        let err = f.device.handle_workload(&WorkloadRequest::new(OpClass::TrainingStep).tag(INIT_TAG), SimTime(0)).unwrap_err();
        assert!(matches!(err, DeviceError::Denied(ref id) if id.kind == "require_license"));

        let signers: Vec<&DeviceIdentity> = f.authorities.iter().take(2).collect();
        let lic = License::issue(
            LicenseScope::Action(ActionClass::Training),
            None,
            SimTime(0),
            SimTime(100),
            2,
            &signers,
            SimTime(0),
        )
        .unwrap();
        f.device.install_license(lic, SimTime(0)).unwrap();
        let root = init(&mut f.device);
        train(&mut f.device, root, 1).unwrap();
        let err = f.device.handle_workload(&WorkloadRequest::new(OpClass::TrainingStep).parents([root]), SimTime(100)).unwrap_err();
        assert!(matches!(err, DeviceError::Denied(ref id) if id.kind == "require_license"));
    }

    #[test]
    fn eval_gate_blocks_until_evaluated() {
        let mut f = fixture(vec![Rule::RequireEvalEvery { interval_flop: 1000 }], None);
        let root = init(&mut f.device);
        let r1 = train(&mut f.device, root, 500).unwrap();
        let r2 = train(&mut f.device, r1.id(), 500).unwrap();
        let err = train(&mut f.device, r2.id(), 500).unwrap_err();
        assert!(matches!(err, DeviceError::Denied(ref id) if id.kind == "require_eval_every"));

        let evaluator = generate_identity([50; 32]);
        let suite = EvalSuite { name: "s".into(), probes: vec![Probe { index: 0, threshold: 0 }] };
        let sealed = evaluator.seal_to(f.device.identity().public_key(), &suite.to_bytes(), SimTime(1)).unwrap();
        let out = f.device.run_private_eval(&r2.id(), &sealed, &evaluator.public(), SimTime(2)).unwrap();
        assert_eq!(out.result.score, 1);
        assert!(f.device.evaluated_models().contains(&r2.id()));
        let _ = root;
        let opened = EvalResult::from_bytes(&evaluator.open(&out.sealed_result).unwrap()).unwrap();
        assert_eq!(opened, out.result);
        assert!(opened.verify(f.device.identity().public_key()));

        train(&mut f.device, r2.id(), 500).unwrap();
    }

    #[test]
    fn deadline_falls_back_to_baseline() {
        let whitelisted = Digest::tagged("workload", b"safe-sim");
        let baseline = Ruleset::default_baseline([whitelisted].into(), 1_000);
        let mut f = fixture(vec![], Some(baseline));
        let after = SimTime::from_days(90);
        let generic = WorkloadRequest::new(OpClass::Simulation);
        f.device.handle_workload(&generic, SimTime::from_days(89)).unwrap();
        let err = f.device.handle_workload(&generic, after).unwrap_err();
        assert!(matches!(err, DeviceError::Denied(ref id) if id.kind == "baseline_default"));
        f.device.handle_workload(&generic.clone().workload(whitelisted), after).unwrap();
        assert!(f.device.restrictions().contains(&Restriction::UpdateOverdue));
    }

    #[test]
    fn deadline_without_baseline_blocks() {
        let mut f = fixture(vec![], None);
        let err = f.device.handle_workload(&WorkloadRequest::new(OpClass::Simulation), SimTime(90 * MS_PER_DAY)).unwrap_err();
        assert_eq!(err, DeviceError::Denied(RuleId::blocked()));
    }

    #[test]
    fn deployment_checks() {
        let b = generate_identity([60; 32]);
        let c = generate_identity([61; 32]);
        let rule = Rule::ControlledDeployment {
            min_flop: 0,
            approved: [b.device_id()].into(),
            required_tags: ["safeguard:content_filter".to_string()].into(),
        };
        let mut f = fixture(vec![rule, Rule::ShareOnlyTo { scope: ShareScope::FlexhegOnly }], None);
        let root = init(&mut f.device);
        let model = train(&mut f.device, root, 10).unwrap().id();
        let tags: BTreeSet<String> = ["safeguard:content_filter".to_string()].into();

        let err = f.device.controlled_deploy(&model, &[ShareTarget::Device(c.public())], &tags, SimTime(5)).unwrap_err();
        assert_eq!(err, DeviceError::UnapprovedRecipient(Recipient::Device(c.device_id())));
        let err = f.device.controlled_deploy(&model, &[ShareTarget::Device(b.public())], &BTreeSet::new(), SimTime(5)).unwrap_err();
        assert_eq!(err, DeviceError::MissingSafeguardTag("safeguard:content_filter".into()));

        let out = f.device.controlled_deploy(&model, &[ShareTarget::Device(b.public())], &tags, SimTime(5)).unwrap();
        assert_eq!(b.open(&out.blobs[0]).unwrap(), toy_weights(&model));
        assert!(c.open(&out.blobs[0]).is_err());
        let crate::claim::Statement::SharedOnlyWith { recipients } = &out.claim.body.statement else { panic!() };
        assert_eq!(recipients, &[Recipient::Device(b.device_id())].into());
    }

    #[test]
    fn tamper_is_terminal() {
        let mut f = fixture(vec![], None);
        let root = init(&mut f.device);
        f.device.tamper_event(false);
        assert_eq!(train(&mut f.device, root, 1).unwrap_err(), DeviceError::Tampered);
        assert!(matches!(f.device.tick(SimTime(3)), Err(DeviceError::Tampered)));
        let ring: KeyRing = [*f.device.identity().public_key()].into_iter().collect();
        receipts::verify_receipt_chain(f.device.dag(), &ring, &root).unwrap();
    }

    #[test]
    fn binding_survives_owner_update() {
        let owner = generate_identity([70; 32]);
        let mut f = fixture(vec![], None);
        let binding = Ruleset::full("no-rl", 1, vec![Rule::MaxTrainingFlop { limit: 10 }], SimTime::MAX);
        let claim = f.device.commit_binding(binding, SimTime(500), &owner, SimTime(0)).unwrap();
        let ring: KeyRing = [*f.device.identity().public_key()].into_iter().collect();
        claim.verify(&ring).unwrap();

        let owner_only = UpdatePackage::sign(Ruleset::full("main", 2, vec![], SimTime::MAX), &[&owner], SimTime(1)).unwrap();
        assert!(f.device.install_update(&owner_only, SimTime(1)).is_err());
        let quorum_signed = UpdatePackage::sign(
            Ruleset::full("main", 2, vec![], SimTime::MAX),
            &[&f.authorities[0], &f.authorities[1]],
            SimTime(1),
        )
        .unwrap();
        f.device.install_update(&quorum_signed, SimTime(1)).unwrap();

        let root = init(&mut f.device);
        assert!(train(&mut f.device, root, 11).is_err());
        assert!(matches!(
            f.device.remove_binding("no-rl", SimTime(499)),
            Err(DeviceError::Policy(PolicyError::CommitmentActive { .. }))
        ));
        f.device.remove_binding("no-rl", SimTime(500)).unwrap();
    }
}
