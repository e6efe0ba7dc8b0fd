// Copyright 2026 The flexheg-sim Authors
// SPDX-License-Identifier: Apache-2.0

//! Rulesets, quorum-signed updates, operating licenses, binding commitments,
//! and issuer transparency logs.
//!
//! Rule evaluation is pure: it reads the device state and never mutates it.
//! Conflicts resolve by declared order; the first violated rule denies.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::claim::{Claim, ClaimBody, Recipient, Statement, Subject};
use crate::codec::{Digest, Encoder};
use crate::device::{GuaranteeProcessorState, Restriction, WorkloadRequest};
use crate::identity::{Attestation, DeviceId, DeviceIdentity, IdentityError, KeyRing, PublicKey};
use crate::receipts::OpClass;
use crate::time::{SimTime, MS_PER_DAY};

const DOMAIN_RULESET: &str = "flexheg/ruleset/v1";
const DOMAIN_UPDATE: &str = "flexheg/update/v1";
const DOMAIN_LICENSE: &str = "flexheg/license/v1";
const DOMAIN_COMMITMENT: &str = "flexheg/binding-commitment/v1";
const DOMAIN_LOG_ENTRY: &str = "flexheg/issuer-log-entry/v1";
const DOMAIN_LOG_HEAD: &str = "flexheg/issuer-log-head/v1";

/// Default forced-update interval: 90 days.
pub const DEFAULT_UPDATE_INTERVAL_MS: u64 = 90 * MS_PER_DAY;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("ruleset {0} has expired")]
    RulesetExpired(String),
    #[error("update carries {valid} valid quorum signatures, {required} required")]
    InsufficientQuorum { valid: usize, required: usize },
    #[error("update version {offered} does not exceed current version {current}")]
    VersionRollback { current: u64, offered: u64 },
    #[error("signature by {0} does not verify")]
    BadSignature(DeviceId),
    #[error("update package version {package} differs from its ruleset version {ruleset}")]
    PackageMismatch { package: u64, ruleset: u64 },
    #[error("quorum threshold {threshold} invalid for {signers} signers")]
    InvalidQuorum { threshold: usize, signers: usize },
    #[error("invalid rule: {0}")]
    InvalidRule(String),
    #[error("commitment expiry {until} is not after {now}")]
    InvalidExpiry { until: SimTime, now: SimTime },
    #[error("ruleset {ruleset_id} is committed until {until}")]
    CommitmentActive { ruleset_id: String, until: SimTime },
    #[error("no binding commitment for ruleset {0}")]
    UnknownCommitment(String),
    #[error("{0} does not control this device")]
    NotOwner(DeviceId),
    #[error("issuer log is inconsistent: {0}")]
    LogGap(String),
    #[error("license does not verify against the trusted authorities")]
    LicenseInvalid,
    #[error("issuer log contains a matching license at index {0}")]
    LicenseFound(u64),
    #[error(transparent)]
    Identity(#[from] IdentityError),
}

/// Classes of action a license or a `require_license` rule can cover.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionClass {
    /// Any workload at all.
    General,
    Training,
    Inference,
    Deployment,
}

impl ActionClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ActionClass::General => "general",
            ActionClass::Training => "training",
            ActionClass::Inference => "inference",
            ActionClass::Deployment => "deployment",
        }
    }

    /// Whether a workload of class `op` falls under this action class.
    pub fn covers(self, op: OpClass) -> bool {
        match self {
            ActionClass::General => true,
            ActionClass::Training => op == OpClass::TrainingStep,
            ActionClass::Inference => op == OpClass::Inference,
            ActionClass::Deployment => op == OpClass::Transfer,
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShareScope {
    /// Any guarantee-processor device; nothing external.
    FlexhegOnly,
    Explicit(BTreeSet<DeviceId>),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Rule {
    MaxTrainingFlop { limit: u64 },
    RequireLicense { action: ActionClass },
    ShareOnlyTo { scope: ShareScope },
    RequireEvalEvery { interval_flop: u64 },
    ControlledDeployment { min_flop: u64, approved: BTreeSet<DeviceId>, required_tags: BTreeSet<String> },
    MaxClusterEgress { bytes_per_s: u64 },
    AllowWhitelisted { workloads: BTreeSet<Digest> },
}

impl Rule {
    pub fn kind(&self) -> &'static str {
        match self {
            Rule::MaxTrainingFlop { .. } => "max_training_flop",
            Rule::RequireLicense { .. } => "require_license",
            Rule::ShareOnlyTo { .. } => "share_only_to",
            Rule::RequireEvalEvery { .. } => "require_eval_every",
            Rule::ControlledDeployment { .. } => "controlled_deployment",
            Rule::MaxClusterEgress { .. } => "max_cluster_egress",
            Rule::AllowWhitelisted { .. } => "allow_whitelisted",
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        match self {
            Rule::RequireEvalEvery { interval_flop: 0 } => {
                Err(PolicyError::InvalidRule("require_eval_every needs a positive interval".into()))
            }
            Rule::ControlledDeployment { approved, .. } if approved.is_empty() => {
                Err(PolicyError::InvalidRule("controlled_deployment needs a non-empty approved set".into()))
            }
            Rule::ShareOnlyTo { scope: ShareScope::Explicit(set) } if set.is_empty() => {
                Err(PolicyError::InvalidRule("share_only_to needs a non-empty recipient set".into()))
            }
            _ => Ok(()),
        }
    }

    fn encode(&self, enc: &mut Encoder) {
        enc.str(self.kind());
        let ids = |enc: &mut Encoder, set: &BTreeSet<DeviceId>| {
            enc.list(set.iter(), |e, id| {
                e.digest(&id.0);
            });
        };
        match self {
            Rule::MaxTrainingFlop { limit } => {
                enc.u64(*limit);
            }
            Rule::RequireLicense { action } => {
                enc.u8(action.code());
            }
            Rule::ShareOnlyTo { scope: ShareScope::FlexhegOnly } => {
                enc.u8(0);
            }
            Rule::ShareOnlyTo { scope: ShareScope::Explicit(set) } => {
                enc.u8(1);
                ids(enc, set);
            }
            Rule::RequireEvalEvery { interval_flop } => {
                enc.u64(*interval_flop);
            }
            Rule::ControlledDeployment { min_flop, approved, required_tags } => {
                enc.u64(*min_flop);
                ids(enc, approved);
                enc.list(required_tags.iter(), |e, t| {
                    e.str(t);
                });
            }
            Rule::MaxClusterEgress { bytes_per_s } => {
                enc.u64(*bytes_per_s);
            }
            Rule::AllowWhitelisted { workloads } => {
                enc.list(workloads.iter(), |e, d| {
                    e.digest(d);
                });
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RulesetKind {
    /// Restrictions over an otherwise permissive device.
    Full,
    /// Fallback: restrictions apply, and only workloads an allowance rule
    /// grants (whitelist, verified small cluster) may run. Never expires.
    Baseline,
}

/// A versioned, expiring list of rules.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ruleset {
    pub id: String,
    pub version: u64,
    pub kind: RulesetKind,
    pub rules: Vec<Rule>,
    pub expiry: SimTime,
    #[serde(default)]
    pub issuer_signatures: Vec<Attestation>,
}

impl Ruleset {
    pub fn full(id: &str, version: u64, rules: Vec<Rule>, expiry: SimTime) -> Self {
        Self { id: id.to_string(), version, kind: RulesetKind::Full, rules, expiry, issuer_signatures: vec![] }
    }

    pub fn baseline(id: &str, rules: Vec<Rule>) -> Self {
        Self { id: id.to_string(), version: 0, kind: RulesetKind::Baseline, rules, expiry: SimTime::MAX, issuer_signatures: vec![] }
    }

    /// The default baseline: whitelisted workloads and small verified
    /// clusters only.
    pub fn default_baseline(whitelist: BTreeSet<Digest>, max_egress: u64) -> Self {
        Self::baseline(
            "baseline",
            vec![Rule::AllowWhitelisted { workloads: whitelist }, Rule::MaxClusterEgress { bytes_per_s: max_egress }],
        )
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        self.rules.iter().try_for_each(Rule::validate)
    }

    pub fn is_expired(&self, now: SimTime) -> bool {
        self.kind == RulesetKind::Full && now >= self.expiry
    }

    /// Canonical bytes, excluding signatures.
    pub fn body_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new(DOMAIN_RULESET);
        enc.str(&self.id).u64(self.version).u8(matches!(self.kind, RulesetKind::Baseline) as u8);
        enc.list(self.rules.iter(), |e, r| r.encode(e));
        enc.u64(self.expiry.as_ms());
        enc.finish()
    }

    pub fn digest(&self) -> Digest {
        Digest::tagged(DOMAIN_RULESET, &self.body_bytes())
    }
}

/// Names the rule a decision turned on.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RuleId {
    pub ruleset: String,
    pub index: usize,
    pub kind: String,
}

impl RuleId {
    fn new(ruleset: &Ruleset, index: usize) -> Self {
        Self { ruleset: ruleset.id.clone(), index, kind: ruleset.rules[index].kind().to_string() }
    }

    /// Baseline mode with no allowance matching the request.
    pub fn baseline_default(ruleset: &Ruleset) -> Self {
        Self { ruleset: ruleset.id.clone(), index: ruleset.rules.len(), kind: "baseline_default".into() }
    }

    /// Restricted with no baseline configured.
    pub fn blocked() -> Self {
        Self { ruleset: String::new(), index: 0, kind: "blocked".into() }
    }

    /// A step consumed results from a device outside the producer's cluster.
    pub fn cluster_required() -> Self {
        Self { ruleset: String::new(), index: 0, kind: "cluster_required".into() }
    }
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ruleset.is_empty() {
            f.write_str(&self.kind)
        } else {
            write!(f, "{}#{}@{}", self.kind, self.index, self.ruleset)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", content = "rule", rename_all = "snake_case")]
pub enum Decision {
    Allow,
    Deny(RuleId),
}

impl Decision {
    pub fn is_allow(&self) -> bool {
        matches!(self, Decision::Allow)
    }
}

/// First restriction in `ruleset` that `request` violates, if any.
pub(crate) fn first_violation(
    ruleset: &Ruleset,
    request: &WorkloadRequest,
    state: &GuaranteeProcessorState,
    now: SimTime,
) -> Option<RuleId> {
    let op = request.op_class;
    ruleset.rules.iter().enumerate().find_map(|(i, rule)| {
        let violated = match rule {
            Rule::MaxTrainingFlop { limit } => op == OpClass::TrainingStep && state.prospective_flop(request) > *limit,
            Rule::RequireLicense { action } => action.covers(op) && !state.licensed_for(request, now),
            Rule::ShareOnlyTo { scope } => match (&request.destination, scope) {
                (None, _) => false,
                (Some(Recipient::External), _) => true,
                (Some(Recipient::Device(_)), ShareScope::FlexhegOnly) => false,
                (Some(Recipient::Device(id)), ShareScope::Explicit(set)) => !set.contains(id),
            },
            Rule::RequireEvalEvery { interval_flop } => {
                op == OpClass::TrainingStep && state.flop_since_eval(request) > *interval_flop
            }
            Rule::ControlledDeployment { min_flop, approved, required_tags } => {
                op == OpClass::Transfer
                    && request.destination.is_some()
                    && state.prospective_flop(request) >= *min_flop
                    && (!matches!(request.destination, Some(Recipient::Device(id)) if approved.contains(&id))
                        || !required_tags.is_subset(&request.tags))
            }
            Rule::MaxClusterEgress { .. } | Rule::AllowWhitelisted { .. } => false,
        };
        violated.then(|| RuleId::new(ruleset, i))
    })
}

fn baseline_allows(ruleset: &Ruleset, request: &WorkloadRequest, state: &GuaranteeProcessorState) -> bool {
    ruleset.rules.iter().any(|rule| match rule {
        Rule::AllowWhitelisted { workloads } => request.workload.is_some_and(|w| workloads.contains(&w)),
        Rule::MaxClusterEgress { bytes_per_s } => state.verified_cluster_egress().is_some_and(|e| e <= *bytes_per_s),
        _ => false,
    })
}

/// Decides whether `ruleset` lets `request` run on `state` at `now`.
pub fn evaluate_rules(
    ruleset: &Ruleset,
    request: &WorkloadRequest,
    state: &GuaranteeProcessorState,
    now: SimTime,
) -> Result<Decision, PolicyError> {
    if ruleset.is_expired(now) {
        return Err(PolicyError::RulesetExpired(ruleset.id.clone()));
    }
    if let Some(rule) = first_violation(ruleset, request, state, now) {
        return Ok(Decision::Deny(rule));
    }
    if ruleset.kind == RulesetKind::Baseline && !baseline_allows(ruleset, request, state) {
        return Ok(Decision::Deny(RuleId::baseline_default(ruleset)));
    }
    Ok(Decision::Allow)
}

/// The M keys allowed to sign updates, and how many must.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuorumConfig {
    signer_keys: Vec<PublicKey>,
    threshold: usize,
    ring: KeyRing,
}

impl QuorumConfig {
    pub fn new(signer_keys: Vec<PublicKey>, threshold: usize) -> Result<Self, PolicyError> {
        let ring: KeyRing = signer_keys.iter().copied().collect();
        if threshold == 0 || threshold > ring.len() {
            return Err(PolicyError::InvalidQuorum { threshold, signers: ring.len() });
        }
        Ok(Self { signer_keys, threshold, ring })
    }

    pub fn threshold(&self) -> usize {
        self.threshold
    }

    pub fn signers(&self) -> &[PublicKey] {
        &self.signer_keys
    }

    pub fn ring(&self) -> &KeyRing {
        &self.ring
    }

    /// Distinct quorum members whose attestation over `payload` verifies.
    /// Returns the first bad signature from a quorum member as an error;
    /// signatures from outside the quorum are ignored.
    pub fn valid_signers(&self, payload: &[u8], signatures: &[Attestation]) -> Result<BTreeSet<DeviceId>, PolicyError> {
        let mut valid = BTreeSet::new();
        for att in signatures {
            let Some(key) = self.ring.get(&att.signer) else { continue };
            if att.payload != payload || !att.verify(key) {
                return Err(PolicyError::BadSignature(att.signer));
            }
            valid.insert(att.signer);
        }
        Ok(valid)
    }
}

/// A new ruleset offered to devices, with authority signatures.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdatePackage {
    pub new_ruleset: Ruleset,
    pub version: u64,
    pub signatures: Vec<Attestation>,
}

impl UpdatePackage {
    pub fn signing_payload(ruleset: &Ruleset, version: u64) -> Vec<u8> {
        let mut enc = Encoder::new(DOMAIN_UPDATE);
        enc.u64(version).nested(&ruleset.body_bytes());
        enc.finish()
    }

    /// Builds a package signed by each of `signers`.
    pub fn sign(new_ruleset: Ruleset, signers: &[&DeviceIdentity], now: SimTime) -> Result<Self, IdentityError> {
        let version = new_ruleset.version;
        let payload = Self::signing_payload(&new_ruleset, version);
        let signatures = signers.iter().map(|s| s.sign(&payload, now)).collect::<Result<_, _>>()?;
        Ok(Self { new_ruleset, version, signatures })
    }
}

/// Installs `update` if a quorum signed it and it moves the version forward.
/// On success the forced-update deadline restarts from `now`.
pub fn install_update(state: &mut GuaranteeProcessorState, update: &UpdatePackage, now: SimTime) -> Result<(), PolicyError> {
    if update.version != update.new_ruleset.version {
        return Err(PolicyError::PackageMismatch { package: update.version, ruleset: update.new_ruleset.version });
    }
    update.new_ruleset.validate()?;
    let payload = UpdatePackage::signing_payload(&update.new_ruleset, update.version);
    let valid = state.quorum.valid_signers(&payload, &update.signatures)?;
    if valid.len() < state.quorum.threshold() {
        return Err(PolicyError::InsufficientQuorum { valid: valid.len(), required: state.quorum.threshold() });
    }
    let current = state.active_ruleset.version;
    if update.version <= current {
        return Err(PolicyError::VersionRollback { current, offered: update.version });
    }
    state.active_ruleset = update.new_ruleset.clone();
    state.update_deadline = now + state.update_interval_ms;
    state.restrictions.remove(&Restriction::UpdateOverdue);
    state.restrictions.remove(&Restriction::RulesetExpired);
    Ok(())
}

/// Moves the device to its baseline (or blocks it) once the update
/// deadline or the ruleset expiry has passed. Idempotent.
pub fn expire_tick(state: &mut GuaranteeProcessorState, now: SimTime) {
    if now >= state.update_deadline {
        state.restrictions.insert(Restriction::UpdateOverdue);
    }
    if state.active_ruleset.is_expired(now) {
        state.restrictions.insert(Restriction::RulesetExpired);
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum LicenseScope {
    Action(ActionClass),
    Workload(Digest),
}

impl LicenseScope {
    /// Whether a license with this scope authorizes `wanted`.
    pub fn covers(&self, wanted: &LicenseScope) -> bool {
        match (self, wanted) {
            (LicenseScope::Action(ActionClass::General), _) => true,
            (a, b) => a == b,
        }
    }

    pub fn label(&self) -> String {
        match self {
            LicenseScope::Action(a) => format!("action:{}", a.as_str()),
            LicenseScope::Workload(d) => format!("workload:{}", d.to_hex()),
        }
    }

    fn encode(&self, enc: &mut Encoder) {
        match self {
            LicenseScope::Action(a) => enc.u8(0).u8(a.code()),
            LicenseScope::Workload(d) => enc.u8(1).digest(d),
        };
    }
}

/// A time-limited authorization, valid on `[not_before, not_after)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct License {
    pub issuers: Vec<DeviceId>,
    pub scope: LicenseScope,
    /// `None` licenses every device.
    pub subject: Option<DeviceId>,
    pub not_before: SimTime,
    pub not_after: SimTime,
    pub quorum: usize,
    pub signatures: Vec<Attestation>,
}

impl License {
    pub fn body_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new(DOMAIN_LICENSE);
        enc.list(self.issuers.iter(), |e, id| {
            e.digest(&id.0);
        });
        self.scope.encode(&mut enc);
        match &self.subject {
            Some(id) => enc.bool(true).digest(&id.0),
            None => enc.bool(false),
        };
        enc.u64(self.not_before.as_ms()).u64(self.not_after.as_ms()).u64(self.quorum as u64);
        enc.finish()
    }

    pub fn digest(&self) -> Digest {
        Digest::tagged(DOMAIN_LICENSE, &self.body_bytes())
    }

    /// Creates a license signed by every identity in `signers`, which also
    /// become its issuer list.
    pub fn issue(
        scope: LicenseScope,
        subject: Option<DeviceId>,
        not_before: SimTime,
        not_after: SimTime,
        quorum: usize,
        signers: &[&DeviceIdentity],
        now: SimTime,
    ) -> Result<Self, IdentityError> {
        let mut license = License {
            issuers: signers.iter().map(|s| s.device_id()).collect(),
            scope,
            subject,
            not_before,
            not_after,
            quorum,
            signatures: vec![],
        };
        license.signatures = signers.iter().map(|s| s.sign(&license.body_bytes(), now)).collect::<Result<_, _>>()?;
        Ok(license)
    }

    /// Distinct listed issuers, trusted by `authorities`, whose signature
    /// over the body verifies.
    pub fn valid_signature_count(&self, authorities: &KeyRing) -> usize {
        let body = self.body_bytes();
        let mut valid = BTreeSet::new();
        for att in &self.signatures {
            if !self.issuers.contains(&att.signer) || att.payload != body {
                continue;
            }
            if att.verify_in(authorities) {
                valid.insert(att.signer);
            }
        }
        valid.len()
    }

    pub fn signatures_verify(&self, authorities: &KeyRing) -> bool {
        self.quorum >= 1 && self.valid_signature_count(authorities) >= self.quorum
    }

    pub fn is_current(&self, now: SimTime) -> bool {
        self.not_before <= now && now < self.not_after
    }

    pub fn applies_to(&self, device: &DeviceId) -> bool {
        self.subject.is_none_or(|s| s == *device)
    }
}

/// True iff some license covers `action` for `device` at `now` and carries
/// its signature quorum from `authorities`.
pub fn check_license(licenses: &[License], action: &LicenseScope, device: &DeviceId, now: SimTime, authorities: &KeyRing) -> bool {
    licenses.iter().any(|l| {
        l.scope.covers(action) && l.applies_to(device) && l.is_current(now) && l.signatures_verify(authorities)
    })
}

/// An owner-installed ruleset that cannot be removed before
/// `irrevocable_until`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BindingCommitment {
    pub ruleset: Ruleset,
    pub committed_at: SimTime,
    pub irrevocable_until: SimTime,
    pub owner: DeviceId,
    pub owner_signature: Attestation,
}

impl BindingCommitment {
    pub fn statement(&self) -> Statement {
        Statement::CommitmentActive {
            ruleset_digest: self.ruleset.digest(),
            committed_at: self.committed_at,
            irrevocable_until: self.irrevocable_until,
            owner: self.owner,
        }
    }

    fn owner_payload(ruleset: &Ruleset, committed_at: SimTime, until: SimTime, device: &DeviceId) -> Vec<u8> {
        let mut enc = Encoder::new(DOMAIN_COMMITMENT);
        enc.digest(&ruleset.digest()).u64(committed_at.as_ms()).u64(until.as_ms()).digest(&device.0);
        enc.finish()
    }
}

/// Commits the device to `ruleset` until `irrevocable_until`. Returns a
/// claim, signed by the device, that third parties can check offline.
pub fn commit_binding(
    state: &mut GuaranteeProcessorState,
    ruleset: Ruleset,
    irrevocable_until: SimTime,
    owner: &DeviceIdentity,
    now: SimTime,
) -> Result<Claim, PolicyError> {
    if irrevocable_until <= now {
        return Err(PolicyError::InvalidExpiry { until: irrevocable_until, now });
    }
    if state.owner.is_some_and(|o| o != owner.device_id()) {
        return Err(PolicyError::NotOwner(owner.device_id()));
    }
    ruleset.validate()?;
    let device = state.identity.device_id();
    let owner_signature = owner.sign(&BindingCommitment::owner_payload(&ruleset, now, irrevocable_until, &device), now)?;
    let commitment =
        BindingCommitment { ruleset, committed_at: now, irrevocable_until, owner: owner.device_id(), owner_signature };
    let claim = Claim::issue(ClaimBody::new(commitment.statement(), Subject::Device(device)), &state.identity, now)?;
    state.bindings.push(commitment);
    Ok(claim)
}

/// Removes a binding commitment once it has lapsed.
pub fn remove_binding(state: &mut GuaranteeProcessorState, ruleset_id: &str, now: SimTime) -> Result<Ruleset, PolicyError> {
    let idx = state
        .bindings
        .iter()
        .position(|b| b.ruleset.id == ruleset_id)
        .ok_or_else(|| PolicyError::UnknownCommitment(ruleset_id.to_string()))?;
    let until = state.bindings[idx].irrevocable_until;
    if now < until {
        return Err(PolicyError::CommitmentActive { ruleset_id: ruleset_id.to_string(), until });
    }
    Ok(state.bindings.remove(idx).ruleset)
}

/// One issued license in an issuer's hash-chained log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub index: u64,
    pub prev: Digest,
    pub license_digest: Digest,
    pub scope: LicenseScope,
    pub subject: Option<DeviceId>,
}

impl LogEntry {
    pub fn hash(&self) -> Digest {
        let mut enc = Encoder::new(DOMAIN_LOG_ENTRY);
        enc.u64(self.index).digest(&self.prev).digest(&self.license_digest);
        self.scope.encode(&mut enc);
        match &self.subject {
            Some(id) => enc.bool(true).digest(&id.0),
            None => enc.bool(false),
        };
        Digest::tagged(DOMAIN_LOG_ENTRY, &enc.finish())
    }
}

/// The issuer's signature over the log size and head hash.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedHead {
    pub size: u64,
    pub head: Digest,
    pub attestation: Attestation,
}

fn head_payload(size: u64, head: &Digest) -> Vec<u8> {
    let mut enc = Encoder::new(DOMAIN_LOG_HEAD);
    enc.u64(size).digest(head);
    enc.finish()
}

/// Append-only log of every license an issuer has signed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssuerLog {
    pub issuer: DeviceId,
    pub entries: Vec<LogEntry>,
    pub head: Option<SignedHead>,
}

impl IssuerLog {
    pub fn new(issuer: DeviceId) -> Self {
        Self { issuer, entries: vec![], head: None }
    }

    fn tip(&self) -> Digest {
        self.entries.last().map(LogEntry::hash).unwrap_or_default()
    }

    /// Appends `license` and re-signs the head.
    pub fn append(&mut self, license: &License, issuer: &DeviceIdentity, now: SimTime) -> Result<(), IdentityError> {
        let entry = LogEntry {
            index: self.entries.len() as u64,
            prev: self.tip(),
            license_digest: license.digest(),
            scope: license.scope.clone(),
            subject: license.subject,
        };
        self.entries.push(entry);
        self.sign_head(issuer, now)
    }

    /// Signs the current head; an empty log gets a signed empty head.
    pub fn sign_head(&mut self, issuer: &DeviceIdentity, now: SimTime) -> Result<(), IdentityError> {
        let size = self.entries.len() as u64;
        let head = self.tip();
        let attestation = issuer.sign(&head_payload(size, &head), now)?;
        self.head = Some(SignedHead { size, head, attestation });
        Ok(())
    }

    /// Recomputes the hash chain and checks it against the signed head.
    pub fn verify(&self, issuer_key: &PublicKey) -> Result<Digest, PolicyError> {
        if issuer_key.device_id() != self.issuer {
            return Err(PolicyError::LogGap("issuer key does not match log issuer".into()));
        }
        let mut prev = Digest::default();
        for (i, e) in self.entries.iter().enumerate() {
            if e.index != i as u64 || e.prev != prev {
                return Err(PolicyError::LogGap(format!("chain broken at entry {i}")));
            }
            prev = e.hash();
        }
        let head = self.head.as_ref().ok_or_else(|| PolicyError::LogGap("log head is unsigned".into()))?;
        if head.size != self.entries.len() as u64 || head.head != prev {
            return Err(PolicyError::LogGap("signed head does not match entries".into()));
        }
        if head.attestation.payload != head_payload(head.size, &head.head) || !head.attestation.verify(issuer_key) {
            return Err(PolicyError::LogGap("head signature does not verify".into()));
        }
        Ok(prev)
    }
}

/// What a license-issuance check is asked to establish.
#[derive(Clone, Debug)]
pub enum IssuanceQuery<'a> {
    /// This license was validly issued.
    Issued(&'a License),
    /// No license for `scope` (covering `subject`) appears in the log.
    NotIssued { scope: LicenseScope, subject: DeviceId },
}

/// Certifies issuance directly from a license, or non-issuance by scanning
/// the issuer's complete log.
pub fn verify_license_issuance(
    log: &IssuerLog,
    issuer_key: &PublicKey,
    query: IssuanceQuery<'_>,
    authorities: &KeyRing,
    attester: &DeviceIdentity,
    now: SimTime,
) -> Result<Claim, PolicyError> {
    match query {
        IssuanceQuery::Issued(license) => {
            if !license.signatures_verify(authorities) {
                return Err(PolicyError::LicenseInvalid);
            }
            let subject = match license.subject {
                Some(id) => Subject::Device(id),
                None => Subject::Devices(BTreeSet::new()),
            };
            let body = ClaimBody::new(Statement::LicenseIssued { license_digest: license.digest() }, subject);
            Ok(Claim::issue(body, attester, now)?)
        }
        IssuanceQuery::NotIssued { scope, subject } => {
            let head = log.verify(issuer_key)?;
            if let Some(e) =
                log.entries.iter().find(|e| e.scope.covers(&scope) && e.subject.is_none_or(|s| s == subject))
            {
                return Err(PolicyError::LicenseFound(e.index));
            }
            let body = ClaimBody::new(
                Statement::LicenseNotIssued { scope: scope.label(), log_head: head, log_size: log.entries.len() as u64 },
                Subject::Device(subject),
            );
            Ok(Claim::issue(body, attester, now)?)
        }
    }
}

/// Scope a workload needs a license for, most specific first.
pub fn scopes_for(request: &WorkloadRequest) -> Vec<LicenseScope> {
    let mut scopes = Vec::new();
    if let Some(w) = request.workload {
        scopes.push(LicenseScope::Workload(w));
    }
    let action = match request.op_class {
        OpClass::TrainingStep => ActionClass::Training,
        OpClass::Inference => ActionClass::Inference,
        OpClass::Transfer => ActionClass::Deployment,
        _ => ActionClass::General,
    };
    scopes.push(LicenseScope::Action(action));
    scopes
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::DeviceConfig;
    use crate::identity::generate_identity;

    fn authorities(n: u8) -> Vec<DeviceIdentity> {
        (0..n).map(|i| generate_identity([40 + i; 32])).collect()
    }

    fn state(auth: &[DeviceIdentity], threshold: usize) -> GuaranteeProcessorState {
        let quorum = QuorumConfig::new(auth.iter().map(|a| *a.public_key()).collect(), threshold).unwrap();
        let config = DeviceConfig::new(Ruleset::full("main", 1, vec![], SimTime::MAX), quorum);
        GuaranteeProcessorState::new(generate_identity([1; 32]), config, SimTime(0)).unwrap()
    }

    #[test]
    fn quorum_bounds() {
        let auth = authorities(3);
        let keys: Vec<PublicKey> = auth.iter().map(|a| *a.public_key()).collect();
        assert!(QuorumConfig::new(keys.clone(), 0).is_err());
        assert!(QuorumConfig::new(keys.clone(), 4).is_err());
        assert!(QuorumConfig::new(vec![keys[0], keys[0]], 2).is_err());
        assert_eq!(QuorumConfig::new(keys, 3).unwrap().threshold(), 3);
    }

    #[test]
    fn update_quorum_and_rollback() {
        let auth = authorities(3);
        let mut st = state(&auth, 2);
        let v2 = Ruleset::full("main", 2, vec![Rule::MaxTrainingFlop { limit: 5 }], SimTime::MAX);

        let one = UpdatePackage::sign(v2.clone(), &[&auth[0]], SimTime(10)).unwrap();
        assert_eq!(install_update(&mut st, &one, SimTime(10)), Err(PolicyError::InsufficientQuorum { valid: 1, required: 2 }));

        let outsider = generate_identity([99; 32]);
        let padded = UpdatePackage::sign(v2.clone(), &[&auth[0], &outsider], SimTime(10)).unwrap();
        assert!(matches!(install_update(&mut st, &padded, SimTime(10)), Err(PolicyError::InsufficientQuorum { valid: 1, .. })));

        let mut dup = one.clone();
        dup.signatures.push(dup.signatures[0].clone());
        assert!(matches!(install_update(&mut st, &dup, SimTime(10)), Err(PolicyError::InsufficientQuorum { valid: 1, .. })));

        let mut forged = UpdatePackage::sign(v2.clone(), &[&auth[0], &auth[1]], SimTime(10)).unwrap();
        forged.new_ruleset.rules.clear();
        assert!(matches!(install_update(&mut st, &forged, SimTime(10)), Err(PolicyError::BadSignature(_))));

        let two = UpdatePackage::sign(v2.clone(), &[&auth[0], &auth[1]], SimTime(10)).unwrap();
        install_update(&mut st, &two, SimTime(10)).unwrap();
        assert_eq!(st.active_ruleset().version, 2);
        assert_eq!(st.update_deadline(), SimTime(10) + DEFAULT_UPDATE_INTERVAL_MS);

        assert_eq!(install_update(&mut st, &two, SimTime(11)), Err(PolicyError::VersionRollback { current: 2, offered: 2 }));
        let old = UpdatePackage::sign(Ruleset::full("main", 1, vec![], SimTime::MAX), &[&auth[0], &auth[1]], SimTime(12)).unwrap();
        assert_eq!(install_update(&mut st, &old, SimTime(12)), Err(PolicyError::VersionRollback { current: 2, offered: 1 }));
    }

    #[test]
    fn accepted_update_clears_overdue() {
        let auth = authorities(3);
        let mut st = state(&auth, 2);
        expire_tick(&mut st, SimTime::from_days(90));
        assert!(st.restrictions().contains(&Restriction::UpdateOverdue));
        let up = UpdatePackage::sign(Ruleset::full("main", 2, vec![], SimTime::MAX), &[&auth[1], &auth[2]], SimTime(0)).unwrap();
        install_update(&mut st, &up, SimTime::from_days(91)).unwrap();
        assert!(!st.is_restricted());
        assert_eq!(st.update_deadline(), SimTime::from_days(181));
    }

    #[test]
    fn license_window_is_half_open() {
        let auth = authorities(3);
        let ring: KeyRing = auth.iter().map(|a| *a.public_key()).collect();
        let dev = generate_identity([1; 32]).device_id();
        let scope = LicenseScope::Action(ActionClass::Training);
        let lic = License::issue(scope.clone(), Some(dev), SimTime(100), SimTime(200), 2, &[&auth[0], &auth[1]], SimTime(0)).unwrap();
        let licenses = [lic];
        assert!(!check_license(&licenses, &scope, &dev, SimTime(99), &ring));
        assert!(check_license(&licenses, &scope, &dev, SimTime(100), &ring));
        assert!(check_license(&licenses, &scope, &dev, SimTime(199), &ring));
        assert!(!check_license(&licenses, &scope, &dev, SimTime(200), &ring));
        let other = generate_identity([2; 32]).device_id();
        assert!(!check_license(&licenses, &scope, &other, SimTime(150), &ring));
        assert!(!check_license(&licenses, &LicenseScope::Action(ActionClass::Inference), &dev, SimTime(150), &ring));
    }

    #[test]
    fn license_needs_trusted_quorum() {
        let auth = authorities(3);
        let ring: KeyRing = auth.iter().map(|a| *a.public_key()).collect();
        let rogue = generate_identity([98; 32]);
        let scope = LicenseScope::Action(ActionClass::General);
        let lic = License::issue(scope.clone(), None, SimTime(0), SimTime(10), 2, &[&auth[0], &rogue], SimTime(0)).unwrap();
        assert_eq!(lic.valid_signature_count(&ring), 1);
        assert!(!lic.signatures_verify(&ring));
        let mut lic = License::issue(scope, None, SimTime(0), SimTime(10), 2, &[&auth[0], &auth[1]], SimTime(0)).unwrap();
        assert!(lic.signatures_verify(&ring));
        lic.not_after = SimTime(1_000);
        assert!(!lic.signatures_verify(&ring));
    }

    #[test]
    fn issuer_log_proves_issuance_and_absence() {
        let auth = authorities(2);
        let ring: KeyRing = auth.iter().map(|a| *a.public_key()).collect();
        let checker = generate_identity([5; 32]);
        let a = generate_identity([6; 32]).device_id();
        let b = generate_identity([7; 32]).device_id();
        let issuer = &auth[0];
        let scope = LicenseScope::Action(ActionClass::Training);
        let lic = License::issue(scope.clone(), Some(a), SimTime(0), SimTime(10), 1, &[issuer], SimTime(0)).unwrap();
        let mut log = IssuerLog::new(issuer.device_id());
        log.append(&lic, issuer, SimTime(0)).unwrap();

        let claim = verify_license_issuance(&log, issuer.public_key(), IssuanceQuery::Issued(&lic), &ring, &checker, SimTime(1)).unwrap();
        assert!(matches!(claim.body.statement, Statement::LicenseIssued { .. }));

        let q = IssuanceQuery::NotIssued { scope: scope.clone(), subject: b };
        let claim = verify_license_issuance(&log, issuer.public_key(), q, &ring, &checker, SimTime(1)).unwrap();
        assert!(matches!(claim.body.statement, Statement::LicenseNotIssued { log_size: 1, .. }));

        let q = IssuanceQuery::NotIssued { scope: scope.clone(), subject: a };
        assert_eq!(verify_license_issuance(&log, issuer.public_key(), q, &ring, &checker, SimTime(1)).unwrap_err(), PolicyError::LicenseFound(0));

        let mut pruned = log.clone();
        pruned.entries.clear();
        let q = IssuanceQuery::NotIssued { scope, subject: a };
        assert!(matches!(verify_license_issuance(&pruned, issuer.public_key(), q, &ring, &checker, SimTime(1)), Err(PolicyError::LogGap(_))));
    }

    #[test]
    fn first_violated_rule_wins() {
        let auth = authorities(1);
        let st = state(&auth, 1);
        let rs = Ruleset::full(
            "r",
            1,
            vec![Rule::RequireLicense { action: ActionClass::Training }, Rule::MaxTrainingFlop { limit: 1 }],
            SimTime::MAX,
        );
        let req = WorkloadRequest::new(OpClass::TrainingStep).flop(5);
        let Decision::Deny(id) = evaluate_rules(&rs, &req, &st, SimTime(0)).unwrap() else { panic!() };
        assert_eq!((id.index, id.kind.as_str()), (0, "require_license"));
        assert_eq!(evaluate_rules(&rs, &WorkloadRequest::new(OpClass::Simulation), &st, SimTime(0)).unwrap(), Decision::Allow);
        let expired = Ruleset::full("r", 1, vec![], SimTime(5));
        assert!(matches!(evaluate_rules(&expired, &req, &st, SimTime(5)), Err(PolicyError::RulesetExpired(_))));
    }

    #[test]
    fn commitment_owner_and_expiry() {
        let auth = authorities(1);
        let mut st = state(&auth, 1);
        let owner = generate_identity([3; 32]);
        st.owner = Some(owner.device_id());
        let rs = Ruleset::full("c", 1, vec![], SimTime::MAX);
        let stranger = generate_identity([4; 32]);
        assert_eq!(commit_binding(&mut st, rs.clone(), SimTime(10), &stranger, SimTime(0)).unwrap_err(), PolicyError::NotOwner(stranger.device_id()));
        assert!(matches!(commit_binding(&mut st, rs.clone(), SimTime(0), &owner, SimTime(0)), Err(PolicyError::InvalidExpiry { .. })));
        commit_binding(&mut st, rs, SimTime(10), &owner, SimTime(0)).unwrap();
        assert!(remove_binding(&mut st, "c", SimTime(9)).is_err());
        assert!(matches!(remove_binding(&mut st, "nope", SimTime(10)), Err(PolicyError::UnknownCommitment(_))));
        remove_binding(&mut st, "c", SimTime(10)).unwrap();
        assert!(st.bindings().is_empty());
    }
}
