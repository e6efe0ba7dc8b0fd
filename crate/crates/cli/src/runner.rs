// Copyright 2026 The flexheg-sim Authors
// SPDX-License-Identifier: Apache-2.0

//! Drives a scenario through the device and network models and collects
//! the report.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Debug;

use flexheg_core::claim::QUALIFIER_EXTERNAL_INPUTS;
use flexheg_core::codec::Digest;
use flexheg_core::device::{toy_weights, DeviceConfig, DeviceError, EvalSuite, PrivateEval, ShareTarget};
use flexheg_core::identity::{LifeState, SealedBlob};
use flexheg_core::netsim::{
    enforce_location_restriction, form_cluster, verify_cluster_constraints, verify_location, ClusterConfig,
    ClusterConstraints, EventQueue, Landmark, MessageKind, NetError, NetworkModel, Node, Position,
};
use flexheg_core::policy::{
    verify_license_issuance, IssuanceQuery, IssuerLog, License, LicenseScope, QuorumConfig, Rule, Ruleset, ShareScope,
    UpdatePackage, DEFAULT_UPDATE_INTERVAL_MS,
};
use flexheg_core::receipts::{
    self, claim_data_below, claim_flop_below, claim_flop_exact, compute_accounting, query_tags, DataRef, TagMode,
};
use flexheg_core::time::{Interval, SimTime};
use flexheg_core::{
    generate_identity, Claim, ClaimBody, DeviceId, DeviceIdentity, GuaranteeProcessorState, KeyRing, Recipient,
    ReceiptDag, ReceiptId, Statement, Subject, WorkloadRequest,
};
use serde_json::{json, Value};
use thiserror::Error;

use crate::report::{AssertionResult, ClaimEntry, FlagEntry, ReceiptEntry, Report, Summary, TraceEntry, REPORT_SCHEMA};
use crate::scenario::{
    AssertionSpec, ClaimSpec, DeviceSpec, Event, EventSpec, LicenseScopeSpec, LifeStateName, RuleSpec, RulesetSpec,
    Scenario, ShareScopeSpec, SCENARIO_SCHEMA,
};

/// Name reserved for "anyone outside the device network".
pub const EXTERNAL: &str = "external";
pub const FLAG_CONCURRENT_RUNS: &str = "concurrent_similar_runs";
pub const FLAG_EXTERNAL_INPUTS: &str = "external_inputs";
pub const FLAG_UNSEALED_TRANSFER: &str = "unsealed_transfer";

#[derive(Debug, Error)]
pub enum InputError {
    #[error("unsupported schema {0:?}, expected {SCENARIO_SCHEMA:?}")]
    Schema(String),
    #[error("unknown reference {0:?}")]
    UnknownReference(String),
    #[error("name {0:?} declared twice")]
    DuplicateName(String),
    #[error("unknown {kind} label {label:?}")]
    UnknownLabel { kind: &'static str, label: String },
    #[error("{kind} label {label:?} used twice")]
    DuplicateLabel { kind: &'static str, label: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// Outcome of one event: detail on success, or an outcome code with detail.
type Outcome = Result<Value, (String, Value)>;

const WRAPPERS: [&str; 6] = ["Policy", "Receipt", "Identity", "Decode", "Net", "Device"];

/// Snake-case name of the innermost error variant, from its `Debug` form.
fn error_code(e: &impl Debug) -> String {
    let text = format!("{e:?}");
    let mut rest = text.as_str();
    loop {
        let end = rest.find(|c: char| !c.is_ascii_alphanumeric() && c != '_').unwrap_or(rest.len());
        let ident = &rest[..end];
        if WRAPPERS.contains(&ident) && rest[end..].starts_with('(') {
            rest = &rest[end + 1..];
            continue;
        }
        let mut out = String::new();
        for (i, c) in ident.chars().enumerate() {
            if c.is_ascii_uppercase() {
                if i > 0 {
                    out.push('_');
                }
                out.push(c.to_ascii_lowercase());
            } else {
                out.push(c);
            }
        }
        return out;
    }
}

fn fail(e: impl Debug + std::fmt::Display) -> (String, Value) {
    (format!("error:{}", error_code(&e)), json!({ "message": e.to_string() }))
}

fn device_fail(e: DeviceError) -> (String, Value) {
    match e {
        DeviceError::Denied(rule) => (format!("denied:{}", rule.kind), json!({ "rule": rule.to_string() })),
        other => fail(other),
    }
}

fn expect_met(expect: &str, outcome: &str) -> bool {
    outcome == expect || outcome.strip_prefix(expect).is_some_and(|rest| rest.starts_with(':'))
}

pub fn identity_seed(seed: u64, name: &str) -> [u8; 32] {
    let mut buf = seed.to_be_bytes().to_vec();
    buf.extend_from_slice(name.as_bytes());
    Digest::tagged("flexheg/scenario-identity/v1", &buf).0
}

pub fn workload_digest(name: &str) -> Digest {
    Digest::tagged("flexheg/workload/v1", name.as_bytes())
}

pub fn dataset_digest(name: &str) -> Digest {
    Digest::tagged("flexheg/dataset/v1", name.as_bytes())
}

fn external_id() -> DeviceId {
    DeviceId(Digest::tagged("flexheg/external/v1", b""))
}

fn km_to_m(km: f64) -> u64 {
    (km * 1000.0).round().max(0.0) as u64
}

struct Eval {
    model: ReceiptId,
    suite: EvalSuite,
    suite_bytes: Vec<u8>,
    out: PrivateEval,
}

pub struct Runner<'a> {
    scenario: &'a Scenario,
    seed: u64,
    devices: BTreeMap<String, GuaranteeProcessorState>,
    principals: BTreeMap<String, DeviceIdentity>,
    landmarks: BTreeMap<String, Landmark>,
    names: BTreeMap<DeviceId, String>,
    net: NetworkModel,
    store: ReceiptDag,
    receipts: BTreeMap<String, ReceiptId>,
    receipt_order: Vec<String>,
    claims: BTreeMap<String, Claim>,
    claim_order: Vec<String>,
    licenses: BTreeMap<String, License>,
    issuer_logs: BTreeMap<String, IssuerLog>,
    clusters: BTreeMap<String, ClusterConfig>,
    deployments: BTreeMap<String, Vec<SealedBlob>>,
    evals: BTreeMap<String, Eval>,
    trace: Vec<TraceEntry>,
}

impl<'a> Runner<'a> {
    pub fn new(scenario: &'a Scenario, seed: u64) -> Result<Self, InputError> {
        if scenario.schema != SCENARIO_SCHEMA {
            return Err(InputError::Schema(scenario.schema.clone()));
        }
        let mut runner = Runner {
            scenario,
            seed,
            devices: BTreeMap::new(),
            principals: BTreeMap::new(),
            landmarks: BTreeMap::new(),
            names: BTreeMap::new(),
            net: NetworkModel::new(scenario.network.signal_speed_km_s.max(1)),
            store: ReceiptDag::new(),
            receipts: BTreeMap::new(),
            receipt_order: vec![],
            claims: BTreeMap::new(),
            claim_order: vec![],
            licenses: BTreeMap::new(),
            issuer_logs: BTreeMap::new(),
            clusters: BTreeMap::new(),
            deployments: BTreeMap::new(),
            evals: BTreeMap::new(),
            trace: vec![],
        };
        runner.names.insert(external_id(), EXTERNAL.to_string());
        for name in &scenario.principals {
            let id = runner.claim_name(name)?;
            runner.principals.insert(name.clone(), id);
        }
        for spec in &scenario.landmarks {
            let id = runner.claim_name(&spec.name)?;
            let mut lm = Landmark::new(id);
            lm.refuse_identified = spec.refuse_identified;
            lm.require_deanonymize = spec.require_deanonymize;
            runner.landmarks.insert(spec.name.clone(), lm);
        }
        let mut device_ids = Vec::new();
        for spec in &scenario.devices {
            device_ids.push((spec, runner.claim_name(&spec.name)?));
        }
        for (spec, identity) in device_ids {
            let state = runner.build_device(spec, identity)?;
            runner.devices.insert(spec.name.clone(), state);
        }
        let peers: Vec<_> = runner.devices.values().map(|d| d.public()).collect();
        for dev in runner.devices.values_mut() {
            for p in &peers {
                dev.add_peer(p);
            }
        }
        for name in scenario.network.nodes.keys() {
            if name != EXTERNAL {
                runner.id_of(name)?;
            }
        }
        let ids: Vec<(String, DeviceId)> = runner.names.iter().map(|(id, n)| (n.clone(), *id)).collect();
        for (name, id) in ids {
            let node = scenario.network.nodes.get(&name).cloned().unwrap_or_default();
            runner.net.add_node(
                id,
                Node { position: Position::from_km(node.x_km, node.y_km), processing_delay_ns: node.processing_delay_ns },
            );
        }
        for link in &scenario.network.links {
            let (a, b) = (runner.id_of(&link.a)?, runner.id_of(&link.b)?);
            runner.net.set_bandwidth(a, b, link.bandwidth_bytes_per_s);
        }
        Ok(runner)
    }

    fn claim_name(&mut self, name: &str) -> Result<DeviceIdentity, InputError> {
        let identity = generate_identity(identity_seed(self.seed, name));
        if name == EXTERNAL || self.names.values().any(|n| n == name) {
            return Err(InputError::DuplicateName(name.to_string()));
        }
        self.names.insert(identity.device_id(), name.to_string());
        Ok(identity)
    }

    fn build_device(&self, spec: &DeviceSpec, identity: DeviceIdentity) -> Result<GuaranteeProcessorState, InputError> {
        let keys = spec.quorum.signers.iter().map(|s| self.public_key(s)).collect::<Result<Vec<_>, _>>()?;
        let quorum = QuorumConfig::new(keys, spec.quorum.threshold).map_err(|e| InputError::Invalid(e.to_string()))?;
        let mut config = DeviceConfig::new(self.full_ruleset(&spec.ruleset)?, quorum);
        if let Some(b) = &spec.baseline {
            config.baseline = Some(Ruleset::baseline(&b.id, self.rules(&b.rules)?));
        }
        config.update_interval_ms = spec.update_interval_ms.unwrap_or(DEFAULT_UPDATE_INTERVAL_MS);
        config.owner = spec.owner.as_deref().map(|o| self.id_of(o)).transpose()?;
        GuaranteeProcessorState::new(identity, config, SimTime::ZERO).map_err(|e| InputError::Invalid(e.to_string()))
    }

    fn id_of(&self, name: &str) -> Result<DeviceId, InputError> {
        self.names.iter().find(|(_, n)| *n == name).map(|(id, _)| *id).ok_or_else(|| InputError::UnknownReference(name.into()))
    }

    fn name_of(&self, id: &DeviceId) -> String {
        self.names.get(id).cloned().unwrap_or_else(|| id.0.to_hex())
    }

    fn identity(&self, name: &str) -> Result<&DeviceIdentity, InputError> {
        self.principals
            .get(name)
            .or_else(|| self.devices.get(name).map(|d| d.identity()))
            .or_else(|| self.landmarks.get(name).map(|l| &l.identity))
            .ok_or_else(|| InputError::UnknownReference(name.into()))
    }

    fn principal(&self, name: &str) -> Result<&DeviceIdentity, InputError> {
        self.principals.get(name).ok_or_else(|| InputError::UnknownReference(name.into()))
    }

    fn public_key(&self, name: &str) -> Result<flexheg_core::PublicKey, InputError> {
        Ok(*self.identity(name)?.public_key())
    }

    fn device(&self, name: &str) -> Result<&GuaranteeProcessorState, InputError> {
        self.devices.get(name).ok_or_else(|| InputError::UnknownReference(name.into()))
    }

    fn device_mut(&mut self, name: &str) -> Result<&mut GuaranteeProcessorState, InputError> {
        self.devices.get_mut(name).ok_or_else(|| InputError::UnknownReference(name.into()))
    }

    fn receipt(&self, label: &str) -> Result<ReceiptId, InputError> {
        self.receipts.get(label).copied().ok_or_else(|| InputError::UnknownLabel { kind: "receipt", label: label.into() })
    }

    /// Every identity in the scenario, as a verifier would configure them.
    pub fn trust_ring(&self) -> KeyRing {
        let mut ring = KeyRing::new();
        for id in self.principals.values().chain(self.landmarks.values().map(|l| &l.identity)) {
            let _ = ring.insert(*id.public_key());
        }
        for d in self.devices.values() {
            let _ = ring.insert(*d.identity().public_key());
        }
        ring
    }

    pub fn trust_roots(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for (n, id) in &self.principals {
            out.insert(n.clone(), id.public_key().to_hex());
        }
        for (n, l) in &self.landmarks {
            out.insert(n.clone(), l.identity.public_key().to_hex());
        }
        for (n, d) in &self.devices {
            out.insert(n.clone(), d.identity().public_key().to_hex());
        }
        out
    }

    pub fn claims(&self) -> impl Iterator<Item = (&String, &Claim)> {
        self.claim_order.iter().map(|l| (l, &self.claims[l]))
    }

    fn rules(&self, specs: &[RuleSpec]) -> Result<Vec<Rule>, InputError> {
        let ids = |names: &[String]| names.iter().map(|n| self.id_of(n)).collect::<Result<BTreeSet<_>, _>>();
        specs
            .iter()
            .map(|spec| {
                Ok(match spec {
                    RuleSpec::MaxTrainingFlop { limit } => Rule::MaxTrainingFlop { limit: *limit },
                    RuleSpec::RequireLicense { action } => Rule::RequireLicense { action: *action },
                    RuleSpec::ShareOnlyTo { scope: ShareScopeSpec::FlexhegOnly } => {
                        Rule::ShareOnlyTo { scope: ShareScope::FlexhegOnly }
                    }
                    RuleSpec::ShareOnlyTo { scope: ShareScopeSpec::Explicit(names) } => {
                        Rule::ShareOnlyTo { scope: ShareScope::Explicit(ids(names)?) }
                    }
                    RuleSpec::RequireEvalEvery { interval_flop } => Rule::RequireEvalEvery { interval_flop: *interval_flop },
                    RuleSpec::ControlledDeployment { min_flop, approved, required_tags } => Rule::ControlledDeployment {
                        min_flop: *min_flop,
                        approved: ids(approved)?,
                        required_tags: required_tags.iter().cloned().collect(),
                    },
                    RuleSpec::MaxClusterEgress { bytes_per_s } => Rule::MaxClusterEgress { bytes_per_s: *bytes_per_s },
                    RuleSpec::AllowWhitelisted { workloads } => {
                        Rule::AllowWhitelisted { workloads: workloads.iter().map(|w| workload_digest(w)).collect() }
                    }
                })
            })
            .collect()
    }

    fn full_ruleset(&self, spec: &RulesetSpec) -> Result<Ruleset, InputError> {
        let expiry = spec.expiry_ms.map(SimTime).unwrap_or(SimTime::MAX);
        Ok(Ruleset::full(&spec.id, spec.version, self.rules(&spec.rules)?, expiry))
    }

    fn license_scope(&self, spec: &LicenseScopeSpec) -> LicenseScope {
        match spec {
            LicenseScopeSpec::Action(a) => LicenseScope::Action(*a),
            LicenseScopeSpec::Workload(w) => LicenseScope::Workload(workload_digest(w)),
        }
    }

    fn nonce(&self, seq: u64) -> [u8; 32] {
        let mut buf = self.seed.to_be_bytes().to_vec();
        buf.extend_from_slice(&seq.to_be_bytes());
        Digest::tagged("flexheg/scenario-nonce/v1", &buf).0
    }

    fn add_receipt(&mut self, label: &str, receipt: &flexheg_core::Receipt) -> Result<(), InputError> {
        if self.receipts.contains_key(label) {
            return Err(InputError::DuplicateLabel { kind: "receipt", label: label.into() });
        }
        if !self.store.contains(&receipt.id()) {
            self.store.insert(receipt.clone()).map_err(|e| InputError::Invalid(e.to_string()))?;
        }
        self.receipts.insert(label.to_string(), receipt.id());
        self.receipt_order.push(label.to_string());
        Ok(())
    }

    fn add_claim(&mut self, label: &str, claim: Claim) -> Result<(), InputError> {
        if self.claims.contains_key(label) {
            return Err(InputError::DuplicateLabel { kind: "claim", label: label.into() });
        }
        self.claims.insert(label.to_string(), claim);
        self.claim_order.push(label.to_string());
        Ok(())
    }

    /// Copies any receipts in the ancestry of `parents` that `device` has not
    /// seen, in the order they were produced.
    fn import_ancestry(&mut self, device: &str, parents: &[ReceiptId]) -> Result<Result<(), DeviceError>, InputError> {
        let ancestry = self.store.ancestors_of_all(parents).map_err(|e| InputError::Invalid(e.to_string()))?;
        let missing: Vec<_> = {
            let dev = self.device(device)?;
            self.store.iter().filter(|r| ancestry.contains(&r.id()) && !dev.dag().contains(&r.id())).cloned().collect()
        };
        let dev = self.device_mut(device)?;
        for r in missing {
            if let Err(e) = dev.import_receipt(r) {
                return Ok(Err(e));
            }
        }
        Ok(Ok(()))
    }

    /// Runs the script to completion.
    pub fn run(mut self) -> Result<(Report, Artifacts), InputError> {
        let mut queue = EventQueue::new();
        for spec in &self.scenario.script {
            queue.push(spec.at_ms, spec.clone());
        }
        let end = self.scenario.script.iter().map(|e| e.at_ms).max().unwrap_or(0);
        for dev in &self.scenario.devices {
            let Some(policy) = &dev.location_check else { continue };
            let period = policy.period_ms.or(dev.update_interval_ms).unwrap_or(DEFAULT_UPDATE_INTERVAL_MS).max(1);
            let mut t = period;
            while t <= end {
                let event = Event::LocationCheck {
                    device: dev.name.clone(),
                    landmark: policy.landmark.clone(),
                    radius_km: policy.radius_km,
                    mode: policy.mode,
                    added_delay_ns: policy.added_delay_ns,
                    enforce: true,
                };
                queue.push(t, EventSpec { at_ms: t, label: None, expect: None, event });
                t += period;
            }
        }

        let mut seq = 0u64;
        while let Some((at, spec)) = queue.pop() {
            let outcome = self.step(&spec, seq, SimTime(at))?;
            let (outcome, detail) = match outcome {
                Ok(detail) => ("ok".to_string(), detail),
                Err((code, detail)) => (code, detail),
            };
            let expect_met = spec.expect.as_deref().map(|e| expect_met(e, &outcome));
            self.trace.push(TraceEntry {
                seq,
                at_ms: at,
                event: event_name(&spec.event).to_string(),
                label: spec.label.clone(),
                outcome,
                expect: spec.expect.clone(),
                expect_met,
                detail,
            });
            seq += 1;
        }

        let flags = self.flags();
        let assertions = self
            .scenario
            .assertions
            .iter()
            .enumerate()
            .map(|(index, a)| {
                let (passed, detail) = self.check(a, &flags)?;
                Ok(AssertionResult { index, assertion: serde_json::to_value(a).unwrap_or(Value::Null), passed, detail })
            })
            .collect::<Result<Vec<_>, InputError>>()?;

        let ring = self.trust_ring();
        let claims = self
            .claims()
            .map(|(label, c)| ClaimEntry {
                label: label.clone(),
                kind: c.kind().to_string(),
                attesters: c.attesters().iter().map(|a| self.name_of(a)).collect(),
                qualifiers: c.body.qualifiers.iter().cloned().collect(),
                verified: c.verify(&ring).is_ok(),
                hex: hex::encode(c.to_bytes()),
            })
            .collect();
        let receipts = self
            .receipt_order
            .iter()
            .map(|label| {
                let r = self.store.get(&self.receipts[label]).expect("labelled receipts are stored");
                ReceiptEntry {
                    label: label.clone(),
                    id: r.id().0.to_hex(),
                    producer: self.name_of(&r.producer()),
                    op: r.op_class().to_string(),
                    flop: r.flop(),
                    total_flop: self.store.total_flop(&r.id()).unwrap_or(0),
                    hex: hex::encode(r.to_bytes()),
                }
            })
            .collect();

        let expectations_failed = self.trace.iter().filter(|t| t.expect_met == Some(false)).count();
        let assertions_failed = assertions.iter().filter(|a: &&AssertionResult| !a.passed).count();
        let report = Report {
            schema: REPORT_SCHEMA.to_string(),
            scenario: self.scenario.name.clone(),
            seed: self.seed,
            identities: self.names.iter().filter(|(_, n)| *n != EXTERNAL).map(|(id, n)| (n.clone(), id.0.to_hex())).collect(),
            trace: std::mem::take(&mut self.trace),
            receipts,
            claims,
            assertions,
            flags,
            summary: Summary {
                events: seq as usize,
                expectations_failed,
                assertions_failed,
                passed: expectations_failed == 0 && assertions_failed == 0,
            },
        };
        let artifacts = Artifacts {
            claims: self.claims().map(|(l, c)| (l.clone(), c.to_bytes())).collect(),
            trust_roots: self.trust_roots(),
        };
        Ok((report, artifacts))
    }

    fn step(&mut self, spec: &EventSpec, seq: u64, now: SimTime) -> Result<Outcome, InputError> {
        let label = spec.label.clone().unwrap_or_else(|| format!("#{seq}"));
        match &spec.event {
            Event::Workload { device, op, parents, flop, data, tags, workload, destination, duration_ms } => {
                let parents = parents.iter().map(|p| self.receipt(p)).collect::<Result<Vec<_>, _>>()?;
                if let Err(e) = self.import_ancestry(device, &parents)? {
                    return Ok(Err(device_fail(e)));
                }
                let mut req = WorkloadRequest::new(*op).parents(parents).flop(*flop).duration(*duration_ms);
                req.tags = tags.clone();
                req.data_in = data.iter().map(|d| DataRef { digest: dataset_digest(&d.name), bytes: d.bytes }).collect();
                req.workload = workload.as_deref().map(workload_digest);
                req.destination = match destination.as_deref() {
                    None => None,
                    Some(EXTERNAL) => Some(Recipient::External),
                    Some(n) => Some(Recipient::Device(self.id_of(n)?)),
                };
                match self.device_mut(device)?.handle_workload(&req, now) {
                    Ok(r) => {
                        self.add_receipt(&label, &r)?;
                        let total = self.store.total_flop(&r.id()).unwrap_or(0);
                        Ok(Ok(json!({ "receipt": r.id().0.to_hex(), "total_flop": total })))
                    }
                    Err(e) => Ok(Err(device_fail(e))),
                }
            }
            Event::DeclareRoot { devices, data } => {
                let digest = dataset_digest(data);
                for d in devices {
                    self.device_mut(d)?.declare_root(digest);
                }
                self.store.declare_root(digest);
                Ok(Ok(json!({ "root": digest.to_hex() })))
            }
            Event::Update { devices, ruleset, signers } => {
                let rs = self.full_ruleset(ruleset)?;
                let signers = signers.iter().map(|s| self.identity(s)).collect::<Result<Vec<_>, _>>()?;
                let pkg = match UpdatePackage::sign(rs, &signers, now) {
                    Ok(p) => p,
                    Err(e) => return Ok(Err(fail(e))),
                };
                let mut first_err = None;
                for d in devices {
                    if let Err(e) = self.device_mut(d)?.install_update(&pkg, now) {
                        first_err.get_or_insert(device_fail(e));
                    }
                }
                Ok(first_err.map_or(Ok(json!({ "version": pkg.version })), Err))
            }
            Event::License { devices, scope, subject, not_before_ms, not_after_ms, quorum, signers } => {
                let subject = subject.as_deref().map(|s| self.id_of(s)).transpose()?;
                let signer_ids = signers.iter().map(|s| self.identity(s)).collect::<Result<Vec<_>, _>>()?;
                let license = match License::issue(
                    self.license_scope(scope),
                    subject,
                    SimTime(*not_before_ms),
                    SimTime(*not_after_ms),
                    *quorum,
                    &signer_ids,
                    now,
                ) {
                    Ok(l) => l,
                    Err(e) => return Ok(Err(fail(e))),
                };
                for s in signers {
                    let issuer = self.identity(s)?;
                    let mut log = self.issuer_logs.get(s).cloned().unwrap_or_else(|| IssuerLog::new(issuer.device_id()));
                    if let Err(e) = log.append(&license, issuer, now) {
                        return Ok(Err(fail(e)));
                    }
                    self.issuer_logs.insert(s.clone(), log);
                }
                let mut first_err = None;
                for d in devices {
                    if let Err(e) = self.device_mut(d)?.install_license(license.clone(), now) {
                        first_err.get_or_insert(device_fail(e));
                    }
                }
                let digest = license.digest();
                if self.licenses.insert(label.clone(), license).is_some() {
                    return Err(InputError::DuplicateLabel { kind: "license", label });
                }
                Ok(first_err.map_or(Ok(json!({ "license": digest.to_hex() })), Err))
            }
            Event::LicenseIssuance { issuer, attester, license, scope, subject } => {
                let issuer_id = self.identity(issuer)?;
                let mut log = self.issuer_logs.get(issuer).cloned().unwrap_or_else(|| IssuerLog::new(issuer_id.device_id()));
                if log.head.is_none() {
                    if let Err(e) = log.sign_head(issuer_id, now) {
                        return Ok(Err(fail(e)));
                    }
                }
                let query = match (license, scope, subject) {
                    (Some(l), None, None) => IssuanceQuery::Issued(
                        self.licenses.get(l).ok_or_else(|| InputError::UnknownLabel { kind: "license", label: l.clone() })?,
                    ),
                    (None, Some(scope), Some(subject)) => {
                        IssuanceQuery::NotIssued { scope: self.license_scope(scope), subject: self.id_of(subject)? }
                    }
                    _ => return Err(InputError::Invalid("license_issuance needs `license` or `scope` and `subject`".into())),
                };
                let ring = self.trust_ring();
                match verify_license_issuance(&log, issuer_id.public_key(), query, &ring, self.identity(attester)?, now) {
                    Ok(claim) => {
                        let kind = claim.kind().to_string();
                        self.add_claim(&label, claim)?;
                        Ok(Ok(json!({ "claim": kind })))
                    }
                    Err(e) => Ok(Err(fail(e))),
                }
            }
            Event::Tamper { device, brick } => {
                let id = self.id_of(device)?;
                self.device_mut(device)?.tamper_event(*brick);
                // A tampered member invalidates every cluster it was part of.
                let broken: Vec<ClusterConfig> = self.clusters.values().filter(|c| c.members.contains(&id)).cloned().collect();
                for config in &broken {
                    self.net.unregister_cluster(&config.digest());
                    for dev in self.devices.values_mut() {
                        if config.members.contains(&dev.device_id())
                            && dev.cluster().is_some_and(|c| c.config_digest == config.digest())
                        {
                            dev.leave_cluster();
                        }
                    }
                }
                let state = self.device(device)?.life_state();
                Ok(Ok(json!({ "life_state": format!("{state:?}").to_lowercase(), "clusters_invalidated": broken.len() })))
            }
            Event::Partition { a, b } => {
                let (a, b) = (self.id_of(a)?, self.id_of(b)?);
                self.net.partition(a, b);
                Ok(Ok(Value::Null))
            }
            Event::Heal { a, b } => {
                let (a, b) = (self.id_of(a)?, self.id_of(b)?);
                self.net.heal(a, b);
                Ok(Ok(Value::Null))
            }
            Event::Isolate { node } => {
                let id = self.id_of(node)?;
                self.net.isolate(id);
                Ok(Ok(Value::Null))
            }
            Event::Reconnect { node } => {
                let id = self.id_of(node)?;
                self.net.reconnect(id);
                Ok(Ok(Value::Null))
            }
            Event::LocationCheck { device, landmark, radius_km, mode, added_delay_ns, enforce } => {
                let nonce = self.nonce(seq);
                let lm = self.landmarks.get(landmark).ok_or_else(|| InputError::UnknownReference(landmark.clone()))?;
                let dev = self.devices.get(device).ok_or_else(|| InputError::UnknownReference(device.clone()))?;
                let result = verify_location(&mut self.net, dev, lm, km_to_m(*radius_km), *mode, *added_delay_ns, nonce, now);
                if *enforce {
                    enforce_location_restriction(self.device_mut(device)?, &result);
                }
                match result {
                    Ok(o) => {
                        let detail = json!({ "rtt_ns": o.rtt_ns, "bound_m": o.bound_m, "region_ok": o.region_ok });
                        match o.claim {
                            Some(claim) => {
                                if spec.label.is_some() {
                                    self.add_claim(&label, claim)?;
                                }
                                Ok(Ok(detail))
                            }
                            None => Ok(Err(("error:out_of_region".into(), detail))),
                        }
                    }
                    Err(e) => Ok(Err(fail(e))),
                }
            }
            Event::Deploy { device, model, recipients, safeguards } => {
                let model = self.receipt(model)?;
                let targets = recipients
                    .iter()
                    .map(|r| match r.as_str() {
                        EXTERNAL => Ok(ShareTarget::External),
                        n => Ok(ShareTarget::Device(self.device(n)?.public())),
                    })
                    .collect::<Result<Vec<_>, InputError>>()?;
                let from = self.id_of(device)?;
                let deployment = match self.device_mut(device)?.controlled_deploy(&model, &targets, safeguards, now) {
                    Ok(d) => d,
                    Err(e) => return Ok(Err(device_fail(e))),
                };
                let mut blobs = deployment.blobs.iter();
                let mut externals = deployment.external_payloads.iter();
                for t in &targets {
                    let sent = match t {
                        ShareTarget::Device(p) => {
                            let blob = blobs.next().expect("one blob per device target");
                            self.net.send(from, p.device_id, MessageKind::Deployment, true, blob.to_bytes(), now)
                        }
                        ShareTarget::External => {
                            let payload = externals.next().expect("one payload per external target");
                            self.net.send(from, external_id(), MessageKind::Deployment, false, payload.clone(), now)
                        }
                    };
                    if let Err(e) = sent {
                        return Ok(Err(fail(e)));
                    }
                }
                self.add_receipt(&label, &deployment.receipt)?;
                self.add_claim(&label, deployment.claim)?;
                if self.deployments.insert(label.clone(), deployment.blobs).is_some() {
                    return Err(InputError::DuplicateLabel { kind: "deployment", label });
                }
                Ok(Ok(json!({ "sealed": targets.iter().filter(|t| matches!(t, ShareTarget::Device(_))).count() })))
            }
            Event::Eval { device, model, evaluator, suite } => {
                let model = self.receipt(model)?;
                let eval_id = self.principal(evaluator)?;
                let dev_public = self.device(device)?.public();
                let suite_bytes = suite.to_bytes();
                let sealed = match eval_id.seal_to(&dev_public.public_key, &suite_bytes, now) {
                    Ok(s) => s,
                    Err(e) => return Ok(Err(fail(e))),
                };
                let evaluator_public = eval_id.public();
                if let Err(e) =
                    self.net.send(evaluator_public.device_id, dev_public.device_id, MessageKind::EvalSuite, true, sealed.to_bytes(), now)
                {
                    return Ok(Err(fail(e)));
                }
                let out = match self.device_mut(device)?.run_private_eval(&model, &sealed, &evaluator_public, now) {
                    Ok(o) => o,
                    Err(e) => return Ok(Err(device_fail(e))),
                };
                if let Err(e) = self.net.send(
                    dev_public.device_id,
                    evaluator_public.device_id,
                    MessageKind::EvalResult,
                    true,
                    out.sealed_result.to_bytes(),
                    now,
                ) {
                    return Ok(Err(fail(e)));
                }
                let body = ClaimBody::new(
                    Statement::EvalScore { suite_digest: out.result.suite_digest, score: out.result.score },
                    Subject::Receipt(model),
                );
                let claim = match Claim::issue(body, self.device(device)?.identity(), now) {
                    Ok(c) => c,
                    Err(e) => return Ok(Err(fail(e))),
                };
                self.add_receipt(&label, &out.receipt)?;
                self.add_claim(&label, claim)?;
                let detail = json!({ "score": out.result.score, "suite": out.result.suite_digest.to_hex() });
                if self.evals.insert(label.clone(), Eval { model, suite: suite.clone(), suite_bytes, out }).is_some() {
                    return Err(InputError::DuplicateLabel { kind: "eval", label });
                }
                Ok(Ok(detail))
            }
            Event::Claim { device, claim } => {
                let dev = self.device(device)?;
                let (dag, me) = (dev.dag(), dev.identity());
                let result = match claim {
                    ClaimSpec::FlopBelow { receipt, threshold } => claim_flop_below(dag, &self.receipt(receipt)?, *threshold, me, now),
                    ClaimSpec::FlopExact { receipt } => claim_flop_exact(dag, &self.receipt(receipt)?, me, now),
                    ClaimSpec::DataBelow { receipt, threshold } => claim_data_below(dag, &self.receipt(receipt)?, *threshold, me, now),
                    ClaimSpec::TagPresent { receipt, tag } => {
                        query_tags(dag, &self.receipt(receipt)?, tag, TagMode::PresentAnywhere, me, now)
                    }
                    ClaimSpec::TagAbsent { receipt, tag } => {
                        query_tags(dag, &self.receipt(receipt)?, tag, TagMode::AbsentEverywhere, me, now)
                    }
                    ClaimSpec::SharedOnlyWith { receipt } => {
                        let r = self.receipt(receipt)?;
                        match self.device_mut(device)?.sharing_claim(&r, now) {
                            Ok(c) => Ok(c),
                            Err(e) => return Ok(Err(device_fail(e))),
                        }
                    }
                };
                match result {
                    Ok(c) => {
                        let detail = json!({ "kind": c.kind().to_string(), "qualifiers": c.body.qualifiers });
                        self.add_claim(&label, c)?;
                        Ok(Ok(detail))
                    }
                    Err(e) => Ok(Err(fail(e))),
                }
            }
            Event::Accounting { attester, devices, period_ms, capacity_flop_per_s, tolerance_flop, mode, withhold } => {
                let withheld = withhold.iter().map(|w| self.receipt(w)).collect::<Result<BTreeSet<_>, _>>()?;
                let mut submitted = ReceiptDag::new();
                let mut skipped = BTreeSet::new();
                for r in self.store.iter() {
                    if withheld.contains(&r.id()) || r.parents().iter().any(|p| skipped.contains(p)) {
                        skipped.insert(r.id());
                        continue;
                    }
                    submitted.insert(r.clone()).map_err(|e| InputError::Invalid(e.to_string()))?;
                }
                let ids = devices.iter().map(|d| self.id_of(d)).collect::<Result<BTreeSet<_>, _>>()?;
                let capacity = capacity_flop_per_s
                    .iter()
                    .map(|(n, c)| Ok((self.id_of(n)?, *c)))
                    .collect::<Result<BTreeMap<_, _>, InputError>>()?;
                let period = Interval::new(SimTime(period_ms[0]), SimTime(period_ms[1]));
                let attester_id = self.identity(attester)?;
                match compute_accounting(&submitted, &ids, period, &capacity, *tolerance_flop, *mode, attester_id, now) {
                    Ok(claim) => {
                        self.add_claim(&label, claim)?;
                        Ok(Ok(json!({ "withheld": skipped.len() })))
                    }
                    Err(receipts::ReceiptError::AccountingGap { observed_mflop, capacity_mflop }) => Ok(Err((
                        "error:accounting_gap".into(),
                        json!({
                            "observed_flop": (observed_mflop / 1000) as u64,
                            "capacity_flop": (capacity_mflop / 1000) as u64,
                            "gap_flop": (observed_mflop.abs_diff(capacity_mflop) / 1000) as u64,
                        }),
                    ))),
                    Err(e) => Ok(Err(fail(e))),
                }
            }
            Event::Commit { device, ruleset, until_ms, owner } => {
                let rs = self.full_ruleset(ruleset)?;
                let owner = self.principal(owner)?;
                let owner = generate_identity(identity_seed(self.seed, &self.name_of(&owner.device_id())));
                match self.device_mut(device)?.commit_binding(rs, SimTime(*until_ms), &owner, now) {
                    Ok(claim) => {
                        self.add_claim(&label, claim)?;
                        Ok(Ok(json!({ "until_ms": until_ms })))
                    }
                    Err(e) => Ok(Err(device_fail(e))),
                }
            }
            Event::RemoveCommitment { device, ruleset_id } => match self.device_mut(device)?.remove_binding(ruleset_id, now) {
                Ok(rs) => Ok(Ok(json!({ "removed": rs.id }))),
                Err(e) => Ok(Err(device_fail(e))),
            },
            Event::FormCluster { devices, egress_cap } => {
                let wanted: BTreeSet<&String> = devices.iter().collect();
                for d in &wanted {
                    self.device(d)?;
                }
                let mut members: Vec<&mut GuaranteeProcessorState> =
                    self.devices.iter_mut().filter(|(n, _)| wanted.contains(n)).map(|(_, d)| d).collect();
                match form_cluster(&mut self.net, &mut members, *egress_cap, now) {
                    Ok(config) => {
                        let detail = json!({ "config": config.digest().to_hex(), "members": config.members.len() });
                        if self.clusters.insert(label.clone(), config).is_some() {
                            return Err(InputError::DuplicateLabel { kind: "cluster", label });
                        }
                        Ok(Ok(detail))
                    }
                    Err(e) => Ok(Err(fail(e))),
                }
            }
            Event::VerifyCluster { cluster, max_members, max_egress, attester } => {
                let config = self
                    .clusters
                    .get(cluster)
                    .cloned()
                    .ok_or_else(|| InputError::UnknownLabel { kind: "cluster", label: cluster.clone() })?;
                let constraints = ClusterConstraints { max_members: *max_members, max_egress: *max_egress };
                match verify_cluster_constraints(&config, constraints, &self.devices, self.identity(attester)?, now) {
                    Ok(claim) => {
                        let digest = config.digest();
                        for dev in self.devices.values_mut() {
                            if config.members.contains(&dev.device_id()) {
                                dev.mark_cluster_verified(&digest);
                            }
                        }
                        self.add_claim(&label, claim)?;
                        Ok(Ok(json!({ "config": digest.to_hex() })))
                    }
                    Err(e) => Ok(Err(fail(e))),
                }
            }
            Event::Tick { devices } => {
                let mut first_err = None;
                for d in devices {
                    if let Err(e) = self.device_mut(d)?.tick(now) {
                        first_err.get_or_insert(device_fail(e));
                    }
                }
                Ok(first_err.map_or(Ok(Value::Null), Err))
            }
            Event::Send { from, to, bytes } => {
                let (a, b) = (self.id_of(from)?, self.id_of(to)?);
                match self.net.send(a, b, MessageKind::Other, false, vec![0; *bytes as usize], now) {
                    Ok(arrival_ns) => Ok(Ok(json!({ "arrival_ns": arrival_ns }))),
                    Err(e) => Ok(Err(fail(e))),
                }
            }
        }
    }

    fn flags(&self) -> Vec<FlagEntry> {
        let mut flags = Vec::new();
        let h = &self.scenario.heuristics;
        let groups = receipts::concurrent_similar_runs(&self.store, h.min_similar_runs, h.similar_tolerance_pct);
        if !groups.is_empty() {
            let detail: Vec<Value> = groups
                .iter()
                .map(|g| {
                    json!(g
                        .iter()
                        .map(|run| json!({
                            "lineage": run.lineage.0.to_hex(),
                            "producers": run.producers.iter().map(|p| self.name_of(p)).collect::<Vec<_>>(),
                            "total_flop": run.total_flop,
                        }))
                        .collect::<Vec<_>>())
                })
                .collect();
            flags.push(FlagEntry { flag: FLAG_CONCURRENT_RUNS.into(), detail: json!(detail) });
        }
        let qualified: Vec<&String> =
            self.claims().filter(|(_, c)| c.body.qualifiers.contains(QUALIFIER_EXTERNAL_INPUTS)).map(|(l, _)| l).collect();
        if !qualified.is_empty() {
            flags.push(FlagEntry { flag: FLAG_EXTERNAL_INPUTS.into(), detail: json!(qualified) });
        }
        let unsealed = self.net.wire().iter().filter(|w| w.kind == MessageKind::Deployment && !w.sealed).count();
        if unsealed > 0 {
            flags.push(FlagEntry { flag: FLAG_UNSEALED_TRANSFER.into(), detail: json!(unsealed) });
        }
        flags
    }

    fn check(&self, a: &AssertionSpec, flags: &[FlagEntry]) -> Result<(bool, String), InputError> {
        let ring = self.trust_ring();
        Ok(match a {
            AssertionSpec::TotalFlop { receipt, equals } => {
                let total = self.store.total_flop(&self.receipt(receipt)?).map_err(|e| InputError::Invalid(e.to_string()))?;
                (total == *equals, format!("total_flop = {total}"))
            }
            AssertionSpec::TotalData { receipt, equals } => {
                let total = self.store.total_data(&self.receipt(receipt)?).map_err(|e| InputError::Invalid(e.to_string()))?;
                (total == *equals, format!("total_data = {total}"))
            }
            AssertionSpec::ClaimVerifies { claim } => {
                let c = self.claims.get(claim).ok_or_else(|| InputError::UnknownLabel { kind: "claim", label: claim.clone() })?;
                match c.verify(&ring) {
                    Ok(()) => (true, "verified".into()),
                    Err(e) => (false, e.to_string()),
                }
            }
            AssertionSpec::ClaimKind { claim, kind } => {
                let c = self.claims.get(claim).ok_or_else(|| InputError::UnknownLabel { kind: "claim", label: claim.clone() })?;
                (c.kind() == *kind, format!("kind = {}", c.kind()))
            }
            AssertionSpec::Flag { flag } => (flags.iter().any(|f| f.flag == *flag), format!("flags: {}", flag_names(flags))),
            AssertionSpec::NoFlag { flag } => (!flags.iter().any(|f| f.flag == *flag), format!("flags: {}", flag_names(flags))),
            AssertionSpec::Restricted { device, equals } => {
                let dev = self.device(device)?;
                (dev.is_restricted() == *equals, format!("restrictions: {:?}", dev.restrictions()))
            }
            AssertionSpec::LifeState { device, equals } => {
                let state = self.device(device)?.life_state();
                let want = match equals {
                    LifeStateName::Active => LifeState::Active,
                    LifeStateName::Wiped => LifeState::Wiped,
                    LifeStateName::Bricked => LifeState::Bricked,
                };
                (state == want, format!("life_state = {state:?}"))
            }
            AssertionSpec::JointFlopExceeds { receipts, threshold } => {
                let ids = receipts.iter().map(|r| self.receipt(r)).collect::<Result<Vec<_>, _>>()?;
                let joint = self.store.total_flop_of_all(&ids).map_err(|e| InputError::Invalid(e.to_string()))?;
                (joint > *threshold, format!("joint total_flop = {joint}"))
            }
            AssertionSpec::PayloadOnlySealed { model } => {
                let weights = toy_weights(&self.receipt(model)?);
                let windows: HashSet<&[u8]> = weights.windows(32).collect();
                let leaks = self.net.wire().iter().filter(|w| w.bytes.windows(32).any(|x| windows.contains(x))).count();
                let sealed = self.net.wire().iter().filter(|w| w.kind == MessageKind::Deployment && w.sealed).count();
                (
                    leaks == 0 && sealed > 0,
                    format!("{} wire records scanned, {sealed} sealed deployments, {leaks} plaintext leaks", self.net.wire().len()),
                )
            }
            AssertionSpec::OpenFails { deployment, identity } | AssertionSpec::OpenSucceeds { deployment, identity } => {
                let blobs = self
                    .deployments
                    .get(deployment)
                    .ok_or_else(|| InputError::UnknownLabel { kind: "deployment", label: deployment.clone() })?;
                let who = self.identity(identity)?;
                let opened = blobs.iter().filter(|b| who.open(b).is_ok()).count();
                let want_open = matches!(a, AssertionSpec::OpenSucceeds { .. });
                let passed = if want_open { opened > 0 } else { opened == 0 && !blobs.is_empty() };
                (passed, format!("{opened} of {} blobs opened", blobs.len()))
            }
            AssertionSpec::ReceiptsVerify { device } => {
                let dev = self.device(device)?;
                let bad = dev.dag().iter().filter(|r| r.verify(&ring).is_err()).count();
                (bad == 0 && !dev.dag().is_empty(), format!("{} receipts, {bad} failed", dev.dag().len()))
            }
            AssertionSpec::EgressWithinCaps => (self.net.egress_within_caps(), "egress ledger checked".into()),
            AssertionSpec::EvalScore { eval, equals } => {
                let e = self.evals.get(eval).ok_or_else(|| InputError::UnknownLabel { kind: "eval", label: eval.clone() })?;
                (e.out.result.score == *equals, format!("score = {}", e.out.result.score))
            }
            AssertionSpec::EvalResultPrivate { eval } => {
                let e = self.evals.get(eval).ok_or_else(|| InputError::UnknownLabel { kind: "eval", label: eval.clone() })?;
                let weights = toy_weights(&e.model);
                let name = e.suite.name.as_bytes();
                // The encoded suite starts with a public domain tag; only the
                // name and the probe list that follows it are secret.
                let probes_at = e.suite_bytes.windows(name.len()).position(|w| w == name).map_or(0, |p| p + name.len());
                let secret: HashSet<&[u8]> = e.suite_bytes[probes_at..].windows(16).chain(weights.windows(16)).collect();
                let leaked = [e.out.result.to_bytes(), e.out.sealed_result.to_bytes()].iter().any(|bytes| {
                    bytes.windows(name.len()).any(|w| w == name) || bytes.windows(16).any(|w| secret.contains(w))
                });
                (!leaked, if leaked { "result leaks suite or weights".into() } else { "no suite or weight bytes in result".into() })
            }
        })
    }
}

fn flag_names(flags: &[FlagEntry]) -> String {
    flags.iter().map(|f| f.flag.as_str()).collect::<Vec<_>>().join(", ")
}

fn event_name(e: &Event) -> &'static str {
    match e {
        Event::Workload { .. } => "workload",
        Event::DeclareRoot { .. } => "declare_root",
        Event::Update { .. } => "update",
        Event::License { .. } => "license",
        Event::LicenseIssuance { .. } => "license_issuance",
        Event::Tamper { .. } => "tamper",
        Event::Partition { .. } => "partition",
        Event::Heal { .. } => "heal",
        Event::Isolate { .. } => "isolate",
        Event::Reconnect { .. } => "reconnect",
        Event::LocationCheck { .. } => "location_check",
        Event::Deploy { .. } => "deploy",
        Event::Eval { .. } => "eval",
        Event::Claim { .. } => "claim",
        Event::Accounting { .. } => "accounting",
        Event::Commit { .. } => "commit",
        Event::RemoveCommitment { .. } => "remove_commitment",
        Event::FormCluster { .. } => "form_cluster",
        Event::VerifyCluster { .. } => "verify_cluster",
        Event::Tick { .. } => "tick",
        Event::Send { .. } => "send",
    }
}

/// Signed artifacts a run can export for offline verification.
pub struct Artifacts {
    pub claims: Vec<(String, Vec<u8>)>,
    pub trust_roots: BTreeMap<String, String>,
}

/// Never-verified net errors surface here for callers that want them typed.
pub fn is_timeout(e: &NetError) -> bool {
    matches!(e, NetError::Timeout(_))
}
