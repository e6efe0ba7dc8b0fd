// Copyright 2026 The flexheg-sim Authors
// SPDX-License-Identifier: Apache-2.0

//! Minimal-disclosure claims signed by guarantee processors.
//!
//! A claim is a statement, a subject, optional qualifiers, and one or more
//! attestations over the canonical body. Only the values a statement names
//! are serialized; a `FlopBelow` claim carries its threshold, never the total.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{DecodeError, Decoder, Digest, Encoder};
use crate::identity::{Attestation, DeviceId, DeviceIdentity, IdentityError, KeyRing};
use crate::receipts::ReceiptId;
use crate::time::{Interval, SimTime};

const DOMAIN_CLAIM: &str = "flexheg/claim/v1";
const DOMAIN_CLAIM_BODY: &str = "flexheg/claim-body/v1";

/// Qualifier attached when some consumed data cannot be traced to a receipt
/// or declared root.
pub const QUALIFIER_EXTERNAL_INPUTS: &str = "external-inputs";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaimKind {
    FlopBelow,
    FlopExact,
    DataBelow,
    NotUsedForAi,
    TagAbsent,
    TagPresent,
    SharedOnlyWith,
    AccountingBalanced,
    ClusterConfig,
    LocationInRegion,
    EvalScore,
    CommitmentActive,
    LicenseIssued,
    LicenseNotIssued,
}

impl ClaimKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ClaimKind::FlopBelow => "flop_below",
            ClaimKind::FlopExact => "flop_exact",
            ClaimKind::DataBelow => "data_below",
            ClaimKind::NotUsedForAi => "not_used_for_ai",
            ClaimKind::TagAbsent => "tag_absent",
            ClaimKind::TagPresent => "tag_present",
            ClaimKind::SharedOnlyWith => "shared_only_with",
            ClaimKind::AccountingBalanced => "accounting_balanced",
            ClaimKind::ClusterConfig => "cluster_config",
            ClaimKind::LocationInRegion => "location_in_region",
            ClaimKind::EvalScore => "eval_score",
            ClaimKind::CommitmentActive => "commitment_active",
            ClaimKind::LicenseIssued => "license_issued",
            ClaimKind::LicenseNotIssued => "license_not_issued",
        }
    }
}

impl fmt::Display for ClaimKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where a result was sent: another device, or something outside the
/// guarantee-processor network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipient {
    Device(DeviceId),
    External,
}

impl fmt::Display for Recipient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Recipient::Device(id) => write!(f, "{id}"),
            Recipient::External => f.write_str("external"),
        }
    }
}

/// The asserted fact, with only the parameters it needs to disclose.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Statement {
    FlopBelow { threshold: u64 },
    FlopExact { total: u64 },
    DataBelow { threshold: u64 },
    NotUsedForAi { period: Interval },
    TagAbsent { tag: String },
    TagPresent { tag: String },
    SharedOnlyWith { recipients: BTreeSet<Recipient> },
    AccountingBalanced { period: Interval, capacity_flop_per_s: BTreeMap<DeviceId, u64>, tolerance_flop: u64 },
    ClusterConfig { config_digest: Digest, egress_cap: u64, max_members: u64, max_egress: u64 },
    LocationInRegion { landmark: Option<DeviceId>, radius_m: u64, rtt_ns: Option<u64> },
    EvalScore { suite_digest: Digest, score: u64 },
    CommitmentActive { ruleset_digest: Digest, committed_at: SimTime, irrevocable_until: SimTime, owner: DeviceId },
    LicenseIssued { license_digest: Digest },
    LicenseNotIssued { scope: String, log_head: Digest, log_size: u64 },
}

impl Statement {
    pub fn kind(&self) -> ClaimKind {
        match self {
            Statement::FlopBelow { .. } => ClaimKind::FlopBelow,
            Statement::FlopExact { .. } => ClaimKind::FlopExact,
            Statement::DataBelow { .. } => ClaimKind::DataBelow,
            Statement::NotUsedForAi { .. } => ClaimKind::NotUsedForAi,
            Statement::TagAbsent { .. } => ClaimKind::TagAbsent,
            Statement::TagPresent { .. } => ClaimKind::TagPresent,
            Statement::SharedOnlyWith { .. } => ClaimKind::SharedOnlyWith,
            Statement::AccountingBalanced { .. } => ClaimKind::AccountingBalanced,
            Statement::ClusterConfig { .. } => ClaimKind::ClusterConfig,
            Statement::LocationInRegion { .. } => ClaimKind::LocationInRegion,
            Statement::EvalScore { .. } => ClaimKind::EvalScore,
            Statement::CommitmentActive { .. } => ClaimKind::CommitmentActive,
            Statement::LicenseIssued { .. } => ClaimKind::LicenseIssued,
            Statement::LicenseNotIssued { .. } => ClaimKind::LicenseNotIssued,
        }
    }

    fn encode(&self, enc: &mut Encoder) {
        enc.u8(self.kind() as u8);
        match self {
            Statement::FlopBelow { threshold } | Statement::DataBelow { threshold } => {
                enc.u64(*threshold);
            }
            Statement::FlopExact { total } => {
                enc.u64(*total);
            }
            Statement::NotUsedForAi { period } => encode_interval(enc, period),
            Statement::TagAbsent { tag } | Statement::TagPresent { tag } => {
                enc.str(tag);
            }
            Statement::SharedOnlyWith { recipients } => {
                enc.list(recipients.iter(), encode_recipient);
            }
            Statement::AccountingBalanced { period, capacity_flop_per_s, tolerance_flop } => {
                encode_interval(enc, period);
                enc.list(capacity_flop_per_s.iter(), |e, (id, rate)| {
                    e.digest(&id.0).u64(*rate);
                });
                enc.u64(*tolerance_flop);
            }
            Statement::ClusterConfig { config_digest, egress_cap, max_members, max_egress } => {
                enc.digest(config_digest).u64(*egress_cap).u64(*max_members).u64(*max_egress);
            }
            Statement::LocationInRegion { landmark, radius_m, rtt_ns } => {
                encode_opt_device(enc, landmark);
                enc.u64(*radius_m);
                match rtt_ns {
                    Some(v) => enc.bool(true).u64(*v),
                    None => enc.bool(false),
                };
            }
            Statement::EvalScore { suite_digest, score } => {
                enc.digest(suite_digest).u64(*score);
            }
            Statement::CommitmentActive { ruleset_digest, committed_at, irrevocable_until, owner } => {
                enc.digest(ruleset_digest).u64(committed_at.as_ms()).u64(irrevocable_until.as_ms()).digest(&owner.0);
            }
            Statement::LicenseIssued { license_digest } => {
                enc.digest(license_digest);
            }
            Statement::LicenseNotIssued { scope, log_head, log_size } => {
                enc.str(scope).digest(log_head).u64(*log_size);
            }
        }
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let tag = dec.u8("claim kind")?;
        let kind = kind_from_code(tag).ok_or(DecodeError::InvalidValue { field: "claim kind", value: u64::from(tag) })?;
        Ok(match kind {
            ClaimKind::FlopBelow => Statement::FlopBelow { threshold: dec.u64()? },
            ClaimKind::FlopExact => Statement::FlopExact { total: dec.u64()? },
            ClaimKind::DataBelow => Statement::DataBelow { threshold: dec.u64()? },
            ClaimKind::NotUsedForAi => Statement::NotUsedForAi { period: decode_interval(dec)? },
            ClaimKind::TagAbsent => Statement::TagAbsent { tag: dec.str()? },
            ClaimKind::TagPresent => Statement::TagPresent { tag: dec.str()? },
            ClaimKind::SharedOnlyWith => {
                let n = dec.count()?;
                let mut recipients = BTreeSet::new();
                for _ in 0..n {
                    recipients.insert(decode_recipient(dec)?);
                }
                Statement::SharedOnlyWith { recipients }
            }
            ClaimKind::AccountingBalanced => {
                let period = decode_interval(dec)?;
                let n = dec.count()?;
                let mut capacity_flop_per_s = BTreeMap::new();
                for _ in 0..n {
                    let id = DeviceId(dec.digest("device")?);
                    capacity_flop_per_s.insert(id, dec.u64()?);
                }
                Statement::AccountingBalanced { period, capacity_flop_per_s, tolerance_flop: dec.u64()? }
            }
            ClaimKind::ClusterConfig => Statement::ClusterConfig {
                config_digest: dec.digest("config digest")?,
                egress_cap: dec.u64()?,
                max_members: dec.u64()?,
                max_egress: dec.u64()?,
            },
            ClaimKind::LocationInRegion => {
                let landmark = decode_opt_device(dec)?;
                let radius_m = dec.u64()?;
                let rtt_ns = if dec.bool("rtt present")? { Some(dec.u64()?) } else { None };
                Statement::LocationInRegion { landmark, radius_m, rtt_ns }
            }
            ClaimKind::EvalScore => Statement::EvalScore { suite_digest: dec.digest("suite digest")?, score: dec.u64()? },
            ClaimKind::CommitmentActive => Statement::CommitmentActive {
                ruleset_digest: dec.digest("ruleset digest")?,
                committed_at: SimTime(dec.u64()?),
                irrevocable_until: SimTime(dec.u64()?),
                owner: DeviceId(dec.digest("owner")?),
            },
            ClaimKind::LicenseIssued => Statement::LicenseIssued { license_digest: dec.digest("license digest")? },
            ClaimKind::LicenseNotIssued => Statement::LicenseNotIssued {
                scope: dec.str()?,
                log_head: dec.digest("log head")?,
                log_size: dec.u64()?,
            },
        })
    }
}

fn kind_from_code(code: u8) -> Option<ClaimKind> {
    use ClaimKind::*;
    const ALL: [ClaimKind; 14] = [
        FlopBelow,
        FlopExact,
        DataBelow,
        NotUsedForAi,
        TagAbsent,
        TagPresent,
        SharedOnlyWith,
        AccountingBalanced,
        ClusterConfig,
        LocationInRegion,
        EvalScore,
        CommitmentActive,
        LicenseIssued,
        LicenseNotIssued,
    ];
    ALL.into_iter().find(|k| *k as u8 == code)
}

fn encode_interval(enc: &mut Encoder, i: &Interval) {
    enc.u64(i.start.as_ms()).u64(i.end.as_ms());
}

fn decode_interval(dec: &mut Decoder<'_>) -> Result<Interval, DecodeError> {
    Ok(Interval::new(SimTime(dec.u64()?), SimTime(dec.u64()?)))
}

fn encode_recipient(enc: &mut Encoder, r: &Recipient) {
    match r {
        Recipient::Device(id) => {
            enc.u8(0).digest(&id.0);
        }
        Recipient::External => {
            enc.u8(1);
        }
    }
}

fn decode_recipient(dec: &mut Decoder<'_>) -> Result<Recipient, DecodeError> {
    match dec.u8("recipient")? {
        0 => Ok(Recipient::Device(DeviceId(dec.digest("recipient")?))),
        1 => Ok(Recipient::External),
        v => Err(DecodeError::InvalidValue { field: "recipient", value: u64::from(v) }),
    }
}

fn encode_opt_device(enc: &mut Encoder, id: &Option<DeviceId>) {
    match id {
        Some(id) => enc.bool(true).digest(&id.0),
        None => enc.bool(false),
    };
}

fn decode_opt_device(dec: &mut Decoder<'_>) -> Result<Option<DeviceId>, DecodeError> {
    if dec.bool("device present")? {
        Ok(Some(DeviceId(dec.digest("device")?)))
    } else {
        Ok(None)
    }
}

/// What a claim is about.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum Subject {
    Receipt(ReceiptId),
    Device(DeviceId),
    Devices(BTreeSet<DeviceId>),
    /// One-time token standing in for an undisclosed device.
    Token(Digest),
}

impl Subject {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            Subject::Receipt(id) => {
                enc.u8(0).digest(&id.0);
            }
            Subject::Device(id) => {
                enc.u8(1).digest(&id.0);
            }
            Subject::Devices(set) => {
                enc.u8(2).list(set.iter(), |e, id| {
                    e.digest(&id.0);
                });
            }
            Subject::Token(t) => {
                enc.u8(3).digest(t);
            }
        }
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(match dec.u8("subject")? {
            0 => Subject::Receipt(ReceiptId(dec.digest("subject")?)),
            1 => Subject::Device(DeviceId(dec.digest("subject")?)),
            2 => {
                let n = dec.count()?;
                let mut set = BTreeSet::new();
                for _ in 0..n {
                    set.insert(DeviceId(dec.digest("subject")?));
                }
                Subject::Devices(set)
            }
            3 => Subject::Token(dec.digest("subject")?),
            v => return Err(DecodeError::InvalidValue { field: "subject", value: u64::from(v) }),
        })
    }
}

/// The signed part of a claim.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimBody {
    pub statement: Statement,
    pub subject: Subject,
    pub qualifiers: BTreeSet<String>,
}

impl ClaimBody {
    pub fn new(statement: Statement, subject: Subject) -> Self {
        Self { statement, subject, qualifiers: BTreeSet::new() }
    }

    pub fn with_qualifier(mut self, q: &str) -> Self {
        self.qualifiers.insert(q.to_string());
        self
    }

    pub fn kind(&self) -> ClaimKind {
        self.statement.kind()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new(DOMAIN_CLAIM_BODY);
        self.statement.encode(&mut enc);
        self.subject.encode(&mut enc);
        enc.list(self.qualifiers.iter(), |e, q| {
            e.str(q);
        });
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut dec = Decoder::new(bytes, DOMAIN_CLAIM_BODY)?;
        let statement = Statement::decode(&mut dec)?;
        let subject = Subject::decode(&mut dec)?;
        let n = dec.count()?;
        let mut qualifiers = BTreeSet::new();
        for _ in 0..n {
            qualifiers.insert(dec.str()?);
        }
        dec.finish()?;
        Ok(Self { statement, subject, qualifiers })
    }

    pub fn digest(&self) -> Digest {
        Digest::tagged(DOMAIN_CLAIM_BODY, &self.to_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClaimError {
    #[error("claim carries no attestation")]
    Unattested,
    #[error("signer {0} is not a trusted root")]
    UntrustedSigner(DeviceId),
    #[error("attestation by {0} does not verify")]
    BadSignature(DeviceId),
    #[error("attestation by {0} covers a different body")]
    PayloadMismatch(DeviceId),
}

/// A claim body plus the attestations of the devices vouching for it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub body: ClaimBody,
    pub attestations: Vec<Attestation>,
}

impl Claim {
    /// Signs `body` with `attester`.
    pub fn issue(body: ClaimBody, attester: &DeviceIdentity, now: SimTime) -> Result<Self, IdentityError> {
        let att = attester.sign(&body.to_bytes(), now)?;
        Ok(Self { body, attestations: vec![att] })
    }

    /// Adds a co-signature from another device.
    pub fn cosign(&mut self, attester: &DeviceIdentity, now: SimTime) -> Result<(), IdentityError> {
        let att = attester.sign(&self.body.to_bytes(), now)?;
        self.attestations.push(att);
        Ok(())
    }

    pub fn kind(&self) -> ClaimKind {
        self.body.kind()
    }

    pub fn attesters(&self) -> Vec<DeviceId> {
        self.attestations.iter().map(|a| a.signer).collect()
    }

    /// Offline verification: every attestation must be by a trusted key and
    /// cover exactly this body.
    pub fn verify(&self, trust_roots: &KeyRing) -> Result<(), ClaimError> {
        if self.attestations.is_empty() {
            return Err(ClaimError::Unattested);
        }
        let body = self.body.to_bytes();
        for att in &self.attestations {
            let key = trust_roots.get(&att.signer).ok_or(ClaimError::UntrustedSigner(att.signer))?;
            if att.payload != body {
                return Err(ClaimError::PayloadMismatch(att.signer));
            }
            if !att.verify(key) {
                return Err(ClaimError::BadSignature(att.signer));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new(DOMAIN_CLAIM);
        enc.nested(&self.body.to_bytes());
        enc.list(self.attestations.iter(), |e, a| a.encode_into(e));
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut dec = Decoder::new(bytes, DOMAIN_CLAIM)?;
        let body = ClaimBody::from_bytes(dec.bytes()?)?;
        let n = dec.count()?;
        let mut attestations = Vec::with_capacity(n);
        for _ in 0..n {
            attestations.push(Attestation::decode_from(&mut dec)?);
        }
        dec.finish()?;
        Ok(Self { body, attestations })
    }
}
