// Copyright 2026 The flexheg-sim Authors
// SPDX-License-Identifier: Apache-2.0

//! Scenario file format.
//!
//! Every principal (device, authority, landmark, evaluator) is referred to
//! by name; keys are derived from the scenario seed and the name, so the
//! file never carries secrets. Times are integer milliseconds.

use std::collections::{BTreeMap, BTreeSet};

use flexheg_core::device::EvalSuite;
use flexheg_core::netsim::{LocationMode, DEFAULT_SIGNAL_SPEED_KM_S};
use flexheg_core::policy::ActionClass;
use flexheg_core::receipts::AccountingMode;
use flexheg_core::{ClaimKind, OpClass};
use serde::{Deserialize, Serialize};

pub const SCENARIO_SCHEMA: &str = "flexheg-scenario/v1";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: String,
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub seed: u64,
    #[serde(default)]
    pub network: NetworkSpec,
    /// Non-device identities: authorities, owners, evaluators, auditors.
    #[serde(default)]
    pub principals: Vec<String>,
    #[serde(default)]
    pub landmarks: Vec<LandmarkSpec>,
    pub devices: Vec<DeviceSpec>,
    #[serde(default)]
    pub heuristics: HeuristicsSpec,
    pub script: Vec<EventSpec>,
    #[serde(default)]
    pub assertions: Vec<AssertionSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    #[serde(default = "default_signal_speed")]
    pub signal_speed_km_s: u64,
    #[serde(default)]
    pub nodes: BTreeMap<String, NodeSpec>,
    #[serde(default)]
    pub links: Vec<LinkSpec>,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self { signal_speed_km_s: DEFAULT_SIGNAL_SPEED_KM_S, nodes: BTreeMap::new(), links: vec![] }
    }
}

fn default_signal_speed() -> u64 {
    DEFAULT_SIGNAL_SPEED_KM_S
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub x_km: f64,
    pub y_km: f64,
    #[serde(default)]
    pub processing_delay_ns: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub a: String,
    pub b: String,
    pub bandwidth_bytes_per_s: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandmarkSpec {
    pub name: String,
    #[serde(default)]
    pub refuse_identified: bool,
    #[serde(default)]
    pub require_deanonymize: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub name: String,
    pub ruleset: RulesetSpec,
    #[serde(default)]
    pub baseline: Option<BaselineSpec>,
    pub quorum: QuorumSpec,
    #[serde(default)]
    pub update_interval_ms: Option<u64>,
    #[serde(default)]
    pub owner: Option<String>,
    #[serde(default)]
    pub location_check: Option<LocationPolicySpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RulesetSpec {
    pub id: String,
    pub version: u64,
    #[serde(default)]
    pub rules: Vec<RuleSpec>,
    #[serde(default)]
    pub expiry_ms: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSpec {
    #[serde(default = "default_baseline_id")]
    pub id: String,
    pub rules: Vec<RuleSpec>,
}

fn default_baseline_id() -> String {
    "baseline".into()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum RuleSpec {
    MaxTrainingFlop { limit: u64 },
    RequireLicense { action: ActionClass },
    ShareOnlyTo { scope: ShareScopeSpec },
    RequireEvalEvery { interval_flop: u64 },
    ControlledDeployment {
        #[serde(default)]
        min_flop: u64,
        approved: Vec<String>,
        #[serde(default)]
        required_tags: Vec<String>,
    },
    MaxClusterEgress { bytes_per_s: u64 },
    AllowWhitelisted { workloads: Vec<String> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShareScopeSpec {
    FlexhegOnly,
    Explicit(Vec<String>),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuorumSpec {
    pub signers: Vec<String>,
    pub threshold: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocationPolicySpec {
    pub landmark: String,
    pub radius_km: f64,
    #[serde(default = "default_mode")]
    pub mode: LocationMode,
    /// Defaults to the device's update interval.
    #[serde(default)]
    pub period_ms: Option<u64>,
    #[serde(default)]
    pub added_delay_ns: u64,
}

fn default_mode() -> LocationMode {
    LocationMode::LandmarkInitiated
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeuristicsSpec {
    #[serde(default = "default_min_runs")]
    pub min_similar_runs: usize,
    #[serde(default = "default_tolerance")]
    pub similar_tolerance_pct: u64,
}

impl Default for HeuristicsSpec {
    fn default() -> Self {
        Self { min_similar_runs: default_min_runs(), similar_tolerance_pct: default_tolerance() }
    }
}

fn default_min_runs() -> usize {
    3
}

fn default_tolerance() -> u64 {
    10
}

/// One scripted event. `expect`, when present, is checked against the
/// event's outcome: `ok`, `denied[:<rule kind>]` or `error[:<code>]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EventSpec {
    pub at_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect: Option<String>,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub name: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LicenseScopeSpec {
    Action(ActionClass),
    Workload(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Workload {
        device: String,
        op: OpClass,
        #[serde(default)]
        parents: Vec<String>,
        #[serde(default)]
        flop: u64,
        #[serde(default)]
        data: Vec<DataSpec>,
        #[serde(default)]
        tags: BTreeSet<String>,
        #[serde(default)]
        workload: Option<String>,
        #[serde(default)]
        destination: Option<String>,
        #[serde(default)]
        duration_ms: u64,
    },
    /// Marks a dataset as a known origin on the given devices.
    DeclareRoot { devices: Vec<String>, data: String },
    Update { devices: Vec<String>, ruleset: RulesetSpec, signers: Vec<String> },
    License {
        devices: Vec<String>,
        scope: LicenseScopeSpec,
        #[serde(default)]
        subject: Option<String>,
        not_before_ms: u64,
        not_after_ms: u64,
        quorum: usize,
        signers: Vec<String>,
    },
    LicenseIssuance {
        issuer: String,
        attester: String,
        #[serde(default)]
        license: Option<String>,
        #[serde(default)]
        scope: Option<LicenseScopeSpec>,
        #[serde(default)]
        subject: Option<String>,
    },
    Tamper {
        device: String,
        #[serde(default)]
        brick: bool,
    },
    Partition { a: String, b: String },
    Heal { a: String, b: String },
    Isolate { node: String },
    Reconnect { node: String },
    LocationCheck {
        device: String,
        landmark: String,
        radius_km: f64,
        #[serde(default = "default_mode")]
        mode: LocationMode,
        #[serde(default)]
        added_delay_ns: u64,
        #[serde(default = "yes")]
        enforce: bool,
    },
    Deploy {
        device: String,
        model: String,
        /// Device names, or `external`.
        recipients: Vec<String>,
        #[serde(default)]
        safeguards: BTreeSet<String>,
    },
    Eval { device: String, model: String, evaluator: String, suite: EvalSuite },
    Claim { device: String, claim: ClaimSpec },
    Accounting {
        attester: String,
        devices: Vec<String>,
        period_ms: [u64; 2],
        capacity_flop_per_s: BTreeMap<String, u64>,
        #[serde(default)]
        tolerance_flop: u64,
        #[serde(default = "balanced")]
        mode: AccountingMode,
        /// Receipts (and their descendants) left out of the submission.
        #[serde(default)]
        withhold: Vec<String>,
    },
    Commit { device: String, ruleset: RulesetSpec, until_ms: u64, owner: String },
    RemoveCommitment { device: String, ruleset_id: String },
    FormCluster { devices: Vec<String>, egress_cap: u64 },
    VerifyCluster { cluster: String, max_members: u64, max_egress: u64, attester: String },
    Tick { devices: Vec<String> },
    Send { from: String, to: String, bytes: u64 },
}

fn yes() -> bool {
    true
}

fn balanced() -> AccountingMode {
    AccountingMode::Balanced
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClaimSpec {
    FlopBelow { receipt: String, threshold: u64 },
    FlopExact { receipt: String },
    DataBelow { receipt: String, threshold: u64 },
    TagPresent { receipt: String, tag: String },
    TagAbsent { receipt: String, tag: String },
    SharedOnlyWith { receipt: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LifeStateName {
    Active,
    Wiped,
    Bricked,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "assert", rename_all = "snake_case", deny_unknown_fields)]
pub enum AssertionSpec {
    TotalFlop { receipt: String, equals: u64 },
    TotalData { receipt: String, equals: u64 },
    ClaimVerifies { claim: String },
    ClaimKind { claim: String, kind: ClaimKind },
    Flag { flag: String },
    NoFlag { flag: String },
    Restricted { device: String, equals: bool },
    LifeState { device: String, equals: LifeStateName },
    /// The union of the receipts' ancestries exceeds `threshold`.
    JointFlopExceeds { receipts: Vec<String>, threshold: u64 },
    /// No wire record carries the model's weights outside sealed blobs.
    PayloadOnlySealed { model: String },
    OpenFails { deployment: String, identity: String },
    OpenSucceeds { deployment: String, identity: String },
    ReceiptsVerify { device: String },
    EgressWithinCaps,
    EvalScore { eval: String, equals: u64 },
    /// The serialized result reveals neither suite plaintext nor weights.
    EvalResultPrivate { eval: String },
}
