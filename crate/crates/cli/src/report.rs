// Copyright 2026 The flexheg-sim Authors
// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const REPORT_SCHEMA: &str = "flexheg-report/v1";
pub const TRUST_ROOTS_SCHEMA: &str = "flexheg-trust-roots/v1";

/// Everything a run produced. Contains no wall-clock data, so equal inputs
/// give byte-identical reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub scenario: String,
    pub seed: u64,
    /// Name to device id (hex).
    pub identities: BTreeMap<String, String>,
    pub trace: Vec<TraceEntry>,
    pub receipts: Vec<ReceiptEntry>,
    pub claims: Vec<ClaimEntry>,
    pub assertions: Vec<AssertionResult>,
    pub flags: Vec<FlagEntry>,
    pub summary: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub seq: u64,
    pub at_ms: u64,
    pub event: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub outcome: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expect: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expect_met: Option<bool>,
    #[serde(skip_serializing_if = "Value::is_null")]
    pub detail: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReceiptEntry {
    pub label: String,
    pub id: String,
    pub producer: String,
    pub op: String,
    pub flop: u64,
    pub total_flop: u64,
    /// Canonical receipt bytes, hex.
    pub hex: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClaimEntry {
    pub label: String,
    pub kind: String,
    pub attesters: Vec<String>,
    pub qualifiers: Vec<String>,
    pub verified: bool,
    /// Canonical claim bytes, hex.
    pub hex: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssertionResult {
    pub index: usize,
    pub assertion: Value,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlagEntry {
    pub flag: String,
    pub detail: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub events: usize,
    pub expectations_failed: usize,
    pub assertions_failed: usize,
    pub passed: bool,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Public keys a verifier trusts, by name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrustRoots {
    pub schema: String,
    /// Name to public key bundle (hex).
    pub roots: BTreeMap<String, String>,
}
