// Copyright 2026 The flexheg-sim Authors
// SPDX-License-Identifier: Apache-2.0

//! Scenario runner, claim verifier and report emitter.

pub mod report;
pub mod runner;
pub mod scenario;

use std::path::Path;

use flexheg_core::claim::ClaimError;
use flexheg_core::codec::DecodeError;
use flexheg_core::identity::IdentityError;
use flexheg_core::{Claim, KeyRing, PublicKey};
use thiserror::Error;

use report::{Report, TrustRoots, TRUST_ROOTS_SCHEMA};
pub use runner::{Artifacts, InputError, Runner};
use scenario::Scenario;

/// Scenarios shipped with the binary, by name.
pub const BUNDLED: &[(&str, &str)] = &[
    ("training_flop_claim", include_str!("../scenarios/training_flop_claim.json")),
    ("diamond_no_double_count", include_str!("../scenarios/diamond_no_double_count.json")),
    ("compute_accounting_audit", include_str!("../scenarios/compute_accounting_audit.json")),
    ("license_expiry_offswitch", include_str!("../scenarios/license_expiry_offswitch.json")),
    ("update_quorum", include_str!("../scenarios/update_quorum.json")),
    ("binding_commitment", include_str!("../scenarios/binding_commitment.json")),
    ("tamper_response", include_str!("../scenarios/tamper_response.json")),
    ("location_restriction", include_str!("../scenarios/location_restriction.json")),
    ("controlled_deployment", include_str!("../scenarios/controlled_deployment.json")),
    ("private_eval_gate", include_str!("../scenarios/private_eval_gate.json")),
    ("baseline_whitelist", include_str!("../scenarios/baseline_whitelist.json")),
    ("moe_limitation", include_str!("../scenarios/moe_limitation.json")),
];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{what}: {source}")]
    Json { what: String, source: serde_json::Error },
    #[error(transparent)]
    Input(#[from] InputError),
    #[error("claim does not decode: {0}")]
    ClaimDecode(DecodeError),
    #[error("bad trust roots: {0}")]
    TrustRoots(String),
}

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Input(#[from] CliError),
    #[error("claim rejected: {0}")]
    Rejected(ClaimError),
}

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

pub fn parse_scenario(text: &str, what: &str) -> Result<Scenario, CliError> {
    serde_json::from_str(text).map_err(|source| CliError::Json { what: what.to_string(), source })
}

/// Loads a scenario from a file, or by bundled name if no such file exists.
pub fn load_scenario(path_or_name: &str) -> Result<Scenario, CliError> {
    let path = Path::new(path_or_name);
    if !path.exists() {
        if let Some(text) = bundled(path_or_name) {
            return parse_scenario(text, path_or_name);
        }
    }
    let text = read(path)?;
    parse_scenario(&text, path_or_name)
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.display().to_string(), source })
}

/// Runs a scenario. `seed` overrides the scenario's own seed.
pub fn run_scenario(scenario: &Scenario, seed: Option<u64>) -> Result<(Report, Artifacts), InputError> {
    Runner::new(scenario, seed.unwrap_or(scenario.seed))?.run()
}

pub fn trust_roots_document(artifacts: &Artifacts) -> TrustRoots {
    TrustRoots { schema: TRUST_ROOTS_SCHEMA.to_string(), roots: artifacts.trust_roots.clone() }
}

pub fn parse_trust_roots(text: &str) -> Result<KeyRing, CliError> {
    let roots: TrustRoots =
        serde_json::from_str(text).map_err(|source| CliError::Json { what: "trust roots".into(), source })?;
    if roots.schema != TRUST_ROOTS_SCHEMA {
        return Err(CliError::TrustRoots(format!("unsupported schema {:?}", roots.schema)));
    }
    let mut ring = KeyRing::new();
    for (name, hex) in &roots.roots {
        let key = PublicKey::from_hex(hex).map_err(|e: IdentityError| CliError::TrustRoots(format!("{name}: {e}")))?;
        ring.insert(key).map_err(|e| CliError::TrustRoots(format!("{name}: {e}")))?;
    }
    Ok(ring)
}

/// Accepts canonical claim bytes, either raw or hex encoded.
pub fn decode_claim(bytes: &[u8]) -> Result<Claim, CliError> {
    let text = std::str::from_utf8(bytes).ok().map(str::trim);
    let raw = match text.and_then(|t| hex::decode(t).ok()) {
        Some(decoded) => decoded,
        None => bytes.to_vec(),
    };
    Claim::from_bytes(&raw).map_err(CliError::ClaimDecode)
}

/// Verifies a claim offline against a trust-roots file.
pub fn verify_claim(claim: &[u8], roots: &str) -> Result<Claim, VerifyError> {
    let ring = parse_trust_roots(roots)?;
    let claim = decode_claim(claim)?;
    claim.verify(&ring).map_err(VerifyError::Rejected)?;
    Ok(claim)
}
