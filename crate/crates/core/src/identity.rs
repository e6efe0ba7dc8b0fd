// Copyright 2026 The flexheg-sim Authors
// SPDX-License-Identifier: Apache-2.0

//! Device identities, attestations, sealing to a recipient device, and
//! tamper-wipe of secret keys.
//!
//! A device's identifier is the digest of its public key bundle, so any
//! verifier can check that a key belongs to an id without a certificate
//! authority. Life state only moves forward: `Active → Wiped → Bricked`.

use std::collections::BTreeMap;
use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Nonce};
use ed25519_dalek::{Signer as _, SigningKey, Verifier as _, VerifyingKey};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;
use zeroize::{Zeroize, ZeroizeOnDrop};

use crate::codec::{DecodeError, Decoder, Digest, Encoder};
use crate::time::SimTime;

const DOMAIN_DEVICE_ID: &str = "flexheg/device-id/v1";
const DOMAIN_ATTESTATION: &str = "flexheg/attestation/v1";
const DOMAIN_ATTESTED_MESSAGE: &str = "flexheg/attested-message/v1";
const DOMAIN_SEALED: &str = "flexheg/sealed-blob/v1";
const DOMAIN_SEAL_KEY: &str = "flexheg/seal-key/v1";
const DOMAIN_SEAL_EPHEMERAL: &str = "flexheg/seal-ephemeral/v1";
const DOMAIN_SEALED_CIPHERTEXT: &str = "flexheg/sealed-ciphertext/v1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdentityError {
    #[error("identity {0} has been wiped")]
    IdentityWiped(DeviceId),
    #[error("blob is sealed to {expected}, not {actual}")]
    WrongRecipient { expected: DeviceId, actual: DeviceId },
    #[error("sealed blob failed to decrypt")]
    DecryptionFailure,
    #[error("device id {0} is already registered with a different key")]
    DuplicateIdentity(DeviceId),
    #[error("malformed public key")]
    BadKey,
}

/// Identifier of a device: the digest of its public key bundle.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeviceId(pub Digest);

impl DeviceId {
    pub fn short(&self) -> String {
        self.0.short()
    }
}

impl fmt::Debug for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DeviceId({})", self.0.short())
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.short())
    }
}

/// 64-byte signature.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature(pub [u8; 64]);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}..)", hex::encode(&self.0[..4]))
    }
}

impl Serialize for Signature {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for Signature {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let mut out = [0u8; 64];
        hex::decode_to_slice(&s, &mut out).map_err(serde::de::Error::custom)?;
        Ok(Signature(out))
    }
}

/// Public half of a device's keys: a signature verification key and a
/// key-agreement key for sealing.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct PublicKey {
    pub verify: [u8; 32],
    pub seal: [u8; 32],
}

impl PublicKey {
    pub fn to_bytes(&self) -> [u8; 64] {
        let mut out = [0u8; 64];
        out[..32].copy_from_slice(&self.verify);
        out[32..].copy_from_slice(&self.seal);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IdentityError> {
        if bytes.len() != 64 {
            return Err(IdentityError::BadKey);
        }
        let mut verify = [0u8; 32];
        let mut seal = [0u8; 32];
        verify.copy_from_slice(&bytes[..32]);
        seal.copy_from_slice(&bytes[32..]);
        Ok(Self { verify, seal })
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.to_bytes())
    }

    pub fn from_hex(s: &str) -> Result<Self, IdentityError> {
        let raw = hex::decode(s).map_err(|_| IdentityError::BadKey)?;
        Self::from_bytes(&raw)
    }

    pub fn device_id(&self) -> DeviceId {
        DeviceId(Digest::tagged(DOMAIN_DEVICE_ID, &self.to_bytes()))
    }

    /// Verifies a raw signature over `message`.
    pub fn verify_raw(&self, message: &[u8], signature: &Signature) -> bool {
        Scheme::verify(self, message, signature)
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", self.device_id().short())
    }
}

impl Serialize for PublicKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for PublicKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        PublicKey::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// Secret key material. Zeroed on drop.
#[derive(Zeroize, ZeroizeOnDrop)]
pub struct SecretKeys {
    sign_seed: [u8; 32],
    seal_secret: [u8; 32],
    /// Expanded from `sign_seed`; zeroes itself on drop.
    #[zeroize(skip)]
    sign_key: SigningKey,
}

/// Signature and sealing primitives a device identity is built on.
pub trait CryptoScheme {
    const NAME: &'static str;

    fn derive_keys(seed: &[u8; 32]) -> (PublicKey, SecretKeys);
    fn sign(secret: &SecretKeys, message: &[u8]) -> Signature;
    fn verify(public: &PublicKey, message: &[u8], signature: &Signature) -> bool;
    /// Encrypts to `recipient` with an ephemeral key derived from
    /// `ephemeral_seed`. Returns the ephemeral public key and ciphertext.
    fn seal(recipient: &PublicKey, plaintext: &[u8], aad: &[u8], ephemeral_seed: &[u8; 32]) -> ([u8; 32], Vec<u8>);
    fn open(secret: &SecretKeys, ephemeral: &[u8; 32], ciphertext: &[u8], aad: &[u8]) -> Option<Vec<u8>>;
}

/// Ed25519 signatures; X25519 + ChaCha20-Poly1305 sealing. Both are
/// deterministic once keys and ephemeral seeds are fixed.
pub struct Dalek;

impl Dalek {
    fn seal_cipher(shared: &[u8; 32], ephemeral: &[u8; 32], recipient_seal: &[u8; 32]) -> ChaCha20Poly1305 {
        let mut material = Vec::with_capacity(96);
        material.extend_from_slice(shared);
        material.extend_from_slice(ephemeral);
        material.extend_from_slice(recipient_seal);
        let key = Digest::tagged(DOMAIN_SEAL_KEY, &material);
        ChaCha20Poly1305::new_from_slice(key.as_bytes()).expect("32-byte key")
    }
}

impl CryptoScheme for Dalek {
    const NAME: &'static str = "ed25519+x25519-chacha20poly1305";

    fn derive_keys(seed: &[u8; 32]) -> (PublicKey, SecretKeys) {
        let sign_seed = Digest::tagged("flexheg/sign-seed/v1", seed).0;
        let seal_secret = Digest::tagged("flexheg/seal-seed/v1", seed).0;
        let sign_key = SigningKey::from_bytes(&sign_seed);
        let verify = sign_key.verifying_key().to_bytes();
        let seal = x25519_dalek::PublicKey::from(&x25519_dalek::StaticSecret::from(seal_secret)).to_bytes();
        (PublicKey { verify, seal }, SecretKeys { sign_seed, seal_secret, sign_key })
    }

    fn sign(secret: &SecretKeys, message: &[u8]) -> Signature {
        Signature(secret.sign_key.sign(message).to_bytes())
    }

    fn verify(public: &PublicKey, message: &[u8], signature: &Signature) -> bool {
        let Ok(key) = VerifyingKey::from_bytes(&public.verify) else {
            return false;
        };
        let sig = ed25519_dalek::Signature::from_bytes(&signature.0);
        key.verify(message, &sig).is_ok()
    }

    fn seal(recipient: &PublicKey, plaintext: &[u8], aad: &[u8], ephemeral_seed: &[u8; 32]) -> ([u8; 32], Vec<u8>) {
        let eph_secret = x25519_dalek::StaticSecret::from(*ephemeral_seed);
        let eph_public = x25519_dalek::PublicKey::from(&eph_secret).to_bytes();
        let shared = eph_secret.diffie_hellman(&x25519_dalek::PublicKey::from(recipient.seal));
        let cipher = Self::seal_cipher(shared.as_bytes(), &eph_public, &recipient.seal);
        // The key is unique per (ephemeral, recipient), so a fixed nonce is safe.
        let ciphertext = cipher
            .encrypt(Nonce::from_slice(&[0u8; 12]), Payload { msg: plaintext, aad })
            .expect("in-memory encryption cannot fail");
        (eph_public, ciphertext)
    }

    fn open(secret: &SecretKeys, ephemeral: &[u8; 32], ciphertext: &[u8], aad: &[u8]) -> Option<Vec<u8>> {
        let own = x25519_dalek::StaticSecret::from(secret.seal_secret);
        let own_public = x25519_dalek::PublicKey::from(&own).to_bytes();
        let shared = own.diffie_hellman(&x25519_dalek::PublicKey::from(*ephemeral));
        let cipher = Self::seal_cipher(shared.as_bytes(), ephemeral, &own_public);
        cipher.decrypt(Nonce::from_slice(&[0u8; 12]), Payload { msg: ciphertext, aad }).ok()
    }
}

/// The scheme every identity in this crate uses.
pub type Scheme = Dalek;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LifeState {
    Active,
    Wiped,
    Bricked,
}

/// A device's keys plus its life state.
pub struct DeviceIdentity {
    device_id: DeviceId,
    public_key: PublicKey,
    secret: Option<SecretKeys>,
    life_state: LifeState,
}

impl fmt::Debug for DeviceIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DeviceIdentity")
            .field("device_id", &self.device_id)
            .field("life_state", &self.life_state)
            .finish_non_exhaustive()
    }
}

/// Public view of an identity, what verifiers hold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicIdentity {
    pub device_id: DeviceId,
    pub public_key: PublicKey,
}

/// Derives an identity deterministically from a 32-byte seed.
pub fn generate_identity(seed: [u8; 32]) -> DeviceIdentity {
    let (public_key, secret) = Scheme::derive_keys(&seed);
    DeviceIdentity {
        device_id: public_key.device_id(),
        public_key,
        secret: Some(secret),
        life_state: LifeState::Active,
    }
}

impl DeviceIdentity {
    pub fn device_id(&self) -> DeviceId {
        self.device_id
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.public_key
    }

    pub fn public(&self) -> PublicIdentity {
        PublicIdentity { device_id: self.device_id, public_key: self.public_key }
    }

    pub fn life_state(&self) -> LifeState {
        self.life_state
    }

    pub fn is_active(&self) -> bool {
        self.life_state == LifeState::Active
    }

    pub fn has_secret(&self) -> bool {
        self.secret.is_some()
    }

    fn secret(&self) -> Result<&SecretKeys, IdentityError> {
        match (&self.secret, self.life_state) {
            (Some(s), LifeState::Active) => Ok(s),
            _ => Err(IdentityError::IdentityWiped(self.device_id)),
        }
    }

    /// Signs a message that already carries its own domain separation.
    pub(crate) fn sign_raw(&self, message: &[u8]) -> Result<Signature, IdentityError> {
        Ok(Scheme::sign(self.secret()?, message))
    }

    /// Produces an attestation over `payload` at simulated time `now`.
    pub fn sign(&self, payload: &[u8], now: SimTime) -> Result<Attestation, IdentityError> {
        let message = attested_message(payload, now);
        let signature = self.sign_raw(&message)?;
        Ok(Attestation { payload: payload.to_vec(), signer: self.device_id, signature, issued_at: now })
    }

    /// Seals `payload` so only the device holding `recipient`'s secret can
    /// open it. The sender attests to the ciphertext digest.
    pub fn seal_to(&self, recipient: &PublicKey, payload: &[u8], now: SimTime) -> Result<SealedBlob, IdentityError> {
        let secret = self.secret()?;
        let recipient_id = recipient.device_id();

        let mut seed_material = Encoder::new(DOMAIN_SEAL_EPHEMERAL);
        seed_material
            .bytes(&secret.sign_seed)
            .bytes(&recipient.to_bytes())
            .bytes(payload)
            .u64(now.as_ms());
        let eph_seed = Digest::tagged(DOMAIN_SEAL_EPHEMERAL, &seed_material.finish()).0;

        let (ephemeral, ciphertext) = Scheme::seal(recipient, payload, &recipient_id.0 .0, &eph_seed);
        let sender_attestation = self.sign(ciphertext_digest(&ephemeral, &ciphertext).as_bytes(), now)?;
        Ok(SealedBlob { recipient: recipient_id, ephemeral, ciphertext, sender_attestation })
    }

    /// Opens a blob sealed to this identity.
    pub fn open(&self, blob: &SealedBlob) -> Result<Vec<u8>, IdentityError> {
        let secret = self.secret()?;
        if blob.recipient != self.device_id {
            return Err(IdentityError::WrongRecipient { expected: blob.recipient, actual: self.device_id });
        }
        Scheme::open(secret, &blob.ephemeral, &blob.ciphertext, &blob.recipient.0 .0)
            .ok_or(IdentityError::DecryptionFailure)
    }

    /// Destroys the secret keys. With `brick` set the identity also becomes
    /// permanently inoperable. Idempotent and never reversible.
    pub fn wipe(&mut self, brick: bool) {
        // Dropping SecretKeys zeroes it.
        self.secret = None;
        self.life_state = match (self.life_state, brick) {
            (_, true) | (LifeState::Bricked, false) => LifeState::Bricked,
            (_, false) => LifeState::Wiped,
        };
    }
}

fn attested_message(payload: &[u8], issued_at: SimTime) -> Vec<u8> {
    let mut enc = Encoder::new(DOMAIN_ATTESTED_MESSAGE);
    enc.bytes(payload).u64(issued_at.as_ms());
    enc.finish()
}

fn ciphertext_digest(ephemeral: &[u8; 32], ciphertext: &[u8]) -> Digest {
    let mut enc = Encoder::new(DOMAIN_SEALED_CIPHERTEXT);
    enc.bytes(ephemeral).bytes(ciphertext);
    Digest::tagged(DOMAIN_SEALED_CIPHERTEXT, &enc.finish())
}

/// A signed statement: `payload` as of `issued_at`, by `signer`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attestation {
    #[serde(with = "hex_bytes")]
    pub payload: Vec<u8>,
    pub signer: DeviceId,
    pub signature: Signature,
    pub issued_at: SimTime,
}

impl Attestation {
    /// True if `key` belongs to `signer` and the signature checks.
    pub fn verify(&self, key: &PublicKey) -> bool {
        key.device_id() == self.signer && Scheme::verify(key, &attested_message(&self.payload, self.issued_at), &self.signature)
    }

    /// Verifies against whatever key `ring` holds for the signer.
    pub fn verify_in(&self, ring: &KeyRing) -> bool {
        ring.get(&self.signer).is_some_and(|k| self.verify(k))
    }

    pub fn encode_into(&self, enc: &mut Encoder) {
        enc.bytes(&self.payload).digest(&self.signer.0).bytes(&self.signature.0).u64(self.issued_at.as_ms());
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new(DOMAIN_ATTESTATION);
        self.encode_into(&mut enc);
        enc.finish()
    }

    pub fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let payload = dec.bytes()?.to_vec();
        let signer = DeviceId(dec.digest("signer")?);
        let signature = Signature(dec.fixed::<64>("signature")?);
        let issued_at = SimTime(dec.u64()?);
        Ok(Self { payload, signer, signature, issued_at })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut dec = Decoder::new(bytes, DOMAIN_ATTESTATION)?;
        let att = Self::decode_from(&mut dec)?;
        dec.finish()?;
        Ok(att)
    }
}

/// Ciphertext only the recipient device can open.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedBlob {
    pub recipient: DeviceId,
    #[serde(with = "hex_array")]
    pub ephemeral: [u8; 32],
    #[serde(with = "hex_bytes")]
    pub ciphertext: Vec<u8>,
    pub sender_attestation: Attestation,
}

impl SealedBlob {
    /// Checks that `sender` attested to exactly this ciphertext.
    pub fn verify_sender(&self, sender: &PublicKey) -> bool {
        self.sender_attestation.verify(sender)
            && self.sender_attestation.payload == ciphertext_digest(&self.ephemeral, &self.ciphertext).as_bytes()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new(DOMAIN_SEALED);
        enc.digest(&self.recipient.0).bytes(&self.ephemeral).bytes(&self.ciphertext);
        self.sender_attestation.encode_into(&mut enc);
        enc.finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KeyRingError {
    #[error("device id {0} is already registered with a different key")]
    Duplicate(DeviceId),
}

/// Known public keys by device id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyRing {
    keys: BTreeMap<DeviceId, PublicKey>,
}

impl KeyRing {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `key`. Re-registering the same key is a no-op; a different
    /// key under the same id means a digest collision and is refused.
    pub fn insert(&mut self, key: PublicKey) -> Result<DeviceId, KeyRingError> {
        let id = key.device_id();
        match self.keys.get(&id) {
            Some(existing) if *existing != key => Err(KeyRingError::Duplicate(id)),
            _ => {
                self.keys.insert(id, key);
                Ok(id)
            }
        }
    }

    pub fn get(&self, id: &DeviceId) -> Option<&PublicKey> {
        self.keys.get(id)
    }

    pub fn contains(&self, id: &DeviceId) -> bool {
        self.keys.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&DeviceId, &PublicKey)> {
        self.keys.iter()
    }
}

impl FromIterator<PublicKey> for KeyRing {
    fn from_iter<I: IntoIterator<Item = PublicKey>>(iter: I) -> Self {
        let mut ring = KeyRing::new();
        for key in iter {
            // Collisions are not reachable from distinct 32-byte digests in practice.
            let _ = ring.insert(key);
        }
        ring
    }
}

pub(crate) mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

pub(crate) mod hex_array {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).map_err(serde::de::Error::custom)?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seed(b: u8) -> [u8; 32] {
        [b; 32]
    }

    #[test]
    fn generation_is_deterministic_and_self_certifying() {
        let a1 = generate_identity(seed(0));
        let a2 = generate_identity(seed(0));
        let b = generate_identity(seed(1));
        assert_eq!(a1.device_id(), a2.device_id());
        assert_ne!(a1.device_id(), b.device_id());
        assert_eq!(a1.public_key().device_id(), a1.device_id());
        assert_eq!(a1.life_state(), LifeState::Active);
    }

    #[test]
    fn sign_round_trip_and_bit_flip() {
        let id = generate_identity(seed(2));
        let att = id.sign(b"abc", SimTime(5)).unwrap();
        assert!(att.verify(id.public_key()));

        let mut bad = att.clone();
        bad.payload[0] ^= 1;
        assert!(!bad.verify(id.public_key()));

        let mut bad = att.clone();
        bad.issued_at = SimTime(6);
        assert!(!bad.verify(id.public_key()));

        let other = generate_identity(seed(3));
        assert!(!att.verify(other.public_key()));
    }

    #[test]
    fn wiped_identity_cannot_sign() {
        let mut id = generate_identity(seed(4));
        id.wipe(false);
        assert_eq!(id.life_state(), LifeState::Wiped);
        assert!(!id.has_secret());
        assert_eq!(id.sign(b"x", SimTime(0)), Err(IdentityError::IdentityWiped(id.device_id())));
    }

    #[test]
    fn wipe_is_one_way() {
        let mut id = generate_identity(seed(5));
        id.wipe(true);
        assert_eq!(id.life_state(), LifeState::Bricked);
        id.wipe(false);
        assert_eq!(id.life_state(), LifeState::Bricked);

        let mut id = generate_identity(seed(6));
        id.wipe(false);
        id.wipe(false);
        assert_eq!(id.life_state(), LifeState::Wiped);
        id.wipe(true);
        assert_eq!(id.life_state(), LifeState::Bricked);
    }

    #[test]
    fn attestation_survives_wipe() {
        let mut id = generate_identity(seed(7));
        let att = id.sign(b"before", SimTime(1)).unwrap();
        let key = *id.public_key();
        id.wipe(true);
        assert!(att.verify(&key));
    }

    #[test]
    fn seal_open_round_trip() {
        let a = generate_identity(seed(10));
        let b = generate_identity(seed(11));
        let c = generate_identity(seed(12));
        let blob = a.seal_to(b.public_key(), b"weights", SimTime(0)).unwrap();
        assert_eq!(b.open(&blob).unwrap(), b"weights");
        assert!(blob.verify_sender(a.public_key()));
        assert!(!blob.verify_sender(c.public_key()));
        assert!(matches!(c.open(&blob), Err(IdentityError::WrongRecipient { .. })));
    }

    #[test]
    fn corrupted_ciphertext_fails_to_open() {
        let a = generate_identity(seed(13));
        let b = generate_identity(seed(14));
        let mut blob = a.seal_to(b.public_key(), b"payload", SimTime(0)).unwrap();
        blob.ciphertext[0] ^= 0x80;
        assert_eq!(b.open(&blob), Err(IdentityError::DecryptionFailure));
        assert!(!blob.verify_sender(a.public_key()));
    }

    #[test]
    fn forged_recipient_field_does_not_decrypt() {
        let a = generate_identity(seed(15));
        let b = generate_identity(seed(16));
        let c = generate_identity(seed(17));
        let mut blob = a.seal_to(b.public_key(), b"payload", SimTime(0)).unwrap();
        blob.recipient = c.device_id();
        assert_eq!(c.open(&blob), Err(IdentityError::DecryptionFailure));
    }

    #[test]
    fn wiped_identity_cannot_seal_or_open() {
        let a = generate_identity(seed(18));
        let mut b = generate_identity(seed(19));
        let blob = a.seal_to(b.public_key(), b"m", SimTime(0)).unwrap();
        b.wipe(false);
        assert!(matches!(b.open(&blob), Err(IdentityError::IdentityWiped(_))));
        assert!(matches!(b.seal_to(a.public_key(), b"m", SimTime(0)), Err(IdentityError::IdentityWiped(_))));
    }

    #[test]
    fn attestation_bytes_round_trip() {
        let id = generate_identity(seed(20));
        let att = id.sign(b"payload", SimTime(99)).unwrap();
        assert_eq!(Attestation::from_bytes(&att.to_bytes()).unwrap(), att);
    }

    #[test]
    fn keyring_rejects_conflicting_key() {
        let a = generate_identity(seed(21));
        let mut ring = KeyRing::new();
        let id = ring.insert(*a.public_key()).unwrap();
        assert_eq!(ring.insert(*a.public_key()).unwrap(), id);
        assert_eq!(ring.len(), 1);
    }
}
