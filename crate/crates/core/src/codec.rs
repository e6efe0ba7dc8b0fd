// Copyright 2026 The flexheg-sim Authors
// SPDX-License-Identifier: Apache-2.0

//! Canonical binary encoding.
//!
//! Everything that is hashed or signed goes through [`Encoder`]. The layout is
//! a flat concatenation of fields in declared order:
//!
//! * integers are 8-byte big-endian,
//! * byte strings and UTF-8 strings are a `u64` length followed by the bytes,
//! * lists are a `u64` element count followed by the elements,
//! * every top-level object starts with a domain tag (a length-prefixed string).
//!
//! There is exactly one encoding per value, so encode → hash is stable across
//! runs and platforms.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("unexpected end of input at offset {0}")]
    Truncated(usize),
    #[error("expected domain tag {expected:?}, found {found:?}")]
    WrongDomain { expected: String, found: String },
    #[error("invalid utf-8 string at offset {0}")]
    Utf8(usize),
    #[error("invalid value for {field}: {value}")]
    InvalidValue { field: &'static str, value: u64 },
    #[error("{0} trailing bytes after object")]
    Trailing(usize),
    #[error("field {field} has length {len}, expected {expected}")]
    BadLength { field: &'static str, len: usize, expected: usize },
}

/// Writer for canonical bytes.
#[derive(Debug, Default, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    /// Starts a new object tagged with `domain`.
    pub fn new(domain: &str) -> Self {
        let mut enc = Self { buf: Vec::with_capacity(128) };
        enc.str(domain);
        enc
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.u64(u64::from(v))
    }

    pub fn bool(&mut self, v: bool) -> &mut Self {
        self.u64(u64::from(v))
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    pub fn digest(&mut self, d: &Digest) -> &mut Self {
        self.bytes(&d.0)
    }

    pub fn list<T>(&mut self, items: impl ExactSizeIterator<Item = T>, mut f: impl FnMut(&mut Self, T)) -> &mut Self {
        self.u64(items.len() as u64);
        for item in items {
            f(self, item);
        }
        self
    }

    /// Appends already-canonical bytes of a nested object, length-prefixed.
    pub fn nested(&mut self, canonical: &[u8]) -> &mut Self {
        self.bytes(canonical)
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Reader for canonical bytes produced by [`Encoder`].
#[derive(Debug)]
pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    /// Opens `buf` and checks its domain tag.
    pub fn new(buf: &'a [u8], domain: &str) -> Result<Self, DecodeError> {
        let mut dec = Self { buf, pos: 0 };
        let found = dec.str()?;
        if found != domain {
            return Err(DecodeError::WrongDomain { expected: domain.to_string(), found });
        }
        Ok(dec)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).ok_or(DecodeError::Truncated(self.pos))?;
        if end > self.buf.len() {
            return Err(DecodeError::Truncated(self.pos));
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        let raw = self.take(8)?;
        Ok(u64::from_be_bytes(raw.try_into().expect("8 bytes")))
    }

    pub fn u8(&mut self, field: &'static str) -> Result<u8, DecodeError> {
        let v = self.u64()?;
        u8::try_from(v).map_err(|_| DecodeError::InvalidValue { field, value: v })
    }

    pub fn bool(&mut self, field: &'static str) -> Result<bool, DecodeError> {
        match self.u64()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(DecodeError::InvalidValue { field, value: v }),
        }
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], DecodeError> {
        let len = self.u64()?;
        let len = usize::try_from(len).map_err(|_| DecodeError::Truncated(self.pos))?;
        self.take(len)
    }

    pub fn str(&mut self) -> Result<String, DecodeError> {
        let at = self.pos;
        let raw = self.bytes()?;
        String::from_utf8(raw.to_vec()).map_err(|_| DecodeError::Utf8(at))
    }

    pub fn fixed<const N: usize>(&mut self, field: &'static str) -> Result<[u8; N], DecodeError> {
        let raw = self.bytes()?;
        raw.try_into().map_err(|_| DecodeError::BadLength { field, len: raw.len(), expected: N })
    }

    pub fn digest(&mut self, field: &'static str) -> Result<Digest, DecodeError> {
        self.fixed::<32>(field).map(Digest)
    }

    /// Reads a list count. Each element occupies at least 8 bytes, which bounds
    /// the count by the remaining input and keeps hostile counts from allocating.
    pub fn count(&mut self) -> Result<usize, DecodeError> {
        let n = self.u64()?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if n > remaining / 8 + 1 {
            return Err(DecodeError::Truncated(self.pos));
        }
        Ok(n as usize)
    }

    pub fn finish(self) -> Result<(), DecodeError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(DecodeError::Trailing(n)),
        }
    }
}

/// A 32-byte SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    /// Hashes `data` under a domain tag so digests of different object kinds
    /// never collide.
    pub fn tagged(domain: &str, data: &[u8]) -> Self {
        let mut h = Sha256::new();
        h.update((domain.len() as u64).to_be_bytes());
        h.update(domain.as_bytes());
        h.update(data);
        Digest(h.finalize().into())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, hex::FromHexError> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)?;
        Ok(Digest(out))
    }

    /// First eight hex characters, for logs and traces.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.short())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integers_are_big_endian() {
        let mut enc = Encoder::default();
        enc.u64(0x0102_0304_0506_0708);
        assert_eq!(enc.finish(), vec![1, 2, 3, 4, 5, 6, 7, 8]);
    }

    #[test]
    fn bytes_are_length_prefixed() {
        let mut enc = Encoder::default();
        enc.bytes(b"abc");
        assert_eq!(enc.finish(), vec![0, 0, 0, 0, 0, 0, 0, 3, b'a', b'b', b'c']);
    }

    #[test]
    fn decoder_reads_back_fields() {
        let mut enc = Encoder::new("test/v1");
        enc.u64(42).str("hello").bool(true);
        enc.list([1u64, 2, 3].into_iter(), |e, v| {
            e.u64(v);
        });
        let bytes = enc.finish();

        let mut dec = Decoder::new(&bytes, "test/v1").unwrap();
        assert_eq!(dec.u64().unwrap(), 42);
        assert_eq!(dec.str().unwrap(), "hello");
        assert!(dec.bool("flag").unwrap());
        let n = dec.count().unwrap();
        let items: Vec<u64> = (0..n).map(|_| dec.u64().unwrap()).collect();
        assert_eq!(items, vec![1, 2, 3]);
        dec.finish().unwrap();
    }

    #[test]
    fn wrong_domain_and_truncation_are_errors() {
        let bytes = Encoder::new("a").finish();
        assert!(matches!(Decoder::new(&bytes, "b"), Err(DecodeError::WrongDomain { .. })));

        let mut enc = Encoder::new("a");
        enc.bytes(b"abcdef");
        let mut bytes = enc.finish();
        bytes.truncate(bytes.len() - 1);
        let mut dec = Decoder::new(&bytes, "a").unwrap();
        assert!(matches!(dec.bytes(), Err(DecodeError::Truncated(_))));
    }

    #[test]
    fn hostile_count_is_rejected() {
        let mut enc = Encoder::new("a");
        enc.u64(u64::MAX);
        let bytes = enc.finish();
        let mut dec = Decoder::new(&bytes, "a").unwrap();
        assert!(dec.count().is_err());
    }

    #[test]
    fn digest_domains_separate() {
        assert_ne!(Digest::tagged("x", b"data"), Digest::tagged("y", b"data"));
        let d = Digest::tagged("x", b"data");
        assert_eq!(Digest::from_hex(&d.to_hex()).unwrap(), d);
    }
}
