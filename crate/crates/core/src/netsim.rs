// Copyright 2026 The flexheg-sim Authors
// SPDX-License-Identifier: Apache-2.0

//! Deterministic network model: 2-D geography, latency, link bandwidth,
//! partitions, distance-bounding location checks and attested clusters.
//!
//! Positions are integer meters and latencies integer nanoseconds. Distances
//! round up and latencies round up, so a measured bound can never be tighter
//! than the true distance.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::claim::{Claim, ClaimBody, Statement, Subject};
use crate::codec::{Digest, Encoder};
use crate::device::{ClusterMembership, GuaranteeProcessorState, Restriction};
use crate::identity::{Attestation, DeviceId, DeviceIdentity, IdentityError, PublicKey};
use crate::time::{SimTime, MS_PER_SECOND};

const DOMAIN_PING: &str = "flexheg/ping/v1";
const DOMAIN_TOKEN: &str = "flexheg/anonymous-token/v1";
const DOMAIN_CLUSTER: &str = "flexheg/cluster-config/v1";
const DOMAIN_HANDSHAKE: &str = "flexheg/cluster-handshake/v1";

/// Two-thirds of the vacuum speed of light, typical of fiber.
pub const DEFAULT_SIGNAL_SPEED_KM_S: u64 = 200_000;
pub const NS_PER_MS: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetError {
    #[error("unknown node {0}")]
    UnknownNode(DeviceId),
    #[error("no response from {0}")]
    Timeout(DeviceId),
    #[error("echo from {0} does not match the challenge")]
    BadEcho(DeviceId),
    #[error("landmark {0} refused the ping")]
    Refused(DeviceId),
    #[error("member {0} is unreachable")]
    MemberUnreachable(DeviceId),
    #[error("member {0} is tampered or wiped")]
    MemberTampered(DeviceId),
    #[error("attestation from member {0} is missing or no longer current")]
    StaleAttestation(DeviceId),
    #[error("cluster has {members} members and egress {egress} B/s, limits are {max_members} and {max_egress}")]
    ConstraintViolated { members: u64, egress: u64, max_members: u64, max_egress: u64 },
    #[error("egress cap of cluster {cluster} exceeded in second {second}")]
    EgressCapExceeded { cluster: Digest, second: u64 },
    #[error("cluster needs at least one member")]
    EmptyCluster,
    #[error(transparent)]
    Identity(#[from] IdentityError),
}

/// A point on the plane, in meters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Position {
    pub x_m: i64,
    pub y_m: i64,
}

impl Position {
    pub fn from_m(x_m: i64, y_m: i64) -> Self {
        Self { x_m, y_m }
    }

    /// Rounds kilometer coordinates to the nearest meter.
    pub fn from_km(x_km: f64, y_km: f64) -> Self {
        Self { x_m: (x_km * 1000.0).round() as i64, y_m: (y_km * 1000.0).round() as i64 }
    }

    /// Euclidean distance, rounded up to a whole meter.
    pub fn distance_m(&self, other: &Position) -> u64 {
        let dx = self.x_m.abs_diff(other.x_m) as u128;
        let dy = self.y_m.abs_diff(other.y_m) as u128;
        let sq = dx * dx + dy * dy;
        let r = sq.isqrt();
        (if r * r == sq { r } else { r + 1 }) as u64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub position: Position,
    pub processing_delay_ns: u64,
}

fn link_key(a: DeviceId, b: DeviceId) -> (DeviceId, DeviceId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// What a wire record carried.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Ping,
    Echo,
    Handshake,
    Deployment,
    EvalSuite,
    EvalResult,
    Claim,
    Other,
}

/// One message as it crossed the simulated wire.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WireRecord {
    pub sent_ns: u64,
    pub arrival_ns: u64,
    pub from: DeviceId,
    pub to: DeviceId,
    pub kind: MessageKind,
    pub sealed: bool,
    pub bytes: Vec<u8>,
}

/// Events ordered by `(time, insertion sequence)`.
#[derive(Debug)]
pub struct EventQueue<E> {
    heap: BinaryHeap<Reverse<(u64, u64)>>,
    pending: BTreeMap<u64, E>,
    next_seq: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self { heap: BinaryHeap::new(), pending: BTreeMap::new(), next_seq: 0 }
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, at: u64, event: E) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse((at, seq)));
        self.pending.insert(seq, event);
        seq
    }

    pub fn pop(&mut self) -> Option<(u64, E)> {
        let Reverse((at, seq)) = self.heap.pop()?;
        let event = self.pending.remove(&seq).expect("queued event has a payload");
        Some((at, event))
    }

    pub fn peek_time(&self) -> Option<u64> {
        self.heap.peek().map(|Reverse((at, _))| *at)
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }
}

/// Geography, links, and a log of all traffic.
#[derive(Debug, Clone)]
pub struct NetworkModel {
    nodes: BTreeMap<DeviceId, Node>,
    signal_speed_km_s: u64,
    bandwidth: BTreeMap<(DeviceId, DeviceId), u64>,
    partitions: BTreeSet<(DeviceId, DeviceId)>,
    clusters: BTreeMap<Digest, (BTreeSet<DeviceId>, u64)>,
    egress: BTreeMap<(Digest, u64), u64>,
    wire: Vec<WireRecord>,
}

impl Default for NetworkModel {
    fn default() -> Self {
        Self::new(DEFAULT_SIGNAL_SPEED_KM_S)
    }
}

impl NetworkModel {
    pub fn new(signal_speed_km_s: u64) -> Self {
        assert!(signal_speed_km_s > 0, "signal speed must be positive");
        Self {
            nodes: BTreeMap::new(),
            signal_speed_km_s,
            bandwidth: BTreeMap::new(),
            partitions: BTreeSet::new(),
            clusters: BTreeMap::new(),
            egress: BTreeMap::new(),
            wire: Vec::new(),
        }
    }

    pub fn signal_speed_km_s(&self) -> u64 {
        self.signal_speed_km_s
    }

    pub fn add_node(&mut self, id: DeviceId, node: Node) {
        self.nodes.insert(id, node);
    }

    pub fn node(&self, id: &DeviceId) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn set_bandwidth(&mut self, a: DeviceId, b: DeviceId, bytes_per_s: u64) {
        self.bandwidth.insert(link_key(a, b), bytes_per_s);
    }

    pub fn partition(&mut self, a: DeviceId, b: DeviceId) {
        self.partitions.insert(link_key(a, b));
    }

    pub fn heal(&mut self, a: DeviceId, b: DeviceId) {
        self.partitions.remove(&link_key(a, b));
    }

    /// Severs every link touching `a`.
    pub fn isolate(&mut self, a: DeviceId) {
        let others: Vec<DeviceId> = self.nodes.keys().copied().filter(|b| *b != a).collect();
        for b in others {
            self.partition(a, b);
        }
    }

    pub fn reconnect(&mut self, a: DeviceId) {
        self.partitions.retain(|(x, y)| *x != a && *y != a);
    }

    pub fn reachable(&self, a: DeviceId, b: DeviceId) -> bool {
        self.nodes.contains_key(&a) && self.nodes.contains_key(&b) && !self.partitions.contains(&link_key(a, b))
    }

    pub fn distance_m(&self, a: &DeviceId, b: &DeviceId) -> Result<u64, NetError> {
        let pa = self.nodes.get(a).ok_or(NetError::UnknownNode(*a))?;
        let pb = self.nodes.get(b).ok_or(NetError::UnknownNode(*b))?;
        Ok(pa.position.distance_m(&pb.position))
    }

    /// One-way latency: propagation (rounded up) plus both endpoints'
    /// processing delays.
    pub fn latency_ns(&self, a: &DeviceId, b: &DeviceId) -> Result<u64, NetError> {
        let d = self.distance_m(a, b)? as u128;
        let v = self.signal_speed_km_s as u128;
        let propagation = (d * 1_000_000).div_ceil(v) as u64;
        Ok(propagation + self.nodes[a].processing_delay_ns + self.nodes[b].processing_delay_ns)
    }

    /// Distance bound implied by a round trip, rounded down.
    pub fn bound_m(&self, rtt_ns: u64) -> u64 {
        (rtt_ns as u128 * self.signal_speed_km_s as u128 / 2_000_000) as u64
    }

    /// Whether a round trip proves the responder within `radius_m`.
    pub fn within_radius(&self, rtt_ns: u64, radius_m: u64) -> bool {
        rtt_ns as u128 * self.signal_speed_km_s as u128 <= radius_m as u128 * 2_000_000
    }

    /// Sends `bytes` from `from` to `to` at `at`, returning the arrival time
    /// in nanoseconds. Traffic leaving a registered cluster counts against
    /// its per-second egress cap.
    pub fn send(
        &mut self,
        from: DeviceId,
        to: DeviceId,
        kind: MessageKind,
        sealed: bool,
        bytes: Vec<u8>,
        at: SimTime,
    ) -> Result<u64, NetError> {
        self.send_at_ns(from, to, kind, sealed, bytes, at.as_ms().saturating_mul(NS_PER_MS))
    }

    fn send_at_ns(
        &mut self,
        from: DeviceId,
        to: DeviceId,
        kind: MessageKind,
        sealed: bool,
        bytes: Vec<u8>,
        sent_ns: u64,
    ) -> Result<u64, NetError> {
        if !self.reachable(from, to) {
            return Err(NetError::Timeout(to));
        }
        let second = sent_ns / (NS_PER_MS * MS_PER_SECOND);
        let len = bytes.len() as u64;
        let mut charged = Vec::new();
        for (digest, (members, cap)) in &self.clusters {
            if members.contains(&from) && !members.contains(&to) {
                let used = self.egress.get(&(*digest, second)).copied().unwrap_or(0);
                if used + len > *cap {
                    return Err(NetError::EgressCapExceeded { cluster: *digest, second });
                }
                charged.push(*digest);
            }
        }
        for digest in charged {
            *self.egress.entry((digest, second)).or_default() += len;
        }
        let transmit_ns = match self.bandwidth.get(&link_key(from, to)) {
            Some(bw) if *bw > 0 => (len as u128 * 1_000_000_000).div_ceil(*bw as u128) as u64,
            _ => 0,
        };
        let arrival_ns = sent_ns + self.latency_ns(&from, &to)? + transmit_ns;
        self.wire.push(WireRecord { sent_ns, arrival_ns, from, to, kind, sealed, bytes });
        Ok(arrival_ns)
    }

    pub fn wire(&self) -> &[WireRecord] {
        &self.wire
    }

    /// True if every registered cluster stayed within its cap in every
    /// second.
    pub fn egress_within_caps(&self) -> bool {
        self.egress.iter().all(|((digest, _), used)| self.clusters.get(digest).is_some_and(|(_, cap)| used <= cap))
    }

    pub fn register_cluster(&mut self, config: &ClusterConfig) {
        self.clusters.insert(config.digest(), (config.members.clone(), config.egress_cap));
    }

    pub fn unregister_cluster(&mut self, digest: &Digest) {
        self.clusters.remove(digest);
    }
}

/// A signed response to a ping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Echo {
    pub responder: DeviceId,
    pub attestation: Attestation,
}

fn ping_payload(nonce: &[u8; 32], challenger: &Digest) -> Vec<u8> {
    let mut enc = Encoder::new(DOMAIN_PING);
    enc.bytes(nonce).digest(challenger);
    enc.finish()
}

/// Checks that `echo` is a fresh signature over this exact challenge.
pub fn verify_echo(echo: &Echo, key: &PublicKey, nonce: &[u8; 32], challenger: &Digest) -> Result<(), NetError> {
    if echo.attestation.signer != echo.responder
        || echo.attestation.payload != ping_payload(nonce, challenger)
        || !echo.attestation.verify(key)
    {
        return Err(NetError::BadEcho(echo.responder));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RttMeasurement {
    pub rtt_ns: u64,
    pub echo: Echo,
}

/// Pings `responder` from `challenger` with `nonce`. The responder signs the
/// nonce and may hold its reply for `added_delay_ns`.
pub fn measure_rtt(
    net: &mut NetworkModel,
    challenger: DeviceId,
    responder: &DeviceIdentity,
    nonce: [u8; 32],
    added_delay_ns: u64,
    now: SimTime,
) -> Result<RttMeasurement, NetError> {
    ping(net, challenger, &challenger.0, responder, nonce, added_delay_ns, now)
}

/// A ping where `binding` (the challenger id or an anonymous token) is what
/// the echo commits to.
fn ping(
    net: &mut NetworkModel,
    challenger: DeviceId,
    binding: &Digest,
    responder: &DeviceIdentity,
    nonce: [u8; 32],
    added_delay_ns: u64,
    now: SimTime,
) -> Result<RttMeasurement, NetError> {
    let to = responder.device_id();
    let payload = ping_payload(&nonce, binding);
    let sent = now.as_ms().saturating_mul(NS_PER_MS);
    let arrived = net.send_at_ns(challenger, to, MessageKind::Ping, false, payload.clone(), sent)?;
    let attestation = match responder.sign(&payload, now) {
        Ok(a) => a,
        Err(IdentityError::IdentityWiped(_)) => return Err(NetError::Timeout(to)),
        Err(e) => return Err(e.into()),
    };
    let echo = Echo { responder: to, attestation };
    let back = net.send_at_ns(to, challenger, MessageKind::Echo, false, echo.attestation.to_bytes(), arrived + added_delay_ns)?;
    verify_echo(&echo, responder.public_key(), &nonce, binding)?;
    Ok(RttMeasurement { rtt_ns: back - sent, echo })
}

/// A trusted reference node for distance bounding.
#[derive(Debug)]
pub struct Landmark {
    pub identity: DeviceIdentity,
    /// Refuses pings that identify the device being located.
    pub refuse_identified: bool,
    /// Refuses anonymous pings.
    pub require_deanonymize: bool,
}

impl Landmark {
    pub fn new(identity: DeviceIdentity) -> Self {
        Self { identity, refuse_identified: false, require_deanonymize: false }
    }

    pub fn device_id(&self) -> DeviceId {
        self.identity.device_id()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocationMode {
    /// The landmark pings the identified device and signs the result.
    LandmarkInitiated,
    /// The device pings the landmark under a one-time token and signs its
    /// own claim; the landmark never learns which device asked.
    DeviceInitiatedAnonymous,
}

#[derive(Clone, Debug)]
pub struct LocationOutcome {
    pub subject: DeviceId,
    pub landmark: DeviceId,
    pub rtt_ns: u64,
    pub bound_m: u64,
    pub region_ok: bool,
    /// Present only when `region_ok`.
    pub claim: Option<Claim>,
}

fn anonymous_token(device: &DeviceIdentity, nonce: &[u8; 32]) -> Result<Digest, NetError> {
    let sig = device.sign(nonce, SimTime::ZERO)?;
    Ok(Digest::tagged(DOMAIN_TOKEN, &sig.signature.0))
}

/// Bounds `device`'s distance from `landmark` and checks it against
/// `radius_m`. A failed round trip is an error, distinct from a measurement
/// that lands outside the region.
#[allow(clippy::too_many_arguments)]
pub fn verify_location(
    net: &mut NetworkModel,
    device: &GuaranteeProcessorState,
    landmark: &Landmark,
    radius_m: u64,
    mode: LocationMode,
    added_delay_ns: u64,
    nonce: [u8; 32],
    now: SimTime,
) -> Result<LocationOutcome, NetError> {
    let me = device.device_id();
    if device.is_tampered() {
        return Err(NetError::MemberTampered(me));
    }
    let lm = landmark.device_id();
    let (rtt_ns, statement, attester) = match mode {
        LocationMode::LandmarkInitiated => {
            if landmark.refuse_identified {
                return Err(NetError::Refused(lm));
            }
            let m = ping(net, lm, &lm.0, device.identity(), nonce, added_delay_ns, now)?;
            let st = Statement::LocationInRegion { landmark: Some(lm), radius_m, rtt_ns: Some(m.rtt_ns) };
            (m.rtt_ns, st, &landmark.identity)
        }
        LocationMode::DeviceInitiatedAnonymous => {
            if landmark.require_deanonymize {
                return Err(NetError::Refused(lm));
            }
            let token = anonymous_token(device.identity(), &nonce)?;
            let m = ping(net, me, &token, &landmark.identity, nonce, 0, now)?;
            let rtt = m.rtt_ns + added_delay_ns;
            (rtt, Statement::LocationInRegion { landmark: Some(lm), radius_m, rtt_ns: None }, device.identity())
        }
    };
    let region_ok = net.within_radius(rtt_ns, radius_m);
    let claim = if region_ok {
        Some(Claim::issue(ClaimBody::new(statement, Subject::Device(me)), attester, now)?)
    } else {
        None
    };
    Ok(LocationOutcome { subject: me, landmark: lm, rtt_ns, bound_m: net.bound_m(rtt_ns), region_ok, claim })
}

/// Restricts the device unless the check succeeded in-region; lifts the
/// restriction on success.
pub fn enforce_location_restriction(state: &mut GuaranteeProcessorState, outcome: &Result<LocationOutcome, NetError>) {
    match outcome {
        Ok(o) if o.region_ok => state.lift(Restriction::Location),
        _ => state.restrict(Restriction::Location),
    }
}

/// A set of devices networked together with a bounded egress.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub members: BTreeSet<DeviceId>,
    pub egress_cap: u64,
    pub formed_at: SimTime,
    pub member_attestations: Vec<Attestation>,
}

impl ClusterConfig {
    pub fn body_bytes(members: &BTreeSet<DeviceId>, egress_cap: u64, formed_at: SimTime) -> Vec<u8> {
        let mut enc = Encoder::new(DOMAIN_CLUSTER);
        enc.list(members.iter(), |e, m| {
            e.digest(&m.0);
        });
        enc.u64(egress_cap).u64(formed_at.as_ms());
        enc.finish()
    }

    pub fn digest(&self) -> Digest {
        Digest::tagged(DOMAIN_CLUSTER, &Self::body_bytes(&self.members, self.egress_cap, self.formed_at))
    }

    /// Checks that every member has a valid attestation and is still live.
    pub fn verify<D: MemberDirectory + ?Sized>(&self, directory: &D) -> Result<(), NetError> {
        let body = Self::body_bytes(&self.members, self.egress_cap, self.formed_at);
        for m in &self.members {
            let ok = directory.is_live(m)
                && directory.public_key(m).is_some_and(|key| {
                    self.member_attestations.iter().any(|a| a.signer == *m && a.payload == body && a.verify(&key))
                });
            if !ok {
                return Err(NetError::StaleAttestation(*m));
            }
        }
        Ok(())
    }
}

/// Where a verifier looks up member keys and liveness.
pub trait MemberDirectory {
    fn public_key(&self, id: &DeviceId) -> Option<PublicKey>;
    fn is_live(&self, id: &DeviceId) -> bool;
}

impl<K: Ord> MemberDirectory for BTreeMap<K, GuaranteeProcessorState> {
    fn public_key(&self, id: &DeviceId) -> Option<PublicKey> {
        self.values().find(|s| s.device_id() == *id).map(|s| *s.identity().public_key())
    }

    fn is_live(&self, id: &DeviceId) -> bool {
        self.values().any(|s| s.device_id() == *id && !s.is_tampered() && s.identity().is_active())
    }
}

impl MemberDirectory for [GuaranteeProcessorState] {
    fn public_key(&self, id: &DeviceId) -> Option<PublicKey> {
        self.iter().find(|s| s.device_id() == *id).map(|s| *s.identity().public_key())
    }

    fn is_live(&self, id: &DeviceId) -> bool {
        self.iter().any(|s| s.device_id() == *id && !s.is_tampered() && s.identity().is_active())
    }
}

/// Forms a cluster: every pair of members exchanges a sealed handshake, then
/// every member attests to the configuration and records its membership.
pub fn form_cluster(
    net: &mut NetworkModel,
    members: &mut [&mut GuaranteeProcessorState],
    egress_cap: u64,
    now: SimTime,
) -> Result<ClusterConfig, NetError> {
    if members.is_empty() {
        return Err(NetError::EmptyCluster);
    }
    for m in members.iter() {
        if m.is_tampered() || !m.identity().is_active() {
            return Err(NetError::MemberTampered(m.device_id()));
        }
    }
    let ids: BTreeSet<DeviceId> = members.iter().map(|m| m.device_id()).collect();
    for a in &ids {
        for b in &ids {
            if a < b && !net.reachable(*a, *b) {
                return Err(NetError::MemberUnreachable(*b));
            }
        }
    }
    let body = ClusterConfig::body_bytes(&ids, egress_cap, now);
    let mut hello = Encoder::new(DOMAIN_HANDSHAKE);
    hello.nested(&body);
    let hello = hello.finish();
    for i in 0..members.len() {
        for j in 0..members.len() {
            if i == j {
                continue;
            }
            let to_key = *members[j].identity().public_key();
            let blob = members[i].identity().seal_to(&to_key, &hello, now).map_err(|_| NetError::MemberTampered(members[i].device_id()))?;
            net.send(members[i].device_id(), members[j].device_id(), MessageKind::Handshake, true, blob.to_bytes(), now)?;
            let opened = members[j].identity().open(&blob).map_err(|_| NetError::MemberTampered(members[j].device_id()))?;
            if opened != hello || !blob.verify_sender(members[i].identity().public_key()) {
                return Err(NetError::MemberTampered(members[i].device_id()));
            }
        }
    }
    let mut member_attestations = Vec::with_capacity(members.len());
    for m in members.iter() {
        let att = m.identity().sign(&body, now).map_err(|_| NetError::MemberTampered(m.device_id()))?;
        member_attestations.push(att);
    }
    let config = ClusterConfig { members: ids.clone(), egress_cap, formed_at: now, member_attestations };
    let digest = config.digest();
    for m in members.iter_mut() {
        m.join_cluster(ClusterMembership { config_digest: digest, members: ids.clone(), egress_cap, verified_small: false })
            .map_err(|_| NetError::MemberTampered(m.device_id()))?;
    }
    net.register_cluster(&config);
    Ok(config)
}

/// Small-cluster limits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterConstraints {
    pub max_members: u64,
    pub max_egress: u64,
}

/// Issues a cluster-config claim if `config` is current and within
/// `constraints`.
pub fn verify_cluster_constraints<D: MemberDirectory + ?Sized>(
    config: &ClusterConfig,
    constraints: ClusterConstraints,
    directory: &D,
    attester: &DeviceIdentity,
    now: SimTime,
) -> Result<Claim, NetError> {
    config.verify(directory)?;
    let members = config.members.len() as u64;
    if members > constraints.max_members || config.egress_cap > constraints.max_egress {
        return Err(NetError::ConstraintViolated {
            members,
            egress: config.egress_cap,
            max_members: constraints.max_members,
            max_egress: constraints.max_egress,
        });
    }
    let statement = Statement::ClusterConfig {
        config_digest: config.digest(),
        egress_cap: config.egress_cap,
        max_members: constraints.max_members,
        max_egress: constraints.max_egress,
    };
    Ok(Claim::issue(ClaimBody::new(statement, Subject::Devices(config.members.clone())), attester, now)?)
}
