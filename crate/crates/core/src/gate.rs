//! Mandatory access gate over the data section.
//!
//! Every map, read and write of a channel buffer is checked against a policy
//! derived from the region's channel table. The verdict is a value, never an
//! error: [`Verdict::Denied`] is this crate's `-EPERM`.
//!
//! A process that maps the backing file itself is not stopped by any of
//! this. The gate is the modeled kernel boundary and every library path goes
//! through it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::identity::Identity;
use crate::region::layout::{ent, entry_offset};
use crate::region::{ChannelMeta, ChannelState, Region, RegionError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessKind {
    Map,
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessRequest {
    pub caller_pid: u64,
    pub caller_service_id: u32,
    pub channel_id: u32,
    /// Relative to the channel buffer.
    pub offset: u64,
    pub length: u64,
    pub kind: AccessKind,
}

impl AccessRequest {
    pub fn new(caller: Identity, channel_id: u32, offset: u64, length: u64, kind: AccessKind) -> Self {
        Self {
            caller_pid: caller.pid,
            caller_service_id: caller.service_id,
            channel_id,
            offset,
            length,
            kind,
        }
    }
}

/// Why a request was refused, in the order the checks run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Error)]
pub enum Denied {
    #[error("no policy loaded")]
    NoPolicy,
    #[error("no such live channel")]
    NoChannel,
    #[error("caller pid not allowed")]
    PidNotAllowed,
    #[error("caller service not allowed")]
    ServiceNotAllowed,
    #[error("access out of bounds")]
    OutOfBounds,
    #[error("channel not established")]
    NotEstablished,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Permit,
    Denied(Denied),
}

impl Verdict {
    pub fn is_permit(self) -> bool {
        self == Verdict::Permit
    }

    pub fn into_result(self) -> Result<(), Denied> {
        match self {
            Verdict::Permit => Ok(()),
            Verdict::Denied(d) => Err(d),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelKind {
    /// Channel 0, open to every registered service.
    Host,
    /// Handshake scratch channel; exempt from the established rule.
    Temp,
    Service,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PidSet {
    Any,
    Only(Vec<u64>),
}

impl PidSet {
    pub fn contains(&self, pid: u64) -> bool {
        match self {
            PidSet::Any => true,
            PidSet::Only(pids) => pids.contains(&pid),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyEntry {
    pub channel_id: u32,
    pub kind: ChannelKind,
    pub allowed_pids: PidSet,
    pub allowed_service_ids: BTreeSet<u32>,
    pub buffer_size: u64,
    pub authorized: bool,
    pub established: bool,
}

impl PolicyEntry {
    /// Policy for a control-table entry; `None` for FREE and CLOSED slots.
    pub fn from_meta(meta: &ChannelMeta, registered: &BTreeSet<u32>) -> Option<Self> {
        let (kind, allowed_pids, allowed_service_ids) = match meta.state {
            ChannelState::Free | ChannelState::Closed => return None,
            _ if meta.channel_id == 0 => (ChannelKind::Host, PidSet::Any, registered.clone()),
            ChannelState::Temp => {
                let ends = [meta.server, meta.client];
                let present = ends.iter().filter(|e| !e.is_empty());
                let pids = present.clone().map(|e| e.pid).collect();
                let services = present.map(|e| e.service_id).collect();
                (ChannelKind::Temp, PidSet::Only(pids), services)
            }
            ChannelState::Authorized | ChannelState::Established => (
                ChannelKind::Service,
                PidSet::Only(vec![meta.server.pid, meta.client.pid]),
                [meta.server.service_id, meta.client.service_id].into_iter().collect(),
            ),
        };
        Some(Self {
            channel_id: meta.channel_id,
            kind,
            allowed_pids,
            allowed_service_ids,
            buffer_size: u64::from(meta.buffer_size),
            authorized: matches!(meta.state, ChannelState::Authorized | ChannelState::Established),
            established: meta.state == ChannelState::Established,
        })
    }
}

/// Snapshot of every live channel's policy.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PolicyTable {
    pub active: bool,
    pub entries: BTreeMap<u32, PolicyEntry>,
}

impl PolicyTable {
    pub fn from_channels(active: bool, channels: &[ChannelMeta], registered: &BTreeSet<u32>) -> Self {
        let entries = channels
            .iter()
            .filter_map(|m| PolicyEntry::from_meta(m, registered))
            .map(|e| (e.channel_id, e))
            .collect();
        Self { active, entries }
    }
}

/// The access predicate. Checks run channel, identity, bounds, state, and
/// the first failure is reported.
pub fn gate_check(policy: &PolicyTable, req: &AccessRequest) -> Verdict {
    check_entry(policy.active, policy.entries.get(&req.channel_id), req)
}

fn check_entry(active: bool, entry: Option<&PolicyEntry>, req: &AccessRequest) -> Verdict {
    if !active {
        return Verdict::Denied(Denied::NoPolicy);
    }
    let Some(entry) = entry else {
        return Verdict::Denied(Denied::NoChannel);
    };
    if !entry.allowed_pids.contains(req.caller_pid) {
        return Verdict::Denied(Denied::PidNotAllowed);
    }
    if !entry.allowed_service_ids.contains(&req.caller_service_id) {
        return Verdict::Denied(Denied::ServiceNotAllowed);
    }
    let in_bounds = req.length > 0
        && req.offset.checked_add(req.length).is_some_and(|end| end <= entry.buffer_size);
    if !in_bounds {
        return Verdict::Denied(Denied::OutOfBounds);
    }
    if entry.kind == ChannelKind::Service && req.kind != AccessKind::Map && !entry.established {
        return Verdict::Denied(Denied::NotEstablished);
    }
    Verdict::Permit
}

#[derive(Debug, Error)]
pub enum GateError {
    #[error("permission denied: {0}")]
    PermissionDenied(#[from] Denied),
    #[error("operation requires the broker")]
    NotBroker,
    #[error("channel {0} is not authorized")]
    NotAuthorized(u32),
    #[error("attestation does not match channel {0}")]
    BadAttestation(u32),
    #[error(transparent)]
    Region(#[from] RegionError),
}

/// Transcript hash presented to mark a channel established.
pub type Attestation = [u8; 32];

#[derive(Clone)]
pub struct Gate {
    inner: Arc<GateInner>,
}

struct GateInner {
    region: Region,
    registered: BTreeSet<u32>,
    expected: Mutex<HashMap<u32, Attestation>>,
    torn_down: AtomicBool,
}

impl std::fmt::Debug for Gate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gate").field("registered", &self.inner.registered).finish()
    }
}

impl Gate {
    /// `registered` is the set of service ids allowed on the host channel.
    pub fn new(region: Region, registered: impl IntoIterator<Item = u32>) -> Self {
        Self {
            inner: Arc::new(GateInner {
                region,
                registered: registered.into_iter().collect(),
                expected: Mutex::new(HashMap::new()),
                torn_down: AtomicBool::new(false),
            }),
        }
    }

    pub fn region(&self) -> &Region {
        &self.inner.region
    }

    pub fn registered(&self) -> &BTreeSet<u32> {
        &self.inner.registered
    }

    fn active(&self) -> bool {
        !self.inner.torn_down.load(Ordering::Acquire) && self.inner.region.policy_active()
    }

    pub fn policy(&self) -> Result<PolicyTable, RegionError> {
        let channels = self.inner.region.channels()?;
        Ok(PolicyTable::from_channels(self.active(), &channels, &self.inner.registered))
    }

    fn entry_for(&self, channel_id: u32) -> Option<(PolicyEntry, ChannelMeta, u32)> {
        let (meta, seq) = self.inner.region.channel_with_seq(channel_id).ok()?;
        PolicyEntry::from_meta(&meta, &self.inner.registered).map(|e| (e, meta, seq))
    }

    pub fn check(&self, req: &AccessRequest) -> Verdict {
        let entry = self.entry_for(req.channel_id);
        check_entry(self.active(), entry.as_ref().map(|(e, _, _)| e), req)
    }

    /// Maps a channel for `caller`. The view covers exactly the channel's
    /// buffer and nothing else.
    pub fn map(&self, channel_id: u32, caller: Identity) -> Result<MappedBuffer, GateError> {
        let (entry, meta, seq) = match self.entry_for(channel_id) {
            Some(found) => found,
            None => {
                let req = AccessRequest::new(caller, channel_id, 0, 1, AccessKind::Map);
                return Err(check_entry(self.active(), None, &req).into_result().unwrap_err().into());
            }
        };
        let req = AccessRequest::new(caller, channel_id, 0, entry.buffer_size, AccessKind::Map);
        check_entry(self.active(), Some(&entry), &req).into_result()?;
        Ok(MappedBuffer::new(
            self.inner.region.clone(),
            &meta,
            Enforcement::Checked { gate: self.clone(), caller, verified: AtomicU64::new(0) },
            seq,
        ))
    }

    /// The broker's own view of a channel. It bypasses the policy because the
    /// broker is the policy's author.
    pub fn map_host(&self, channel_id: u32) -> Result<MappedBuffer, GateError> {
        if !self.inner.region.is_broker() {
            return Err(GateError::NotBroker);
        }
        let (meta, seq) = self.inner.region.channel_with_seq(channel_id)?;
        if !meta.state.is_live() {
            return Err(Denied::NoChannel.into());
        }
        Ok(MappedBuffer::new(self.inner.region.clone(), &meta, Enforcement::Host, seq))
    }

    /// A view with enforcement switched off, used only to measure the cost of
    /// enforcement against an identical data path.
    pub fn map_unenforced(&self, channel_id: u32) -> Result<MappedBuffer, GateError> {
        let (meta, seq) = self.inner.region.channel_with_seq(channel_id)?;
        if !meta.state.is_live() {
            return Err(Denied::NoChannel.into());
        }
        Ok(MappedBuffer::new(self.inner.region.clone(), &meta, Enforcement::Unenforced, seq))
    }

    /// Records that `channel_id` was granted to exactly these endpoints and
    /// which attestation will establish it.
    pub fn mark_authorized(
        &self,
        channel_id: u32,
        pids: [u64; 2],
        service_ids: [u32; 2],
        expected: Attestation,
    ) -> Result<(), GateError> {
        if !self.inner.region.is_broker() {
            return Err(GateError::NotBroker);
        }
        let meta = self.inner.region.channel(channel_id)?;
        let mut want_pids = pids;
        let mut have_pids = [meta.server.pid, meta.client.pid];
        want_pids.sort_unstable();
        have_pids.sort_unstable();
        let mut want_svc = service_ids;
        let mut have_svc = [meta.server.service_id, meta.client.service_id];
        want_svc.sort_unstable();
        have_svc.sort_unstable();
        if meta.state != ChannelState::Authorized || want_pids != have_pids || want_svc != have_svc {
            return Err(GateError::NotAuthorized(channel_id));
        }
        self.inner.expected.lock().unwrap().insert(channel_id, expected);
        Ok(())
    }

    /// Flips an authorized channel to ESTABLISHED if `attestation` is the
    /// transcript hash recorded at authorization.
    pub fn mark_established(&self, channel_id: u32, attestation: &Attestation) -> Result<(), GateError> {
        if !self.inner.region.is_broker() {
            return Err(GateError::NotBroker);
        }
        let mut expected = self.inner.expected.lock().unwrap();
        let want = expected.get(&channel_id).ok_or(GateError::NotAuthorized(channel_id))?;
        if !constant_time_eq(want, attestation) {
            return Err(GateError::BadAttestation(channel_id));
        }
        self.inner.region.update_channel(channel_id, |m| {
            if m.state != ChannelState::Authorized {
                return Err(RegionError::BadChannel(channel_id));
            }
            m.state = ChannelState::Established;
            Ok(())
        })?;
        expected.remove(&channel_id);
        Ok(())
    }

    /// Forgets any pending authorization for a channel being torn down.
    pub fn forget(&self, channel_id: u32) {
        self.inner.expected.lock().unwrap().remove(&channel_id);
    }

    /// Clears the policy. Every later check is denied.
    pub fn teardown(&self) -> Result<(), GateError> {
        if !self.inner.region.is_broker() {
            return Err(GateError::NotBroker);
        }
        self.inner.torn_down.store(true, Ordering::Release);
        self.inner.expected.lock().unwrap().clear();
        self.inner.region.set_policy_active(false)?;
        Ok(())
    }
}

fn constant_time_eq(a: &[u8; 32], b: &[u8; 32]) -> bool {
    a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

enum Enforcement {
    Checked { gate: Gate, caller: Identity, verified: AtomicU64 },
    Host,
    Unenforced,
}

/// A view of one channel buffer. Offsets are relative to the buffer start;
/// nothing outside `[0, len)` is reachable.
pub struct MappedBuffer {
    region: Region,
    channel_id: u32,
    session_id: u64,
    base: usize,
    len: usize,
    enforcement: Enforcement,
}

impl std::fmt::Debug for MappedBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MappedBuffer")
            .field("channel_id", &self.channel_id)
            .field("len", &self.len)
            .finish()
    }
}

const VERIFIED: u64 = 1 << 63;

impl MappedBuffer {
    fn new(region: Region, meta: &ChannelMeta, enforcement: Enforcement, _seq: u32) -> Self {
        let base = region.abs_offset(meta);
        Self {
            channel_id: meta.channel_id,
            session_id: meta.session_id,
            base,
            len: meta.buffer_size as usize,
            region,
            enforcement,
        }
    }

    pub fn channel_id(&self) -> u32 {
        self.channel_id
    }

    pub fn session_id(&self) -> u64 {
        self.session_id
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_enforced(&self) -> bool {
        matches!(self.enforcement, Enforcement::Checked { .. })
    }

    /// Gate check for an access of `length` bytes at `offset`.
    ///
    /// The full predicate runs only when the channel entry changed since the
    /// last permitted access; otherwise one load of its seq suffices.
    /// Clearing the policy flag bumps every entry's seq, so it counts as a
    /// change.
    #[inline]
    pub fn authorize(&self, kind: AccessKind, offset: usize, length: usize) -> Result<(), Denied> {
        let Enforcement::Checked { gate, caller, verified } = &self.enforcement else {
            return Ok(());
        };
        let mem = self.region.mem();
        let seq = mem.u32_at(entry_offset(self.channel_id) + ent::SEQ).load(Ordering::Acquire);
        let key = VERIFIED | u64::from(seq);
        let in_bounds = length > 0 && offset.checked_add(length).is_some_and(|end| end <= self.len);
        if kind != AccessKind::Map && verified.load(Ordering::Relaxed) == key {
            return if in_bounds { Ok(()) } else { Err(Denied::OutOfBounds) };
        }
        let req = AccessRequest::new(*caller, self.channel_id, offset as u64, length as u64, kind);
        let entry = gate.entry_for(self.channel_id);
        if let Some((_, meta, _)) = &entry {
            if meta.session_id != self.session_id || meta.buffer_size as usize != self.len {
                return Err(Denied::NoChannel);
            }
        }
        check_entry(gate.active(), entry.as_ref().map(|(e, _, _)| e), &req).into_result()?;
        if kind != AccessKind::Map {
            if let Some((_, _, entry_seq)) = entry {
                verified.store(VERIFIED | u64::from(entry_seq), Ordering::Relaxed);
            }
        }
        Ok(())
    }

    /// Checked copy out of the buffer.
    pub fn read(&self, offset: usize, dst: &mut [u8]) -> Result<(), Denied> {
        self.authorize(AccessKind::Read, offset, dst.len())?;
        self.copy_out(offset, dst);
        Ok(())
    }

    /// Checked copy into the buffer.
    pub fn write(&self, offset: usize, src: &[u8]) -> Result<(), Denied> {
        self.authorize(AccessKind::Write, offset, src.len())?;
        self.copy_in(offset, src);
        Ok(())
    }

    #[inline]
    fn abs(&self, offset: usize, size: usize) -> usize {
        assert!(
            offset.checked_add(size).is_some_and(|end| end <= self.len),
            "view access {offset}+{size} outside channel of {} bytes",
            self.len
        );
        self.base + offset
    }

    #[inline]
    pub(crate) fn word32(&self, offset: usize) -> &AtomicU32 {
        self.region.mem().u32_at(self.abs(offset, 4))
    }

    #[inline]
    pub(crate) fn word64(&self, offset: usize) -> &AtomicU64 {
        self.region.mem().u64_at(self.abs(offset, 8))
    }

    #[inline]
    pub(crate) fn copy_in(&self, offset: usize, src: &[u8]) {
        self.region.mem().write(self.abs(offset, src.len()), src)
    }

    #[inline]
    pub(crate) fn copy_out(&self, offset: usize, dst: &mut [u8]) {
        self.region.mem().read(self.abs(offset, dst.len()), dst)
    }
}
