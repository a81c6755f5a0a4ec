//! The shared region: a control section (header plus channel table) followed
//! by a data section carved into channel buffers.
//!
//! Only a handle created by [`Region::create`] or [`Region::recover`] carries
//! the broker token and may write the control section. Handles from
//! [`Region::open`] are read-only with respect to control state; their data
//! access goes through the policy gate.

pub mod layout;

use std::path::{Path, PathBuf};
use std::sync::atomic::{fence, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use thiserror::Error;

use crate::handshake::AuthorizationWitness;
use crate::identity::Identity;
use crate::shm::SharedMem;
use crate::transport::ring::RING_HEADER_SIZE;

pub use layout::{align_up, ChannelMeta, ChannelState, ControlHeader, CHANNEL_ALIGN, ENTRY_SIZE, HEADER_SIZE};
use layout::{ent, entry_offset, hdr, table_size, FLAG_POLICY_ACTIVE, MAGIC, VERSION};

/// Environment variable naming the backing file shared by all processes.
pub const REGION_ENV: &str = "SHMGUARD_REGION";

pub const LOCK_TIMEOUT: Duration = Duration::from_millis(500);
const MAX_REGION_SIZE: usize = 1 << 31;

#[derive(Debug, Error)]
pub enum RegionError {
    #[error("region i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid region config: {0}")]
    InvalidConfig(String),
    #[error("bad magic {0:#010x}")]
    BadMagic(u32),
    #[error("unsupported region version {0}")]
    VersionMismatch(u16),
    #[error("operation requires the broker token")]
    NotBroker,
    #[error("region exhausted: {requested} bytes requested, {available} available")]
    RegionExhausted { requested: usize, available: usize },
    #[error("no free channel slot")]
    NoFreeSlot,
    #[error("bad channel {0}")]
    BadChannel(u32),
    #[error("control lock not acquired within {0:?}")]
    LockTimeout(Duration),
    #[error("control section inconsistent: {0}")]
    Corrupt(String),
}

pub type Result<T, E = RegionError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionConfig {
    pub total_size: usize,
    pub control_size: usize,
    pub max_channels: u32,
    pub host_channel_size: usize,
    pub default_channel_size: usize,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self {
            total_size: 16 << 20,
            control_size: 8192,
            max_channels: 64,
            host_channel_size: 64 << 10,
            default_channel_size: 512 << 10,
        }
    }
}

impl RegionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RegionError::InvalidConfig(m));
        if !self.total_size.is_power_of_two() || self.total_size > MAX_REGION_SIZE {
            return bad(format!("total_size {} must be a power of two <= 2 GiB", self.total_size));
        }
        if self.max_channels == 0 {
            return bad("max_channels must be at least 1".into());
        }
        if !self.control_size.is_multiple_of(CHANNEL_ALIGN) {
            return bad(format!("control_size {} is not page aligned", self.control_size));
        }
        let need = table_size(self.max_channels);
        if self.control_size < need {
            return bad(format!(
                "control_size {} cannot hold {} channel entries ({need} bytes)",
                self.control_size, self.max_channels
            ));
        }
        if !self.host_channel_size.is_multiple_of(CHANNEL_ALIGN) || self.host_channel_size <= 2 * RING_HEADER_SIZE {
            return bad(format!("host_channel_size {} unusable", self.host_channel_size));
        }
        if self.host_channel_size + self.control_size > self.total_size {
            return bad("host channel and control section exceed total_size".into());
        }
        if self.default_channel_size <= 2 * RING_HEADER_SIZE {
            return bad(format!("default_channel_size {} too small for ring headers", self.default_channel_size));
        }
        Ok(())
    }

    pub fn data_size(&self) -> usize {
        self.total_size - self.control_size
    }
}

/// Proof of broker authority over a region: the nonzero value it stamps into
/// the lock word and every channel entry it writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BrokerToken(u32);

impl BrokerToken {
    fn generate() -> Self {
        Self(rand::thread_rng().gen_range(1..=u32::MAX))
    }

    pub fn value(self) -> u32 {
        self.0
    }
}

/// What a new channel entry should look like.
#[derive(Debug)]
pub struct ChannelRequest {
    pub state: RequestedState,
    pub server: Identity,
    pub client: Identity,
    pub session_id: u64,
}

#[derive(Debug)]
pub enum RequestedState {
    Temp,
    /// Service channels may only be created by a completed handshake.
    Authorized(AuthorizationWitness),
}

#[derive(Clone)]
pub struct Region {
    inner: Arc<Inner>,
}

struct Inner {
    mem: SharedMem,
    path: PathBuf,
    control_size: usize,
    max_channels: u32,
    token: Option<BrokerToken>,
}

impl std::fmt::Debug for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Region")
            .field("path", &self.inner.path)
            .field("max_channels", &self.inner.max_channels)
            .field("broker", &self.inner.token.is_some())
            .finish()
    }
}

/// Held while the control lock is owned; releases it on drop.
pub struct ControlGuard<'a> {
    region: &'a Region,
    token: u32,
}

impl ControlGuard<'_> {
    pub fn unlock(self) {}
}

impl Drop for ControlGuard<'_> {
    fn drop(&mut self) {
        let _ = self.region.mem().u32_at(hdr::LOCK).compare_exchange(
            self.token,
            0,
            Ordering::Release,
            Ordering::Relaxed,
        );
    }
}

impl Region {
    /// Creates the backing file and initializes the control section. Channel 0
    /// becomes the host channel at data offset 0.
    pub fn create(config: &RegionConfig, path: impl AsRef<Path>) -> Result<Region> {
        config.validate()?;
        let path = path.as_ref();
        let mem = SharedMem::create(path, config.total_size)?;
        let token = BrokerToken::generate();
        let header = ControlHeader {
            magic: MAGIC,
            version: VERSION,
            flags: FLAG_POLICY_ACTIVE,
            lock_word: 0,
            control_size: config.control_size as u32,
            max_channels: config.max_channels,
            active_channel_count: 1,
            next_free_offset: config.host_channel_size as u64,
        };
        mem.write(0, &header.to_bytes());
        for id in 0..config.max_channels {
            mem.write(entry_offset(id), &ChannelMeta::free(id).to_bytes(0));
        }
        let host = ChannelMeta {
            channel_id: 0,
            state: ChannelState::Established,
            buffer_offset: 0,
            buffer_size: config.host_channel_size as u32,
            writer_token: token.0,
            ..ChannelMeta::free(0)
        };
        mem.write(entry_offset(0), &host.to_bytes(0));
        mem.flush()?;
        Ok(Region {
            inner: Arc::new(Inner {
                mem,
                path: path.to_owned(),
                control_size: config.control_size,
                max_channels: config.max_channels,
                token: Some(token),
            }),
        })
    }

    /// Opens an existing region without broker authority.
    pub fn open(path: impl AsRef<Path>) -> Result<Region> {
        Self::open_with(path.as_ref(), None)
    }

    /// Opens the region named by `SHMGUARD_REGION`.
    pub fn open_from_env() -> Result<Region> {
        let path = std::env::var_os(REGION_ENV)
            .ok_or_else(|| RegionError::InvalidConfig(format!("{REGION_ENV} is not set")))?;
        Self::open(PathBuf::from(path))
    }

    fn open_with(path: &Path, token: Option<BrokerToken>) -> Result<Region> {
        let mem = SharedMem::open(path)?;
        if mem.len() < HEADER_SIZE {
            return Err(RegionError::Corrupt(format!("file of {} bytes has no header", mem.len())));
        }
        let mut raw = [0u8; HEADER_SIZE];
        mem.read(0, &mut raw);
        let header = ControlHeader::from_bytes(&raw);
        if header.magic != MAGIC {
            return Err(RegionError::BadMagic(header.magic));
        }
        if header.version != VERSION {
            return Err(RegionError::VersionMismatch(header.version));
        }
        let control_size = header.control_size as usize;
        if !mem.len().is_power_of_two()
            || !control_size.is_multiple_of(CHANNEL_ALIGN)
            || control_size >= mem.len()
            || table_size(header.max_channels) > control_size
        {
            return Err(RegionError::Corrupt(format!(
                "header {header:?} does not fit a {}-byte file",
                mem.len()
            )));
        }
        Ok(Region {
            inner: Arc::new(Inner {
                mem,
                path: path.to_owned(),
                control_size,
                max_channels: header.max_channels,
                token,
            }),
        })
    }

    /// Re-boots a broker over an existing region after a crash: takes over
    /// the control lock, discards torn entries, closes every channel the dead
    /// broker left live, and repairs the allocator bookkeeping.
    pub fn recover(path: impl AsRef<Path>) -> Result<Region> {
        let region = Self::open_with(path.as_ref(), Some(BrokerToken::generate()))?;
        let token = region.token()?.0;
        let mem = region.mem();
        // The previous owner is gone; its lock cannot be released normally.
        mem.u32_at(hdr::LOCK).store(token, Ordering::SeqCst);
        let data_size = region.data_size() as u64;
        let host_ok = match region.read_entry_raw(0) {
            Some((m, seq)) => {
                seq % 2 == 0
                    && m.state == ChannelState::Established
                    && m.buffer_offset == 0
                    && m.buffer_size > 0
                    && u64::from(m.buffer_size) <= data_size
            }
            None => false,
        };
        if !host_ok {
            mem.u32_at(hdr::LOCK).store(0, Ordering::SeqCst);
            return Err(RegionError::Corrupt("host channel entry damaged".into()));
        }
        let mut kept: Vec<ChannelMeta> = vec![region.read_entry_raw(0).unwrap().0];
        for id in 1..region.max_channels() {
            let entry = region.read_entry_raw(id);
            let valid = entry.filter(|(m, seq)| {
                seq % 2 == 0
                    && m.channel_id == id
                    && m.state != ChannelState::Free
                    && m.buffer_size > 0
                    && m.buffer_end() <= data_size
                    && !kept.iter().any(|k| k.overlaps(m))
            });
            match valid {
                Some((mut m, _)) => {
                    if m.state.is_live() {
                        m.state = ChannelState::Closed;
                        m.server.pid = 0;
                        m.client.pid = 0;
                        mem.zero(region.abs_offset(&m), m.buffer_size as usize);
                    }
                    m.writer_token = token;
                    region.store_entry(&m);
                    kept.push(m);
                }
                None => {
                    if !matches!(entry, Some((m, 0)) if m == ChannelMeta::free(id)) {
                        region.store_entry(&ChannelMeta { writer_token: token, ..ChannelMeta::free(id) });
                    }
                }
            }
        }
        let high_water = kept.iter().map(ChannelMeta::buffer_end).max().unwrap_or(0);
        let next = mem.u64_at(hdr::NEXT_FREE);
        if next.load(Ordering::Relaxed) < high_water {
            next.store(high_water, Ordering::Relaxed);
        }
        mem.u32_at(hdr::ACTIVE).store(1, Ordering::Relaxed);
        mem.u16_at(hdr::FLAGS).fetch_or(FLAG_POLICY_ACTIVE, Ordering::Relaxed);
        mem.u32_at(hdr::LOCK).store(0, Ordering::SeqCst);
        mem.flush()?;
        Ok(region)
    }

    pub(crate) fn mem(&self) -> &SharedMem {
        &self.inner.mem
    }

    pub fn path(&self) -> &Path {
        &self.inner.path
    }

    pub fn is_broker(&self) -> bool {
        self.inner.token.is_some()
    }

    pub fn token(&self) -> Result<BrokerToken> {
        self.inner.token.ok_or(RegionError::NotBroker)
    }

    pub fn max_channels(&self) -> u32 {
        self.inner.max_channels
    }

    pub fn control_size(&self) -> usize {
        self.inner.control_size
    }

    pub fn total_size(&self) -> usize {
        self.inner.mem.len()
    }

    pub fn data_size(&self) -> usize {
        self.total_size() - self.control_size()
    }

    /// Absolute file offset of a channel's buffer.
    pub(crate) fn abs_offset(&self, meta: &ChannelMeta) -> usize {
        self.inner.control_size + meta.buffer_offset as usize
    }

    pub fn header(&self) -> ControlHeader {
        let mem = self.mem();
        ControlHeader {
            magic: mem.u32_at(hdr::MAGIC).load(Ordering::Acquire),
            version: mem.u16_at(hdr::VERSION).load(Ordering::Acquire),
            flags: mem.u16_at(hdr::FLAGS).load(Ordering::Acquire),
            lock_word: mem.u32_at(hdr::LOCK).load(Ordering::Acquire),
            control_size: mem.u32_at(hdr::CONTROL_SIZE).load(Ordering::Acquire),
            max_channels: mem.u32_at(hdr::MAX_CHANNELS).load(Ordering::Acquire),
            active_channel_count: mem.u32_at(hdr::ACTIVE).load(Ordering::Acquire),
            next_free_offset: mem.u64_at(hdr::NEXT_FREE).load(Ordering::Acquire),
        }
    }

    pub fn policy_active(&self) -> bool {
        self.mem().u16_at(hdr::FLAGS).load(Ordering::Acquire) & FLAG_POLICY_ACTIVE != 0
    }

    pub(crate) fn set_policy_active(&self, active: bool) -> Result<()> {
        let _guard = self.control_lock()?;
        let flags = self.mem().u16_at(hdr::FLAGS);
        if active {
            flags.fetch_or(FLAG_POLICY_ACTIVE, Ordering::AcqRel);
        } else {
            flags.fetch_and(!FLAG_POLICY_ACTIVE, Ordering::AcqRel);
            // Views only re-run the full check when their entry's seq moves.
            for id in 0..self.max_channels() {
                let seq = self.mem().u32_at(entry_offset(id) + ent::SEQ);
                let s = seq.load(Ordering::Relaxed);
                seq.store(s.wrapping_add(2) & !1, Ordering::Release);
            }
        }
        Ok(())
    }

    /// Raw copy of the whole control section.
    pub fn control_bytes(&self) -> Vec<u8> {
        self.mem().snapshot(0, self.control_size())
    }

    fn read_entry_raw(&self, id: u32) -> Option<(ChannelMeta, u32)> {
        let mut raw = [0u8; ENTRY_SIZE];
        self.mem().read(entry_offset(id), &mut raw);
        ChannelMeta::from_bytes(&raw)
    }

    /// Consistent snapshot of one channel entry. Readers never block the
    /// broker; a snapshot taken mid-write is retried.
    pub fn channel(&self, channel_id: u32) -> Result<ChannelMeta> {
        self.channel_with_seq(channel_id).map(|(m, _)| m)
    }

    pub(crate) fn channel_with_seq(&self, channel_id: u32) -> Result<(ChannelMeta, u32)> {
        if channel_id >= self.max_channels() {
            return Err(RegionError::BadChannel(channel_id));
        }
        let mem = self.mem();
        let base = entry_offset(channel_id);
        let seq = mem.u32_at(base + ent::SEQ);
        let start = Instant::now();
        let mut spins = 0u32;
        loop {
            let before = seq.load(Ordering::Acquire);
            if before.is_multiple_of(2) {
                let mut raw = [0u8; ENTRY_SIZE];
                for word in (0..ent::SEQ).step_by(4) {
                    let v = mem.u32_at(base + word).load(Ordering::Relaxed);
                    raw[word..word + 4].copy_from_slice(&v.to_le_bytes());
                }
                fence(Ordering::Acquire);
                if seq.load(Ordering::Relaxed) == before {
                    raw[ent::SEQ..].copy_from_slice(&before.to_le_bytes());
                    return match ChannelMeta::from_bytes(&raw) {
                        Some((m, s)) if m.channel_id == channel_id => Ok((m, s)),
                        _ => Err(RegionError::Corrupt(format!("entry {channel_id} undecodable"))),
                    };
                }
            }
            spins += 1;
            if spins > 64 {
                if start.elapsed() > LOCK_TIMEOUT {
                    return Err(RegionError::Corrupt(format!("entry {channel_id} stuck mid-write")));
                }
                std::thread::yield_now();
            } else {
                std::hint::spin_loop();
            }
        }
    }

    pub fn channels(&self) -> Result<Vec<ChannelMeta>> {
        (0..self.max_channels()).map(|id| self.channel(id)).collect()
    }

    /// Writes an entry with seqlock framing. Caller holds the control lock.
    fn store_entry(&self, meta: &ChannelMeta) {
        let mem = self.mem();
        let base = entry_offset(meta.channel_id);
        let seq = mem.u32_at(base + ent::SEQ);
        let s = seq.load(Ordering::Relaxed);
        let s = if s % 2 == 1 { s.wrapping_add(1) } else { s };
        seq.store(s.wrapping_add(1), Ordering::Relaxed);
        fence(Ordering::Release);
        let bytes = meta.to_bytes(0);
        for word in (0..ent::SEQ).step_by(4) {
            let v = u32::from_le_bytes(bytes[word..word + 4].try_into().unwrap());
            mem.u32_at(base + word).store(v, Ordering::Relaxed);
        }
        seq.store(s.wrapping_add(2), Ordering::Release);
    }

    /// Takes the cross-process control lock, spinning then sleeping, for at
    /// most [`LOCK_TIMEOUT`].
    pub fn control_lock(&self) -> Result<ControlGuard<'_>> {
        let token = self.token()?.0;
        let word = self.mem().u32_at(hdr::LOCK);
        let start = Instant::now();
        let mut attempt = 0u32;
        loop {
            if word
                .compare_exchange_weak(0, token, Ordering::Acquire, Ordering::Relaxed)
                .is_ok()
            {
                return Ok(ControlGuard { region: self, token });
            }
            attempt += 1;
            if attempt < 64 {
                std::hint::spin_loop();
            } else if attempt < 256 {
                std::thread::yield_now();
            } else {
                if start.elapsed() >= LOCK_TIMEOUT {
                    return Err(RegionError::LockTimeout(LOCK_TIMEOUT));
                }
                std::thread::sleep(Duration::from_micros(50));
            }
        }
    }

    /// Carves a channel out of the data section and publishes its entry.
    ///
    /// A CLOSED slot whose extent has exactly the aligned size is recycled
    /// in place; otherwise a FREE slot gets a fresh extent from the bump
    /// pointer. Extents never move or merge once carved.
    pub fn allocate_channel(&self, request: ChannelRequest, size: usize) -> Result<u32> {
        let token = self.token()?.0;
        if size == 0 || size > self.data_size() {
            return Err(RegionError::RegionExhausted { requested: size, available: self.data_size() });
        }
        let aligned = align_up(size, CHANNEL_ALIGN);
        let state = match &request.state {
            RequestedState::Temp => {
                if request.server.is_empty() && request.client.is_empty() {
                    return Err(RegionError::InvalidConfig("temp channel without an endpoint".into()));
                }
                ChannelState::Temp
            }
            RequestedState::Authorized(_) => {
                if !endpoints_complete(&request.server, &request.client) {
                    return Err(RegionError::InvalidConfig("authorized channel needs both endpoints".into()));
                }
                ChannelState::Authorized
            }
        };

        let _guard = self.control_lock()?;
        let mut recycled = None;
        let mut free = None;
        for id in 1..self.max_channels() {
            let meta = self.channel(id)?;
            match meta.state {
                ChannelState::Closed if meta.buffer_size as usize == aligned && recycled.is_none() => {
                    recycled = Some(meta)
                }
                ChannelState::Free if free.is_none() => free = Some(id),
                _ => {}
            }
        }
        let mem = self.mem();
        let next_free = mem.u64_at(hdr::NEXT_FREE);
        let (channel_id, offset) = match (recycled, free) {
            (Some(old), _) => (old.channel_id, old.buffer_offset),
            (None, None) => return Err(RegionError::NoFreeSlot),
            (None, Some(id)) => {
                let next = next_free.load(Ordering::Relaxed) as usize;
                let available = self.data_size().saturating_sub(next);
                if aligned > available {
                    return Err(RegionError::RegionExhausted { requested: aligned, available });
                }
                (id, next as u32)
            }
        };
        let meta = ChannelMeta {
            channel_id,
            state,
            server: request.server,
            client: request.client,
            buffer_offset: offset,
            buffer_size: aligned as u32,
            session_id: request.session_id,
            writer_token: token,
        };
        self.store_entry(&meta);
        if recycled.is_none() {
            next_free.store(offset as u64 + aligned as u64, Ordering::Release);
        }
        mem.u32_at(hdr::ACTIVE).fetch_add(1, Ordering::AcqRel);
        Ok(channel_id)
    }

    /// Closes a live channel: PIDs are cleared and its buffer zeroed. The
    /// extent stays with the slot.
    pub fn release_channel(&self, channel_id: u32) -> Result<()> {
        let token = self.token()?.0;
        if channel_id == 0 {
            return Err(RegionError::BadChannel(0));
        }
        let _guard = self.control_lock()?;
        let mut meta = self.channel(channel_id)?;
        if !meta.state.is_live() {
            return Err(RegionError::BadChannel(channel_id));
        }
        meta.state = ChannelState::Closed;
        meta.server.pid = 0;
        meta.client.pid = 0;
        meta.writer_token = token;
        self.store_entry(&meta);
        self.mem().zero(self.abs_offset(&meta), meta.buffer_size as usize);
        self.mem().u32_at(hdr::ACTIVE).fetch_sub(1, Ordering::AcqRel);
        Ok(())
    }

    /// Applies `update` to a non-host entry under the control lock.
    pub(crate) fn update_channel(
        &self,
        channel_id: u32,
        update: impl FnOnce(&mut ChannelMeta) -> Result<()>,
    ) -> Result<ChannelMeta> {
        let token = self.token()?.0;
        if channel_id == 0 {
            return Err(RegionError::BadChannel(0));
        }
        let _guard = self.control_lock()?;
        let mut meta = self.channel(channel_id)?;
        let before = meta;
        update(&mut meta)?;
        if meta.channel_id != before.channel_id
            || meta.buffer_offset != before.buffer_offset
            || meta.buffer_size != before.buffer_size
        {
            return Err(RegionError::Corrupt("channel extent cannot change".into()));
        }
        if meta.state == ChannelState::Established && !endpoints_complete(&meta.server, &meta.client) {
            return Err(RegionError::InvalidConfig("established channel needs both endpoints".into()));
        }
        meta.writer_token = token;
        self.store_entry(&meta);
        Ok(meta)
    }

    /// Audits every structural invariant of the control section.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let h = self.header();
        if h.magic != MAGIC || h.version != VERSION {
            return Err(format!("bad header {h:?}"));
        }
        if h.active_channel_count > h.max_channels {
            return Err(format!("active {} > max {}", h.active_channel_count, h.max_channels));
        }
        let channels = self.channels().map_err(|e| e.to_string())?;
        let host = &channels[0];
        if host.state != ChannelState::Established || host.buffer_offset != 0 || host.buffer_size == 0 {
            return Err(format!("host channel damaged: {host:?}"));
        }
        let data_size = self.data_size() as u64;
        let mut owned: Vec<&ChannelMeta> = Vec::new();
        let mut live = 0;
        for m in &channels {
            if m.state == ChannelState::Free {
                continue;
            }
            if m.state.is_live() || m.channel_id == 0 {
                live += 1;
            }
            if m.buffer_end() > data_size || m.buffer_end() > h.next_free_offset {
                return Err(format!("channel {} extent beyond allocator: {m:?}", m.channel_id));
            }
            if let Some(o) = owned.iter().find(|o| o.overlaps(m)) {
                return Err(format!("channels {} and {} overlap", o.channel_id, m.channel_id));
            }
            if m.channel_id != 0
                && m.state == ChannelState::Established
                && !endpoints_complete(&m.server, &m.client)
            {
                return Err(format!("channel {} established without both endpoints", m.channel_id));
            }
            owned.push(m);
        }
        if live != h.active_channel_count {
            return Err(format!("active count {} but {live} live channels", h.active_channel_count));
        }
        Ok(())
    }
}

fn endpoints_complete(server: &Identity, client: &Identity) -> bool {
    server.service_id != 0 && client.service_id != 0 && server.pid != 0 && client.pid != 0
}
