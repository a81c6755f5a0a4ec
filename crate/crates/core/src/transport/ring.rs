//! Byte-stream SPSC ring with length-prefixed frames.
//!
//! ```text
//! ring header (128 bytes, two cache lines)
//!   0  u64 capacity            data bytes, power of two
//!   8  u64 head                bytes ever published (producer)
//!  16  u32 doorbell_seq        futex word, bumped to signal data
//!  20  u32 producer_state      1 = blocked waiting for space
//!  24  u64 doorbell_signals    data doorbells issued
//!  32  u32 closed              nonzero once either end closed
//!  36  u32 producer_lock       owner of a shared producer end
//!  64  u64 tail                bytes ever consumed (consumer)
//!  72  u32 free_doorbell_seq   futex word, bumped to signal space
//!  76  u32 consumer_state      1 = blocked waiting for data
//!  80  u64 free_signals        space doorbells issued
//! data follows at 128
//! ```
//!
//! A record is a u32 length followed by the payload, padded to 4 bytes.
//! Records never straddle the end of the data area; a length of
//! `0xFFFFFFFF` tells the consumer to skip to offset 0.

use std::sync::atomic::{fence, AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::gate::{AccessKind, Denied, MappedBuffer};
use crate::transport::doorbell::{self, WaitOutcome};

pub const RING_HEADER_SIZE: usize = 128;
pub const PAD_MARKER: u32 = u32::MAX;
pub const DEFAULT_WINDOW: Duration = Duration::from_micros(100);

const WAITING: u32 = 1;
const RUNNING: u32 = 0;
const LOCK_SPINS: u32 = 10_000;
/// Longest single futex sleep; bounds how long a missed close goes unnoticed.
const MAX_SLEEP: Duration = Duration::from_millis(100);

mod off {
    pub const CAPACITY: usize = 0;
    pub const HEAD: usize = 8;
    pub const DOORBELL_SEQ: usize = 16;
    pub const PRODUCER_STATE: usize = 20;
    pub const DOORBELL_SIGNALS: usize = 24;
    pub const CLOSED: usize = 32;
    pub const PRODUCER_LOCK: usize = 36;
    pub const TAIL: usize = 64;
    pub const FREE_DOORBELL_SEQ: usize = 72;
    pub const CONSUMER_STATE: usize = 76;
    pub const FREE_SIGNALS: usize = 80;
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TransportError {
    #[error("frame of {len} bytes exceeds the {max}-byte limit")]
    FrameTooLarge { len: usize, max: usize },
    #[error("timed out")]
    Timeout,
    #[error("channel closed")]
    ChannelClosed,
    #[error("permission denied: {0}")]
    PermissionDenied(#[from] Denied),
    #[error("ring not initialized")]
    NotInitialized,
    #[error("ring corrupt: {0}")]
    Corrupt(String),
}

/// Where a ring sits inside a channel buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RingLayout {
    pub header: usize,
    pub capacity: usize,
}

impl RingLayout {
    /// Largest power-of-two ring whose header and data fit in `span` bytes
    /// starting at `header`.
    pub fn fit(header: usize, span: usize) -> Option<Self> {
        let room = span.checked_sub(RING_HEADER_SIZE)?;
        if room < 64 {
            return None;
        }
        let capacity = 1usize << (usize::BITS - 1 - room.leading_zeros());
        Some(Self { header, capacity })
    }

    fn data(&self) -> usize {
        self.header + RING_HEADER_SIZE
    }

    pub fn end(&self) -> usize {
        self.data() + self.capacity
    }

    /// Largest payload one frame may carry.
    pub fn max_frame(&self) -> usize {
        self.capacity / 2 - 4
    }
}

/// Notification behaviour of a ring end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RingOptions {
    /// How long a waiting end busy-polls before arming its doorbell.
    pub window: Duration,
    /// Signal on every frame, whether or not the peer sleeps.
    pub always_signal: bool,
    /// Allow at most one frame in flight (a plain mailbox).
    pub single_slot: bool,
}

impl Default for RingOptions {
    fn default() -> Self {
        Self { window: DEFAULT_WINDOW, always_signal: false, single_slot: false }
    }
}

impl RingOptions {
    pub fn with_window(window: Duration) -> Self {
        Self { window, ..Self::default() }
    }

    /// One frame per doorbell, blocking wait on every message.
    pub fn naive() -> Self {
        Self { window: Duration::ZERO, always_signal: true, single_slot: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Woke {
    Data,
    Doorbell,
    Timeout,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RingCounters {
    pub head: u64,
    pub tail: u64,
    pub doorbell_signals: u64,
    pub free_signals: u64,
}

/// Writes a fresh header. Only the channel's allocator does this, before
/// any endpoint attaches.
pub fn init_ring(view: &MappedBuffer, layout: RingLayout) {
    assert!(layout.capacity.is_power_of_two() && layout.end() <= view.len());
    view.copy_in(layout.header, &[0u8; RING_HEADER_SIZE]);
    view.word64(layout.header + off::CAPACITY).store(layout.capacity as u64, Ordering::Release);
}

struct Ring {
    view: Arc<MappedBuffer>,
    layout: RingLayout,
    mask: u64,
    opts: RingOptions,
}

impl Ring {
    fn attach(view: Arc<MappedBuffer>, layout: RingLayout, opts: RingOptions) -> Result<Self, TransportError> {
        if layout.end() > view.len() || !layout.capacity.is_power_of_two() {
            return Err(TransportError::Corrupt(format!("{layout:?} does not fit {} bytes", view.len())));
        }
        view.authorize(AccessKind::Read, layout.header, RING_HEADER_SIZE)?;
        let cap = view.word64(layout.header + off::CAPACITY).load(Ordering::Acquire);
        if cap == 0 {
            return Err(TransportError::NotInitialized);
        }
        if cap != layout.capacity as u64 {
            return Err(TransportError::Corrupt(format!("capacity {cap}, expected {}", layout.capacity)));
        }
        Ok(Self { view, layout, mask: cap - 1, opts })
    }

    #[inline]
    fn w32(&self, field: usize) -> &AtomicU32 {
        self.view.word32(self.layout.header + field)
    }

    #[inline]
    fn w64(&self, field: usize) -> &AtomicU64 {
        self.view.word64(self.layout.header + field)
    }

    fn closed(&self) -> bool {
        self.w32(off::CLOSED).load(Ordering::Acquire) != 0
    }

    fn close(&self) {
        // A view kept past the channel's release must not flag whatever
        // occupies the buffer now.
        if self.view.authorize(AccessKind::Write, self.layout.header, RING_HEADER_SIZE).is_err() {
            return;
        }
        self.w32(off::CLOSED).store(1, Ordering::Release);
        doorbell::ring(self.w32(off::DOORBELL_SEQ));
        doorbell::ring(self.w32(off::FREE_DOORBELL_SEQ));
    }

    fn counters(&self) -> RingCounters {
        RingCounters {
            head: self.w64(off::HEAD).load(Ordering::Acquire),
            tail: self.w64(off::TAIL).load(Ordering::Acquire),
            doorbell_signals: self.w64(off::DOORBELL_SIGNALS).load(Ordering::Acquire),
            free_signals: self.w64(off::FREE_SIGNALS).load(Ordering::Acquire),
        }
    }

    /// Busy-polls `ready` for up to `window`, yielding the CPU between
    /// short spin bursts.
    fn poll(&self, window: Duration, deadline: Instant, ready: impl Fn() -> bool) -> bool {
        if ready() {
            return true;
        }
        if window.is_zero() {
            return false;
        }
        let start = Instant::now();
        let mut i = 0u32;
        loop {
            if ready() {
                return true;
            }
            i = i.wrapping_add(1);
            if i.is_multiple_of(32) {
                let now = Instant::now();
                if now.duration_since(start) >= window || now >= deadline {
                    return ready();
                }
                std::thread::yield_now();
            } else {
                std::hint::spin_loop();
            }
        }
    }

    /// Polls for the window, then sleeps on `seq_field` with `state_field`
    /// advertising the sleep, re-checking `ready` after arming so a signal
    /// racing the sleep is never lost.
    fn wait(&self, seq_field: usize, state_field: usize, deadline: Instant, ready: impl Fn() -> bool) -> Woke {
        let mut woke = false;
        loop {
            if self.poll(self.opts.window, deadline, &ready) {
                return if woke { Woke::Doorbell } else { Woke::Data };
            }
            let seq = self.w32(seq_field).load(Ordering::Acquire);
            self.w32(state_field).store(WAITING, Ordering::SeqCst);
            fence(Ordering::SeqCst);
            if ready() || self.closed() {
                self.w32(state_field).store(RUNNING, Ordering::SeqCst);
                return if woke { Woke::Doorbell } else { Woke::Data };
            }
            let now = Instant::now();
            if now >= deadline {
                self.w32(state_field).store(RUNNING, Ordering::SeqCst);
                return Woke::Timeout;
            }
            let outcome = doorbell::wait(self.w32(seq_field), seq, (deadline - now).min(MAX_SLEEP));
            self.w32(state_field).store(RUNNING, Ordering::SeqCst);
            if outcome != WaitOutcome::TimedOut {
                woke = true;
            }
            if self.closed() {
                return Woke::Data;
            }
        }
    }

    /// Signals the sleeper advertised by `state_field`, or everyone when the
    /// options ask for unconditional signalling.
    /// The first signal after a sleeper arms claims it, so a burst of
    /// publishes before the sleeper runs again costs one wake.
    fn signal(&self, seq_field: usize, state_field: usize, counter: usize, force: bool) {
        fence(Ordering::SeqCst);
        let claimed = || {
            self.w32(state_field)
                .compare_exchange(WAITING, RUNNING, Ordering::SeqCst, Ordering::SeqCst)
                .is_ok()
        };
        if force || claimed() {
            self.w64(counter).fetch_add(1, Ordering::Relaxed);
            doorbell::ring(self.w32(seq_field));
        }
    }
}

/// Producer end. Exactly one thread may own it, unless attached with
/// [`Producer::attach_shared`], in which case sends serialize on a lock
/// word in the ring header.
pub struct Producer {
    ring: Ring,
    shared: bool,
}

impl Producer {
    pub fn attach(view: Arc<MappedBuffer>, layout: RingLayout, opts: RingOptions) -> Result<Self, TransportError> {
        Ok(Self { ring: Ring::attach(view, layout, opts)?, shared: false })
    }

    /// Attaches an end that several processes may send through.
    pub fn attach_shared(view: Arc<MappedBuffer>, layout: RingLayout, opts: RingOptions) -> Result<Self, TransportError> {
        Ok(Self { ring: Ring::attach(view, layout, opts)?, shared: true })
    }

    pub fn max_frame(&self) -> usize {
        self.ring.layout.max_frame()
    }

    pub fn counters(&self) -> RingCounters {
        self.ring.counters()
    }

    pub fn close(&self) {
        self.ring.close()
    }

    pub fn is_closed(&self) -> bool {
        self.ring.closed()
    }

    /// Free bytes past `head`. A tail outside `[head - cap, head]` means the
    /// buffer was rewritten under us, and reads as full.
    fn free(&self, head: u64) -> u64 {
        let tail = self.ring.w64(off::TAIL).load(Ordering::Acquire);
        (self.ring.layout.capacity as u64).saturating_sub(head.wrapping_sub(tail))
    }

    /// Blocks until at least `need` bytes are free past `head`.
    fn reserve(&self, head: u64, need: u64, deadline: Instant) -> Result<(), TransportError> {
        let cap = self.ring.layout.capacity as u64;
        let need = if self.ring.opts.single_slot { cap } else { need };
        loop {
            if self.ring.closed() {
                return Err(TransportError::ChannelClosed);
            }
            if self.free(head) >= need {
                return Ok(());
            }
            let woke = self.ring.wait(off::FREE_DOORBELL_SEQ, off::PRODUCER_STATE, deadline, || {
                self.free(head) >= need
            });
            if woke == Woke::Timeout {
                return Err(TransportError::Timeout);
            }
            let layout = self.ring.layout;
            self.ring.view.authorize(AccessKind::Write, layout.header, layout.end() - layout.header)?;
        }
    }

    /// Blocks until the consumer has taken every published frame.
    pub fn drain(&self, deadline: Instant) -> Result<(), TransportError> {
        let head = self.ring.w64(off::HEAD).load(Ordering::Acquire);
        self.reserve(head, self.ring.layout.capacity as u64, deadline)
    }

    fn publish(&self, head: u64) {
        self.ring.w64(off::HEAD).store(head, Ordering::Release);
        self.ring.signal(
            off::DOORBELL_SEQ,
            off::CONSUMER_STATE,
            off::DOORBELL_SIGNALS,
            self.ring.opts.always_signal,
        );
    }

    /// Appends one frame. Payload bytes are visible to the consumer before
    /// the head that covers them.
    pub fn send(&mut self, payload: &[u8], deadline: Instant) -> Result<(), TransportError> {
        let max = self.max_frame();
        if payload.len() > max {
            return Err(TransportError::FrameTooLarge { len: payload.len(), max });
        }
        let layout = self.ring.layout;
        self.ring.view.authorize(AccessKind::Write, layout.header, layout.end() - layout.header)?;
        if self.shared {
            self.lock(deadline)?;
            let result = self.send_locked(payload, deadline);
            self.ring.w32(off::PRODUCER_LOCK).store(0, Ordering::Release);
            result
        } else {
            self.send_locked(payload, deadline)
        }
    }

    fn send_locked(&self, payload: &[u8], deadline: Instant) -> Result<(), TransportError> {
        let layout = self.ring.layout;
        let cap = layout.capacity as u64;
        let record = 4 + payload.len().next_multiple_of(4) as u64;
        let mut head = self.ring.w64(off::HEAD).load(Ordering::Acquire);
        let contiguous = cap - (head & self.ring.mask);
        if record > contiguous {
            // Pad and frame go out behind one head update. Records are at
            // most half the capacity, so both always fit.
            self.reserve(head, contiguous + record, deadline)?;
            let pos = (head & self.ring.mask) as usize;
            self.ring.view.word32(layout.data() + pos).store(PAD_MARKER, Ordering::Relaxed);
            head += contiguous;
        } else {
            self.reserve(head, record, deadline)?;
        }
        let pos = layout.data() + (head & self.ring.mask) as usize;
        self.ring.view.word32(pos).store(payload.len() as u32, Ordering::Relaxed);
        self.ring.view.copy_in(pos + 4, payload);
        head += record;
        self.publish(head);
        Ok(())
    }

    fn lock(&self, deadline: Instant) -> Result<(), TransportError> {
        let word = self.ring.w32(off::PRODUCER_LOCK);
        let me = std::process::id().max(1);
        let mut spins = 0u32;
        loop {
            if word.compare_exchange_weak(0, me, Ordering::Acquire, Ordering::Relaxed).is_ok() {
                return Ok(());
            }
            spins += 1;
            if spins.is_multiple_of(LOCK_SPINS) && Instant::now() >= deadline {
                return Err(TransportError::Timeout);
            }
            std::thread::yield_now();
        }
    }
}

/// Consumer end. Exactly one thread may own it.
pub struct Consumer {
    ring: Ring,
}

impl Consumer {
    pub fn attach(view: Arc<MappedBuffer>, layout: RingLayout, opts: RingOptions) -> Result<Self, TransportError> {
        Ok(Self { ring: Ring::attach(view, layout, opts)? })
    }

    pub fn counters(&self) -> RingCounters {
        self.ring.counters()
    }

    pub fn close(&self) {
        self.ring.close()
    }

    pub fn is_closed(&self) -> bool {
        self.ring.closed()
    }

    fn pending(&self) -> bool {
        let head = self.ring.w64(off::HEAD).load(Ordering::Acquire);
        head != self.ring.w64(off::TAIL).load(Ordering::Relaxed)
    }

    /// Waits for data: busy-polls for the anticipation window, then sleeps
    /// on the doorbell, then polls again after each wake.
    pub fn wait_doorbell(&self, deadline: Instant) -> Woke {
        self.ring.wait(off::DOORBELL_SEQ, off::CONSUMER_STATE, deadline, || self.pending())
    }

    /// Removes the next frame, appending its payload to `out`.
    pub fn receive_into(&mut self, out: &mut Vec<u8>, deadline: Instant) -> Result<usize, TransportError> {
        let layout = self.ring.layout;
        self.ring.view.authorize(AccessKind::Read, layout.header, layout.end() - layout.header)?;
        let cap = layout.capacity as u64;
        let mut tail = self.ring.w64(off::TAIL).load(Ordering::Relaxed);
        let mut head = self.ring.w64(off::HEAD).load(Ordering::Acquire);
        loop {
            if head == tail {
                if self.ring.closed() {
                    return Err(TransportError::ChannelClosed);
                }
                if self.wait_doorbell(deadline) == Woke::Timeout {
                    return Err(TransportError::Timeout);
                }
                self.ring.view.authorize(AccessKind::Read, layout.header, layout.end() - layout.header)?;
                head = self.ring.w64(off::HEAD).load(Ordering::Acquire);
                continue;
            }
            if head.wrapping_sub(tail) > cap {
                return Err(TransportError::Corrupt(format!("head {head} tail {tail}")));
            }
            let pos = (tail & self.ring.mask) as usize;
            let len = self.ring.view.word32(layout.data() + pos).load(Ordering::Relaxed);
            if len == PAD_MARKER {
                tail += cap - pos as u64;
                self.ring.w64(off::TAIL).store(tail, Ordering::Release);
                continue;
            }
            let len = len as usize;
            let record = 4 + len.next_multiple_of(4) as u64;
            if len > layout.max_frame() || record > head - tail || pos as u64 + record > cap {
                return Err(TransportError::Corrupt(format!("record of {len} bytes at {pos}")));
            }
            let start = out.len();
            out.resize(start + len, 0);
            self.ring.view.copy_out(layout.data() + pos + 4, &mut out[start..]);
            tail += record;
            self.ring.w64(off::TAIL).store(tail, Ordering::Release);
            self.ring.signal(
                off::FREE_DOORBELL_SEQ,
                off::PRODUCER_STATE,
                off::FREE_SIGNALS,
                self.ring.opts.always_signal,
            );
            return Ok(len);
        }
    }

    pub fn receive(&mut self, deadline: Instant) -> Result<Vec<u8>, TransportError> {
        let mut out = Vec::new();
        self.receive_into(&mut out, deadline)?;
        Ok(out)
    }

    /// Non-blocking receive.
    pub fn try_receive(&mut self) -> Result<Option<Vec<u8>>, TransportError> {
        if !self.pending() {
            return if self.ring.closed() { Err(TransportError::ChannelClosed) } else { Ok(None) };
        }
        let mut out = Vec::new();
        match self.receive_into(&mut out, Instant::now()) {
            Ok(_) => Ok(Some(out)),
            Err(TransportError::Timeout) => Ok(None),
            Err(e) => Err(e),
        }
    }
}
