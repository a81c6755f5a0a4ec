//! Broker-to-guest notice board in the second half of the host channel.
//!
//! Guests that have sent a hello but own no channel yet cannot be reached
//! through a ring, so the broker posts aborts here and bumps an event word
//! whenever something a waiting guest might care about changes.
//!
//! ```text
//!   0  u32 event_seq      futex word
//!   4  u32 posted         notices ever posted
//!   8  u64 heartbeat_ms   broker wall clock, 0 once shut down
//!  64  slot[SLOTS], 32 bytes each:
//!        0 u32 seq        odd while being written
//!        4 u32 reason
//!        8 u64 session_id
//!       16 u64 posted_ms
//! ```

use std::sync::atomic::{fence, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use crate::gate::{AccessKind, Denied, MappedBuffer};
use crate::transport::doorbell::{self, WaitOutcome};

pub const SLOTS: usize = 512;
const SLOT_SIZE: usize = 32;
const SLOTS_AT: usize = 64;
pub const BOARD_SIZE: usize = SLOTS_AT + SLOTS * SLOT_SIZE;

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

#[derive(Clone)]
pub struct NoticeBoard {
    view: Arc<MappedBuffer>,
    base: usize,
}

impl NoticeBoard {
    pub fn new(view: Arc<MappedBuffer>, base: usize) -> Self {
        assert!(base + BOARD_SIZE <= view.len());
        Self { view, base }
    }

    fn check(&self) -> Result<(), Denied> {
        self.view.authorize(AccessKind::Read, self.base, BOARD_SIZE)
    }

    pub fn event_seq(&self) -> Result<u32, Denied> {
        self.check()?;
        Ok(self.view.word32(self.base).load(Ordering::Acquire))
    }

    /// Sleeps until the event word moves past `seen` or `timeout` passes.
    pub fn wait_event(&self, seen: u32, timeout: Duration) -> Result<(), Denied> {
        self.check()?;
        if doorbell::wait(self.view.word32(self.base), seen, timeout) == WaitOutcome::Changed {
            std::thread::yield_now();
        }
        Ok(())
    }

    pub fn bump(&self) {
        doorbell::ring(self.view.word32(self.base));
    }

    pub fn beat(&self) {
        self.view.word64(self.base + 8).store(now_ms(), Ordering::Release);
    }

    pub fn stop_heartbeat(&self) {
        self.view.word64(self.base + 8).store(0, Ordering::Release);
        self.bump();
    }

    /// Milliseconds since the broker last beat, or `None` if it never did or
    /// has shut down.
    pub fn heartbeat_age(&self) -> Result<Option<u64>, Denied> {
        self.check()?;
        let at = self.view.word64(self.base + 8).load(Ordering::Acquire);
        Ok((at != 0).then(|| now_ms().saturating_sub(at)))
    }

    /// Posts `reason` for `session_id`. Single writer: the broker.
    pub fn post(&self, session_id: u64, reason: u32) {
        let posted = self.view.word32(self.base + 4);
        let n = posted.load(Ordering::Relaxed) as usize;
        let slot = self.base + SLOTS_AT + (n % SLOTS) * SLOT_SIZE;
        let seq = self.view.word32(slot);
        let s = seq.load(Ordering::Relaxed) | 1;
        seq.store(s, Ordering::Relaxed);
        fence(Ordering::Release);
        self.view.word32(slot + 4).store(reason, Ordering::Relaxed);
        self.view.word64(slot + 8).store(session_id, Ordering::Relaxed);
        self.view.word64(slot + 16).store(now_ms(), Ordering::Relaxed);
        seq.store(s.wrapping_add(1), Ordering::Release);
        posted.store(n as u32 + 1, Ordering::Release);
        self.bump();
    }

    /// Latest notice for `session_id`, if any.
    pub fn find(&self, session_id: u64) -> Result<Option<u32>, Denied> {
        self.check()?;
        for i in 0..SLOTS {
            let slot = self.base + SLOTS_AT + i * SLOT_SIZE;
            let seq = self.view.word32(slot);
            loop {
                let before = seq.load(Ordering::Acquire);
                if before % 2 == 1 {
                    std::hint::spin_loop();
                    continue;
                }
                let reason = self.view.word32(slot + 4).load(Ordering::Relaxed);
                let session = self.view.word64(slot + 8).load(Ordering::Relaxed);
                fence(Ordering::Acquire);
                if seq.load(Ordering::Relaxed) != before {
                    continue;
                }
                if before != 0 && session == session_id {
                    return Ok(Some(reason));
                }
                break;
            }
        }
        Ok(None)
    }
}
