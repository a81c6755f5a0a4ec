//! Cross-process wait/wake on a 32-bit word inside the shared mapping.
//!
//! The word is a sequence counter: a signaller bumps it and wakes, a waiter
//! sleeps only while the counter still holds the value it sampled. Wakes may
//! be spurious; callers re-check their condition.

use std::sync::atomic::{AtomicU32, Ordering};
use std::time::Duration;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WaitOutcome {
    Woken,
    TimedOut,
    /// The word no longer held the sampled value.
    Changed,
}

/// Sleeps while `*word == expected`, for at most `timeout`.
pub fn wait(word: &AtomicU32, expected: u32, timeout: Duration) -> WaitOutcome {
    if word.load(Ordering::Acquire) != expected {
        return WaitOutcome::Changed;
    }
    let ts = libc::timespec {
        tv_sec: timeout.as_secs().min(i64::MAX as u64) as libc::time_t,
        tv_nsec: timeout.subsec_nanos() as libc::c_long,
    };
    // Non-private futex: the word lives in a MAP_SHARED file mapping that
    // other processes wait on too.
    let rc = unsafe {
        libc::syscall(
            libc::SYS_futex,
            word.as_ptr(),
            libc::FUTEX_WAIT,
            expected,
            &ts as *const libc::timespec,
            std::ptr::null::<u32>(),
            0u32,
        )
    };
    if rc == 0 {
        return WaitOutcome::Woken;
    }
    match std::io::Error::last_os_error().raw_os_error() {
        Some(libc::ETIMEDOUT) => WaitOutcome::TimedOut,
        Some(libc::EAGAIN) => WaitOutcome::Changed,
        _ => WaitOutcome::Woken,
    }
}

/// Wakes every waiter on `word`. Returns how many were woken.
pub fn wake_all(word: &AtomicU32) -> usize {
    let rc = unsafe {
        libc::syscall(
            libc::SYS_futex,
            word.as_ptr(),
            libc::FUTEX_WAKE,
            i32::MAX,
            std::ptr::null::<libc::timespec>(),
            std::ptr::null::<u32>(),
            0u32,
        )
    };
    rc.max(0) as usize
}

/// Bumps the counter and wakes its waiters.
pub fn ring(word: &AtomicU32) {
    word.fetch_add(1, Ordering::AcqRel);
    wake_all(word);
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use std::time::Instant;

    #[test]
    fn stale_expectation_returns_immediately() {
        let w = AtomicU32::new(3);
        assert_eq!(wait(&w, 2, Duration::from_secs(5)), WaitOutcome::Changed);
    }

    #[test]
    fn times_out() {
        let w = AtomicU32::new(0);
        let start = Instant::now();
        assert_eq!(wait(&w, 0, Duration::from_millis(20)), WaitOutcome::TimedOut);
        assert!(start.elapsed() >= Duration::from_millis(15));
    }

    #[test]
    fn ring_wakes_sleeper() {
        let w = Arc::new(AtomicU32::new(0));
        let w2 = w.clone();
        let t = std::thread::spawn(move || {
            let start = Instant::now();
            while w2.load(Ordering::Acquire) == 0 {
                wait(&w2, 0, Duration::from_secs(5));
            }
            start.elapsed()
        });
        std::thread::sleep(Duration::from_millis(20));
        ring(&w);
        assert!(t.join().unwrap() < Duration::from_secs(4));
    }
}
