//! Deadlock detection and recovery at the sender: flit counter, blocking
//! counter, timeout, path release, randomized retransmission.
//!
//! Each source tracks how many flits of the current attempt it has injected
//! and how long injection has been blocked. Once the injected count reaches
//! the path's total buffering the header must already have been consumed, so
//! no deadlock involving this message is possible and the timeout is
//! suppressed. Below that threshold, a blocking count exceeding the timeout
//! declares a deadlock; the sender then releases the reserved path one hop
//! per cycle and re-injects the whole message after a random backoff.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SenderStatus {
    Idle,
    Injecting,
    Blocked,
    Deadlocked,
    Releasing,
    BackingOff,
}

/// Per-source injection state for the current attempt.
#[derive(Debug, Clone, Copy)]
pub struct SenderState {
    /// Flits injected this attempt (F).
    pub injected: u32,
    /// Consecutive cycles injection failed (C); resets on any progress.
    pub blocked_cycles: u32,
    /// Timeout threshold in cycles (T).
    pub timeout: u32,
    /// Minimum injection for the delivery guarantee (F_path).
    pub guarantee: u32,
    /// Transmitted length, max(data size, F_path).
    pub total_len: u32,
    pub status: SenderStatus,
    pub backoff_until: u64,
    /// The attempt's next-hop output channel died; the delivery guarantee's
    /// premise is void, so the timeout applies regardless of progress.
    pub path_dead: bool,
}

impl SenderState {
    pub fn idle(timeout: u32) -> SenderState {
        SenderState {
            injected: 0,
            blocked_cycles: 0,
            timeout,
            guarantee: 0,
            total_len: 0,
            status: SenderStatus::Idle,
            backoff_until: 0,
            path_dead: false,
        }
    }

    /// Reset counters for a fresh attempt of `total_len` flits.
    pub fn start_attempt(&mut self, guarantee: u32, total_len: u32) {
        self.injected = 0;
        self.blocked_cycles = 0;
        self.guarantee = guarantee;
        self.total_len = total_len;
        self.status = SenderStatus::Injecting;
        self.path_dead = false;
    }
}

/// Counter update after one injection attempt. Exactly one of the counters
/// advances; a successful injection resets the blocking counter. Deadlock is
/// declared when the blocking counter strictly exceeds the timeout while the
/// guarantee has not been reached (or the reserved path died under a fault).
pub fn sender_step(mut s: SenderState, injected: bool, _now: u64) -> SenderState {
    debug_assert!(matches!(s.status, SenderStatus::Injecting | SenderStatus::Blocked));
    if injected {
        s.injected += 1;
        s.blocked_cycles = 0;
        if s.injected == s.total_len {
            s.status = SenderStatus::Idle;
        } else {
            s.status = SenderStatus::Injecting;
        }
    } else {
        s.blocked_cycles += 1;
        if s.blocked_cycles > s.timeout && (s.injected < s.guarantee || s.path_dead) {
            s.status = SenderStatus::Deadlocked;
        } else {
            s.status = SenderStatus::Blocked;
        }
    }
    s
}

/// Uniform random backoff before re-injection.
pub fn schedule_retry<R: Rng>(rng: &mut R, backoff: (u32, u32), now: u64) -> u64 {
    now + rng.random_range(backoff.0..=backoff.1) as u64
}
