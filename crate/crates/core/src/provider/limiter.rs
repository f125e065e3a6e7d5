//! Per-model admission control.
//!
//! Two independent throttles compose here: a semaphore capping in-flight
//! requests, and a minimum spacing between request starts. Both are
//! per-model — one saturated vendor must not stall requests to another.

use std::sync::Arc;
use std::time::Duration;

use tokio::sync::{OwnedSemaphorePermit, Semaphore};
use tokio::time::Instant;

use super::RateLimit;

pub struct ModelLimiter {
    semaphore: Arc<Semaphore>,
    min_interval: Duration,
    /// Earliest instant the next request may start.
    next_slot: tokio::sync::Mutex<Instant>,
}

impl ModelLimiter {
    pub fn new(rate: &RateLimit) -> Self {
        ModelLimiter {
            semaphore: Arc::new(Semaphore::new(rate.max_in_flight.max(1))),
            min_interval: Duration::from_millis(rate.min_interval_ms),
            next_slot: tokio::sync::Mutex::new(Instant::now()),
        }
    }

    /// Wait for a slot. The returned permit must be held for the duration
    /// of the request; dropping it frees the slot.
    pub async fn admit(&self) -> OwnedSemaphorePermit {
        let permit = self
            .semaphore
            .clone()
            .acquire_owned()
            .await
            .expect("limiter semaphore never closed");
        if !self.min_interval.is_zero() {
            // Claim the next start slot, then sleep until it arrives.
            // Claiming under the lock keeps concurrent waiters spaced at
            // full intervals instead of all waking at once.
            let wake_at = {
                let mut slot = self.next_slot.lock().await;
                let at = (*slot).max(Instant::now());
                *slot = at + self.min_interval;
                at
            };
            tokio::time::sleep_until(wake_at).await;
        }
        permit
    }
}
