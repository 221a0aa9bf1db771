use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Bounded retries with exponential backoff for remote calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    /// Total requests per call, first one included.
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_base_ms: 500,
            max_backoff_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_attempts == 0 {
            return Err(ConfigError::Invalid("retry max_attempts must be >= 1".into()));
        }
        Ok(())
    }

    /// Wait before retry number `retry` (1 = after the first failure).
    /// Doubles each time and saturates at `max_backoff_ms`.
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry.saturating_sub(1)).unwrap_or(u64::MAX);
        Duration::from_millis(self.backoff_base_ms.saturating_mul(factor).min(self.max_backoff_ms))
    }
}

/// Counting semaphore capping in-flight remote requests across workers.
#[derive(Debug)]
pub struct ConcurrencyLimiter {
    capacity: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

impl ConcurrencyLimiter {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Blocks until a slot is free.
    pub fn acquire(&self) -> LimiterPermit<'_> {
        let mut in_flight = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        while *in_flight >= self.capacity {
            in_flight = self.freed.wait(in_flight).unwrap_or_else(|e| e.into_inner());
        }
        *in_flight += 1;
        LimiterPermit { limiter: self }
    }

    pub fn in_flight(&self) -> usize {
        *self.in_flight.lock().unwrap_or_else(|e| e.into_inner())
    }
}

pub struct LimiterPermit<'a> {
    limiter: &'a ConcurrencyLimiter,
}

impl Drop for LimiterPermit<'_> {
    fn drop(&mut self) {
        let mut in_flight = self.limiter.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        *in_flight -= 1;
        self.limiter.freed.notify_one();
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    use proptest::prelude::*;

    use super::*;

    #[test]
    fn delays_double_then_saturate() {
        let policy = RetryPolicy {
            max_attempts: 5,
            backoff_base_ms: 100,
            max_backoff_ms: 350,
        };
        let delays: Vec<u64> = (1..=4).map(|r| policy.delay(r).as_millis() as u64).collect();
        assert_eq!(delays, [100, 200, 350, 350]);
    }

    #[test]
    fn zero_attempts_rejected() {
        let policy = RetryPolicy {
            max_attempts: 0,
            ..RetryPolicy::default()
        };
        assert!(policy.validate().is_err());
    }

    proptest! {
        #[test]
        fn delays_are_nondecreasing(base in 0u64..10_000, cap in 0u64..1_000_000, n in 1u32..80) {
            let policy = RetryPolicy { max_attempts: n, backoff_base_ms: base, max_backoff_ms: cap };
            for r in 1..n {
                prop_assert!(policy.delay(r) <= policy.delay(r + 1));
            }
        }
    }

    #[test]
    fn limiter_caps_parallelism() {
        let limiter = Arc::new(ConcurrencyLimiter::new(2));
        let peak = Arc::new(AtomicUsize::new(0));
        std::thread::scope(|s| {
            for _ in 0..8 {
                let limiter = Arc::clone(&limiter);
                let peak = Arc::clone(&peak);
                s.spawn(move || {
                    let _permit = limiter.acquire();
                    peak.fetch_max(limiter.in_flight(), Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
        assert_eq!(limiter.in_flight(), 0);
    }
}
