use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Thread-safe query counter with a hard budget.
///
/// The budget check and the increment happen in one atomic update, so `used`
/// never exceeds `budget` no matter how many workers charge concurrently.
#[derive(Debug)]
pub struct QueryLedger {
    used: AtomicU64,
    budget: u64,
}

impl QueryLedger {
    pub const DEFAULT_BUDGET: u64 = 70_000;

    pub fn new(budget: u64) -> Self {
        Self {
            used: AtomicU64::new(0),
            budget,
        }
    }

    pub fn unlimited() -> Self {
        Self::new(u64::MAX)
    }

    pub fn used(&self) -> u64 {
        self.used.load(Ordering::SeqCst)
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    pub fn remaining(&self) -> u64 {
        self.budget - self.used()
    }

    pub fn try_charge(&self, n: u64) -> Result<()> {
        self.used
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |used| {
                used.checked_add(n).filter(|&total| total <= self.budget)
            })
            .map(|_| ())
            .map_err(|used| Error::BudgetExhausted {
                used,
                budget: self.budget,
                requested: n,
            })
    }
}

impl Default for QueryLedger {
    fn default() -> Self {
        Self::new(Self::DEFAULT_BUDGET)
    }
}
