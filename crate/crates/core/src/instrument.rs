//! Per-thread counters for prior-cache reads and oracle-query constructions.
//!
//! Counters are thread-local so that concurrent work on other threads (for
//! example parallel tests) never shows up in a measurement.

use std::cell::Cell;

thread_local! {
    static CACHE_READS: Cell<u64> = const { Cell::new(0) };
    static ORACLE_BUILDS: Cell<u64> = const { Cell::new(0) };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counters {
    pub cache_reads: u64,
    pub oracle_builds: u64,
}

impl Counters {
    /// Current values on this thread.
    pub fn now() -> Self {
        Counters {
            cache_reads: CACHE_READS.with(Cell::get),
            oracle_builds: ORACLE_BUILDS.with(Cell::get),
        }
    }

    pub fn since(self, earlier: Counters) -> Counters {
        Counters {
            cache_reads: self.cache_reads - earlier.cache_reads,
            oracle_builds: self.oracle_builds - earlier.oracle_builds,
        }
    }
}

pub(crate) fn record_cache_read() {
    CACHE_READS.with(|c| c.set(c.get() + 1));
}

pub(crate) fn record_oracle_build() {
    ORACLE_BUILDS.with(|c| c.set(c.get() + 1));
}
