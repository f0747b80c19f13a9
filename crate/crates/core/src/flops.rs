//! Attention multiply-accumulate counters.
//!
//! Counts only the score (Q·Kᵀ) and value (A·V) MACs, the two terms whose
//! cost scales with the square of the token count. Projection MACs are
//! excluded on purpose: they are invariant under the sparsity factor and
//! would mask the exact 4x-per-doubling ratio the sparse path is measured
//! against.
//!
//! Counters are process-global atomics so instrumentation survives the
//! parallel feature; recording happens once per attention call with the
//! exact product of the matmul extents, never inside hot loops.

use std::sync::atomic::{AtomicU64, Ordering};

static SCORE_MACS: AtomicU64 = AtomicU64::new(0);
static VALUE_MACS: AtomicU64 = AtomicU64::new(0);

/// Zero both counters. Call before the region being measured.
pub fn reset() {
    SCORE_MACS.store(0, Ordering::SeqCst);
    VALUE_MACS.store(0, Ordering::SeqCst);
}

pub fn record_score_macs(n: u64) {
    SCORE_MACS.fetch_add(n, Ordering::Relaxed);
}

pub fn record_value_macs(n: u64) {
    VALUE_MACS.fetch_add(n, Ordering::Relaxed);
}

pub fn score_macs() -> u64 {
    SCORE_MACS.load(Ordering::SeqCst)
}

pub fn value_macs() -> u64 {
    VALUE_MACS.load(Ordering::SeqCst)
}

/// Score plus value MACs since the last reset.
pub fn total_macs() -> u64 {
    score_macs() + value_macs()
}
