//! Annotation firewall: a capability token plus a runtime audit counter that
//! make any access to annotated ground truth explicit and countable.
//!
//! Annotated queries are the only human-style supervision in the system and
//! must never leak into the training path. Their fields are private; every
//! accessor requires an [`EvalScope`] and bumps a global counter. The
//! training loop snapshots the counter before and after a run and refuses to
//! finish if it moved.

use std::cell::Cell;
use std::sync::atomic::{AtomicU64, Ordering};

static ANNOTATION_READS: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static THREAD_READS: Cell<u64> = const { Cell::new(0) };
}

/// Capability token required to read annotated query fields.
///
/// Construction is cheap and public — the point is not secrecy but
/// auditability: every code path that can observe ground truth holds one of
/// these, and every field read is counted.
pub struct EvalScope {
    _priv: (),
}

impl EvalScope {
    pub fn open() -> Self {
        EvalScope { _priv: () }
    }

    pub(crate) fn record_read(&self) {
        ANNOTATION_READS.fetch_add(1, Ordering::Relaxed);
        THREAD_READS.with(|c| c.set(c.get() + 1));
    }
}

/// Total number of annotated-field reads since process start.
pub fn annotation_read_count() -> u64 {
    ANNOTATION_READS.load(Ordering::Relaxed)
}

/// Annotated-field reads performed by the calling thread. The training loop
/// audits this around a run so unrelated threads cannot mask a violation.
pub fn annotation_read_count_thread() -> u64 {
    THREAD_READS.with(|c| c.get())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_are_counted() {
        let scope = EvalScope::open();
        let before = annotation_read_count();
        scope.record_read();
        scope.record_read();
        assert_eq!(annotation_read_count() - before, 2);
    }
}
