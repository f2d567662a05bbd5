//! Float-element allocation accounting for the kernel layer.
//!
//! Every [`Matrix`](super::Matrix) buffer created while a meter is active on
//! the current thread takes a lease on that meter; dropping the matrix
//! returns the lease. Only kernel-layer buffers are counted, so the numbers
//! isolate algorithmic memory from whatever else the process allocates.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

#[derive(Debug, Default)]
struct MeterState {
    current: AtomicUsize,
    peak: AtomicUsize,
    epoch: AtomicU64,
}

/// Tracks live and peak float counts. Cloning yields another handle to the
/// same counters.
#[derive(Debug, Clone, Default)]
pub struct AllocMeter {
    state: Arc<MeterState>,
}

thread_local! {
    static ACTIVE: RefCell<Option<AllocMeter>> = const { RefCell::new(None) };
}

impl AllocMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn current_floats(&self) -> usize {
        self.state.current.load(Ordering::Acquire)
    }

    pub fn peak_floats(&self) -> usize {
        self.state.peak.load(Ordering::Acquire)
    }

    /// Zeroes both counters. Leases taken before the reset are forgotten.
    pub fn reset(&self) {
        self.state.epoch.fetch_add(1, Ordering::AcqRel);
        self.state.current.store(0, Ordering::Release);
        self.state.peak.store(0, Ordering::Release);
    }

    /// Runs `f` with this meter active on the current thread. Nested calls
    /// restore the previously active meter on exit.
    pub fn measure<R>(&self, f: impl FnOnce() -> R) -> R {
        struct Restore(Option<AllocMeter>);
        impl Drop for Restore {
            fn drop(&mut self) {
                let prev = self.0.take();
                ACTIVE.with(|a| *a.borrow_mut() = prev);
            }
        }
        let prev = ACTIVE.with(|a| a.borrow_mut().replace(self.clone()));
        let _restore = Restore(prev);
        f()
    }

    /// Raises the peak as if `floats` more had been live on top of the
    /// current usage, e.g. the summed peaks of concurrently running workers.
    pub fn absorb_peak(&self, floats: usize) {
        let cur = self.current_floats();
        self.state.peak.fetch_max(cur + floats, Ordering::AcqRel);
    }

    pub(crate) fn record_alloc(&self, floats: usize) -> Lease {
        let now = self.state.current.fetch_add(floats, Ordering::AcqRel) + floats;
        self.state.peak.fetch_max(now, Ordering::AcqRel);
        Lease {
            meter: self.clone(),
            floats,
            epoch: self.state.epoch.load(Ordering::Acquire),
        }
    }
}

/// A counted buffer's claim on a meter.
#[derive(Debug)]
pub(crate) struct Lease {
    meter: AllocMeter,
    floats: usize,
    epoch: u64,
}

impl Drop for Lease {
    fn drop(&mut self) {
        let state = &self.meter.state;
        if state.epoch.load(Ordering::Acquire) == self.epoch {
            let _ = state
                .current
                .fetch_update(Ordering::AcqRel, Ordering::Acquire, |c| {
                    Some(c.saturating_sub(self.floats))
                });
        }
    }
}

/// The meter active on this thread, if any.
pub(crate) fn active_meter() -> Option<AllocMeter> {
    ACTIVE.with(|a| a.borrow().clone())
}

/// Takes a lease on the meter active on this thread, if any.
pub(crate) fn lease(floats: usize) -> Option<Lease> {
    if floats == 0 {
        return None;
    }
    ACTIVE.with(|a| a.borrow().as_ref().map(|m| m.record_alloc(floats)))
}
