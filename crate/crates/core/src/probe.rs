//! Instrumentation for weight-gradient scratch buffers.
//!
//! Every `dL/dW_q` buffer a layer materializes during backward is handed
//! out as a [`Scratch`] guard registered with an [`AllocProbe`]. The probe
//! tracks how many such buffers are alive at once and the peak over its
//! lifetime; dropping the guard releases the buffer.

use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::numerics::{Matrix, Real};

#[derive(Debug, Default)]
struct Counters {
    live: AtomicUsize,
    peak: AtomicUsize,
    live_bytes: AtomicUsize,
    peak_bytes: AtomicUsize,
    allocations: AtomicUsize,
}

/// Shared counters; clones observe the same state.
#[derive(Debug, Clone, Default)]
pub struct AllocProbe {
    counters: Arc<Counters>,
}

/// Point-in-time copy of the probe counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ProbeStats {
    pub live: usize,
    pub peak: usize,
    pub live_bytes: usize,
    pub peak_bytes: usize,
    pub allocations: usize,
}

impl AllocProbe {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `matrix` as a live scratch buffer.
    pub fn track<T: Real>(&self, matrix: Matrix<T>) -> Scratch<T> {
        let bytes = matrix.len() * std::mem::size_of::<T>();
        let c = &self.counters;
        let live = c.live.fetch_add(1, Ordering::SeqCst) + 1;
        c.peak.fetch_max(live, Ordering::SeqCst);
        let live_bytes = c.live_bytes.fetch_add(bytes, Ordering::SeqCst) + bytes;
        c.peak_bytes.fetch_max(live_bytes, Ordering::SeqCst);
        c.allocations.fetch_add(1, Ordering::SeqCst);
        Scratch {
            matrix,
            bytes,
            probe: self.clone(),
        }
    }

    fn release(&self, bytes: usize) {
        self.counters.live.fetch_sub(1, Ordering::SeqCst);
        self.counters.live_bytes.fetch_sub(bytes, Ordering::SeqCst);
    }

    pub fn live(&self) -> usize {
        self.counters.live.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.counters.peak.load(Ordering::SeqCst)
    }

    pub fn stats(&self) -> ProbeStats {
        let c = &self.counters;
        ProbeStats {
            live: c.live.load(Ordering::SeqCst),
            peak: c.peak.load(Ordering::SeqCst),
            live_bytes: c.live_bytes.load(Ordering::SeqCst),
            peak_bytes: c.peak_bytes.load(Ordering::SeqCst),
            allocations: c.allocations.load(Ordering::SeqCst),
        }
    }

    /// Resets the peaks to the current live values.
    pub fn reset_peak(&self) {
        let c = &self.counters;
        c.peak.store(c.live.load(Ordering::SeqCst), Ordering::SeqCst);
        c.peak_bytes.store(c.live_bytes.load(Ordering::SeqCst), Ordering::SeqCst);
    }
}

/// True iff at most one weight-gradient scratch buffer was ever alive at a
/// time, and at least one was used.
pub fn probe_assert_flushed(probe: &AllocProbe) -> bool {
    probe.peak() == 1
}

/// A live scratch buffer; released when dropped.
#[derive(Debug)]
pub struct Scratch<T: Real> {
    matrix: Matrix<T>,
    bytes: usize,
    probe: AllocProbe,
}

impl<T: Real> Deref for Scratch<T> {
    type Target = Matrix<T>;

    fn deref(&self) -> &Matrix<T> {
        &self.matrix
    }
}

impl<T: Real> DerefMut for Scratch<T> {
    fn deref_mut(&mut self) -> &mut Matrix<T> {
        &mut self.matrix
    }
}

impl<T: Real> Drop for Scratch<T> {
    fn drop(&mut self) {
        self.probe.release(self.bytes);
    }
}
