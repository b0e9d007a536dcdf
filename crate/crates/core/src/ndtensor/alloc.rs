//! Deterministic byte accounting for tensor and spectrum buffers.
//!
//! Every [`TrackedVec`] registers its payload size with a thread-local counter
//! on creation and releases it on drop. [`measure_peak`] reports the
//! high-water mark a closure reaches above the bytes already live when it was
//! entered. Counters are per thread, so concurrent tests do not interfere;
//! measurements are only meaningful for code that allocates on the calling
//! thread.

use std::cell::Cell;
use std::ops::{Deref, DerefMut};

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

fn record_alloc(bytes: usize) {
    LIVE.with(|live| {
        let now = live.get() + bytes;
        live.set(now);
        PEAK.with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

fn record_free(bytes: usize) {
    // A buffer dropped on a different thread than it was created on
    // would underflow this thread's counter.
    LIVE.with(|live| live.set(live.get().saturating_sub(bytes)));
}

/// Bytes currently held by tracked buffers on this thread.
pub fn live_bytes() -> usize {
    LIVE.with(Cell::get)
}

/// Runs `f` and returns its result with the peak number of tracked bytes
/// allocated during the call, over and above the bytes live at entry.
pub fn measure_peak<R>(f: impl FnOnce() -> R) -> (R, usize) {
    let base = live_bytes();
    let saved_peak = PEAK.with(|p| p.replace(base));
    let out = f();
    let peak = PEAK.with(Cell::get);
    PEAK.with(|p| p.set(saved_peak.max(peak)));
    (out, peak - base)
}

/// A `Vec<T>` whose payload bytes are counted by the thread-local accountant.
#[derive(Debug)]
pub struct TrackedVec<T> {
    inner: Vec<T>,
    bytes: usize,
}

impl<T> TrackedVec<T> {
    pub fn new(inner: Vec<T>) -> Self {
        let bytes = inner.len() * std::mem::size_of::<T>();
        record_alloc(bytes);
        TrackedVec { inner, bytes }
    }

    pub fn into_inner(mut self) -> Vec<T> {
        record_free(self.bytes);
        self.bytes = 0;
        std::mem::take(&mut self.inner)
    }
}

impl<T: Clone> Clone for TrackedVec<T> {
    fn clone(&self) -> Self {
        TrackedVec::new(self.inner.clone())
    }
}

impl<T> Drop for TrackedVec<T> {
    fn drop(&mut self) {
        record_free(self.bytes);
    }
}

impl<T> Deref for TrackedVec<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.inner
    }
}

impl<T> DerefMut for TrackedVec<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.inner
    }
}

impl<T: PartialEq> PartialEq for TrackedVec<T> {
    fn eq(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}
