//! Peak heap tracking through a counting global allocator.
//!
//! A binary opts in with
//!
//! ```ignore
//! #[global_allocator]
//! static ALLOC: cmab_core::instrument::CountingAllocator = cmab_core::instrument::CountingAllocator;
//! ```
//!
//! after which [`MemoryMeter`] can observe every allocation made on the
//! current thread while it is enabled.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{Error, Result};

static INSTALLED: AtomicBool = AtomicBool::new(false);

thread_local! {
    static ENABLED: Cell<bool> = const { Cell::new(false) };
    static CURRENT: Cell<i64> = const { Cell::new(0) };
    static PEAK: Cell<i64> = const { Cell::new(0) };
}

/// System allocator wrapper feeding the thread-local meter.
pub struct CountingAllocator;

#[inline]
fn record(delta: i64) {
    let _ = ENABLED.try_with(|enabled| {
        if enabled.get() {
            let cur = CURRENT.with(|c| {
                let v = c.get() + delta;
                c.set(v);
                v
            });
            PEAK.with(|p| {
                if cur > p.get() {
                    p.set(cur);
                }
            });
        }
    });
}

unsafe impl GlobalAlloc for CountingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        INSTALLED.store(true, Ordering::Relaxed);
        let p = System.alloc(layout);
        if !p.is_null() {
            record(layout.size() as i64);
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        INSTALLED.store(true, Ordering::Relaxed);
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            record(layout.size() as i64);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        record(-(layout.size() as i64));
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            record(new_size as i64 - layout.size() as i64);
        }
        p
    }
}

/// Result of one metered region.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MemoryReport {
    /// Highest live-byte count reached above the level at entry.
    pub peak_bytes: u64,
    /// Bytes allocated inside the region and still live at exit.
    pub retained_bytes: u64,
}

/// Thread-local transient-allocation meter.
///
/// `current` may dip below zero when the region frees memory that was
/// allocated before it started; `peak` is measured from the entry level.
#[derive(Debug)]
pub struct MemoryMeter {
    _not_send: std::marker::PhantomData<*const ()>,
}

impl MemoryMeter {
    /// Whether a [`CountingAllocator`] is serving this process.
    pub fn available() -> bool {
        if INSTALLED.load(Ordering::Relaxed) {
            return true;
        }
        // Force one allocation so a freshly started process registers.
        drop(Box::new(0u8));
        INSTALLED.load(Ordering::Relaxed)
    }

    /// Enables metering on this thread with both counters reset to zero.
    pub fn start() -> Result<Self> {
        if !Self::available() {
            return Err(Error::Unsupported(
                "allocation metering requires CountingAllocator as the global allocator".into(),
            ));
        }
        if ENABLED.with(|e| e.get()) {
            return Err(Error::Contract(
                "a MemoryMeter is already active on this thread".into(),
            ));
        }
        Self::reset();
        ENABLED.with(|e| e.set(true));
        Ok(Self {
            _not_send: std::marker::PhantomData,
        })
    }

    pub fn reset() {
        CURRENT.with(|c| c.set(0));
        PEAK.with(|p| p.set(0));
    }

    pub fn current(&self) -> i64 {
        CURRENT.with(|c| c.get())
    }

    pub fn peak(&self) -> u64 {
        PEAK.with(|p| p.get()).max(0) as u64
    }

    pub fn finish(self) -> MemoryReport {
        let report = MemoryReport {
            peak_bytes: self.peak(),
            retained_bytes: self.current().max(0) as u64,
        };
        drop(self);
        report
    }

    /// Meters `f` on the current thread.
    pub fn measure<R>(f: impl FnOnce() -> R) -> Result<(R, MemoryReport)> {
        let meter = Self::start()?;
        let out = f();
        Ok((out, meter.finish()))
    }
}

impl Drop for MemoryMeter {
    fn drop(&mut self) {
        ENABLED.with(|e| e.set(false));
    }
}
