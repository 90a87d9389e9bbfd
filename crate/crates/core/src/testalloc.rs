//! Counting allocator for the test builds: audits that the online
//! hyperreduced loop performs no full-order allocations. Tracking is
//! thread local, so parallel test threads never observe each other.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;

thread_local! {
    static TRACKING: Cell<bool> = const { Cell::new(false) };
    static THRESHOLD: Cell<usize> = const { Cell::new(usize::MAX) };
    static LARGE_ALLOCS: Cell<usize> = const { Cell::new(0) };
}

pub struct CountingAlloc;

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        // try_with: thread-local storage may already be torn down during
        // thread exit; fall through to the system allocator silently.
        let _ = TRACKING.try_with(|t| {
            if t.get() {
                let threshold = THRESHOLD.with(Cell::get);
                if layout.size() >= threshold {
                    LARGE_ALLOCS.with(|c| c.set(c.get() + 1));
                }
            }
        });
        unsafe { System.alloc(layout) }
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) }
    }
}

#[global_allocator]
static AUDIT_ALLOC: CountingAlloc = CountingAlloc;

/// Runs `f` while counting allocations of at least `threshold_bytes` on
/// the current thread; returns the result and the count.
pub fn audit<R>(threshold_bytes: usize, f: impl FnOnce() -> R) -> (R, usize) {
    THRESHOLD.with(|t| t.set(threshold_bytes));
    LARGE_ALLOCS.with(|c| c.set(0));
    TRACKING.with(|t| t.set(true));
    let out = f();
    TRACKING.with(|t| t.set(false));
    let count = LARGE_ALLOCS.with(Cell::get);
    (out, count)
}
