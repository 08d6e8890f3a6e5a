//! Thread-local multiply-accumulate counter.
//!
//! When enabled, forward matmul/conv ops add their exact MAC counts here.
//! The analysis module compares these instrumented totals against its
//! closed-form accounting.

use std::cell::Cell;

thread_local! {
    static ENABLED: Cell<bool> = const { Cell::new(false) };
    static COUNT: Cell<u64> = const { Cell::new(0) };
}

pub fn enable() {
    ENABLED.with(|e| e.set(true));
}

pub fn disable() {
    ENABLED.with(|e| e.set(false));
}

pub fn reset() {
    COUNT.with(|c| c.set(0));
}

pub fn read() -> u64 {
    COUNT.with(|c| c.get())
}

#[inline]
pub(crate) fn add(n: u64) {
    ENABLED.with(|e| {
        if e.get() {
            COUNT.with(|c| c.set(c.get() + n));
        }
    });
}
