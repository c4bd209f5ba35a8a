//! Per-thread floating-point operation counters for matmuls.
//!
//! Matmul forward passes add `2·m·k·n` to the counter of the innermost
//! active label. Nothing is counted outside a [`counting`] call.

use std::cell::RefCell;
use std::collections::BTreeMap;

thread_local! {
    static STATE: RefCell<Option<CounterState>> = const { RefCell::new(None) };
}

struct CounterState {
    labels: Vec<&'static str>,
    totals: BTreeMap<&'static str, u64>,
}

/// Runs `f` with counting enabled and returns its result with per-label
/// totals. Matmuls outside any [`label`] are counted under `"other"`.
pub fn counting<T>(f: impl FnOnce() -> T) -> (T, BTreeMap<&'static str, u64>) {
    let prev = STATE.with(|s| {
        s.borrow_mut().replace(CounterState {
            labels: Vec::new(),
            totals: BTreeMap::new(),
        })
    });
    let out = f();
    let state = STATE.with(|s| std::mem::replace(&mut *s.borrow_mut(), prev));
    (out, state.map(|s| s.totals).unwrap_or_default())
}

/// Attributes matmuls performed inside `f` to `name`.
pub fn label<T>(name: &'static str, f: impl FnOnce() -> T) -> T {
    let pushed = STATE.with(|s| match s.borrow_mut().as_mut() {
        Some(st) => {
            st.labels.push(name);
            true
        }
        None => false,
    });
    let out = f();
    if pushed {
        STATE.with(|s| {
            if let Some(st) = s.borrow_mut().as_mut() {
                st.labels.pop();
            }
        });
    }
    out
}

pub(crate) fn record(flops: u64) {
    STATE.with(|s| {
        if let Some(st) = s.borrow_mut().as_mut() {
            let key = st.labels.last().copied().unwrap_or("other");
            *st.totals.entry(key).or_insert(0) += flops;
        }
    });
}
