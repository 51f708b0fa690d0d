//! Multiply counting for cost instrumentation.
//!
//! Counting is off unless a [`measure`] call is active on the current thread.
//! Each op reports the number of scalar multiplies it performs under the
//! innermost active scope label (or `"_"` outside any scope).

use std::cell::RefCell;
use std::collections::BTreeMap;

thread_local! {
    static STATE: RefCell<Option<CountState>> = const { RefCell::new(None) };
}

struct CountState {
    scopes: Vec<&'static str>,
    counts: BTreeMap<String, u64>,
}

/// Multiply counts keyed by `"scope/op"`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpCounts(pub BTreeMap<String, u64>);

impl OpCounts {
    pub fn total(&self) -> u64 {
        self.0.values().sum()
    }

    /// Sum of counts recorded under `scope` (any op).
    pub fn scope(&self, scope: &str) -> u64 {
        let prefix = format!("{scope}/");
        self.0
            .iter()
            .filter(|(k, _)| k.starts_with(&prefix))
            .map(|(_, v)| *v)
            .sum()
    }

    /// Sum of counts recorded for `op` (any scope).
    pub fn op(&self, op: &str) -> u64 {
        let suffix = format!("/{op}");
        self.0
            .iter()
            .filter(|(k, _)| k.ends_with(&suffix))
            .map(|(_, v)| *v)
            .sum()
    }
}

/// Runs `f` with counting enabled and returns its result with the counts.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, OpCounts) {
    let previous = STATE.with(|s| {
        s.borrow_mut().replace(CountState {
            scopes: Vec::new(),
            counts: BTreeMap::new(),
        })
    });
    let out = f();
    let counts = STATE.with(|s| {
        let mut s = s.borrow_mut();
        let state = s.take().expect("count state");
        *s = previous;
        state.counts
    });
    (out, OpCounts(counts))
}

pub(crate) fn record(op: &str, multiplies: usize) {
    STATE.with(|s| {
        if let Some(state) = s.borrow_mut().as_mut() {
            let scope = state.scopes.last().copied().unwrap_or("_");
            *state.counts.entry(format!("{scope}/{op}")).or_default() += multiplies as u64;
        }
    });
}

/// Guard returned by [`scope`]; pops the label on drop.
pub struct ScopeGuard(bool);

/// Labels subsequent counts with `label` until the guard drops.
pub fn scope(label: &'static str) -> ScopeGuard {
    let active = STATE.with(|s| match s.borrow_mut().as_mut() {
        Some(state) => {
            state.scopes.push(label);
            true
        }
        None => false,
    });
    ScopeGuard(active)
}

impl Drop for ScopeGuard {
    fn drop(&mut self) {
        if self.0 {
            STATE.with(|s| {
                if let Some(state) = s.borrow_mut().as_mut() {
                    state.scopes.pop();
                }
            });
        }
    }
}
