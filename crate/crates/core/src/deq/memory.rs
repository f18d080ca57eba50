//! Counter of live feature-sized buffers held by solvers and gradient code.
//!
//! Each [`FeatureBuf`] increments a thread-local live count on creation and
//! decrements it on drop; the peak is tracked so tests can check that stored
//! state does not grow with the number of solver steps.

use std::cell::Cell;
use std::ops::{Deref, DerefMut};

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

/// Buffers currently alive on this thread.
pub fn live_buffers() -> usize {
    LIVE.with(|c| c.get())
}

/// Highest live count since the last [`reset_peak`].
pub fn peak_buffers() -> usize {
    PEAK.with(|c| c.get())
}

pub fn reset_peak() {
    PEAK.with(|p| p.set(live_buffers()));
}

#[derive(Debug, PartialEq)]
pub struct FeatureBuf(Vec<f64>);

impl FeatureBuf {
    pub fn zeros(n: usize) -> Self {
        Self::from_vec(vec![0.0; n])
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::from_vec(v.to_vec())
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        let n = LIVE.with(|c| {
            c.set(c.get() + 1);
            c.get()
        });
        PEAK.with(|p| p.set(p.get().max(n)));
        Self(v)
    }

    pub fn into_vec(mut self) -> Vec<f64> {
        std::mem::take(&mut self.0)
    }
}

impl Clone for FeatureBuf {
    fn clone(&self) -> Self {
        Self::from_slice(&self.0)
    }
}

impl Drop for FeatureBuf {
    fn drop(&mut self) {
        LIVE.with(|c| c.set(c.get() - 1));
    }
}

impl Deref for FeatureBuf {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for FeatureBuf {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_live_and_peak() {
        let base = live_buffers();
        reset_peak();
        {
            let a = FeatureBuf::zeros(4);
            let _b = a.clone();
            assert_eq!(live_buffers(), base + 2);
            let v = a.into_vec();
            assert_eq!(v.len(), 4);
            assert_eq!(live_buffers(), base + 1);
        }
        assert_eq!(live_buffers(), base);
        assert_eq!(peak_buffers(), base + 2);
    }
}
