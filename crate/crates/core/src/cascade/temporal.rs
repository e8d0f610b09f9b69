//! k-of-n aggregation of per-frame decisions into event intervals.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::CascadeError;

/// Inclusive frame range `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventInterval {
    pub start: usize,
    pub end: usize,
}

/// Streaming k-of-n window. Frame `i` is active iff at least `k` of the last
/// `n` decisions (or of all decisions so far, while fewer than `n`) are true.
#[derive(Debug, Clone)]
pub struct TemporalAggregator {
    k: usize,
    n: usize,
    window: VecDeque<bool>,
    positives: usize,
}

impl TemporalAggregator {
    pub fn new(k: usize, n: usize) -> Result<Self, CascadeError> {
        if !(1 <= k && k <= n) {
            return Err(CascadeError::Config(format!(
                "temporal window needs 1 <= k <= n, got k={k} n={n}"
            )));
        }
        Ok(TemporalAggregator {
            k,
            n,
            window: VecDeque::with_capacity(n),
            positives: 0,
        })
    }

    /// Feed the next frame's decision; returns whether that frame is active.
    pub fn push(&mut self, decision: bool) -> bool {
        if self.window.len() == self.n && self.window.pop_front() == Some(true) {
            self.positives -= 1;
        }
        self.window.push_back(decision);
        self.positives += usize::from(decision);
        self.positives >= self.k
    }
}

pub fn aggregate_temporal(decisions: &[bool], k: usize, n: usize) -> Result<Vec<EventInterval>, CascadeError> {
    let mut agg = TemporalAggregator::new(k, n)?;
    let mut events: Vec<EventInterval> = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &d) in decisions.iter().enumerate() {
        match (agg.push(d), open) {
            (true, None) => open = Some(i),
            (false, Some(start)) => {
                events.push(EventInterval { start, end: i - 1 });
                open = None;
            }
            _ => {}
        }
    }
    if let Some(start) = open {
        events.push(EventInterval {
            start,
            end: decisions.len() - 1,
        });
    }
    Ok(events)
}
