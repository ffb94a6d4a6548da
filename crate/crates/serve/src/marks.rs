//! Failure marks and their conversion to stride rewards.

use serde::{Deserialize, Serialize};

/// Inclusive frame interval the annotator marked as a tracker failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Mark {
    pub start: usize,
    pub end: usize,
}

impl Mark {
    pub fn new(start: usize, end: usize) -> Self {
        assert!(start <= end, "mark start must not exceed its end");
        Self { start, end }
    }

    pub fn contains(&self, frame: usize) -> bool {
        (self.start..=self.end).contains(&frame)
    }
}

/// Union of intervals as sorted, disjoint, non-adjacent intervals.
pub fn merge(marks: impl IntoIterator<Item = Mark>) -> Vec<Mark> {
    let mut v: Vec<Mark> = marks.into_iter().collect();
    v.sort();
    let mut out: Vec<Mark> = Vec::with_capacity(v.len());
    for m in v {
        match out.last_mut() {
            Some(last) if m.start <= last.end.saturating_add(1) => last.end = last.end.max(m.end),
            _ => out.push(m),
        }
    }
    out
}

/// Reward of every stride frame `0, stride, 2·stride, … < len`: 0 inside a
/// mark, 1 otherwise.
pub fn stride_rewards(marks: &[Mark], stride: usize, len: usize) -> Vec<u8> {
    assert!(stride > 0, "stride must be positive");
    (0..len)
        .step_by(stride)
        .map(|f| if marks.iter().any(|m| m.contains(f)) { 0 } else { 1 })
        .collect()
}
