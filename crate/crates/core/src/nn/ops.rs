use core::ops::{Add, AddAssign};

/// Work counters threaded through forward and backward passes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    /// Multiply-accumulate operations.
    pub macs: u64,
    /// Single-example forward passes.
    pub forward_passes: u64,
    /// Single-example backward (gradient) passes.
    pub gradient_calls: u64,
}

impl AddAssign for OpCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.macs += rhs.macs;
        self.forward_passes += rhs.forward_passes;
        self.gradient_calls += rhs.gradient_calls;
    }
}

impl Add for OpCounts {
    type Output = OpCounts;
    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}
