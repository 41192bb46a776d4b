//! Multiply-add accounting for forward computation.
//!
//! Only linear maps, attention score/value products and convolutions are
//! counted. Softmax, normalization and elementwise activations are not.
//! Backward passes are never counted.

use std::cell::Cell;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Attention,
    FeedForward,
    Projection,
    Other,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub attention: u64,
    pub feed_forward: u64,
    pub projection: u64,
    pub other: u64,
}

impl OpCounter {
    pub fn total(&self) -> u64 {
        self.attention + self.feed_forward + self.projection + self.other
    }

    pub fn add(&mut self, cat: Category, n: u64) {
        match cat {
            Category::Attention => self.attention += n,
            Category::FeedForward => self.feed_forward += n,
            Category::Projection => self.projection += n,
            Category::Other => self.other += n,
        }
    }

    /// Counts accumulated since `earlier` was taken.
    pub fn since(&self, earlier: &OpCounter) -> OpCounter {
        OpCounter {
            attention: self.attention - earlier.attention,
            feed_forward: self.feed_forward - earlier.feed_forward,
            projection: self.projection - earlier.projection,
            other: self.other - earlier.other,
        }
    }
}

impl std::ops::AddAssign for OpCounter {
    fn add_assign(&mut self, rhs: Self) {
        self.attention += rhs.attention;
        self.feed_forward += rhs.feed_forward;
        self.projection += rhs.projection;
        self.other += rhs.other;
    }
}

thread_local! {
    static COUNTER: Cell<OpCounter> = const { Cell::new(OpCounter { attention: 0, feed_forward: 0, projection: 0, other: 0 }) };
}

#[inline]
pub fn record(cat: Category, n: u64) {
    COUNTER.with(|c| {
        let mut v = c.get();
        v.add(cat, n);
        c.set(v);
    });
}

/// Current running count for this thread.
pub fn snapshot() -> OpCounter {
    COUNTER.with(Cell::get)
}

/// Runs `f` and returns the multiply-adds it performed on this thread.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, OpCounter) {
    let before = snapshot();
    let out = f();
    (out, snapshot().since(&before))
}

/// Analytic multiply-add count of an `(m×k)·(k×n)` product.
pub fn flops_linear_expected(m: u64, k: u64, n: u64) -> u64 {
    m * n * k
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categories_sum_to_total() {
        let ((), c) = measure(|| {
            record(Category::Attention, 3);
            record(Category::FeedForward, 5);
            record(Category::Projection, 7);
            record(Category::Other, 11);
        });
        assert_eq!(c.total(), 26);
        assert_eq!(c.attention + c.feed_forward + c.projection + c.other, c.total());
    }

    #[test]
    fn expected_linear() {
        assert_eq!(flops_linear_expected(2, 3, 4), 24);
        assert_eq!(flops_linear_expected(1, 1, 1), 1);
    }
}
