//! Multiply-add counters attributed to pipeline stages.
//!
//! Every contraction in `numerics` reports the number of multiply-adds it
//! performed to the counter of the stage that is current on the calling
//! thread. Non-multiplicative work (exp, log, max, comparisons) is not
//! counted.

use std::cell::{Cell, RefCell};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    /// Anything not inside an explicit stage scope.
    Other,
    /// Context / target embedding.
    Embed,
    /// Query projection of the block latents (done once per state).
    Ca1Query,
    /// Key/value projection, scoring and aggregation over input datapoints.
    Ca1Stream,
    /// Output projection, residual and feed-forward of the first cross-attention.
    Ca1Out,
    Sa1,
    Ca2,
    Sa2,
    /// Cross-attention stages of the target path.
    QueryPath,
    Predictor,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Other,
        Stage::Embed,
        Stage::Ca1Query,
        Stage::Ca1Stream,
        Stage::Ca1Out,
        Stage::Sa1,
        Stage::Ca2,
        Stage::Sa2,
        Stage::QueryPath,
        Stage::Predictor,
    ];

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Other => "other",
            Stage::Embed => "embed",
            Stage::Ca1Query => "ca1_query",
            Stage::Ca1Stream => "ca1_stream",
            Stage::Ca1Out => "ca1_out",
            Stage::Sa1 => "sa1",
            Stage::Ca2 => "ca2",
            Stage::Sa2 => "sa2",
            Stage::QueryPath => "query_path",
            Stage::Predictor => "predictor",
        }
    }
}

const N_STAGES: usize = Stage::ALL.len();

thread_local! {
    static CURRENT: Cell<Stage> = const { Cell::new(Stage::Other) };
    static COUNTS: RefCell<[u64; N_STAGES]> = const { RefCell::new([0; N_STAGES]) };
}

/// Snapshot of per-stage multiply-add counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopCounts {
    counts: [u64; N_STAGES],
}

impl FlopCounts {
    pub fn get(&self, stage: Stage) -> u64 {
        self.counts[stage.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts accumulated between `earlier` and `self`.
    pub fn since(&self, earlier: &FlopCounts) -> FlopCounts {
        let mut counts = [0; N_STAGES];
        for (i, c) in counts.iter_mut().enumerate() {
            *c = self.counts[i] - earlier.counts[i];
        }
        FlopCounts { counts }
    }
}

impl fmt::Display for FlopCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for stage in Stage::ALL {
            let c = self.get(stage);
            if c == 0 {
                continue;
            }
            if !first {
                write!(f, " ")?;
            }
            write!(f, "{}={}", stage.name(), c)?;
            first = false;
        }
        if first {
            write!(f, "none")?;
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn add(n: u64) {
    let stage = CURRENT.with(|c| c.get());
    COUNTS.with(|c| c.borrow_mut()[stage.index()] += n);
}

/// Runs `f` with `stage` as the current attribution target, restoring the
/// previous stage afterwards.
pub fn in_stage<R>(stage: Stage, f: impl FnOnce() -> R) -> R {
    let prev = CURRENT.with(|c| c.replace(stage));
    struct Restore(Stage);
    impl Drop for Restore {
        fn drop(&mut self) {
            CURRENT.with(|c| c.set(self.0));
        }
    }
    let _restore = Restore(prev);
    f()
}

pub fn snapshot() -> FlopCounts {
    FlopCounts {
        counts: COUNTS.with(|c| *c.borrow()),
    }
}

/// Runs `f` and returns its result along with the multiply-adds it performed.
pub fn count<R>(f: impl FnOnce() -> R) -> (R, FlopCounts) {
    let before = snapshot();
    let out = f();
    (out, snapshot().since(&before))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stages_nest_and_restore() {
        let (_, counts) = count(|| {
            add(1);
            in_stage(Stage::Sa1, || {
                add(2);
                in_stage(Stage::Sa2, || add(5));
                add(3);
            });
            add(10);
        });
        assert_eq!(counts.get(Stage::Other), 11);
        assert_eq!(counts.get(Stage::Sa1), 5);
        assert_eq!(counts.get(Stage::Sa2), 5);
        assert_eq!(counts.total(), 21);
    }
}
