use serde::{Deserialize, Serialize};

use super::EventSequence;
use crate::error::{invalid, Result};
use crate::scalar::Real;

/// Constant-rate Poisson process.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HppModel<T> {
    /// Events per day.
    pub rate: T,
}

impl<T: Real> HppModel<T> {
    pub fn new(rate: T) -> Result<Self> {
        if !(rate > T::zero() && rate.is_finite()) {
            return invalid(format!("Poisson rate {rate} must be positive"));
        }
        Ok(Self { rate })
    }

    /// Maximum-likelihood rate `N / T` pooled over sequences.
    pub fn fit(sequences: &[EventSequence<T>]) -> Result<Self> {
        let n: usize = sequences.iter().map(|s| s.n_events()).sum();
        let total = sequences.iter().fold(T::zero(), |acc, s| acc + s.duration());
        if !(total > T::zero()) {
            return invalid("total observation time is zero");
        }
        if n == 0 {
            return invalid("no events to fit");
        }
        Self::new(T::from_usize_lossy(n) / total)
    }

    pub fn nll(&self, seq: &EventSequence<T>) -> T {
        self.rate * seq.duration() - T::from_usize_lossy(seq.n_events()) * self.rate.ln()
    }

    pub fn expected_gap(&self) -> T {
        self.rate.recip()
    }

    pub fn predict_next(&self, history: &[T]) -> Result<T> {
        match history.last() {
            Some(&t) => Ok(t + self.expected_gap()),
            None => invalid("prediction needs a non-empty history"),
        }
    }
}
