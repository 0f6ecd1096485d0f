//! Homogeneous Poisson and exponential-kernel Hawkes baselines for the
//! next-visit time task, plus Ogata thinning.

pub mod hawkes;
pub mod hpp;
pub mod thinning;

pub use hawkes::{FitReport, HawkesModel, StartOutcome};
pub use hpp::HppModel;
pub use thinning::thinning_sample;

use serde::{Deserialize, Serialize};

use crate::data::Patient;
use crate::error::{invalid, Result};
use crate::scalar::Real;

/// Event times observed on the window `(start, end]`. Times at or before
/// `start` are history only: they excite later events but are not modelled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSequence<T> {
    pub times: Vec<T>,
    pub start: T,
    pub end: T,
}

impl<T: Real> EventSequence<T> {
    pub fn new(times: Vec<T>, start: T, end: T) -> Result<Self> {
        if !(end >= start) {
            return invalid("observation window ends before it starts");
        }
        if times.windows(2).any(|w| w[1] < w[0]) {
            return invalid("event times must be sorted");
        }
        if times.last().is_some_and(|&t| t > end) {
            return invalid("event after the end of the observation window");
        }
        Ok(Self { times, start, end })
    }

    /// A patient's visits: the first is history, the rest are events on `(t_1, t_N]`.
    pub fn from_patient(p: &Patient) -> Result<Self> {
        let times: Vec<T> = p.visits.iter().map(|v| T::lit(v.time)).collect();
        match (times.first(), times.last()) {
            (Some(&s), Some(&e)) => Self::new(times.clone(), s, e),
            _ => invalid(format!("patient `{}` has no visits", p.id)),
        }
    }

    /// Events inside the window.
    pub fn events(&self) -> impl Iterator<Item = T> + '_ {
        self.times.iter().copied().filter(move |&t| t > self.start)
    }

    pub fn n_events(&self) -> usize {
        self.events().count()
    }

    pub fn duration(&self) -> T {
        self.end - self.start
    }
}
