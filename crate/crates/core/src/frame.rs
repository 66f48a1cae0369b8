//! Aligned training data: the target series and every member's `q`-quantile
//! prediction for the same time steps.

use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FrameError {
    #[error("need at least two rows, got {0}")]
    TooShort(usize),
    #[error("need at least one member column")]
    NoMembers,
    #[error("{what} has length {got}, expected {expected}")]
    Length {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("timestamps must be strictly increasing: {prev:?} is followed by {next:?} at row {row}")]
    Unordered {
        row: usize,
        prev: String,
        next: String,
    },
    #[error("quantile level {0} is outside (0, 1)")]
    InvalidLevel(f64),
    #[error("duplicate member label {0:?}")]
    DuplicateMember(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesFrame<T> {
    timestamps: Vec<String>,
    targets: Vec<T>,
    // row-major: predictions[t * members + k]
    predictions: Vec<T>,
    member_names: Vec<String>,
    q: T,
}

impl<T: Real> TimeSeriesFrame<T> {
    /// `predictions` is row-major `T x K`. Missing cells may be passed as NaN;
    /// they are reported when residuals are built.
    pub fn new(
        timestamps: Vec<String>,
        targets: Vec<T>,
        predictions: Vec<T>,
        member_names: Vec<String>,
        q: T,
    ) -> Result<Self, FrameError> {
        let steps = targets.len();
        let members = member_names.len();
        if steps < 2 {
            return Err(FrameError::TooShort(steps));
        }
        if members == 0 {
            return Err(FrameError::NoMembers);
        }
        if timestamps.len() != steps {
            return Err(FrameError::Length {
                what: "timestamps",
                got: timestamps.len(),
                expected: steps,
            });
        }
        if predictions.len() != steps * members {
            return Err(FrameError::Length {
                what: "predictions",
                got: predictions.len(),
                expected: steps * members,
            });
        }
        if !(q > T::zero() && q < T::one()) {
            return Err(FrameError::InvalidLevel(q.to_f64().unwrap_or(f64::NAN)));
        }
        if let Some(row) = (1..steps).find(|&i| timestamps[i] <= timestamps[i - 1]) {
            return Err(FrameError::Unordered {
                row,
                prev: timestamps[row - 1].clone(),
                next: timestamps[row].clone(),
            });
        }
        for (i, name) in member_names.iter().enumerate() {
            if member_names[..i].contains(name) {
                return Err(FrameError::DuplicateMember(name.clone()));
            }
        }
        Ok(Self {
            timestamps,
            targets,
            predictions,
            member_names,
            q,
        })
    }

    /// Frame with generated, zero-padded timestamps `t000000`, `t000001`, ...
    pub fn with_index(
        targets: Vec<T>,
        predictions: Vec<T>,
        member_names: Vec<String>,
        q: T,
    ) -> Result<Self, FrameError> {
        let timestamps = (0..targets.len()).map(|i| format!("t{i:06}")).collect();
        Self::new(timestamps, targets, predictions, member_names, q)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn members(&self) -> usize {
        self.member_names.len()
    }

    pub fn timestamps(&self) -> &[String] {
        &self.timestamps
    }

    pub fn targets(&self) -> &[T] {
        &self.targets
    }

    #[inline]
    pub fn prediction(&self, t: usize, k: usize) -> T {
        self.predictions[t * self.members() + k]
    }

    pub fn prediction_row(&self, t: usize) -> &[T] {
        let k = self.members();
        &self.predictions[t * k..(t + 1) * k]
    }

    pub fn member_names(&self) -> &[String] {
        &self.member_names
    }

    pub fn q(&self) -> T {
        self.q
    }

    /// Same data with member columns reordered: new column `i` is old column
    /// `perm[i]`.
    pub fn permuted_members(&self, perm: &[usize]) -> Self {
        let k = self.members();
        assert_eq!(perm.len(), k);
        let predictions = (0..self.len())
            .flat_map(|t| perm.iter().map(move |&p| self.prediction(t, p)))
            .collect();
        Self {
            timestamps: self.timestamps.clone(),
            targets: self.targets.clone(),
            predictions,
            member_names: perm.iter().map(|&p| self.member_names[p].clone()).collect(),
            q: self.q,
        }
    }
}
