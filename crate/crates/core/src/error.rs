use std::fmt;

use thiserror::Error;

/// Location of a rollout inside a gradient estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RolloutIndex {
    pub iteration: Option<usize>,
    /// Direction index `i`.
    pub direction: usize,
    /// Inner sample index `j`.
    pub sample: usize,
    /// Sign index `k` (1 for `K + rU`, 2 for `K - rU`).
    pub sign: usize,
}

impl fmt::Display for RolloutIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(it) = self.iteration {
            write!(f, "iteration {it}, ")?;
        }
        write!(f, "i={}, j={}, k={}", self.direction, self.sample, self.sign)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Domain(String),

    #[error("non-finite entries in {0}")]
    NonFinite(&'static str),

    /// The matrix is not Hurwitz (continuous) or not Schur (discrete). For
    /// closed-loop matrices this is the signal that a gain lies outside the
    /// stabilizing set.
    #[error("{what} is not stable (stability margin {margin:e})")]
    Stability { what: &'static str, margin: f64 },

    #[error("{what} is rank deficient (sigma_min = {sigma_min:e}, sigma_max = {sigma_max:e})")]
    Rank { what: &'static str, sigma_min: f64, sigma_max: f64 },

    #[error("simulation diverged at t = {time}{}", .at.map(|a| format!(" ({a})")).unwrap_or_default())]
    Divergence { time: f64, at: Option<RolloutIndex> },

    /// Projected gradient on a model left the model's stabilizing set.
    #[error("iterate {iteration} is not stabilizing for the model")]
    IterateUnstable { iteration: usize },

    #[error("singular matrix: {0}")]
    Singular(&'static str),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("identification failed: {0}")]
    Identification(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors that stem from numerics (instability, rank loss,
    /// divergence) rather than from malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Stability { .. }
                | Error::IterateUnstable { .. }
                | Error::Rank { .. }
                | Error::Divergence { .. }
                | Error::Singular(_)
                | Error::Estimation(_)
                | Error::Identification(_)
                | Error::NonFinite(_)
        )
    }

    /// Short status tag for result tables.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::Stability { .. } => "unstable",
            Error::IterateUnstable { .. } => "iterate_unstable",
            Error::Rank { .. } | Error::Singular(_) => "rank",
            Error::Divergence { .. } => "divergence",
            Error::Identification(_) => "identification",
            Error::Estimation(_) | Error::NonFinite(_) => "estimation",
            Error::Dimension(_) | Error::Domain(_) | Error::Config(_) => "config",
            Error::Io(_) | Error::Json(_) => "io",
        }
    }

    pub(crate) fn with_rollout(self, idx: RolloutIndex) -> Self {
        match self {
            Error::Divergence { time, at: None } => Error::Divergence { time, at: Some(idx) },
            other => other,
        }
    }

    pub(crate) fn with_iteration(self, iteration: usize) -> Self {
        match self {
            Error::Divergence { time, at: Some(mut a) } => {
                a.iteration = Some(iteration);
                Error::Divergence { time, at: Some(a) }
            }
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
