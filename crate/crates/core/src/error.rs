use thiserror::Error;

/// Errors raised by the numerical and statistical layers.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("parameter outside the family domain: {0}")]
    Domain(String),
    #[error("infeasible joint probability: {0}")]
    Infeasible(String),
    #[error("weak instrument: {0}")]
    WeakInstrument(String),
    #[error("assumption violated: {0}")]
    Assumption(String),
    #[error("degenerate weights: w(d,0) and w(d,1) coincide ({0})")]
    DegenerateWeight(String),
    #[error("no convergence: {0}")]
    NonConvergence(String),
    #[error("separation detected in columns {columns:?}{}", fmt_grid(.grid_point))]
    Separation {
        columns: Vec<usize>,
        grid_point: Option<f64>,
    },
    #[error("design matrix is rank deficient: {0}")]
    RankDeficient(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("cell collapse at treatment level {0}")]
    CellCollapse(usize),
    #[error("quantile index {tau} is {side} the grid range")]
    Boundary { tau: f64, side: &'static str },
    #[error("budget exceeded: estimated cost {estimate:.3e} exceeds limit {limit:.3e}")]
    Budget { estimate: f64, limit: f64 },
    #[error("too many failed bootstrap replicates: {failed} of {total}")]
    Bootstrap { failed: usize, total: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
}

fn fmt_grid(g: &Option<f64>) -> String {
    match g {
        Some(v) => format!(" at grid point {v}"),
        None => String::new(),
    }
}

impl Error {
    /// True for failures that stem from violated identifying assumptions
    /// (relevance, dominance, feasibility) rather than numerics.
    pub fn is_assumption(&self) -> bool {
        matches!(
            self,
            Error::Assumption(_)
                | Error::WeakInstrument(_)
                | Error::Infeasible(_)
                | Error::DegenerateWeight(_)
        )
    }

    /// Attach a grid point to a separation error, leaving other variants alone.
    pub fn at_grid(self, y: f64) -> Error {
        match self {
            Error::Separation { columns, .. } => Error::Separation {
                columns,
                grid_point: Some(y),
            },
            Error::NonConvergence(m) => Error::NonConvergence(format!("{m} (grid point {y})")),
            Error::RankDeficient(m) => Error::RankDeficient(format!("{m} (grid point {y})")),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
