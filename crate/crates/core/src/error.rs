use thiserror::Error;

#[derive(Debug, Error)]
pub enum MastError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("format error: {0}")]
    Format(String),

    /// The worst token is reported as a flat index into the token grid
    /// together with its allocated style mass `pi_star * sum_i M_i(q)`.
    #[error("infeasible masks: token {token} allocates style mass {value:.6} > 1")]
    InfeasibleMasks { token: usize, value: f64 },

    #[error("degenerate logits: {0}")]
    DegenerateLogits(String),

    #[error("singular least-squares fit: {0}")]
    SingularFit(String),

    #[error("empty boundary band: masks have no 0.5 level crossing")]
    EmptyBand,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl MastError {
    /// True when the error was caused by caller-supplied data rather than an
    /// internal failure. The CLI maps these to exit code 2.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, MastError::SingularFit(_))
    }
}

pub type Result<T> = std::result::Result<T, MastError>;

pub(crate) fn invalid(msg: impl Into<String>) -> MastError {
    MastError::InvalidInput(msg.into())
}
