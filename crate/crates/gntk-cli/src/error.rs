use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] gntk_core::Error),
}

impl CliError {
    /// 2 for bad configuration or input, 3 for numerical failures.
    pub fn exit_code(&self) -> u8 {
        use gntk_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(E::Numerical(_) | E::Degenerate(_) | E::Diverged { .. }) => 3,
            CliError::Core(_) => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(config_err("x").exit_code(), 2);
        assert_eq!(CliError::from(gntk_core::Error::Validation("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(gntk_core::Error::Numerical("x".into())).exit_code(), 3);
    }
}
