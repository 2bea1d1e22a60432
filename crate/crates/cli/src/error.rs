use maskscan::ErrorClass;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Core(#[from] maskscan::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn field(field: &str, reason: &str) -> Self {
        CliError::Config(format!("`{field}` {reason}"))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Core(e) => match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_error_class() {
        assert_eq!(CliError::field("x", "bad").exit_code(), 2);
        assert_eq!(CliError::Data("gone".into()).exit_code(), 3);
        assert_eq!(CliError::from(maskscan::Error::Config { field: "beta".into(), reason: "must be positive".into() }).exit_code(), 2);
        assert_eq!(CliError::from(maskscan::Error::Data("short".into())).exit_code(), 3);
        assert_eq!(CliError::from(maskscan::Error::NonFinite("loss".into())).exit_code(), 4);
        assert_eq!(CliError::from(maskscan::Error::DegenerateCovariance { lambda: 1.0 }).exit_code(), 4);
    }
}
