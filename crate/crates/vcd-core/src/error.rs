//! Operational errors. Shape and indexing bugs panic instead; see crate docs.

#[derive(thiserror::Error, Debug)]
pub enum CoreError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("loss became non-finite at step {step}")]
    Diverged { step: usize },
}

pub type Result<T> = std::result::Result<T, CoreError>;
