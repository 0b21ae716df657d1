use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} = {value} is outside [{lo}, {hi}]")]
    Range { what: &'static str, value: f64, lo: f64, hi: f64 },

    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    Shape { context: &'static str, expected: Vec<usize>, got: Vec<usize> },

    #[error("invalid parameter: {0}")]
    Invalid(String),

    #[error("unknown token id {0}")]
    UnknownToken(u32),

    #[error("token {0:?} missing from the token table")]
    MissingToken(&'static str),

    #[error("divergence at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("corpus holds no samples")]
    EmptyCorpus,

    #[error("no warp record for pose {0}; call render first")]
    MissingWarp(usize),

    #[error("structure map required by this operation")]
    MissingStructure,

    #[error("matrix square root failed: {0}")]
    Sqrtm(String),

    #[error("probe accuracy {accuracy:.3} on head {head} is below {floor}")]
    ProbeAccuracy { head: String, accuracy: f64, floor: f64 },

    #[error("container at {path}: {detail}")]
    Container { path: PathBuf, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_range(what: &'static str, value: f64, lo: f64, hi: f64) -> Result<()> {
    if value.is_nan() || value < lo || value > hi {
        Err(Error::Range { what, value, lo, hi })
    } else {
        Ok(())
    }
}
