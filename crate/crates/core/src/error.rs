use thiserror::Error;

/// Errors raised by the editing pipeline and its numeric core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("quality gate failed: {0}")]
    Quality(String),
    #[error("malformed weight file: {0}")]
    Format(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}

macro_rules! shape_check {
    ($cond:expr, $($arg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err($crate::error::Error::Shape(format!($($arg)+)));
        }
    };
}

pub(crate) use contract;
pub(crate) use shape_check;
