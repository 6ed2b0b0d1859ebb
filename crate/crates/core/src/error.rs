use std::path::PathBuf;

use crate::losses::LossReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("pixel index ({row}, {col}) outside a {height}x{width} grid")]
    Index {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },

    #[error("point {0:?} lies on the vertical axis through the camera")]
    DegenerateDirection([f64; 3]),

    #[error("invalid height annotation: camera {camera} m, room {room} m")]
    InvalidAnnotation { camera: f64, room: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("operation `{0}` is not differentiable but lies on the gradient path")]
    UnsupportedOp(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("room generation failed: {0}")]
    Generation(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("degenerate polygon: {0}")]
    DegeneratePolygon(String),

    #[error("depth metrics need at least one valid pixel")]
    EmptyMask,

    #[error("non-finite loss at iteration {iteration}")]
    Divergence {
        iteration: usize,
        trajectory: Vec<LossReport>,
    },

    #[error("gradient check failed: {0}")]
    GradientCheck(String),

    #[error("schema error in {path}: {message}")]
    Schema { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn schema(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for numerical failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } | Error::GradientCheck(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn check_len(expected: usize, actual: usize) -> Result<()> {
        if expected == actual {
            Ok(())
        } else {
            Err(Error::LengthMismatch { expected, actual })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_contract() {
        let div = Error::Divergence {
            iteration: 3,
            trajectory: Vec::new(),
        };
        assert_eq!(div.exit_code(), 2);
        assert_eq!(Error::GradientCheck("photo".into()).exit_code(), 2);
        assert_eq!(Error::schema("a.json", "width").exit_code(), 1);
        assert_eq!(Error::Config("x".into()).exit_code(), 1);
    }

    #[test]
    fn schema_errors_name_the_file() {
        let e = Error::schema("dir/layout.json", "z_ceil must be positive");
        assert_eq!(e.to_string(), "schema error in dir/layout.json: z_ceil must be positive");
    }
}
