use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("cannot convert the zero vector to spherical coordinates")]
    ZeroVector,
    #[error("compensation factor {0} is outside (0, 1]")]
    Compensation(f64),
    #[error("circle projection needs an even-length vector, got {0}")]
    OddLength(usize),
    #[error("pair {0} has zero norm and cannot be projected onto the unit circle")]
    DegeneratePair(usize),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("target coincides with sensor position")]
    CoincidentTarget,
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("sensor index {index} out of range for {count} sensors")]
    UnknownSensor { index: usize, count: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("failed to parse scenario: {0}")]
    Parse(String),
    #[error("invalid value at `{field}`: {message}")]
    Invalid { field: String, message: String },
}

impl ConfigError {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssemblyError {
    #[error("debiased range {range} at instance {instance} is not positive")]
    NonPositiveRange { instance: usize, range: f64 },
    #[error("need at least two instances, got {0}")]
    TooFewInstances(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("normal matrix of the {block} block is rank deficient")]
    RankDeficient { block: String },
    #[error("ADMM stopped after {iterations} iterations (primal {primal:e}, dual {dual:e})")]
    AdmmNotConverged {
        iterations: usize,
        primal: f64,
        dual: f64,
    },
    #[error("pair {pair} has norm {norm}, not on the unit circle")]
    NotOnCircles { pair: usize, norm: f64 },
    #[error("{block} update failed in sweep {sweep}: {source}")]
    Block {
        block: String,
        sweep: usize,
        #[source]
        source: Box<SolverError>,
    },
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("failed to write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("malformed record in {path}: {message}")]
    Malformed { path: PathBuf, message: String },
}
