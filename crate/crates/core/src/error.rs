use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("degenerate geometry: UE at distance {distance:.3e} m from the base station")]
    DegenerateGeometry { distance: f64 },

    #[error("no propagation path reaches position ({x:.3}, {y:.3})")]
    NoCoverage { x: f64, y: f64 },

    #[error("no candidate radius reaches median cluster size {n_min}; best median {best_median} at r = {best_radius} m")]
    RadiusSearch {
        n_min: usize,
        best_median: f64,
        best_radius: f64,
    },

    #[error("cluster {cluster} has a single member and cannot be split")]
    SingletonCluster { cluster: usize },

    #[error("sampling exhausted for cluster {cluster} after {attempts} attempts")]
    SamplingExhausted { cluster: usize, attempts: usize },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape_pair(op: &str, a: &[usize], b: &[usize]) -> Self {
        Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
    }
}
