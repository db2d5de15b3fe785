use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("infeasible geometry: {0}")]
    InfeasibleGeometry(String),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("solver failure: {0}")]
    SolverFailure(String),
    #[error("exhaustive search is limited to M <= 4 and K <= 8 (got M={uavs}, K={users})")]
    SizeLimit { uavs: usize, users: usize },
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
