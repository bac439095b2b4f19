use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite feature")]
    NonFiniteFeature,
    #[error("spatial covariance too large: {positions} positions exceeds cap {cap}")]
    SpatialCovarianceTooLarge { positions: usize, cap: usize },
    #[error("expected 2C channels, got {0}")]
    ExpectedEvenChannels(usize),
    #[error("invalid grouping: {groups} groups over an axis of {axis}")]
    InvalidGrouping { groups: usize, axis: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty domain")]
    EmptyDomain,
    #[error("instance/prediction mismatch: {0}")]
    InstancePredictionMismatch(String),

    #[error("no labeled features")]
    NoLabeledFeatures,
    #[error("not enough target features: requested {requested}, available {available}")]
    NotEnoughTargetFeatures { requested: usize, available: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("labeling collapsed")]
    LabelingCollapsed,

    #[error("empty cluster {0}")]
    EmptyCluster(u32),
    #[error("degenerate centroid for label {0}")]
    DegenerateCentroid(u32),
    #[error("label not in memory: {0}")]
    LabelNotInMemory(u32),
    #[error("non-finite loss term {0}")]
    NonFiniteLoss(&'static str),

    #[error("scene overcrowded: {persons} persons do not fit a {width}px wide scene")]
    SceneOvercrowded { persons: usize, width: usize },
    #[error("no ground truth")]
    NoGroundTruth,
    #[error("dataset not found: {0}")]
    DatasetNotFound(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("png: {0}")]
    Png(String),
}
