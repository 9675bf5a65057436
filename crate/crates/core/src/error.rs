use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("mu must lie in (0, 1), got {0}")]
    MuOutOfRange(f64),
    #[error("kernel is not invertible at weight {0}")]
    KernelNotInvertible(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("dimension must be positive")]
    BadDimension,
    #[error("near radius must be positive")]
    BadNearRadius,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("density below floor {floor}: search reached mu = {mu}")]
    DensityBelowFloor { mu: f64, floor: f64 },
    #[error("target ratio {0} unreachable for eta in [0, {1}]")]
    EtaUnreachable(f64, f64),
    #[error("point below sphere gap: y = {y} < |R1 - R2| = {gap}")]
    PointBelowSphereGap { y: f64, gap: f64 },
    #[error("point beyond sphere span: y = {y} > R1 + R2 = {span}")]
    PointBeyondSphereSpan { y: f64, span: f64 },
    #[error("certify parameter {name} = {value} outside (0, 1/3)")]
    CertifyParamOutOfRange { name: &'static str, value: f64 },
    #[error("scaling report needs at least 3 sweep points, got {0}")]
    TooFewSweepPoints(usize),
    #[error("invalid level plan: {0}")]
    InvalidPlan(String),
    #[error("LP grid error: {0}")]
    LpGrid(String),
    #[error("planted spec error: {0}")]
    PlantedSpec(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
