use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("tensor rank {rank} exceeds the supported maximum of 2")]
    RankTooHigh { rank: usize },
    #[error("shape {shape} does not match data length {len}")]
    ShapeDataMismatch { shape: String, len: usize },
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("node {node} ({op}): shape mismatch: {detail}")]
    ShapeMismatch {
        node: usize,
        op: String,
        detail: String,
    },
    #[error("leaf `{0}` is not bound")]
    UnboundLeaf(String),
    #[error("gradient root must be scalar, node {node} has shape {shape}")]
    NonScalarRoot { node: usize, shape: String },
    #[error("node {node}: non-finite value produced by {op}")]
    NonFinite { node: usize, op: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("class {0} is not registered")]
    UnknownClass(usize),
    #[error("input has dimension {got}, model expects {expected}")]
    InputDim { got: usize, expected: usize },
    #[error("class set is empty")]
    EmptyClassSet,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no prototype stored for class {0}")]
    MissingPrototype(usize),
    #[error("label {label} is outside the current task's class set")]
    LabelOutsideTask { label: usize },
    #[error("training data for task is empty")]
    EmptyTaskData,
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("evaluation sample set is empty")]
    EmptySampleSet,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metric requires at least {need} completed tasks, have {have}")]
    TooFewTasks { need: usize, have: usize },
    #[error("pre-training evaluation R[{i}][{j}] missing")]
    MissingPreEval { i: usize, j: usize },
    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),
}

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("invalid stream spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("configuration: {0}")]
    Config(String),
}

impl From<MetricsError> for RunnerError {
    fn from(e: MetricsError) -> Self {
        RunnerError::Pipeline(PipelineError::Metrics(e))
    }
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no run records to report")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<ModelError> for RunnerError {
    fn from(e: ModelError) -> Self {
        RunnerError::Pipeline(PipelineError::Model(e))
    }
}
