use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("rank-deficient geometry: {0}")]
    RankDeficient(&'static str),

    #[error("quaternion has zero norm")]
    ZeroQuaternion,

    #[error("cup extraction left no surface")]
    ExtractionFailed,

    #[error("alignment energy became non-finite at iteration {iter}; try a smaller step size")]
    AlignmentDiverged { iter: usize },

    #[error("flow state became non-finite at step {step}")]
    FlowBlowUp { step: usize },

    #[error("cholesky factorisation failed after jitter escalation (last jitter {jitter:e})")]
    Conditioning { jitter: f64 },

    #[error("shape `{id}`: {source}")]
    Shape {
        id: String,
        #[source]
        source: alloc::boxed::Box<Error>,
    },

    #[error("training diverged at iteration {iter}")]
    TrainingDiverged { iter: usize, trace: Vec<f64> },

    #[error("newton iterations did not converge (gradient norm {grad_norm:e})")]
    NewtonNonConvergence { grad_norm: f64 },

    #[error("both classes are required")]
    SingleClass,

    #[error("class `{0}` has no members")]
    EmptyClass(&'static str),
}

impl Error {
    pub(crate) fn for_shape(self, id: impl Into<String>) -> Self {
        Error::Shape {
            id: id.into(),
            source: alloc::boxed::Box::new(self),
        }
    }
}
