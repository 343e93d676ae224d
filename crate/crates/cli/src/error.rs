use std::fmt;

use grcvit::complexity::ComplexityError;
use grcvit::estimator::EstimatorError;
use grcvit::image::ImageError;
use grcvit::model::ModelError;
use grcvit::tensor::TensorError;

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Code {
    Usage = 2,
    Io = 3,
    Numeric = 4,
}

#[derive(Debug)]
pub struct Failure {
    pub code: Code,
    pub error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type CliResult<T> = Result<T, Failure>;

pub fn fail(code: Code, msg: impl fmt::Display) -> Failure {
    Failure { code, error: anyhow::anyhow!("{msg}") }
}

/// Tag an arbitrary error with an exit code.
pub trait Tagged<T> {
    fn tag(self, code: Code, context: impl fmt::Display) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Tagged<T> for Result<T, E> {
    fn tag(self, code: Code, context: impl fmt::Display) -> CliResult<T> {
        self.map_err(|e| Failure { code, error: e.into().context(context.to_string()) })
    }
}

fn image_code(e: &ImageError) -> Code {
    match e {
        ImageError::InvalidSpec(_) | ImageError::ZeroDimension { .. } => Code::Usage,
        ImageError::BadBuffer { .. } => Code::Numeric,
        _ => Code::Io,
    }
}

fn complexity_code(e: &ComplexityError) -> Code {
    match e {
        ComplexityError::Image(i) => image_code(i),
        ComplexityError::EstimatorFile { .. } => Code::Io,
        ComplexityError::TooSmall { .. } | ComplexityError::InvalidLevel(_) => Code::Usage,
    }
}

fn estimator_code(e: &EstimatorError) -> Code {
    match e {
        EstimatorError::InvalidConfig(_) | EstimatorError::CorpusTooSmall(_) | EstimatorError::DuplicateId(_) => {
            Code::Usage
        }
        _ => Code::Numeric,
    }
}

fn model_code(e: &ModelError) -> Code {
    match e {
        ModelError::Config(_) | ModelError::Window { .. } => Code::Usage,
        ModelError::Checkpoint(_) | ModelError::Dataset(_) => Code::Io,
        ModelError::Image(i) => image_code(i),
        ModelError::Complexity(c) => complexity_code(c),
        ModelError::Estimator(s) => estimator_code(s),
        ModelError::Tensor(TensorError::Io(_)) => Code::Io,
        _ => Code::Numeric,
    }
}

macro_rules! classified {
    ($ty:ty, $f:ident) => {
        impl From<$ty> for Failure {
            fn from(e: $ty) -> Self {
                Failure { code: $f(&e), error: e.into() }
            }
        }
    };
}

classified!(ImageError, image_code);
classified!(ComplexityError, complexity_code);
classified!(EstimatorError, estimator_code);
classified!(ModelError, model_code);

impl From<TensorError> for Failure {
    fn from(e: TensorError) -> Self {
        let code = if matches!(e, TensorError::Io(_)) { Code::Io } else { Code::Numeric };
        Failure { code, error: e.into() }
    }
}
