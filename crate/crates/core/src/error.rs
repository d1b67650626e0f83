use std::fmt;
use std::io;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug)]
pub enum Error {
    /// Operand shapes are incompatible for the requested op.
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single shape is invalid for the op (axis out of range, bad reshape...).
    InvalidShape {
        op: &'static str,
        msg: String,
    },
    /// Caller violated a documented precondition.
    Contract(String),
    /// Model or training configuration is invalid.
    Config(String),
    /// Feature map extent not divisible by the effective patch size.
    PatchDivisibility {
        stage: Option<usize>,
        height: usize,
        width: usize,
        patch: usize,
    },
    /// Binary file does not match the expected layout.
    Format(String),
    /// Loss became NaN or infinite during training.
    Diverged {
        step: usize,
        loss: f64,
    },
    Io(io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidShape {
            op,
            msg: msg.into(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::InvalidShape { op, msg } => write!(f, "{op}: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Config(msg) => write!(f, "invalid config: {msg}"),
            Error::PatchDivisibility {
                stage,
                height,
                width,
                patch,
            } => {
                if let Some(s) = stage {
                    write!(f, "stage {s}: ")?;
                }
                write!(
                    f,
                    "feature map {height}x{width} is not divisible by patch size {patch}"
                )
            }
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Diverged { step, loss } => {
                write!(f, "training diverged at step {step}: loss = {loss}")
            }
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}
