use std::fmt;
use std::process::ExitCode;

use gridvit::data::DataError;
use gridvit::evaluation::EvalError;
use gridvit::interpretability::InterpretError;
use gridvit::model::ModelError;
use gridvit::training::TrainError;

/// A failure mapped onto the stable exit-code contract.
#[derive(Debug)]
pub enum CliError {
    /// Bad config, flags, or input data. Exit 2.
    Config(String),
    /// Unreadable or unwritable files. Exit 3.
    Io(String),
    /// Training stopped on a non-finite loss or gradient. Exit 4.
    TrainAbort(String),
    /// Evaluation or inference failed. Exit 5.
    Eval(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::TrainAbort(_) => 4,
            CliError::Eval(_) => 5,
        })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) => write!(f, "I/O error: {m}"),
            CliError::TrainAbort(m) => write!(f, "training aborted: {m}"),
            CliError::Eval(m) => write!(f, "evaluation failed: {m}"),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } | TrainError::Numerics(_) => {
                CliError::TrainAbort(e.to_string())
            }
            TrainError::Data(d) => d.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<InterpretError> for CliError {
    fn from(e: InterpretError) -> Self {
        match e {
            InterpretError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Eval(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::NoSuccessfulFolds(_) => CliError::Eval(e.to_string()),
            EvalError::Validation(_) => CliError::Config(e.to_string()),
        }
    }
}

/// Checkpoint problems: unreadable files are I/O, everything else is an
/// inference failure.
pub fn checkpoint_error(e: ModelError) -> CliError {
    match e {
        ModelError::Io { .. } => CliError::Io(e.to_string()),
        _ => CliError::Eval(e.to_string()),
    }
}

pub fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}
