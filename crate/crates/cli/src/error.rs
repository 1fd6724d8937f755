use std::fmt;
use std::path::Path;

use gridflow_core::datagen::DataError;
use gridflow_core::diffusion::DiffusionError;
use gridflow_core::evaluate::EvalError;
use gridflow_core::grid::CaseError;
use gridflow_core::neural::NeuralError;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorKind {
    Usage,
    File,
    Numerical,
    Reproducibility,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Reproducibility => 1,
            ErrorKind::Usage => 2,
            ErrorKind::File => 3,
            ErrorKind::Numerical => 4,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CliError {
    pub kind: ErrorKind,
    pub code: i32,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
}

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        CliError {
            kind,
            code: kind.exit_code(),
            message: message.into(),
            path: None,
            step: None,
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Usage, message)
    }

    pub fn file(path: &Path, message: impl fmt::Display) -> Self {
        let mut e = Self::new(ErrorKind::File, message.to_string());
        e.path = Some(path.display().to_string());
        e
    }

    pub fn numerical(step: Option<usize>, message: impl Into<String>) -> Self {
        let mut e = Self::new(ErrorKind::Numerical, message);
        e.step = step;
        e
    }

    pub fn at(mut self, path: &Path) -> Self {
        if self.path.is_none() {
            self.path = Some(path.display().to_string());
        }
        self
    }

    /// One JSON object on one line.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("error serializes")
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new(ErrorKind::File, e.to_string())
    }
}

impl From<CaseError> for CliError {
    fn from(e: CaseError) -> Self {
        Self::new(ErrorKind::File, e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Aborted { record, .. } => Self::numerical(Some(record), e.to_string()),
            other => Self::new(ErrorKind::File, other.to_string()),
        }
    }
}

impl From<NeuralError> for CliError {
    fn from(e: NeuralError) -> Self {
        Self::new(ErrorKind::File, e.to_string())
    }
}

impl From<DiffusionError> for CliError {
    fn from(e: DiffusionError) -> Self {
        match e {
            DiffusionError::NonFinite { step, .. } => Self::numerical(Some(step), e.to_string()),
            DiffusionError::Schedule(_) => Self::usage(e.to_string()),
            DiffusionError::Data(d) => d.into(),
            other => Self::new(ErrorKind::File, other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Training { step } => Self::numerical(Some(step), e.to_string()),
            EvalError::Data(d) => d.into(),
            other => Self::new(ErrorKind::File, other.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_is_single_json_object() {
        let e = CliError::numerical(Some(17), "non-finite\nvalue").at(Path::new("a b.csv"));
        let line = e.to_line();
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["code"], 4);
        assert_eq!(v["kind"], "numerical");
        assert_eq!(v["step"], 17);
        assert_eq!(v["path"], "a b.csv");
    }

    #[test]
    fn core_errors_map_to_codes() {
        let abort = DataError::Aborted {
            record: 3,
            attempts: 10,
            failures: 9,
        };
        assert_eq!(CliError::from(abort).code, 4);
        let nf = DiffusionError::NonFinite {
            step: 5,
            what: "sample trajectory",
        };
        assert_eq!(CliError::from(nf).step, Some(5));
        assert_eq!(CliError::from(DataError::Empty).code, 3);
        assert_eq!(CliError::from(EvalError::SizeMismatch { left: 1, right: 2 }).code, 3);
    }
}
