//! Command failures carry an exit-code class next to the underlying error.

use std::fmt;
use std::path::Path;

use segpref_core::flowmatch::FlowError;
use segpref_core::tpo::TpoError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Runtime,
    Usage,
    Dependency,
    Numerical,
}

impl Kind {
    pub fn code(self) -> i32 {
        match self {
            Kind::Runtime => 1,
            Kind::Usage => 2,
            Kind::Dependency => 3,
            Kind::Numerical => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Runtime => "runtime",
            Kind::Usage => "usage",
            Kind::Dependency => "dependency",
            Kind::Numerical => "numerical",
        }
    }
}

pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn usage(error: impl Into<anyhow::Error>) -> Self {
        Self {
            kind: Kind::Usage,
            error: error.into(),
        }
    }

    pub fn missing(path: &Path, producer: &str) -> Self {
        Self {
            kind: Kind::Dependency,
            error: anyhow::anyhow!("missing {} (run `{producer}` first)", path.display()),
        }
    }

    /// One machine-parseable line: `error kind=<k> code=<n> message=<json string>`.
    pub fn line(&self) -> String {
        let msg = format!("{:#}", self.error);
        format!(
            "error kind={} code={} message={}",
            self.kind.name(),
            self.kind.code(),
            serde_json::Value::String(msg)
        )
    }
}

fn is_numerical(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        matches!(
            c.downcast_ref::<FlowError>(),
            Some(FlowError::Diverged { .. } | FlowError::NonFiniteLoss { .. } | FlowError::NonFiniteState { .. })
        ) || matches!(c.downcast_ref::<TpoError>(), Some(TpoError::NonFinite { .. }))
    })
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        let kind = if is_numerical(&error) {
            Kind::Numerical
        } else {
            Kind::Runtime
        };
        Self { kind, error }
    }
}

impl fmt::Debug for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.line())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification_and_line_format() {
        let f: Failure = FlowError::Diverged { step: 3, loss: 1e9 }.into();
        assert_eq!(f.kind, Kind::Numerical);
        let f: Failure = TpoError::EmptyDataset.into();
        assert_eq!(f.kind, Kind::Runtime);
        let f = Failure::missing(Path::new("out/params/base.json"), "train-base");
        let line = f.line();
        assert!(line.starts_with("error kind=dependency code=3 message=\""));
        assert!(line.contains("out/params/base.json"));
        assert!(!line.contains('\n'));
    }
}
