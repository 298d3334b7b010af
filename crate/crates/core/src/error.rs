use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch, {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: degenerate input, {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown {kind} {id}")]
    Lookup { kind: &'static str, id: usize },

    #[error("non-finite loss at task {task}, iteration {iteration}: {detail}")]
    NonFinite {
        task: usize,
        iteration: u64,
        detail: String,
    },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        detail: alloc::format!("{a:?} vs {b:?}"),
    }
}
