//! Crate-wide error type.

use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by any layer of the solver core.
#[derive(Debug)]
pub enum Error {
    /// Reference-element construction or evaluation failure.
    RefElem(String),
    /// Mesh file syntax error with 1-based line number.
    MeshParse { line: usize, msg: String },
    /// Semantic mesh failure (non-conforming faces, degenerate cells, ...).
    Mesh(String),
    /// Storage-layout construction failure.
    Layout(String),
    /// Flux-expression type or shape error. The path locates the offending
    /// node within the expression tree.
    Flux { path: String, msg: String },
    /// Kernel-plan or source-generation failure.
    Codegen(String),
    /// Kernel dialect syntax or semantic error with source position.
    Dialect { line: usize, col: usize, msg: String },
    /// Backend compilation failure (includes the compiler diagnostics).
    Compile(String),
    /// Kernel launch / buffer / queue failure.
    Executor(String),
    /// Autotuner failure (no admissible plan, cache I/O, ...).
    Tune(String),
    /// Configuration / argument validation failure.
    Config(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::RefElem(msg) => write!(f, "reference element: {msg}"),
            Error::MeshParse { line, msg } => write!(f, "mesh parse error at line {line}: {msg}"),
            Error::Mesh(msg) => write!(f, "mesh: {msg}"),
            Error::Layout(msg) => write!(f, "layout: {msg}"),
            Error::Flux { path, msg } => write!(f, "flux expression at {path}: {msg}"),
            Error::Codegen(msg) => write!(f, "codegen: {msg}"),
            Error::Dialect { line, col, msg } => {
                write!(f, "kernel dialect error at {line}:{col}: {msg}")
            }
            Error::Compile(msg) => write!(f, "kernel compilation failed: {msg}"),
            Error::Executor(msg) => write!(f, "executor: {msg}"),
            Error::Tune(msg) => write!(f, "autotune: {msg}"),
            Error::Config(msg) => write!(f, "config: {msg}"),
            Error::Io(e) => write!(f, "i/o: {e}"),
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

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
