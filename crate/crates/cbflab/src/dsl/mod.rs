//! Scalar expression language: parsing, evaluation, differentiation.
//!
//! Expressions are built over state variables `x1..xn` and input variables
//! `u1..um` (any identifier is accepted; those two families carry meaning
//! for systems). Arithmetic is `+ - * / ^` with `^` right-associative, and
//! the function set is `sin cos exp log sqrt abs sign`.

mod diff;
mod expr;
mod parse;

pub use diff::{differentiate, gradient};
pub use expr::{BinOp, Binding, BoundExpr, Expr, UnaryOp};
pub use parse::parse;

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DslError {
    #[error("syntax error at line {line}, column {col}: {message}")]
    Syntax {
        message: String,
        line: usize,
        col: usize,
    },
    #[error("variable `{0}` is not bound")]
    UnboundVariable(String),
    #[error("domain error: {reason} in `{subexpr}`")]
    Domain { reason: String, subexpr: String },
}
