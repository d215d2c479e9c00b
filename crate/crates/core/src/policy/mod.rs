//! The decision-policy language: a small expression language that turns
//! model predictions into a final decision or score, plus ε-greedy
//! exploration applied on top of the policy output.

mod ast;
mod eval;
mod explore;
mod parser;

use thiserror::Error;

pub use ast::{BinOp, Builtin, Expr, PolicyProgram, Stmt, TerminalKind};
pub use eval::{evaluate, evaluate_value, DecisionOutput, EvalContext};
pub use explore::{explore, explore_ranking, ExplorationConfig, ExplorationKind};
pub use parser::{parse_policy, MAX_DEPTH};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("syntax error at {line}:{col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("semantic error: {0}")]
    Semantic(String),
    #[error("evaluation error: {0}")]
    Eval(String),
}
