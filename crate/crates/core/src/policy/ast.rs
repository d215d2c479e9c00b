use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::Eq => "==",
        }
    }

    /// Binding strength; all binary operators are left-associative.
    pub(crate) fn precedence(self) -> u8 {
        match self {
            BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge | BinOp::Eq => 1,
            BinOp::Add | BinOp::Sub => 2,
            BinOp::Mul | BinOp::Div => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Builtin {
    If,
    Min,
    Max,
    Clamp,
    Log,
    Exp,
    Abs,
}

impl Builtin {
    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "if" => Builtin::If,
            "min" => Builtin::Min,
            "max" => Builtin::Max,
            "clamp" => Builtin::Clamp,
            "log" => Builtin::Log,
            "exp" => Builtin::Exp,
            "abs" => Builtin::Abs,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Builtin::If => "if",
            Builtin::Min => "min",
            Builtin::Max => "max",
            Builtin::Clamp => "clamp",
            Builtin::Log => "log",
            Builtin::Exp => "exp",
            Builtin::Abs => "abs",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Builtin::If | Builtin::Clamp => 3,
            Builtin::Min | Builtin::Max => 2,
            Builtin::Log | Builtin::Exp | Builtin::Abs => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Num(f64),
    /// Reference to a `let` binding.
    Var(String),
    Pred(String),
    Feature(String),
    Param(String),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Builtin, Vec<Expr>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalKind {
    /// `decide expr;` produces a boolean (or a choice index).
    Decide,
    /// `score expr;` produces a real score.
    Score,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Stmt {
    Let(String, Expr),
    Terminal(TerminalKind, Expr),
}

/// A parsed, semantically checked policy. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyProgram {
    pub statements: Vec<Stmt>,
    pub predictions: BTreeSet<String>,
    pub features: BTreeSet<String>,
    pub parameters: BTreeSet<String>,
}

impl PolicyProgram {
    pub fn kind(&self) -> TerminalKind {
        match self.statements.last() {
            Some(Stmt::Terminal(kind, _)) => *kind,
            // parse() guarantees the terminal statement comes last
            _ => unreachable!("program without terminal statement"),
        }
    }
}

fn fmt_num(v: f64, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    // `{}` on f64 prints the shortest string that reparses to the same value.
    write!(f, "{v}")
}

fn fmt_string(s: &str, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    f.write_str("\"")?;
    for c in s.chars() {
        match c {
            '"' => f.write_str("\\\"")?,
            '\\' => f.write_str("\\\\")?,
            c => write!(f, "{c}")?,
        }
    }
    f.write_str("\"")
}

impl Expr {
    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, min_prec: u8) -> fmt::Result {
        match self {
            Expr::Num(v) => fmt_num(*v, f),
            Expr::Var(name) => f.write_str(name),
            Expr::Pred(name) => {
                f.write_str("pred(")?;
                fmt_string(name, f)?;
                f.write_str(")")
            }
            Expr::Feature(name) => {
                f.write_str("feature(")?;
                fmt_string(name, f)?;
                f.write_str(")")
            }
            Expr::Param(name) => {
                f.write_str("param(")?;
                fmt_string(name, f)?;
                f.write_str(")")
            }
            Expr::Neg(inner) => {
                f.write_str("-")?;
                // unary minus binds tighter than every binary operator
                inner.fmt_prec(f, 4)
            }
            Expr::Binary(op, lhs, rhs) => {
                let p = op.precedence();
                let paren = p < min_prec;
                if paren {
                    f.write_str("(")?;
                }
                lhs.fmt_prec(f, p)?;
                write!(f, " {} ", op.symbol())?;
                rhs.fmt_prec(f, p + 1)?;
                if paren {
                    f.write_str(")")?;
                }
                Ok(())
            }
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    a.fmt_prec(f, 0)?;
                }
                f.write_str(")")
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

impl fmt::Display for PolicyProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for stmt in &self.statements {
            match stmt {
                Stmt::Let(name, e) => writeln!(f, "let {name} = {e};")?,
                Stmt::Terminal(TerminalKind::Decide, e) => writeln!(f, "decide {e};")?,
                Stmt::Terminal(TerminalKind::Score, e) => writeln!(f, "score {e};")?,
            }
        }
        Ok(())
    }
}
