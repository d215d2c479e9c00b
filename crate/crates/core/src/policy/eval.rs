use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::ast::{BinOp, Builtin, Expr, PolicyProgram, Stmt, TerminalKind};
use super::PolicyError;

/// Values a policy may read. Lookups of names that are not present are
/// evaluation errors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalContext {
    pub predictions: BTreeMap<String, f64>,
    pub features: BTreeMap<String, f64>,
    pub parameters: BTreeMap<String, f64>,
}

impl EvalContext {
    pub fn with_prediction(mut self, name: &str, v: f64) -> Self {
        self.predictions.insert(name.to_string(), v);
        self
    }

    pub fn with_feature(mut self, name: &str, v: f64) -> Self {
        self.features.insert(name.to_string(), v);
        self
    }

    pub fn with_parameter(mut self, name: &str, v: f64) -> Self {
        self.parameters.insert(name.to_string(), v);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DecisionOutput {
    Boolean(bool),
    Real(f64),
}

impl DecisionOutput {
    pub fn as_f64(self) -> f64 {
        match self {
            DecisionOutput::Boolean(b) => f64::from(u8::from(b)),
            DecisionOutput::Real(v) => v,
        }
    }
}

fn lookup(map: &BTreeMap<String, f64>, kind: &'static str, name: &str) -> Result<f64, PolicyError> {
    map.get(name)
        .copied()
        .ok_or_else(|| PolicyError::Eval(format!("undefined {kind} `{name}`")))
}

fn truth(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn eval_expr(e: &Expr, ctx: &EvalContext, env: &HashMap<&str, f64>) -> Result<f64, PolicyError> {
    Ok(match e {
        Expr::Num(v) => *v,
        Expr::Var(name) => *env
            .get(name.as_str())
            .ok_or_else(|| PolicyError::Eval(format!("undefined binding `{name}`")))?,
        Expr::Pred(n) => lookup(&ctx.predictions, "prediction", n)?,
        Expr::Feature(n) => lookup(&ctx.features, "feature", n)?,
        Expr::Param(n) => lookup(&ctx.parameters, "parameter", n)?,
        Expr::Neg(inner) => -eval_expr(inner, ctx, env)?,
        Expr::Binary(op, l, r) => {
            let a = eval_expr(l, ctx, env)?;
            let b = eval_expr(r, ctx, env)?;
            match op {
                BinOp::Add => a + b,
                BinOp::Sub => a - b,
                BinOp::Mul => a * b,
                BinOp::Div => {
                    if b == 0.0 {
                        return Err(PolicyError::Eval("division by zero".into()));
                    }
                    a / b
                }
                BinOp::Lt => truth(a < b),
                BinOp::Le => truth(a <= b),
                BinOp::Gt => truth(a > b),
                BinOp::Ge => truth(a >= b),
                BinOp::Eq => truth(a == b),
            }
        }
        Expr::Call(func, args) => match func {
            Builtin::If => {
                if eval_expr(&args[0], ctx, env)? != 0.0 {
                    eval_expr(&args[1], ctx, env)?
                } else {
                    eval_expr(&args[2], ctx, env)?
                }
            }
            Builtin::Min => eval_expr(&args[0], ctx, env)?.min(eval_expr(&args[1], ctx, env)?),
            Builtin::Max => eval_expr(&args[0], ctx, env)?.max(eval_expr(&args[1], ctx, env)?),
            Builtin::Clamp => {
                let x = eval_expr(&args[0], ctx, env)?;
                let lo = eval_expr(&args[1], ctx, env)?;
                let hi = eval_expr(&args[2], ctx, env)?;
                if lo > hi {
                    return Err(PolicyError::Eval(format!("clamp bounds reversed ({lo} > {hi})")));
                }
                x.clamp(lo, hi)
            }
            Builtin::Log => {
                let x = eval_expr(&args[0], ctx, env)?;
                if x <= 0.0 {
                    return Err(PolicyError::Eval(format!("log of non-positive value {x}")));
                }
                x.ln()
            }
            Builtin::Exp => eval_expr(&args[0], ctx, env)?.exp(),
            Builtin::Abs => eval_expr(&args[0], ctx, env)?.abs(),
        },
    })
}

/// Evaluates a program. `decide` coerces through `!= 0`; `score` returns the
/// raw value. Non-finite results (e.g. from missing-feature NaNs) are errors.
pub fn evaluate(program: &PolicyProgram, ctx: &EvalContext) -> Result<DecisionOutput, PolicyError> {
    let v = evaluate_value(program, ctx)?;
    Ok(match program.kind() {
        TerminalKind::Decide => DecisionOutput::Boolean(v != 0.0),
        TerminalKind::Score => DecisionOutput::Real(v),
    })
}

/// The terminal expression as a raw number regardless of kind; used for
/// choice-of-k decisions and metric programs.
pub fn evaluate_value(program: &PolicyProgram, ctx: &EvalContext) -> Result<f64, PolicyError> {
    let mut env: HashMap<&str, f64> = HashMap::new();
    for stmt in &program.statements {
        match stmt {
            Stmt::Let(name, e) => {
                let v = eval_expr(e, ctx, &env)?;
                env.insert(name.as_str(), v);
            }
            Stmt::Terminal(_, e) => {
                let v = eval_expr(e, ctx, &env)?;
                if !v.is_finite() {
                    return Err(PolicyError::Eval(format!("non-finite result {v}")));
                }
                return Ok(v);
            }
        }
    }
    Err(PolicyError::Eval("program has no terminal statement".into()))
}
