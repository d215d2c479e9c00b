//! Recursive-descent parser for the policy language.
//!
//! ```text
//! program := stmt+
//! stmt    := "let" IDENT "=" expr ";" | ("decide" | "score") expr ";"
//! expr    := cmp
//! cmp     := add (("<" | "<=" | ">" | ">=" | "==") add)*
//! add     := mul (("+" | "-") mul)*
//! mul     := unary (("*" | "/") unary)*
//! unary   := "-" unary | atom
//! atom    := NUMBER | IDENT | "(" expr ")"
//!          | ("pred" | "feature" | "param") "(" STRING ")"
//!          | BUILTIN "(" expr ("," expr)* ")"
//! ```
//!
//! `#` starts a comment that runs to the end of the line.

use std::collections::BTreeSet;

use super::ast::{BinOp, Builtin, Expr, PolicyProgram, Stmt, TerminalKind};
use super::PolicyError;

/// Maximum expression tree depth.
pub const MAX_DEPTH: usize = 64;
/// Recursion guard for the descent itself (parentheses nest without adding
/// tree depth).
const MAX_NESTING: usize = 128;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Str(String),
    LParen,
    RParen,
    Comma,
    Semi,
    Assign,
    Op(BinOp),
    Minus,
    Eof,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

fn lex(src: &str) -> Result<Vec<Token>, PolicyError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);

    let err = |line, col, msg: String| PolicyError::Syntax { line, col, msg };

    while i < chars.len() {
        let c = chars[i];
        let (start_line, start_col) = (line, col);
        let mut push = |tok: Tok, width: usize, i: &mut usize, col: &mut usize| {
            out.push(Token { tok, line: start_line, col: start_col });
            *i += width;
            *col += width;
        };
        match c {
            '\n' => {
                i += 1;
                line += 1;
                col = 1;
            }
            c if c.is_whitespace() => {
                i += 1;
                col += 1;
            }
            '#' => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
            }
            '(' => push(Tok::LParen, 1, &mut i, &mut col),
            ')' => push(Tok::RParen, 1, &mut i, &mut col),
            ',' => push(Tok::Comma, 1, &mut i, &mut col),
            ';' => push(Tok::Semi, 1, &mut i, &mut col),
            '+' => push(Tok::Op(BinOp::Add), 1, &mut i, &mut col),
            '-' => push(Tok::Minus, 1, &mut i, &mut col),
            '*' => push(Tok::Op(BinOp::Mul), 1, &mut i, &mut col),
            '/' => push(Tok::Op(BinOp::Div), 1, &mut i, &mut col),
            '<' | '>' | '=' => {
                let next_eq = chars.get(i + 1) == Some(&'=');
                let (tok, w) = match (c, next_eq) {
                    ('<', true) => (Tok::Op(BinOp::Le), 2),
                    ('<', false) => (Tok::Op(BinOp::Lt), 1),
                    ('>', true) => (Tok::Op(BinOp::Ge), 2),
                    ('>', false) => (Tok::Op(BinOp::Gt), 1),
                    ('=', true) => (Tok::Op(BinOp::Eq), 2),
                    _ => (Tok::Assign, 1),
                };
                push(tok, w, &mut i, &mut col);
            }
            '"' => {
                let mut s = String::new();
                let mut j = i + 1;
                loop {
                    match chars.get(j) {
                        None | Some('\n') => {
                            return Err(err(start_line, start_col, "unterminated string".into()))
                        }
                        Some('"') => break,
                        Some('\\') => match chars.get(j + 1) {
                            Some(&e @ ('"' | '\\')) => {
                                s.push(e);
                                j += 2;
                            }
                            _ => {
                                return Err(err(line, col + (j - i), "invalid escape".into()))
                            }
                        },
                        Some(&ch) => {
                            s.push(ch);
                            j += 1;
                        }
                    }
                }
                let width = j + 1 - i;
                push(Tok::Str(s), width, &mut i, &mut col);
            }
            c if c.is_ascii_digit() || c == '.' => {
                let mut j = i;
                while j < chars.len() && (chars[j].is_ascii_digit() || chars[j] == '.') {
                    j += 1;
                }
                if j < chars.len() && (chars[j] == 'e' || chars[j] == 'E') {
                    let mut k = j + 1;
                    if k < chars.len() && (chars[k] == '+' || chars[k] == '-') {
                        k += 1;
                    }
                    if k < chars.len() && chars[k].is_ascii_digit() {
                        while k < chars.len() && chars[k].is_ascii_digit() {
                            k += 1;
                        }
                        j = k;
                    }
                }
                let text: String = chars[i..j].iter().collect();
                let v: f64 = text
                    .parse()
                    .map_err(|_| err(start_line, start_col, format!("invalid number `{text}`")))?;
                if !v.is_finite() {
                    return Err(err(start_line, start_col, format!("number out of range `{text}`")));
                }
                push(Tok::Num(v), j - i, &mut i, &mut col);
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut j = i;
                while j < chars.len() && (chars[j].is_ascii_alphanumeric() || chars[j] == '_') {
                    j += 1;
                }
                let text: String = chars[i..j].iter().collect();
                push(Tok::Ident(text), j - i, &mut i, &mut col);
            }
            other => {
                return Err(err(line, col, format!("unexpected character `{other}`")));
            }
        }
    }
    out.push(Token { tok: Tok::Eof, line, col });
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
    nesting: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error_here(&self, msg: impl Into<String>) -> PolicyError {
        let t = self.peek();
        PolicyError::Syntax { line: t.line, col: t.col, msg: msg.into() }
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<(), PolicyError> {
        if self.peek().tok == want {
            self.bump();
            Ok(())
        } else {
            Err(self.error_here(format!("expected {what}")))
        }
    }

    fn nested<T>(
        &mut self,
        f: impl FnOnce(&mut Self) -> Result<T, PolicyError>,
    ) -> Result<T, PolicyError> {
        if self.nesting >= MAX_NESTING {
            return Err(self.error_here("expression nested too deeply"));
        }
        self.nesting += 1;
        let r = f(self);
        self.nesting -= 1;
        r
    }

    fn stmt(&mut self) -> Result<Stmt, PolicyError> {
        let t = self.bump();
        let stmt = match t.tok {
            Tok::Ident(ref kw) if kw == "let" => {
                let name = match self.bump().tok {
                    Tok::Ident(n) if !is_reserved(&n) => n,
                    _ => {
                        self.pos -= 1;
                        return Err(self.error_here("expected binding name after `let`"));
                    }
                };
                self.expect(Tok::Assign, "`=`")?;
                Stmt::Let(name, self.expr()?)
            }
            Tok::Ident(ref kw) if kw == "decide" => Stmt::Terminal(TerminalKind::Decide, self.expr()?),
            Tok::Ident(ref kw) if kw == "score" => Stmt::Terminal(TerminalKind::Score, self.expr()?),
            _ => {
                return Err(PolicyError::Syntax {
                    line: t.line,
                    col: t.col,
                    msg: "expected `let`, `decide` or `score`".into(),
                })
            }
        };
        self.expect(Tok::Semi, "`;`")?;
        Ok(stmt)
    }

    fn expr(&mut self) -> Result<Expr, PolicyError> {
        self.nested(Self::comparison)
    }

    fn comparison(&mut self) -> Result<Expr, PolicyError> {
        let mut lhs = self.additive()?;
        while let Tok::Op(op @ (BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge | BinOp::Eq)) =
            self.peek().tok
        {
            self.bump();
            let rhs = self.additive()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn additive(&mut self) -> Result<Expr, PolicyError> {
        let mut lhs = self.multiplicative()?;
        loop {
            let op = match self.peek().tok {
                Tok::Op(BinOp::Add) => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => break,
            };
            self.bump();
            let rhs = self.multiplicative()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn multiplicative(&mut self) -> Result<Expr, PolicyError> {
        let mut lhs = self.unary()?;
        while let Tok::Op(op @ (BinOp::Mul | BinOp::Div)) = self.peek().tok {
            self.bump();
            let rhs = self.unary()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, PolicyError> {
        if self.peek().tok == Tok::Minus {
            self.bump();
            let inner = self.nested(Self::unary)?;
            return Ok(Expr::Neg(Box::new(inner)));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Expr, PolicyError> {
        let t = self.bump();
        match t.tok {
            Tok::Num(v) => Ok(Expr::Num(v)),
            Tok::LParen => {
                let e = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(e)
            }
            Tok::Ident(name) => {
                if self.peek().tok != Tok::LParen {
                    if is_reserved(&name) {
                        self.pos -= 1;
                        return Err(self.error_here(format!("`{name}` is reserved")));
                    }
                    return Ok(Expr::Var(name));
                }
                self.bump();
                match name.as_str() {
                    "pred" | "feature" | "param" => {
                        let key = match self.bump().tok {
                            Tok::Str(s) => s,
                            _ => {
                                self.pos -= 1;
                                return Err(self.error_here("expected string literal"));
                            }
                        };
                        self.expect(Tok::RParen, "`)`")?;
                        Ok(match name.as_str() {
                            "pred" => Expr::Pred(key),
                            "feature" => Expr::Feature(key),
                            _ => Expr::Param(key),
                        })
                    }
                    _ => {
                        let func = Builtin::from_name(&name).ok_or_else(|| PolicyError::Syntax {
                            line: t.line,
                            col: t.col,
                            msg: format!("unknown function `{name}`"),
                        })?;
                        let mut args = vec![self.expr()?];
                        while self.peek().tok == Tok::Comma {
                            self.bump();
                            args.push(self.expr()?);
                        }
                        self.expect(Tok::RParen, "`)`")?;
                        if args.len() != func.arity() {
                            return Err(PolicyError::Syntax {
                                line: t.line,
                                col: t.col,
                                msg: format!(
                                    "`{}` takes {} argument(s), got {}",
                                    func.name(),
                                    func.arity(),
                                    args.len()
                                ),
                            });
                        }
                        Ok(Expr::Call(func, args))
                    }
                }
            }
            _ => {
                self.pos -= 1;
                Err(self.error_here("expected expression"))
            }
        }
    }
}

fn is_reserved(name: &str) -> bool {
    matches!(name, "let" | "decide" | "score" | "pred" | "feature" | "param")
        || Builtin::from_name(name).is_some()
}

pub(crate) fn depth(e: &Expr) -> usize {
    match e {
        Expr::Num(_) | Expr::Var(_) | Expr::Pred(_) | Expr::Feature(_) | Expr::Param(_) => 1,
        Expr::Neg(inner) => 1 + depth(inner),
        Expr::Binary(_, l, r) => 1 + depth(l).max(depth(r)),
        Expr::Call(_, args) => 1 + args.iter().map(depth).max().unwrap_or(0),
    }
}

fn check_depth(e: &Expr) -> Result<(), PolicyError> {
    let d = depth(e);
    if d > MAX_DEPTH {
        Err(PolicyError::Semantic(format!("expression depth {d} exceeds {MAX_DEPTH}")))
    } else {
        Ok(())
    }
}

fn collect_refs(
    e: &Expr,
    defined: &BTreeSet<String>,
    program: &mut PolicyProgram,
) -> Result<(), PolicyError> {
    match e {
        Expr::Num(_) => {}
        Expr::Var(name) => {
            if !defined.contains(name) {
                return Err(PolicyError::Semantic(format!("undefined name `{name}`")));
            }
        }
        Expr::Pred(n) => {
            program.predictions.insert(n.clone());
        }
        Expr::Feature(n) => {
            program.features.insert(n.clone());
        }
        Expr::Param(n) => {
            program.parameters.insert(n.clone());
        }
        Expr::Neg(inner) => collect_refs(inner, defined, program)?,
        Expr::Binary(_, l, r) => {
            collect_refs(l, defined, program)?;
            collect_refs(r, defined, program)?;
        }
        Expr::Call(_, args) => {
            for a in args {
                collect_refs(a, defined, program)?;
            }
        }
    }
    Ok(())
}

/// Parses and semantically checks a policy source.
pub fn parse_policy(source: &str) -> Result<PolicyProgram, PolicyError> {
    let toks = lex(source)?;
    let mut parser = Parser { toks, pos: 0, nesting: 0 };
    let mut statements = Vec::new();
    while parser.peek().tok != Tok::Eof {
        statements.push(parser.stmt()?);
    }

    let mut program = PolicyProgram {
        statements: Vec::new(),
        predictions: BTreeSet::new(),
        features: BTreeSet::new(),
        parameters: BTreeSet::new(),
    };
    let mut defined = BTreeSet::new();
    let mut terminal_seen = false;
    for stmt in &statements {
        if terminal_seen {
            return Err(PolicyError::Semantic(
                "statements after the terminal `decide`/`score` statement".into(),
            ));
        }
        match stmt {
            Stmt::Let(name, e) => {
                check_depth(e)?;
                collect_refs(e, &defined, &mut program)?;
                if !defined.insert(name.clone()) {
                    return Err(PolicyError::Semantic(format!("`{name}` is bound twice")));
                }
            }
            Stmt::Terminal(_, e) => {
                check_depth(e)?;
                collect_refs(e, &defined, &mut program)?;
                terminal_seen = true;
            }
        }
    }
    if !terminal_seen {
        return Err(PolicyError::Semantic(
            "program needs exactly one `decide` or `score` statement".into(),
        ));
    }
    program.statements = statements;
    Ok(program)
}
