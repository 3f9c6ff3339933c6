//! Coefficient expression language.
//!
//! Grammar (whitespace and newlines are insignificant):
//!
//! ```text
//! expr    := product (("+" | "-") product)*
//! product := unary (("*" | "/") unary)*
//! unary   := "-" unary | power
//! power   := atom ("^" unary)?
//! atom    := number | variable | func "(" expr ("," expr)* ")"
//!          | "(" expr ")" | "[" expr ("," expr)* "]"
//! number  := digits ["." digits] [("e" | "E") ["+" | "-"] digits]  |  "." digits ...
//! variable:= "t" | "y" | "x"i | "z"i | "u"i          (i >= 1)
//! func    := exp | log | sqrt | abs | tanh | sign     (one argument)
//!          | min | max                                (two arguments)
//! ```
//!
//! `^` binds tighter than unary minus (`-x^2 = -(x^2)`) and is right
//! associative; the other binary operators are left associative. Trees are
//! limited to depth 64.

use std::fmt;

use thiserror::Error;

pub const MAX_DEPTH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    T,
    Y,
    /// Zero-based component indices.
    X(usize),
    Z(usize),
    U(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Log,
    Sqrt,
    Abs,
    Tanh,
    Sign,
    Min,
    Max,
}

impl Func {
    fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "tanh" => Func::Tanh,
            "sign" => Func::Sign,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Tanh => "tanh",
            Func::Sign => "sign",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
    List(Vec<Expr>),
}

/// Declared dimensions and the variables an expression may read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scope {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub t: bool,
    pub y: bool,
    pub z: bool,
    pub u: bool,
}

impl Scope {
    pub fn full(n: usize, d: usize, k: usize) -> Self {
        Self { n, d, k, t: true, y: true, z: true, u: true }
    }

    /// `(t, x, u)`: drift and diffusion.
    pub fn state_control(n: usize, k: usize) -> Self {
        Self { n, d: 0, k, t: true, y: false, z: false, u: true }
    }

    /// `(t, x)`: feedback controls.
    pub fn feedback(n: usize) -> Self {
        Self { n, d: 0, k: 0, t: true, y: false, z: false, u: false }
    }

    /// `x` only: terminal conditions.
    pub fn terminal(n: usize) -> Self {
        Self { n, d: 0, k: 0, t: false, y: false, z: false, u: false }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("{line}:{column}: syntax error: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("{line}:{column}: unknown identifier `{name}`")]
    UnknownIdentifier { line: usize, column: usize, name: String },
    #[error("{line}:{column}: `{name}` is not available here ({message})")]
    Dimension { line: usize, column: usize, name: String, message: String },
    #[error("{line}:{column}: expression nested deeper than {MAX_DEPTH}")]
    TooDeep { line: usize, column: usize },
}

impl ParseError {
    pub fn location(&self) -> (usize, usize) {
        match self {
            ParseError::Syntax { line, column, .. }
            | ParseError::UnknownIdentifier { line, column, .. }
            | ParseError::Dimension { line, column, .. }
            | ParseError::TooDeep { line, column } => (*line, *column),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("log of non-positive value {0}")]
    LogDomain(f64),
    #[error("sqrt of negative value {0}")]
    SqrtDomain(f64),
    #[error("non-finite result in `{0}`")]
    NonFinite(String),
    #[error("variable {0:?} is not bound")]
    Unbound(Var),
    #[error("a list cannot be used as a number")]
    ListInArithmetic,
    #[error("lists cannot be differentiated")]
    ListDerivative,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Eof,
}

#[derive(Debug, Clone, PartialEq)]
struct Token {
    tok: Tok,
    line: usize,
    column: usize,
}

fn lex(src: &str) -> Result<Vec<Token>, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut line, mut col) = (1usize, 1usize);
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let (l0, c0) = (line, col);
        if c == '\n' {
            line += 1;
            col = 1;
            i += 1;
            continue;
        }
        if c.is_whitespace() {
            col += 1;
            i += 1;
            continue;
        }
        let single = match c {
            '+' => Some(Tok::Plus),
            '-' => Some(Tok::Minus),
            '*' => Some(Tok::Star),
            '/' => Some(Tok::Slash),
            '^' => Some(Tok::Caret),
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            '[' => Some(Tok::LBracket),
            ']' => Some(Tok::RBracket),
            ',' => Some(Tok::Comma),
            _ => None,
        };
        if let Some(tok) = single {
            out.push(Token { tok, line: l0, column: c0 });
            i += 1;
            col += 1;
            continue;
        }
        if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            if i < chars.len() && chars[i] == '.' {
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v: f64 = text.parse().map_err(|_| ParseError::Syntax {
                line: l0,
                column: c0,
                message: format!("malformed number `{text}`"),
            })?;
            if !v.is_finite() {
                return Err(ParseError::Syntax { line: l0, column: c0, message: format!("number `{text}` overflows") });
            }
            col += i - start;
            out.push(Token { tok: Tok::Num(v), line: l0, column: c0 });
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            col += i - start;
            out.push(Token { tok: Tok::Ident(chars[start..i].iter().collect()), line: l0, column: c0 });
            continue;
        }
        return Err(ParseError::Syntax { line: l0, column: c0, message: format!("unexpected character `{c}`") });
    }
    out.push(Token { tok: Tok::Eof, line, column: col });
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<Token>,
    pos: usize,
    scope: &'a Scope,
    depth: usize,
    /// Positions of currently open `(` and `[`.
    open: Vec<(usize, usize, char)>,
}

impl Parser<'_> {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn next(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error_at(&self, tok: &Token, message: String) -> ParseError {
        if tok.tok == Tok::Eof {
            if let Some(&(line, column, c)) = self.open.last() {
                return ParseError::Syntax { line, column, message: format!("unclosed `{c}`") };
            }
            return ParseError::Syntax {
                line: tok.line,
                column: tok.column,
                message: "unexpected end of input".into(),
            };
        }
        ParseError::Syntax { line: tok.line, column: tok.column, message }
    }

    fn enter(&mut self, tok: &Token) -> Result<(), ParseError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return Err(ParseError::TooDeep { line: tok.line, column: tok.column });
        }
        Ok(())
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let start = self.peek().clone();
        self.enter(&start)?;
        let mut lhs = self.product()?;
        loop {
            let op = match self.peek().tok {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => break,
            };
            self.next();
            let rhs = self.product()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        self.depth -= 1;
        Ok(lhs)
    }

    fn product(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek().tok {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => break,
            };
            self.next();
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.peek().tok == Tok::Minus {
            let t = self.next();
            self.enter(&t)?;
            let e = self.unary()?;
            self.depth -= 1;
            return Ok(Expr::Neg(Box::new(e)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.peek().tok == Tok::Caret {
            let t = self.next();
            self.enter(&t)?;
            let exp = self.unary()?;
            self.depth -= 1;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn close(&mut self, want: Tok, c: char) -> Result<(), ParseError> {
        let t = self.next();
        if t.tok != want {
            let found = describe(&t.tok);
            return Err(self.error_at(&t, format!("expected `{c}`, found {found}")));
        }
        self.open.pop();
        Ok(())
    }

    fn list_items(&mut self) -> Result<Vec<Expr>, ParseError> {
        let mut items = vec![self.expr()?];
        while self.peek().tok == Tok::Comma {
            self.next();
            items.push(self.expr()?);
        }
        Ok(items)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let t = self.next();
        match &t.tok {
            Tok::Num(v) => Ok(Expr::Num(*v)),
            Tok::LParen => {
                self.open.push((t.line, t.column, '('));
                let e = self.expr()?;
                self.close(Tok::RParen, ')')?;
                Ok(e)
            }
            Tok::LBracket => {
                self.open.push((t.line, t.column, '['));
                self.enter(&t)?;
                let items = self.list_items()?;
                self.depth -= 1;
                self.close(Tok::RBracket, ']')?;
                Ok(Expr::List(items))
            }
            Tok::Ident(name) => {
                if let Some(f) = Func::from_name(name) {
                    let p = self.next();
                    if p.tok != Tok::LParen {
                        return Err(self.error_at(&p, format!("expected `(` after `{name}`")));
                    }
                    self.open.push((p.line, p.column, '('));
                    self.enter(&t)?;
                    let args = self.list_items()?;
                    self.depth -= 1;
                    self.close(Tok::RParen, ')')?;
                    if args.len() != f.arity() {
                        return Err(ParseError::Syntax {
                            line: t.line,
                            column: t.column,
                            message: format!("`{name}` takes {} argument(s), got {}", f.arity(), args.len()),
                        });
                    }
                    return Ok(Expr::Call(f, args));
                }
                self.variable(name, &t).map(Expr::Var)
            }
            other => {
                let found = describe(other);
                Err(self.error_at(&t, format!("expected a number, variable, function or `(`, found {found}")))
            }
        }
    }

    fn variable(&self, name: &str, t: &Token) -> Result<Var, ParseError> {
        let s = self.scope;
        let unavailable =
            |message: String| ParseError::Dimension { line: t.line, column: t.column, name: name.to_string(), message };
        match name {
            "t" => return if s.t { Ok(Var::T) } else { Err(unavailable("time is not an argument".into())) },
            "y" => return if s.y { Ok(Var::Y) } else { Err(unavailable("y is not an argument".into())) },
            _ => {}
        }
        let (head, digits) = name.split_at(1);
        let index: Option<usize> =
            if !digits.is_empty() && digits.chars().all(|c| c.is_ascii_digit()) && !digits.starts_with('0') {
                digits.parse().ok()
            } else {
                None
            };
        let (Some(i), Some(h)) = (index, head.chars().next()) else {
            return Err(ParseError::UnknownIdentifier { line: t.line, column: t.column, name: name.to_string() });
        };
        let (allowed, dim, what) = match h {
            'x' => (true, s.n, "state"),
            'z' => (s.z, s.d, "z"),
            'u' => (s.u, s.k, "control"),
            _ => return Err(ParseError::UnknownIdentifier { line: t.line, column: t.column, name: name.to_string() }),
        };
        if !allowed {
            return Err(unavailable(format!("{what} is not an argument")));
        }
        if i > dim {
            return Err(unavailable(format!("{what} dimension is {dim}")));
        }
        Ok(match h {
            'x' => Var::X(i - 1),
            'z' => Var::Z(i - 1),
            _ => Var::U(i - 1),
        })
    }
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Num(v) => format!("number {v}"),
        Tok::Ident(s) => format!("`{s}`"),
        Tok::Plus => "`+`".into(),
        Tok::Minus => "`-`".into(),
        Tok::Star => "`*`".into(),
        Tok::Slash => "`/`".into(),
        Tok::Caret => "`^`".into(),
        Tok::LParen => "`(`".into(),
        Tok::RParen => "`)`".into(),
        Tok::LBracket => "`[`".into(),
        Tok::RBracket => "`]`".into(),
        Tok::Comma => "`,`".into(),
        Tok::Eof => "end of input".into(),
    }
}

/// Parses with every variable of the given dimensions in scope.
pub fn parse_expression(source: &str, n: usize, d: usize, k: usize) -> Result<Expr, ParseError> {
    parse_in(source, &Scope::full(n, d, k))
}

pub fn parse_in(source: &str, scope: &Scope) -> Result<Expr, ParseError> {
    let toks = lex(source)?;
    let mut p = Parser { toks, pos: 0, scope, depth: 0, open: Vec::new() };
    let e = p.expr()?;
    let t = p.peek().clone();
    if t.tok != Tok::Eof {
        let found = describe(&t.tok);
        return Err(ParseError::Syntax { line: t.line, column: t.column, message: format!("unexpected {found}") });
    }
    if e.depth() > MAX_DEPTH {
        return Err(ParseError::TooDeep { line: 1, column: 1 });
    }
    Ok(e)
}

/// Values bound to the variables.
#[derive(Debug, Clone, Copy, Default)]
pub struct Env<'a> {
    pub t: f64,
    pub x: &'a [f64],
    pub y: f64,
    pub z: &'a [f64],
    pub u: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Scalar(f64),
    List(Vec<Value>),
}

fn checked(v: f64, what: &str) -> Result<f64, EvalError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(EvalError::NonFinite(what.to_string()))
    }
}

impl Expr {
    pub fn num(v: f64) -> Self {
        Expr::Num(v)
    }

    pub fn depth(&self) -> usize {
        1 + match self {
            Expr::Num(_) | Expr::Var(_) => 0,
            Expr::Neg(a) => a.depth(),
            Expr::Bin(_, a, b) => a.depth().max(b.depth()),
            Expr::Call(_, a) | Expr::List(a) => a.iter().map(Expr::depth).max().unwrap_or(0),
        }
    }

    pub fn contains(&self, v: Var) -> bool {
        match self {
            Expr::Num(_) => false,
            Expr::Var(w) => *w == v,
            Expr::Neg(a) => a.contains(v),
            Expr::Bin(_, a, b) => a.contains(v) || b.contains(v),
            Expr::Call(_, a) | Expr::List(a) => a.iter().any(|e| e.contains(v)),
        }
    }

    fn is_constant(&self) -> bool {
        match self {
            Expr::Num(_) => true,
            Expr::Var(_) => false,
            Expr::Neg(a) => a.is_constant(),
            Expr::Bin(_, a, b) => a.is_constant() && b.is_constant(),
            Expr::Call(_, a) | Expr::List(a) => a.iter().all(Expr::is_constant),
        }
    }

    /// Evaluation with domain checks; lists evaluate element-wise.
    pub fn evaluate(&self, env: &Env<'_>) -> Result<Value, EvalError> {
        match self {
            Expr::List(items) => Ok(Value::List(items.iter().map(|e| e.evaluate(env)).collect::<Result<_, _>>()?)),
            _ => self.eval_scalar(env).map(Value::Scalar),
        }
    }

    pub fn eval_scalar(&self, env: &Env<'_>) -> Result<f64, EvalError> {
        match self {
            Expr::Num(v) => Ok(*v),
            Expr::Var(v) => {
                let get = |s: &[f64], i: usize| s.get(i).copied().ok_or(EvalError::Unbound(*v));
                match *v {
                    Var::T => Ok(env.t),
                    Var::Y => Ok(env.y),
                    Var::X(i) => get(env.x, i),
                    Var::Z(i) => get(env.z, i),
                    Var::U(i) => get(env.u, i),
                }
            }
            Expr::Neg(a) => Ok(-a.eval_scalar(env)?),
            Expr::Bin(op, a, b) => {
                let (a, b) = (a.eval_scalar(env)?, b.eval_scalar(env)?);
                match op {
                    BinOp::Add => checked(a + b, "+"),
                    BinOp::Sub => checked(a - b, "-"),
                    BinOp::Mul => checked(a * b, "*"),
                    BinOp::Div => {
                        if b == 0.0 {
                            Err(EvalError::DivisionByZero)
                        } else {
                            checked(a / b, "/")
                        }
                    }
                    BinOp::Pow => {
                        if a == 0.0 && b < 0.0 {
                            Err(EvalError::DivisionByZero)
                        } else {
                            checked(a.powf(b), "^")
                        }
                    }
                }
            }
            Expr::Call(f, args) => {
                let a = args[0].eval_scalar(env)?;
                match f {
                    Func::Exp => checked(a.exp(), "exp"),
                    Func::Log => {
                        if a <= 0.0 {
                            Err(EvalError::LogDomain(a))
                        } else {
                            Ok(a.ln())
                        }
                    }
                    Func::Sqrt => {
                        if a < 0.0 {
                            Err(EvalError::SqrtDomain(a))
                        } else {
                            Ok(a.sqrt())
                        }
                    }
                    Func::Abs => Ok(a.abs()),
                    Func::Tanh => Ok(a.tanh()),
                    Func::Sign => Ok(if a > 0.0 {
                        1.0
                    } else if a < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }),
                    Func::Min => Ok(a.min(args[1].eval_scalar(env)?)),
                    Func::Max => Ok(a.max(args[1].eval_scalar(env)?)),
                }
            }
            Expr::List(_) => Err(EvalError::ListInArithmetic),
        }
    }

    /// Evaluation that maps every error to NaN, for use inside solvers
    /// which reject non-finite coefficients themselves.
    pub fn eval_or_nan(&self, env: &Env<'_>) -> f64 {
        self.eval_scalar(env).unwrap_or(f64::NAN)
    }

    /// Symbolic derivative, simplified.
    pub fn diff(&self, v: Var) -> Result<Expr, EvalError> {
        Ok(self.diff_raw(v)?.simplify())
    }

    fn diff_raw(&self, v: Var) -> Result<Expr, EvalError> {
        use Expr::*;
        let b = Box::new;
        Ok(match self {
            Num(_) => Num(0.0),
            Var(w) => Num(if *w == v { 1.0 } else { 0.0 }),
            Neg(a) => Neg(b(a.diff_raw(v)?)),
            Bin(op, l, r) => {
                let (dl, dr) = (l.diff_raw(v)?, r.diff_raw(v)?);
                match op {
                    BinOp::Add => Bin(BinOp::Add, b(dl), b(dr)),
                    BinOp::Sub => Bin(BinOp::Sub, b(dl), b(dr)),
                    BinOp::Mul => mul_add(dl, (**r).clone(), (**l).clone(), dr),
                    BinOp::Div => Bin(
                        BinOp::Sub,
                        b(Bin(BinOp::Div, b(dl), r.clone())),
                        b(Bin(
                            BinOp::Div,
                            b(Bin(BinOp::Mul, l.clone(), b(dr))),
                            b(Bin(BinOp::Pow, r.clone(), b(Num(2.0)))),
                        )),
                    ),
                    BinOp::Pow => {
                        if !r.contains_any_var() {
                            // c * l^(c - 1) * l'
                            Bin(
                                BinOp::Mul,
                                b(Bin(
                                    BinOp::Mul,
                                    r.clone(),
                                    b(Bin(BinOp::Pow, l.clone(), b(Bin(BinOp::Sub, r.clone(), b(Num(1.0)))))),
                                )),
                                b(dl),
                            )
                        } else {
                            // l^r (r' log l + r l' / l)
                            Bin(
                                BinOp::Mul,
                                b(self.clone()),
                                b(Bin(
                                    BinOp::Add,
                                    b(Bin(BinOp::Mul, b(dr), b(Call(Func::Log, vec![(**l).clone()])))),
                                    b(Bin(BinOp::Div, b(Bin(BinOp::Mul, r.clone(), b(dl))), l.clone())),
                                )),
                            )
                        }
                    }
                }
            }
            Call(f, args) => {
                let a = &args[0];
                let da = a.diff_raw(v)?;
                let outer = match f {
                    Func::Exp => self.clone(),
                    Func::Log => return Ok(Bin(BinOp::Div, b(da), b(a.clone()))),
                    Func::Sqrt => return Ok(Bin(BinOp::Div, b(da), b(Bin(BinOp::Mul, b(Num(2.0)), b(self.clone()))))),
                    Func::Abs => Call(Func::Sign, vec![a.clone()]),
                    Func::Tanh => Bin(BinOp::Sub, b(Num(1.0)), b(Bin(BinOp::Pow, b(self.clone()), b(Num(2.0))))),
                    Func::Sign => return Ok(Num(0.0)),
                    Func::Min | Func::Max => {
                        // min(a, c) = (a + c - |a - c|) / 2, max with `+`
                        let c = &args[1];
                        let dc = c.diff_raw(v)?;
                        let s = Call(Func::Sign, vec![Bin(BinOp::Sub, b(a.clone()), b(c.clone()))]);
                        let jump = Bin(BinOp::Mul, b(s), b(Bin(BinOp::Sub, b(da.clone()), b(dc.clone()))));
                        let op = if *f == Func::Min { BinOp::Sub } else { BinOp::Add };
                        return Ok(Bin(BinOp::Div, b(Bin(op, b(Bin(BinOp::Add, b(da), b(dc))), b(jump))), b(Num(2.0))));
                    }
                };
                Bin(BinOp::Mul, b(outer), b(da))
            }
            List(_) => return Err(EvalError::ListDerivative),
        })
    }

    fn contains_any_var(&self) -> bool {
        !self.is_constant()
    }

    /// Constant folding and removal of neutral elements.
    pub fn simplify(&self) -> Expr {
        use Expr::*;
        match self {
            Num(_) | Var(_) => self.clone(),
            Neg(a) => match a.simplify() {
                Num(v) => Num(-v),
                Neg(inner) => *inner,
                s => Neg(Box::new(s)),
            },
            Bin(op, l, r) => {
                let (l, r) = (l.simplify(), r.simplify());
                if let (Num(a), Num(c)) = (&l, &r) {
                    let v = match op {
                        BinOp::Add => a + c,
                        BinOp::Sub => a - c,
                        BinOp::Mul => a * c,
                        BinOp::Div => a / c,
                        BinOp::Pow => a.powf(*c),
                    };
                    if v.is_finite() && !(*op == BinOp::Div && *c == 0.0) {
                        return Num(v);
                    }
                }
                let is = |e: &Expr, v: f64| matches!(e, Num(x) if *x == v);
                match op {
                    BinOp::Add if is(&l, 0.0) => r,
                    BinOp::Add | BinOp::Sub if is(&r, 0.0) => l,
                    BinOp::Sub if is(&l, 0.0) => Neg(Box::new(r)).simplify(),
                    BinOp::Mul if is(&l, 0.0) || is(&r, 0.0) => Num(0.0),
                    BinOp::Mul if is(&l, 1.0) => r,
                    BinOp::Mul | BinOp::Div if is(&r, 1.0) => l,
                    BinOp::Div if is(&l, 0.0) => Num(0.0),
                    BinOp::Pow if is(&r, 0.0) => Num(1.0),
                    BinOp::Pow if is(&r, 1.0) => l,
                    _ => Bin(*op, Box::new(l), Box::new(r)),
                }
            }
            Call(f, args) => {
                let args: Vec<Expr> = args.iter().map(Expr::simplify).collect();
                let folded = Call(*f, args);
                if folded.is_constant() {
                    if let Ok(v) = folded.eval_scalar(&Env::default()) {
                        return Num(v);
                    }
                }
                folded
            }
            List(items) => List(items.iter().map(Expr::simplify).collect()),
        }
    }
}

fn mul_add(a: Expr, b: Expr, c: Expr, d: Expr) -> Expr {
    Expr::Bin(
        BinOp::Add,
        Box::new(Expr::Bin(BinOp::Mul, Box::new(a), Box::new(b))),
        Box::new(Expr::Bin(BinOp::Mul, Box::new(c), Box::new(d))),
    )
}

fn prec(e: &Expr) -> u8 {
    match e {
        Expr::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
        Expr::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
        Expr::Neg(_) => 3,
        Expr::Num(v) if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) => 3,
        Expr::Bin(BinOp::Pow, ..) => 4,
        _ => 5,
    }
}

fn op_prec(op: BinOp) -> u8 {
    match op {
        BinOp::Add | BinOp::Sub => 1,
        BinOp::Mul | BinOp::Div => 2,
        BinOp::Pow => 4,
    }
}

fn op_str(op: BinOp) -> &'static str {
    match op {
        BinOp::Add => " + ",
        BinOp::Sub => " - ",
        BinOp::Mul => "*",
        BinOp::Div => "/",
        BinOp::Pow => "^",
    }
}

struct Wrapped<'a>(&'a Expr, bool);

impl fmt::Display for Wrapped<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.1 {
            write!(f, "({})", self.0)
        } else {
            write!(f, "{}", self.0)
        }
    }
}

/// Prints with the fewest parentheses that re-parse to the same tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v}"),
            Expr::Var(v) => match v {
                Var::T => f.write_str("t"),
                Var::Y => f.write_str("y"),
                Var::X(i) => write!(f, "x{}", i + 1),
                Var::Z(i) => write!(f, "z{}", i + 1),
                Var::U(i) => write!(f, "u{}", i + 1),
            },
            Expr::Neg(a) => write!(f, "-{}", Wrapped(a, prec(a) < 3)),
            Expr::Bin(op, l, r) => {
                let p = op_prec(*op);
                let (wl, wr) = if *op == BinOp::Pow {
                    // right associative; the base must be an atom
                    (prec(l) <= 4, prec(r) < 3)
                } else {
                    (prec(l) < p, prec(r) <= p)
                };
                write!(f, "{}{}{}", Wrapped(l, wl), op_str(*op), Wrapped(r, wr))
            }
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
            Expr::List(items) => {
                f.write_str("[")?;
                for (i, a) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str("]")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> Expr {
        parse_expression(s, 2, 2, 2).unwrap()
    }

    fn ev(s: &str, x: &[f64], z: &[f64], u: &[f64]) -> f64 {
        p(s).eval_scalar(&Env { t: 0.5, x, y: 0.25, z, u }).unwrap()
    }

    #[test]
    fn zero_literal() {
        assert_eq!(p("0"), Expr::Num(0.0));
    }

    #[test]
    fn quadratic_generator() {
        let z = [0.3, -1.2];
        assert!((ev("0.5*(z1^2 + z2^2)", &[0.0, 0.0], &z, &[0.0, 0.0]) - 0.5 * (0.09 + 1.44)).abs() < 1e-15);
    }

    #[test]
    fn unbalanced_parenthesis_is_located() {
        let e = parse_expression("x1*(", 1, 1, 1).unwrap_err();
        assert_eq!(e.location(), (1, 4));
    }

    #[test]
    fn basic_evaluation() {
        assert_eq!(ev("exp(0)", &[0.0; 2], &[0.0; 2], &[0.0; 2]), 1.0);
        assert_eq!(ev("x1 + 2*u1", &[3.0, 0.0], &[0.0; 2], &[0.5, 0.0]), 4.0);
    }

    #[test]
    fn precedence_and_associativity() {
        let x = [2.0, 3.0];
        let o = [0.0; 2];
        assert_eq!(ev("-x1^2", &x, &o, &o), -4.0);
        assert_eq!(ev("2^3^2", &x, &o, &o), 512.0);
        assert_eq!(ev("x2 - x1 - 1", &x, &o, &o), 0.0);
        assert_eq!(ev("12/x1/x2", &x, &o, &o), 2.0);
        assert_eq!(ev("2*-x1", &x, &o, &o), -4.0);
        assert_eq!(ev("x1^-1", &x, &o, &o), 0.5);
        assert_eq!(ev("min(x1, x2) + max(x1, x2)", &x, &o, &o), 5.0);
    }

    #[test]
    fn scope_and_identifier_errors() {
        assert!(matches!(parse_expression("x3", 2, 1, 1), Err(ParseError::Dimension { .. })));
        assert!(matches!(parse_expression("x0", 2, 1, 1), Err(ParseError::UnknownIdentifier { .. })));
        assert!(matches!(parse_expression("foo + 1", 2, 1, 1), Err(ParseError::UnknownIdentifier { column: 1, .. })));
        assert!(matches!(parse_in("z1", &Scope::state_control(1, 1)), Err(ParseError::Dimension { .. })));
        assert!(matches!(parse_in("t + x1", &Scope::terminal(1)), Err(ParseError::Dimension { .. })));
        let e = parse_expression("x1 +\n  $", 1, 1, 1).unwrap_err();
        assert_eq!(e.location(), (2, 3));
        assert!(parse_expression("min(x1)", 1, 1, 1).is_err());
        assert!(parse_expression("1 2", 1, 1, 1).is_err());
    }

    #[test]
    fn depth_is_limited() {
        let deep = format!("{}x1{}", "(".repeat(70), ")".repeat(70));
        assert!(matches!(parse_expression(&deep, 1, 1, 1), Err(ParseError::TooDeep { .. })));
        let long = vec!["x1"; 80].join(" + ");
        assert!(matches!(parse_expression(&long, 1, 1, 1), Err(ParseError::TooDeep { .. })));
        let ok = format!("{}x1{}", "(".repeat(30), ")".repeat(30));
        assert!(parse_expression(&ok, 1, 1, 1).is_ok());
    }

    #[test]
    fn evaluation_errors_are_structured() {
        let o = Env::default();
        assert_eq!(p("1/(t - t)").eval_scalar(&o), Err(EvalError::DivisionByZero));
        assert!(matches!(p("log(0)").eval_scalar(&o), Err(EvalError::LogDomain(_))));
        assert!(matches!(p("sqrt(-1)").eval_scalar(&o), Err(EvalError::SqrtDomain(_))));
        assert!(matches!(p("exp(1000)").eval_scalar(&o), Err(EvalError::NonFinite(_))));
        assert!(matches!(p("x1").eval_scalar(&o), Err(EvalError::Unbound(_))));
        assert!(matches!(p("[1, 2] + 1").eval_scalar(&o), Err(EvalError::ListInArithmetic)));
        assert_eq!(
            p("[1, [2, t]]").evaluate(&o).unwrap(),
            Value::List(vec![Value::Scalar(1.0), Value::List(vec![Value::Scalar(2.0), Value::Scalar(0.0)])])
        );
    }

    #[test]
    fn printing_round_trips() {
        for s in [
            "0",
            "-x1^2",
            "(-x1)^2",
            "x1 - (x2 - 1)",
            "x1 - x2 - 1",
            "x1/(x2*u1)",
            "2^3^2",
            "(2^3)^2",
            "-(x1*x2)",
            "--x1",
            "x1^-u1",
            "x1^(-u1 + 1)",
            "exp(-t)*tanh(x1 + z2)/sqrt(abs(y) + 1)",
            "min(x1, max(u1, u2)) - sign(z1)",
            "[x1, [u1, 2.5e-7]]",
            "1e300*0.1",
            "a",
        ] {
            let Ok(e) = parse_expression(s, 2, 2, 2) else { continue };
            let printed = e.to_string();
            assert_eq!(parse_expression(&printed, 2, 2, 2).unwrap(), e, "{s} -> {printed}");
        }
    }

    #[test]
    fn derivatives_match_central_differences() {
        let cases = [
            "0.5*z1^2 + 0.3*z1*tanh(x1) - 0.2*y",
            "exp(-x1^2)/(1 + u1^2)",
            "sqrt(1 + x1^2)*log(2 + x2^2)",
            "x1^u1",
            "abs(x1 - 0.3)*sign(x2)",
            "min(x1, x2) + max(x1^2, u1)",
            "(x1 - x2)/(x1*x1 + 1)^3",
        ];
        let x = [0.7, -0.4];
        let z = [0.2, 0.1];
        let u = [1.3, 0.5];
        let h = 1e-6;
        for s in cases {
            let e = p(s);
            for (var, idx) in [(Var::X(0), 0), (Var::X(1), 1)] {
                let de = e.diff(var).unwrap();
                let env = Env { t: 0.5, x: &x, y: 0.25, z: &z, u: &u };
                let a = de.eval_scalar(&env).unwrap();
                let mut xp = x;
                xp[idx] += h;
                let mut xm = x;
                xm[idx] -= h;
                let fp = e.eval_scalar(&Env { x: &xp, ..env }).unwrap();
                let fm = e.eval_scalar(&Env { x: &xm, ..env }).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                assert!((a - fd).abs() < 1e-6 * (1.0 + a.abs()), "{s} d/d{var:?}: {a} vs {fd} ({de})");
            }
            let du = e.diff(Var::U(0)).unwrap();
            let env = Env { t: 0.5, x: &x, y: 0.25, z: &z, u: &u };
            let mut up = u;
            up[0] += h;
            let mut um = u;
            um[0] -= h;
            let fd = (e.eval_scalar(&Env { u: &up, ..env }).unwrap() - e.eval_scalar(&Env { u: &um, ..env }).unwrap())
                / (2.0 * h);
            let a = du.eval_scalar(&env).unwrap();
            assert!((a - fd).abs() < 1e-6 * (1.0 + a.abs()), "{s} d/du1: {a} vs {fd}");
        }
    }

    #[test]
    fn simplification_removes_neutral_elements() {
        assert_eq!(p("x1*1 + 0").simplify(), p("x1"));
        assert_eq!(p("0*x1 + 2*3").simplify(), Expr::Num(6.0));
        assert_eq!(p("x1^1 - 0").simplify(), p("x1"));
        assert_eq!(p("0 - x1").simplify(), p("-x1"));
        assert_eq!(p("x1").diff(Var::X(1)).unwrap(), Expr::Num(0.0));
        assert_eq!(p("3*x1^2").diff(Var::X(0)).unwrap().to_string(), "3*(2*x1)");
    }
}
