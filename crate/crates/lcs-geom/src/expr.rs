//! A small expression language for scalar coefficient functions.
//!
//! Variables are `x1..xn`; on even-dimensional patches `p1..pm` alias the
//! second half of the coordinates (cotangent fibers). Supported operations:
//! `+ - * /`, unary minus, `^` with an integer exponent, `exp`, `log`,
//! `sin`, `cos`. `^` binds tighter than unary minus, so `-x1^2` is
//! `-(x1^2)`. There is no implicit multiplication.
//!
//! Grammar (EBNF):
//! ```text
//! expr   := term   { ("+" | "-") term }
//! term   := factor { ("*" | "/") factor }
//! factor := "-" factor | power
//! power  := atom [ "^" [ "-" ] integer ]
//! atom   := number | variable | func "(" expr ")" | "(" expr ")"
//! func   := "exp" | "log" | "sin" | "cos"
//! ```
//! Binary operators of equal precedence associate to the left.

use std::fmt;

use thiserror::Error;

use crate::num::{Dual, Num};

/// Guard against division by (near-)zero denominators.
const DIV_GUARD: f64 = 1e-300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("syntax error at position {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown identifier `{name}` at position {pos}")]
    UnknownIdentifier { name: String, pos: usize },
    #[error("variable `{name}` out of range at position {pos} (dimension {dim})")]
    VarOutOfRange {
        name: String,
        pos: usize,
        dim: usize,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("division by zero in `{subexpr}`")]
    DivisionByZero { subexpr: String },
    #[error("log of non-positive value {value:.3e} in `{subexpr}`")]
    LogDomain { subexpr: String, value: f64 },
    #[error("negative power of zero in `{subexpr}`")]
    PowDomain { subexpr: String },
    #[error("expression expects dimension {expected}, point has {got}")]
    PointDimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Log,
    Sin,
    Cos,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sin => "sin",
            Func::Cos => "cos",
        }
    }
}

/// Abstract syntax tree of a scalar coefficient expression.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    /// 0-based coordinate index.
    Var(usize),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
    Pow(Box<Expr>, i32),
    Call(Func, Box<Expr>),
}

/// Value and exact gradient of an expression at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct DualValue {
    pub value: f64,
    pub partials: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

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
}

fn lex(text: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let bytes = text.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                toks.push((Tok::Plus, i));
                i += 1;
            }
            '-' => {
                toks.push((Tok::Minus, i));
                i += 1;
            }
            '*' => {
                toks.push((Tok::Star, i));
                i += 1;
            }
            '/' => {
                toks.push((Tok::Slash, i));
                i += 1;
            }
            '^' => {
                toks.push((Tok::Caret, i));
                i += 1;
            }
            '(' => {
                toks.push((Tok::LParen, i));
                i += 1;
            }
            ')' => {
                toks.push((Tok::RParen, i));
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_digit() || bytes[i] == b'.' || bytes[i] == b'e' || bytes[i] == b'E'
                        || ((bytes[i] == b'+' || bytes[i] == b'-')
                            && i > start
                            && (bytes[i - 1] == b'e' || bytes[i - 1] == b'E')))
                {
                    i += 1;
                }
                let s = &text[start..i];
                let v: f64 = s.parse().map_err(|_| ParseError::Syntax {
                    pos: start,
                    msg: format!("invalid number `{s}`"),
                })?;
                toks.push((Tok::Num(v), start));
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                toks.push((Tok::Ident(text[start..i].to_string()), start));
            }
            _ => {
                return Err(ParseError::Syntax {
                    pos: i,
                    msg: format!("unexpected character `{c}`"),
                })
            }
        }
    }
    Ok(toks)
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

struct Parser<'a> {
    toks: &'a [(Tok, usize)],
    pos: usize,
    dim: usize,
    end: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn here(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |(_, p)| *p)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|(t, _)| t.clone());
        self.pos += 1;
        t
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<(), ParseError> {
        let pos = self.here();
        match self.bump() {
            Some(t) if t == want => Ok(()),
            _ => Err(ParseError::Syntax {
                pos,
                msg: format!("expected {what}"),
            }),
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.bump();
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(Tok::Minus) => {
                    self.bump();
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.factor()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.bump();
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.factor()?));
                }
                Some(Tok::Slash) => {
                    self.bump();
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.factor()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        if let Some(Tok::Minus) = self.peek() {
            self.bump();
            return Ok(Expr::Neg(Box::new(self.factor()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if let Some(Tok::Caret) = self.peek() {
            self.bump();
            let mut sign = 1;
            if let Some(Tok::Minus) = self.peek() {
                self.bump();
                sign = -1;
            }
            let pos = self.here();
            match self.bump() {
                Some(Tok::Num(v)) if v.fract() == 0.0 && v.abs() < i32::MAX as f64 => {
                    Ok(Expr::Pow(Box::new(base), sign * v as i32))
                }
                _ => Err(ParseError::Syntax {
                    pos,
                    msg: "exponent must be an integer literal".into(),
                }),
            }
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let pos = self.here();
        match self.bump() {
            Some(Tok::Num(v)) => Ok(Expr::Const(v)),
            Some(Tok::LParen) => {
                let e = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                if let Some(func) = match name.as_str() {
                    "exp" => Some(Func::Exp),
                    "log" => Some(Func::Log),
                    "sin" => Some(Func::Sin),
                    "cos" => Some(Func::Cos),
                    _ => None,
                } {
                    self.expect(Tok::LParen, "`(` after function name")?;
                    let arg = self.expr()?;
                    self.expect(Tok::RParen, "`)`")?;
                    return Ok(Expr::Call(func, Box::new(arg)));
                }
                self.variable(&name, pos)
            }
            _ => Err(ParseError::Syntax {
                pos,
                msg: "expected a number, variable or `(`".into(),
            }),
        }
    }

    fn variable(&self, name: &str, pos: usize) -> Result<Expr, ParseError> {
        let (prefix, rest) = name.split_at(1);
        let index: usize = match rest.parse() {
            Ok(k) if k >= 1 => k,
            _ => {
                return Err(ParseError::UnknownIdentifier {
                    name: name.to_string(),
                    pos,
                })
            }
        };
        match prefix {
            "x" => {
                if index > self.dim {
                    return Err(ParseError::VarOutOfRange {
                        name: name.to_string(),
                        pos,
                        dim: self.dim,
                    });
                }
                Ok(Expr::Var(index - 1))
            }
            "p" => {
                // p_j aliases x_{n/2 + j} on an even-dimensional patch.
                if self.dim % 2 != 0 || index > self.dim / 2 {
                    return Err(ParseError::VarOutOfRange {
                        name: name.to_string(),
                        pos,
                        dim: self.dim,
                    });
                }
                Ok(Expr::Var(self.dim / 2 + index - 1))
            }
            _ => Err(ParseError::UnknownIdentifier {
                name: name.to_string(),
                pos,
            }),
        }
    }
}

/// Parse `text` as an expression over coordinates `x1..x<n>`.
pub fn parse(text: &str, n: usize) -> Result<Expr, ParseError> {
    if text.trim().is_empty() {
        return Err(ParseError::Syntax {
            pos: 0,
            msg: "empty expression".into(),
        });
    }
    let toks = lex(text)?;
    let mut p = Parser {
        toks: &toks,
        pos: 0,
        dim: n,
        end: text.len(),
    };
    let e = p.expr()?;
    if p.pos != toks.len() {
        return Err(ParseError::Syntax {
            pos: p.here(),
            msg: "trailing input".into(),
        });
    }
    Ok(e)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

impl Expr {
    /// Evaluate in generic scalar arithmetic; domain guards are checked on
    /// the value part.
    pub fn eval_num<T: Num>(&self, p: &[T]) -> Result<T, EvalError> {
        match self {
            Expr::Const(c) => Ok(T::con(*c)),
            Expr::Var(i) => {
                if *i >= p.len() {
                    return Err(EvalError::PointDimension {
                        expected: *i + 1,
                        got: p.len(),
                    });
                }
                Ok(p[*i].clone())
            }
            Expr::Add(a, b) => Ok(a.eval_num(p)? + b.eval_num(p)?),
            Expr::Sub(a, b) => Ok(a.eval_num(p)? - b.eval_num(p)?),
            Expr::Mul(a, b) => Ok(a.eval_num(p)? * b.eval_num(p)?),
            Expr::Div(a, b) => {
                let denom = b.eval_num(p)?;
                if denom.val().abs() < DIV_GUARD {
                    return Err(EvalError::DivisionByZero {
                        subexpr: self.to_string(),
                    });
                }
                Ok(a.eval_num(p)? * denom.recip())
            }
            Expr::Neg(a) => Ok(-a.eval_num(p)?),
            Expr::Pow(a, k) => {
                let base = a.eval_num(p)?;
                if *k < 0 && base.val().abs() < DIV_GUARD {
                    return Err(EvalError::PowDomain {
                        subexpr: self.to_string(),
                    });
                }
                Ok(base.powi(*k))
            }
            Expr::Call(func, a) => {
                let arg = a.eval_num(p)?;
                match func {
                    Func::Exp => Ok(arg.exp()),
                    Func::Log => {
                        if arg.val() <= 0.0 {
                            return Err(EvalError::LogDomain {
                                subexpr: self.to_string(),
                                value: arg.val(),
                            });
                        }
                        Ok(arg.ln())
                    }
                    Func::Sin => Ok(arg.sin()),
                    Func::Cos => Ok(arg.cos()),
                }
            }
        }
    }

    /// Plain IEEE double evaluation.
    pub fn eval(&self, p: &[f64]) -> Result<f64, EvalError> {
        self.eval_num(p)
    }

    /// Value and exact gradient via forward-mode dual numbers.
    pub fn eval_dual(&self, p: &[f64]) -> Result<DualValue, EvalError> {
        let n = p.len();
        let seeded: Vec<Dual> = p.iter().enumerate().map(|(i, &x)| Dual::var(i, x, n)).collect();
        let d = self.eval_num(&seeded)?;
        let mut partials = d.g;
        partials.resize(n, 0.0);
        Ok(DualValue {
            value: d.v,
            partials,
        })
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(..) => 3,
            Expr::Pow(..) => 4,
            _ => 5,
        }
    }
}

fn paren(f: &mut fmt::Formatter<'_>, e: &Expr, min: u8) -> fmt::Result {
    if e.precedence() < min {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => {
                if *c < 0.0 {
                    write!(f, "({c})")
                } else {
                    write!(f, "{c}")
                }
            }
            Expr::Var(i) => write!(f, "x{}", i + 1),
            Expr::Add(a, b) => {
                paren(f, a, 1)?;
                write!(f, " + ")?;
                paren(f, b, 2)
            }
            Expr::Sub(a, b) => {
                paren(f, a, 1)?;
                write!(f, " - ")?;
                paren(f, b, 2)
            }
            Expr::Mul(a, b) => {
                paren(f, a, 2)?;
                write!(f, "*")?;
                paren(f, b, 3)
            }
            Expr::Div(a, b) => {
                paren(f, a, 2)?;
                write!(f, "/")?;
                paren(f, b, 3)
            }
            Expr::Neg(a) => {
                write!(f, "-")?;
                paren(f, a, 3)
            }
            Expr::Pow(a, k) => {
                paren(f, a, 5)?;
                if *k < 0 {
                    write!(f, "^-{}", -k)
                } else {
                    write!(f, "^{k}")
                }
            }
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}
