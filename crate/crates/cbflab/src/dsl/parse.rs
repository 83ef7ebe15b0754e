//! Recursive-descent parser for scalar expressions.
//!
//! Grammar (whitespace-insensitive, `^` right-associative):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' unary)?
//! atom   := NUMBER | IDENT | IDENT '(' expr ')' | '(' expr ')'
//! ```
//!
//! `IDENT '(' expr ')'` admits the functions `sin`, `cos`, `exp`, `log`,
//! `sqrt`, `abs` and `sign`; any other identifier followed by `(` is an
//! error. Numbers are non-negative decimal literals with optional fraction
//! and exponent; leading `-` parses as unary negation.

use super::expr::{BinOp, Expr, UnaryOp};
use super::DslError;

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

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    line: usize,
    col: usize,
}

fn err(msg: impl Into<String>, line: usize, col: usize) -> DslError {
    DslError::Syntax {
        message: msg.into(),
        line,
        col,
    }
}

fn lex(src: &str) -> Result<Vec<Spanned>, DslError> {
    let mut out = Vec::new();
    let mut line = 1usize;
    let mut col = 1usize;
    let mut chars = src.chars().peekable();

    while let Some(&c) = chars.peek() {
        let (tline, tcol) = (line, col);
        let advance = |chars: &mut std::iter::Peekable<std::str::Chars>,
                           line: &mut usize,
                           col: &mut usize| {
            let c = chars.next().unwrap();
            if c == '\n' {
                *line += 1;
                *col = 1;
            } else {
                *col += 1;
            }
            c
        };

        if c.is_whitespace() {
            advance(&mut chars, &mut line, &mut col);
            continue;
        }

        let tok = match c {
            '+' => {
                advance(&mut chars, &mut line, &mut col);
                Tok::Plus
            }
            '-' => {
                advance(&mut chars, &mut line, &mut col);
                Tok::Minus
            }
            '*' => {
                advance(&mut chars, &mut line, &mut col);
                Tok::Star
            }
            '/' => {
                advance(&mut chars, &mut line, &mut col);
                Tok::Slash
            }
            '^' => {
                advance(&mut chars, &mut line, &mut col);
                Tok::Caret
            }
            '(' => {
                advance(&mut chars, &mut line, &mut col);
                Tok::LParen
            }
            ')' => {
                advance(&mut chars, &mut line, &mut col);
                Tok::RParen
            }
            _ if c.is_ascii_digit() || c == '.' => {
                let mut s = String::new();
                while let Some(&d) = chars.peek() {
                    if d.is_ascii_digit() || d == '.' {
                        s.push(advance(&mut chars, &mut line, &mut col));
                    } else {
                        break;
                    }
                }
                // Optional exponent part: e/E, optional sign, digits.
                if let Some(&e) = chars.peek() {
                    if e == 'e' || e == 'E' {
                        let mut look = chars.clone();
                        look.next();
                        let mut exp = String::from("e");
                        if let Some(&sgn) = look.peek() {
                            if sgn == '+' || sgn == '-' {
                                exp.push(sgn);
                                look.next();
                            }
                        }
                        if look.peek().is_some_and(|d| d.is_ascii_digit()) {
                            // Commit: consume 'e', sign, digits.
                            for _ in 0..exp.len() {
                                advance(&mut chars, &mut line, &mut col);
                            }
                            while chars.peek().is_some_and(|d| d.is_ascii_digit()) {
                                exp.push(advance(&mut chars, &mut line, &mut col));
                            }
                            s.push_str(&exp);
                        }
                    }
                }
                let v: f64 = s
                    .parse()
                    .map_err(|_| err(format!("invalid number literal `{s}`"), tline, tcol))?;
                if !v.is_finite() {
                    return Err(err(
                        format!("number literal `{s}` overflows f64"),
                        tline,
                        tcol,
                    ));
                }
                Tok::Num(v)
            }
            _ if c.is_ascii_alphabetic() || c == '_' => {
                let mut s = String::new();
                while let Some(&d) = chars.peek() {
                    if d.is_ascii_alphanumeric() || d == '_' {
                        s.push(advance(&mut chars, &mut line, &mut col));
                    } else {
                        break;
                    }
                }
                Tok::Ident(s)
            }
            _ => {
                return Err(err(format!("unexpected character `{c}`"), tline, tcol));
            }
        };
        out.push(Spanned {
            tok,
            line: tline,
            col: tcol,
        });
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
    end_line: usize,
    end_col: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Spanned> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Spanned> {
        let t = self.toks.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn here(&self) -> (usize, usize) {
        self.peek()
            .map(|s| (s.line, s.col))
            .unwrap_or((self.end_line, self.end_col))
    }

    fn expr(&mut self) -> Result<Expr, DslError> {
        let mut lhs = self.term()?;
        while let Some(s) = self.peek() {
            let op = match s.tok {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => break,
            };
            self.next();
            let rhs = self.term()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, DslError> {
        let mut lhs = self.unary()?;
        while let Some(s) = self.peek() {
            let op = match s.tok {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => break,
            };
            self.next();
            let rhs = self.unary()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, DslError> {
        if let Some(s) = self.peek() {
            if s.tok == Tok::Minus {
                self.next();
                let inner = self.unary()?;
                return Ok(Expr::Unary(UnaryOp::Neg, Box::new(inner)));
            }
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, DslError> {
        let base = self.atom()?;
        if let Some(s) = self.peek() {
            if s.tok == Tok::Caret {
                self.next();
                // Right-associative; exponent allows a leading unary minus.
                let exp = self.unary()?;
                return Ok(Expr::Binary(BinOp::Pow, Box::new(base), Box::new(exp)));
            }
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, DslError> {
        let (line, col) = self.here();
        let Some(s) = self.next() else {
            return Err(err("unexpected end of input", line, col));
        };
        match s.tok {
            Tok::Num(v) => Ok(Expr::Const(v)),
            Tok::Ident(name) => {
                if self.peek().map(|t| &t.tok) == Some(&Tok::LParen) {
                    self.next();
                    let func = match name.as_str() {
                        "sin" => UnaryOp::Sin,
                        "cos" => UnaryOp::Cos,
                        "exp" => UnaryOp::Exp,
                        "log" => UnaryOp::Log,
                        "sqrt" => UnaryOp::Sqrt,
                        "abs" => UnaryOp::Abs,
                        "sign" => UnaryOp::Sign,
                        _ => {
                            return Err(err(
                                format!("unknown function `{name}`"),
                                s.line,
                                s.col,
                            ));
                        }
                    };
                    let arg = self.expr()?;
                    let (cl, cc) = self.here();
                    match self.next() {
                        Some(Spanned {
                            tok: Tok::RParen, ..
                        }) => Ok(Expr::Unary(func, Box::new(arg))),
                        _ => Err(err("expected `)` to close function argument", cl, cc)),
                    }
                } else {
                    Ok(Expr::Var(name))
                }
            }
            Tok::LParen => {
                let inner = self.expr()?;
                let (cl, cc) = self.here();
                match self.next() {
                    Some(Spanned {
                        tok: Tok::RParen, ..
                    }) => Ok(inner),
                    _ => Err(err("expected `)`", cl, cc)),
                }
            }
            other => Err(err(
                format!("unexpected token `{}`", tok_name(&other)),
                s.line,
                s.col,
            )),
        }
    }
}

fn tok_name(t: &Tok) -> String {
    match t {
        Tok::Num(v) => format!("{v}"),
        Tok::Ident(s) => s.clone(),
        Tok::Plus => "+".into(),
        Tok::Minus => "-".into(),
        Tok::Star => "*".into(),
        Tok::Slash => "/".into(),
        Tok::Caret => "^".into(),
        Tok::LParen => "(".into(),
        Tok::RParen => ")".into(),
    }
}

/// Parses an expression from text.
///
/// Parsing performs no simplification: the AST mirrors the source exactly so
/// that evaluation preserves IEEE semantics (including NaN propagation) of
/// the written formula.
pub fn parse(src: &str) -> Result<Expr, DslError> {
    let toks = lex(src)?;
    let (end_line, end_col) = src.lines().enumerate().last().map_or((1, 1), |(i, l)| {
        (i + 1, l.chars().count() + 1)
    });
    let mut p = Parser {
        toks,
        pos: 0,
        end_line,
        end_col,
    };
    if p.peek().is_none() {
        return Err(err("empty expression", 1, 1));
    }
    let e = p.expr()?;
    if let Some(s) = p.peek() {
        return Err(err(
            format!("unexpected trailing token `{}`", tok_name(&s.tok)),
            s.line,
            s.col,
        ));
    }
    Ok(e)
}
