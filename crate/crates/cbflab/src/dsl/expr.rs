//! Expression AST, evaluation, and variable binding.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use super::DslError;

/// Unary operations. `sign` is included so that the derivative of `abs`
/// stays inside the expression language.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Abs,
    Sign,
}

impl UnaryOp {
    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "-",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Abs => "abs",
            UnaryOp::Sign => "sign",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

/// A scalar expression over named variables.
///
/// Expressions are immutable after construction and safe to evaluate from
/// multiple threads.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(String),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
}

/// A map from variable names to values, used for evaluation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Binding(HashMap<String, f64>);

impl Binding {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(mut self, name: &str, value: f64) -> Self {
        self.0.insert(name.to_string(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.get(name).copied()
    }

    /// Binding for state variables `x1..xn`.
    pub fn states(p: &[f64]) -> Self {
        let mut b = Self::new();
        for (i, v) in p.iter().enumerate() {
            b.0.insert(format!("x{}", i + 1), *v);
        }
        b
    }

    /// Binding for state variables `x1..xn` plus inputs `u1..um`.
    pub fn states_inputs(p: &[f64], u: &[f64]) -> Self {
        let mut b = Self::states(p);
        for (i, v) in u.iter().enumerate() {
            b.0.insert(format!("u{}", i + 1), *v);
        }
        b
    }
}

impl<S: Into<String>, const N: usize> From<[(S, f64); N]> for Binding {
    fn from(pairs: [(S, f64); N]) -> Self {
        Binding(pairs.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }
}

impl Expr {
    pub fn constant(c: f64) -> Expr {
        Expr::Const(c)
    }

    pub fn var(name: &str) -> Expr {
        Expr::Var(name.to_string())
    }

    /// The set of variable names appearing in the expression.
    pub fn free_vars(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars<'a>(&'a self, out: &mut BTreeSet<&'a str>) {
        match self {
            Expr::Const(_) => {}
            Expr::Var(v) => {
                out.insert(v.as_str());
            }
            Expr::Unary(_, a) => a.collect_vars(out),
            Expr::Binary(_, a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }

    /// Whether the expression contains an `abs` node anywhere.
    pub fn contains_abs(&self) -> bool {
        match self {
            Expr::Const(_) | Expr::Var(_) => false,
            Expr::Unary(op, a) => *op == UnaryOp::Abs || a.contains_abs(),
            Expr::Binary(_, a, b) => a.contains_abs() || b.contains_abs(),
        }
    }

    /// Evaluates the expression under the given binding.
    ///
    /// Division by zero, `log` of a non-positive value, `sqrt` of a negative
    /// value and non-integer powers of negative bases are domain errors that
    /// report the offending subexpression.
    pub fn eval(&self, b: &Binding) -> Result<f64, DslError> {
        match self {
            Expr::Const(c) => Ok(*c),
            Expr::Var(v) => b.get(v).ok_or_else(|| DslError::UnboundVariable(v.clone())),
            Expr::Unary(op, a) => {
                let x = a.eval(b)?;
                apply_unary(*op, x, || self.to_string())
            }
            Expr::Binary(op, a, c) => {
                let x = a.eval(b)?;
                let y = c.eval(b)?;
                apply_binary(*op, x, y, || self.to_string())
            }
        }
    }

    /// Resolves variable names to slot indices for repeated evaluation on
    /// slices. Every free variable must appear in `names`.
    pub fn bind(&self, names: &[String]) -> Result<BoundExpr, DslError> {
        let node = self.bind_node(names)?;
        Ok(BoundExpr {
            node,
            vars: names.to_vec().into(),
        })
    }

    fn bind_node(&self, names: &[String]) -> Result<BNode, DslError> {
        Ok(match self {
            Expr::Const(c) => BNode::Const(*c),
            Expr::Var(v) => {
                let idx = names
                    .iter()
                    .position(|n| n == v)
                    .ok_or_else(|| DslError::UnboundVariable(v.clone()))?;
                BNode::Var(idx)
            }
            Expr::Unary(op, a) => BNode::Unary(*op, Box::new(a.bind_node(names)?)),
            Expr::Binary(op, a, b) => BNode::Binary(
                *op,
                Box::new(a.bind_node(names)?),
                Box::new(b.bind_node(names)?),
            ),
        })
    }
}

fn apply_unary(op: UnaryOp, x: f64, ctx: impl Fn() -> String) -> Result<f64, DslError> {
    match op {
        UnaryOp::Neg => Ok(-x),
        UnaryOp::Sin => Ok(x.sin()),
        UnaryOp::Cos => Ok(x.cos()),
        UnaryOp::Exp => Ok(x.exp()),
        UnaryOp::Log => {
            if x <= 0.0 {
                Err(DslError::Domain {
                    reason: format!("log of non-positive value {x}"),
                    subexpr: ctx(),
                })
            } else {
                Ok(x.ln())
            }
        }
        UnaryOp::Sqrt => {
            if x < 0.0 {
                Err(DslError::Domain {
                    reason: format!("sqrt of negative value {x}"),
                    subexpr: ctx(),
                })
            } else {
                Ok(x.sqrt())
            }
        }
        UnaryOp::Abs => Ok(x.abs()),
        UnaryOp::Sign => {
            if x.is_nan() {
                Ok(f64::NAN)
            } else if x > 0.0 {
                Ok(1.0)
            } else if x < 0.0 {
                Ok(-1.0)
            } else {
                Ok(0.0)
            }
        }
    }
}

fn apply_binary(op: BinOp, x: f64, y: f64, ctx: impl Fn() -> String) -> Result<f64, DslError> {
    match op {
        BinOp::Add => Ok(x + y),
        BinOp::Sub => Ok(x - y),
        BinOp::Mul => Ok(x * y),
        BinOp::Div => {
            if y == 0.0 {
                Err(DslError::Domain {
                    reason: "division by zero".to_string(),
                    subexpr: ctx(),
                })
            } else {
                Ok(x / y)
            }
        }
        BinOp::Pow => {
            if x < 0.0 && (!y.is_finite() || y.fract() != 0.0) {
                Err(DslError::Domain {
                    reason: format!("non-integer power {y} of negative base {x}"),
                    subexpr: ctx(),
                })
            } else if x == 0.0 && y < 0.0 {
                Err(DslError::Domain {
                    reason: format!("zero raised to negative power {y}"),
                    subexpr: ctx(),
                })
            } else {
                Ok(x.powf(y))
            }
        }
    }
}

/// An expression with variables resolved to slot indices, for fast repeated
/// evaluation on coordinate slices. Produces bit-identical results to
/// [`Expr::eval`] under the corresponding binding.
#[derive(Debug, Clone)]
pub struct BoundExpr {
    node: BNode,
    vars: Arc<[String]>,
}

#[derive(Debug, Clone)]
enum BNode {
    Const(f64),
    Var(usize),
    Unary(UnaryOp, Box<BNode>),
    Binary(BinOp, Box<BNode>, Box<BNode>),
}

impl BoundExpr {
    pub fn eval(&self, vals: &[f64]) -> Result<f64, DslError> {
        self.eval_node(&self.node, vals)
    }

    fn eval_node(&self, node: &BNode, vals: &[f64]) -> Result<f64, DslError> {
        match node {
            BNode::Const(c) => Ok(*c),
            BNode::Var(i) => Ok(vals[*i]),
            BNode::Unary(op, a) => {
                let x = self.eval_node(a, vals)?;
                apply_unary(*op, x, || self.render(node))
            }
            BNode::Binary(op, a, b) => {
                let x = self.eval_node(a, vals)?;
                let y = self.eval_node(b, vals)?;
                apply_binary(*op, x, y, || self.render(node))
            }
        }
    }

    fn render(&self, node: &BNode) -> String {
        match node {
            BNode::Const(c) => format!("{c}"),
            BNode::Var(i) => self.vars[*i].clone(),
            BNode::Unary(op, a) => {
                if *op == UnaryOp::Neg {
                    format!("-({})", self.render(a))
                } else {
                    format!("{}({})", op.name(), self.render(a))
                }
            }
            BNode::Binary(op, a, b) => {
                let sym = match op {
                    BinOp::Add => "+",
                    BinOp::Sub => "-",
                    BinOp::Mul => "*",
                    BinOp::Div => "/",
                    BinOp::Pow => "^",
                };
                format!("({}) {} ({})", self.render(a), sym, self.render(b))
            }
        }
    }
}

// Precedence levels for printing: looser binds lower.
fn prec(e: &Expr) -> u8 {
    match e {
        Expr::Binary(BinOp::Add | BinOp::Sub, _, _) => 1,
        Expr::Binary(BinOp::Mul | BinOp::Div, _, _) => 2,
        Expr::Unary(UnaryOp::Neg, _) => 3,
        Expr::Binary(BinOp::Pow, _, _) => 4,
        _ => 5,
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Unary(UnaryOp::Neg, a) => {
                if prec(a) <= 2 {
                    write!(f, "-({a})")
                } else {
                    write!(f, "-{a}")
                }
            }
            Expr::Unary(op, a) => write!(f, "{}({a})", op.name()),
            Expr::Binary(op, a, b) => {
                let p = prec(self);
                // The four left-associative operators parenthesize a
                // same-precedence right operand so the printed form reparses
                // to the identical tree (floating-point + and * are not
                // associative, so shape matters for bit-equal evaluation).
                let sym = match op {
                    BinOp::Add => "+",
                    BinOp::Sub => "-",
                    BinOp::Mul => "*",
                    BinOp::Div => "/",
                    BinOp::Pow => "^",
                };
                if *op == BinOp::Pow {
                    // Right-associative: parenthesize a left operand of equal
                    // or lower precedence; exponents reparse as a unary chain.
                    if prec(a) <= p {
                        write!(f, "({a})")?;
                    } else {
                        write!(f, "{a}")?;
                    }
                    if matches!(
                        b.as_ref(),
                        Expr::Const(_) | Expr::Var(_) | Expr::Unary(UnaryOp::Neg, _)
                    ) && prec(b) >= 3
                    {
                        write!(f, "^{b}")
                    } else {
                        write!(f, "^({b})")
                    }
                } else {
                    if prec(a) < p {
                        write!(f, "({a})")?;
                    } else {
                        write!(f, "{a}")?;
                    }
                    write!(f, " {sym} ")?;
                    if prec(b) <= p {
                        write!(f, "({b})")
                    } else {
                        write!(f, "{b}")
                    }
                }
            }
        }
    }
}
