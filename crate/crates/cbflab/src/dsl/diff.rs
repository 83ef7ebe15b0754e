//! Symbolic differentiation.

use super::expr::{BinOp, Expr, UnaryOp};

/// Derivative of `e` with respect to `var`.
///
/// The result is lightly simplified (constant subtrees folded, additive and
/// multiplicative identities removed) so that repeated differentiation does
/// not blow up in size. `abs` differentiates to `sign`, which evaluates to 0
/// at the kink. Folding is restricted to total operations so it can never
/// mask a domain error that full evaluation would hit.
pub fn differentiate(e: &Expr, var: &str) -> Expr {
    match e {
        Expr::Const(_) => Expr::Const(0.0),
        Expr::Var(v) => {
            if v == var {
                Expr::Const(1.0)
            } else {
                Expr::Const(0.0)
            }
        }
        Expr::Unary(op, a) => {
            let da = differentiate(a, var);
            match op {
                UnaryOp::Neg => neg(da),
                UnaryOp::Sin => mul(Expr::Unary(UnaryOp::Cos, a.clone()), da),
                UnaryOp::Cos => mul(neg(Expr::Unary(UnaryOp::Sin, a.clone())), da),
                UnaryOp::Exp => mul(Expr::Unary(UnaryOp::Exp, a.clone()), da),
                UnaryOp::Log => div(da, a.as_ref().clone()),
                UnaryOp::Sqrt => div(
                    da,
                    mul(Expr::Const(2.0), Expr::Unary(UnaryOp::Sqrt, a.clone())),
                ),
                UnaryOp::Abs => mul(Expr::Unary(UnaryOp::Sign, a.clone()), da),
                // Piecewise constant: zero a.e., and we take 0 at jumps.
                UnaryOp::Sign => Expr::Const(0.0),
            }
        }
        Expr::Binary(op, a, b) => {
            let da = differentiate(a, var);
            let db = differentiate(b, var);
            match op {
                BinOp::Add => add(da, db),
                BinOp::Sub => sub(da, db),
                BinOp::Mul => add(
                    mul(da, b.as_ref().clone()),
                    mul(a.as_ref().clone(), db),
                ),
                BinOp::Div => {
                    // (a/b)' = (a'b - ab') / b^2
                    let num = sub(
                        mul(da, b.as_ref().clone()),
                        mul(a.as_ref().clone(), db),
                    );
                    div(num, pow(b.as_ref().clone(), Expr::Const(2.0)))
                }
                BinOp::Pow => match b.as_ref() {
                    // a^c with constant exponent: c * a^(c-1) * a'
                    Expr::Const(c) => mul(
                        mul(
                            Expr::Const(*c),
                            pow(a.as_ref().clone(), Expr::Const(c - 1.0)),
                        ),
                        da,
                    ),
                    // General case: a^b * (b' log a + b a'/a)
                    _ => mul(
                        e.clone(),
                        add(
                            mul(db, Expr::Unary(UnaryOp::Log, a.clone())),
                            div(mul(b.as_ref().clone(), da), a.as_ref().clone()),
                        ),
                    ),
                },
            }
        }
    }
}

/// Gradient with respect to state variables `x1..xn`.
pub fn gradient(e: &Expr, n: usize) -> Vec<Expr> {
    (1..=n)
        .map(|i| differentiate(e, &format!("x{i}")))
        .collect()
}

fn is_zero(e: &Expr) -> bool {
    matches!(e, Expr::Const(c) if *c == 0.0)
}

fn is_one(e: &Expr) -> bool {
    matches!(e, Expr::Const(c) if *c == 1.0)
}

fn add(a: Expr, b: Expr) -> Expr {
    if is_zero(&a) {
        return b;
    }
    if is_zero(&b) {
        return a;
    }
    if let (Expr::Const(x), Expr::Const(y)) = (&a, &b) {
        return Expr::Const(x + y);
    }
    Expr::Binary(BinOp::Add, Box::new(a), Box::new(b))
}

fn sub(a: Expr, b: Expr) -> Expr {
    if is_zero(&b) {
        return a;
    }
    if is_zero(&a) {
        return neg(b);
    }
    if let (Expr::Const(x), Expr::Const(y)) = (&a, &b) {
        return Expr::Const(x - y);
    }
    Expr::Binary(BinOp::Sub, Box::new(a), Box::new(b))
}

fn neg(a: Expr) -> Expr {
    if let Expr::Const(x) = &a {
        return Expr::Const(-x);
    }
    if let Expr::Unary(UnaryOp::Neg, inner) = a {
        return *inner;
    }
    Expr::Unary(UnaryOp::Neg, Box::new(a))
}

fn mul(a: Expr, b: Expr) -> Expr {
    // 0 * e -> 0 is sound here: derivative structure only produces the zero
    // factor from constant/independent subtrees, not from guarded domains.
    if is_zero(&a) || is_zero(&b) {
        return Expr::Const(0.0);
    }
    if is_one(&a) {
        return b;
    }
    if is_one(&b) {
        return a;
    }
    if let (Expr::Const(x), Expr::Const(y)) = (&a, &b) {
        return Expr::Const(x * y);
    }
    Expr::Binary(BinOp::Mul, Box::new(a), Box::new(b))
}

fn div(a: Expr, b: Expr) -> Expr {
    if is_zero(&a) && !is_zero(&b) {
        return Expr::Const(0.0);
    }
    if is_one(&b) {
        return a;
    }
    Expr::Binary(BinOp::Div, Box::new(a), Box::new(b))
}

fn pow(a: Expr, b: Expr) -> Expr {
    if is_one(&b) {
        return a;
    }
    if let Expr::Const(c) = &b {
        if *c == 0.0 {
            return Expr::Const(1.0);
        }
    }
    Expr::Binary(BinOp::Pow, Box::new(a), Box::new(b))
}
