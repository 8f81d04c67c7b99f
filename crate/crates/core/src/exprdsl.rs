//! Scalar expression language for user-supplied drift and diffusion fields.
//!
//! Grammar (whitespace insignificant):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := ('-' | '+') unary | power
//! power  := atom ('^' expon)?          right associative
//! expon  := ('-' | '+') expon | power
//! atom   := number | x<k> | param | func '(' expr ')' | '(' expr ')'
//! ```
//!
//! State variables are `x1..xn`. Named parameters are replaced by their
//! values while parsing. Evaluation carries exact first and second
//! derivatives through a second-order forward jet.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::numkit::{Mat, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Tanh,
    Abs,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "tanh" => Func::Tanh,
            "abs" => Func::Abs,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Tanh => "tanh",
            Func::Abs => "abs",
        }
    }

    fn apply(self, u: f64) -> Result<f64> {
        Ok(match self {
            Func::Sin => u.sin(),
            Func::Cos => u.cos(),
            Func::Exp => u.exp(),
            Func::Log => {
                if u <= 0.0 {
                    return Err(Error::Domain(format!("log of nonpositive value {u}")));
                }
                u.ln()
            }
            Func::Sqrt => {
                if u < 0.0 {
                    return Err(Error::Domain(format!("sqrt of negative value {u}")));
                }
                u.sqrt()
            }
            Func::Tanh => u.tanh(),
            Func::Abs => u.abs(),
        })
    }

    /// f(u), f'(u), f''(u).
    fn derivatives(self, u: f64) -> Result<(f64, f64, f64)> {
        Ok(match self {
            Func::Sin => (u.sin(), u.cos(), -u.sin()),
            Func::Cos => (u.cos(), -u.sin(), -u.cos()),
            Func::Exp => {
                let e = u.exp();
                (e, e, e)
            }
            Func::Log => {
                if u <= 0.0 {
                    return Err(Error::Domain(format!("log of nonpositive value {u}")));
                }
                (u.ln(), 1.0 / u, -1.0 / (u * u))
            }
            Func::Sqrt => {
                if u <= 0.0 {
                    return Err(Error::Domain(format!(
                        "sqrt is not differentiable at {u}"
                    )));
                }
                let s = u.sqrt();
                (s, 0.5 / s, -0.25 / (s * u))
            }
            Func::Tanh => {
                let t = u.tanh();
                let d = 1.0 - t * t;
                (t, d, -2.0 * t * d)
            }
            Func::Abs => {
                if u == 0.0 {
                    return Err(Error::Domain("abs is not differentiable at 0".into()));
                }
                (u.abs(), u.signum(), 0.0)
            }
        })
    }
}

/// Expression tree. Variables are zero-based internally (`x1` is `Var(0)`).
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

/// Value, gradient and Hessian of an expression at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub value: f64,
    pub gradient: Vector,
    pub hessian: Mat,
}

pub fn parse(source: &str, n: usize, params: &BTreeMap<String, f64>) -> Result<Expr> {
    let mut p = Parser { src: source.as_bytes(), pos: 0, n, params };
    p.skip_ws();
    if p.pos >= p.src.len() {
        return Err(p.error("empty expression"));
    }
    let e = p.expr()?;
    p.skip_ws();
    if p.pos < p.src.len() {
        return Err(p.error("unexpected trailing input"));
    }
    Ok(e)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    n: usize,
    params: &'a BTreeMap<String, f64>,
}

impl Parser<'_> {
    fn error(&self, message: &str) -> Error {
        Error::Parse { offset: self.pos, message: message.to_string() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Some(c @ (b'+' | b'-')) = self.peek() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if c == b'+' {
                Expr::Add(Box::new(lhs), Box::new(rhs))
            } else {
                Expr::Sub(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        while let Some(c @ (b'*' | b'/')) = self.peek() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = if c == b'*' {
                Expr::Mul(Box::new(lhs), Box::new(rhs))
            } else {
                Expr::Div(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                Ok(Expr::Neg(Box::new(self.unary()?)))
            }
            Some(b'+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            let exponent = self.exponent()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn exponent(&mut self) -> Result<Expr> {
        match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                Ok(Expr::Neg(Box::new(self.exponent()?)))
            }
            Some(b'+') => {
                self.pos += 1;
                self.exponent()
            }
            _ => self.power(),
        }
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.peek() {
            None => Err(self.error("expected an expression")),
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(self.error("expected `)`"));
                }
                self.pos += 1;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.identifier(),
            Some(_) => Err(self.error("unexpected character")),
        }
    }

    fn number(&mut self) -> Result<Expr> {
        let start = self.pos;
        let digits = |p: &mut Self| {
            let s = p.pos;
            while p.pos < p.src.len() && p.src[p.pos].is_ascii_digit() {
                p.pos += 1;
            }
            p.pos - s
        };
        let mut count = digits(self);
        if self.src.get(self.pos) == Some(&b'.') {
            self.pos += 1;
            count += digits(self);
        }
        if count == 0 {
            self.pos = start;
            return Err(self.error("malformed number"));
        }
        if matches!(self.src.get(self.pos), Some(b'e' | b'E')) {
            let mark = self.pos;
            self.pos += 1;
            if matches!(self.src.get(self.pos), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            if digits(self) == 0 {
                self.pos = mark;
                return Err(self.error("malformed exponent"));
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        text.parse::<f64>()
            .map(Expr::Num)
            .map_err(|_| Error::Parse { offset: start, message: "malformed number".into() })
    }

    fn identifier(&mut self) -> Result<Expr> {
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        if let Some(func) = Func::from_name(name) {
            if self.peek() == Some(b'(') {
                self.pos += 1;
                let arg = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(self.error("expected `)`"));
                }
                self.pos += 1;
                return Ok(Expr::Call(func, Box::new(arg)));
            }
        }
        if let Some(index) = name.strip_prefix('x').and_then(|d| d.parse::<usize>().ok()) {
            if (1..=self.n).contains(&index) && !name[1..].starts_with('0') {
                return Ok(Expr::Var(index - 1));
            }
        }
        if let Some(&value) = self.params.get(name) {
            return Ok(Expr::Num(value));
        }
        Err(Error::UnknownIdentifier { name: name.to_string(), offset: start })
    }
}

impl fmt::Display for Expr {
    /// Canonical, fully parenthesized form that parses back to an equivalent tree.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) => {
                write!(f, "(-{:?})", -v)
            }
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::Var(k) => write!(f, "x{}", k + 1),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Pow(a, b) => write!(f, "({a} ^ {b})"),
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

fn integer_exponent(w: f64) -> Option<i32> {
    if w.fract() == 0.0 && w.abs() <= i32::MAX as f64 {
        Some(w as i32)
    } else {
        None
    }
}

fn pow_value(u: f64, w: f64) -> Result<f64> {
    match integer_exponent(w) {
        Some(k) => {
            if u == 0.0 && k < 0 {
                return Err(Error::Domain("zero raised to a negative power".into()));
            }
            Ok(u.powi(k))
        }
        None => {
            if u <= 0.0 {
                return Err(Error::Domain(format!(
                    "non-integer power of nonpositive base {u}"
                )));
            }
            Ok(u.powf(w))
        }
    }
}

impl Expr {
    pub fn num(v: f64) -> Expr {
        Expr::Num(v)
    }

    pub fn var(k: usize) -> Expr {
        Expr::Var(k)
    }

    /// True when the tree contains no state variable.
    pub fn is_constant(&self) -> bool {
        match self {
            Expr::Num(_) => true,
            Expr::Var(_) => false,
            Expr::Neg(a) | Expr::Call(_, a) => a.is_constant(),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Pow(a, b) => a.is_constant() && b.is_constant(),
        }
    }

    /// Largest variable index used plus one.
    pub fn arity(&self) -> usize {
        match self {
            Expr::Num(_) => 0,
            Expr::Var(k) => k + 1,
            Expr::Neg(a) | Expr::Call(_, a) => a.arity(),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Pow(a, b) => a.arity().max(b.arity()),
        }
    }

    /// Plain value, no derivatives.
    pub fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(match self {
            Expr::Num(v) => *v,
            Expr::Var(k) => x[*k],
            Expr::Neg(a) => -a.value(x)?,
            Expr::Add(a, b) => a.value(x)? + b.value(x)?,
            Expr::Sub(a, b) => a.value(x)? - b.value(x)?,
            Expr::Mul(a, b) => a.value(x)? * b.value(x)?,
            Expr::Div(a, b) => {
                let d = b.value(x)?;
                if d == 0.0 {
                    return Err(Error::Domain("division by zero".into()));
                }
                a.value(x)? / d
            }
            Expr::Pow(a, b) => pow_value(a.value(x)?, b.value(x)?)?,
            Expr::Call(func, a) => func.apply(a.value(x)?)?,
        })
    }

    /// Value with exact gradient and Hessian at `x`.
    pub fn evaluate(&self, x: &[f64]) -> Result<EvalResult> {
        let n = x.len();
        let jet = self.jet(x)?;
        let value = jet.v;
        if !value.is_finite() {
            return Err(Error::Domain(format!("non-finite value at {x:?}")));
        }
        // mirror the upper triangle so the Hessian is exactly symmetric
        let hessian = Mat::from_fn(n, n, |i, j| jet.h[i.min(j) * n + i.max(j)]);
        Ok(EvalResult { value, gradient: Vector::from_vec(jet.g), hessian })
    }

    fn jet(&self, x: &[f64]) -> Result<Jet> {
        let n = x.len();
        Ok(match self {
            Expr::Num(v) => Jet::constant(*v, n),
            Expr::Var(k) => Jet::variable(x[*k], *k, n),
            Expr::Neg(a) => a.jet(x)?.scale(-1.0),
            Expr::Add(a, b) => a.jet(x)?.add(&b.jet(x)?, 1.0),
            Expr::Sub(a, b) => a.jet(x)?.add(&b.jet(x)?, -1.0),
            Expr::Mul(a, b) => a.jet(x)?.mul(&b.jet(x)?),
            Expr::Div(a, b) => {
                let d = b.jet(x)?;
                if d.v == 0.0 {
                    return Err(Error::Domain("division by zero".into()));
                }
                let r = d.v.recip();
                a.jet(x)?.mul(&d.chain(r, -r * r, 2.0 * r * r * r))
            }
            Expr::Pow(a, b) if b.is_constant() => {
                let u = a.jet(x)?;
                let w = b.value(x)?;
                match integer_exponent(w) {
                    Some(0) => Jet::constant(1.0, n),
                    Some(1) => u,
                    Some(k) => {
                        if u.v == 0.0 && k < 2 {
                            return Err(Error::Domain(
                                "zero raised to a negative power".into(),
                            ));
                        }
                        let kf = k as f64;
                        let f2 = kf * (kf - 1.0) * u.v.powi(k - 2);
                        u.chain(u.v.powi(k), kf * u.v.powi(k - 1), f2)
                    }
                    None => {
                        if u.v <= 0.0 {
                            return Err(Error::Domain(format!(
                                "non-integer power of nonpositive base {}",
                                u.v
                            )));
                        }
                        let f0 = u.v.powf(w);
                        u.chain(f0, w * f0 / u.v, w * (w - 1.0) * f0 / (u.v * u.v))
                    }
                }
            }
            Expr::Pow(a, b) => {
                let u = a.jet(x)?;
                if u.v <= 0.0 {
                    return Err(Error::Domain(format!(
                        "variable power of nonpositive base {}",
                        u.v
                    )));
                }
                let ln = u.chain(u.v.ln(), 1.0 / u.v, -1.0 / (u.v * u.v));
                let e = b.jet(x)?.mul(&ln);
                let ev = e.v.exp();
                e.chain(ev, ev, ev)
            }
            Expr::Call(func, a) => {
                let u = a.jet(x)?;
                let (f0, f1, f2) = func.derivatives(u.v)?;
                u.chain(f0, f1, f2)
            }
        })
    }

    /// Symbolic partial derivative with respect to variable `k` (zero-based).
    ///
    /// Constant subtrees are folded so repeated differentiation stays small.
    pub fn derivative(&self, k: usize) -> Result<Expr> {
        Ok(match self {
            Expr::Num(_) => Expr::Num(0.0),
            Expr::Var(j) => Expr::Num(if *j == k { 1.0 } else { 0.0 }),
            Expr::Neg(a) => neg(a.derivative(k)?),
            Expr::Add(a, b) => add(a.derivative(k)?, b.derivative(k)?),
            Expr::Sub(a, b) => sub(a.derivative(k)?, b.derivative(k)?),
            Expr::Mul(a, b) => add(
                mul(a.derivative(k)?, (**b).clone()),
                mul((**a).clone(), b.derivative(k)?),
            ),
            Expr::Div(a, b) => div(
                sub(
                    mul(a.derivative(k)?, (**b).clone()),
                    mul((**a).clone(), b.derivative(k)?),
                ),
                pow((**b).clone(), Expr::Num(2.0)),
            ),
            Expr::Pow(a, b) if b.is_constant() => {
                let lowered = match **b {
                    Expr::Num(w) => Expr::Num(w - 1.0),
                    _ => sub((**b).clone(), Expr::Num(1.0)),
                };
                mul(mul((**b).clone(), pow((**a).clone(), lowered)), a.derivative(k)?)
            }
            Expr::Pow(a, b) => mul(
                self.clone(),
                add(
                    mul(b.derivative(k)?, call(Func::Log, (**a).clone())),
                    div(mul((**b).clone(), a.derivative(k)?), (**a).clone()),
                ),
            ),
            Expr::Call(func, a) => {
                let inner = a.derivative(k)?;
                let u = (**a).clone();
                let outer = match func {
                    Func::Sin => call(Func::Cos, u),
                    Func::Cos => neg(call(Func::Sin, u)),
                    Func::Exp => call(Func::Exp, u),
                    Func::Log => div(Expr::Num(1.0), u),
                    Func::Sqrt => div(Expr::Num(0.5), call(Func::Sqrt, u)),
                    Func::Tanh => sub(Expr::Num(1.0), pow(call(Func::Tanh, u), Expr::Num(2.0))),
                    Func::Abs => {
                        return Err(Error::Domain(
                            "abs has no symbolic derivative".into(),
                        ))
                    }
                };
                mul(outer, inner)
            }
        })
    }
}

fn as_num(e: &Expr) -> Option<f64> {
    match e {
        Expr::Num(v) => Some(*v),
        _ => None,
    }
}

fn neg(a: Expr) -> Expr {
    match a {
        Expr::Num(v) => Expr::Num(-v),
        Expr::Neg(inner) => *inner,
        other => Expr::Neg(Box::new(other)),
    }
}

fn add(a: Expr, b: Expr) -> Expr {
    match (as_num(&a), as_num(&b)) {
        (Some(x), Some(y)) => Expr::Num(x + y),
        (Some(z), _) if z == 0.0 => b,
        (_, Some(z)) if z == 0.0 => a,
        _ => Expr::Add(Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (as_num(&a), as_num(&b)) {
        (Some(x), Some(y)) => Expr::Num(x - y),
        (Some(z), _) if z == 0.0 => neg(b),
        (_, Some(z)) if z == 0.0 => a,
        _ => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (as_num(&a), as_num(&b)) {
        (Some(x), Some(y)) => Expr::Num(x * y),
        (Some(z), _) | (_, Some(z)) if z == 0.0 => Expr::Num(0.0),
        (Some(o), _) if o == 1.0 => b,
        (_, Some(o)) if o == 1.0 => a,
        (Some(m), _) if m == -1.0 => neg(b),
        (_, Some(m)) if m == -1.0 => neg(a),
        _ => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    match (as_num(&a), as_num(&b)) {
        (Some(z), _) if z == 0.0 => Expr::Num(0.0),
        (_, Some(o)) if o == 1.0 => a,
        _ => Expr::Div(Box::new(a), Box::new(b)),
    }
}

fn pow(a: Expr, b: Expr) -> Expr {
    match as_num(&b) {
        Some(w) if w == 0.0 => Expr::Num(1.0),
        Some(w) if w == 1.0 => a,
        _ => Expr::Pow(Box::new(a), Box::new(b)),
    }
}

fn call(func: Func, a: Expr) -> Expr {
    Expr::Call(func, Box::new(a))
}

/// Second-order forward jet: value, gradient, row-major Hessian.
#[derive(Debug, Clone)]
struct Jet {
    v: f64,
    g: Vec<f64>,
    h: Vec<f64>,
}

impl Jet {
    fn constant(v: f64, n: usize) -> Jet {
        Jet { v, g: vec![0.0; n], h: vec![0.0; n * n] }
    }

    fn variable(v: f64, k: usize, n: usize) -> Jet {
        let mut j = Jet::constant(v, n);
        j.g[k] = 1.0;
        j
    }

    fn n(&self) -> usize {
        self.g.len()
    }

    fn scale(mut self, s: f64) -> Jet {
        self.v *= s;
        self.g.iter_mut().for_each(|g| *g *= s);
        self.h.iter_mut().for_each(|h| *h *= s);
        self
    }

    fn add(mut self, other: &Jet, sign: f64) -> Jet {
        self.v += sign * other.v;
        self.g.iter_mut().zip(&other.g).for_each(|(a, b)| *a += sign * b);
        self.h.iter_mut().zip(&other.h).for_each(|(a, b)| *a += sign * b);
        self
    }

    fn mul(&self, other: &Jet) -> Jet {
        let n = self.n();
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let k = i * n + j;
                h[k] = self.v * other.h[k]
                    + other.v * self.h[k]
                    + self.g[i] * other.g[j]
                    + other.g[i] * self.g[j];
            }
        }
        let g = self.g.iter().zip(&other.g).map(|(a, b)| self.v * b + other.v * a).collect();
        Jet { v: self.v * other.v, g, h }
    }

    /// Composition f(self) given f, f', f'' at self.v.
    fn chain(&self, f0: f64, f1: f64, f2: f64) -> Jet {
        let n = self.n();
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let k = i * n + j;
                h[k] = f2 * self.g[i] * self.g[j] + f1 * self.h[k];
            }
        }
        Jet { v: f0, g: self.g.iter().map(|g| f1 * g).collect(), h }
    }
}
