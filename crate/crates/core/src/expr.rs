//! A small expression language for complex-valued functions of chart coordinates,
//! with forward-mode derivatives.
//!
//! Grammar: `+ - * / ^`, parentheses, `|e|`, functions `conj abs exp log re im sqrt
//! sin cos`, constants `i` and `pi`, decimal literals.
//!
//! Variables on a chart with `n` smooth and `m` tropical coordinates (real coordinate
//! vector `x` of length `n + 2m`):
//! - `xj`: the j-th raw real coordinate (1-based); `x`, `y` alias `x1`, `x2`;
//! - `uj`: j-th smooth coordinate;
//! - `zj`: j-th tropical coefficient `x_{n+2j-1} + i x_{n+2j}`;
//! - `wj`: j-th raw pair `x_{2j-1} + i x_{2j}`; `z` is `z1` when `m ≥ 1`, else `w1`;
//! - `pj`: j-th coordinate of the current vertex of the tropical part.

use crate::error::{Error, Result};
use num_complex::Complex64 as C64;
use std::fmt;

/// Largest number of real coordinates an expression may depend on.
pub const MAX_VARS: usize = 8;

#[derive(Clone, Copy, Debug)]
pub struct Dual {
    pub v: C64,
    pub g: [C64; MAX_VARS],
}

const CZ: C64 = C64::new(0.0, 0.0);

impl Dual {
    pub fn constant(v: C64) -> Dual {
        Dual { v, g: [CZ; MAX_VARS] }
    }
    fn var(v: f64, j: usize) -> Dual {
        let mut d = Dual::constant(C64::new(v, 0.0));
        d.g[j] = C64::new(1.0, 0.0);
        d
    }
    fn map(self, v: C64, dv: C64) -> Dual {
        let mut g = self.g;
        for x in g.iter_mut() {
            *x *= dv;
        }
        Dual { v, g }
    }
    fn add(self, o: Dual) -> Dual {
        let mut g = self.g;
        for (a, b) in g.iter_mut().zip(o.g) {
            *a += b;
        }
        Dual { v: self.v + o.v, g }
    }
    fn neg(self) -> Dual {
        self.map(-self.v, C64::new(-1.0, 0.0))
    }
    fn mul(self, o: Dual) -> Dual {
        let mut g = [CZ; MAX_VARS];
        for k in 0..MAX_VARS {
            g[k] = self.g[k] * o.v + self.v * o.g[k];
        }
        Dual { v: self.v * o.v, g }
    }
    fn inv(self) -> Dual {
        let iv = self.v.inv();
        self.map(iv, -iv * iv)
    }
    fn powi(self, k: i64) -> Dual {
        if k < 0 {
            return self.powi(-k).inv();
        }
        let mut acc = Dual::constant(C64::new(1.0, 0.0));
        let mut base = self;
        let mut e = k;
        while e > 0 {
            if e & 1 == 1 {
                acc = acc.mul(base);
            }
            base = base.mul(base);
            e >>= 1;
        }
        acc
    }
    fn conj(self) -> Dual {
        let mut g = self.g;
        for x in g.iter_mut() {
            *x = x.conj();
        }
        Dual { v: self.v.conj(), g }
    }
    fn re(self) -> Dual {
        let mut g = self.g;
        for x in g.iter_mut() {
            *x = C64::new(x.re, 0.0);
        }
        Dual { v: C64::new(self.v.re, 0.0), g }
    }
    fn im(self) -> Dual {
        let mut g = self.g;
        for x in g.iter_mut() {
            *x = C64::new(x.im, 0.0);
        }
        Dual { v: C64::new(self.v.im, 0.0), g }
    }
    fn abs(self) -> Dual {
        let r = self.v.norm();
        let mut g = [CZ; MAX_VARS];
        if r > 0.0 {
            for k in 0..MAX_VARS {
                g[k] = C64::new((self.v.conj() * self.g[k]).re / r, 0.0);
            }
        }
        Dual { v: C64::new(r, 0.0), g }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Func {
    Conj,
    Abs,
    Exp,
    Log,
    Re,
    Im,
    Sqrt,
    Sin,
    Cos,
}

impl Func {
    fn from_name(s: &str) -> Option<Func> {
        Some(match s {
            "conj" => Func::Conj,
            "abs" => Func::Abs,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "re" => Func::Re,
            "im" => Func::Im,
            "sqrt" => Func::Sqrt,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            _ => return None,
        })
    }

    fn apply(self, a: Dual) -> Dual {
        match self {
            Func::Conj => a.conj(),
            Func::Abs => a.abs(),
            Func::Exp => {
                let e = a.v.exp();
                a.map(e, e)
            }
            Func::Log => a.map(a.v.ln(), a.v.inv()),
            Func::Re => a.re(),
            Func::Im => a.im(),
            Func::Sqrt => {
                let s = a.v.sqrt();
                a.map(s, (2.0 * s).inv())
            }
            Func::Sin => a.map(a.v.sin(), a.v.cos()),
            Func::Cos => a.map(a.v.cos(), -a.v.sin()),
        }
    }

    fn apply_c(self, a: C64) -> C64 {
        match self {
            Func::Conj => a.conj(),
            Func::Abs => C64::new(a.norm(), 0.0),
            Func::Exp => a.exp(),
            Func::Log => a.ln(),
            Func::Re => C64::new(a.re, 0.0),
            Func::Im => C64::new(a.im, 0.0),
            Func::Sqrt => a.sqrt(),
            Func::Sin => a.sin(),
            Func::Cos => a.cos(),
        }
    }
}

#[derive(Clone, Debug)]
enum Node {
    Const(C64),
    /// Real coordinate.
    Var(usize),
    /// Real + i·real coordinate pair.
    Pair(usize, usize),
    /// Vertex coordinate.
    Vertex(usize),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Neg(Box<Node>),
    Call(Func, Box<Node>),
}

impl Node {
    fn eval(&self, x: &[f64], p: &[f64]) -> C64 {
        match self {
            Node::Const(c) => *c,
            Node::Var(j) => C64::new(x[*j], 0.0),
            Node::Pair(a, b) => C64::new(x[*a], x[*b]),
            Node::Vertex(j) => C64::new(p.get(*j).copied().unwrap_or(0.0), 0.0),
            Node::Add(a, b) => a.eval(x, p) + b.eval(x, p),
            Node::Sub(a, b) => a.eval(x, p) - b.eval(x, p),
            Node::Mul(a, b) => a.eval(x, p) * b.eval(x, p),
            Node::Div(a, b) => a.eval(x, p) / b.eval(x, p),
            Node::Pow(a, b) => {
                let base = a.eval(x, p);
                match int_exponent(b) {
                    Some(k) => base.powi(k as i32),
                    None => (b.eval(x, p) * base.ln()).exp(),
                }
            }
            Node::Neg(a) => -a.eval(x, p),
            Node::Call(f, a) => f.apply_c(a.eval(x, p)),
        }
    }

    fn eval_dual(&self, x: &[f64], p: &[f64]) -> Dual {
        match self {
            Node::Const(c) => Dual::constant(*c),
            Node::Var(j) => Dual::var(x[*j], *j),
            Node::Pair(a, b) => {
                let mut d = Dual::constant(C64::new(x[*a], x[*b]));
                d.g[*a] = C64::new(1.0, 0.0);
                d.g[*b] = C64::new(0.0, 1.0);
                d
            }
            Node::Vertex(j) => Dual::constant(C64::new(p.get(*j).copied().unwrap_or(0.0), 0.0)),
            Node::Add(a, b) => a.eval_dual(x, p).add(b.eval_dual(x, p)),
            Node::Sub(a, b) => a.eval_dual(x, p).add(b.eval_dual(x, p).neg()),
            Node::Mul(a, b) => a.eval_dual(x, p).mul(b.eval_dual(x, p)),
            Node::Div(a, b) => a.eval_dual(x, p).mul(b.eval_dual(x, p).inv()),
            Node::Pow(a, b) => {
                let base = a.eval_dual(x, p);
                match int_exponent(b) {
                    Some(k) => base.powi(k),
                    None => {
                        let l = Func::Log.apply(base);
                        Func::Exp.apply(b.eval_dual(x, p).mul(l))
                    }
                }
            }
            Node::Neg(a) => a.eval_dual(x, p).neg(),
            Node::Call(f, a) => f.apply(a.eval_dual(x, p)),
        }
    }
}

fn int_exponent(n: &Node) -> Option<i64> {
    let c = match n {
        Node::Const(c) => *c,
        Node::Neg(inner) => match **inner {
            Node::Const(c) => -c,
            _ => return None,
        },
        _ => return None,
    };
    (c.im == 0.0 && c.re.fract() == 0.0 && c.re.abs() <= 64.0).then_some(c.re as i64)
}

/// Layout of the coordinates an expression is compiled against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub n: usize,
    pub m: usize,
}

impl Layout {
    pub fn dim(&self) -> usize {
        self.n + 2 * self.m
    }
}

#[derive(Clone)]
pub struct Expr {
    src: String,
    node: Node,
    layout: Layout,
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({:?})", self.src)
    }
}

impl Expr {
    pub fn parse(src: &str, layout: Layout) -> Result<Expr> {
        if layout.dim() > MAX_VARS {
            return Err(Error::DimUnsupported(format!("expressions support at most {MAX_VARS} real coordinates")));
        }
        let toks = lex(src)?;
        let mut p = Parser { toks, pos: 0, layout, src };
        let node = p.expr()?;
        if p.pos != p.toks.len() {
            return Err(p.err("trailing input"));
        }
        Ok(Expr { src: src.to_string(), node, layout })
    }

    pub fn source(&self) -> &str {
        &self.src
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn eval(&self, x: &[f64], vertex: &[f64]) -> C64 {
        self.node.eval(x, vertex)
    }

    /// Value and gradient with respect to the real coordinates.
    pub fn eval_dual(&self, x: &[f64], vertex: &[f64]) -> Dual {
        self.node.eval_dual(x, vertex)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
}

fn lex(s: &str) -> Result<Vec<Tok>> {
    let cs: Vec<char> = s.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < cs.len() {
        let c = cs[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let st = i;
            while i < cs.len() && (cs[i].is_ascii_digit() || cs[i] == '.') {
                i += 1;
            }
            if i < cs.len() && (cs[i] == 'e' || cs[i] == 'E') && i + 1 < cs.len() && (cs[i + 1].is_ascii_digit() || cs[i + 1] == '-' || cs[i + 1] == '+') {
                i += 2;
                while i < cs.len() && cs[i].is_ascii_digit() {
                    i += 1;
                }
            }
            let t: String = cs[st..i].iter().collect();
            out.push(Tok::Num(t.parse().map_err(|_| Error::Schema(format!("bad number {t:?} in expression {s:?}")))?));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let st = i;
            while i < cs.len() && (cs[i].is_ascii_alphanumeric() || cs[i] == '_') {
                i += 1;
            }
            out.push(Tok::Ident(cs[st..i].iter().collect()));
        } else if "+-*/^()|,".contains(c) {
            out.push(Tok::Op(c));
            i += 1;
        } else {
            return Err(Error::Schema(format!("unexpected character {c:?} in expression {s:?}")));
        }
    }
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<Tok>,
    pos: usize,
    layout: Layout,
    src: &'a str,
}

impl Parser<'_> {
    fn err(&self, what: &str) -> Error {
        Error::Schema(format!("{what} at token {} of expression {:?}", self.pos, self.src))
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Op(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            if self.eat('+') {
                lhs = Node::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat('-') {
                lhs = Node::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat('*') {
                lhs = Node::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat('/') {
                lhs = Node::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Node> {
        if self.eat('-') {
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        if self.eat('+') {
            return self.unary();
        }
        let base = self.atom()?;
        if self.eat('^') {
            let e = self.unary()?;
            return Ok(Node::Pow(Box::new(base), Box::new(e)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(Node::Const(C64::new(v, 0.0)))
            }
            Some(Tok::Op('(')) => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(')') {
                    return Err(self.err("expected ')'"));
                }
                Ok(e)
            }
            Some(Tok::Op('|')) => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat('|') {
                    return Err(self.err("expected closing '|'"));
                }
                Ok(Node::Call(Func::Abs, Box::new(e)))
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                if let Some(f) = Func::from_name(&name) {
                    if !self.eat('(') {
                        return Err(self.err("expected '(' after function name"));
                    }
                    let e = self.expr()?;
                    if !self.eat(')') {
                        return Err(self.err("expected ')'"));
                    }
                    return Ok(Node::Call(f, Box::new(e)));
                }
                self.variable(&name)
            }
            _ => Err(self.err("expected a value")),
        }
    }

    fn variable(&self, name: &str) -> Result<Node> {
        let Layout { n, m } = self.layout;
        let dim = self.layout.dim();
        let unknown = || Error::Schema(format!("unknown identifier {name:?} in expression {:?} (chart has n={n}, m={m})", self.src));
        match name {
            "i" => return Ok(Node::Const(C64::new(0.0, 1.0))),
            "pi" => return Ok(Node::Const(C64::new(std::f64::consts::PI, 0.0))),
            "x" if dim >= 1 => return Ok(Node::Var(0)),
            "y" if dim >= 2 => return Ok(Node::Var(1)),
            "z" if m >= 1 => return Ok(Node::Pair(n, n + 1)),
            "z" if dim >= 2 => return Ok(Node::Pair(0, 1)),
            _ => {}
        }
        let (head, tail) = name.split_at(1);
        let j: usize = tail.parse().map_err(|_| unknown())?;
        if j == 0 {
            return Err(unknown());
        }
        match head {
            "x" if j <= dim => Ok(Node::Var(j - 1)),
            "u" if j <= n => Ok(Node::Var(j - 1)),
            "z" if j <= m => Ok(Node::Pair(n + 2 * (j - 1), n + 2 * (j - 1) + 1)),
            "w" if 2 * j <= dim => Ok(Node::Pair(2 * (j - 1), 2 * (j - 1) + 1)),
            "p" if j <= m => Ok(Node::Vertex(j - 1)),
            _ => Err(unknown()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PLANE: Layout = Layout { n: 2, m: 0 };

    fn close(a: C64, b: C64) -> bool {
        (a - b).norm() < 1e-12
    }

    #[test]
    fn arithmetic_and_precedence() {
        let e = Expr::parse("1 + 2*3^2 - 4/2", PLANE).unwrap();
        assert!(close(e.eval(&[0.0, 0.0], &[]), C64::new(17.0, 0.0)));
        let e = Expr::parse("-2^2", PLANE).unwrap();
        assert!(close(e.eval(&[0.0, 0.0], &[]), C64::new(-4.0, 0.0)));
    }

    #[test]
    fn complex_coordinate_and_conjugate() {
        let z = Expr::parse("z", PLANE).unwrap();
        assert!(close(z.eval(&[1.0, 2.0], &[]), C64::new(1.0, 2.0)));
        let zb = Expr::parse("conj(z)*i", PLANE).unwrap();
        assert!(close(zb.eval(&[1.0, 2.0], &[]), C64::new(2.0, 1.0)));
        let a = Expr::parse("|z|^2 - abs(w1)*abs(w1)", PLANE).unwrap();
        assert!(a.eval(&[0.3, -0.7], &[]).norm() < 1e-12);
    }

    #[test]
    fn tropical_layout_variables() {
        let l = Layout { n: 1, m: 1 };
        let e = Expr::parse("u1 + z + 10*p1", l).unwrap();
        assert!(close(e.eval(&[1.0, 2.0, 3.0], &[0.5]), C64::new(8.0, 3.0)));
        assert!(Expr::parse("z2", l).is_err());
        assert!(Expr::parse("u2", l).is_err());
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let l = Layout { n: 3, m: 0 };
        for src in ["x1^2 + i*x2*x3 - 1", "exp(i*x1)*conj(w1)", "sqrt(2 + x1*x1 + x2)", "|w1|^2 + sin(x3)/(1+x1^2)", "(1.5 - x1)^(1/3)"] {
            let e = Expr::parse(src, l).unwrap();
            let x = [0.3, -0.4, 0.7];
            let d = e.eval_dual(&x, &[]);
            assert!(close(d.v, e.eval(&x, &[])));
            for j in 0..3 {
                let h = 1e-6;
                let mut xp = x;
                let mut xm = x;
                xp[j] += h;
                xm[j] -= h;
                let fd = (e.eval(&xp, &[]) - e.eval(&xm, &[])) / (2.0 * h);
                assert!((fd - d.g[j]).norm() < 1e-7, "{src} d/dx{j}: {fd} vs {}", d.g[j]);
            }
        }
    }

    #[test]
    fn integer_powers_are_exact_at_zero() {
        let e = Expr::parse("z^2", PLANE).unwrap();
        let d = e.eval_dual(&[0.0, 0.0], &[]);
        assert_eq!(d.v, C64::new(0.0, 0.0));
        assert_eq!(d.g[0], C64::new(0.0, 0.0));
    }

    #[test]
    fn malformed_inputs_are_schema_errors() {
        for bad in ["1 +", "(z", "foo", "z $ 2", "sin z", "|z"] {
            assert!(matches!(Expr::parse(bad, PLANE), Err(Error::Schema(_))), "{bad}");
        }
    }
}
