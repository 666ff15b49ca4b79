//! Exact symbolic expression trees in up to four real variables.
//!
//! Every node kind has an exact partial derivative inside the same node
//! algebra, so residuals of the closed-form constructions evaluate to
//! round-off rather than truncation error. The mollifier profile and the
//! flat exponential exp(-1/u) are primitive node families that stay closed
//! under differentiation:
//!
//! * `Step(u)`    : smoothed step, 1 for u <= -1 and 0 for u >= 1, glued by
//!                  the normalized integral of exp(-1/(1-t^2));
//! * `Kernel`     : p(u) (1-u^2)^-k exp(-1/(1-u^2)) on |u| < 1, else 0;
//! * `FlatExp(u)` : exp(-1/u) for u > 0, else 0;
//! * `FlatKernel` : p(u) u^-k exp(-1/u) for u > 0, else 0.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};
use std::sync::{Arc, OnceLock};

use super::quad;

pub const MAX_VARS: usize = 4;

/// Largest u with exp(-1/u) below the f64 underflow threshold; the kernel
/// families are exactly zero there in double precision.
const UNDERFLOW_ARG: f64 = 1.0 / 709.0;

/// Dense univariate polynomial, constant coefficient first.
#[derive(Clone, Debug, PartialEq)]
pub struct Poly1(pub Vec<f64>);

impl Poly1 {
    pub fn constant(c: f64) -> Self {
        Poly1(vec![c])
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.0.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    pub fn deriv(&self) -> Poly1 {
        if self.0.len() <= 1 {
            return Poly1::constant(0.0);
        }
        Poly1(
            self.0[1..]
                .iter()
                .enumerate()
                .map(|(i, &c)| (i as f64 + 1.0) * c)
                .collect(),
        )
    }

    pub fn mul(&self, other: &Poly1) -> Poly1 {
        let mut out = vec![0.0; self.0.len() + other.0.len() - 1];
        for (i, &a) in self.0.iter().enumerate() {
            for (j, &b) in other.0.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        Poly1(out)
    }

    pub fn add(&self, other: &Poly1) -> Poly1 {
        let n = self.0.len().max(other.0.len());
        let mut out = vec![0.0; n];
        for (i, &a) in self.0.iter().enumerate() {
            out[i] += a;
        }
        for (i, &b) in other.0.iter().enumerate() {
            out[i] += b;
        }
        Poly1(out)
    }
}

#[derive(Debug)]
enum Node {
    Const(f64),
    Var(usize),
    Sum(Vec<Expr>),
    Prod(Vec<Expr>),
    /// Integer power, exponent >= 2.
    Pow(Expr, u32),
    Exp(Expr),
    Recip(Expr),
    Step(Expr),
    Kernel {
        arg: Expr,
        poly: Poly1,
        pow: u32,
    },
    FlatExp(Expr),
    FlatKernel {
        arg: Expr,
        poly: Poly1,
        pow: u32,
    },
    /// Definite integral of the integrand in variable `axis` from 0 to the
    /// current value of that variable.
    Integral {
        axis: usize,
        integrand: Expr,
    },
}

/// Immutable, shareable symbolic expression.
#[derive(Clone, Debug)]
pub struct Expr(Arc<Node>);

/// Normalization constant of the mollifier kernel: integral of
/// exp(-1/(1-t^2)) over [-1, 1].
fn mollifier_mass() -> f64 {
    static Z: OnceLock<f64> = OnceLock::new();
    *Z.get_or_init(|| {
        quad::integrate(
            |t| {
                let w = 1.0 - t * t;
                if w <= 0.0 {
                    0.0
                } else {
                    (-1.0 / w).exp()
                }
            },
            -1.0,
            1.0,
            1e-16,
        )
    })
}

/// Quadrature tolerance for axis-integral nodes.
pub const AXIS_INTEGRAL_TOL: f64 = 1e-12;
/// Quadrature tolerance for the step profile.
const STEP_TOL: f64 = 1e-14;

impl Expr {
    fn new(node: Node) -> Self {
        Expr(Arc::new(node))
    }

    pub fn c(v: f64) -> Self {
        Expr::new(Node::Const(v))
    }

    pub fn var(i: usize) -> Self {
        assert!(i < MAX_VARS, "variable index {i} out of range");
        Expr::new(Node::Var(i))
    }

    pub fn zero() -> Self {
        Expr::c(0.0)
    }

    pub fn one() -> Self {
        Expr::c(1.0)
    }

    pub fn as_const(&self) -> Option<f64> {
        match &*self.0 {
            Node::Const(v) => Some(*v),
            _ => None,
        }
    }

    pub fn is_zero_const(&self) -> bool {
        matches!(&*self.0, Node::Const(v) if *v == 0.0)
    }

    pub fn sum(terms: Vec<Expr>) -> Self {
        let mut flat = Vec::with_capacity(terms.len());
        let mut acc = 0.0;
        for t in terms {
            match &*t.0 {
                Node::Const(v) => acc += v,
                Node::Sum(inner) => {
                    for s in inner {
                        match &*s.0 {
                            Node::Const(v) => acc += v,
                            _ => flat.push(s.clone()),
                        }
                    }
                }
                _ => flat.push(t),
            }
        }
        if acc != 0.0 || flat.is_empty() {
            flat.push(Expr::c(acc));
        }
        if flat.len() == 1 {
            flat.pop().unwrap()
        } else {
            Expr::new(Node::Sum(flat))
        }
    }

    pub fn prod(factors: Vec<Expr>) -> Self {
        let mut flat = Vec::with_capacity(factors.len());
        let mut acc = 1.0;
        for f in factors {
            match &*f.0 {
                Node::Const(v) => acc *= v,
                Node::Prod(inner) => {
                    for p in inner {
                        match &*p.0 {
                            Node::Const(v) => acc *= v,
                            _ => flat.push(p.clone()),
                        }
                    }
                }
                _ => flat.push(f),
            }
        }
        if acc == 0.0 {
            return Expr::zero();
        }
        if acc != 1.0 || flat.is_empty() {
            flat.push(Expr::c(acc));
        }
        if flat.len() == 1 {
            flat.pop().unwrap()
        } else {
            Expr::new(Node::Prod(flat))
        }
    }

    pub fn powi(&self, k: u32) -> Self {
        match k {
            0 => Expr::one(),
            1 => self.clone(),
            _ => match &*self.0 {
                Node::Const(v) => Expr::c(v.powi(k as i32)),
                Node::Pow(base, m) => Expr::new(Node::Pow(base.clone(), m * k)),
                _ => Expr::new(Node::Pow(self.clone(), k)),
            },
        }
    }

    pub fn recip(&self) -> Self {
        match &*self.0 {
            Node::Const(v) => Expr::c(1.0 / v),
            Node::Recip(inner) => inner.clone(),
            _ => Expr::new(Node::Recip(self.clone())),
        }
    }

    pub fn exp(&self) -> Self {
        match &*self.0 {
            Node::Const(v) => Expr::c(v.exp()),
            _ => Expr::new(Node::Exp(self.clone())),
        }
    }

    /// Smoothed step of the argument: 1 below -1, 0 above 1.
    pub fn step(arg: Expr) -> Self {
        Expr::new(Node::Step(arg))
    }

    /// exp(-1/arg) for arg > 0, extended by 0; smooth on the line when
    /// composed with a nonnegative argument.
    pub fn flat_exp(arg: Expr) -> Self {
        Expr::new(Node::FlatExp(arg))
    }

    /// Axis-integral node: integral of `integrand` in variable `axis` from 0
    /// to the current value of that variable.
    pub fn axis_integral(axis: usize, integrand: Expr) -> Self {
        assert!(axis < MAX_VARS);
        if integrand.is_zero_const() {
            return Expr::zero();
        }
        Expr::new(Node::Integral { axis, integrand })
    }

    /// Radial mollifier bump over the listed variables: 1 where the distance
    /// to the center is <= r0, 0 where it is >= r1, glued smoothly in the
    /// squared radius.
    pub fn bump(vars_center: &[(usize, f64)], r0: f64, r1: f64) -> Self {
        assert!(0.0 <= r0 && r0 < r1);
        let s = Expr::sum(
            vars_center
                .iter()
                .map(|&(v, c)| (Expr::var(v) - Expr::c(c)).powi(2))
                .collect(),
        );
        let denom = r1 * r1 - r0 * r0;
        let t = Expr::sum(vec![
            Expr::prod(vec![Expr::c(2.0 / denom), s]),
            Expr::c(-(r0 * r0 + r1 * r1) / denom),
        ]);
        Expr::step(t)
    }

    /// exp(-1/|x - c|^2) over the listed variables; vanishes to infinite
    /// order at the center.
    pub fn flat_radial(vars_center: &[(usize, f64)]) -> Self {
        let s = Expr::sum(
            vars_center
                .iter()
                .map(|&(v, c)| (Expr::var(v) - Expr::c(c)).powi(2))
                .collect(),
        );
        Expr::flat_exp(s)
    }

    /// Largest variable index appearing in the tree.
    pub fn max_var(&self) -> Option<usize> {
        match &*self.0 {
            Node::Const(_) => None,
            Node::Var(i) => Some(*i),
            Node::Sum(v) | Node::Prod(v) => v.iter().filter_map(|e| e.max_var()).max(),
            Node::Pow(b, _) => b.max_var(),
            Node::Exp(a) | Node::Recip(a) | Node::Step(a) | Node::FlatExp(a) => a.max_var(),
            Node::Kernel { arg, .. } | Node::FlatKernel { arg, .. } => arg.max_var(),
            Node::Integral { axis, integrand } => {
                Some(integrand.max_var().map_or(*axis, |m| m.max(*axis)))
            }
        }
    }

    /// Exact partial derivative with respect to variable `axis`.
    pub fn partial(&self, axis: usize) -> Expr {
        assert!(axis < MAX_VARS);
        match &*self.0 {
            Node::Const(_) => Expr::zero(),
            Node::Var(i) => {
                if *i == axis {
                    Expr::one()
                } else {
                    Expr::zero()
                }
            }
            Node::Sum(terms) => Expr::sum(terms.iter().map(|t| t.partial(axis)).collect()),
            Node::Prod(factors) => {
                let mut terms = Vec::new();
                for (i, f) in factors.iter().enumerate() {
                    let df = f.partial(axis);
                    if df.is_zero_const() {
                        continue;
                    }
                    let mut fs: Vec<Expr> = factors
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != i)
                        .map(|(_, g)| g.clone())
                        .collect();
                    fs.push(df);
                    terms.push(Expr::prod(fs));
                }
                Expr::sum(terms)
            }
            Node::Pow(base, k) => {
                let db = base.partial(axis);
                if db.is_zero_const() {
                    return Expr::zero();
                }
                Expr::prod(vec![Expr::c(f64::from(*k)), base.powi(k - 1), db])
            }
            Node::Exp(a) => {
                let da = a.partial(axis);
                if da.is_zero_const() {
                    return Expr::zero();
                }
                Expr::prod(vec![self.clone(), da])
            }
            Node::Recip(a) => {
                let da = a.partial(axis);
                if da.is_zero_const() {
                    return Expr::zero();
                }
                Expr::prod(vec![Expr::c(-1.0), a.powi(2).recip(), da])
            }
            Node::Step(arg) => {
                let da = arg.partial(axis);
                if da.is_zero_const() {
                    return Expr::zero();
                }
                let kern = Expr::new(Node::Kernel {
                    arg: arg.clone(),
                    poly: Poly1::constant(-1.0 / mollifier_mass()),
                    pow: 0,
                });
                Expr::prod(vec![kern, da])
            }
            Node::Kernel { arg, poly, pow } => {
                let da = arg.partial(axis);
                if da.is_zero_const() {
                    return Expr::zero();
                }
                // d/du [p (1-u^2)^-k e^{-1/(1-u^2)}]
                //   = [p' (1-u^2)^2 + 2k u p (1-u^2) - 2 u p] (1-u^2)^-(k+2) e^{-1/(1-u^2)}
                let w = Poly1(vec![1.0, 0.0, -1.0]);
                let q = poly
                    .deriv()
                    .mul(&w.mul(&w))
                    .add(&poly.mul(&Poly1(vec![0.0, 2.0 * f64::from(*pow)]).mul(&w)))
                    .add(&poly.mul(&Poly1(vec![0.0, -2.0])));
                let kern = Expr::new(Node::Kernel {
                    arg: arg.clone(),
                    poly: q,
                    pow: pow + 2,
                });
                Expr::prod(vec![kern, da])
            }
            Node::FlatExp(arg) => {
                let da = arg.partial(axis);
                if da.is_zero_const() {
                    return Expr::zero();
                }
                let kern = Expr::new(Node::FlatKernel {
                    arg: arg.clone(),
                    poly: Poly1::constant(1.0),
                    pow: 2,
                });
                Expr::prod(vec![kern, da])
            }
            Node::FlatKernel { arg, poly, pow } => {
                let da = arg.partial(axis);
                if da.is_zero_const() {
                    return Expr::zero();
                }
                // d/du [p u^-k e^{-1/u}] = [p' u^2 - k p u + p] u^-(k+2) e^{-1/u}
                let q = poly
                    .deriv()
                    .mul(&Poly1(vec![0.0, 0.0, 1.0]))
                    .add(&poly.mul(&Poly1(vec![1.0, -f64::from(*pow)])));
                let kern = Expr::new(Node::FlatKernel {
                    arg: arg.clone(),
                    poly: q,
                    pow: pow + 2,
                });
                Expr::prod(vec![kern, da])
            }
            Node::Integral { axis: ax, integrand } => {
                if *ax == axis {
                    // fundamental theorem of calculus
                    integrand.clone()
                } else {
                    Expr::axis_integral(*ax, integrand.partial(axis))
                }
            }
        }
    }

    /// Evaluate at a point (length >= 1 + max_var).
    pub fn eval(&self, pt: &[f64]) -> f64 {
        match &*self.0 {
            Node::Const(v) => *v,
            Node::Var(i) => pt[*i],
            Node::Sum(terms) => terms.iter().map(|t| t.eval(pt)).sum(),
            Node::Prod(factors) => factors.iter().map(|f| f.eval(pt)).product(),
            Node::Pow(base, k) => base.eval(pt).powi(*k as i32),
            Node::Exp(a) => a.eval(pt).exp(),
            Node::Recip(a) => 1.0 / a.eval(pt),
            Node::Step(arg) => {
                let u = arg.eval(pt);
                if u <= -1.0 {
                    1.0
                } else if u >= 1.0 {
                    0.0
                } else {
                    quad::integrate(
                        |t| {
                            let w = 1.0 - t * t;
                            if w <= 0.0 {
                                0.0
                            } else {
                                (-1.0 / w).exp()
                            }
                        },
                        u,
                        1.0,
                        STEP_TOL,
                    ) / mollifier_mass()
                }
            }
            Node::Kernel { arg, poly, pow } => {
                let u = arg.eval(pt);
                let w = 1.0 - u * u;
                if w <= UNDERFLOW_ARG {
                    0.0
                } else {
                    poly.eval(u) * w.powi(-(*pow as i32)) * (-1.0 / w).exp()
                }
            }
            Node::FlatExp(arg) => {
                let u = arg.eval(pt);
                if u <= 0.0 {
                    0.0
                } else {
                    (-1.0 / u).exp()
                }
            }
            Node::FlatKernel { arg, poly, pow } => {
                let u = arg.eval(pt);
                if u <= UNDERFLOW_ARG {
                    0.0
                } else {
                    poly.eval(u) * u.powi(-(*pow as i32)) * (-1.0 / u).exp()
                }
            }
            Node::Integral { axis, integrand } => {
                let upper = pt[*axis];
                let mut scratch = [0.0f64; MAX_VARS];
                scratch[..pt.len()].copy_from_slice(pt);
                quad::integrate(
                    |t| {
                        let mut p = scratch;
                        p[*axis] = t;
                        integrand.eval(&p[..pt.len().max(*axis + 1)])
                    },
                    0.0,
                    upper,
                    AXIS_INTEGRAL_TOL,
                )
            }
        }
    }

    /// True if the tree contains an axis-integral node.
    pub fn has_integral(&self) -> bool {
        match &*self.0 {
            Node::Const(_) | Node::Var(_) => false,
            Node::Sum(v) | Node::Prod(v) => v.iter().any(|e| e.has_integral()),
            Node::Pow(b, _) => b.has_integral(),
            Node::Exp(a) | Node::Recip(a) | Node::Step(a) | Node::FlatExp(a) => a.has_integral(),
            Node::Kernel { arg, .. } | Node::FlatKernel { arg, .. } => arg.has_integral(),
            Node::Integral { .. } => true,
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &*self.0 {
            Node::Const(v) => write!(f, "{v}"),
            Node::Var(i) => write!(f, "x{}", i + 1),
            Node::Sum(t) => {
                write!(f, "(")?;
                for (i, e) in t.iter().enumerate() {
                    if i > 0 {
                        write!(f, " + ")?;
                    }
                    write!(f, "{e}")?;
                }
                write!(f, ")")
            }
            Node::Prod(t) => {
                write!(f, "(")?;
                for (i, e) in t.iter().enumerate() {
                    if i > 0 {
                        write!(f, "*")?;
                    }
                    write!(f, "{e}")?;
                }
                write!(f, ")")
            }
            Node::Pow(b, k) => write!(f, "{b}^{k}"),
            Node::Exp(a) => write!(f, "exp({a})"),
            Node::Recip(a) => write!(f, "1/({a})"),
            Node::Step(a) => write!(f, "step({a})"),
            Node::Kernel { arg, pow, .. } => write!(f, "kernel[{pow}]({arg})"),
            Node::FlatExp(a) => write!(f, "flatexp({a})"),
            Node::FlatKernel { arg, pow, .. } => write!(f, "flatkernel[{pow}]({arg})"),
            Node::Integral { axis, integrand } => {
                write!(f, "int_0^x{}({integrand})", axis + 1)
            }
        }
    }
}

impl Add for Expr {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        Expr::sum(vec![self, rhs])
    }
}

impl Add for &Expr {
    type Output = Expr;
    fn add(self, rhs: &Expr) -> Expr {
        Expr::sum(vec![self.clone(), rhs.clone()])
    }
}

impl Sub for Expr {
    type Output = Expr;
    fn sub(self, rhs: Expr) -> Expr {
        Expr::sum(vec![self, -rhs])
    }
}

impl Sub for &Expr {
    type Output = Expr;
    fn sub(self, rhs: &Expr) -> Expr {
        self.clone() - rhs.clone()
    }
}

impl Mul for Expr {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        Expr::prod(vec![self, rhs])
    }
}

impl Mul for &Expr {
    type Output = Expr;
    fn mul(self, rhs: &Expr) -> Expr {
        Expr::prod(vec![self.clone(), rhs.clone()])
    }
}

impl Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::prod(vec![Expr::c(-1.0), self])
    }
}

impl Neg for &Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::prod(vec![Expr::c(-1.0), self.clone()])
    }
}
