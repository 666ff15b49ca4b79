//! Closed-form counterexample families for unique continuation of
//! determinants, with grid certification.
//!
//! Four constructions are built here:
//!
//! * the non-diagonal 2D family: F = [[1, b], [0, c]] killed by
//!   Lap + X with the X11 quotient formula, det F = c;
//! * its 1D analogue F = [[1, t], [0, c]];
//! * the diagonal families in 4D/3D/2D obtained by solving the pointwise
//!   nullspace equation for the coefficients;
//! * the divergence-type family obtained from the 2D diagonal one by a
//!   positive multiplier.

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::field::{sample, DomainBox, Expr, FieldError, GridField, MatrixField};
use crate::operators::{
    dirichlet_solve, DirichletProblem, EllipticOperator, OperatorError, OperatorForm,
};

#[derive(Debug, Error)]
pub enum CexError {
    #[error("X11 denominator reaches {value} at {point:?} inside the construction region")]
    DenominatorVanishes { point: Vec<f64>, value: f64 },
    #[error("derivative matrix is rank deficient at {point:?} (ratio {ratio})")]
    RankDeficient { point: Vec<f64>, ratio: f64 },
    #[error("coefficient positivity lost: minimum {min} <= floor {floor} for every eta down to {eta_min}")]
    PositivityLost { min: f64, floor: f64, eta_min: f64 },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
}

/// First-order scalar operator: sum of coefficient * d_i plus a zero-order
/// multiplier.
#[derive(Clone, Debug)]
pub struct FirstOrderOp {
    pub dcoef: Vec<Expr>,
    pub zero: Expr,
}

impl FirstOrderOp {
    pub fn zero_op(n: usize) -> Self {
        FirstOrderOp {
            dcoef: vec![Expr::zero(); n],
            zero: Expr::zero(),
        }
    }

    /// Plain partial derivative in one axis, optionally scaled.
    pub fn derivative(n: usize, axis: usize, scale: f64) -> Self {
        let mut dcoef = vec![Expr::zero(); n];
        dcoef[axis] = Expr::c(scale);
        FirstOrderOp {
            dcoef,
            zero: Expr::zero(),
        }
    }

    /// Multiplication by a fixed expression.
    pub fn multiplication(n: usize, factor: Expr) -> Self {
        FirstOrderOp {
            dcoef: vec![Expr::zero(); n],
            zero: factor,
        }
    }

    pub fn apply(&self, u: &Expr) -> Expr {
        let mut terms: Vec<Expr> = self
            .dcoef
            .iter()
            .enumerate()
            .map(|(i, c)| Expr::prod(vec![c.clone(), u.partial(i)]))
            .collect();
        terms.push(Expr::prod(vec![self.zero.clone(), u.clone()]));
        Expr::sum(terms)
    }
}

/// Matrix of first-order operators acting by matrix multiplication.
#[derive(Clone, Debug)]
pub struct FirstOrderMatrixOp {
    pub m: usize,
    pub entries: Vec<FirstOrderOp>,
}

impl FirstOrderMatrixOp {
    pub fn at(&self, i: usize, j: usize) -> &FirstOrderOp {
        &self.entries[i * self.m + j]
    }

    /// (X F)_{ij} = sum_k X_{ik}(F_{kj})
    pub fn apply_matrix(&self, f: &MatrixField<Expr>) -> MatrixField<Expr> {
        let m = self.m;
        let mut out = Vec::with_capacity(m * m);
        for i in 0..m {
            for j in 0..m {
                out.push(Expr::sum(
                    (0..m).map(|k| self.at(i, k).apply(f.at(k, j))).collect(),
                ));
            }
        }
        MatrixField::new(m, out)
    }
}

/// Parameters of the 2D non-diagonal certification.
#[derive(Clone, Debug)]
pub struct CexParams {
    /// inner vanishing radius of the certificate
    pub epsilon: f64,
    pub bx: DomainBox,
    pub resolution: usize,
    /// certificate tolerance (WUCP verdict threshold)
    pub tol: f64,
    /// the denominator is required to stay above this value on the guard
    /// region (a slight dilation of the inner ball)
    pub denom_floor: f64,
}

impl Default for CexParams {
    fn default() -> Self {
        CexParams {
            epsilon: 0.25,
            bx: DomainBox::centered(2, 0.6),
            resolution: 129,
            tol: 1e-12,
            denom_floor: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    /// det vanishes identically on the inner region and not on the annulus
    WucpViolation,
    NotACounterexample,
}

/// Certification record of a counterexample build.
#[derive(Clone, Debug)]
pub struct CexCertificate {
    pub residual_sup: f64,
    pub det_identity_err: f64,
    pub inner_det_sup: f64,
    pub annulus_det_sup: f64,
    /// minimum of the constrained coefficient set (second-order
    /// coefficients); +inf when the construction has fixed coefficients
    pub coeff_positivity_min: f64,
    pub verdict: Verdict,
    /// X11 denominator minimum over the guard region / the whole box
    pub denominator_min_guard: f64,
    pub denominator_min_box: f64,
}

fn verdict_from(inner: f64, annulus: f64, tol: f64) -> Verdict {
    if inner <= tol && annulus > 10.0 * tol {
        Verdict::WucpViolation
    } else {
        Verdict::NotACounterexample
    }
}

/// Output of the 2D non-diagonal construction.
pub struct CexOutput {
    pub f: MatrixField<Expr>,
    pub x: FirstOrderMatrixOp,
    pub cert: CexCertificate,
}

/// The simple 2D counterexample: X has only the X11 d_y and d_x entries.
pub fn cex_simple(c: &Expr, params: &CexParams) -> Result<CexOutput, CexError> {
    cex_general(
        c,
        FirstOrderOp::zero_op(2),
        FirstOrderOp::zero_op(2),
        params,
    )
}

/// The generalized 2D counterexample with smooth first-order X12 and X22.
///
/// With w = Lap c + X22 c, the matrix F = [[1, b], [0, c]],
/// b = y - int_0^x w dt, satisfies Lap F + X F = 0 for
/// X = [[X11 d_y, X12], [d_x, X22]], X11 = -(Lap b + X12 c) / d_y b, and
/// det F = c identically.
pub fn cex_general(
    c: &Expr,
    x12: FirstOrderOp,
    x22: FirstOrderOp,
    params: &CexParams,
) -> Result<CexOutput, CexError> {
    let lap = EllipticOperator::laplacian(2);
    let w = Expr::sum(vec![lap.apply(c)?, x22.apply(c)]);
    let b = Expr::var(1) - Expr::axis_integral(0, w.clone());
    let dyb = b.partial(1);
    let lap_b = lap.apply(&b)?;
    let x12c = x12.apply(c);
    let x11 = Expr::prod(vec![
        -Expr::sum(vec![lap_b.clone(), x12c.clone()]),
        dyb.recip(),
    ]);

    let f = MatrixField::new(2, vec![Expr::one(), b.clone(), Expr::zero(), c.clone()]);
    let mut x11_op = FirstOrderOp::zero_op(2);
    x11_op.dcoef[1] = x11;
    let x = FirstOrderMatrixOp {
        m: 2,
        entries: vec![x11_op, x12, FirstOrderOp::derivative(2, 0, 1.0), x22],
    };

    // denominator guard: sampled over a slight dilation of the inner ball,
    // where the construction claims a smooth operator; recorded over the
    // whole box as well (the theorem is local)
    let res = [params.resolution, params.resolution];
    let denom_grid = sample(&dyb, &params.bx, &res)?;
    let eps = params.epsilon;
    let guard_r2 = (1.05 * eps) * (1.05 * eps);
    let denominator_min_guard =
        denom_grid.min_where(|p| p[0] * p[0] + p[1] * p[1] <= guard_r2);
    let denominator_min_box = denom_grid.min_where(|_| true);
    if denominator_min_guard < params.denom_floor {
        let mut bad = vec![0.0, 0.0];
        let mut worst = f64::INFINITY;
        for flat in 0..denom_grid.len() {
            let p = denom_grid.point(flat);
            if p[0] * p[0] + p[1] * p[1] <= guard_r2 && denom_grid.values()[flat] < worst {
                worst = denom_grid.values()[flat];
                bad = p;
            }
        }
        return Err(CexError::DenominatorVanishes {
            point: bad,
            value: worst,
        });
    }

    // residual of Lap F + X F, entrywise
    let xf = x.apply_matrix(&f);
    let mut residual_sup = 0.0f64;
    for i in 0..2 {
        for j in 0..2 {
            let r = Expr::sum(vec![lap.apply(f.at(i, j))?, xf.at(i, j).clone()]);
            let g = sample(&r, &params.bx, &res)?;
            residual_sup = residual_sup.max(g.sup_norm());
        }
    }

    // det F = c as an exact identity
    let det = f.det();
    let det_identity_err = sample(&(&det - c), &params.bx, &res)?.sup_norm();

    let det_grid = sample(&det, &params.bx, &res)?;
    let inner_det_sup = det_grid.sup_norm_where(|p| p[0] * p[0] + p[1] * p[1] <= eps * eps);
    let annulus_det_sup = det_grid.sup_norm_where(|p| {
        let r2 = p[0] * p[0] + p[1] * p[1];
        r2 > eps * eps && r2 < 4.0 * eps * eps
    });

    let cert = CexCertificate {
        residual_sup,
        det_identity_err,
        inner_det_sup,
        annulus_det_sup,
        coeff_positivity_min: f64::INFINITY,
        verdict: verdict_from(inner_det_sup, annulus_det_sup, params.tol),
        denominator_min_guard,
        denominator_min_box,
    };
    Ok(CexOutput { f, x, cert })
}

/// Output of the 1D construction.
pub struct Cex1dOutput {
    pub f: MatrixField<Expr>,
    pub x: FirstOrderMatrixOp,
    pub cert: CexCertificate,
}

/// 1D counterexample: F = [[1, t], [0, c]], X21 = -c'' d/dt,
/// F'' + X F = 0 and det F = c.
pub fn cex_1d(
    c: &Expr,
    epsilon: f64,
    half_width: f64,
    resolution: usize,
    tol: f64,
) -> Result<Cex1dOutput, CexError> {
    let t = Expr::var(0);
    let f = MatrixField::new(2, vec![Expr::one(), t, Expr::zero(), c.clone()]);
    let c2 = c.partial(0).partial(0);
    let mut x21 = FirstOrderOp::zero_op(1);
    x21.dcoef[0] = -&c2;
    let x = FirstOrderMatrixOp {
        m: 2,
        entries: vec![
            FirstOrderOp::zero_op(1),
            FirstOrderOp::zero_op(1),
            x21,
            FirstOrderOp::zero_op(1),
        ],
    };
    let d2 = EllipticOperator::laplacian(1);
    let bx = DomainBox::centered(1, half_width);
    let res = [resolution];
    let xf = x.apply_matrix(&f);
    let mut residual_sup = 0.0f64;
    for i in 0..2 {
        for j in 0..2 {
            let r = Expr::sum(vec![d2.apply(f.at(i, j))?, xf.at(i, j).clone()]);
            residual_sup = residual_sup.max(sample(&r, &bx, &res)?.sup_norm());
        }
    }
    let det = f.det();
    let det_identity_err = sample(&(&det - c), &bx, &res)?.sup_norm();
    let det_grid = sample(&det, &bx, &res)?;
    let inner = det_grid.sup_norm_where(|p| p[0].abs() <= epsilon);
    let annulus =
        det_grid.sup_norm_where(|p| p[0].abs() > epsilon && p[0].abs() < 2.0 * epsilon);
    let cert = CexCertificate {
        residual_sup,
        det_identity_err,
        inner_det_sup: inner,
        annulus_det_sup: annulus,
        coeff_positivity_min: f64::INFINITY,
        verdict: verdict_from(inner, annulus, tol),
        denominator_min_guard: f64::INFINITY,
        denominator_min_box: f64::INFINITY,
    };
    Ok(Cex1dOutput { f, x, cert })
}

/// One derivative monomial of a pattern operator.
#[derive(Clone, Copy, Debug)]
pub struct PatternTerm {
    pub coef: f64,
    pub orders: [u8; 4],
}

impl PatternTerm {
    fn apply(&self, u: &Expr) -> Expr {
        let mut e = u.clone();
        for (axis, &k) in self.orders.iter().enumerate() {
            for _ in 0..k {
                e = e.partial(axis);
            }
        }
        Expr::prod(vec![Expr::c(self.coef), e])
    }
}

/// The three diagonal-counterexample patterns of coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiagPattern {
    /// a d1^2 + b d2^2 + c d3^2 + d d4^2 in four variables
    Dim4PureDiagonal,
    /// a d1^2 + b d2^2 + c d3^2 + 2 d d1 d2 in three variables
    Dim3CrossTerm,
    /// a d1^2 + b d2^2 + c d1 + d d2 in two variables
    Dim2FirstOrder,
}

impl DiagPattern {
    pub fn dimension(self) -> usize {
        match self {
            DiagPattern::Dim4PureDiagonal => 4,
            DiagPattern::Dim3CrossTerm => 3,
            DiagPattern::Dim2FirstOrder => 2,
        }
    }

    pub fn terms(self) -> Vec<PatternTerm> {
        match self {
            DiagPattern::Dim4PureDiagonal => vec![
                PatternTerm { coef: 1.0, orders: [2, 0, 0, 0] },
                PatternTerm { coef: 1.0, orders: [0, 2, 0, 0] },
                PatternTerm { coef: 1.0, orders: [0, 0, 2, 0] },
                PatternTerm { coef: 1.0, orders: [0, 0, 0, 2] },
            ],
            DiagPattern::Dim3CrossTerm => vec![
                PatternTerm { coef: 1.0, orders: [2, 0, 0, 0] },
                PatternTerm { coef: 1.0, orders: [0, 2, 0, 0] },
                PatternTerm { coef: 1.0, orders: [0, 0, 2, 0] },
                PatternTerm { coef: 2.0, orders: [1, 1, 0, 0] },
            ],
            DiagPattern::Dim2FirstOrder => vec![
                PatternTerm { coef: 1.0, orders: [2, 0, 0, 0] },
                PatternTerm { coef: 1.0, orders: [0, 2, 0, 0] },
                PatternTerm { coef: 1.0, orders: [1, 0, 0, 0] },
                PatternTerm { coef: 1.0, orders: [0, 1, 0, 0] },
            ],
        }
    }

    /// Seed triple (g1, g2, g3 = g1 g2) whose derivative matrix has full
    /// rank at the origin.
    pub fn seed(self) -> (Expr, Expr, Expr) {
        let x = Expr::var(0);
        let y = Expr::var(1);
        match self {
            DiagPattern::Dim4PureDiagonal => {
                let z = Expr::var(2);
                let t = Expr::var(3);
                let g1 = x.powi(2) - y.powi(2) + t.clone() + x.clone();
                let g2 = x.powi(2) - z.powi(2) + t - x;
                let g3 = &g1 * &g2;
                (g1, g2, g3)
            }
            DiagPattern::Dim3CrossTerm => {
                let z = Expr::var(2);
                let g1 = x.powi(2) - y.powi(2) + x.clone();
                let g2 = x.powi(2) - z.powi(2) + x - Expr::c(2.0) * y;
                let g3 = &g1 * &g2;
                (g1, g2, g3)
            }
            DiagPattern::Dim2FirstOrder => {
                let g1 = x.powi(2) + x.clone() + y.clone();
                let g2 = x.powi(2) + x - y;
                let g3 = &g1 * &g2;
                (g1, g2, g3)
            }
        }
    }
}

/// Pointwise nullspace vector of the 3 x #terms derivative matrix, computed
/// by the generalized cross product when there are four coefficients and by
/// the smallest singular vector otherwise. Normalized so the first component
/// equals one at the evaluation point.
pub fn nullspace_coeffs(
    f1: &Expr,
    f2: &Expr,
    f3: &Expr,
    point: &[f64],
    pattern: &[PatternTerm],
) -> Result<Vec<f64>, CexError> {
    let rows: Vec<Vec<Expr>> = [f1, f2, f3]
        .iter()
        .map(|f| pattern.iter().map(|t| t.apply(f)).collect())
        .collect();
    let m = DMatrix::from_fn(3, pattern.len(), |i, j| rows[i][j].eval(point));
    nullspace_of_matrix(&m, point)
}

/// Smallest-singular-vector route, usable as an independent oracle for the
/// cross-product formula.
pub fn nullspace_svd(m: &DMatrix<f64>, point: &[f64]) -> Result<Vec<f64>, CexError> {
    let svd = m.clone().svd(false, true);
    let mut sigmas: Vec<f64> = svd.singular_values.iter().cloned().collect();
    sigmas.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let smax = sigmas[0].max(1e-300);
    if sigmas.len() >= 3 && sigmas[2] <= 1e-10 * smax {
        return Err(CexError::RankDeficient {
            point: point.to_vec(),
            ratio: sigmas[2] / smax,
        });
    }
    let vt = svd.v_t.expect("svd with v requested");
    let last = vt.nrows() - 1;
    let v: Vec<f64> = (0..m.ncols()).map(|j| vt[(last, j)]).collect();
    normalize_first(v, point)
}

fn nullspace_of_matrix(m: &DMatrix<f64>, point: &[f64]) -> Result<Vec<f64>, CexError> {
    if m.ncols() == 4 {
        let svd = m.clone().svd(false, false);
        let mut sigmas: Vec<f64> = svd.singular_values.iter().cloned().collect();
        sigmas.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let smax = sigmas[0].max(1e-300);
        if sigmas.len() >= 3 && sigmas[2] <= 1e-10 * smax {
            return Err(CexError::RankDeficient {
                point: point.to_vec(),
                ratio: sigmas[2] / smax,
            });
        }
        normalize_first(cross_product_4(m), point)
    } else {
        nullspace_svd(m, point)
    }
}

fn normalize_first(v: Vec<f64>, point: &[f64]) -> Result<Vec<f64>, CexError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(v[0].abs() > 1e-10 * norm) {
        return Err(CexError::RankDeficient {
            point: point.to_vec(),
            ratio: v[0].abs() / norm.max(1e-300),
        });
    }
    let scale = v[0];
    Ok(v.into_iter().map(|x| x / scale).collect())
}

/// Generalized cross product of the three rows of a 3x4 matrix: the unique
/// (up to scale) vector orthogonal to all rows, smooth in the entries.
fn cross_product_4(m: &DMatrix<f64>) -> Vec<f64> {
    let minor = |skip: usize| -> f64 {
        let c: Vec<usize> = (0..4).filter(|&j| j != skip).collect();
        let a = |i: usize, j: usize| m[(i, c[j])];
        a(0, 0) * (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1))
            - a(0, 1) * (a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0))
            + a(0, 2) * (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0))
    };
    (0..4)
        .map(|j| if j % 2 == 0 { minor(j) } else { -minor(j) })
        .collect()
}

/// Specification of a diagonal counterexample build.
#[derive(Clone, Debug)]
pub struct DiagonalCexSpec {
    pub pattern: DiagPattern,
    pub epsilon: f64,
    /// initial extension amplitude; halved until the positivity floor holds
    pub eta: f64,
    /// nodes per axis on the box of half-width 2 epsilon
    pub resolution: usize,
    /// positivity floor for the second-order coefficient set; `None`
    /// disables the check (the certificate still records the minimum)
    pub positivity_floor: Option<f64>,
    pub tol: f64,
    /// number of times eta may be halved before giving up
    pub max_backtrack: u32,
}

impl DiagonalCexSpec {
    pub fn new(pattern: DiagPattern) -> Self {
        DiagonalCexSpec {
            pattern,
            epsilon: 0.25,
            eta: 0.05,
            resolution: 21,
            positivity_floor: Some(0.5),
            tol: 1e-12,
            max_backtrack: 10,
        }
    }
}

/// Output of a diagonal counterexample build.
#[derive(Debug)]
pub struct DiagCexOutput {
    /// pointwise coefficient fields in pattern order
    pub coefficients: Vec<GridField>,
    pub f1: Expr,
    pub f2: Expr,
    pub f3: Expr,
    pub cert: CexCertificate,
    /// amplitude actually used after backtracking
    pub eta_used: f64,
    pub bx: DomainBox,
}

/// Constrained positivity measure per pattern: all four coefficients for the
/// pure diagonal pattern, the strong-ellipticity eigenvalue for the 3D
/// cross-term pattern, the two second-order coefficients for the 2D pattern.
fn positivity_measure(pattern: DiagPattern, v: &[f64]) -> f64 {
    match pattern {
        DiagPattern::Dim4PureDiagonal => v.iter().cloned().fold(f64::INFINITY, f64::min),
        DiagPattern::Dim3CrossTerm => {
            let (a, b, c, d) = (v[0], v[1], v[2], v[3]);
            let tr = 0.5 * (a + b);
            let disc = (0.25 * (a - b) * (a - b) + d * d).sqrt();
            (tr - disc).min(c)
        }
        DiagPattern::Dim2FirstOrder => v[0].min(v[1]),
    }
}

/// Bump supported in the open annulus between 1.25 eps and 1.75 eps.
pub fn annulus_bump(n: usize, epsilon: f64) -> Expr {
    let vars: Vec<(usize, f64)> = (0..n).map(|i| (i, 0.0)).collect();
    let outer = Expr::bump(&vars, 1.5 * epsilon, 1.75 * epsilon);
    let inner = Expr::bump(&vars, 1.25 * epsilon, 1.5 * epsilon);
    outer - inner
}

pub fn diag_cex(spec: &DiagonalCexSpec) -> Result<DiagCexOutput, CexError> {
    let n = spec.pattern.dimension();
    let terms = spec.pattern.terms();
    let (g1, g2, g3) = spec.pattern.seed();
    let eps = spec.epsilon;
    let bx = DomainBox::centered(n, 2.0 * eps);
    let res = vec![spec.resolution; n];
    let chi = annulus_bump(n, eps);

    let mut eta = spec.eta;
    let mut last_min = f64::NEG_INFINITY;
    for attempt in 0..=spec.max_backtrack {
        let f3 = &g3 * &(Expr::one() + Expr::c(eta) * chi.clone());

        // derivative-row expressions, then pointwise cross-product kernels
        let rows: Vec<Vec<Expr>> = [&g1, &g2, &f3]
            .iter()
            .map(|f| terms.iter().map(|t| t.apply(f)).collect())
            .collect();
        let probe = GridField::from_fn(&bx, &res, |_| 0.0);
        let npts = probe.len();
        let ncoef = terms.len();

        let results: Vec<Option<Vec<f64>>> = (0..npts)
            .into_par_iter()
            .map(|flat| {
                let p = probe.point(flat);
                let m = DMatrix::from_fn(3, ncoef, |i, j| rows[i][j].eval(&p));
                let v = cross_product_4(&m);
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if v[0].abs() <= 1e-10 * norm || norm == 0.0 {
                    None
                } else {
                    let s = v[0];
                    Some(v.into_iter().map(|x| x / s).collect())
                }
            })
            .collect();

        if let Some(flat) = results.iter().position(|r| r.is_none()) {
            if attempt == spec.max_backtrack || eta == 0.0 {
                return Err(CexError::RankDeficient {
                    point: probe.point(flat),
                    ratio: 0.0,
                });
            }
            eta *= 0.5;
            continue;
        }

        // positivity over the open 2-epsilon ball
        let mut pos_min = f64::INFINITY;
        for (flat, r) in results.iter().enumerate() {
            let p = probe.point(flat);
            let r2: f64 = p.iter().map(|x| x * x).sum();
            if r2 < 4.0 * eps * eps {
                pos_min = pos_min.min(positivity_measure(spec.pattern, r.as_ref().unwrap()));
            }
        }
        last_min = pos_min;
        if let Some(floor) = spec.positivity_floor {
            if !(pos_min >= floor) {
                if attempt == spec.max_backtrack || eta == 0.0 {
                    return Err(CexError::PositivityLost {
                        min: pos_min,
                        floor,
                        eta_min: eta,
                    });
                }
                eta *= 0.5;
                continue;
            }
        }

        // residual of the pattern operator with the pointwise coefficients
        let coeff_fields: Vec<GridField> = (0..ncoef)
            .map(|k| {
                let mut g = GridField::from_fn(&bx, &res, |_| 0.0);
                for (flat, r) in results.iter().enumerate() {
                    g.values_mut()[flat] = r.as_ref().unwrap()[k];
                }
                g
            })
            .collect();

        let mut residual_sup = 0.0f64;
        for frow in &rows {
            let deriv_grids: Vec<GridField> = frow
                .iter()
                .map(|e| sample(e, &bx, &res))
                .collect::<Result<_, _>>()?;
            for flat in 0..npts {
                let p = probe.point(flat);
                let r2: f64 = p.iter().map(|x| x * x).sum();
                if r2 >= 4.0 * eps * eps {
                    continue;
                }
                let v = results[flat].as_ref().unwrap();
                let r: f64 = (0..ncoef)
                    .map(|k| v[k] * deriv_grids[k].values()[flat])
                    .sum();
                residual_sup = residual_sup.max(r.abs());
            }
        }

        // determinant gap f1 f2 - f3 = -eta g3 chi
        let gap = &(&g1 * &g2) - &f3;
        let gap_grid = sample(&gap, &bx, &res)?;
        let inner =
            gap_grid.sup_norm_where(|p| p.iter().map(|x| x * x).sum::<f64>() <= eps * eps);
        let annulus = gap_grid.sup_norm_where(|p| {
            let r2: f64 = p.iter().map(|x| x * x).sum();
            r2 > eps * eps && r2 < 4.0 * eps * eps
        });

        let cert = CexCertificate {
            residual_sup,
            det_identity_err: 0.0,
            inner_det_sup: inner,
            annulus_det_sup: annulus,
            coeff_positivity_min: pos_min,
            verdict: verdict_from(inner, annulus, spec.tol),
            denominator_min_guard: f64::INFINITY,
            denominator_min_box: f64::INFINITY,
        };
        return Ok(DiagCexOutput {
            coefficients: coeff_fields,
            f1: g1,
            f2: g2,
            f3,
            cert,
            eta_used: eta,
            bx,
        });
    }
    Err(CexError::PositivityLost {
        min: last_min,
        floor: spec.positivity_floor.unwrap_or(f64::NEG_INFINITY),
        eta_min: eta,
    })
}

/// Symbolic coefficient fields of the 2D diagonal pattern: the pointwise
/// cross product as expressions (first coefficient normalized to 1).
pub fn diag2d_symbolic_coefficients(f3: &Expr) -> [Expr; 4] {
    let pattern = DiagPattern::Dim2FirstOrder.terms();
    let (g1, g2, _) = DiagPattern::Dim2FirstOrder.seed();
    let rows: Vec<Vec<Expr>> = [&g1, &g2, f3]
        .iter()
        .map(|f| pattern.iter().map(|t| t.apply(f)).collect())
        .collect();
    let minor = |skip: usize| -> Expr {
        let c: Vec<usize> = (0..4).filter(|&j| j != skip).collect();
        let a = |i: usize, j: usize| rows[i][c[j]].clone();
        Expr::sum(vec![
            a(0, 0) * (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)),
            -(a(0, 1) * (a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0))),
            a(0, 2) * (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0)),
        ])
    };
    let v: Vec<Expr> = (0..4)
        .map(|j| if j % 2 == 0 { minor(j) } else { -minor(j) })
        .collect();
    let inv = v[0].recip();
    [Expr::one(), &v[1] * &inv, &v[2] * &inv, &v[3] * &inv]
}

/// Output of the divergence-type counterexample.
pub struct DivCexOutput {
    pub psi: GridField,
    pub psi_min: f64,
    /// g_1, g_2, g_3 = f_k / psi, then 1/psi
    pub g_fields: Vec<GridField>,
    /// sup norms of the reduced divergence-form residual per field
    pub residual_sups: Vec<f64>,
    /// interior L2 norms of the same residuals
    pub residual_l2s: Vec<f64>,
    pub cert: CexCertificate,
    pub eta_used: f64,
}

/// Divergence-type counterexample: build the 2D diagonal case, rewrite it in
/// divergence form (second-order signs flipped), solve the adjoint Dirichlet
/// problem for the multiplier psi with boundary value 1, and certify the
/// reduced equation for g_k = f_k / psi and for 1/psi.
pub fn div_cex(spec: &DiagonalCexSpec) -> Result<DivCexOutput, CexError> {
    assert_eq!(spec.pattern, DiagPattern::Dim2FirstOrder);
    let diag = diag_cex(spec)?;
    let eps = spec.epsilon;
    let bx = DomainBox::centered(2, 2.0 * eps);
    let nn = spec.resolution;

    // symbolic kernel coefficients (atil = 1); the f_k satisfy
    // atil f_11 + btil f_22 + ctil f_1 + dtil f_2 = 0, which in divergence
    // form reads -d1(a d1 f) - d2(b d2 f) + C.grad f = 0 with a = -atil,
    // b = -btil, C = (ctil - d1 atil, dtil - d2 btil)
    let [atil, btil, ctil, dtil] = diag2d_symbolic_coefficients(&diag.f3);
    let c1 = &ctil - &atil.partial(0);
    let c2 = &dtil - &btil.partial(1);

    // adjoint problem L* psi = -d_i(a d_i psi + C_i psi) = 0, multiplied by
    // -1 to expose the positive-definite divergence form
    let lstar = EllipticOperator {
        n: 2,
        a: vec![
            vec![atil.clone(), Expr::zero()],
            vec![Expr::zero(), btil.clone()],
        ],
        b_div: vec![-&c1, -&c2],
        c_out: vec![Expr::zero(), Expr::zero()],
        d: Expr::zero(),
        form: OperatorForm::Divergence,
    };
    let sol = dirichlet_solve(&DirichletProblem {
        operator: lstar,
        bx: bx.clone(),
        boundary: Expr::one(),
        resolution: nn,
    })?;
    let psi = sol.field;
    let psi_min = psi.values().iter().cloned().fold(f64::INFINITY, f64::min);

    // g_k = f_k / psi plus the solution 1/psi
    let res2 = [nn, nn];
    let fs = [diag.f1.clone(), diag.f2.clone(), diag.f3.clone()];
    let mut g_fields: Vec<GridField> = Vec::new();
    for f in &fs {
        let fg = sample(f, &bx, &res2)?;
        g_fields.push(fg.zip_with(&psi, |a, b| a / b));
    }
    g_fields.push(psi.map(|v| 1.0 / v));

    let (sups, l2s) = div_residuals(&bx, nn, &psi, &g_fields, &btil, &c1, &c2);

    let mut cert = diag.cert.clone();
    // determinant of G = [[g3, g2], [g1, 1/psi]] is (f3 - f1 f2)/psi^2
    let det = g_fields[2]
        .zip_with(&g_fields[3], |a, b| a * b)
        .zip_with(&g_fields[0].zip_with(&g_fields[1], |a, b| a * b), |x, y| {
            x - y
        });
    cert.inner_det_sup = det.sup_norm_where(|p| p[0] * p[0] + p[1] * p[1] <= eps * eps);
    cert.annulus_det_sup = det.sup_norm_where(|p| {
        let r2 = p[0] * p[0] + p[1] * p[1];
        r2 > eps * eps && r2 < 4.0 * eps * eps
    });
    cert.verdict = verdict_from(cert.inner_det_sup, cert.annulus_det_sup, spec.tol);

    Ok(DivCexOutput {
        psi,
        psi_min,
        g_fields,
        residual_sups: sups,
        residual_l2s: l2s,
        cert,
        eta_used: diag.eta_used,
    })
}

/// Staggered-flux residual of the reduced divergence operator
/// -d_i(psi^2 (a^{ii} d_i g - C_i g)) with a = diag(-1, -btil), on interior
/// nodes away from the boundary layer.
fn div_residuals(
    bx: &DomainBox,
    nn: usize,
    psi: &GridField,
    gs: &[GridField],
    btil: &Expr,
    c1: &Expr,
    c2: &Expr,
) -> (Vec<f64>, Vec<f64>) {
    let hx = psi.spacing(0);
    let hy = psi.spacing(1);
    let val = |g: &GridField, i: usize, j: usize| g.values()[i * nn + j];
    let mut sups = Vec::new();
    let mut l2s = Vec::new();
    for g in gs {
        let mut sup = 0.0f64;
        let mut ss = 0.0f64;
        let mut count = 0usize;
        for i in 2..nn - 2 {
            for j in 2..nn - 2 {
                let x = bx.min(0) + i as f64 * hx;
                let y = bx.min(1) + j as f64 * hy;
                let ps = |ii: usize, jj: usize| {
                    let v = val(psi, ii, jj);
                    v * v
                };
                let flux1 = |ih: usize, xh: f64| {
                    let p2 = 0.5 * (ps(ih, j) + ps(ih + 1, j));
                    let dg = (val(g, ih + 1, j) - val(g, ih, j)) / hx;
                    let gm = 0.5 * (val(g, ih + 1, j) + val(g, ih, j));
                    p2 * (-dg - c1.eval(&[xh, y]) * gm)
                };
                let f1p = flux1(i, x + 0.5 * hx);
                let f1m = flux1(i - 1, x - 0.5 * hx);
                let flux2 = |jh: usize, yh: f64| {
                    let p2 = 0.5 * (ps(i, jh) + ps(i, jh + 1));
                    let dg = (val(g, i, jh + 1) - val(g, i, jh)) / hy;
                    let gm = 0.5 * (val(g, i, jh + 1) + val(g, i, jh));
                    p2 * (-btil.eval(&[x, yh]) * dg - c2.eval(&[x, yh]) * gm)
                };
                let f2p = flux2(j, y + 0.5 * hy);
                let f2m = flux2(j - 1, y - 0.5 * hy);
                let r = -(f1p - f1m) / hx - (f2p - f2m) / hy;
                sup = sup.max(r.abs());
                ss += r * r;
                count += 1;
            }
        }
        sups.push(sup);
        l2s.push((ss / count as f64).sqrt());
    }
    (sups, l2s)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// c vanishing on |x| <= r0 and equal to `amp` outside r1; the paper's
    /// "bump function equal zero in a neighbourhood of zero".
    pub(crate) fn inverted_bump(amp: f64, r0: f64, r1: f64) -> Expr {
        Expr::c(amp) * (Expr::one() - Expr::bump(&[(0, 0.0), (1, 0.0)], r0, r1))
    }

    #[test]
    fn cex_simple_zero_c() {
        // c = 0: b = y, X11 = 0, residual identically 0, det F = 0
        let params = CexParams {
            resolution: 33,
            ..CexParams::default()
        };
        let out = cex_simple(&Expr::zero(), &params).unwrap();
        assert_eq!(out.cert.residual_sup, 0.0);
        assert_eq!(out.cert.det_identity_err, 0.0);
        assert_eq!(out.cert.inner_det_sup, 0.0);
        assert_eq!(out.cert.verdict, Verdict::NotACounterexample);
        // b = y exactly
        let b = out.f.at(0, 1);
        assert_eq!(b.eval(&[0.3, 0.8]), 0.8);
    }

    #[test]
    fn cex_simple_bump_certificate() {
        let c = inverted_bump(1.0, 0.25, 0.5);
        let params = CexParams {
            resolution: 65,
            ..CexParams::default()
        };
        let out = cex_simple(&c, &params).unwrap();
        assert!(
            out.cert.residual_sup <= 1e-8,
            "residual {}",
            out.cert.residual_sup
        );
        assert!(out.cert.det_identity_err <= 1e-12);
        assert!(out.cert.inner_det_sup <= 1e-12);
        assert!(out.cert.annulus_det_sup >= 1e-3);
        assert_eq!(out.cert.verdict, Verdict::WucpViolation);
        // the construction is local: the denominator stays near 1 on the
        // guard region but changes sign further out on this box
        assert!(out.cert.denominator_min_guard > 0.9);
        assert!(out.cert.denominator_min_box < 0.0);
    }

    #[test]
    fn cex_general_degenerates_to_simple() {
        let c = inverted_bump(0.01, 0.25, 0.5);
        let params = CexParams {
            resolution: 33,
            ..CexParams::default()
        };
        let simple = cex_simple(&c, &params).unwrap();
        let general = cex_general(
            &c,
            FirstOrderOp::zero_op(2),
            FirstOrderOp::zero_op(2),
            &params,
        )
        .unwrap();
        assert_eq!(
            simple.cert.residual_sup.to_bits(),
            general.cert.residual_sup.to_bits()
        );
        assert_eq!(
            simple.cert.annulus_det_sup.to_bits(),
            general.cert.annulus_det_sup.to_bits()
        );
    }

    #[test]
    fn cex_general_constant_x22() {
        let c = inverted_bump(0.01, 0.25, 0.5);
        let params = CexParams {
            resolution: 49,
            ..CexParams::default()
        };
        let out = cex_general(
            &c,
            FirstOrderOp::zero_op(2),
            FirstOrderOp::multiplication(2, Expr::c(0.7)),
            &params,
        )
        .unwrap();
        assert!(
            out.cert.residual_sup <= 1e-8,
            "residual {}",
            out.cert.residual_sup
        );
        assert!(out.cert.det_identity_err <= 1e-12);
        assert_eq!(out.cert.verdict, Verdict::WucpViolation);
    }

    #[test]
    fn cex_general_antisymmetric_x() {
        // X12 = -d_x against the fixed X21 = d_x
        let c = inverted_bump(0.01, 0.25, 0.5);
        let params = CexParams {
            resolution: 49,
            ..CexParams::default()
        };
        let out = cex_general(
            &c,
            FirstOrderOp::derivative(2, 0, -1.0),
            FirstOrderOp::zero_op(2),
            &params,
        )
        .unwrap();
        assert!(out.cert.residual_sup <= 1e-8);
        assert_eq!(out.cert.verdict, Verdict::WucpViolation);
    }

    #[test]
    fn cex_1d_quadratic() {
        // c = t^2: X21 coefficient -2, residual 0 everywhere
        let c = Expr::var(0).powi(2);
        let out = cex_1d(&c, 0.25, 0.6, 257, 1e-12).unwrap();
        assert_eq!(out.cert.residual_sup, 0.0);
        let coef = &out.x.at(1, 0).dcoef[0];
        assert_eq!(coef.eval(&[0.4]), -2.0);
    }

    #[test]
    fn cex_1d_bump_wucp() {
        let c = Expr::one() - Expr::bump(&[(0, 0.0)], 0.25, 0.5);
        let out = cex_1d(&c, 0.25, 0.7, 257, 1e-12).unwrap();
        assert!(out.cert.residual_sup <= 1e-10);
        assert_eq!(out.cert.verdict, Verdict::WucpViolation);
    }

    #[test]
    fn nullspace_origin_values() {
        for (pattern, expect) in [
            (DiagPattern::Dim4PureDiagonal, [1.0, 1.0, 1.0, 1.0]),
            (DiagPattern::Dim3CrossTerm, [1.0, 1.0, 1.0, 0.5]),
            (DiagPattern::Dim2FirstOrder, [1.0, 1.0, -2.0, 0.0]),
        ] {
            let (g1, g2, g3) = pattern.seed();
            let origin = vec![0.0; pattern.dimension()];
            let v = nullspace_coeffs(&g1, &g2, &g3, &origin, &pattern.terms()).unwrap();
            for k in 0..4 {
                assert!(
                    (v[k] - expect[k]).abs() < 1e-12,
                    "{pattern:?} component {k}: {}",
                    v[k]
                );
            }
        }
    }

    #[test]
    fn nullspace_cross_product_matches_svd() {
        let (g1, g2, g3) = DiagPattern::Dim4PureDiagonal.seed();
        let terms = DiagPattern::Dim4PureDiagonal.terms();
        for pt in [
            [0.02, -0.05, 0.04, 0.01],
            [0.1, 0.05, -0.08, -0.02],
            [-0.06, 0.03, 0.07, 0.09],
        ] {
            let rows: Vec<Vec<Expr>> = [&g1, &g2, &g3]
                .iter()
                .map(|f| terms.iter().map(|t| t.apply(f)).collect())
                .collect();
            let m = DMatrix::from_fn(3, 4, |i, j| rows[i][j].eval(&pt));
            let a = nullspace_of_matrix(&m, &pt).unwrap();
            let b = nullspace_svd(&m, &pt).unwrap();
            for k in 0..4 {
                assert!((a[k] - b[k]).abs() < 1e-9, "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn nullspace_residual_small() {
        let (g1, g2, g3) = DiagPattern::Dim3CrossTerm.seed();
        let terms = DiagPattern::Dim3CrossTerm.terms();
        let pt = [0.07, -0.04, 0.06];
        let v = nullspace_coeffs(&g1, &g2, &g3, &pt, &terms).unwrap();
        let rows: Vec<Vec<Expr>> = [&g1, &g2, &g3]
            .iter()
            .map(|f| terms.iter().map(|t| t.apply(f)).collect())
            .collect();
        let m = DMatrix::from_fn(3, 4, |i, j| rows[i][j].eval(&pt));
        let mnorm = m.norm();
        let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for i in 0..3 {
            let r: f64 = (0..4).map(|j| m[(i, j)] * v[j]).sum();
            assert!(r.abs() <= 1e-10 * mnorm * vnorm);
        }
    }

    #[test]
    fn nullspace_rank_deficient_detected() {
        // f3 = f1 makes two rows equal: rank 2
        let (g1, g2, _) = DiagPattern::Dim4PureDiagonal.seed();
        let err = nullspace_coeffs(
            &g1,
            &g2,
            &g1,
            &[0.0; 4],
            &DiagPattern::Dim4PureDiagonal.terms(),
        )
        .unwrap_err();
        assert!(matches!(err, CexError::RankDeficient { .. }));
    }

    #[test]
    fn nullspace_scaling_invariance() {
        let (g1, g2, g3) = DiagPattern::Dim4PureDiagonal.seed();
        let s = Expr::c(-3.7);
        let pt = [0.05, -0.03, 0.02, 0.01];
        let terms = DiagPattern::Dim4PureDiagonal.terms();
        let v1 = nullspace_coeffs(&g1, &g2, &g3, &pt, &terms).unwrap();
        let v2 = nullspace_coeffs(&(&s * &g1), &(&s * &g2), &(&s * &g3), &pt, &terms).unwrap();
        for k in 0..4 {
            assert!((v1[k] - v2[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn diag_cex_eta_zero_not_counterexample() {
        let spec = DiagonalCexSpec {
            eta: 0.0,
            epsilon: 0.125,
            resolution: 9,
            ..DiagonalCexSpec::new(DiagPattern::Dim4PureDiagonal)
        };
        let out = diag_cex(&spec).unwrap();
        assert!(out.cert.residual_sup <= 1e-12);
        assert_eq!(out.cert.verdict, Verdict::NotACounterexample);
        assert!(out.cert.annulus_det_sup <= 1e-15);
    }

    #[test]
    fn diag_cex_4d_backtracks_to_floor() {
        let spec = DiagonalCexSpec {
            epsilon: 0.125,
            resolution: 11,
            ..DiagonalCexSpec::new(DiagPattern::Dim4PureDiagonal)
        };
        let out = diag_cex(&spec).unwrap();
        assert!(out.cert.coeff_positivity_min >= 0.5);
        assert!(out.eta_used < 0.05);
        assert!(out.cert.residual_sup <= 1e-8);
        assert_eq!(out.cert.verdict, Verdict::WucpViolation);
    }

    #[test]
    fn diag_cex_2d_quarter_epsilon_is_singular() {
        // at eps = 0.25 the kernel first component vanishes on the box edge
        // x = -1/2, so normalization fails no matter how small eta is
        let spec = DiagonalCexSpec {
            epsilon: 0.25,
            resolution: 17,
            positivity_floor: None,
            max_backtrack: 2,
            ..DiagonalCexSpec::new(DiagPattern::Dim2FirstOrder)
        };
        let err = diag_cex(&spec).unwrap_err();
        assert!(matches!(err, CexError::RankDeficient { .. }), "{err}");
    }

    #[test]
    fn diag_cex_2d_healthy() {
        let spec = DiagonalCexSpec {
            epsilon: 0.0625,
            resolution: 33,
            ..DiagonalCexSpec::new(DiagPattern::Dim2FirstOrder)
        };
        let out = diag_cex(&spec).unwrap();
        assert!(out.cert.coeff_positivity_min >= 0.5);
        assert!(out.cert.residual_sup <= 1e-8);
        assert!(out.cert.inner_det_sup <= 1e-12);
        assert_eq!(out.cert.verdict, Verdict::WucpViolation);
    }

    #[test]
    fn diag_cex_3d_builds() {
        let spec = DiagonalCexSpec {
            epsilon: 0.0625,
            resolution: 17,
            ..DiagonalCexSpec::new(DiagPattern::Dim3CrossTerm)
        };
        let out = diag_cex(&spec).unwrap();
        assert!(out.cert.coeff_positivity_min >= 0.5);
        assert!(out.cert.residual_sup <= 1e-8);
        assert_eq!(out.cert.verdict, Verdict::WucpViolation);
    }

    #[test]
    fn symbolic_2d_coefficients_match_pointwise() {
        let spec = DiagonalCexSpec {
            epsilon: 0.0625,
            eta: 1e-3,
            resolution: 9,
            positivity_floor: None,
            ..DiagonalCexSpec::new(DiagPattern::Dim2FirstOrder)
        };
        let out = diag_cex(&spec).unwrap();
        let [_, btil, ctil, dtil] = diag2d_symbolic_coefficients(&out.f3);
        for flat in 0..out.coefficients[0].len() {
            let p = out.coefficients[0].point(flat);
            assert!((out.coefficients[1].values()[flat] - btil.eval(&p)).abs() < 1e-9);
            assert!((out.coefficients[2].values()[flat] - ctil.eval(&p)).abs() < 1e-9);
            assert!((out.coefficients[3].values()[flat] - dtil.eval(&p)).abs() < 1e-9);
        }
        // closed forms for this seed: ctil = -2/(2x+1), dtil = 0
        for pt in [[0.05, -0.02], [-0.1, 0.08]] {
            assert!((ctil.eval(&pt) + 2.0 / (2.0 * pt[0] + 1.0)).abs() < 1e-12);
            assert!(dtil.eval(&pt).abs() < 1e-14);
        }
    }
}
