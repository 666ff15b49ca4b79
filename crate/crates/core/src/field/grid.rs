//! Sampled fields on rectangular lattices in dimension n <= 4.

use rayon::prelude::*;
use thiserror::Error;

use super::expr::{Expr, MAX_VARS};

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("expression evaluates non-finitely at {point:?}")]
    Domain { point: Vec<f64> },
    #[error("dimension mismatch: expression uses variable x{used} but box has dimension {dim}")]
    DimensionMismatch { used: usize, dim: usize },
}

/// Axis-aligned box, the common domain of symbolic and sampled fields.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainBox {
    mins: Vec<f64>,
    maxs: Vec<f64>,
}

impl DomainBox {
    pub fn new(mins: &[f64], maxs: &[f64]) -> Self {
        assert_eq!(mins.len(), maxs.len());
        assert!(!mins.is_empty() && mins.len() <= MAX_VARS);
        for (lo, hi) in mins.iter().zip(maxs) {
            assert!(lo < hi, "degenerate box axis [{lo}, {hi}]");
        }
        DomainBox {
            mins: mins.to_vec(),
            maxs: maxs.to_vec(),
        }
    }

    /// Cube [-h, h]^n.
    pub fn centered(n: usize, h: f64) -> Self {
        DomainBox::new(&vec![-h; n], &vec![h; n])
    }

    pub fn dim(&self) -> usize {
        self.mins.len()
    }

    pub fn min(&self, axis: usize) -> f64 {
        self.mins[axis]
    }

    pub fn max(&self, axis: usize) -> f64 {
        self.maxs[axis]
    }
}

/// Scalar samples on a tensor grid; node-centered, endpoints included.
#[derive(Clone, Debug)]
pub struct GridField {
    bx: DomainBox,
    res: Vec<usize>,
    data: Vec<f64>,
}

impl GridField {
    pub fn from_fn<F: Fn(&[f64]) -> f64 + Sync>(bx: &DomainBox, res: &[usize], f: F) -> Self {
        assert_eq!(bx.dim(), res.len());
        assert!(res.iter().all(|&r| r >= 2));
        let total: usize = res.iter().product();
        let n = bx.dim();
        let data: Vec<f64> = (0..total)
            .into_par_iter()
            .map(|flat| {
                let mut pt = [0.0; MAX_VARS];
                decode(flat, res, bx, &mut pt);
                f(&pt[..n])
            })
            .collect();
        GridField {
            bx: bx.clone(),
            res: res.to_vec(),
            data,
        }
    }

    pub fn dim(&self) -> usize {
        self.bx.dim()
    }

    pub fn domain(&self) -> &DomainBox {
        &self.bx
    }

    pub fn resolution(&self) -> &[usize] {
        &self.res
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.bx.max(axis) - self.bx.min(axis)) / (self.res[axis] - 1) as f64
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Grid coordinates of a flat index.
    pub fn point(&self, flat: usize) -> Vec<f64> {
        let mut pt = [0.0; MAX_VARS];
        decode(flat, &self.res, &self.bx, &mut pt);
        pt[..self.dim()].to_vec()
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        let mut flat = 0;
        for (axis, &i) in idx.iter().enumerate() {
            flat = flat * self.res[axis] + i;
        }
        flat
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.flat_index(idx)]
    }

    pub fn sup_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// L2 norm with uniform cell weights (product of spacings).
    pub fn l2_norm(&self) -> f64 {
        let cell: f64 = (0..self.dim()).map(|a| self.spacing(a)).product();
        (self.data.iter().map(|v| v * v).sum::<f64>() * cell).sqrt()
    }

    /// Sup norm over grid points whose coordinates satisfy the predicate.
    pub fn sup_norm_where<F: Fn(&[f64]) -> bool>(&self, pred: F) -> f64 {
        let n = self.dim();
        let mut m = 0.0f64;
        let mut pt = [0.0; MAX_VARS];
        for (flat, v) in self.data.iter().enumerate() {
            decode(flat, &self.res, &self.bx, &mut pt);
            if pred(&pt[..n]) {
                m = m.max(v.abs());
            }
        }
        m
    }

    /// Minimum value over grid points whose coordinates satisfy the predicate.
    pub fn min_where<F: Fn(&[f64]) -> bool>(&self, pred: F) -> f64 {
        let n = self.dim();
        let mut m = f64::INFINITY;
        let mut pt = [0.0; MAX_VARS];
        for (flat, v) in self.data.iter().enumerate() {
            decode(flat, &self.res, &self.bx, &mut pt);
            if pred(&pt[..n]) {
                m = m.min(*v);
            }
        }
        m
    }

    /// Centered finite-difference partial derivative (one-sided at edges).
    pub fn fd_partial(&self, axis: usize) -> GridField {
        let n = self.dim();
        let h = self.spacing(axis);
        let stride: usize = self.res[axis + 1..].iter().product();
        let ext = self.res[axis];
        let data: Vec<f64> = (0..self.data.len())
            .into_par_iter()
            .map(|flat| {
                let i = (flat / stride) % ext;
                if i == 0 {
                    (-3.0 * self.data[flat] + 4.0 * self.data[flat + stride]
                        - self.data[flat + 2 * stride])
                        / (2.0 * h)
                } else if i == ext - 1 {
                    (3.0 * self.data[flat] - 4.0 * self.data[flat - stride]
                        + self.data[flat - 2 * stride])
                        / (2.0 * h)
                } else {
                    (self.data[flat + stride] - self.data[flat - stride]) / (2.0 * h)
                }
            })
            .collect();
        let _ = n;
        GridField {
            bx: self.bx.clone(),
            res: self.res.clone(),
            data,
        }
    }

    /// Pointwise combination of two fields on the same grid.
    pub fn zip_with<F: Fn(f64, f64) -> f64 + Sync>(&self, other: &GridField, f: F) -> GridField {
        assert_eq!(self.res, other.res);
        let data = self
            .data
            .par_iter()
            .zip(other.data.par_iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        GridField {
            bx: self.bx.clone(),
            res: self.res.clone(),
            data,
        }
    }

    pub fn map<F: Fn(f64) -> f64 + Sync>(&self, f: F) -> GridField {
        GridField {
            bx: self.bx.clone(),
            res: self.res.clone(),
            data: self.data.par_iter().map(|&v| f(v)).collect(),
        }
    }
}

fn decode(flat: usize, res: &[usize], bx: &DomainBox, pt: &mut [f64; MAX_VARS]) {
    let mut rem = flat;
    for axis in (0..res.len()).rev() {
        let i = rem % res[axis];
        rem /= res[axis];
        let h = (bx.max(axis) - bx.min(axis)) / (res[axis] - 1) as f64;
        pt[axis] = bx.min(axis) + i as f64 * h;
    }
}

/// Pointwise evaluation of a symbolic expression; rejects non-finite samples.
pub fn sample(expr: &Expr, bx: &DomainBox, res: &[usize]) -> Result<GridField, FieldError> {
    if let Some(used) = expr.max_var() {
        if used >= bx.dim() {
            return Err(FieldError::DimensionMismatch {
                used,
                dim: bx.dim(),
            });
        }
    }
    let gf = GridField::from_fn(bx, res, |pt| expr.eval(pt));
    if let Some(flat) = gf.data.iter().position(|v| !v.is_finite()) {
        return Err(FieldError::Domain {
            point: gf.point(flat),
        });
    }
    Ok(gf)
}

/// m x m field of homogeneous entries (symbolic or sampled).
#[derive(Clone, Debug)]
pub struct MatrixField<T> {
    m: usize,
    entries: Vec<T>,
}

impl<T: Clone> MatrixField<T> {
    pub fn new(m: usize, entries: Vec<T>) -> Self {
        assert_eq!(entries.len(), m * m);
        MatrixField { m, entries }
    }

    pub fn size(&self) -> usize {
        self.m
    }

    pub fn at(&self, i: usize, j: usize) -> &T {
        &self.entries[i * self.m + j]
    }

    pub fn entries(&self) -> &[T] {
        &self.entries
    }

    pub fn map<U: Clone, F: Fn(&T) -> U>(&self, f: F) -> MatrixField<U> {
        MatrixField {
            m: self.m,
            entries: self.entries.iter().map(f).collect(),
        }
    }
}

impl MatrixField<Expr> {
    /// Determinant as a symbolic expression (permanent expansion, m <= 4).
    pub fn det(&self) -> Expr {
        let m = self.m;
        match m {
            1 => self.at(0, 0).clone(),
            2 => self.at(0, 0) * self.at(1, 1) - self.at(0, 1) * self.at(1, 0),
            _ => {
                // Laplace expansion along the first row
                let mut terms = Vec::new();
                for j in 0..m {
                    let minor_entries: Vec<Expr> = (1..m)
                        .flat_map(|r| {
                            (0..m)
                                .filter(|&c| c != j)
                                .map(move |c| self.at(r, c).clone())
                        })
                        .collect();
                    let minor = MatrixField::new(m - 1, minor_entries);
                    let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                    terms.push(Expr::prod(vec![
                        Expr::c(sign),
                        self.at(0, j).clone(),
                        minor.det(),
                    ]));
                }
                Expr::sum(terms)
            }
        }
    }
}

/// Observed convergence study of symbolic vs finite-difference derivatives.
#[derive(Clone, Debug)]
pub struct ConvergenceRecord {
    pub spacings: Vec<f64>,
    pub errors: Vec<f64>,
    /// Least-squares slope of log error vs log h; `None` when the errors sit
    /// at round-off for every resolution.
    pub observed_order: Option<f64>,
}

/// Compare the exact partial derivative with centered finite differences of
/// the sampled field across dyadically refined resolutions.
pub fn fd_crosscheck(
    expr: &Expr,
    axis: usize,
    bx: &DomainBox,
    resolutions: &[usize],
) -> Result<ConvergenceRecord, FieldError> {
    assert!(resolutions.len() >= 3, "need at least three resolutions");
    let exact = expr.partial(axis);
    let mut spacings = Vec::new();
    let mut errors = Vec::new();
    for &r in resolutions {
        let res = vec![r; bx.dim()];
        let coarse = sample(expr, bx, &res)?;
        let sym = sample(&exact, bx, &res)?;
        let fd = coarse.fd_partial(axis);
        // interior points only: boundary stencils are one-sided
        let n = bx.dim();
        let h: Vec<f64> = (0..n).map(|a| coarse.spacing(a)).collect();
        let err = fd.zip_with(&sym, |a, b| a - b).sup_norm_where(|pt| {
            (0..n).all(|a| {
                pt[a] > bx.min(a) + 1.5 * h[a] && pt[a] < bx.max(a) - 1.5 * h[a]
            })
        });
        spacings.push(coarse.spacing(axis));
        errors.push(err);
    }
    let observed_order = if errors.iter().all(|&e| e < 1e-13) {
        None
    } else {
        Some(log_log_slope(&spacings, &errors))
    };
    Ok(ConvergenceRecord {
        spacings,
        errors,
        observed_order,
    })
}

/// Least-squares slope of log(y) against log(x); pairs with y at round-off
/// are excluded.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(_, &y)| y > 1e-300)
        .map(|(&x, &y)| (x.ln(), y.ln()))
        .collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return 0.0;
    }
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_ones() {
        let bx = DomainBox::new(&[0.0, 0.0], &[1.0, 1.0]);
        let g = sample(&Expr::one(), &bx, &[4, 4]).unwrap();
        assert_eq!(g.len(), 16);
        assert!(g.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sample_corner_value() {
        // x*y on [0,1]^2 with 3x3: corner (1,1) holds 1
        let e = Expr::var(0) * Expr::var(1);
        let bx = DomainBox::new(&[0.0, 0.0], &[1.0, 1.0]);
        let g = sample(&e, &bx, &[3, 3]).unwrap();
        assert_eq!(g.get(&[2, 2]), 1.0);
        assert_eq!(g.get(&[0, 2]), 0.0);
    }

    #[test]
    fn sample_bump_support() {
        let b = Expr::bump(&[(0, 0.0), (1, 0.0)], 0.5, 1.0);
        let bx = DomainBox::centered(2, 2.0);
        let g = sample(&b, &bx, &[41, 41]).unwrap();
        // 0 outside radius 1, 1 inside radius 0.5
        let out = g.sup_norm_where(|p| p[0] * p[0] + p[1] * p[1] > 1.0001);
        assert_eq!(out, 0.0);
        let inner_min = g.min_where(|p| p[0] * p[0] + p[1] * p[1] < 0.25 * 0.9999);
        assert!((inner_min - 1.0).abs() < 1e-14);
    }

    #[test]
    fn sample_rejects_nonfinite() {
        // 1/x has a pole at 0, which is a grid node of the centered box
        let e = Expr::var(0).recip();
        let bx = DomainBox::centered(1, 1.0);
        let r = sample(&e, &bx, &[3]);
        assert!(matches!(r, Err(FieldError::Domain { .. })));
    }

    #[test]
    fn dimension_mismatch() {
        let e = Expr::var(2);
        let bx = DomainBox::centered(2, 1.0);
        assert!(matches!(
            sample(&e, &bx, &[3, 3]),
            Err(FieldError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn crosscheck_smooth_order_two() {
        let e = Expr::var(0).exp();
        let bx = DomainBox::new(&[0.0], &[1.0]);
        let rec = fd_crosscheck(&e, 0, &bx, &[17, 33, 65, 129]).unwrap();
        let order = rec.observed_order.expect("nonzero errors");
        assert!((order - 2.0).abs() < 0.2, "order {order}");
    }

    #[test]
    fn crosscheck_constant_zero_error() {
        let e = Expr::c(7.0);
        let bx = DomainBox::new(&[0.0], &[1.0]);
        let rec = fd_crosscheck(&e, 0, &bx, &[9, 17, 33]).unwrap();
        assert!(rec.errors.iter().all(|&e| e == 0.0));
        assert!(rec.observed_order.is_none());
    }

    #[test]
    fn crosscheck_2d_polynomial() {
        let e = Expr::var(0).powi(3) * Expr::var(1) + Expr::var(1).powi(2);
        let bx = DomainBox::centered(2, 1.0);
        let rec = fd_crosscheck(&e, 0, &bx, &[17, 33, 65]).unwrap();
        let order = rec.observed_order.expect("nonzero errors");
        assert!(order > 1.8, "order {order}");
    }

    #[test]
    fn det_2x2_symbolic() {
        let f = MatrixField::new(
            2,
            vec![Expr::one(), Expr::var(0), Expr::zero(), Expr::var(1)],
        );
        let d = f.det();
        assert!((d.eval(&[3.0, 4.0]) - 4.0).abs() < 1e-15);
    }
}
