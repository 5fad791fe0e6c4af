//! Small dense-band and iterative linear solvers used by the grid and the
//! implicit time steppers.
//!
//! Every system assembled in this crate is either symmetric positive definite
//! (Poisson) or column diagonally dominant (Newton Jacobians rescaled by
//! `e^{-mu}`), so Gaussian elimination without pivoting is stable.

use crate::error::{Error, Result};

/// Square matrix with `bw` sub- and super-diagonals, stored row-wise.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            data: vec![0.0; n * (2 * bw + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.bw >= i && j <= i + self.bw);
        i * (2 * self.bw + 1) + (j + self.bw - i)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j + self.bw < i || j > i + self.bw {
            0.0
        } else {
            self.data[self.slot(i, j)]
        }
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j);
        self.data[s] = v;
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j);
        self.data[s] += v;
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for (i, yi) in y.iter_mut().enumerate() {
            let lo = i.saturating_sub(self.bw);
            let hi = (i + self.bw).min(self.n - 1);
            *yi = (lo..=hi).map(|j| self.get(i, j) * x[j]).sum();
        }
        y
    }

    /// In-place LU factorization without pivoting; the matrix is consumed.
    pub fn factorize(mut self) -> Result<BandLu> {
        let (n, bw) = (self.n, self.bw);
        for k in 0..n {
            let pivot = self.get(k, k);
            if !(pivot.abs() > 0.0) || !pivot.is_finite() {
                return Err(Error::Contract(format!(
                    "zero or non-finite pivot {pivot} at row {k}"
                )));
            }
            let last = (k + bw).min(n - 1);
            for i in k + 1..=last {
                let l = self.get(i, k) / pivot;
                if l == 0.0 {
                    continue;
                }
                self.set(i, k, l);
                for j in k + 1..=last {
                    let ukj = self.get(k, j);
                    if ukj != 0.0 {
                        self.add(i, j, -l * ukj);
                    }
                }
            }
        }
        Ok(BandLu { m: self })
    }
}

/// Packed LU factors of a [`BandMatrix`].
#[derive(Debug, Clone)]
pub struct BandLu {
    m: BandMatrix,
}

impl BandLu {
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let (n, bw) = (self.m.n, self.m.bw);
        let mut x = rhs.to_vec();
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let mut s = x[i];
            for j in lo..i {
                s -= self.m.get(i, j) * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let hi = (i + bw).min(n - 1);
            let mut s = x[i];
            for j in i + 1..=hi {
                s -= self.m.get(i, j) * x[j];
            }
            x[i] = s / self.m.get(i, i);
        }
        x
    }
}

/// Thomas algorithm for a tridiagonal system. `lower[0]` and `upper[n-1]` are ignored.
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    if lower.len() != n || upper.len() != n || rhs.len() != n {
        return Err(Error::Shape {
            expected: n,
            got: rhs.len().min(lower.len()).min(upper.len()),
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut denom = diag[0];
    if denom == 0.0 {
        return Err(Error::Contract("zero pivot in tridiagonal solve".into()));
    }
    c[0] = upper[0] / denom;
    d[0] = rhs[0] / denom;
    for i in 1..n {
        denom = diag[i] - lower[i] * c[i - 1];
        if denom == 0.0 {
            return Err(Error::Contract("zero pivot in tridiagonal solve".into()));
        }
        c[i] = upper[i] / denom;
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Ok(d)
}

/// Conjugate gradients for an SPD operator given as a closure.
///
/// Stops when `||r|| <= rel_tol * ||b||`.
pub fn conjugate_gradient<F>(apply: F, b: &[f64], rel_tol: f64, max_iter: usize) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let bnorm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(x);
    }
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dot(&r, &r);
    for it in 0..max_iter {
        if rr.sqrt() <= rel_tol * bnorm {
            return Ok(x);
        }
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(Error::LinearSolver {
                residual: rr.sqrt() / bnorm,
                iterations: it,
            });
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    if rr.sqrt() <= rel_tol * bnorm {
        Ok(x)
    } else {
        Err(Error::LinearSolver {
            residual: rr.sqrt() / bnorm,
            iterations: max_iter,
        })
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
