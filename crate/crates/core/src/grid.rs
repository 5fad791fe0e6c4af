//! Uniform node grids on intervals and rectangles, the zero-Dirichlet
//! Laplacian, Poisson solves, the Torricelli weight and the discrete norms.
//!
//! Nodes are numbered row-major with the x axis fastest. Quadrature uses
//! trapezoid weights, so a constant integrates exactly to the domain measure.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::linalg::{conjugate_gradient, solve_tridiagonal, BandMatrix};

/// Interior unknown counts up to this size are solved by banded LU in 2D.
const DIRECT_SOLVE_LIMIT: usize = 4096;
const POISSON_REL_TOL: f64 = 1e-10;

/// Uniform grid on `(a, b)` or `(a_x, b_x) x (a_y, b_y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid {
    dim: usize,
    lo: [f64; 2],
    hi: [f64; 2],
    nodes: [usize; 2],
}

impl SpatialGrid {
    pub fn interval(a: f64, b: f64, nodes: usize) -> Result<Self> {
        Self::new(1, [(a, b), (0.0, 1.0)], [nodes, 1])
    }

    pub fn rectangle(x: (f64, f64), y: (f64, f64), nx: usize, ny: usize) -> Result<Self> {
        Self::new(2, [x, y], [nx, ny])
    }

    /// Unit interval with spacing `1/cells`.
    pub fn unit_interval(cells: usize) -> Result<Self> {
        Self::interval(0.0, 1.0, cells + 1)
    }

    pub fn new(dim: usize, extents: [(f64, f64); 2], nodes: [usize; 2]) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return param(format!("grid dimension must be 1 or 2, got {dim}"));
        }
        for axis in 0..dim {
            let (a, b) = extents[axis];
            if !(a.is_finite() && b.is_finite() && b > a) {
                return param(format!("axis {axis}: need finite a < b, got ({a}, {b})"));
            }
            if nodes[axis] < 3 {
                return param(format!("axis {axis}: need at least 3 nodes, got {}", nodes[axis]));
            }
        }
        let mut nodes = nodes;
        let mut lo = [extents[0].0, extents[1].0];
        let mut hi = [extents[0].1, extents[1].1];
        if dim == 1 {
            nodes[1] = 1;
            lo[1] = 0.0;
            hi[1] = 0.0;
        }
        Ok(Self { dim, lo, hi, nodes })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nodes_per_axis(&self) -> [usize; 2] {
        self.nodes
    }

    pub fn extent(&self, axis: usize) -> (f64, f64) {
        (self.lo[axis], self.hi[axis])
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        if axis >= self.dim {
            return 1.0;
        }
        (self.hi[axis] - self.lo[axis]) / (self.nodes[axis] - 1) as f64
    }

    /// Total node count.
    pub fn len(&self) -> usize {
        self.nodes[0] * self.nodes[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim).map(|a| self.spacing(a)).product()
    }

    /// Lebesgue measure of the domain.
    pub fn measure(&self) -> f64 {
        (0..self.dim).map(|a| self.hi[a] - self.lo[a]).product()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i + self.nodes[0] * j
    }

    #[inline]
    pub fn ij(&self, node: usize) -> (usize, usize) {
        (node % self.nodes[0], node / self.nodes[0])
    }

    pub fn coords(&self, node: usize) -> [f64; 2] {
        let (i, j) = self.ij(node);
        let x = self.lo[0] + i as f64 * self.spacing(0);
        let y = if self.dim == 2 {
            self.lo[1] + j as f64 * self.spacing(1)
        } else {
            0.0
        };
        [x, y]
    }

    #[inline]
    pub fn is_boundary(&self, node: usize) -> bool {
        let (i, j) = self.ij(node);
        let bx = i == 0 || i + 1 == self.nodes[0];
        if self.dim == 1 {
            bx
        } else {
            bx || j == 0 || j + 1 == self.nodes[1]
        }
    }

    /// Interior nodes per axis.
    pub fn interior_shape(&self) -> [usize; 2] {
        if self.dim == 1 {
            [self.nodes[0] - 2, 1]
        } else {
            [self.nodes[0] - 2, self.nodes[1] - 2]
        }
    }

    pub fn interior_count(&self) -> usize {
        let s = self.interior_shape();
        s[0] * s[1]
    }

    /// Node number of the `k`-th interior unknown.
    #[inline]
    pub fn interior_node(&self, k: usize) -> usize {
        let nxi = self.interior_shape()[0];
        let (i, j) = (k % nxi + 1, k / nxi);
        if self.dim == 1 {
            self.index(i, 0)
        } else {
            self.index(i, j + 1)
        }
    }

    #[inline]
    pub fn interior_index(&self, node: usize) -> Option<usize> {
        if self.is_boundary(node) {
            return None;
        }
        let (i, j) = self.ij(node);
        let nxi = self.interior_shape()[0];
        Some(if self.dim == 1 { i - 1 } else { (i - 1) + nxi * (j - 1) })
    }

    pub fn interior_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.interior_count()).map(move |k| self.interior_node(k))
    }

    /// Trapezoid quadrature weight of a node.
    pub fn quad_weight(&self, node: usize) -> f64 {
        let (i, j) = self.ij(node);
        let mut w = self.spacing(0);
        if i == 0 || i + 1 == self.nodes[0] {
            w *= 0.5;
        }
        if self.dim == 2 {
            w *= self.spacing(1);
            if j == 0 || j + 1 == self.nodes[1] {
                w *= 0.5;
            }
        }
        w
    }

    /// Stencil neighbours of an interior node with their `1/h^2` weights.
    fn stencil(&self, node: usize) -> ([usize; 4], [f64; 4], usize, f64) {
        let hx2 = self.spacing(0).powi(2);
        let nx = self.nodes[0];
        if self.dim == 1 {
            ([node - 1, node + 1, 0, 0], [1.0 / hx2, 1.0 / hx2, 0.0, 0.0], 2, -2.0 / hx2)
        } else {
            let hy2 = self.spacing(1).powi(2);
            (
                [node - 1, node + 1, node - nx, node + nx],
                [1.0 / hx2, 1.0 / hx2, 1.0 / hy2, 1.0 / hy2],
                4,
                -2.0 / hx2 - 2.0 / hy2,
            )
        }
    }

    /// Discrete Laplacian of nodal values at one interior node, using the
    /// recorded boundary values of `u`.
    #[inline]
    pub fn laplacian_at(&self, u: &[f64], node: usize) -> f64 {
        let (nb, w, cnt, diag) = self.stencil(node);
        let mut s = diag * u[node];
        for k in 0..cnt {
            s += w[k] * u[nb[k]];
        }
        s
    }

    /// Half-bandwidth of interior operators in the interior numbering.
    pub fn interior_bandwidth(&self) -> usize {
        if self.dim == 1 {
            1
        } else {
            self.interior_shape()[0]
        }
    }

    /// Calls `f(row, col, coeff)` for every nonzero of the interior Laplacian
    /// (zero Dirichlet data).
    pub fn for_each_interior_laplacian_entry(&self, mut f: impl FnMut(usize, usize, f64)) {
        for k in 0..self.interior_count() {
            let node = self.interior_node(k);
            let (nb, w, cnt, diag) = self.stencil(node);
            f(k, k, diag);
            for m in 0..cnt {
                if let Some(col) = self.interior_index(nb[m]) {
                    f(k, col, w[m]);
                }
            }
        }
    }
}

/// Real nodal values on a [`SpatialGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: SpatialGrid,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: SpatialGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return param(format!("non-finite grid value {} at node {i}", values[i]));
        }
        Ok(Self { grid, values })
    }

    /// Skips the finiteness scan; callers guarantee the invariant.
    pub(crate) fn from_vec_unchecked(grid: SpatialGrid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn zeros(grid: SpatialGrid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: SpatialGrid, c: f64) -> Self {
        Self {
            grid,
            values: vec![c; grid.len()],
        }
    }

    pub fn from_fn(grid: SpatialGrid, f: impl Fn([f64; 2]) -> f64) -> Result<Self> {
        let values = (0..grid.len()).map(|n| f(grid.coords(n))).collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.grid, other.grid);
        Self {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| c * v)
    }

    /// Same values with boundary nodes set to zero.
    pub fn with_zero_boundary(&self) -> Self {
        let mut out = self.clone();
        for n in 0..self.grid.len() {
            if self.grid.is_boundary(n) {
                out.values[n] = 0.0;
            }
        }
        out
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Trapezoid quadrature of the nodal values.
    pub fn integral(&self) -> f64 {
        self.values
            .iter()
            .enumerate()
            .map(|(n, v)| v * self.grid.quad_weight(n))
            .sum()
    }

    pub fn lp_norm(&self, p: f64) -> f64 {
        self.weighted_lp_norm_with(p, |_| 1.0)
    }

    pub fn weighted_lp_norm(&self, p: f64, weight: &GridFunction) -> f64 {
        self.weighted_lp_norm_with(p, |n| weight.values[n])
    }

    fn weighted_lp_norm_with(&self, p: f64, weight: impl Fn(usize) -> f64) -> f64 {
        if p.is_infinite() {
            return self.sup_abs();
        }
        let s: f64 = self
            .values
            .iter()
            .enumerate()
            .map(|(n, v)| v.abs().powf(p) * weight(n) * self.grid.quad_weight(n))
            .sum();
        s.powf(1.0 / p)
    }

    pub fn is_spatially_constant(&self, rel_tol: f64) -> bool {
        let (lo, hi) = (self.min(), self.max());
        (hi - lo) <= rel_tol * hi.abs().max(lo.abs()).max(1e-300)
    }

    /// Serializes as CSV: a metadata comment line, a header, one row per node.
    pub fn to_csv(&self) -> String {
        let g = &self.grid;
        let mut s = String::new();
        if g.dim == 1 {
            let _ = writeln!(s, "# dim=1 lo={} hi={} nodes={}", g.lo[0], g.hi[0], g.nodes[0]);
            s.push_str("i,value\n");
            for (n, v) in self.values.iter().enumerate() {
                let _ = writeln!(s, "{n},{v}");
            }
        } else {
            let _ = writeln!(
                s,
                "# dim=2 lo={},{} hi={},{} nodes={},{}",
                g.lo[0], g.lo[1], g.hi[0], g.hi[1], g.nodes[0], g.nodes[1]
            );
            s.push_str("i,j,value\n");
            for (n, v) in self.values.iter().enumerate() {
                let (i, j) = g.ij(n);
                let _ = writeln!(s, "{i},{j},{v}");
            }
        }
        s
    }

    /// Parses [`GridFunction::to_csv`] output, checking it against `grid`.
    /// The metadata line is optional; rows may appear in any order.
    pub fn from_csv(grid: SpatialGrid, text: &str) -> Result<Self> {
        let mut values = vec![f64::NAN; grid.len()];
        let mut seen = 0usize;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.iter().any(|c| c.parse::<f64>().is_err()) {
                // header row
                continue;
            }
            let bad = |m: &str| Error::Parse(format!("line {}: {m}", lineno + 1));
            let (node, v) = match (grid.dim, cols.len()) {
                (1, 2) => {
                    let i: usize = cols[0].parse().map_err(|_| bad("bad index"))?;
                    (i, cols[1])
                }
                (2, 3) => {
                    let i: usize = cols[0].parse().map_err(|_| bad("bad index"))?;
                    let j: usize = cols[1].parse().map_err(|_| bad("bad index"))?;
                    if i >= grid.nodes[0] || j >= grid.nodes[1] {
                        return Err(bad("index outside grid"));
                    }
                    (grid.index(i, j), cols[2])
                }
                _ => return Err(bad("wrong column count for grid dimension")),
            };
            if node >= grid.len() {
                return Err(bad("index outside grid"));
            }
            if values[node].is_nan() {
                seen += 1;
            }
            values[node] = v.parse().map_err(|_| bad("bad value"))?;
        }
        if seen != grid.len() {
            return Err(Error::Parse(format!(
                "expected {} nodal values, found {seen}",
                grid.len()
            )));
        }
        Self::new(grid, values)
    }
}

/// Discrete Laplacian; interior rows use the 3-/5-point stencil, boundary rows
/// are the identity.
pub fn laplacian_apply(u: &GridFunction) -> GridFunction {
    let g = u.grid;
    let values = (0..g.len())
        .map(|n| {
            if g.is_boundary(n) {
                u.values[n]
            } else {
                g.laplacian_at(&u.values, n)
            }
        })
        .collect();
    GridFunction::from_vec_unchecked(g, values)
}

/// Solves `Δu = rhs` at interior nodes with `u = boundary` on boundary nodes.
pub fn solve_poisson(rhs: &GridFunction, boundary: &GridFunction) -> Result<GridFunction> {
    let g = rhs.grid;
    if boundary.grid != g {
        return Err(Error::Contract("rhs and boundary live on different grids".into()));
    }
    // -L u_int = -rhs + (boundary couplings)
    let ni = g.interior_count();
    let mut b = vec![0.0; ni];
    let bvals = {
        let mut v = boundary.values.clone();
        for n in 0..g.len() {
            if !g.is_boundary(n) {
                v[n] = 0.0;
            }
        }
        v
    };
    for (k, bk) in b.iter_mut().enumerate() {
        let node = g.interior_node(k);
        *bk = -rhs.values[node] + g.laplacian_at(&bvals, node);
    }
    let u_int = solve_neg_laplacian(&g, &b)?;
    let mut values = bvals;
    for (k, v) in u_int.into_iter().enumerate() {
        values[g.interior_node(k)] = v;
    }
    GridFunction::new(g, values)
}

/// Solves `-L x = b` on interior unknowns (zero Dirichlet data).
pub(crate) fn solve_neg_laplacian(g: &SpatialGrid, b: &[f64]) -> Result<Vec<f64>> {
    let ni = g.interior_count();
    if g.dim == 1 {
        let h2 = g.spacing(0).powi(2);
        let off = vec![-1.0 / h2; ni];
        let diag = vec![2.0 / h2; ni];
        return solve_tridiagonal(&off, &diag, &off, b);
    }
    if ni <= DIRECT_SOLVE_LIMIT {
        let mut m = BandMatrix::zeros(ni, g.interior_bandwidth());
        g.for_each_interior_laplacian_entry(|i, j, c| m.add(i, j, -c));
        return Ok(m.factorize()?.solve(b));
    }
    solve_neg_laplacian_cg(g, b)
}

pub(crate) fn solve_neg_laplacian_cg(g: &SpatialGrid, b: &[f64]) -> Result<Vec<f64>> {
    let scratch = std::cell::RefCell::new(vec![0.0; g.len()]);
    let apply = |x: &[f64], out: &mut [f64]| {
        // boundary entries of the scratch buffer stay zero
        let mut f = scratch.borrow_mut();
        for (k, v) in x.iter().enumerate() {
            f[g.interior_node(k)] = *v;
        }
        for (k, o) in out.iter_mut().enumerate() {
            *o = -g.laplacian_at(&f, g.interior_node(k));
        }
    };
    conjugate_gradient(apply, b, POISSON_REL_TOL, 20 * b.len() + 100)
}

/// Torricelli weight: `Δw = -1` in the domain, `w = 1` on the boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct TorricelliWeight {
    pub w: GridFunction,
    pub c_w: f64,
}

pub fn torricelli_weight(grid: &SpatialGrid) -> Result<TorricelliWeight> {
    let w = solve_poisson(
        &GridFunction::constant(*grid, -1.0),
        &GridFunction::constant(*grid, 1.0),
    )?;
    let c_w = w.max();
    Ok(TorricelliWeight { w, c_w })
}

/// Discrete `H^{-1}` norm: `sqrt(<u, (-Δ)^{-1} u>)` over interior nodes.
pub fn hminus1_norm(u: &GridFunction) -> Result<f64> {
    let g = u.grid;
    let b: Vec<f64> = g.interior_nodes().map(|n| u.values[n]).collect();
    if b.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let v = solve_neg_laplacian(&g, &b)?;
    let cell = g.cell_volume();
    let q: f64 = b.iter().zip(&v).map(|(a, c)| a * c).sum::<f64>() * cell;
    Ok(q.max(0.0).sqrt())
}

/// Sobolev embedding exponent `q` for `H_0^1 ⊂ L^q`: infinite for `d = 1`,
/// the supplied finite surrogate for `d = 2`, `2d/(d-2)` above.
pub fn sobolev_q(d: usize, q_for_d2: f64) -> Result<f64> {
    match d {
        0 => param("dimension must be at least 1"),
        1 => Ok(f64::INFINITY),
        2 => {
            if q_for_d2 > 2.0 && q_for_d2.is_finite() {
                Ok(q_for_d2)
            } else {
                param(format!("q for d = 2 must lie in (2, inf), got {q_for_d2}"))
            }
        }
        d => Ok(2.0 * d as f64 / (d as f64 - 2.0)),
    }
}

pub const DEFAULT_Q_D2: f64 = 6.0;

/// Gradient component along `axis`: central differences inside, second-order
/// one-sided differences on the boundary ring.
pub fn partial_derivative(u: &GridFunction, axis: usize) -> GridFunction {
    let g = u.grid;
    let h = g.spacing(axis);
    let n_axis = g.nodes[axis];
    let step = if axis == 0 { 1 } else { g.nodes[0] };
    let values = (0..g.len())
        .map(|n| {
            let (i, j) = g.ij(n);
            let pos = if axis == 0 { i } else { j };
            let v = &u.values;
            if pos == 0 {
                (-3.0 * v[n] + 4.0 * v[n + step] - v[n + 2 * step]) / (2.0 * h)
            } else if pos + 1 == n_axis {
                (3.0 * v[n] - 4.0 * v[n - step] + v[n - 2 * step]) / (2.0 * h)
            } else {
                (v[n + step] - v[n - step]) / (2.0 * h)
            }
        })
        .collect();
    GridFunction::from_vec_unchecked(g, values)
}

/// Nodal gradient magnitude.
pub fn gradient_norm(u: &GridFunction) -> GridFunction {
    let gx = partial_derivative(u, 0);
    if u.grid.dim == 1 {
        return gx.map(f64::abs);
    }
    let gy = partial_derivative(u, 1);
    gx.zip_map(&gy, |a, b| a.hypot(b))
}

/// Largest interior `|Δu|`.
pub fn sup_abs_laplacian(u: &GridFunction) -> f64 {
    u.grid
        .interior_nodes()
        .map(|n| u.grid.laplacian_at(&u.values, n).abs())
        .fold(0.0, f64::max)
}
