//! Noise coefficients `f_k`, Brownian paths and the derived drift fields
//! `mu_t = -f·beta_t` and `mu_tilde = |f|^2 / 2`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::grid::{gradient_norm, sup_abs_laplacian, GridFunction, SpatialGrid};
use crate::rng::CounterRng;

/// Analytic noise coefficient profiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Profile {
    /// `f ≡ value`.
    Constant { value: f64 },
    /// `f(ξ) = scale * ξ_axis + offset`.
    Linear {
        #[serde(default)]
        axis: usize,
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        offset: f64,
    },
    /// `f(ξ) = amplitude * Π_axis sin(mode_axis * π * (ξ_axis - a) / (b - a))`.
    SinProduct {
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default = "unit_modes")]
        modes: Vec<u32>,
    },
}

fn one() -> f64 {
    1.0
}

fn unit_modes() -> Vec<u32> {
    vec![1, 1]
}

impl Profile {
    pub fn sample(&self, grid: &SpatialGrid) -> Result<GridFunction> {
        match self {
            Profile::Constant { value } => GridFunction::new(*grid, vec![*value; grid.len()]),
            Profile::Linear {
                axis,
                scale,
                offset,
            } => {
                if *axis >= grid.dim() {
                    return param(format!("linear profile axis {axis} exceeds grid dimension"));
                }
                GridFunction::from_fn(*grid, |x| scale * x[*axis] + offset)
            }
            Profile::SinProduct { amplitude, modes } => GridFunction::from_fn(*grid, |x| {
                let mut v = *amplitude;
                for axis in 0..grid.dim() {
                    let (a, b) = grid.extent(axis);
                    let m = modes.get(axis).copied().unwrap_or(1) as f64;
                    v *= (m * std::f64::consts::PI * (x[axis] - a) / (b - a)).sin();
                }
                v
            }),
        }
    }
}

/// Sup norms of a coefficient and its first two derivatives on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct C2Norms {
    pub sup: f64,
    pub sup_grad: f64,
    pub sup_lap: f64,
}

impl C2Norms {
    pub fn of(f: &GridFunction) -> Self {
        Self {
            sup: f.sup_abs(),
            sup_grad: gradient_norm(f).sup_abs(),
            sup_lap: sup_abs_laplacian(f),
        }
    }

    pub fn total(&self) -> f64 {
        self.sup + self.sup_grad + self.sup_lap
    }
}

/// The coefficient family `(f_k)_{k=1..N}`; `N = 0` is the deterministic equation.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBasis {
    grid: SpatialGrid,
    components: Vec<GridFunction>,
    c2_norms: Vec<C2Norms>,
}

impl NoiseBasis {
    pub fn new(grid: SpatialGrid, components: Vec<GridFunction>) -> Result<Self> {
        if let Some(c) = components.iter().find(|c| *c.grid() != grid) {
            return Err(Error::Shape {
                expected: grid.len(),
                got: c.values().len(),
            });
        }
        let c2_norms = components.iter().map(C2Norms::of).collect();
        Ok(Self {
            grid,
            components,
            c2_norms,
        })
    }

    pub fn none(grid: SpatialGrid) -> Self {
        Self {
            grid,
            components: Vec::new(),
            c2_norms: Vec::new(),
        }
    }

    pub fn from_profiles(grid: SpatialGrid, profiles: &[Profile]) -> Result<Self> {
        let comps = profiles.iter().map(|p| p.sample(&grid)).collect::<Result<Vec<_>>>()?;
        Self::new(grid, comps)
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn count(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[GridFunction] {
        &self.components
    }

    pub fn c2_norms(&self) -> &[C2Norms] {
        &self.c2_norms
    }

    /// `Σ_k sup |f_k|`.
    pub fn sup_sum(&self) -> f64 {
        self.c2_norms.iter().map(|c| c.sup).sum()
    }

    /// Spatially constant values of every `f_k`, or `None` if some component varies.
    pub fn constant_values(&self) -> Option<Vec<f64>> {
        self.components
            .iter()
            .map(|c| c.is_spatially_constant(1e-12).then(|| c.values()[0]))
            .collect()
    }
}

/// Discrete `N`-dimensional Brownian path on a uniform time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianPath {
    dt: f64,
    values: Vec<Vec<f64>>,
    seed: u64,
    component_streams: Vec<u64>,
}

impl BrownianPath {
    /// Wraps explicit values (synthetic fixtures, parsed files). `values[0]` must vanish.
    pub fn from_values(dt: f64, values: Vec<Vec<f64>>, seed: u64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return param(format!("dt must be positive, got {dt}"));
        }
        let Some(first) = values.first() else {
            return param("path needs at least one time point");
        };
        let n = first.len();
        if first.iter().any(|&v| v != 0.0) {
            return Err(Error::Contract("Brownian path must start at 0".into()));
        }
        if values.iter().any(|row| row.len() != n || row.iter().any(|v| !v.is_finite())) {
            return param("ragged or non-finite path values");
        }
        Ok(Self {
            dt,
            values,
            seed,
            component_streams: (0..n as u64).collect(),
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn component_streams(&self) -> &[u64] {
        &self.component_streams
    }

    pub fn num_steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.num_steps() as f64 * self.dt
    }

    pub fn components(&self) -> usize {
        self.values[0].len()
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }

    pub fn beta(&self, step: usize) -> &[f64] {
        &self.values[step]
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// `beta_{step+1} - beta_step`.
    pub fn increment(&self, step: usize) -> Vec<f64> {
        self.values[step + 1]
            .iter()
            .zip(&self.values[step])
            .map(|(a, b)| a - b)
            .collect()
    }

    /// Grid step index of time `t` (nearest point), checked against the horizon.
    pub fn step_of(&self, t: f64) -> Result<usize> {
        let s = (t / self.dt).round();
        if !(s >= 0.0) || s as usize > self.num_steps() {
            return Err(Error::Index {
                index: s.max(0.0) as usize,
                len: self.values.len(),
            });
        }
        Ok(s as usize)
    }

    /// Subsamples every `factor`-th point; the same realization on a coarser
    /// grid. A trailing partial step is dropped.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || factor > self.num_steps() {
            return param(format!(
                "coarsening factor {factor} must lie in 1..={}",
                self.num_steps()
            ));
        }
        Ok(Self {
            dt: self.dt * factor as f64,
            values: self.values.iter().step_by(factor).cloned().collect(),
            seed: self.seed,
            component_streams: self.component_streams.clone(),
        })
    }

    /// Holds the path at its value at time `s` from then on.
    pub fn held_after(&self, s: f64) -> Result<Self> {
        let k = self.step_of(s)?;
        let mut values = self.values.clone();
        let frozen = values[k].clone();
        for row in values.iter_mut().skip(k + 1) {
            row.clone_from(&frozen);
        }
        Ok(Self {
            values,
            ..self.clone()
        })
    }

    /// CSV with header `t,beta_1,...,beta_N`, preceded by a metadata comment.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# seed={} dt={}", self.seed, self.dt);
        s.push('t');
        for k in 1..=self.components() {
            let _ = write!(s, ",beta_{k}");
        }
        s.push('\n');
        for (i, row) in self.values.iter().enumerate() {
            let _ = write!(s, "{}", self.time(i));
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut seed = 0u64;
        let mut dt = None;
        let mut times = Vec::new();
        let mut values = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(meta) = line.strip_prefix('#') {
                for kv in meta.split_whitespace() {
                    match kv.split_once('=') {
                        Some(("seed", v)) => {
                            seed = v.parse().map_err(|_| Error::Parse(format!("bad seed {v}")))?
                        }
                        Some(("dt", v)) => {
                            dt = Some(v.parse().map_err(|_| Error::Parse(format!("bad dt {v}")))?)
                        }
                        _ => {}
                    }
                }
                continue;
            }
            if line.starts_with('t') {
                continue;
            }
            let mut it = line.split(',');
            let t: f64 = it
                .next()
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Parse(format!("bad row: {line}")))?;
            let row = it
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse(format!("bad row {line}: {e}")))?;
            times.push(t);
            values.push(row);
        }
        let dt = match dt {
            Some(dt) => dt,
            None if times.len() >= 2 => times[1] - times[0],
            None => return Err(Error::Parse("cannot infer dt".into())),
        };
        Self::from_values(dt, values, seed)
    }
}

/// Draws a Brownian path with `floor(horizon/dt)` steps. Increments of
/// component `k` at step `i` are a pure function of `(seed, k, i)`.
pub fn sample_path(basis: &NoiseBasis, horizon: f64, dt: f64, seed: u64) -> Result<BrownianPath> {
    sample_path_components(basis.count(), horizon, dt, seed)
}

pub fn sample_path_components(n: usize, horizon: f64, dt: f64, seed: u64) -> Result<BrownianPath> {
    if !(dt > 0.0 && dt.is_finite()) {
        return param(format!("dt must be positive, got {dt}"));
    }
    if !(horizon >= dt && horizon.is_finite()) {
        return param(format!("horizon must be at least dt, got {horizon}"));
    }
    let steps = (horizon / dt * (1.0 + 1e-12)).floor() as usize;
    let sd = dt.sqrt();
    let rng = CounterRng::new(seed);
    let mut values = Vec::with_capacity(steps + 1);
    values.push(vec![0.0; n]);
    for i in 0..steps {
        let prev = &values[i];
        let next: Vec<f64> = (0..n)
            .map(|k| prev[k] + sd * rng.normal(k as u64, i as u64))
            .collect();
        values.push(next);
    }
    Ok(BrownianPath {
        dt,
        values,
        seed,
        component_streams: (0..n as u64).collect(),
    })
}

/// `mu_t = -Σ_k f_k β^k_t` at a path step.
pub fn mu_at(basis: &NoiseBasis, path: &BrownianPath, step: usize) -> Result<GridFunction> {
    if step > path.num_steps() {
        return Err(Error::Index {
            index: step,
            len: path.num_steps() + 1,
        });
    }
    if path.components() != basis.count() {
        return Err(Error::Shape {
            expected: basis.count(),
            got: path.components(),
        });
    }
    Ok(mu_from_beta(basis, path.beta(step)))
}

pub(crate) fn mu_from_beta(basis: &NoiseBasis, beta: &[f64]) -> GridFunction {
    let mut v = vec![0.0; basis.grid.len()];
    for (f, b) in basis.components.iter().zip(beta) {
        for (vi, fi) in v.iter_mut().zip(f.values()) {
            *vi -= fi * b;
        }
    }
    GridFunction::from_vec_unchecked(basis.grid, v)
}

/// `mu_tilde = ½ Σ_k f_k²`.
pub fn mu_tilde(basis: &NoiseBasis) -> GridFunction {
    let mut v = vec![0.0; basis.grid.len()];
    for f in &basis.components {
        for (vi, fi) in v.iter_mut().zip(f.values()) {
            *vi += 0.5 * fi * fi;
        }
    }
    GridFunction::from_vec_unchecked(basis.grid, v)
}

/// Noise data bundled for the solvers.
#[derive(Debug, Clone)]
pub struct DriftFields {
    pub basis: NoiseBasis,
    pub path: BrownianPath,
    pub mu_tilde: GridFunction,
}

impl DriftFields {
    pub fn new(basis: &NoiseBasis, path: &BrownianPath) -> Result<Self> {
        if path.components() != basis.count() {
            return Err(Error::Shape {
                expected: basis.count(),
                got: path.components(),
            });
        }
        Ok(Self {
            basis: basis.clone(),
            path: path.clone(),
            mu_tilde: mu_tilde(basis),
        })
    }

    pub fn mu(&self, step: usize) -> GridFunction {
        mu_from_beta(&self.basis, self.path.beta(step.min(self.path.num_steps())))
    }

    pub fn grid(&self) -> &SpatialGrid {
        self.basis.grid()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HypothesisSample {
    pub t: f64,
    pub integral: f64,
    pub overflow: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HypothesisReport {
    pub max_integral: f64,
    pub per_t: Vec<HypothesisSample>,
}

/// Pathwise samples of `∫ exp(-p mu_t - p mu_tilde t) dξ` on the requested times.
pub fn check_hypothesis_h(
    basis: &NoiseBasis,
    path: &BrownianPath,
    p: f64,
    t_grid: &[f64],
) -> Result<HypothesisReport> {
    if !(p >= 1.0) {
        return param(format!("p must be at least 1, got {p}"));
    }
    let mt = mu_tilde(basis);
    let g = basis.grid;
    let mut per_t = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let step = path.step_of(t)?;
        let mu = mu_at(basis, path, step)?;
        let t_exact = path.time(step);
        let mut sum = 0.0;
        for n in 0..g.len() {
            let e = -p * mu.values()[n] - p * mt.values()[n] * t_exact;
            sum += e.exp() * g.quad_weight(n);
        }
        let overflow = !sum.is_finite();
        per_t.push(HypothesisSample {
            t: t_exact,
            integral: if overflow { f64::INFINITY } else { sum },
            overflow,
        });
    }
    let max_integral = per_t.iter().map(|s| s.integral).fold(0.0, f64::max);
    Ok(HypothesisReport {
        max_integral,
        per_t,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SublevelFit {
    /// Fitted slope of `log m(ε)` against `log ε`; `None` when vacuous.
    pub exponent: Option<f64>,
    pub measures: Vec<f64>,
    pub vacuous: bool,
}

/// Measures `|{0 < mu_tilde <= ε}|` by nodal counting and fits a power law.
pub fn sublevel_decay_exponent(basis: &NoiseBasis, eps_grid: &[f64]) -> Result<SublevelFit> {
    if eps_grid.iter().any(|&e| !(e > 0.0)) {
        return param("sublevel thresholds must be positive");
    }
    if eps_grid.windows(2).any(|w| w[1] <= w[0]) {
        return param("sublevel thresholds must be strictly increasing");
    }
    let mt = mu_tilde(basis);
    let g = basis.grid;
    let measures: Vec<f64> = eps_grid
        .iter()
        .map(|&e| {
            (0..g.len())
                .filter(|&n| {
                    let v = mt.values()[n];
                    v > 0.0 && v <= e
                })
                .map(|n| g.quad_weight(n))
                .sum()
        })
        .collect();
    let pts: Vec<(f64, f64)> = eps_grid
        .iter()
        .zip(&measures)
        .filter(|(_, &m)| m > 0.0)
        .map(|(&e, &m)| (e.ln(), m.ln()))
        .collect();
    if pts.len() < 2 {
        return Ok(SublevelFit {
            exponent: None,
            measures,
            vacuous: true,
        });
    }
    Ok(SublevelFit {
        exponent: Some(least_squares_slope(&pts)),
        measures,
        vacuous: false,
    })
}

pub(crate) fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Earliest grid time `s >= m` such that the path stays within `eps`
/// (max norm) of `β_s` on `[s, s + n]`.
pub fn find_flat_interval(path: &BrownianPath, m: f64, n: f64, eps: f64) -> Option<(f64, f64)> {
    if !(eps > 0.0 && n > 0.0 && m >= 0.0) {
        return None;
    }
    let dt = path.dt;
    let start = (m / dt - 1e-9).ceil().max(0.0) as usize;
    let width = (n / dt - 1e-9).ceil() as usize;
    let last = path.num_steps();
    if start + width > last {
        return None;
    }
    'outer: for s in start..=last - width {
        let base = &path.values[s];
        for r in s + 1..=s + width {
            let row = &path.values[r];
            if row.iter().zip(base).any(|(a, b)| (a - b).abs() >= eps) {
                continue 'outer;
            }
        }
        return Some((path.time(s), path.time(s + width)));
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(cells: usize) -> SpatialGrid {
        SpatialGrid::unit_interval(cells).unwrap()
    }

    fn basis(cells: usize, profiles: &[Profile]) -> NoiseBasis {
        NoiseBasis::from_profiles(unit(cells), profiles).unwrap()
    }

    #[test]
    fn empty_noise_path_has_no_columns() {
        let b = NoiseBasis::none(unit(4));
        let p = sample_path(&b, 1.0, 0.1, 3).unwrap();
        assert_eq!(p.num_steps(), 10);
        assert!(p.values().iter().all(|r| r.is_empty()));
    }

    #[test]
    fn sampling_is_deterministic_and_validated() {
        let b = basis(4, &[Profile::Constant { value: 1.0 }]);
        let a = sample_path(&b, 2.0, 0.01, 42).unwrap();
        let c = sample_path(&b, 2.0, 0.01, 42).unwrap();
        assert_eq!(a, c);
        assert_ne!(a, sample_path(&b, 2.0, 0.01, 43).unwrap());
        assert!(sample_path(&b, 2.0, 0.0, 1).is_err());
        assert!(sample_path(&b, 0.001, 0.01, 1).is_err());
    }

    #[test]
    fn increments_have_brownian_moments() {
        let dt = 0.01;
        let p = sample_path_components(1, 1000.0, dt, 7).unwrap();
        let n = p.num_steps() as f64;
        let inc: Vec<f64> = (0..p.num_steps()).map(|i| p.increment(i)[0]).collect();
        let mean = inc.iter().sum::<f64>() / n;
        let var = inc.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 4.0 * dt.sqrt() / n.sqrt());
        assert!((var / dt - 1.0).abs() < 0.05);
    }

    #[test]
    fn components_are_uncorrelated() {
        let p = sample_path_components(2, 500.0, 0.01, 11).unwrap();
        let n = p.num_steps();
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let d = p.increment(i);
            sxy += d[0] * d[1];
            sxx += d[0] * d[0];
            syy += d[1] * d[1];
        }
        let rho = sxy / (sxx * syy).sqrt();
        assert!(rho.abs() < 4.0 / (n as f64).sqrt());
    }

    #[test]
    fn mu_values() {
        let b = basis(4, &[Profile::Constant { value: 1.0 }]);
        let p = BrownianPath::from_values(0.1, vec![vec![0.0], vec![0.3]], 0).unwrap();
        assert!(mu_at(&b, &p, 0).unwrap().values().iter().all(|&v| v == 0.0));
        assert!(mu_at(&b, &p, 1).unwrap().values().iter().all(|&v| (v + 0.3).abs() < 1e-15));
        assert!(mu_at(&b, &p, 2).is_err());

        let b2 = basis(
            4,
            &[Profile::Constant { value: 1.0 }, Profile::Constant { value: 2.0 }],
        );
        let p2 = BrownianPath::from_values(0.1, vec![vec![0.0, 0.0], vec![0.1, -0.2]], 0).unwrap();
        for v in mu_at(&b2, &p2, 1).unwrap().values() {
            assert!((v - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn mu_tilde_values() {
        assert!(mu_tilde(&NoiseBasis::none(unit(4))).values().iter().all(|&v| v == 0.0));
        let b = basis(4, &[Profile::Constant { value: 2.0 }]);
        assert!(mu_tilde(&b).values().iter().all(|&v| v == 2.0));
        let lin = basis(10, &[Profile::Linear { axis: 0, scale: 1.0, offset: 0.0 }]);
        let mt = mu_tilde(&lin);
        assert!((mt.values()[5] - 0.125).abs() < 1e-15);
    }

    #[test]
    fn hypothesis_integral_without_noise_is_domain_measure() {
        let g = SpatialGrid::interval(0.0, 2.5, 11).unwrap();
        let b = NoiseBasis::none(g);
        let p = sample_path(&b, 1.0, 0.1, 0).unwrap();
        let r = check_hypothesis_h(&b, &p, 2.0, &[0.0, 0.5, 1.0]).unwrap();
        for s in &r.per_t {
            assert!((s.integral - 2.5).abs() < 1e-14);
        }
    }

    #[test]
    fn hypothesis_integral_constant_coefficient() {
        let c = 0.7;
        let b = basis(20, &[Profile::Constant { value: c }]);
        let p = sample_path(&b, 3.0, 0.01, 5).unwrap();
        let ts = [0.5, 1.0, 2.0, 3.0];
        let r = check_hypothesis_h(&b, &p, 3.0, &ts).unwrap();
        for s in &r.per_t {
            let beta = p.beta(p.step_of(s.t).unwrap())[0];
            let exact = (3.0 * c * beta - 3.0 * c * c * s.t / 2.0).exp();
            assert!((s.integral - exact).abs() < 1e-12 * exact);
        }
    }

    #[test]
    fn hypothesis_overflow_is_flagged() {
        let b = basis(4, &[Profile::Constant { value: 1.0 }]);
        let p = BrownianPath::from_values(1.0, vec![vec![0.0], vec![1e4]], 0).unwrap();
        let r = check_hypothesis_h(&b, &p, 1.0, &[1.0]).unwrap();
        assert!(r.per_t[0].overflow);
        assert!(r.max_integral.is_infinite());
    }

    #[test]
    fn hypothesis_quadrature_refines() {
        let lin = [Profile::Linear { axis: 0, scale: 1.0, offset: 0.0 }];
        let coarse = basis(100, &lin);
        let fine = basis(1000, &lin);
        let p = sample_path(&coarse, 1.0, 0.01, 9).unwrap();
        let a = check_hypothesis_h(&coarse, &p, 2.0, &[1.0]).unwrap().max_integral;
        let b = check_hypothesis_h(&fine, &p, 2.0, &[1.0]).unwrap().max_integral;
        assert!((a - b).abs() / b < 1e-3);
    }

    #[test]
    fn sublevel_fits() {
        let eps: Vec<f64> = (0..9).map(|i| 1e-5 * 10f64.powf(i as f64 * 0.5)).collect();
        let b = basis(4, &[Profile::Constant { value: 1.0 }]);
        assert!(sublevel_decay_exponent(&b, &[0.1, 0.2]).unwrap().vacuous);
        assert!(sublevel_decay_exponent(&NoiseBasis::none(unit(4)), &eps).unwrap().vacuous);
        let lin = basis(10_000, &[Profile::Linear { axis: 0, scale: 1.0, offset: 0.0 }]);
        let fit = sublevel_decay_exponent(&lin, &eps).unwrap();
        let d = fit.exponent.unwrap();
        assert!((d - 0.5).abs() < 0.05, "{d}");
        assert!(sublevel_decay_exponent(&lin, &[0.2, 0.1]).is_err());
    }

    #[test]
    fn flat_interval_fixtures() {
        // constant on [5, 8]
        let dt = 0.5;
        let mut vals = Vec::new();
        for i in 0..=30 {
            let t = i as f64 * dt;
            let v = if t < 5.0 { (t * 3.0).sin() } else if t <= 8.0 { 1.0 } else { 1.0 + (t - 8.0) };
            vals.push(vec![if i == 0 { 0.0 } else { v }]);
        }
        let p = BrownianPath::from_values(dt, vals, 0).unwrap();
        assert_eq!(find_flat_interval(&p, 5.0, 3.0, 0.01), Some((5.0, 8.0)));

        let empty = sample_path_components(0, 10.0, 0.1, 0).unwrap();
        let (s, t) = find_flat_interval(&empty, 2.0, 3.0, 0.1).unwrap();
        assert!((s - 2.0).abs() < 1e-12 && (t - 5.0).abs() < 1e-12);
        assert_eq!(find_flat_interval(&empty, 8.0, 3.0, 0.1), None);
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let p = sample_path_components(3, 1.0, 0.01, 99).unwrap();
        let back = BrownianPath::from_csv(&p.to_csv()).unwrap();
        assert_eq!(p.values(), back.values());
        assert_eq!(p.dt(), back.dt());
        assert_eq!(p.seed(), back.seed());
    }

    #[test]
    fn coarsen_and_hold() {
        let p = sample_path_components(1, 1.0, 0.01, 1).unwrap();
        let c = p.coarsen(4).unwrap();
        assert_eq!(c.num_steps(), 25);
        assert_eq!(c.beta(3), p.beta(12));
        assert_eq!(p.coarsen(3).unwrap().num_steps(), 33);
        assert!(p.coarsen(0).is_err());
        let h = p.held_after(0.5).unwrap();
        assert_eq!(h.beta(100), p.beta(50));
        assert_eq!(h.beta(49), p.beta(49));
    }

    #[test]
    fn c2_norms_of_linear_profile() {
        let b = basis(50, &[Profile::Linear { axis: 0, scale: 2.0, offset: 0.0 }]);
        let c = b.c2_norms()[0];
        assert!((c.sup - 2.0).abs() < 1e-12);
        assert!((c.sup_grad - 2.0).abs() < 1e-9);
        assert!(c.sup_lap < 1e-8);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn mu_tilde_nonnegative(c1 in -3.0f64..3.0, s in -2.0f64..2.0, a in 0.0f64..2.0) {
                let b = basis(16, &[
                    Profile::Constant { value: c1 },
                    Profile::Linear { axis: 0, scale: s, offset: 0.1 },
                    Profile::SinProduct { amplitude: a, modes: vec![2] },
                ]);
                prop_assert!(mu_tilde(&b).min() >= 0.0);
            }

            #[test]
            fn mu_linear_in_path(lambda in -4.0f64..4.0, seed in 0u64..1000) {
                let b = basis(8, &[Profile::Linear { axis: 0, scale: 1.0, offset: 0.5 }, Profile::Constant { value: -0.3 }]);
                let p = sample_path(&b, 1.0, 0.1, seed).unwrap();
                let scaled: Vec<Vec<f64>> = p.values().iter().map(|r| r.iter().map(|v| lambda * v).collect()).collect();
                let q = BrownianPath::from_values(0.1, scaled, seed).unwrap();
                let a = mu_at(&b, &p, 7).unwrap();
                let c = mu_at(&b, &q, 7).unwrap();
                for (x, y) in a.values().iter().zip(c.values()) {
                    prop_assert!((lambda * x - y).abs() < 1e-12);
                }
            }

            #[test]
            fn flat_interval_reverifies(seed in 0u64..200) {
                let p = sample_path_components(2, 20.0, 0.01, seed).unwrap();
                if let Some((s, t)) = find_flat_interval(&p, 1.0, 0.5, 0.3) {
                    prop_assert!(s >= 1.0 - 1e-12);
                    let (i, j) = (p.step_of(s).unwrap(), p.step_of(t).unwrap());
                    for r in i..=j {
                        for k in 0..2 {
                            prop_assert!((p.beta(r)[k] - p.beta(i)[k]).abs() < 0.3);
                        }
                    }
                }
            }
        }
    }
}
