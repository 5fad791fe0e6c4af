//! Implicit time stepping for the transformed random equation
//! `∂Y = e^μ ΔΦ(Y) - μ̃ Y` with `Φ(r) = φ_ε(r) + δ r`, the direct Itô scheme for
//! `X`, and the run-level monitors that live next to them.
//!
//! Both chains share one Newton kernel that solves `a ⊙ Z - dt L Φ(Z) = b` on
//! interior unknowns with zero Dirichlet data.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::grid::{hminus1_norm, GridFunction, SpatialGrid};
use crate::linalg::{solve_tridiagonal, BandMatrix};
use crate::noise::{BrownianPath, DriftFields, NoiseBasis};
use crate::regularize::{MollifiedSign, Nonlinearity, RegParams};

const MAX_DAMPING_HALVINGS: usize = 20;
const MAX_DT_HALVINGS: u32 = 5;
/// Steps checked after the first extinction detection.
pub const ABSORPTION_STEPS: usize = 10;

fn default_newton_tol() -> f64 {
    1e-10
}
fn default_newton_max_iter() -> usize {
    50
}
fn default_stride() -> usize {
    1
}
fn default_monitor_p() -> f64 {
    2.0
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    pub dt: f64,
    pub reg: RegParams,
    #[serde(default = "default_newton_tol")]
    pub newton_tol: f64,
    #[serde(default = "default_newton_max_iter")]
    pub newton_max_iter: usize,
    /// `None` resolves to `1e-8 * max(1, sup|x0|)` at run start.
    #[serde(default)]
    pub extinction_threshold: Option<f64>,
    #[serde(default = "default_stride")]
    pub monitor_stride: usize,
    /// Exponent of the weighted `L^p` series.
    #[serde(default = "default_monitor_p")]
    pub monitor_p: f64,
    /// Keep every accepted state (needed by the step-level energy monitors).
    #[serde(default)]
    pub record_trace: bool,
    #[serde(default = "yes")]
    pub check_positivity: bool,
}

impl SchemeConfig {
    pub fn new(dt: f64, reg: RegParams) -> Self {
        Self {
            dt,
            reg,
            newton_tol: default_newton_tol(),
            newton_max_iter: default_newton_max_iter(),
            extinction_threshold: None,
            monitor_stride: default_stride(),
            monitor_p: default_monitor_p(),
            record_trace: false,
            check_positivity: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.reg.validate()?;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return param(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.newton_tol > 0.0) {
            return param(format!("newton_tol must be positive, got {}", self.newton_tol));
        }
        if self.newton_max_iter == 0 {
            return param("newton_max_iter must be at least 1");
        }
        if let Some(th) = self.extinction_threshold {
            if !(th > 0.0 && th.is_finite()) {
                return param(format!("extinction_threshold must be positive, got {th}"));
            }
        }
        if self.monitor_stride == 0 {
            return param("monitor_stride must be at least 1");
        }
        if !(self.monitor_p >= 1.0 && self.monitor_p.is_finite()) {
            return param(format!("monitor_p must be at least 1, got {}", self.monitor_p));
        }
        Ok(())
    }

    pub fn resolved_threshold(&self, x0: &GridFunction) -> f64 {
        self.extinction_threshold
            .unwrap_or_else(|| 1e-8 * x0.sup_abs().max(1.0))
    }
}

/// `(t, Y, η = Φ_ε(Y))` after an accepted step; `step_index` is the path index
/// whose `μ` freezes the next step.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub t: f64,
    pub y: GridFunction,
    pub eta: GridFunction,
    pub step_index: usize,
}

impl SolverState {
    pub fn initial(x0: &GridFunction, reg: &RegParams) -> Self {
        let y = x0.with_zero_boundary();
        let eta = selection(&y, reg);
        Self {
            t: 0.0,
            y,
            eta,
            step_index: 0,
        }
    }
}

fn selection(y: &GridFunction, reg: &RegParams) -> GridFunction {
    let nl = reg.nonlinearity();
    y.map(|v| nl.value(v))
}

struct Kernel<'a> {
    grid: &'a SpatialGrid,
    nl: MollifiedSign,
    delta: f64,
    dt: f64,
    a: &'a [f64],
    b: &'a [f64],
    weight: &'a [f64],
}

impl Kernel<'_> {
    #[inline]
    fn phi(&self, z: f64) -> f64 {
        self.nl.value(z) + self.delta * z
    }

    #[inline]
    fn dphi(&self, z: f64) -> f64 {
        self.nl.derivative(z) + self.delta
    }

    /// Fills `out` with the residual and returns its weighted max norm.
    fn residual(&self, z: &[f64], full: &mut [f64], out: &mut [f64]) -> f64 {
        let g = self.grid;
        for (k, &zk) in z.iter().enumerate() {
            full[g.interior_node(k)] = self.phi(zk);
        }
        let mut norm = 0.0f64;
        for k in 0..z.len() {
            let lap = g.laplacian_at(full, g.interior_node(k));
            let r = self.a[k] * z[k] - self.dt * lap - self.b[k];
            out[k] = r;
            norm = norm.max((self.weight[k] * r).abs());
        }
        if norm.is_nan() {
            f64::INFINITY
        } else {
            norm
        }
    }

    /// Newton direction: solves `J dz = -r`.
    fn direction(&self, z: &[f64], r: &[f64]) -> Result<Vec<f64>> {
        let g = self.grid;
        let n = z.len();
        let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
        if g.dim() == 1 {
            let c = self.dt / g.spacing(0).powi(2);
            let d: Vec<f64> = z.iter().map(|&v| self.dphi(v)).collect();
            let mut lower = vec![0.0; n];
            let mut upper = vec![0.0; n];
            let mut diag = vec![0.0; n];
            for k in 0..n {
                diag[k] = self.a[k] + 2.0 * c * d[k];
                if k > 0 {
                    lower[k] = -c * d[k - 1];
                }
                if k + 1 < n {
                    upper[k] = -c * d[k + 1];
                }
            }
            return solve_tridiagonal(&lower, &diag, &upper, &rhs);
        }
        let mut m = BandMatrix::zeros(n, g.interior_bandwidth());
        for k in 0..n {
            m.add(k, k, self.a[k]);
        }
        g.for_each_interior_laplacian_entry(|row, col, coeff| {
            m.add(row, col, -self.dt * coeff * self.dphi(z[col]));
        });
        Ok(m.factorize()?.solve(&rhs))
    }

    fn solve(&self, mut z: Vec<f64>, tol: f64, max_iter: usize, t: f64) -> Result<(Vec<f64>, usize)> {
        let mut full = vec![0.0; self.grid.len()];
        let mut r = vec![0.0; z.len()];
        let mut norm = self.residual(&z, &mut full, &mut r);
        let mut trial = vec![0.0; z.len()];
        let mut tr = vec![0.0; z.len()];
        for it in 0..max_iter {
            if norm <= tol {
                return Ok((z, it));
            }
            let dz = self.direction(&z, &r)?;
            let mut lambda = 1.0;
            let mut accepted = false;
            for _ in 0..=MAX_DAMPING_HALVINGS {
                for k in 0..z.len() {
                    trial[k] = z[k] + lambda * dz[k];
                }
                let tn = self.residual(&trial, &mut full, &mut tr);
                if tn < norm {
                    std::mem::swap(&mut z, &mut trial);
                    std::mem::swap(&mut r, &mut tr);
                    norm = tn;
                    accepted = true;
                    break;
                }
                lambda *= 0.5;
            }
            if !accepted {
                return Err(Error::Newton {
                    t,
                    residual: norm,
                    iterations: it,
                });
            }
        }
        if norm <= tol {
            Ok((z, max_iter))
        } else {
            Err(Error::Newton {
                t,
                residual: norm,
                iterations: max_iter,
            })
        }
    }
}

fn interior(g: &SpatialGrid, v: &[f64]) -> Vec<f64> {
    g.interior_nodes().map(|n| v[n]).collect()
}

fn scatter(g: &SpatialGrid, z: &[f64]) -> Vec<f64> {
    let mut full = vec![0.0; g.len()];
    for (k, &v) in z.iter().enumerate() {
        full[g.interior_node(k)] = v;
    }
    full
}

/// One backward-Euler substep of the `Y` equation with the `μ̃` decay
/// integrated exactly over the step.
fn y_substep(
    g: &SpatialGrid,
    y: &[f64],
    mu: &[f64],
    mu_tilde: &[f64],
    dt: f64,
    cfg: &SchemeConfig,
    t: f64,
) -> Result<(Vec<f64>, usize)> {
    let nodes: Vec<usize> = g.interior_nodes().collect();
    let a: Vec<f64> = nodes.iter().map(|&n| (-mu[n] + mu_tilde[n] * dt).exp()).collect();
    let b: Vec<f64> = nodes.iter().map(|&n| (-mu[n]).exp() * y[n]).collect();
    let w: Vec<f64> = nodes.iter().map(|&n| mu[n].exp()).collect();
    let kernel = Kernel {
        grid: g,
        nl: cfg.reg.nonlinearity(),
        delta: cfg.reg.delta,
        dt,
        a: &a,
        b: &b,
        weight: &w,
    };
    let (z, it) = kernel.solve(interior(g, y), cfg.newton_tol, cfg.newton_max_iter, t)?;
    Ok((scatter(g, &z), it))
}

/// Drift part of the `X` step: `X* - dt ΔΦ(e^μ X*) = X`; returns `X*`.
fn x_drift_substep(
    g: &SpatialGrid,
    x: &[f64],
    mu: &[f64],
    dt: f64,
    cfg: &SchemeConfig,
    t: f64,
) -> Result<(Vec<f64>, usize)> {
    let nodes: Vec<usize> = g.interior_nodes().collect();
    let a: Vec<f64> = nodes.iter().map(|&n| (-mu[n]).exp()).collect();
    let b: Vec<f64> = nodes.iter().map(|&n| x[n]).collect();
    let w = vec![1.0; nodes.len()];
    let z0: Vec<f64> = nodes.iter().map(|&n| mu[n].exp() * x[n]).collect();
    let kernel = Kernel {
        grid: g,
        nl: cfg.reg.nonlinearity(),
        delta: cfg.reg.delta,
        dt,
        a: &a,
        b: &b,
        weight: &w,
    };
    let (z, it) = kernel.solve(z0, cfg.newton_tol, cfg.newton_max_iter, t)?;
    let xs: Vec<f64> = z.iter().zip(&a).map(|(zk, ak)| zk * ak).collect();
    Ok((scatter(g, &xs), it))
}

#[derive(Debug, Clone, Copy, Default)]
struct StepStats {
    iterations: usize,
    substeps: usize,
}

/// Advances one full step, splitting it into `2^k` equal substeps (same
/// frozen `μ`) when Newton fails. `on_sub` sees intermediate substates.
fn with_retry(
    y: &[f64],
    dt: f64,
    t: f64,
    mut sub: impl FnMut(&[f64], f64, f64) -> Result<(Vec<f64>, usize)>,
    mut on_sub: impl FnMut(f64, &[f64]),
) -> Result<(Vec<f64>, StepStats)> {
    let mut last_err = None;
    for k in 0..=MAX_DT_HALVINGS {
        let m = 1usize << k;
        let h = dt / m as f64;
        let mut cur = y.to_vec();
        let mut stats = StepStats {
            iterations: 0,
            substeps: m,
        };
        let mut inter = Vec::new();
        let mut ok = true;
        for j in 0..m {
            match sub(&cur, h, t + j as f64 * h) {
                Ok((next, it)) => {
                    stats.iterations += it;
                    cur = next;
                    if j + 1 < m {
                        inter.push((t + (j + 1) as f64 * h, cur.clone()));
                    }
                }
                Err(e) => {
                    last_err = Some(e);
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            for (ts, s) in &inter {
                on_sub(*ts, s);
            }
            return Ok((cur, stats));
        }
    }
    Err(last_err.expect("at least one attempt"))
}

/// Aligns a path to the scheme step: `dt` must be a whole multiple of the
/// path step.
pub fn align_path(path: &BrownianPath, dt: f64) -> Result<BrownianPath> {
    let ratio = dt / path.dt();
    let k = ratio.round();
    if k < 1.0 || (ratio - k).abs() > 1e-9 * ratio {
        return param(format!(
            "scheme dt {dt} is not a whole multiple of the path step {}",
            path.dt()
        ));
    }
    if k == 1.0 {
        Ok(path.clone())
    } else {
        path.coarsen(k as usize)
    }
}

/// One backward-Euler step of the `Y` equation (no retry).
pub fn step_y(state: &SolverState, config: &SchemeConfig, drift: &DriftFields) -> Result<SolverState> {
    config.validate()?;
    if state.step_index >= drift.path.num_steps() {
        return Err(Error::Index {
            index: state.step_index,
            len: drift.path.num_steps(),
        });
    }
    let g = *state.y.grid();
    let mu = drift.mu(state.step_index);
    let (y, _) = y_substep(
        &g,
        state.y.values(),
        mu.values(),
        drift.mu_tilde.values(),
        config.dt,
        config,
        state.t,
    )?;
    let y = GridFunction::new(g, y)?;
    Ok(SolverState {
        t: state.t + config.dt,
        eta: selection(&y, &config.reg),
        y,
        step_index: state.step_index + 1,
    })
}

/// One state of a recorded trace; `mu_step` is the path index whose `μ`
/// drives the step that leaves this state.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub t: f64,
    pub mu_step: usize,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub t: f64,
    pub step: usize,
    pub y: GridFunction,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub grid: SpatialGrid,
    pub x0: GridFunction,
    pub config: SchemeConfig,
    pub drift: DriftFields,
    pub times: Vec<f64>,
    pub l1: Vec<f64>,
    pub l2: Vec<f64>,
    pub lp_weighted: Vec<f64>,
    pub hminus1: Vec<f64>,
    pub checkpoints: Vec<Checkpoint>,
    /// Every accepted state, present when `record_trace` is set.
    pub trace: Vec<TraceEntry>,
    pub extinction_time: Option<f64>,
    pub threshold: f64,
    /// Largest `L¹` norm seen after the first detection.
    pub post_extinction_max_l1: Option<f64>,
    pub min_value: f64,
    /// Nodes where the selection `η = Φ_ε(Y)` broke its defining properties.
    pub eta_violations: usize,
    pub newton_iterations: usize,
    pub split_steps: usize,
    pub final_state: SolverState,
}

impl RunResult {
    pub fn absorbed(&self) -> bool {
        self.post_extinction_max_l1
            .is_none_or(|m| m <= 2.0 * self.threshold * self.grid.measure())
    }

    pub fn has_trace(&self) -> bool {
        !self.trace.is_empty()
    }

    /// Series CSV; `extra` columns are appended as `residual_<name>`.
    pub fn to_csv(&self, extra: &[(&str, &[f64])]) -> String {
        let mut s = String::from("t,l1,l2,lp_weighted,hminus1");
        for (name, _) in extra {
            let _ = write!(s, ",residual_{name}");
        }
        s.push('\n');
        for i in 0..self.times.len() {
            let _ = write!(
                s,
                "{},{},{},{},{}",
                self.times[i], self.l1[i], self.l2[i], self.lp_weighted[i], self.hminus1[i]
            );
            for (_, col) in extra {
                match col.get(i) {
                    Some(v) => {
                        let _ = write!(s, ",{v}");
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// True iff `∫|Y| <= threshold |O|`.
pub fn detect_extinction(y: &GridFunction, threshold: f64) -> bool {
    y.lp_norm(1.0) <= threshold * y.grid().measure()
}

struct Recorder<'a> {
    g: SpatialGrid,
    mt: &'a GridFunction,
    p: f64,
}

impl Recorder<'_> {
    fn lp_weighted(&self, y: &GridFunction, t: f64) -> f64 {
        let g = self.g;
        (0..g.len())
            .map(|n| (self.p * self.mt.values()[n] * t).exp() * y.values()[n].abs().powf(self.p) * g.quad_weight(n))
            .sum()
    }
}

fn count_eta_violations(y: &GridFunction, eta: &GridFunction, reg: &RegParams) -> usize {
    let cut = reg.eps + reg.tau;
    y.values()
        .iter()
        .zip(eta.values())
        .filter(|&(&v, &e)| e.abs() > 1.0 || e * v < 0.0 || (v.abs() > cut && e != v.signum()))
        .count()
}

/// Iterates the `Y` scheme from `x0` until `horizon`, or until extinction has
/// been detected and the absorption window has passed.
pub fn run_y(
    x0: &GridFunction,
    basis: &NoiseBasis,
    path: &BrownianPath,
    config: &SchemeConfig,
    horizon: f64,
) -> Result<RunResult> {
    config.validate()?;
    let g = *x0.grid();
    if g != *basis.grid() {
        return Err(Error::Contract("initial datum and noise basis live on different grids".into()));
    }
    if config.check_positivity {
        if let Some(n) = x0.values().iter().position(|&v| v < 0.0) {
            return param(format!("initial datum is negative at node {n}"));
        }
    }
    if !(horizon >= 0.0) {
        return param(format!("horizon must be nonnegative, got {horizon}"));
    }
    let path = align_path(path, config.dt)?;
    let drift = DriftFields::new(basis, &path)?;
    let dt = config.dt;
    let n_steps = path.num_steps().min((horizon / dt * (1.0 + 1e-12)).floor() as usize);
    let threshold = config.resolved_threshold(x0);
    let measure = g.measure();
    let rec = Recorder {
        g,
        mt: &drift.mu_tilde,
        p: config.monitor_p,
    };

    let mut state = SolverState::initial(x0, &config.reg);
    let mut out = RunResult {
        grid: g,
        x0: x0.clone(),
        config: *config,
        drift: drift.clone(),
        times: Vec::new(),
        l1: Vec::new(),
        l2: Vec::new(),
        lp_weighted: Vec::new(),
        hminus1: Vec::new(),
        checkpoints: Vec::new(),
        trace: Vec::new(),
        extinction_time: None,
        threshold,
        post_extinction_max_l1: None,
        min_value: state.y.min(),
        eta_violations: 0,
        newton_iterations: 0,
        split_steps: 0,
        final_state: state.clone(),
    };

    let checkpoint = |out: &mut RunResult, s: &SolverState| -> Result<()> {
        out.times.push(s.t);
        out.l1.push(s.y.lp_norm(1.0));
        out.l2.push(s.y.lp_norm(2.0));
        out.lp_weighted.push(rec.lp_weighted(&s.y, s.t));
        out.hminus1.push(hminus1_norm(&s.y)?);
        out.eta_violations += count_eta_violations(&s.y, &s.eta, &config.reg);
        out.checkpoints.push(Checkpoint {
            t: s.t,
            step: s.step_index,
            y: s.y.clone(),
        });
        Ok(())
    };

    checkpoint(&mut out, &state)?;
    if config.record_trace {
        out.trace.push(TraceEntry {
            t: 0.0,
            mu_step: 0,
            y: state.y.values().to_vec(),
        });
    }
    let mut since_detection: Option<usize> = None;
    if detect_extinction(&state.y, threshold) {
        out.extinction_time = Some(0.0);
        since_detection = Some(0);
    }

    for n in 0..n_steps {
        if since_detection.is_some_and(|k| k >= ABSORPTION_STEPS) {
            break;
        }
        let mu = drift.mu(n);
        let mut subs = Vec::new();
        let (y_new, stats) = with_retry(
            state.y.values(),
            dt,
            state.t,
            |y, h, t| y_substep(&g, y, mu.values(), drift.mu_tilde.values(), h, config, t),
            |t, s| subs.push((t, s.to_vec())),
        )?;
        out.newton_iterations += stats.iterations;
        if stats.substeps > 1 {
            out.split_steps += 1;
        }
        if config.record_trace {
            for (t, s) in subs.iter() {
                out.trace.push(TraceEntry {
                    t: *t,
                    mu_step: n,
                    y: s.clone(),
                });
            }
        }
        for (_, s) in &subs {
            out.min_value = out.min_value.min(s.iter().copied().fold(f64::INFINITY, f64::min));
        }
        let y = GridFunction::new(g, y_new)?;
        state = SolverState {
            t: (n + 1) as f64 * dt,
            eta: selection(&y, &config.reg),
            y,
            step_index: n + 1,
        };
        out.min_value = out.min_value.min(state.y.min());
        if config.record_trace {
            out.trace.push(TraceEntry {
                t: state.t,
                mu_step: n + 1,
                y: state.y.values().to_vec(),
            });
        }

        let l1 = state.y.lp_norm(1.0);
        let mut force = false;
        match since_detection.as_mut() {
            Some(k) => {
                *k += 1;
                let m = out.post_extinction_max_l1.get_or_insert(0.0);
                *m = m.max(l1);
            }
            None => {
                if l1 <= threshold * measure {
                    out.extinction_time = Some(state.t);
                    since_detection = Some(0);
                    force = true;
                }
            }
        }
        let last = n + 1 == n_steps || since_detection.is_some_and(|k| k >= ABSORPTION_STEPS);
        if force || last || (n + 1) % config.monitor_stride == 0 {
            checkpoint(&mut out, &state)?;
        }
    }
    out.final_state = state;
    Ok(out)
}

/// Lowest nodal value over the whole run.
pub fn positivity_monitor(run: &RunResult) -> f64 {
    run.min_value
}

/// `X = e^{-μ} Y`.
pub fn transform_to_x(y: &GridFunction, mu_t: &GridFunction) -> Result<GridFunction> {
    if y.grid() != mu_t.grid() {
        return Err(Error::Shape {
            expected: y.values().len(),
            got: mu_t.values().len(),
        });
    }
    Ok(y.zip_map(mu_t, |v, m| (-m).exp() * v))
}

/// Explicit Euler-Maruyama noise update `X (1 + Σ_k f_k dβ_k)`.
pub fn apply_ito_noise(x: &GridFunction, basis: &NoiseBasis, dbeta: &[f64]) -> Result<GridFunction> {
    if dbeta.len() != basis.count() {
        return Err(Error::Shape {
            expected: basis.count(),
            got: dbeta.len(),
        });
    }
    let mut v = x.values().to_vec();
    for (i, vi) in v.iter_mut().enumerate() {
        let s: f64 = basis
            .components()
            .iter()
            .zip(dbeta)
            .map(|(f, db)| f.values()[i] * db)
            .sum();
        *vi *= 1.0 + s;
    }
    GridFunction::new(*x.grid(), v)
}

/// One IMEX step of the direct Itô scheme: implicit drift
/// `X* - dt ΔΦ(e^μ X*) = X`, then the explicit noise update.
pub fn step_x_ito(
    x: &GridFunction,
    config: &SchemeConfig,
    basis: &NoiseBasis,
    mu: &GridFunction,
    dbeta: &[f64],
) -> Result<GridFunction> {
    config.validate()?;
    let g = *x.grid();
    let (xs, _) = x_drift_substep(&g, x.with_zero_boundary().values(), mu.values(), config.dt, config, 0.0)?;
    apply_ito_noise(&GridFunction::new(g, xs)?, basis, dbeta)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub times: Vec<f64>,
    pub discrepancy: Vec<f64>,
    pub max_discrepancy: f64,
}

/// Runs the `Y` chain and the direct `X` chain on one path and reports the
/// `H^{-1}` distance between `X` and `e^{-μ} Y` after every step.
pub fn consistency_check_transformation(
    x0: &GridFunction,
    basis: &NoiseBasis,
    path: &BrownianPath,
    config: &SchemeConfig,
    horizon: f64,
) -> Result<ConsistencyReport> {
    config.validate()?;
    let g = *x0.grid();
    let path = align_path(path, config.dt)?;
    let drift = DriftFields::new(basis, &path)?;
    let dt = config.dt;
    let n_steps = path.num_steps().min((horizon / dt * (1.0 + 1e-12)).floor() as usize);
    let mut y = x0.with_zero_boundary().into_values();
    let mut x = y.clone();
    let mut report = ConsistencyReport {
        times: vec![0.0],
        discrepancy: vec![0.0],
        max_discrepancy: 0.0,
    };
    for n in 0..n_steps {
        let mu = drift.mu(n);
        let t = n as f64 * dt;
        y = with_retry(
            &y,
            dt,
            t,
            |s, h, tt| y_substep(&g, s, mu.values(), drift.mu_tilde.values(), h, config, tt),
            |_, _| {},
        )?
        .0;
        let xs = with_retry(
            &x,
            dt,
            t,
            |s, h, tt| x_drift_substep(&g, s, mu.values(), h, config, tt),
            |_, _| {},
        )?
        .0;
        x = apply_ito_noise(&GridFunction::new(g, xs)?, basis, &path.increment(n))?.into_values();
        let mu_next = drift.mu(n + 1);
        let diff: Vec<f64> = (0..g.len())
            .map(|i| x[i] - (-mu_next.values()[i]).exp() * y[i])
            .collect();
        let d = hminus1_norm(&GridFunction::new(g, diff)?)?;
        report.times.push((n + 1) as f64 * dt);
        report.discrepancy.push(d);
        report.max_discrepancy = report.max_discrepancy.max(d);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionReport {
    pub c_hat: f64,
    pub initial_distance: f64,
    pub times: Vec<f64>,
    pub distances: Vec<f64>,
}

/// Smallest `Ĉ >= 0` with `‖Y_a - Y_b‖²_{H^{-1}} <= e^{Ĉ t} ‖x_a - x_b‖²_{H^{-1}}`
/// on the checkpoints of two runs sharing one path.
pub fn contraction_check(
    x0_a: &GridFunction,
    x0_b: &GridFunction,
    basis: &NoiseBasis,
    path: &BrownianPath,
    config: &SchemeConfig,
    horizon: f64,
) -> Result<ContractionReport> {
    let mut cfg = *config;
    cfg.check_positivity = false;
    // absorption stopping would desynchronize the two checkpoint series
    cfg.extinction_threshold = Some(f64::MIN_POSITIVE);
    let a = run_y(x0_a, basis, path, &cfg, horizon)?;
    let b = run_y(x0_b, basis, path, &cfg, horizon)?;
    let d0 = hminus1_norm(&x0_a.with_zero_boundary().zip_map(&x0_b.with_zero_boundary(), |u, v| u - v))?;
    let mut report = ContractionReport {
        c_hat: 0.0,
        initial_distance: d0,
        times: Vec::new(),
        distances: Vec::new(),
    };
    for (ca, cb) in a.checkpoints.iter().zip(&b.checkpoints) {
        let d = hminus1_norm(&ca.y.zip_map(&cb.y, |u, v| u - v))?;
        report.times.push(ca.t);
        report.distances.push(d);
        if ca.t > 0.0 && d0 > 0.0 && d > d0 {
            report.c_hat = report.c_hat.max((d * d / (d0 * d0)).ln() / ca.t);
        }
    }
    Ok(report)
}

/// `F(t) = ∫_0^t exp(μ_r + μ̃ r) dr` for spatially constant coefficients,
/// by the trapezoid rule on the path grid.
pub fn time_change_homogeneous(path: &BrownianPath, basis: &NoiseBasis, t: f64) -> Result<f64> {
    let Some(c) = basis.constant_values() else {
        return Err(Error::Contract("time change needs spatially constant coefficients".into()));
    };
    let mt: f64 = c.iter().map(|v| 0.5 * v * v).sum();
    let integrand = |i: usize| {
        let mu: f64 = -c.iter().zip(path.beta(i)).map(|(a, b)| a * b).sum::<f64>();
        (mu + mt * path.time(i)).exp()
    };
    let steps = path.step_of(t)?;
    let dt = path.dt();
    Ok((0..steps).map(|i| 0.5 * dt * (integrand(i) + integrand(i + 1))).sum())
}
