//! Constants, a priori inequalities and extinction predictors evaluated on
//! simulated runs.

use serde::Serialize;

use crate::error::{param, Error, Result};
use crate::grid::{gradient_norm, sobolev_q, torricelli_weight, GridFunction, SpatialGrid, TorricelliWeight};
use crate::noise::{check_hypothesis_h, find_flat_interval, DriftFields, NoiseBasis};
use crate::regularize::{psi_eps, Nonlinearity, RegParams};
use crate::solver::RunResult;

/// Safety margin in the flatness condition.
pub const FLATNESS_MARGIN: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExtinctionBoundParams {
    pub d: usize,
    pub p: f64,
    pub p_tilde: f64,
    pub tau_exp: f64,
    pub q: f64,
    pub alpha: f64,
    pub c_w: f64,
    pub c1_hat: f64,
    pub t0_hat: f64,
}

impl ExtinctionBoundParams {
    /// Assembles the exponent bundle. For `d = 1` the intermediate exponent
    /// is `(p + 1) / 2` so that it stays above one for every `p > 1`.
    pub fn new(d: usize, p: f64, q_for_d2: f64, c_w: f64, c1_hat: f64, t0_hat: f64) -> Result<Self> {
        let q = sobolev_q(d, q_for_d2)?;
        let floor = if d == 1 { 1.0 } else { d as f64 / 2.0 };
        if !(p > floor && p.is_finite()) {
            return param(format!("p must exceed {floor} in dimension {d}, got {p}"));
        }
        let p_tilde = (p + floor) / 2.0;
        let tau_exp = p - p_tilde;
        let star = p_tilde / (p_tilde - 1.0);
        let alpha = if q.is_infinite() { 0.0 } else { 2.0 * star / q };
        if !(alpha < 1.0) {
            return param(format!("alpha = {alpha} is not below 1 for d = {d}, p = {p}, q = {q}"));
        }
        if !(c_w >= 1.0 && c1_hat > 0.0 && t0_hat >= 0.0) {
            return param("C_w >= 1, C1 > 0 and t0 >= 0 are required");
        }
        Ok(Self {
            d,
            p,
            p_tilde,
            tau_exp,
            q,
            alpha,
            c_w,
            c1_hat,
            t0_hat,
        })
    }

    /// Default `p` per dimension.
    pub fn default_p(d: usize) -> f64 {
        if d == 1 {
            2.0
        } else {
            3.0
        }
    }

    pub fn p_tilde_star(&self) -> f64 {
        self.p_tilde / (self.p_tilde - 1.0)
    }
}

/// Per-checkpoint residuals of one inequality (`lhs - rhs`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyReport {
    pub pass: bool,
    pub worst_violation: f64,
    pub tolerance: f64,
    #[serde(skip)]
    pub times: Vec<f64>,
    #[serde(skip)]
    pub residuals: Vec<f64>,
}

impl EnergyReport {
    fn from_series(times: Vec<f64>, residuals: Vec<f64>, tolerance: f64) -> Self {
        let worst = residuals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let worst = if worst.is_finite() || residuals.iter().any(|v| v.is_nan()) {
            if residuals.iter().any(|v| v.is_nan()) {
                f64::INFINITY
            } else {
                worst
            }
        } else if residuals.is_empty() {
            0.0
        } else {
            worst
        };
        Self {
            pass: worst <= tolerance,
            worst_violation: worst,
            tolerance,
            times,
            residuals,
        }
    }

    /// Residual at the checkpoint closest to `t`.
    pub fn residual_near(&self, t: f64) -> Option<f64> {
        let i = self
            .times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))?
            .0;
        Some(self.residuals[i])
    }
}

/// `sup |Δ exp(μ_r + p μ̃ r)|` over interior nodes at path step `step`.
pub fn h1(drift: &DriftFields, step: usize, p: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return param(format!("p must be at least 1, got {p}"));
    }
    if step > drift.path.num_steps() {
        return Err(Error::Index {
            index: step,
            len: drift.path.num_steps() + 1,
        });
    }
    let g = *drift.grid();
    let t = drift.path.time(step);
    let mu = drift.mu(step);
    let e: Vec<f64> = (0..g.len())
        .map(|n| (mu.values()[n] + p * drift.mu_tilde.values()[n] * t).exp())
        .collect();
    if e.iter().any(|v| !v.is_finite()) {
        return Ok(f64::INFINITY);
    }
    let s = g
        .interior_nodes()
        .map(|n| g.laplacian_at(&e, n).abs())
        .fold(0.0, f64::max);
    Ok(if s.is_finite() { s } else { f64::INFINITY })
}

fn h1_series(drift: &DriftFields, upto: usize, p: f64) -> Result<Vec<f64>> {
    (0..=upto).map(|s| h1(drift, s, p)).collect()
}

fn trapezoid(f: &[f64], dt: f64) -> f64 {
    f.windows(2).map(|w| 0.5 * dt * (w[0] + w[1])).sum()
}

/// The finite-`(ε, δ)` moment bound `h₂(r, p, τ, δ, ε, x)`; `x` is
/// `‖x0‖_{p+τ}^{p+τ}` and the inner exponential integrals run up to `r`.
pub fn h2(
    drift: &DriftFields,
    step: usize,
    p: f64,
    params: &ExtinctionBoundParams,
    reg: &RegParams,
    x: f64,
) -> Result<f64> {
    let pt = p + params.tau_exp;
    let lead = params.c1_hat * params.c_w.powf(p);
    if reg.eps == 0.0 && reg.delta == 0.0 {
        return Ok(lead * x.powf(p / pt));
    }
    let dt = drift.path.dt();
    let h = h1_series(drift, step, pt)?;
    let cum: Vec<f64> = (0..=step).map(|k| trapezoid(&h[..=k], dt)).collect();
    let total = cum[step];
    let first = (reg.delta * total).exp() * x;
    let inner: Vec<f64> = (0..=step)
        .map(|k| (reg.delta * (total - cum[k])).exp() * h[k])
        .collect();
    let second = if reg.eps == 0.0 {
        0.0
    } else {
        reg.eps.powf(pt - 1.0) * trapezoid(&inner, dt)
    };
    Ok(lead * (first + second).powf(p / pt))
}

/// Rate `g(r)` of the singular ODE on an interval starting at `s_ref`.
/// `eta_sup` is `sup |φ_ε(Y_r)|` of the live run (used for `d = 1`).
#[allow(clippy::too_many_arguments)]
pub fn g_rate(
    drift: &DriftFields,
    s_ref: usize,
    r: usize,
    params: &ExtinctionBoundParams,
    reg: &RegParams,
    x: f64,
    eta_sup: f64,
) -> Result<f64> {
    if r < s_ref {
        return param(format!("g_rate needs r >= s, got r = {r}, s = {s_ref}"));
    }
    let ms = drift.mu(s_ref);
    let mr = drift.mu(r);
    let inf = mr
        .values()
        .iter()
        .zip(ms.values())
        .map(|(a, b)| (a - b).exp())
        .fold(f64::INFINITY, f64::min);
    if params.d == 1 {
        return Ok(inf * eta_sup);
    }
    let pt = params.p_tilde;
    let denom = h2(drift, r, pt, params, reg, x)?;
    Ok(inf / denom.powf(2.0 * params.p_tilde_star() / (pt * params.q)))
}

/// Largest `ε` (by bisection) such that every path increment below `ε` in
/// max norm keeps `Δ(w e^{μ_r - μ_s}) <= -margin e^{μ_r - μ_s}`.
pub fn flatness_threshold(basis: &NoiseBasis, weight: &TorricelliWeight) -> f64 {
    flatness_threshold_with_margin(basis, weight, FLATNESS_MARGIN)
}

pub fn flatness_threshold_with_margin(basis: &NoiseBasis, weight: &TorricelliWeight, margin: f64) -> f64 {
    let grad: f64 = basis.c2_norms().iter().map(|c| c.sup_grad).sum();
    let lap: f64 = basis.c2_norms().iter().map(|c| c.sup_lap).sum();
    let scale = basis.c2_norms().iter().map(|c| c.sup).sum::<f64>().max(1.0);
    if grad <= 1e-9 * scale && lap <= 1e-9 * scale {
        return f64::INFINITY;
    }
    let gw = gradient_norm(&weight.w).sup_abs();
    let c_w = weight.c_w;
    let ok = |e: f64| -1.0 + 2.0 * e * grad * gw + c_w * (e * e * grad * grad + e * lap) <= -margin;
    let mut lo = 0.0;
    let mut hi = 1.0;
    while ok(hi) {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// The bound curve `B(t) = ((q0 - K)^{1-α} - (1-α) g t ∨ 0)^{1/(1-α)} + K`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExtinctionBound {
    pub q0: f64,
    pub alpha: f64,
    pub g_floor: f64,
    pub k_eps: f64,
    pub l_star: f64,
}

impl ExtinctionBound {
    pub fn b(&self, t: f64) -> f64 {
        let g = self.g_floor;
        ode_h_closed_form(self.q0, self.alpha, self.k_eps, |s| g * s, t.max(0.0))
    }

    /// `(t, B(t))` at `n` equally spaced points of `[0, L*]`.
    pub fn table(&self, n: usize) -> Vec<(f64, f64)> {
        let n = n.max(2);
        (0..n)
            .map(|i| {
                let t = self.l_star * i as f64 / (n - 1) as f64;
                (t, self.b(t))
            })
            .collect()
    }
}

pub fn extinction_upper_bound(
    params: &ExtinctionBoundParams,
    x0_norm_p: f64,
    g_floor: f64,
) -> Result<ExtinctionBound> {
    extinction_upper_bound_with_offset(params, x0_norm_p, g_floor, 0.0)
}

/// As [`extinction_upper_bound`] with the finite-`ε` offset `K` carried.
pub fn extinction_upper_bound_with_offset(
    params: &ExtinctionBoundParams,
    x0_norm_p: f64,
    g_floor: f64,
    k_eps: f64,
) -> Result<ExtinctionBound> {
    if !(g_floor > 0.0 && g_floor.is_finite()) {
        return Err(Error::Contract(format!("g floor must be positive, got {g_floor}")));
    }
    if !(x0_norm_p >= 0.0) || !(k_eps >= 0.0) {
        return param("norms and offsets must be nonnegative");
    }
    let a = params.alpha;
    let q0 = params.c1_hat * params.c_w * x0_norm_p + k_eps;
    let l_star = (q0 - k_eps).powf(1.0 - a) / ((1.0 - a) * g_floor);
    Ok(ExtinctionBound {
        q0,
        alpha: a,
        g_floor,
        k_eps,
        l_star,
    })
}

/// Lower bound for `g` on a flat interval of flatness `eps_used`.
pub fn g_floor(params: &ExtinctionBoundParams, basis: &NoiseBasis, eps_used: f64, x0_norm_p: f64) -> f64 {
    if params.d == 1 {
        let spread = if basis.count() == 0 { 0.0 } else { eps_used * basis.sup_sum() };
        (-spread).exp() / basis.grid().measure()
    } else {
        let m = (params.c1_hat * params.c_w * x0_norm_p).max(1.0);
        (1.0 / (2.0 * m)).powf(2.0 * params.p_tilde_star() / params.q)
    }
}

/// Pathwise moment constant: twice the largest sampled Hölder factor
/// `(∫ e^{-r(μ_t + μ̃ t)})^{τ/(p+τ)}` with `r = p (p+τ) / τ`, and at least 2.
pub fn c1_hat(drift: &DriftFields, p: f64, tau: f64, max_samples: usize) -> Result<f64> {
    if !(tau > 0.0) {
        return param(format!("tau must be positive, got {tau}"));
    }
    let r = p * (p + tau) / tau;
    let n = drift.path.num_steps();
    let stride = (n / max_samples.max(1)).max(1);
    let ts: Vec<f64> = (0..=n).step_by(stride).map(|k| drift.path.time(k)).collect();
    let rep = check_hypothesis_h(&drift.basis, &drift.path, r, &ts)?;
    Ok(2.0 * rep.max_integral.powf(tau / (p + tau)).max(1.0))
}

/// `((q0 - K)^{1-α} - (1-α) G(t) ∨ 0)^{1/(1-α)} + K` with `G = ∫_0^t g`.
pub fn ode_h_closed_form(q0: f64, alpha: f64, k: f64, g_integral: impl Fn(f64) -> f64, t: f64) -> f64 {
    let base = (q0 - k).max(0.0).powf(1.0 - alpha) - (1.0 - alpha) * g_integral(t);
    base.max(0.0).powf(1.0 / (1.0 - alpha)) + k
}

/// RK4 for `f' = -g(t) ((f - K) ∨ 0)^α`, clamped at `K`.
pub fn ode_bound_oracle(
    q0: f64,
    alpha: f64,
    k: f64,
    g: impl Fn(f64) -> f64,
    horizon: f64,
    dt: f64,
) -> Result<Vec<(f64, f64)>> {
    if !(dt > 0.0 && dt.is_finite()) {
        return param(format!("dt must be positive, got {dt}"));
    }
    if !(horizon >= 0.0) {
        return param("horizon must be nonnegative");
    }
    let rhs = |t: f64, f: f64| -g(t) * (f - k).max(0.0).powf(alpha);
    let steps = (horizon / dt).ceil() as usize;
    let mut out = Vec::with_capacity(steps + 1);
    let mut f = q0;
    out.push((0.0, f));
    for i in 0..steps {
        let t = i as f64 * dt;
        let h = dt.min(horizon - t);
        let k1 = rhs(t, f);
        let k2 = rhs(t + h / 2.0, (f + h / 2.0 * k1).max(k));
        let k3 = rhs(t + h / 2.0, (f + h / 2.0 * k2).max(k));
        let k4 = rhs(t + h, (f + h * k3).max(k));
        f = (f + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)).max(k);
        out.push((t + h, f));
    }
    Ok(out)
}

fn require_trace(run: &RunResult) -> Result<()> {
    if run.has_trace() {
        Ok(())
    } else {
        Err(Error::Contract("monitor needs a run recorded with record_trace".into()))
    }
}

fn laplacian_interior(g: &SpatialGrid, full: &[f64]) -> Vec<(usize, f64)> {
    g.interior_nodes().map(|n| (n, g.laplacian_at(full, n))).collect()
}

/// Weighted `L^p` decay: `∫ e^{pμ̃t}|Y_t|^p <= ∫|Y_0|^p + Slack(t) + tol`
/// after every accepted step, where `Slack` collects the `ε`- and
/// `δ`-corrections with the exact discrete weight of the scheme.
pub fn monitor_weighted_lp(run: &RunResult, p: f64, tol: f64) -> Result<EnergyReport> {
    require_trace(run)?;
    if !(p >= 1.0) {
        return param(format!("p must be at least 1, got {p}"));
    }
    let g = run.grid;
    let cell = g.cell_volume();
    let reg = run.config.reg;
    let mt = run.drift.mu_tilde.values();
    let eps_coef = if reg.tau == 0.0 {
        reg.eps.powf(p - 1.0)
    } else {
        p * (reg.eps + reg.tau).powf(p - 1.0)
    };
    // the projected datum has no more mass than x0, so this base is stricter
    let base: f64 = run.trace[0].y.iter().enumerate().map(|(n, v)| v.abs().powf(p) * g.quad_weight(n)).sum();
    let lhs = |y: &[f64], t: f64| -> f64 {
        (0..g.len())
            .map(|n| (p * mt[n] * t).exp() * y[n].abs().powf(p) * g.quad_weight(n))
            .sum()
    };
    let mut slack = 0.0;
    let mut times = vec![run.trace[0].t];
    let mut res = vec![lhs(&run.trace[0].y, run.trace[0].t) - base];
    for w in run.trace.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let dt = b.t - a.t;
        let mu = run.drift.mu(a.mu_step);
        let rho: Vec<f64> = (0..g.len())
            .map(|n| (mu.values()[n] + mt[n] * a.t + (p - 1.0) * mt[n] * b.t).exp())
            .collect();
        let mut s = 0.0;
        for (n, l) in laplacian_interior(&g, &rho) {
            s += eps_coef * l.abs() + reg.delta * b.y[n].abs().powf(p) * l.max(0.0);
        }
        slack += dt * s * cell;
        times.push(b.t);
        res.push(lhs(&b.y, b.t) - base - slack);
    }
    Ok(EnergyReport::from_series(times, res, tol))
}

/// Energy inequality with weight `ϱ` on `[u, v]`:
/// `∫ψ(Y_t)ϱ + ∫∫ϱe^μ|∇φ(Y)|² <= ∫ψ(Y_u)ϱ + ½∫∫φ(Y)²Δ(ϱe^μ) + δ∫∫ψ(Y)Δ(ϱe^μ)`
/// along the trace, with tolerance `tol (v - u)`.
pub fn monitor_energy_l1(run: &RunResult, weight: &GridFunction, u: f64, v: f64, tol: f64) -> Result<EnergyReport> {
    require_trace(run)?;
    if weight.grid() != &run.grid {
        return Err(Error::Contract("weight lives on a different grid".into()));
    }
    if weight.min() < 0.0 {
        return param("energy weight must be nonnegative");
    }
    if !(v >= u) {
        return param("energy interval must satisfy u <= v");
    }
    let g = run.grid;
    let cell = g.cell_volume();
    let reg = run.config.reg;
    let nl = reg.nonlinearity();
    let rho = weight.values();
    let slack_t = 1e-9 * run.config.dt;
    let psi_mass = |y: &[f64]| -> f64 {
        g.interior_nodes()
            .map(|n| psi_eps(y[n], reg.eps) * rho[n] * cell)
            .sum()
    };
    let Some(start) = run.trace.iter().position(|e| e.t >= u - slack_t) else {
        return Ok(EnergyReport::from_series(Vec::new(), Vec::new(), tol * (v - u)));
    };
    let q_u = psi_mass(&run.trace[start].y);
    let mut acc_diss = 0.0;
    let mut acc_rhs = 0.0;
    let mut times = vec![run.trace[start].t];
    let mut res = vec![0.0];
    let [nx, ny] = g.nodes_per_axis();
    for w in run.trace[start..].windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if b.t > v + slack_t {
            break;
        }
        let dt = b.t - a.t;
        let mu = run.drift.mu(a.mu_step);
        let rp: Vec<f64> = (0..g.len()).map(|n| rho[n] * mu.values()[n].exp()).collect();
        let phi: Vec<f64> = b.y.iter().map(|&y| nl.value(y)).collect();
        let mut diss = 0.0;
        for axis in 0..g.dim() {
            let h2 = g.spacing(axis).powi(2);
            let (step, limit) = if axis == 0 { (1, nx) } else { (nx, ny) };
            for n in 0..g.len() {
                let (i, j) = g.ij(n);
                let pos = if axis == 0 { i } else { j };
                if pos + 1 < limit {
                    let m = n + step;
                    diss += 0.5 * (rp[n] + rp[m]) * (phi[m] - phi[n]).powi(2) / h2;
                }
            }
        }
        let mut rhs = 0.0;
        for (n, l) in laplacian_interior(&g, &rp) {
            rhs += 0.5 * phi[n] * phi[n] * l + reg.delta * psi_eps(b.y[n], reg.eps) * l;
        }
        acc_diss += diss * cell * dt;
        acc_rhs += rhs * cell * dt;
        times.push(b.t);
        res.push(psi_mass(&b.y) + acc_diss - q_u - acc_rhs);
    }
    Ok(EnergyReport::from_series(times, res, tol * (v - u)))
}

/// Dissipation rate `∫ϱe^μ|∇φ(Y)|²` at every trace state (diagnostic).
pub fn dissipation_series(run: &RunResult, weight: &GridFunction) -> Result<Vec<(f64, f64)>> {
    require_trace(run)?;
    let g = run.grid;
    let nl = run.config.reg.nonlinearity();
    let [nx, ny] = g.nodes_per_axis();
    Ok(run
        .trace
        .iter()
        .map(|e| {
            let mu = run.drift.mu(e.mu_step);
            let phi: Vec<f64> = e.y.iter().map(|&y| nl.value(y)).collect();
            let mut d = 0.0;
            for axis in 0..g.dim() {
                let h2 = g.spacing(axis).powi(2);
                let (step, limit) = if axis == 0 { (1, nx) } else { (nx, ny) };
                for n in 0..g.len() {
                    let (i, j) = g.ij(n);
                    let pos = if axis == 0 { i } else { j };
                    if pos + 1 < limit {
                        let m = n + step;
                        let r = 0.5 * (weight.values()[n] * mu.values()[n].exp() + weight.values()[m] * mu.values()[m].exp());
                        d += r * (phi[m] - phi[n]).powi(2) / h2;
                    }
                }
            }
            (e.t, d * g.cell_volume())
        })
        .collect())
}

/// Nodal check of `X_t <= exp(-μ_t - μ̃ t) x0_sup + tol` on every checkpoint,
/// with `X = e^{-μ} Y`.
pub fn supersolution_check(run: &RunResult, x0_sup: f64, tol: f64) -> Result<EnergyReport> {
    if !(x0_sup >= 0.0) {
        return param("x0_sup must be nonnegative");
    }
    let mt = run.drift.mu_tilde.values();
    let mut times = Vec::with_capacity(run.checkpoints.len());
    let mut res = Vec::with_capacity(run.checkpoints.len());
    for c in &run.checkpoints {
        let mu = run.drift.mu(c.step);
        let worst = c
            .y
            .values()
            .iter()
            .enumerate()
            .map(|(n, &y)| {
                let m = mu.values()[n];
                (-m).exp() * y - (-m - mt[n] * c.t).exp() * x0_sup
            })
            .fold(f64::NEG_INFINITY, f64::max);
        times.push(c.t);
        res.push(worst);
    }
    Ok(EnergyReport::from_series(times, res, tol))
}

/// `K(t) = e^{-μ̃ t} M + ν t`, the supersolution of the decay bound.
pub fn supersolution_field(mu_tilde: &GridFunction, m: f64, nu: f64, t: f64) -> GridFunction {
    mu_tilde.map(|v| (-v * t).exp() * m + nu * t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtinctionCheck {
    pub verdict: Verdict,
    pub pass: bool,
    pub worst_violation: f64,
    pub tolerance: f64,
    pub s: Option<f64>,
    pub l_star: f64,
    pub eps_star: f64,
    pub g_floor: f64,
    pub tau0: Option<f64>,
    pub tau0_bound: Option<f64>,
    pub bound: Option<ExtinctionBound>,
}

/// Weighted mass `∫ψ_ε(Y) w e^{-μ_s}` of one state.
pub fn weighted_mass(y: &GridFunction, w: &GridFunction, mu_s: &GridFunction, eps: f64) -> f64 {
    let g = y.grid();
    (0..g.len())
        .map(|n| psi_eps(y.values()[n], eps) * w.values()[n] * (-mu_s.values()[n]).exp() * g.quad_weight(n))
        .sum()
}

/// Locates a flat interval of the required length, then checks the weighted
/// mass against the bound curve and the detected extinction time against
/// `s + L*`.
pub fn predict_and_verify_extinction(
    run: &RunResult,
    params: &ExtinctionBoundParams,
    tol: f64,
    tol_time: f64,
) -> Result<ExtinctionCheck> {
    let g = run.grid;
    let basis = &run.drift.basis;
    let path = &run.drift.path;
    let reg = run.config.reg;
    let weight = torricelli_weight(&g)?;
    let eps_star = flatness_threshold(basis, &weight);
    let sup_f = basis.sup_sum();
    let eps_used = if sup_f > 0.0 {
        eps_star.min(std::f64::consts::LN_2 / sup_f)
    } else {
        eps_star
    };
    let x0n = run.x0.lp_norm(params.p);
    let gf = g_floor(params, basis, eps_used, x0n);
    let provisional = extinction_upper_bound(params, x0n, gf)?;
    let l_star = provisional.l_star;
    let mut out = ExtinctionCheck {
        verdict: Verdict::Inconclusive,
        pass: false,
        worst_violation: 0.0,
        tolerance: tol,
        s: None,
        l_star,
        eps_star,
        g_floor: gf,
        tau0: run.extinction_time,
        tau0_bound: None,
        bound: None,
    };
    let search_eps = if eps_used.is_finite() { eps_used } else { 1.0 };
    let flat = if l_star == 0.0 {
        Some((params.t0_hat, params.t0_hat))
    } else {
        find_flat_interval(path, params.t0_hat, l_star, search_eps)
    };
    let Some((s, _)) = flat else {
        return Ok(out);
    };
    let s_step = path.step_of(s)?;
    let mu_s = run.drift.mu(s_step);
    let k_eps = weight.c_w * mu_s.map(|m| (-m).exp()).sup_abs() * reg.eps / 2.0;
    let bound = extinction_upper_bound_with_offset(params, x0n, gf, k_eps)?;
    let tau0_bound = s + bound.l_star + tol_time;
    out.s = Some(s);
    out.tau0_bound = Some(tau0_bound);
    out.bound = Some(bound);

    let last_t = run.times.last().copied().unwrap_or(0.0);
    let mut worst = f64::NEG_INFINITY;
    for c in &run.checkpoints {
        if c.t + 1e-12 < s || c.t > s + bound.l_star + 1e-12 {
            continue;
        }
        let q = weighted_mass(&c.y, &weight.w, &mu_s, reg.eps);
        worst = worst.max(q - bound.b(c.t - s));
    }
    out.worst_violation = if worst.is_finite() { worst } else { 0.0 };
    let mass_ok = out.worst_violation <= tol;
    let verdict = match run.extinction_time {
        Some(t0) if t0 <= tau0_bound && mass_ok => Verdict::Pass,
        Some(_) => Verdict::Fail,
        None if last_t >= tau0_bound || !mass_ok => Verdict::Fail,
        None => Verdict::Inconclusive,
    };
    out.pass = verdict == Verdict::Pass;
    out.verdict = verdict;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{sample_path, BrownianPath, Profile};
    use crate::solver::{run_y, SchemeConfig};

    fn unit(cells: usize) -> SpatialGrid {
        SpatialGrid::unit_interval(cells).unwrap()
    }

    fn lin_basis(g: SpatialGrid) -> NoiseBasis {
        NoiseBasis::from_profiles(g, &[Profile::Linear { axis: 0, scale: 1.0, offset: 0.0 }]).unwrap()
    }

    #[test]
    fn exponent_table() {
        let p = ExtinctionBoundParams::new(3, 2.5, 6.0, 1.0, 1.0, 0.0).unwrap();
        assert!((p.p_tilde - 2.0).abs() < 1e-15);
        assert!((p.alpha - 2.0 / 3.0).abs() < 1e-15);
        let d1 = ExtinctionBoundParams::new(1, 2.0, 6.0, 1.125, 1.0, 0.0).unwrap();
        assert_eq!(d1.alpha, 0.0);
        assert!(d1.p_tilde > 1.0 && d1.tau_exp > 0.0);
        let d2 = ExtinctionBoundParams::new(2, 3.0, 6.0, 1.0, 1.0, 0.0).unwrap();
        assert!((d2.alpha - 2.0 / 3.0).abs() < 1e-15);
        assert!(ExtinctionBoundParams::new(3, 1.5, 6.0, 1.0, 1.0, 0.0).is_err());
        assert!(ExtinctionBoundParams::new(2, 1.5, 6.0, 1.0, 1.0, 0.0).is_err());
        assert!(ExtinctionBoundParams::new(1, 1.0, 6.0, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn alpha_tends_to_one_as_p_approaches_half_dimension() {
        for d in [3usize, 4, 5] {
            let mut prev = 0.0;
            for k in (1..=40).rev() {
                let p = d as f64 / 2.0 + 0.05 * k as f64;
                let a = ExtinctionBoundParams::new(d, p, 6.0, 1.0, 1.0, 0.0).unwrap().alpha;
                assert!(a > prev && a < 1.0);
                prev = a;
            }
            assert!(prev > 0.9);
        }
    }

    #[test]
    fn h1_values() {
        let g = unit(200);
        let none = NoiseBasis::none(g);
        let p0 = sample_path(&none, 1.0, 0.01, 0).unwrap();
        let d0 = DriftFields::new(&none, &p0).unwrap();
        assert_eq!(h1(&d0, 50, 1.0).unwrap(), 0.0);

        let c = NoiseBasis::from_profiles(g, &[Profile::Constant { value: 0.7 }]).unwrap();
        let pc = sample_path(&c, 1.0, 0.01, 1).unwrap();
        let dc = DriftFields::new(&c, &pc).unwrap();
        assert!(h1(&dc, 70, 2.0).unwrap() < 1e-9);

        let lin = lin_basis(g);
        let pl = sample_path(&lin, 1.0, 0.01, 2).unwrap();
        let dl = DriftFields::new(&lin, &pl).unwrap();
        let step = 100;
        let (b, t) = (pl.beta(step)[0], pl.time(step));
        let exact = (1..200)
            .map(|i| {
                let x = i as f64 / 200.0;
                let e = (-x * b + x * x * t / 2.0).exp();
                (e * ((-b + x * t).powi(2) + t)).abs()
            })
            .fold(0.0, f64::max);
        let got = h1(&dl, step, 1.0).unwrap();
        assert!((got - exact).abs() < 1e-3 * exact.max(1.0), "{got} vs {exact}");
    }

    #[test]
    fn h2_limits() {
        let g = unit(32);
        let none = NoiseBasis::none(g);
        let p = sample_path(&none, 1.0, 0.01, 0).unwrap();
        let d = DriftFields::new(&none, &p).unwrap();
        let params = ExtinctionBoundParams::new(1, 2.0, 6.0, 1.125, 3.0, 0.0).unwrap();
        let x: f64 = 0.7;
        let limit = 3.0 * 1.125f64.powf(2.0) * x.powf(2.0 / (2.0 + params.tau_exp));
        let zero = RegParams { eps: 0.0, delta: 0.0, tau: 0.0 };
        assert_eq!(h2(&d, 40, 2.0, &params, &zero, x).unwrap(), limit);
        let r1 = RegParams::new(1e-3, 0.0, 0.0).unwrap();
        let r2 = RegParams::new(1e-3, 0.1, 0.0).unwrap();
        assert!((h2(&d, 40, 2.0, &params, &r1, x).unwrap() - limit).abs() < 1e-14);
        assert_eq!(h2(&d, 40, 2.0, &params, &r1, x).unwrap(), h2(&d, 40, 2.0, &params, &r2, x).unwrap());

        let c = NoiseBasis::from_profiles(g, &[Profile::Constant { value: 1.0 }]).unwrap();
        let pc = sample_path(&c, 1.0, 0.01, 3).unwrap();
        let dc = DriftFields::new(&c, &pc).unwrap();
        let v = h2(&dc, 60, 2.0, &params, &r2, x).unwrap();
        assert!((v - limit).abs() < 1e-9 * limit);
    }

    #[test]
    fn g_rate_cases() {
        let g = unit(16);
        let lin = lin_basis(g);
        let flat = BrownianPath::from_values(0.1, vec![vec![0.0], vec![0.4], vec![0.4]], 0).unwrap();
        let d = DriftFields::new(&lin, &flat).unwrap();
        let reg = RegParams { eps: 0.0, delta: 0.0, tau: 0.0 };
        let p1 = ExtinctionBoundParams::new(1, 2.0, 6.0, 1.125, 1.0, 0.0).unwrap();
        assert_eq!(g_rate(&d, 1, 2, &p1, &reg, 1.0, 0.0).unwrap(), 0.0);
        assert_eq!(g_rate(&d, 1, 2, &p1, &reg, 1.0, 1.0).unwrap(), 1.0);
        assert!(g_rate(&d, 2, 1, &p1, &reg, 1.0, 1.0).is_err());

        let g2 = SpatialGrid::rectangle((0.0, 1.0), (0.0, 1.0), 9, 9).unwrap();
        let b2 = NoiseBasis::from_profiles(g2, &[Profile::Constant { value: 1.0 }]).unwrap();
        let d2 = DriftFields::new(&b2, &flat).unwrap();
        let p2 = ExtinctionBoundParams::new(2, 3.0, 6.0, 1.0, 1.0, 0.0).unwrap();
        // C1 C_w^p x^{p/(p+τ)} = 1 makes the denominator 1
        let v = g_rate(&d2, 1, 2, &p2, &reg, 1.0, 1.0).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn flatness_cases() {
        let g = unit(200);
        let w = torricelli_weight(&g).unwrap();
        assert!(flatness_threshold(&NoiseBasis::none(g), &w).is_infinite());
        let c = NoiseBasis::from_profiles(g, &[Profile::Constant { value: 3.0 }]).unwrap();
        assert!(flatness_threshold(&c, &w).is_infinite());
        let lin = lin_basis(g);
        let e = flatness_threshold(&lin, &w);
        let exact = (-1.0 + (1.0 + 4.0 * 1.125 * 0.95f64).sqrt()) / (2.0 * 1.125);
        assert!((e - exact).abs() < 1e-6, "{e} vs {exact}");
        assert!(flatness_threshold_with_margin(&lin, &w, FLATNESS_MARGIN / 2.0) > e);
    }

    #[test]
    fn bound_curve_example() {
        let params = ExtinctionBoundParams {
            d: 3,
            p: 2.5,
            p_tilde: 2.0,
            tau_exp: 0.5,
            q: 8.0,
            alpha: 0.5,
            c_w: 1.0,
            c1_hat: 1.0,
            t0_hat: 0.0,
        };
        let b = extinction_upper_bound(&params, 1.0, 1.0).unwrap();
        assert_eq!(b.l_star, 2.0);
        assert_eq!(b.b(2.0), 0.0);
        for t in [0.0, 0.3, 1.0, 1.7, 2.5] {
            let exact = (1.0f64 - t / 2.0).max(0.0).powi(2);
            assert!((b.b(t) - exact).abs() < 1e-15);
        }
        assert_eq!(extinction_upper_bound(&params, 0.0, 1.0).unwrap().l_star, 0.0);
        assert!(extinction_upper_bound(&params, 2.0, 1.0).unwrap().l_star > 2.0);
        assert!(extinction_upper_bound(&params, 1.0, 0.0).is_err());
        assert_eq!(b.table(100).len(), 100);
    }

    #[test]
    fn ode_closed_form_cases() {
        let h = |t| ode_h_closed_form(1.0, 0.5, 0.0, |s| s, t);
        assert_eq!(h(0.0), 1.0);
        assert_eq!(h(2.0), 0.0);
        assert!((h(1.0) - 0.25).abs() < 1e-15);
        for t in [0.0, 1.0, 5.0] {
            assert_eq!(ode_h_closed_form(0.4, 0.5, 0.4, |s| s, t), 0.4);
        }
    }

    #[test]
    fn ode_oracle_cases() {
        let traj = ode_bound_oracle(1.0, 0.5, 0.0, |_| 1.0, 1.8, 1e-3).unwrap();
        for &(t, f) in &traj {
            let exact = ode_h_closed_form(1.0, 0.5, 0.0, |s| s, t);
            assert!((f - exact).abs() < 1e-6, "t={t}");
        }
        let flat = ode_bound_oracle(0.7, 0.5, 0.0, |_| 0.0, 1.0, 0.1).unwrap();
        assert!(flat.iter().all(|&(_, f)| f == 0.7));
        let clamp = ode_bound_oracle(1.0, 0.5, 0.3, |_| 5.0, 3.0, 1e-2).unwrap();
        assert!(clamp.iter().all(|&(_, f)| f >= 0.3));
        assert!(ode_bound_oracle(1.0, 0.5, 0.0, |_| 1.0, 1.0, 0.0).is_err());
    }

    fn det_run(cells: usize, eps: f64, trace: bool, horizon: f64) -> RunResult {
        let g = unit(cells);
        let b = NoiseBasis::none(g);
        let mut cfg = SchemeConfig::new(eps / cells as f64, RegParams::new(eps, eps * eps, 0.0).unwrap());
        cfg.record_trace = trace;
        let p = sample_path(&b, horizon, cfg.dt, 0).unwrap();
        run_y(&GridFunction::constant(g, 1.0), &b, &p, &cfg, horizon).unwrap()
    }

    #[test]
    fn deterministic_monitors_pass() {
        let run = det_run(32, 4e-3, true, 0.3);
        let lp = monitor_weighted_lp(&run, 2.0, 1e-10).unwrap();
        assert!(lp.pass, "{}", lp.worst_violation);
        // plain L2 is non-increasing
        for w in run.l2.windows(2) {
            assert!(w[1] <= w[0] + 1e-10);
        }
        let w = torricelli_weight(&run.grid).unwrap();
        let te = run.extinction_time.unwrap();
        let en = monitor_energy_l1(&run, &w.w, 0.0, te, 1e-6).unwrap();
        assert!(en.pass, "{}", en.worst_violation);
        let diss = dissipation_series(&run, &w.w).unwrap();
        assert!(diss.iter().filter(|(t, _)| *t < te * 0.9).all(|(_, d)| *d > 0.0));
        let sup = supersolution_check(&run, 1.0, 1e-12).unwrap();
        assert!(sup.pass);
    }

    #[test]
    fn zero_datum_monitors_are_trivial() {
        let g = unit(16);
        let b = lin_basis(g);
        let mut cfg = SchemeConfig::new(1e-3, RegParams::new(1e-2, 1e-4, 0.0).unwrap());
        cfg.record_trace = true;
        let p = sample_path(&b, 0.05, 1e-3, 4).unwrap();
        let run = run_y(&GridFunction::zeros(g), &b, &p, &cfg, 0.05).unwrap();
        let lp = monitor_weighted_lp(&run, 2.0, 0.0).unwrap();
        assert!(lp.residuals.iter().all(|&r| r <= 0.0));
        let en = monitor_energy_l1(&run, &GridFunction::constant(g, 1.0), 0.0, 0.05, 0.0).unwrap();
        assert!(en.residuals.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn supersolution_bound_value() {
        let g = unit(8);
        let b = NoiseBasis::from_profiles(g, &[Profile::Constant { value: 1.0 }]).unwrap();
        let mt = crate::noise::mu_tilde(&b);
        // at β = 0 and t = 2 the bound is e^{-1} M
        let k = supersolution_field(&mt, 1.0, 0.0, 2.0);
        assert!(k.values().iter().all(|&v| (v - (-1.0f64).exp()).abs() < 1e-15));
        let k0 = supersolution_field(&mt, 3.0, 0.0, 0.0);
        assert!(k0.values().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn deterministic_extinction_prediction() {
        let run = det_run(32, 4e-3, false, 1.2);
        let c_w = torricelli_weight(&run.grid).unwrap().c_w;
        let params = ExtinctionBoundParams::new(1, 2.0, 6.0, c_w, 1.0, 0.0).unwrap();
        let chk = predict_and_verify_extinction(&run, &params, 1e-4, 2.0 * run.config.dt).unwrap();
        assert_eq!(chk.verdict, Verdict::Pass, "{chk:?}");
        assert!(chk.eps_star.is_infinite());
    }

    #[test]
    fn rough_short_path_is_inconclusive() {
        let g = unit(16);
        let b = NoiseBasis::from_profiles(g, &[Profile::Linear { axis: 0, scale: 4.0, offset: 0.0 }]).unwrap();
        let cfg = SchemeConfig::new(1e-3, RegParams::new(1e-2, 1e-4, 0.0).unwrap());
        let p = sample_path(&b, 0.05, 1e-3, 9).unwrap();
        let run = run_y(&GridFunction::constant(g, 1.0), &b, &p, &cfg, 0.05).unwrap();
        let params = ExtinctionBoundParams::new(1, 2.0, 6.0, 1.125, 2.0, 0.0).unwrap();
        let chk = predict_and_verify_extinction(&run, &params, 1e-4, 2e-3).unwrap();
        assert_eq!(chk.verdict, Verdict::Inconclusive);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn closed_form_monotone_and_absorbing(q0 in 0.1f64..3.0, alpha in 0.05f64..0.95, kf in 0.0f64..0.9, g in 0.1f64..3.0) {
                let k = kf * q0;
                let t_ext = (q0 - k).powf(1.0 - alpha) / ((1.0 - alpha) * g);
                let mut prev = f64::INFINITY;
                for i in 0..=50 {
                    let t = 2.0 * t_ext * i as f64 / 50.0;
                    let h = ode_h_closed_form(q0, alpha, k, |s| g * s, t);
                    prop_assert!(h <= prev + 1e-15);
                    if t >= t_ext {
                        prop_assert!((h - k).abs() <= 1e-12 * q0.max(1.0));
                    }
                    prev = h;
                }
            }

            #[test]
            fn bound_monotone_in_norm(x in 0.01f64..5.0, t in 0.0f64..10.0, alpha in 0.0f64..0.9) {
                let params = ExtinctionBoundParams {
                    d: 3, p: 2.5, p_tilde: 2.0, tau_exp: 0.5, q: 6.0, alpha,
                    c_w: 1.0, c1_hat: 1.0, t0_hat: 0.0,
                };
                let a = extinction_upper_bound(&params, x, 0.7).unwrap();
                let b = extinction_upper_bound(&params, 2.0 * x, 0.7).unwrap();
                prop_assert!(b.b(t) >= a.b(t));
                prop_assert!(a.b(t + 0.1) <= a.b(t));
                prop_assert!(a.b(a.l_star).abs() < 1e-9 * a.q0.max(1.0));
            }
        }
    }
}
