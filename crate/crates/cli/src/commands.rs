//! The four subcommands. Each validates the whole configuration before it
//! computes or writes anything.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use btw_core::estimates::{
    c1_hat, extinction_upper_bound, flatness_threshold, g_floor, monitor_energy_l1, monitor_weighted_lp,
    ode_bound_oracle, ode_h_closed_form, predict_and_verify_extinction, supersolution_check, EnergyReport,
    ExtinctionBoundParams, ExtinctionCheck, Verdict,
};
use btw_core::grid::{hminus1_norm, laplacian_apply, torricelli_weight};
use btw_core::noise::DriftFields;
use btw_core::regularize::{phi_eps, psi_eps, resolvent_j, zeta};
use btw_core::solver::{consistency_check_transformation, run_y, RunResult};
use btw_core::{GridFunction, NoiseBasis, SpatialGrid};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{RunConfig, SeedRange};
use crate::CliError;

/// Grid, coefficients and datum shared by every replica of one config.
struct Prepared {
    grid: SpatialGrid,
    basis: NoiseBasis,
    x0: GridFunction,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared, CliError> {
    cfg.validate()?;
    let as_validation = |e: CliError| match e {
        CliError::Core(c) => CliError::Validation(c.to_string()),
        other => other,
    };
    let grid = cfg.build_grid().map_err(as_validation)?;
    let basis = cfg.build_basis(&grid).map_err(as_validation)?;
    let x0 = cfg.initial.build(&grid).map_err(as_validation)?;
    if cfg.scheme.check_positivity && x0.min() < 0.0 {
        return Err(CliError::Validation("initial datum must be nonnegative".into()));
    }
    if cfg.noise.path_csv.is_some() {
        cfg.build_path(&basis, cfg.seed).map_err(as_validation)?;
    }
    Ok(Prepared { grid, basis, x0 })
}

fn run_seed(cfg: &RunConfig, prep: &Prepared, seed: u64, trace: bool) -> Result<RunResult, CliError> {
    let path = cfg.build_path(&prep.basis, seed)?;
    let mut scheme = cfg.scheme;
    scheme.record_trace |= trace;
    Ok(run_y(&prep.x0, &prep.basis, &path, &scheme, cfg.horizon)?)
}

fn bound_params(cfg: &RunConfig, d: usize, drift: Option<&DriftFields>, c_w: f64) -> Result<ExtinctionBoundParams, CliError> {
    let p = cfg.bound.p.unwrap_or_else(|| ExtinctionBoundParams::default_p(d));
    let provisional = ExtinctionBoundParams::new(d, p, cfg.bound.q_for_d2, c_w, 1.0, cfg.bound.t0_hat)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let c1 = match (cfg.bound.c1_hat, drift) {
        (Some(c), _) => c,
        (None, Some(dr)) if dr.basis.count() > 0 => {
            let tau = provisional.tau_exp;
            c1_hat(dr, 1.0, tau, 200)?.max(c1_hat(dr, provisional.p_tilde, tau, 200)?)
        }
        _ => 1.0,
    };
    Ok(ExtinctionBoundParams { c1_hat: c1, ..provisional })
}

#[derive(Debug, Clone, Serialize)]
pub struct LpResult {
    pub p: f64,
    #[serde(flatten)]
    pub report: EnergyReport,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct MonitorResults {
    pub weighted_lp: Vec<LpResult>,
    pub energy: Option<EnergyReport>,
    pub supersolution: Option<EnergyReport>,
    /// Largest `H^{-1}` gap between the direct `X` chain and `e^{-μ} Y`.
    pub consistency: Option<f64>,
    pub extinction_bound: Option<ExtinctionCheck>,
}

fn evaluate_monitors(cfg: &RunConfig, prep: &Prepared, run: &RunResult) -> Result<MonitorResults, CliError> {
    let m = &cfg.monitors;
    let mut out = MonitorResults::default();
    for &p in &m.weighted_lp {
        out.weighted_lp.push(LpResult {
            p,
            report: monitor_weighted_lp(run, p, m.tolerance)?,
        });
    }
    let weight = torricelli_weight(&prep.grid)?;
    if m.energy {
        let v = run.extinction_time.unwrap_or_else(|| *run.times.last().unwrap_or(&0.0));
        out.energy = Some(monitor_energy_l1(run, &weight.w, 0.0, v, m.tolerance)?);
    }
    if m.supersolution {
        out.supersolution = Some(supersolution_check(run, prep.x0.sup_abs(), m.tolerance)?);
    }
    if m.consistency {
        let path = cfg.build_path(&prep.basis, run.drift.path.seed())?;
        let rep = consistency_check_transformation(&prep.x0, &prep.basis, &path, &cfg.scheme, cfg.horizon)?;
        out.consistency = Some(rep.max_discrepancy);
    }
    if m.extinction_bound {
        let params = bound_params(cfg, prep.grid.dim(), Some(&run.drift), weight.c_w)?;
        out.extinction_bound = Some(predict_and_verify_extinction(
            run,
            &params,
            1e-4,
            2.0 * cfg.scheme.dt,
        )?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub config: RunConfig,
    pub seed: u64,
    pub extinction_time: Option<f64>,
    pub censored: bool,
    pub threshold: f64,
    pub absorbed: bool,
    pub post_extinction_max_l1: Option<f64>,
    pub min_value: f64,
    pub final_time: f64,
    pub newton_iterations: usize,
    pub split_steps: usize,
    pub eta_violations: usize,
    pub monitors: MonitorResults,
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).map_err(|e| CliError::Io(std::io::Error::other(e)))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// One `Y` chain plus the enabled monitors; writes `series.csv` and
/// `summary.json` (or `diagnostics.json` if the solver fails).
pub fn cmd_simulate(cfg: &RunConfig) -> Result<Summary, CliError> {
    let prep = prepare(cfg)?;
    fs::create_dir_all(&cfg.out)?;
    let outcome = run_seed(cfg, &prep, cfg.seed, cfg.monitors.needs_trace())
        .and_then(|run| evaluate_monitors(cfg, &prep, &run).map(|m| (run, m)));
    let (run, monitors) = match outcome {
        Ok(v) => v,
        Err(e) => {
            write_json(
                &cfg.out.join("diagnostics.json"),
                &json!({ "error": e.to_string(), "seed": cfg.seed, "config": cfg }),
            )?;
            return Err(e);
        }
    };
    fs::write(cfg.out.join("series.csv"), run.to_csv(&[]))?;
    let summary = Summary {
        config: cfg.clone(),
        seed: cfg.seed,
        extinction_time: run.extinction_time,
        censored: run.extinction_time.is_none(),
        threshold: run.threshold,
        absorbed: run.absorbed(),
        post_extinction_max_l1: run.post_extinction_max_l1,
        min_value: run.min_value,
        final_time: run.final_state.t,
        newton_iterations: run.newton_iterations,
        split_steps: run.split_steps,
        eta_violations: run.eta_violations,
        monitors,
    };
    write_json(&cfg.out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsRow {
    pub seed: u64,
    pub extinction_time: Option<f64>,
    pub censored: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsSummary {
    pub replicas: usize,
    pub extinct: usize,
    pub censored: usize,
    pub failed: usize,
    pub censored_fraction: f64,
    /// `(level, value)` over the uncensored extinction times.
    pub quantiles: Vec<(f64, f64)>,
    pub horizon: f64,
    #[serde(skip)]
    pub rows: Vec<StatsRow>,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn stats_csv(rows: &[StatsRow]) -> String {
    let mut s = String::from("seed,extinction_time,censored,error\n");
    for r in rows {
        let t = r.extinction_time.map(|t| t.to_string()).unwrap_or_default();
        let e = r
            .error
            .as_deref()
            .map(|e| e.replace([',', '\n'], ";"))
            .unwrap_or_default();
        let _ = writeln!(s, "{},{t},{},{e}", r.seed, r.censored);
    }
    s
}

/// Runs one replica per seed on a pool of `workers` threads and writes
/// `stats.csv` (sorted by seed) and `stats_summary.json`.
pub fn cmd_extinction_stats(cfg: &RunConfig, seeds: SeedRange, workers: usize) -> Result<StatsSummary, CliError> {
    let prep = prepare(cfg)?;
    seeds.validate()?;
    if workers == 0 {
        return Err(CliError::Validation("workers must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Io(std::io::Error::other(e)))?;
    let list: Vec<u64> = seeds.seeds().collect();
    let mut rows: Vec<StatsRow> = pool.install(|| {
        list.par_iter()
            .map(|&seed| match run_seed(cfg, &prep, seed, false) {
                Ok(run) => StatsRow {
                    seed,
                    extinction_time: run.extinction_time,
                    censored: run.extinction_time.is_none(),
                    error: None,
                },
                Err(e) => StatsRow {
                    seed,
                    extinction_time: None,
                    censored: false,
                    error: Some(e.to_string()),
                },
            })
            .collect()
    });
    rows.sort_by_key(|r| r.seed);
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed == rows.len() {
        return Err(CliError::AllReplicasFailed(failed));
    }
    let mut times: Vec<f64> = rows.iter().filter_map(|r| r.extinction_time).collect();
    times.sort_by(f64::total_cmp);
    let censored = rows.iter().filter(|r| r.censored).count();
    let quantiles = if times.is_empty() {
        Vec::new()
    } else {
        [0.1, 0.25, 0.5, 0.75, 0.9]
            .iter()
            .map(|&q| (q, quantile(&times, q)))
            .collect()
    };
    let summary = StatsSummary {
        replicas: rows.len(),
        extinct: times.len(),
        censored,
        failed,
        censored_fraction: censored as f64 / (rows.len() - failed) as f64,
        quantiles,
        horizon: cfg.horizon,
        rows,
    };
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("stats.csv"), stats_csv(&summary.rows))?;
    write_json(&cfg.out.join("stats_summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub pass: bool,
    pub failed: Vec<String>,
    pub checks: Vec<Check>,
    pub config: RunConfig,
}

fn check(name: &str, pass: bool, detail: Value) -> Check {
    Check {
        name: name.into(),
        pass,
        detail,
    }
}

fn regularize_check() -> Check {
    let mut worst = 0.0f64;
    let mut ok = true;
    for k in 0..5 {
        let eps = 10f64.powf(-3.0 + 0.5 * k as f64);
        let mut prev = f64::NEG_INFINITY;
        let mut prev_r = f64::NEG_INFINITY;
        for i in 0..2000 {
            let r = -3.0 + 6.0 * i as f64 / 1999.0;
            let phi = phi_eps(r, eps);
            let gap = r.abs() - psi_eps(r, eps);
            ok &= phi.abs() <= 1.0 && phi >= prev;
            ok &= (phi - prev).abs() <= (r - prev_r) / eps + 1e-12 || prev.is_infinite();
            ok &= (resolvent_j(r, eps) - (r - eps * phi)).abs() <= 1e-12;
            ok &= gap >= -1e-12 && gap <= 2.0 * eps + 1e-12;
            ok &= zeta(r, 2.0, eps) <= eps / 2.0 + 1e-12;
            worst = worst.max(gap - eps / 2.0);
            prev = phi;
            prev_r = r;
        }
    }
    check("regularize", ok, json!({ "max_envelope_gap_over_half_eps": worst }))
}

fn grid_check() -> Result<Check, CliError> {
    let g = SpatialGrid::unit_interval(1000)?;
    let c_w = torricelli_weight(&g)?.c_w;
    let mut errs = Vec::new();
    for cells in [16usize, 32, 64] {
        let g = SpatialGrid::unit_interval(cells)?;
        let pi = std::f64::consts::PI;
        let u = GridFunction::from_fn(g, |x| (pi * x[0]).sin())?;
        let lap = laplacian_apply(&u);
        let e = g
            .interior_nodes()
            .map(|n| (lap.values()[n] + pi * pi * u.values()[n]).abs())
            .fold(0.0, f64::max);
        errs.push(e);
    }
    let order = ((errs[0] / errs[2]).ln() / 4f64.ln()).abs();
    let u = GridFunction::from_fn(g, |x| (std::f64::consts::PI * x[0]).sin())?;
    let hm = hminus1_norm(&u)?;
    let target = 1.0 / (std::f64::consts::PI * 2f64.sqrt());
    let pass = (c_w - 1.125).abs() < 1e-8 && (1.9..=2.1).contains(&order) && (hm / target - 1.0).abs() < 5e-3;
    Ok(check(
        "grid_oracles",
        pass,
        json!({ "c_w": c_w, "laplacian_order": order, "hminus1_sin": hm }),
    ))
}

fn ode_check() -> Result<Check, CliError> {
    let traj = ode_bound_oracle(1.0, 0.5, 0.0, |_| 1.0, 1.8, 1e-3)?;
    let err = traj
        .iter()
        .map(|&(t, f)| (f - ode_h_closed_form(1.0, 0.5, 0.0, |s| s, t)).abs())
        .fold(0.0, f64::max);
    let ext = ode_h_closed_form(1.0, 0.5, 0.0, |s| s, 2.0);
    Ok(check(
        "ode_oracle",
        err <= 1e-6 && ext == 0.0,
        json!({ "max_error": err, "value_at_2": ext }),
    ))
}

fn report_check(name: &str, r: &EnergyReport) -> Check {
    check(
        name,
        r.pass,
        json!({ "worst_violation": r.worst_violation, "tolerance": r.tolerance }),
    )
}

/// Runs the oracle checks and every monitor on the configured run; the
/// report lands in `verify.json`.
pub fn cmd_verify(cfg: &RunConfig) -> Result<VerifyReport, CliError> {
    let prep = prepare(cfg)?;
    let mut checks = vec![regularize_check(), grid_check()?, ode_check()?];
    match run_seed(cfg, &prep, cfg.seed, cfg.monitors.needs_trace()) {
        Err(e) => checks.push(check("solver", false, json!({ "error": e.to_string() }))),
        Ok(run) => {
            let positive = run.min_value >= -1e-8;
            checks.push(check(
                "solver",
                positive && run.eta_violations == 0,
                json!({
                    "min_value": run.min_value,
                    "eta_violations": run.eta_violations,
                    "split_steps": run.split_steps,
                    "extinction_time": run.extinction_time,
                }),
            ));
            checks.push(check(
                "newton",
                run.split_steps == 0,
                json!({ "split_steps": run.split_steps, "newton_iterations": run.newton_iterations }),
            ));
            checks.push(check(
                "positivity",
                positive,
                json!({ "min_value": run.min_value }),
            ));
            checks.push(check(
                "absorption",
                run.absorbed(),
                json!({ "post_extinction_max_l1": run.post_extinction_max_l1, "threshold": run.threshold }),
            ));
            match evaluate_monitors(cfg, &prep, &run) {
                Err(e) => checks.push(check("monitors", false, json!({ "error": e.to_string() }))),
                Ok(m) => {
                    for lp in &m.weighted_lp {
                        checks.push(report_check(&format!("weighted_lp_p{}", lp.p), &lp.report));
                    }
                    if let Some(r) = &m.energy {
                        checks.push(report_check("energy_l1", r));
                    }
                    if let Some(r) = &m.supersolution {
                        let mut c = report_check("supersolution", r);
                        let mode = if prep.basis.count() == 0 { "constant" } else { "exponential" };
                        c.detail["mode"] = json!(mode);
                        checks.push(c);
                    }
                    if let Some(d) = m.consistency {
                        checks.push(check("consistency", d.is_finite(), json!({ "max_hminus1_gap": d })));
                    }
                    if let Some(e) = &m.extinction_bound {
                        checks.push(check(
                            "extinction_bound",
                            e.verdict != Verdict::Fail,
                            serde_json::to_value(e).unwrap_or(Value::Null),
                        ));
                    }
                }
            }
        }
    }
    let failed: Vec<String> = checks.iter().filter(|c| !c.pass).map(|c| c.name.clone()).collect();
    let report = VerifyReport {
        pass: failed.is_empty(),
        failed,
        checks,
        config: cfg.clone(),
    };
    fs::create_dir_all(&cfg.out)?;
    write_json(&cfg.out.join("verify.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundOutput {
    pub params: ExtinctionBoundParams,
    /// Printed as `null` when the exponent is the `q = ∞` branch.
    pub q_is_infinite: bool,
    pub x0_norm_p: f64,
    pub eps_star: f64,
    pub g_floor: f64,
    pub l_star: f64,
    pub table: Vec<(f64, f64)>,
}

impl BoundOutput {
    pub fn table_csv(&self) -> String {
        let mut s = String::from("t,bound\n");
        for (t, b) in &self.table {
            let _ = writeln!(s, "{t},{b}");
        }
        s
    }
}

/// Assembles the bound constants without simulating the equation and
/// writes `bound.csv` with 100 samples of `B(t)`.
pub fn cmd_bound(cfg: &RunConfig) -> Result<BoundOutput, CliError> {
    let prep = prepare(cfg)?;
    let d = cfg.bound.d.unwrap_or(prep.grid.dim());
    let weight = torricelli_weight(&prep.grid)?;
    let drift = if cfg.bound.c1_hat.is_none() && prep.basis.count() > 0 {
        let path = cfg.build_path(&prep.basis, cfg.seed)?;
        Some(DriftFields::new(&prep.basis, &path)?)
    } else {
        None
    };
    let params = bound_params(cfg, d, drift.as_ref(), weight.c_w)?;
    let eps_star = flatness_threshold(&prep.basis, &weight);
    let sup_f = prep.basis.sup_sum();
    let eps_used = if sup_f > 0.0 {
        eps_star.min(std::f64::consts::LN_2 / sup_f)
    } else {
        eps_star
    };
    let x0n = prep.x0.lp_norm(params.p);
    let gf = g_floor(&params, &prep.basis, eps_used, x0n);
    let bound = extinction_upper_bound(&params, x0n, gf)?;
    let out = BoundOutput {
        params,
        q_is_infinite: params.q.is_infinite(),
        x0_norm_p: x0n,
        eps_star,
        g_floor: gf,
        l_star: bound.l_star,
        table: bound.table(100),
    };
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("bound.csv"), out.table_csv())?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 0.125), 1.5);
    }

    #[test]
    fn stats_rows_format() {
        let rows = vec![
            StatsRow {
                seed: 1,
                extinction_time: Some(0.25),
                censored: false,
                error: None,
            },
            StatsRow {
                seed: 2,
                extinction_time: None,
                censored: true,
                error: None,
            },
            StatsRow {
                seed: 3,
                extinction_time: None,
                censored: false,
                error: Some("a,b".into()),
            },
        ];
        assert_eq!(
            stats_csv(&rows),
            "seed,extinction_time,censored,error\n1,0.25,false,\n2,,true,\n3,,false,a;b\n"
        );
    }

    #[test]
    fn oracle_checks_pass() {
        assert!(regularize_check().pass);
        assert!(grid_check().unwrap().pass);
        assert!(ode_check().unwrap().pass);
    }
}
