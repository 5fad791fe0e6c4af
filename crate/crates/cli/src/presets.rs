//! Named configurations used by the regression and acceptance runs.

use btw_core::solver::SchemeConfig;
use btw_core::RegParams;

use crate::config::{GridSpec, InitialSpec, MonitorSpec, NoiseSpec, RunConfig};

/// Extinction time of the finest deterministic preset (`ε = 1e-3`,
/// `h = 1/128`, `δ = ε²`, `dt = εh`), frozen from the self-convergence study.
pub const DETERMINISTIC_EXTINCTION_TIME: f64 = 0.1260625;

/// Relative tolerance on [`DETERMINISTIC_EXTINCTION_TIME`] for regressions.
pub const DETERMINISTIC_REGRESSION_TOL: f64 = 0.02;

/// Monitors switched off; only the extinction time is of interest.
pub fn quiet_monitors() -> MonitorSpec {
    MonitorSpec {
        weighted_lp: Vec::new(),
        energy: false,
        supersolution: false,
        consistency: false,
        extinction_bound: false,
        ..MonitorSpec::default()
    }
}

/// `N = 0`, `x0 ≡ 1` on `(0, 1)` with `δ = ε²` and `dt = εh`.
pub fn deterministic_1d(eps: f64, cells: usize) -> RunConfig {
    RunConfig {
        grid: GridSpec {
            dim: 1,
            cells: [cells, cells],
            ..GridSpec::default()
        },
        noise: NoiseSpec::default(),
        initial: InitialSpec::Constant { value: 1.0 },
        scheme: SchemeConfig::new(
            eps / cells as f64,
            RegParams {
                eps,
                delta: eps * eps,
                tau: 0.0,
            },
        ),
        horizon: 0.3,
        monitors: quiet_monitors(),
        ..RunConfig::default()
    }
}

/// The three refinement levels of the deterministic self-convergence study,
/// coarse to fine.
pub fn deterministic_levels() -> [RunConfig; 3] {
    [
        deterministic_1d(4e-3, 32),
        deterministic_1d(2e-3, 64),
        deterministic_1d(1e-3, 128),
    ]
}
