//! Run configuration: JSON on disk, every default resolved before compute.

use std::path::{Path, PathBuf};

use btw_core::grid::DEFAULT_Q_D2;
use btw_core::noise::{sample_path, BrownianPath};
use btw_core::solver::SchemeConfig;
use btw_core::{GridFunction, NoiseBasis, Profile, RegParams, SpatialGrid};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default = "one_usize")]
    pub dim: usize,
    /// Cells per axis; the second entry is ignored in 1D.
    #[serde(default = "default_cells")]
    pub cells: [usize; 2],
    #[serde(default = "unit_extent")]
    pub extent: [(f64, f64); 2],
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            dim: 1,
            cells: default_cells(),
            extent: unit_extent(),
        }
    }
}

impl GridSpec {
    pub fn build(&self) -> Result<SpatialGrid, CliError> {
        let nodes = [self.cells[0] + 1, self.cells[1] + 1];
        Ok(SpatialGrid::new(self.dim, self.extent, nodes)?)
    }
}

/// Noise coefficients, and optionally a recorded path replacing the sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    #[serde(default)]
    pub profiles: Vec<Profile>,
    #[serde(default)]
    pub path_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    Constant {
        value: f64,
    },
    /// `amplitude (1 - |ξ - center|² / radius²)₊²`.
    Bump {
        #[serde(default = "one_f64")]
        amplitude: f64,
        #[serde(default = "half_pair")]
        center: [f64; 2],
        #[serde(default = "quarter")]
        radius: f64,
    },
    Csv {
        path: PathBuf,
    },
}

impl Default for InitialSpec {
    fn default() -> Self {
        InitialSpec::Constant { value: 1.0 }
    }
}

impl InitialSpec {
    pub fn build(&self, grid: &SpatialGrid) -> Result<GridFunction, CliError> {
        match self {
            InitialSpec::Constant { value } => Ok(GridFunction::constant(*grid, *value)),
            InitialSpec::Bump {
                amplitude,
                center,
                radius,
            } => {
                let dim = grid.dim();
                Ok(GridFunction::from_fn(*grid, |x| {
                    let r2: f64 = (0..dim).map(|a| (x[a] - center[a]).powi(2)).sum();
                    amplitude * (1.0 - r2 / (radius * radius)).max(0.0).powi(2)
                })?)
            }
            InitialSpec::Csv { path } => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
                GridFunction::from_csv(*grid, &text).map_err(|e| CliError::Validation(e.to_string()))
            }
        }
    }
}

/// Which monitors `simulate` and `verify` evaluate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorSpec {
    #[serde(default = "default_lp")]
    pub weighted_lp: Vec<f64>,
    #[serde(default = "yes")]
    pub energy: bool,
    #[serde(default = "yes")]
    pub supersolution: bool,
    #[serde(default = "yes")]
    pub consistency: bool,
    #[serde(default = "yes")]
    pub extinction_bound: bool,
    #[serde(default = "default_monitor_tol")]
    pub tolerance: f64,
}

impl Default for MonitorSpec {
    fn default() -> Self {
        Self {
            weighted_lp: default_lp(),
            energy: true,
            supersolution: true,
            consistency: true,
            extinction_bound: true,
            tolerance: default_monitor_tol(),
        }
    }
}

impl MonitorSpec {
    pub fn needs_trace(&self) -> bool {
        self.energy || !self.weighted_lp.is_empty()
    }
}

/// Inputs of the extinction-time bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSpec {
    /// Dimension entering the exponents; defaults to the grid dimension.
    #[serde(default)]
    pub d: Option<usize>,
    #[serde(default)]
    pub p: Option<f64>,
    #[serde(default = "default_q")]
    pub q_for_d2: f64,
    /// Moment constant; estimated from the sampled path when absent.
    #[serde(default)]
    pub c1_hat: Option<f64>,
    #[serde(default)]
    pub t0_hat: f64,
}

impl Default for BoundSpec {
    fn default() -> Self {
        Self {
            d: None,
            p: None,
            q_for_d2: DEFAULT_Q_D2,
            c1_hat: None,
            t0_hat: 0.0,
        }
    }
}

/// Inclusive seed range `start..=end`, written `"A..B"` on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRange {
    pub start: u64,
    pub end: u64,
}

impl SeedRange {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        let bad = || CliError::Validation(format!("seed range must look like A..B, got {s:?}"));
        let (a, b) = s.split_once("..").ok_or_else(bad)?;
        let start = a.trim().parse().map_err(|_| bad())?;
        let end = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        let r = Self { start, end };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.end < self.start {
            return Err(CliError::Validation(format!(
                "seed range {}..{} is empty",
                self.start, self.end
            )));
        }
        Ok(())
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> {
        self.start..=self.end
    }

    pub fn len(&self) -> usize {
        (self.end - self.start + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default = "default_noise")]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub initial: InitialSpec,
    #[serde(default = "default_scheme")]
    pub scheme: SchemeConfig,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub monitors: MonitorSpec,
    #[serde(default)]
    pub bound: BoundSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub seeds: Option<SeedRange>,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            noise: default_noise(),
            initial: InitialSpec::default(),
            scheme: default_scheme(),
            horizon: default_horizon(),
            monitors: MonitorSpec::default(),
            bound: BoundSpec::default(),
            seed: 0,
            seeds: None,
            workers: None,
            out: default_out(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    /// Range checks and file existence, all before any compute.
    pub fn validate(&self) -> Result<(), CliError> {
        let v = |m: String| Err(CliError::Validation(m));
        if !matches!(self.grid.dim, 1 | 2) {
            return v(format!("grid.dim must be 1 or 2, got {}", self.grid.dim));
        }
        for a in 0..self.grid.dim {
            if self.grid.cells[a] < 2 {
                return v(format!("grid.cells[{a}] must be at least 2"));
            }
            let (lo, hi) = self.grid.extent[a];
            if !(lo < hi && lo.is_finite() && hi.is_finite()) {
                return v(format!("grid.extent[{a}] must be an increasing finite pair"));
            }
        }
        self.scheme.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return v(format!("horizon must be positive, got {}", self.horizon));
        }
        if self.horizon < self.scheme.dt {
            return v("horizon must cover at least one step".into());
        }
        if let Some(p) = &self.noise.path_csv {
            if !p.is_file() {
                return v(format!("noise path file {} does not exist", p.display()));
            }
        }
        if let InitialSpec::Csv { path } = &self.initial {
            if !path.is_file() {
                return v(format!("initial condition file {} does not exist", path.display()));
            }
        }
        if let InitialSpec::Bump { radius, .. } = &self.initial {
            if !(*radius > 0.0) {
                return v("bump radius must be positive".into());
            }
        }
        if self.monitors.weighted_lp.iter().any(|p| !(*p >= 1.0)) {
            return v("monitors.weighted_lp exponents must be at least 1".into());
        }
        if !(self.monitors.tolerance >= 0.0) {
            return v("monitors.tolerance must be nonnegative".into());
        }
        if let Some(s) = &self.seeds {
            s.validate()?;
        }
        if self.workers == Some(0) {
            return v("workers must be at least 1".into());
        }
        if let Some(c) = self.bound.c1_hat {
            if !(c > 0.0) {
                return v("bound.c1_hat must be positive".into());
            }
        }
        if !(self.bound.t0_hat >= 0.0) {
            return v("bound.t0_hat must be nonnegative".into());
        }
        Ok(())
    }

    pub fn build_grid(&self) -> Result<SpatialGrid, CliError> {
        self.grid.build()
    }

    pub fn build_basis(&self, grid: &SpatialGrid) -> Result<NoiseBasis, CliError> {
        Ok(NoiseBasis::from_profiles(*grid, &self.noise.profiles)?)
    }

    /// The recorded path if configured, otherwise a fresh sample for `seed`.
    pub fn build_path(&self, basis: &NoiseBasis, seed: u64) -> Result<BrownianPath, CliError> {
        match &self.noise.path_csv {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", p.display())))?;
                let path = BrownianPath::from_csv(&text).map_err(|e| CliError::Validation(e.to_string()))?;
                if path.components() != basis.count() {
                    return Err(CliError::Validation(format!(
                        "path has {} components, noise has {}",
                        path.components(),
                        basis.count()
                    )));
                }
                Ok(path)
            }
            None => Ok(sample_path(basis, self.horizon, self.scheme.dt, seed)?),
        }
    }
}

fn one_usize() -> usize {
    1
}

fn one_f64() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

fn half_pair() -> [f64; 2] {
    [0.5, 0.5]
}

fn quarter() -> f64 {
    0.25
}

fn default_cells() -> [usize; 2] {
    [32, 32]
}

fn unit_extent() -> [(f64, f64); 2] {
    [(0.0, 1.0), (0.0, 1.0)]
}

fn default_lp() -> Vec<f64> {
    vec![1.0, 2.0, 4.0]
}

fn default_monitor_tol() -> f64 {
    1e-6
}

fn default_q() -> f64 {
    DEFAULT_Q_D2
}

/// A single coefficient `f(ξ) = ξ_1`.
fn default_noise() -> NoiseSpec {
    NoiseSpec {
        profiles: vec![Profile::Linear {
            axis: 0,
            scale: 1.0,
            offset: 0.0,
        }],
        path_csv: None,
    }
}

fn default_scheme() -> SchemeConfig {
    let eps = 4e-3;
    SchemeConfig::new(eps / 32.0, RegParams { eps, delta: eps * eps, tau: 0.0 })
}

fn default_horizon() -> f64 {
    0.5
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_json_resolves_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c.grid, GridSpec::default());
        assert_eq!(c, RunConfig::default());
        let quiet = RunConfig::from_json(r#"{"noise": {"profiles": []}}"#).unwrap();
        assert!(quiet.noise.profiles.is_empty());
        assert_eq!(c.scheme.reg.eps, 4e-3);
        c.validate().unwrap();
    }

    #[test]
    fn round_trip_through_json() {
        let c = RunConfig::default();
        let back = RunConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_ranges() {
        assert!(RunConfig::from_json(r#"{"gird": {}}"#).is_err());
        let mut c = RunConfig::default();
        c.horizon = -1.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.initial = InitialSpec::Csv {
            path: "/nonexistent/x0.csv".into(),
        };
        assert!(matches!(c.validate(), Err(CliError::Validation(_))));
    }

    #[test]
    fn seed_ranges() {
        let r = SeedRange::parse("3..6").unwrap();
        assert_eq!(r.seeds().collect::<Vec<_>>(), vec![3, 4, 5, 6]);
        assert_eq!(r.len(), 4);
        assert!(SeedRange::parse("6..3").is_err());
        assert!(SeedRange::parse("x").is_err());
        assert_eq!(SeedRange::parse("0..=1").unwrap().len(), 2);
    }

    #[test]
    fn bump_is_supported_inside_radius() {
        let g = SpatialGrid::unit_interval(8).unwrap();
        let b = InitialSpec::Bump {
            amplitude: 2.0,
            center: [0.5, 0.5],
            radius: 0.25,
        }
        .build(&g)
        .unwrap();
        assert_eq!(b.values()[4], 2.0);
        assert_eq!(b.values()[1], 0.0);
    }
}
