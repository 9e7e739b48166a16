//! JSON experiment configuration.

use std::path::PathBuf;

use anyhow::{bail, ensure, Result};
use serde::{Deserialize, Serialize};

use mimic_core::coeffs::{RegularityBudget, ValidationConfig};
use mimic_core::pde::PdeScheme;
use mimic_core::projection::{ComparisonConfig, FillPolicy, Kernel};
use mimic_core::sdesim::Scheme;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Simulate,
    Validate,
    Martingale,
    Project,
    Pde,
    Duality,
    Restart,
    FullMimic,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Kind,
    /// Master seed. Required; every stream is derived from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelSpec,
    /// Start point; defaults to `(0, …, 0, 0.09)`.
    #[serde(default)]
    pub start: Option<Vec<f64>>,
    #[serde(default)]
    pub simulation: SimulationSpec,
    #[serde(default)]
    pub validation: ValidationSpec,
    #[serde(default)]
    pub martingale: MartingaleSpec,
    #[serde(default)]
    pub projection: ProjectionSpec,
    #[serde(default)]
    pub pde: PdeSpec,
    #[serde(default)]
    pub duality: DualitySpec,
    #[serde(default)]
    pub restart: RestartSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Heston {
        #[serde(default = "d_kappa")]
        kappa: f64,
        #[serde(default = "d_theta")]
        theta: f64,
        #[serde(default = "d_zeta")]
        zeta: f64,
        #[serde(default = "d_rho")]
        rho: f64,
        #[serde(default = "d_r")]
        r: f64,
        #[serde(default)]
        q: f64,
        #[serde(default)]
        with_killing: bool,
    },
    Constant {
        a: Vec<Vec<f64>>,
        b: Vec<f64>,
        #[serde(default)]
        c: f64,
    },
    /// Coefficient CSV written by a `project` run (sidecar JSON next to it).
    Gridded {
        path: PathBuf,
        #[serde(default)]
        fill: FillPolicy,
    },
}

fn d_kappa() -> f64 {
    1.5
}
fn d_theta() -> f64 {
    0.04
}
fn d_zeta() -> f64 {
    0.3
}
fn d_rho() -> f64 {
    -0.5
}
fn d_r() -> f64 {
    0.02
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Heston { kappa: 1.5, theta: 0.04, zeta: 0.3, rho: -0.5, r: 0.02, q: 0.0, with_killing: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSpec {
    pub n_paths: usize,
    pub step: f64,
    pub horizon: f64,
    pub scheme: Scheme,
    /// Paths simulated at a time in block-streamed pipelines.
    pub block: usize,
    /// Paths written to the ensemble CSV.
    pub export_paths: usize,
    pub export_stride: usize,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        Self {
            n_paths: 10_000,
            step: 1.0 / 512.0,
            horizon: 1.0,
            scheme: Scheme::FullTruncation,
            block: 10_000,
            export_paths: 100,
            export_stride: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationSpec {
    /// Constants to check against; the model's own when absent.
    pub budget: Option<RegularityBudget>,
    #[serde(flatten)]
    pub sampling: ValidationConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestFunctionSpec {
    Linear { coeffs: Vec<f64> },
    Constant { value: f64 },
    RadialBump { center: Vec<f64>, radius: f64 },
    /// `(T − t) x_d` with `T` the simulation horizon.
    TimeWeightedHeight,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSpec {
    Constant,
    Coordinate(usize),
    RunningMax(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MartingaleSpec {
    pub test_functions: Vec<TestFunctionSpec>,
    /// Times at which increments are cut; must be grid nodes.
    pub levels: Vec<f64>,
    pub probes: Vec<ProbeSpec>,
    pub z_crit: f64,
    pub z_fail: f64,
}

impl Default for MartingaleSpec {
    fn default() -> Self {
        Self {
            test_functions: vec![
                TestFunctionSpec::Linear { coeffs: vec![1.0, 1.0] },
                TestFunctionSpec::RadialBump { center: vec![0.0, 0.1], radius: 0.5 },
                TestFunctionSpec::RadialBump { center: vec![0.0, 0.0], radius: 0.3 },
            ],
            levels: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            probes: vec![ProbeSpec::Constant, ProbeSpec::Coordinate(1)],
            z_crit: 3.0,
            z_fail: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriverSpec {
    /// The model itself, with driver records.
    Markov,
    RegimeSwitching {
        #[serde(default = "d_scales")]
        scales: [f64; 2],
        #[serde(default = "d_rates")]
        rates: [f64; 2],
        #[serde(default)]
        initial: usize,
    },
}

fn d_scales() -> [f64; 2] {
    [1.0, 1.5]
}
fn d_rates() -> [f64; 2] {
    [2.0, 2.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatticeSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub counts: Vec<usize>,
    /// `x_d` nodes at `upper_d (i/n)^power`.
    pub power: f64,
}

impl Default for LatticeSpec {
    fn default() -> Self {
        Self { lower: vec![-1.2, 0.0], upper: vec![1.2, 0.45], counts: vec![49, 46], power: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionSpec {
    pub driver: DriverSpec,
    /// Number of time nodes `k T / n` for `k = 1..=n`; ignored if `times` is set.
    pub time_nodes: usize,
    pub times: Option<Vec<f64>>,
    pub lattice: LatticeSpec,
    pub kernel: Kernel,
    pub min_occupancy: f64,
    pub fill: FillPolicy,
    pub compare_times: Vec<f64>,
    pub comparison: ComparisonConfig,
}

impl Default for ProjectionSpec {
    fn default() -> Self {
        Self {
            driver: DriverSpec::Markov,
            time_nodes: 16,
            times: None,
            lattice: LatticeSpec::default(),
            kernel: Kernel::default(),
            min_occupancy: 50.0,
            fill: FillPolicy::default(),
            compare_times: vec![0.25, 0.5, 1.0],
            comparison: ComparisonConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Constant { value: f64 },
    Coordinate { index: usize },
    RadialBump { center: Vec<f64>, radius: f64 },
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::RadialBump { center: vec![0.0, 0.04], radius: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Problem {
    Cauchy,
    #[default]
    TerminalValue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdeSpec {
    pub half_width: f64,
    pub xd_max: f64,
    pub counts: Vec<usize>,
    pub xd_power: f64,
    pub horizon: f64,
    pub steps: usize,
    pub scheme: PdeScheme,
    pub problem: Problem,
    pub data: DataSpec,
    pub csv_layer_stride: usize,
}

impl Default for PdeSpec {
    fn default() -> Self {
        Self {
            half_width: 1.5,
            xd_max: 0.5,
            counts: vec![65, 65],
            xd_power: 1.0,
            horizon: 0.5,
            steps: 64,
            scheme: PdeScheme::CrankNicolson,
            problem: Problem::TerminalValue,
            data: DataSpec::default(),
            csv_layer_stride: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualitySpec {
    pub z: f64,
    /// PDE evaluated at `start + offset`; a negative control.
    pub pde_offset: Option<Vec<f64>>,
}

impl Default for DualitySpec {
    fn default() -> Self {
        Self { z: 3.0, pde_offset: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestartSpec {
    pub level: f64,
    pub t_cap: f64,
    pub horizon: f64,
    pub bins: usize,
    pub min_per_bin: usize,
    pub ks_threshold: f64,
    pub perturbation: Option<Vec<f64>>,
    pub null_resamples: usize,
}

impl Default for RestartSpec {
    fn default() -> Self {
        Self {
            level: 0.05,
            t_cap: 1.0,
            horizon: 0.25,
            bins: 4,
            min_per_bin: 500,
            ks_threshold: 0.05,
            perturbation: None,
            null_resamples: 0,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    ensure!(v > 0.0 && v.is_finite(), "{name} must be positive, got {v}");
    Ok(())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dim(&self) -> usize {
        match &self.model {
            ModelSpec::Heston { .. } => 2,
            ModelSpec::Constant { b, .. } => b.len(),
            ModelSpec::Gridded { .. } => self.start.as_ref().map_or(2, Vec::len),
        }
    }

    pub fn start_point(&self) -> Vec<f64> {
        self.start.clone().unwrap_or_else(|| {
            let mut x = vec![0.0; self.dim()];
            *x.last_mut().unwrap() = 0.09;
            x
        })
    }

    /// Structural checks that need no computation.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        ensure!(d >= 1, "model has no coordinates");
        let x = self.start_point();
        ensure!(x.len() == d, "start has {} coordinates, model has {d}", x.len());
        ensure!(x[d - 1] >= 0.0, "start lies outside the half-space");
        if let ModelSpec::Constant { a, b, c } = &self.model {
            ensure!(a.len() == b.len() && a.iter().all(|r| r.len() == b.len()), "constant model: a must be d×d");
            ensure!(c.is_finite(), "constant model: c must be finite");
        }
        let s = &self.simulation;
        ensure!(s.n_paths > 0, "simulation.n_paths must be positive");
        ensure!(s.block > 0, "simulation.block must be positive");
        ensure!(s.export_stride > 0, "simulation.export_stride must be positive");
        positive("simulation.step", s.step)?;
        positive("simulation.horizon", s.horizon)?;
        let m = &self.martingale;
        positive("martingale.z_crit", m.z_crit)?;
        positive("martingale.z_fail", m.z_fail)?;
        ensure!(m.z_fail >= m.z_crit, "martingale.z_fail must be at least z_crit");
        if self.kind == Kind::Martingale {
            ensure!(m.levels.len() >= 2, "martingale.levels needs at least two times");
            ensure!(!m.test_functions.is_empty() && !m.probes.is_empty(), "martingale needs test functions and probes");
        }
        let p = &self.projection;
        ensure!(p.time_nodes > 0, "projection.time_nodes must be positive");
        ensure!(p.min_occupancy >= 0.0, "projection.min_occupancy must be non-negative");
        positive("projection.comparison.ks_threshold", p.comparison.ks_threshold)?;
        positive("projection.comparison.gap_z", p.comparison.gap_z)?;
        positive("projection.fill.max_masked_fraction", p.fill.max_masked_fraction)?;
        if let Some(b) = p.fill.clip_budget {
            positive("projection.fill.clip_budget", b)?;
        }
        if matches!(self.kind, Kind::Project | Kind::FullMimic) {
            let l = &p.lattice;
            ensure!(
                l.lower.len() == d && l.upper.len() == d && l.counts.len() == d,
                "projection.lattice needs {d} coordinates"
            );
            ensure!(l.counts.iter().all(|&n| n >= 2), "projection.lattice.counts must be at least 2");
            positive("projection.lattice.power", l.power)?;
        }
        let q = &self.pde;
        positive("pde.half_width", q.half_width)?;
        positive("pde.xd_max", q.xd_max)?;
        positive("pde.horizon", q.horizon)?;
        ensure!(q.steps > 0, "pde.steps must be positive");
        ensure!(q.csv_layer_stride > 0, "pde.csv_layer_stride must be positive");
        if matches!(self.kind, Kind::Pde | Kind::Duality) {
            ensure!(q.counts.len() == d, "pde.counts needs {d} entries");
            ensure!(q.counts.iter().all(|&n| n >= 3), "pde.counts must be at least 3");
            if let DataSpec::Coordinate { index } = q.data {
                ensure!(index < d, "pde.data.index out of range");
            }
        }
        if self.kind == Kind::Duality {
            ensure!(
                q.counts.iter().all(|&n| n % 2 == 1 && n >= 5) && q.steps % 2 == 0,
                "duality needs odd pde.counts ≥ 5 and even pde.steps (the grid is coarsened once)"
            );
        }
        positive("duality.z", self.duality.z)?;
        let r = &self.restart;
        positive("restart.t_cap", r.t_cap)?;
        positive("restart.horizon", r.horizon)?;
        positive("restart.ks_threshold", r.ks_threshold)?;
        ensure!(r.bins > 0, "restart.bins must be positive");
        if self.output_dir.as_os_str().is_empty() {
            bail!("output_dir must not be empty");
        }
        Ok(())
    }
}
