//! Run configuration: JSON in, fully resolved JSON out.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{gaussian_density, ring_density, Grid3D, ScalarField};
use crate::group::{FrameKind, GroupPoint, HorizontalFrame};
use crate::kernel::{KernelFormula, QuadratureSpec};
use crate::report::to_canonical_json;
use crate::sde::SimConfig;
use crate::sinkhorn::SinkhornConfig;
use crate::table::{TableSettings, TableSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    pub dims: [usize; 3],
    pub max_points: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { lo: [-4.5, -4.5, -3.0], hi: [4.5, 4.5, 3.0], dims: [24, 24, 24], max_points: 24 * 24 * 24 }
    }
}

impl GridConfig {
    pub fn build(&self) -> Result<Grid3D> {
        Grid3D::from_bounds_with_cap(self.lo, self.hi, self.dims, self.max_points)
            .map_err(|e| Error::Config(format!("grid: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussianConfig {
    pub mean: [f64; 3],
    pub sigmas: [f64; 3],
}

impl Default for GaussianConfig {
    fn default() -> Self {
        GaussianConfig { mean: [0.0; 3], sigmas: [0.55; 3] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RingConfig {
    pub r0: f64,
    pub s_r: f64,
    pub mz: f64,
    pub sigma_z: f64,
}

impl Default for RingConfig {
    fn default() -> Self {
        RingConfig { r0: 2.5, s_r: 0.45, mz: 0.0, sigma_z: 0.7 }
    }
}

/// Kernel table resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TableConfig {
    pub n_rho: usize,
    pub n_z: usize,
    pub formula: KernelFormula,
}

impl Default for TableConfig {
    fn default() -> Self {
        TableConfig { n_rho: 128, n_z: 128, formula: KernelFormula::Exact }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeConfig {
    /// Number of uniform time intervals on `[0, t_f]`.
    pub n_intervals: usize,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig { n_intervals: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSettings {
    /// ε of the bridge whose control drives the particles.
    pub epsilon: f64,
    pub controlled: bool,
    pub frame: FrameKind,
    pub n_particles: usize,
    pub n_steps: usize,
    pub record_paths: usize,
    pub record_every: usize,
}

impl Default for SimSettings {
    fn default() -> Self {
        SimSettings {
            epsilon: 0.5,
            controlled: true,
            frame: FrameKind::Heisenberg,
            n_particles: 100_000,
            n_steps: 400,
            record_paths: 50,
            record_every: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseConfig {
    pub varadhan_t: f64,
    pub varadhan_epsilons: Vec<f64>,
    pub varadhan_probes: Vec<[f64; 3]>,
    pub ot_support: usize,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        DiagnoseConfig {
            varadhan_t: 1.0,
            varadhan_epsilons: vec![0.5, 0.1, 0.02],
            varadhan_probes: vec![
                [1.5, 0.0, 0.0],
                [0.0, 2.0, 0.0],
                [1.8, 1.8, 0.0],
                [-2.5, 1.0, 0.0],
                [3.5, 0.0, 0.0],
            ],
            ot_support: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub initial: GaussianConfig,
    pub target: RingConfig,
    pub alpha: f64,
    pub t_f: f64,
    pub sinkhorn: SinkhornConfig,
    pub quadrature: QuadratureSpec,
    pub table: TableConfig,
    pub bridge: BridgeConfig,
    pub sim: SimSettings,
    pub diagnose: DiagnoseConfig,
    pub output_dir: String,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            grid: GridConfig::default(),
            initial: GaussianConfig::default(),
            target: RingConfig::default(),
            alpha: 0.25,
            t_f: 1.0,
            sinkhorn: SinkhornConfig::default(),
            quadrature: QuadratureSpec::default(),
            table: TableConfig::default(),
            bridge: BridgeConfig::default(),
            sim: SimSettings::default(),
            diagnose: DiagnoseConfig::default(),
            output_dir: "out".into(),
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Parses and validates. Unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.build()?;
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("alpha must be positive".into()));
        }
        if !(self.t_f > 0.0 && self.t_f.is_finite()) {
            return Err(Error::Config("t_f must be positive".into()));
        }
        self.sinkhorn.validate()?;
        self.quadrature.validate().map_err(|e| Error::Config(format!("quadrature: {e}")))?;
        if self.table.n_rho < 8 || self.table.n_z < 8 {
            return Err(Error::Config("table: n_rho and n_z must be at least 8".into()));
        }
        if self.bridge.n_intervals < 2 {
            return Err(Error::Config("bridge: n_intervals must be at least 2".into()));
        }
        if self.sim.n_particles == 0 || self.sim.n_steps == 0 || self.sim.record_every == 0 {
            return Err(Error::Config("sim: n_particles, n_steps and record_every must be positive".into()));
        }
        if self.diagnose.ot_support == 0 || self.diagnose.ot_support > crate::ot::MAX_SUPPORT {
            return Err(Error::Config(format!(
                "diagnose: ot_support must be in 1..={}",
                crate::ot::MAX_SUPPORT
            )));
        }
        if !(self.diagnose.varadhan_t > 0.0) || self.diagnose.varadhan_epsilons.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::Config("diagnose: varadhan_t and varadhan_epsilons must be positive".into()));
        }
        Ok(())
    }

    /// The resolved configuration with every default spelled out.
    pub fn resolved_json(&self) -> Result<String> {
        to_canonical_json(self)
    }

    pub fn table_settings(&self, grid: &Grid3D) -> TableSettings {
        TableSettings {
            alpha: self.alpha,
            spec: TableSpec::for_grid(grid, self.alpha, self.table.n_rho, self.table.n_z),
            quad: self.quadrature,
            formula: self.table.formula,
        }
    }

    pub fn densities(&self, grid: &Grid3D) -> Result<(ScalarField, ScalarField)> {
        let g = &self.initial;
        let r = &self.target;
        Ok((
            gaussian_density(grid, g.mean, g.sigmas)?,
            ring_density(grid, r.r0, r.s_r, r.mz, r.sigma_z)?,
        ))
    }

    pub fn frame(&self) -> Result<HorizontalFrame> {
        HorizontalFrame::heisenberg(self.alpha)
    }

    pub fn sim_config(&self, grid: &Grid3D) -> Result<SimConfig> {
        let frame = HorizontalFrame::new(self.sim.frame, self.alpha)?;
        let mut c = SimConfig::new(grid, self.sim.epsilon, frame, self.seed);
        c.n_particles = self.sim.n_particles;
        c.n_steps = self.sim.n_steps;
        c.t_f = self.t_f;
        c.record_particles = self.sim.record_paths;
        c.record_every = self.sim.record_every;
        c.validate()?;
        Ok(c)
    }

    pub fn varadhan_probes(&self) -> Vec<GroupPoint> {
        self.diagnose.varadhan_probes.iter().map(|p| GroupPoint::from_array(*p)).collect()
    }
}
