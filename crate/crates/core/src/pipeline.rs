//! End-to-end orchestration shared by the command-line driver and the tests.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bridge::{reconstruct, uniform_times, BridgeSolution, BridgeSummary};
use crate::config::RunConfig;
use crate::distance::{distance_sq, DistanceConvention, DistanceProfile};
use crate::error::{Error, Result};
use crate::grid::{read_field_bundle, write_field_bundle, FieldKind, Grid3D, ScalarField};
use crate::group::{relative, GroupPoint, HorizontalFrame};
use crate::kernel::varadhan_rate;
use crate::operator::KernelOperator;
use crate::ot::discrete_ot_oracle;
use crate::report::to_canonical_json;
use crate::sinkhorn::{solve_schrodinger, Potentials, ScheduleOutcome};
use crate::table::TableCache;

/// Longest residual trace kept per ε in a report.
pub const TRACE_POINTS: usize = 64;

/// A configured problem: grid, marginals, frame and the shared kernel tables.
#[derive(Debug)]
pub struct Problem {
    pub config: RunConfig,
    pub grid: Grid3D,
    pub rho_0: ScalarField,
    pub rho_f: ScalarField,
    pub frame: HorizontalFrame,
    pub cache: TableCache,
}

impl Problem {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let grid = config.grid.build()?;
        let (rho_0, rho_f) = config.densities(&grid)?;
        let frame = config.frame()?;
        let cache = TableCache::new(config.table_settings(&grid));
        Ok(Problem { config, grid, rho_0, rho_f, frame, cache })
    }

    pub fn operator(&self, t: f64, epsilon: f64) -> Result<KernelOperator> {
        KernelOperator::new(&self.grid, &*self.cache.get(t, epsilon)?)
    }

    pub fn solve(&self) -> Result<ScheduleOutcome> {
        let t_f = self.config.t_f;
        solve_schrodinger(&self.rho_0, &self.rho_f, &self.config.sinkhorn, |eps| self.operator(t_f, eps))
    }

    pub fn reconstruct(&self, potentials: &Potentials) -> Result<BridgeSolution> {
        let t_f = self.config.t_f;
        let times = uniform_times(t_f, self.config.bridge.n_intervals);
        reconstruct(potentials, &self.rho_0, &self.rho_f, t_f, &times, &self.frame, |gap| {
            self.operator(gap, potentials.epsilon)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub epsilon: f64,
    pub iterations: usize,
    pub warm_started: bool,
    pub final_residual: f64,
    /// Hilbert residuals, downsampled to at most [`TRACE_POINTS`] entries
    /// (always including the first and last).
    pub residuals: Vec<f64>,
    pub marginal_errors: [f64; 2],
    pub tail_contraction: Option<f64>,
}

impl ConvergenceTrace {
    pub fn from_potentials(p: &Potentials) -> Self {
        ConvergenceTrace {
            epsilon: p.epsilon,
            iterations: p.iterations,
            warm_started: p.warm_started,
            final_residual: p.hilbert_residuals.last().copied().unwrap_or(f64::NAN),
            residuals: downsample(&p.hilbert_residuals, TRACE_POINTS),
            marginal_errors: [p.marginal_errors.0, p.marginal_errors.1],
            tail_contraction: p.tail_contraction(10),
        }
    }
}

fn downsample(v: &[f64], n: usize) -> Vec<f64> {
    if v.len() <= n {
        return v.to_vec();
    }
    (0..n).map(|k| v[k * (v.len() - 1) / (n - 1)]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenormEntry {
    pub t: f64,
    pub epsilon: f64,
    pub renorm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaradhanProbe {
    pub point: [f64; 3],
    pub rate: f64,
    pub distance_sq: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaradhanRow {
    pub epsilon: f64,
    pub t: f64,
    pub probes: Vec<VaradhanProbe>,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleComparison {
    pub n_support: usize,
    pub oracle_cost: f64,
    /// `(ε, transport cost, relative gap to the oracle)` per bridge.
    pub bridge_costs: Vec<(f64, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationMetrics {
    pub epsilon: f64,
    pub controlled: bool,
    pub n_particles: usize,
    pub seed: u64,
    pub terminal_error: f64,
    pub noise_floor: f64,
    pub pathwise_cost: f64,
    pub pathwise_stderr: f64,
    pub transport_cost: Option<f64>,
    pub escaped: usize,
}

/// Everything a run reports. Serialized with [`to_canonical_json`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub convergence: Vec<ConvergenceTrace>,
    pub bridges: Vec<BridgeSummary>,
    pub renorm: Vec<RenormEntry>,
    pub varadhan: Vec<VaradhanRow>,
    pub oracle: Option<OracleComparison>,
    pub simulation: Option<SimulationMetrics>,
    pub warnings: Vec<String>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        to_canonical_json(self)
    }

    pub fn record_tables(&mut self, cache: &TableCache) {
        self.renorm = cache
            .tables()
            .iter()
            .map(|t| RenormEntry { t: t.t, epsilon: t.epsilon, renorm: t.renorm })
            .collect();
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_json()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| missing_or_io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// `−2tε ln p` against `d²` at each probe, one row per ε.
pub fn varadhan_table(
    probes: &[GroupPoint],
    t: f64,
    epsilons: &[f64],
    alpha: f64,
    quad: &crate::kernel::QuadratureSpec,
) -> Result<Vec<VaradhanRow>> {
    epsilons
        .iter()
        .map(|&eps| {
            let probes = probes
                .iter()
                .map(|&q| {
                    let rate = varadhan_rate(q, t, eps, alpha, quad)?;
                    let d2 = distance_sq(GroupPoint::default(), q, alpha);
                    Ok(VaradhanProbe { point: q.to_array(), rate, distance_sq: d2, rel_error: (rate - d2).abs() / d2 })
                })
                .collect::<Result<Vec<_>>>()?;
            let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
            Ok(VaradhanRow { epsilon: eps, t, probes, max_rel_error })
        })
        .collect()
}

/// `Σ π(x,y) ½d²(x,y)` for the converged static coupling
/// `π = φ̂₀(x) p(x,y) φ_f(y) w²`, by a dense pass over all node pairs.
pub fn coupling_cost(problem: &Problem, potentials: &Potentials) -> Result<f64> {
    let table = problem.cache.get(problem.config.t_f, potentials.epsilon)?;
    let g = problem.grid;
    let alpha = problem.config.alpha;
    let lw = 2.0 * g.cell_weight().ln();
    let lh = &potentials.log_phihat_0.values;
    let lf = &potentials.log_phi_f.values;
    let prof = DistanceProfile::global();
    let (cost, mass) = (0..g.len())
        .into_par_iter()
        .map(|i| {
            let qi = g.point(i);
            let mut c = 0.0;
            let mut m = 0.0;
            for (j, qj) in g.points().enumerate() {
                let r = relative(qi, qj, alpha);
                let rho_sq = r.x * r.x + r.y * r.y;
                let pi = (lh[i] + table.log_kernel(rho_sq.sqrt(), r.z) + lf[j] + lw).exp();
                c += pi * 0.5 * prof.distance_sq(rho_sq, r.z, alpha, DistanceConvention::Kernel);
                m += pi;
            }
            (c, m)
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(cost / mass)
}

pub fn oracle_comparison(problem: &Problem, bridges: &[BridgeSummary]) -> Result<OracleComparison> {
    let n = problem.config.diagnose.ot_support;
    let oracle_cost = discrete_ot_oracle(&problem.rho_0, &problem.rho_f, n, problem.config.alpha)?;
    let bridge_costs = bridges
        .iter()
        .map(|b| (b.epsilon, b.cost, (b.cost - oracle_cost) / oracle_cost))
        .collect();
    Ok(OracleComparison { n_support: n, oracle_cost, bridge_costs })
}

/// Directory holding the artifacts of one ε.
pub fn epsilon_dir(out: &Path, epsilon: f64) -> PathBuf {
    out.join(format!("eps_{epsilon}"))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn missing_or_io(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::MissingArtifact(path.to_path_buf())
    } else {
        Error::io(path, e)
    }
}

/// Writes `log_phi_f` and `log_phihat_0` bundles under `dir`.
pub fn write_potentials(dir: &Path, p: &Potentials, t_f: f64) -> Result<()> {
    write_field_bundle(&dir.join("log_phi_f"), "log_phi_f", t_f, &p.log_phi_f)?;
    write_field_bundle(&dir.join("log_phihat_0"), "log_phihat_0", 0.0, &p.log_phihat_0)
}

/// Reads back what [`write_potentials`] wrote. Only the fields are restored;
/// the convergence trace is empty.
pub fn read_potentials(dir: &Path, epsilon: f64) -> Result<Potentials> {
    let load = |name: &str| -> Result<ScalarField> {
        let d = dir.join(name);
        if !d.join("meta.json").exists() {
            return Err(Error::MissingArtifact(d));
        }
        let (_, mut f) = read_field_bundle(&d)?;
        f.kind = FieldKind::LogPotential;
        Ok(f)
    };
    Ok(Potentials {
        epsilon,
        log_phi_f: load("log_phi_f")?,
        log_phihat_0: load("log_phihat_0")?,
        iterations: 0,
        hilbert_residuals: Vec::new(),
        marginal_errors: (f64::NAN, f64::NAN),
        warm_started: false,
    })
}

/// Density bundles `rho_t{j}` plus `summary.json`.
pub fn write_bridge(dir: &Path, bridge: &BridgeSolution) -> Result<()> {
    for (j, (t, r)) in bridge.times.iter().zip(&bridge.rho).enumerate() {
        write_field_bundle(&dir.join(format!("rho_t{j:02}")), "rho", *t, r)?;
    }
    write_text(&dir.join("summary.json"), &to_canonical_json(&bridge.summary())?)
}
