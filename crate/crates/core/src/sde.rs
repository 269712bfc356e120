//! Euler–Maruyama ensembles of the driftless and controlled degenerate SDE.
//!
//! `X_{k+1} = X_k + b_ε(X_k) dt + g(X_k) (u(t_k, X_k) dt + √ε ΔW_k)`.
//!
//! Particle `i` draws from a ChaCha8 stream keyed by `(seed, i)`, so results
//! do not depend on how particles are split across threads.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bridge::BridgeSolution;
use crate::error::{Error, Result};
use crate::grid::{Grid3D, ScalarField};
use crate::group::{frame_at, horizontality_residual, stratonovich_drift, GroupPoint, HorizontalFrame};
use crate::numeric::pairwise_sum;

/// Fraction of escaped particles above which a run fails.
pub const MAX_ESCAPE_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n_particles: usize,
    pub n_steps: usize,
    pub t_f: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub frame: HorizontalFrame,
    /// Particles escaping this box are counted.
    pub box_lo: [f64; 3],
    pub box_hi: [f64; 3],
    /// Full paths are kept for the first `record_particles` particles,
    /// every `record_every` steps.
    pub record_particles: usize,
    pub record_every: usize,
}

impl SimConfig {
    /// Defaults: 10⁵ particles, `dt = t_f/400`, escape box = the grid's cells.
    pub fn new(grid: &Grid3D, epsilon: f64, frame: HorizontalFrame, seed: u64) -> Self {
        let (lo, hi) = grid.cell_box();
        SimConfig {
            n_particles: 100_000,
            n_steps: 400,
            t_f: 1.0,
            epsilon,
            seed,
            frame,
            box_lo: lo,
            box_hi: hi,
            record_particles: 0,
            record_every: 1,
        }
    }

    pub fn dt(&self) -> f64 {
        self.t_f / self.n_steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 || self.n_steps == 0 || self.record_every == 0 {
            return Err(Error::Config("n_particles, n_steps and record_every must be positive".into()));
        }
        if !(self.t_f > 0.0 && self.t_f.is_finite()) || !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config("t_f must be positive and epsilon nonnegative".into()));
        }
        if (0..3).any(|a| !(self.box_hi[a] > self.box_lo[a])) {
            return Err(Error::Config("simulation box is empty".into()));
        }
        Ok(())
    }

    fn inside(&self, p: GroupPoint) -> bool {
        let c = p.to_array();
        (0..3).all(|a| c[a] >= self.box_lo[a] && c[a] <= self.box_hi[a])
    }
}

/// Where particles start.
#[derive(Debug, Clone, Copy)]
pub enum Initial<'a> {
    Point(GroupPoint),
    Density(&'a ScalarField),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEnsemble {
    pub seed: u64,
    pub t_f: f64,
    /// Times of the recorded path samples.
    pub times: Vec<f64>,
    /// Recorded paths, one per recorded particle.
    pub paths: Vec<Vec<GroupPoint>>,
    pub initial: Vec<GroupPoint>,
    pub terminal: Vec<GroupPoint>,
    /// `Σ_k ½‖u(t_k, X_k)‖² dt` per particle.
    pub costs: Vec<f64>,
    /// Particles that left the box at least once.
    pub escaped: usize,
    /// Largest normal component of any raw increment.
    pub max_horizontality_residual: f64,
}

fn particle_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Inverse-CDF sampler over the cells of a grid density.
#[derive(Debug, Clone)]
pub struct GridSampler {
    grid: Grid3D,
    cdf: Vec<f64>,
}

impl GridSampler {
    pub fn new(density: &ScalarField) -> Result<Self> {
        let mut cdf = Vec::with_capacity(density.values.len());
        let mut acc = 0.0;
        for &v in &density.values {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument("sampling density must be nonnegative".into()));
            }
            acc += v;
            cdf.push(acc);
        }
        if !(acc > 0.0) {
            return Err(Error::InvalidArgument("sampling density has zero mass".into()));
        }
        for c in &mut cdf {
            *c /= acc;
        }
        Ok(GridSampler { grid: density.grid, cdf })
    }

    /// A node drawn by mass, jittered uniformly within its cell.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> GroupPoint {
        let u: f64 = rng.random();
        let idx = self.cdf.partition_point(|&c| c < u).min(self.cdf.len() - 1);
        let p = self.grid.point(idx);
        let s = self.grid.spacing;
        let j: [f64; 3] = [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5];
        GroupPoint::new(p.x + j[0] * s[0], p.y + j[1] * s[1], p.z + j[2] * s[2])
    }
}

struct ParticleOutcome {
    initial: GroupPoint,
    terminal: GroupPoint,
    path: Vec<GroupPoint>,
    cost: f64,
    escaped: bool,
    residual: f64,
}

/// Simulate the ensemble; `control` is interpolated trilinearly in space and
/// held constant on each bridge sample interval `[t_j, t_{j+1})`.
pub fn simulate(config: &SimConfig, initial: Initial<'_>, control: Option<&BridgeSolution>) -> Result<TrajectoryEnsemble> {
    config.validate()?;
    if let Some(b) = control {
        if (b.epsilon - config.epsilon).abs() > 1e-12 * b.epsilon.max(1.0) {
            return Err(Error::Config(format!(
                "control was built for epsilon={} but the simulation uses {}",
                b.epsilon, config.epsilon
            )));
        }
        if (b.t_f - config.t_f).abs() > 1e-12 {
            return Err(Error::Config("control horizon differs from the simulation horizon".into()));
        }
    }
    let sampler = match initial {
        Initial::Density(d) => Some(GridSampler::new(d)?),
        Initial::Point(_) => None,
    };
    let dt = config.dt();
    let sqrt_eps_dt = (config.epsilon * dt).sqrt();
    let frame = config.frame;
    let m = frame.m;
    let n_rec = config.record_particles.min(config.n_particles);
    let step_to_sample: Vec<usize> = (0..config.n_steps)
        .map(|k| control.map_or(0, |b| b.sample_index(k as f64 * dt)))
        .collect();

    let run = |id: usize| -> ParticleOutcome {
        let mut rng = particle_rng(config.seed, id as u64);
        let x0 = match (&sampler, initial) {
            (Some(s), _) => s.sample(&mut rng),
            (None, Initial::Point(p)) => p,
            (None, Initial::Density(_)) => unreachable!("sampler exists for densities"),
        };
        let record = id < n_rec;
        let mut path = Vec::new();
        if record {
            path.push(x0);
        }
        let mut x = x0;
        let mut cost = 0.0;
        let mut escaped = false;
        let mut residual = 0.0f64;
        for (k, &j) in step_to_sample.iter().enumerate() {
            let u = match control {
                Some(b) => b.control[j].interpolate(x),
                None => [0.0; 3],
            };
            cost += 0.5 * (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]) * dt;
            let mut v = [0.0; 3];
            for c in v.iter_mut().take(m).zip(u) {
                let z: f64 = rng.sample(StandardNormal);
                *c.0 = c.1 * dt + sqrt_eps_dt * z;
            }
            let g = frame_at(&frame, x);
            let inc = g.apply(&v[..m]);
            residual = residual.max(horizontality_residual(&frame, x, inc).abs());
            let b = stratonovich_drift(&frame, x, config.epsilon);
            x = GroupPoint::new(x.x + inc[0] + b[0] * dt, x.y + inc[1] + b[1] * dt, x.z + inc[2] + b[2] * dt);
            if !escaped && !config.inside(x) {
                escaped = true;
            }
            if record && (k + 1) % config.record_every == 0 {
                path.push(x);
            }
        }
        ParticleOutcome { initial: x0, terminal: x, path, cost, escaped, residual }
    };

    let outcomes: Vec<ParticleOutcome> = (0..config.n_particles).into_par_iter().map(run).collect();
    let escaped = outcomes.iter().filter(|o| o.escaped).count();
    let max_res = outcomes.iter().map(|o| o.residual).fold(0.0, f64::max);
    if escaped as f64 > MAX_ESCAPE_FRACTION * config.n_particles as f64 {
        return Err(Error::ParticlesEscaped { exited: escaped, total: config.n_particles });
    }
    if escaped > 0 {
        log::warn!("{escaped} of {} particles left the simulation box", config.n_particles);
    }
    let mut times = vec![0.0];
    times.extend((1..=config.n_steps).filter(|k| k % config.record_every == 0).map(|k| k as f64 * dt));
    let mut paths = Vec::with_capacity(n_rec);
    let mut initial_states = Vec::with_capacity(outcomes.len());
    let mut terminal = Vec::with_capacity(outcomes.len());
    let mut costs = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        initial_states.push(o.initial);
        terminal.push(o.terminal);
        costs.push(o.cost);
        if !o.path.is_empty() {
            paths.push(o.path);
        }
    }
    Ok(TrajectoryEnsemble {
        seed: config.seed,
        t_f: config.t_f,
        times,
        paths,
        initial: initial_states,
        terminal,
        costs,
        escaped,
        max_horizontality_residual: max_res,
    })
}

/// Normalized histogram of `points` on the cells of `grid` (nearest node).
/// Points outside the cell box are dropped but still count in the normalization.
pub fn histogram(points: &[GroupPoint], grid: &Grid3D) -> ScalarField {
    let mut counts = vec![0u64; grid.len()];
    for p in points {
        if let Some(i) = nearest_node(grid, *p) {
            counts[i] += 1;
        }
    }
    let norm = points.len() as f64 * grid.cell_weight();
    ScalarField {
        grid: *grid,
        values: counts.iter().map(|&c| c as f64 / norm).collect(),
        kind: crate::grid::FieldKind::Density,
    }
}

fn nearest_node(grid: &Grid3D, p: GroupPoint) -> Option<usize> {
    let c = p.to_array();
    let mut ijk = [0usize; 3];
    for a in 0..3 {
        let s = ((c[a] - grid.origin[a]) / grid.spacing[a]).round();
        if !(s >= 0.0 && s <= (grid.dims[a] - 1) as f64) {
            return None;
        }
        ijk[a] = s as usize;
    }
    Some(grid.index(ijk[0], ijk[1], ijk[2]))
}

/// L¹ distance between the terminal histogram and `target`.
pub fn terminal_marginal_error(ensemble: &TrajectoryEnsemble, target: &ScalarField) -> f64 {
    histogram(&ensemble.terminal, &target.grid).l1_distance(target)
}

/// Monte-Carlo estimate of `E[Σ_k ½‖u(t_k, X_k)‖² dt]` and its standard error.
pub fn pathwise_cost(ensemble: &TrajectoryEnsemble) -> (f64, f64) {
    let n = ensemble.costs.len() as f64;
    let mean = pairwise_sum(&ensemble.costs) / n;
    let dev: Vec<f64> = ensemble.costs.iter().map(|c| (c - mean) * (c - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Draw `n` points from a grid density with the simulator's sampler and streams.
pub fn sample_density(density: &ScalarField, n: usize, seed: u64) -> Result<Vec<GroupPoint>> {
    let s = GridSampler::new(density)?;
    Ok((0..n).into_par_iter().map(|i| s.sample(&mut particle_rng(seed, i as u64))).collect())
}

/// Write recorded paths as CSV with header `t,particle,x,y,z`.
pub fn write_paths_csv(ensemble: &TrajectoryEnsemble, path: &Path) -> Result<()> {
    let mut out = String::from("t,particle,x,y,z\n");
    for (pid, p) in ensemble.paths.iter().enumerate() {
        for (t, q) in ensemble.times.iter().zip(p) {
            out.push_str(&format!("{t:.16e},{pid},{:.16e},{:.16e},{:.16e}\n", q.x, q.y, q.z));
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{gaussian_density, FieldKind};
    use crate::group::FrameKind;

    fn cfg(frame: FrameKind, eps: f64, n: usize, steps: usize) -> SimConfig {
        let grid = Grid3D::default_grid();
        let mut c = SimConfig::new(&grid, eps, HorizontalFrame::new(frame, 0.25).unwrap(), 7);
        c.n_particles = n;
        c.n_steps = steps;
        c
    }

    #[test]
    fn zero_noise_without_control_is_static() {
        let c = cfg(FrameKind::Heisenberg, 0.0, 200, 50);
        let g = gaussian_density(&Grid3D::default_grid(), [0.0; 3], [0.55; 3]).unwrap();
        let e = simulate(&c, Initial::Density(&g), None).unwrap();
        assert_eq!(e.initial, e.terminal);
    }

    #[test]
    fn fixed_seed_is_bit_identical_and_seed_sensitive() {
        let mut c = cfg(FrameKind::Heisenberg, 1.0, 500, 40);
        c.record_particles = 3;
        c.record_every = 10;
        let a = simulate(&c, Initial::Point(GroupPoint::new(0.1, 0.0, 0.0)), None).unwrap();
        let b = simulate(&c, Initial::Point(GroupPoint::new(0.1, 0.0, 0.0)), None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.paths.len(), 3);
        assert_eq!(a.times.len(), 5);
        assert_eq!(a.paths[0].len(), 5);
        c.seed = 8;
        let d = simulate(&c, Initial::Point(GroupPoint::new(0.1, 0.0, 0.0)), None).unwrap();
        assert_ne!(a.terminal, d.terminal);
    }

    #[test]
    fn increments_are_horizontal_and_planar_frame_keeps_z() {
        let c = cfg(FrameKind::Heisenberg, 1.0, 2000, 100);
        let e = simulate(&c, Initial::Point(GroupPoint::new(0.3, -0.2, 0.1)), None).unwrap();
        assert_eq!(e.max_horizontality_residual, 0.0);
        let p = cfg(FrameKind::PlanarConstant, 1.0, 2000, 100);
        let e = simulate(&p, Initial::Point(GroupPoint::new(0.3, -0.2, 0.1)), None).unwrap();
        assert!(e.terminal.iter().all(|q| q.z == 0.1));
        assert_eq!(e.max_horizontality_residual, 0.0);
    }

    #[test]
    fn vertical_mean_from_origin_is_zero() {
        let mut c = cfg(FrameKind::Heisenberg, 1.0, 20_000, 50);
        c.t_f = 0.5;
        let e = simulate(&c, Initial::Point(GroupPoint::new(0.0, 0.0, 0.0)), None).unwrap();
        let n = e.terminal.len() as f64;
        let mean = e.terminal.iter().map(|q| q.z).sum::<f64>() / n;
        let var = e.terminal.iter().map(|q| (q.z - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() <= 3.0 * (var / n).sqrt(), "mean {mean}");
    }

    #[test]
    fn isotropic_increment_covariance() {
        let mut c = cfg(FrameKind::Isotropic, 0.8, 100_000, 1);
        c.t_f = 0.01;
        let e = simulate(&c, Initial::Point(GroupPoint::new(0.0, 0.0, 0.0)), None).unwrap();
        let n = e.terminal.len() as f64;
        let target = 0.8 * 0.01;
        for a in 0..3 {
            for b in 0..3 {
                let cov: f64 = e.terminal.iter().map(|q| q.to_array()[a] * q.to_array()[b]).sum::<f64>() / n;
                if a == b {
                    assert!((cov / target - 1.0).abs() < 0.05, "{a}{b} {cov}");
                } else {
                    assert!(cov.abs() < 0.05 * target, "{a}{b} {cov}");
                }
            }
        }
    }

    #[test]
    fn sampler_follows_the_density() {
        let grid = Grid3D::default_grid();
        let mut d = ScalarField::constant(grid, 0.0, FieldKind::Density);
        d.values[grid.index(3, 4, 5)] = 1.0;
        d.values[grid.index(10, 10, 10)] = 3.0;
        let pts = sample_density(&d, 40_000, 1).unwrap();
        let h = histogram(&pts, &grid);
        let w = grid.cell_weight();
        let f = h.values[grid.index(10, 10, 10)] * w;
        assert!((f - 0.75).abs() < 0.01, "{f}");
        assert!((h.mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn escapes_beyond_one_percent_fail_the_run() {
        let mut c = cfg(FrameKind::Heisenberg, 1.0, 1000, 10);
        c.box_lo = [-0.01; 3];
        c.box_hi = [0.01; 3];
        let err = simulate(&c, Initial::Point(GroupPoint::new(0.0, 0.0, 0.0)), None).unwrap_err();
        assert!(matches!(err, Error::ParticlesEscaped { .. }));
    }

    #[test]
    fn zero_control_costs_nothing() {
        let c = cfg(FrameKind::Heisenberg, 1.0, 100, 10);
        let e = simulate(&c, Initial::Point(GroupPoint::new(0.0, 0.0, 0.0)), None).unwrap();
        assert_eq!(pathwise_cost(&e).0, 0.0);
    }
}
