//! Space-time bridge from converged potentials.
//!
//! `φ(t) = Q_{t_f−t} φ_f`, `φ̂(t) = P_t φ̂₀`, `ρ(t) = φ(t) φ̂(t)` and the
//! horizontal control `u = ε gᵀ ∇ ln φ`. Potentials are kept as logarithms.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FieldKind, Grid3D, ScalarField};
use crate::group::{frame_at, stratonovich_drift, GroupPoint, HorizontalFrame};
use crate::numeric::pairwise_sum;
use crate::operator::LogOperator;
use crate::sinkhorn::Potentials;

/// Endpoint L¹ errors above this signal inconsistent tables.
pub const ENDPOINT_MISMATCH_L1: f64 = 1e-2;

/// Control vectors on grid nodes; entries past `m` are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlField {
    pub grid: Grid3D,
    pub m: usize,
    pub values: Vec<[f64; 3]>,
}

impl ControlField {
    pub fn zeros(grid: Grid3D, m: usize) -> Self {
        ControlField { grid, m, values: vec![[0.0; 3]; grid.len()] }
    }

    /// Trilinear interpolation, clamped to the grid box.
    pub fn interpolate(&self, p: GroupPoint) -> [f64; 3] {
        let (idx, w) = trilinear_stencil(&self.grid, p);
        let mut out = [0.0; 3];
        for (i, wi) in idx.iter().zip(w) {
            let v = self.values[*i];
            for c in 0..3 {
                out[c] += wi * v[c];
            }
        }
        out
    }

    /// `½ Σ ‖u‖² ρ w`.
    pub fn energy(&self, rho: &ScalarField) -> f64 {
        let terms: Vec<f64> = self
            .values
            .iter()
            .zip(&rho.values)
            .map(|(u, r)| 0.5 * (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]) * r)
            .collect();
        pairwise_sum(&terms) * self.grid.cell_weight()
    }
}

pub(crate) fn trilinear_stencil(grid: &Grid3D, p: GroupPoint) -> ([usize; 8], [f64; 8]) {
    let c = p.to_array();
    let mut lo = [0usize; 3];
    let mut fr = [0.0f64; 3];
    for a in 0..3 {
        let n = grid.dims[a];
        let s = ((c[a] - grid.origin[a]) / grid.spacing[a]).clamp(0.0, (n - 1) as f64);
        let i = (s.floor() as usize).min(n.saturating_sub(2));
        lo[a] = i;
        fr[a] = s - i as f64;
    }
    let mut idx = [0usize; 8];
    let mut w = [0.0f64; 8];
    for corner in 0..8 {
        let d = [corner >> 2 & 1, corner >> 1 & 1, corner & 1];
        let mut wt = 1.0;
        for a in 0..3 {
            wt *= if d[a] == 1 { fr[a] } else { 1.0 - fr[a] };
        }
        idx[corner] = grid.index(lo[0] + d[0], lo[1] + d[1], lo[2] + d[2]);
        w[corner] = wt;
    }
    (idx, w)
}

/// Gradient of a nodal field: second-order central differences inside,
/// second-order one-sided differences on the faces.
pub fn gradient(field: &ScalarField) -> Vec<[f64; 3]> {
    let g = field.grid;
    let f = &field.values;
    let mut out = vec![[0.0; 3]; g.len()];
    for (idx, o) in out.iter_mut().enumerate() {
        let (i, j, k) = g.unravel(idx);
        let ijk = [i, j, k];
        for a in 0..3 {
            let n = g.dims[a];
            let h = g.spacing[a];
            let at = |s: usize| {
                let mut c = ijk;
                c[a] = s;
                f[g.index(c[0], c[1], c[2])]
            };
            let s = ijk[a];
            o[a] = if s == 0 {
                (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h)
            } else if s == n - 1 {
                (3.0 * at(n - 1) - 4.0 * at(n - 2) + at(n - 3)) / (2.0 * h)
            } else {
                (at(s + 1) - at(s - 1)) / (2.0 * h)
            };
        }
    }
    out
}

/// `u = ε gᵀ ∇ ln φ` from `ln φ`.
pub fn control_from_log(log_phi: &ScalarField, epsilon: f64, frame: &HorizontalFrame) -> ControlField {
    let grad = gradient(log_phi);
    let g = log_phi.grid;
    let values = grad
        .iter()
        .enumerate()
        .map(|(idx, d)| {
            let u = frame_at(frame, g.point(idx)).apply_transpose(*d);
            u.map(|c| epsilon * c)
        })
        .collect();
    ControlField { grid: g, m: frame.m, values }
}

/// `u = ε gᵀ ∇ ln φ` from a strictly positive `φ`.
pub fn control_field(phi: &ScalarField, epsilon: f64, frame: &HorizontalFrame) -> Result<ControlField> {
    if phi.values.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidArgument("control_field needs a strictly positive potential".into()));
    }
    let log_phi = phi.map(FieldKind::LogPotential, f64::ln);
    Ok(control_from_log(&log_phi, epsilon, frame))
}

/// `D_KL(π‖r)` for the discrete endpoint coupling
/// `π(x,y) = φ̂₀(x) p(x,y) φ_f(y) w²` against the reference
/// `r(x,y) = ρ₀(x) p(x,y) w² / s(x)`, where `s(x) = Σ_y p(x,y) w`.
///
/// Dividing by the row sums makes `r` a Markov coupling on the grid with
/// first marginal `ρ₀`. At small `εt` the point-sampled kernel rows sum to far
/// more than one and the unnormalized reference would inflate the divergence
/// by `|r| − 1`.
///
/// Computed in the generalized form `Σ π ln(π/r) − |π| + |r|`, which is
/// nonnegative for any positive measures.
pub fn static_kl<O: LogOperator>(potentials: &Potentials, op: &O, rho_0: &ScalarField) -> Result<f64> {
    let n = op.len();
    let lh = &potentials.log_phihat_0.values;
    let lf = &potentials.log_phi_f.values;
    if lh.len() != n || lf.len() != n || rho_0.values.len() != n {
        return Err(Error::InvalidArgument("potentials do not match the operator".into()));
    }
    let w = op.cell_weight();
    let lq = op.apply_q_log(lf);
    let lp = op.apply_p_log(lh);
    let ones = vec![0.0; n];
    let lq1 = op.apply_q_log(&ones);
    let mut terms = Vec::with_capacity(3 * n);
    let mut mass_pi = Vec::with_capacity(n);
    let mut mass_r = Vec::with_capacity(n);
    for i in 0..n {
        let r0 = rho_0.values[i];
        // x-marginal of π and its log-ratio part
        let pi0 = (lh[i] + lq[i]).exp();
        if pi0 > 0.0 {
            terms.push(pi0 * (lh[i] + lq1[i] - r0.ln()));
        }
        let pif = (lf[i] + lp[i]).exp();
        if pif > 0.0 {
            terms.push(pif * lf[i]);
        }
        mass_pi.push(pi0);
        mass_r.push(r0);
    }
    Ok((pairwise_sum(&terms) - pairwise_sum(&mass_pi) + pairwise_sum(&mass_r)) * w)
}

/// The reconstructed bridge for one ε.
#[derive(Debug, Clone)]
pub struct BridgeSolution {
    pub epsilon: f64,
    pub t_f: f64,
    pub times: Vec<f64>,
    pub log_phi: Vec<ScalarField>,
    pub log_phihat: Vec<ScalarField>,
    /// Unit-mass densities.
    pub rho: Vec<ScalarField>,
    /// `∫ φ φ̂` before renormalization.
    pub raw_mass: Vec<f64>,
    pub control: Vec<ControlField>,
    /// L¹ distances of `ρ(0)` to `ρ₀` and of `ρ(t_f)` to `ρ_f` (after renormalization).
    pub endpoint_l1: (f64, f64),
    pub cost: f64,
    pub kl_static: f64,
}

impl BridgeSolution {
    pub fn mass_drift(&self) -> Vec<f64> {
        self.raw_mass.iter().map(|m| m - 1.0).collect()
    }

    pub fn max_mass_drift(&self) -> f64 {
        self.raw_mass.iter().map(|m| (m - 1.0).abs()).fold(0.0, f64::max)
    }

    /// Index of the sample interval holding `t` (piecewise-constant in time).
    pub fn sample_index(&self, t: f64) -> usize {
        match self.times.iter().rposition(|&s| s <= t + 1e-12) {
            Some(i) => i.min(self.times.len() - 1),
            None => 0,
        }
    }

    pub fn summary(&self) -> BridgeSummary {
        BridgeSummary {
            epsilon: self.epsilon,
            cost: self.cost,
            kl_static: self.kl_static,
            eps_kl_static: self.epsilon * self.kl_static,
            endpoint_l1: [self.endpoint_l1.0, self.endpoint_l1.1],
            times: self.times.clone(),
            mass_drift: self.mass_drift(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeSummary {
    pub epsilon: f64,
    pub cost: f64,
    pub kl_static: f64,
    pub eps_kl_static: f64,
    pub endpoint_l1: [f64; 2],
    pub times: Vec<f64>,
    pub mass_drift: Vec<f64>,
}

/// `j·t_f/n` for `j = 0..=n`.
pub fn uniform_times(t_f: f64, n_intervals: usize) -> Vec<f64> {
    (0..=n_intervals).map(|j| t_f * j as f64 / n_intervals as f64).collect()
}

/// Trapezoidal rule on possibly non-uniform samples.
pub fn trapezoid(times: &[f64], values: &[f64]) -> f64 {
    times
        .windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum()
}

/// Rebuild the bridge at `times` (which must include `0` and `t_f`).
///
/// `operator_for(gap)` supplies the operator for a propagation time; each
/// distinct gap is requested once and serves both `Q` (for `φ` at
/// `t_f − gap`) and `P` (for `φ̂` at `gap`).
pub fn reconstruct<O, F>(
    potentials: &Potentials,
    rho_0: &ScalarField,
    rho_f: &ScalarField,
    t_f: f64,
    times: &[f64],
    frame: &HorizontalFrame,
    mut operator_for: F,
) -> Result<BridgeSolution>
where
    O: LogOperator,
    F: FnMut(f64) -> Result<O>,
{
    let tol = 1e-12 * t_f.max(1.0);
    if times.len() < 2
        || times[0].abs() > tol
        || (times[times.len() - 1] - t_f).abs() > tol
        || times.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(Error::InvalidArgument("times must increase from 0 to t_f".into()));
    }
    let grid = potentials.log_phi_f.grid;
    let nt = times.len();
    let eps = potentials.epsilon;
    let lf = &potentials.log_phi_f.values;
    let lh = &potentials.log_phihat_0.values;

    // gap (as ordered bits) -> (sample needing Q, sample needing P)
    let mut gaps: BTreeMap<u64, (f64, Option<usize>, Option<usize>)> = BTreeMap::new();
    let key = |g: f64| (g / tol).round() as u64;
    for (j, &t) in times.iter().enumerate() {
        let back = t_f - t;
        if back > tol {
            gaps.entry(key(back)).or_insert((back, None, None)).1 = Some(j);
        }
        if t > tol {
            gaps.entry(key(t)).or_insert((t, None, None)).2 = Some(j);
        }
    }
    let mut log_phi: Vec<Option<Vec<f64>>> = vec![None; nt];
    let mut log_phihat: Vec<Option<Vec<f64>>> = vec![None; nt];
    log_phi[nt - 1] = Some(lf.clone());
    log_phihat[0] = Some(lh.clone());
    let mut kl_static = None;
    for (_, (gap, q_at, p_at)) in gaps {
        let op = operator_for(gap)?;
        if op.len() != grid.len() {
            return Err(Error::InvalidArgument("operator grid differs from the potentials".into()));
        }
        if let Some(j) = q_at {
            log_phi[j] = Some(op.apply_q_log(lf));
        }
        if let Some(j) = p_at {
            log_phihat[j] = Some(op.apply_p_log(lh));
        }
        if (gap - t_f).abs() <= tol {
            kl_static = Some(static_kl(potentials, &op, rho_0)?);
        }
    }
    let kl_static = kl_static.ok_or_else(|| Error::InvalidArgument("no operator for t_f".into()))?;

    let w = grid.cell_weight();
    let mut rho = Vec::with_capacity(nt);
    let mut raw_mass = Vec::with_capacity(nt);
    let mut phis = Vec::with_capacity(nt);
    let mut phihats = Vec::with_capacity(nt);
    for j in 0..nt {
        let a = log_phi[j].take().expect("every sample has a backward potential");
        let b = log_phihat[j].take().expect("every sample has a forward potential");
        let vals: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x + y).exp()).collect();
        let mass = pairwise_sum(&vals) * w;
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::EndpointMismatch { time: times[j], l1: f64::INFINITY });
        }
        log::debug!("bridge eps={eps} t={}: raw mass {mass:.9}", times[j]);
        let mut r = ScalarField { grid, values: vals, kind: FieldKind::Density };
        for v in &mut r.values {
            *v /= mass;
        }
        rho.push(r);
        raw_mass.push(mass);
        phis.push(ScalarField { grid, values: a, kind: FieldKind::LogPotential });
        phihats.push(ScalarField { grid, values: b, kind: FieldKind::LogPotential });
    }
    let endpoint_l1 = (rho[0].l1_distance(rho_0), rho[nt - 1].l1_distance(rho_f));
    for (time, l1) in [(times[0], endpoint_l1.0), (times[nt - 1], endpoint_l1.1)] {
        if !(l1 <= ENDPOINT_MISMATCH_L1) {
            return Err(Error::EndpointMismatch { time, l1 });
        }
    }
    let control: Vec<ControlField> = phis.iter().map(|lp| control_from_log(lp, eps, frame)).collect();
    let energies: Vec<f64> = control.iter().zip(&rho).map(|(u, r)| u.energy(r)).collect();
    let cost = trapezoid(times, &energies);
    Ok(BridgeSolution {
        epsilon: eps,
        t_f,
        times: times.to_vec(),
        log_phi: phis,
        log_phihat: phihats,
        rho,
        raw_mass,
        control,
        endpoint_l1,
        cost,
        kl_static,
    })
}

/// `½ ∫ Σ ‖u‖² ρ w dt` by the trapezoidal rule over the bridge samples.
pub fn transport_cost(bridge: &BridgeSolution) -> f64 {
    let e: Vec<f64> = bridge.control.iter().zip(&bridge.rho).map(|(u, r)| u.energy(r)).collect();
    trapezoid(&bridge.times, &e)
}

/// One sample of the weak Fokker–Planck check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FokkerPlanckSample {
    pub t: f64,
    /// Central difference of `∫ ψ ρ(t)`.
    pub lhs: f64,
    /// `∫ (b·∇ψ + (g u)·∇ψ + (ε/2) tr(G ∇²ψ)) ρ(t)`.
    pub rhs: f64,
}

impl FokkerPlanckSample {
    pub fn relative_error(&self) -> f64 {
        (self.lhs - self.rhs).abs() / self.rhs.abs().max(self.lhs.abs())
    }
}

/// Gaussian test function `ψ(q) = exp(−|q − c|²/(2s²))` with its gradient and Hessian.
fn gaussian_test(c: GroupPoint, s: f64, p: GroupPoint) -> (f64, [f64; 3], [[f64; 3]; 3]) {
    let d = [p.x - c.x, p.y - c.y, p.z - c.z];
    let s2 = s * s;
    let psi = (-(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) / (2.0 * s2)).exp();
    let grad = d.map(|v| -v / s2 * psi);
    let mut hess = [[0.0; 3]; 3];
    for (a, row) in hess.iter_mut().enumerate() {
        for (b, e) in row.iter_mut().enumerate() {
            let delta = if a == b { 1.0 } else { 0.0 };
            *e = (d[a] * d[b] / (s2 * s2) - delta / s2) * psi;
        }
    }
    (psi, grad, hess)
}

/// Weak Fokker–Planck residuals at every interior sample for a Gaussian test
/// function of width `width` centred at `center`.
pub fn fokker_planck_check(
    bridge: &BridgeSolution,
    frame: &HorizontalFrame,
    center: GroupPoint,
    width: f64,
) -> Vec<FokkerPlanckSample> {
    let grid = bridge.rho[0].grid;
    let w = grid.cell_weight();
    let eps = bridge.epsilon;
    let pts: Vec<GroupPoint> = grid.points().collect();
    let tests: Vec<(f64, [f64; 3], [[f64; 3]; 3])> = pts.iter().map(|&p| gaussian_test(center, width, p)).collect();
    let moment = |r: &ScalarField| pairwise_sum(&r.values.iter().zip(&tests).map(|(v, t)| v * t.0).collect::<Vec<_>>()) * w;
    let m: Vec<f64> = bridge.rho.iter().map(moment).collect();
    let nt = bridge.times.len();
    let mut out = Vec::new();
    for j in 1..nt.saturating_sub(1) {
        let lhs = (m[j + 1] - m[j - 1]) / (bridge.times[j + 1] - bridge.times[j - 1]);
        let terms: Vec<f64> = pts
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let (_, gr, he) = tests[i];
                let g = frame_at(frame, p);
                let u = bridge.control[j].values[i];
                let v = g.apply(&u[..g.m]);
                let b = stratonovich_drift(frame, p, eps);
                let mut gen = 0.0;
                for a in 0..3 {
                    gen += (b[a] + v[a]) * gr[a];
                }
                let mut tr = 0.0;
                for col in g.cols.iter().take(g.m) {
                    for a in 0..3 {
                        for c in 0..3 {
                            tr += col[a] * he[a][c] * col[c];
                        }
                    }
                }
                (gen + 0.5 * eps * tr) * bridge.rho[j].values[i]
            })
            .collect();
        out.push(FokkerPlanckSample { t: bridge.times[j], lhs, rhs: pairwise_sum(&terms) * w });
    }
    out
}
