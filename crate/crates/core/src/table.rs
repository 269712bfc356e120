//! Tabulated heat kernel on `(ρ, |z̃|)` with interpolation and renormalization.
//!
//! Values are stored as `ln p`. A lookup adds the exact leading exponent
//! `−d²(ρ, z̃)/(2εt)` to a bilinearly interpolated remainder
//! `ln p + d²/(2εt)`, which is smooth and of order one even when `p` spans
//! thousands of e-folds across the table.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{read_f64le, read_json, write_f64le, write_json};
use crate::group::GroupPoint;
use crate::kernel::{leading_exponent, KernelEvaluator, KernelFormula, QuadratureSpec};
use crate::quadrature::GaussLegendre;

/// Axis on `[0, max]` with `n` nodes at `scale·sinh(i·du)`: spacing about
/// `scale·du` near zero and geometric (ratio `e^du`) far from it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub max: f64,
    pub n: usize,
    pub scale: f64,
}

impl Axis {
    pub fn new(max: f64, n: usize, scale: f64) -> Self {
        Axis { max, n, scale }
    }

    fn du(&self) -> f64 {
        (self.max / self.scale).asinh() / (self.n - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i + 1 == self.n {
            self.max
        } else {
            self.scale * (i as f64 * self.du()).sinh()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.node(i)).collect()
    }
}

/// Precomputed node positions for fast cell location.
#[derive(Debug, Clone)]
struct AxisIndex {
    nodes: Vec<f64>,
    inv_scale: f64,
    inv_du: f64,
}

impl AxisIndex {
    fn new(axis: &Axis) -> Self {
        AxisIndex { nodes: axis.nodes(), inv_scale: 1.0 / axis.scale, inv_du: 1.0 / axis.du() }
    }

    /// Cell index, fraction within the cell, and whether `v` was inside the axis.
    #[inline]
    fn locate(&self, v: f64) -> (usize, f64, bool) {
        let n = self.nodes.len();
        let max = self.nodes[n - 1];
        let inside = v <= max;
        let v = v.min(max);
        let mut i = (((v * self.inv_scale).asinh() * self.inv_du) as usize).min(n - 2);
        while i > 0 && self.nodes[i] > v {
            i -= 1;
        }
        while i + 2 < n && self.nodes[i + 1] <= v {
            i += 1;
        }
        let f = (v - self.nodes[i]) / (self.nodes[i + 1] - self.nodes[i]);
        (i, f, inside)
    }
}

/// Sizing and resolution of a table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableSpec {
    pub rho_max: f64,
    pub ztilde_max: f64,
    pub n_rho: usize,
    pub n_z: usize,
}

impl TableSpec {
    /// Axes covering every relative offset between nodes of `grid`.
    pub fn for_grid(grid: &crate::grid::Grid3D, alpha: f64, n_rho: usize, n_z: usize) -> Self {
        let up = grid.upper();
        let lx = up[0] - grid.origin[0];
        let ly = up[1] - grid.origin[1];
        let lz = up[2] - grid.origin[2];
        let mx = grid.origin[0].abs().max(up[0].abs());
        let my = grid.origin[1].abs().max(up[1].abs());
        // |x'y − y'x| ≤ 2·max|x|·max|y| over the box.
        let twist = 2.0 * alpha * 2.0 * mx * my;
        TableSpec {
            rho_max: lx.hypot(ly) * (1.0 + 1e-9),
            ztilde_max: (lz + twist) * (1.0 + 1e-9),
            n_rho,
            n_z,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.rho_max > 0.0 && self.ztilde_max > 0.0) || self.n_rho < 8 || self.n_z < 8 {
            return Err(Error::InvalidArgument(
                "table axes must be positive with at least 8 nodes each".into(),
            ));
        }
        Ok(())
    }
}

/// Everything besides `(t, ε)` that fixes a table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableSettings {
    pub alpha: f64,
    pub spec: TableSpec,
    pub quad: QuadratureSpec,
    pub formula: KernelFormula,
}

impl TableSettings {
    pub fn tabulate(&self, t: f64, epsilon: f64) -> Result<KernelTable> {
        tabulate_with(t, epsilon, self.alpha, self.spec, self.quad, self.formula)
    }
}

/// Tables shared across the solver and the bridge, keyed by `(t, ε)`.
#[derive(Debug)]
pub struct TableCache {
    pub settings: TableSettings,
    tables: Mutex<HashMap<(u64, u64), Arc<KernelTable>>>,
}

impl TableCache {
    pub fn new(settings: TableSettings) -> Self {
        TableCache { settings, tables: Mutex::new(HashMap::new()) }
    }

    pub fn get(&self, t: f64, epsilon: f64) -> Result<Arc<KernelTable>> {
        let key = (t.to_bits(), epsilon.to_bits());
        if let Some(tab) = self.tables.lock().expect("table cache poisoned").get(&key) {
            return Ok(Arc::clone(tab));
        }
        let tab = Arc::new(self.settings.tabulate(t, epsilon)?);
        log::debug!("tabulated t={t} eps={epsilon} renorm={}", tab.renorm);
        self.tables.lock().expect("table cache poisoned").insert(key, Arc::clone(&tab));
        Ok(tab)
    }

    /// Cached tables sorted by `(ε, t)`.
    pub fn tables(&self) -> Vec<Arc<KernelTable>> {
        let mut v: Vec<Arc<KernelTable>> = self.tables.lock().expect("table cache poisoned").values().cloned().collect();
        v.sort_by(|a, b| a.epsilon.total_cmp(&b.epsilon).then(a.t.total_cmp(&b.t)));
        v
    }
}

#[derive(Debug)]
pub struct KernelTable {
    pub t: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub formula: KernelFormula,
    pub quad: QuadratureSpec,
    pub rho_axis: Axis,
    pub ztilde_axis: Axis,
    rho_index: AxisIndex,
    z_index: AxisIndex,
    log_values: Vec<f64>,
    remainder: Vec<f64>,
    pub renorm: f64,
    log_renorm: f64,
    out_of_domain: AtomicU64,
}

impl Clone for KernelTable {
    fn clone(&self) -> Self {
        KernelTable {
            t: self.t,
            epsilon: self.epsilon,
            alpha: self.alpha,
            formula: self.formula,
            quad: self.quad,
            rho_axis: self.rho_axis,
            ztilde_axis: self.ztilde_axis,
            rho_index: self.rho_index.clone(),
            z_index: self.z_index.clone(),
            log_values: self.log_values.clone(),
            remainder: self.remainder.clone(),
            renorm: self.renorm,
            log_renorm: self.log_renorm,
            out_of_domain: AtomicU64::new(self.out_of_domain.load(Ordering::Relaxed)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TableMeta {
    t: f64,
    epsilon: f64,
    alpha: f64,
    formula: KernelFormula,
    quadrature: QuadratureSpec,
    rho_axis: Axis,
    ztilde_axis: Axis,
    renorm: f64,
    encoding: String,
    order: String,
}

/// Tabulate `p_{t,ε}(0, (ρ, 0, z̃))` on graded axes and compute the renormalization.
pub fn tabulate(t: f64, epsilon: f64, alpha: f64, spec: TableSpec, quad: QuadratureSpec) -> Result<KernelTable> {
    tabulate_with(t, epsilon, alpha, spec, quad, KernelFormula::Exact)
}

pub fn tabulate_with(
    t: f64,
    epsilon: f64,
    alpha: f64,
    spec: TableSpec,
    quad: QuadratureSpec,
    formula: KernelFormula,
) -> Result<KernelTable> {
    spec.validate()?;
    let ev = KernelEvaluator::with_formula(t, epsilon, alpha, quad, formula)?;
    let (rho_scale, z_scale) = grading_scales(t, epsilon, alpha, formula);
    let rho_axis = Axis::new(spec.rho_max, spec.n_rho, rho_scale);
    let ztilde_axis = Axis::new(spec.ztilde_max, spec.n_z, z_scale);
    let zs = ztilde_axis.nodes();
    let rows: Vec<Result<Vec<f64>>> = (0..spec.n_rho)
        .into_par_iter()
        .map(|i| {
            let r = rho_axis.node(i);
            zs.iter().map(|&z| ev.log_density(r * r, z)).collect()
        })
        .collect();
    let mut log_values = Vec::with_capacity(spec.n_rho * spec.n_z);
    for row in rows {
        log_values.extend(row?);
    }
    KernelTable::from_log_values(t, epsilon, alpha, formula, quad, rho_axis, ztilde_axis, log_values, None)
}

impl KernelTable {
    #[allow(clippy::too_many_arguments)]
    fn from_log_values(
        t: f64,
        epsilon: f64,
        alpha: f64,
        formula: KernelFormula,
        quad: QuadratureSpec,
        rho_axis: Axis,
        ztilde_axis: Axis,
        log_values: Vec<f64>,
        renorm: Option<f64>,
    ) -> Result<Self> {
        if let Some((idx, v)) = log_values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonPositiveKernel {
                value: v.exp(),
                rho: rho_axis.node(idx / ztilde_axis.n),
                z: ztilde_axis.node(idx % ztilde_axis.n),
            });
        }
        let mut remainder = Vec::with_capacity(log_values.len());
        for i in 0..rho_axis.n {
            let r = rho_axis.node(i);
            for j in 0..ztilde_axis.n {
                let lead = leading_exponent(r * r, ztilde_axis.node(j), t, epsilon, alpha, formula);
                remainder.push(log_values[i * ztilde_axis.n + j] - lead);
            }
        }
        let mut table = KernelTable {
            t,
            epsilon,
            alpha,
            formula,
            quad,
            rho_axis,
            ztilde_axis,
            rho_index: AxisIndex::new(&rho_axis),
            z_index: AxisIndex::new(&ztilde_axis),
            log_values,
            remainder,
            renorm: 1.0,
            log_renorm: 0.0,
            out_of_domain: AtomicU64::new(0),
        };
        let renorm = match renorm {
            Some(r) => r,
            None => 1.0 / table.integral(),
        };
        if !(renorm > 0.0 && renorm.is_finite()) {
            return Err(Error::DegenerateMass { captured: 1.0 / renorm, required: 0.0 });
        }
        table.renorm = renorm;
        table.log_renorm = renorm.ln();
        Ok(table)
    }

    /// Stored `ln p` at node `(i, j)`.
    pub fn log_value_at(&self, i: usize, j: usize) -> f64 {
        self.log_values[i * self.ztilde_axis.n + j]
    }

    pub fn value_at(&self, i: usize, j: usize) -> f64 {
        self.log_value_at(i, j).exp()
    }

    pub fn log_values(&self) -> &[f64] {
        &self.log_values
    }

    /// Interpolated `ln p` (not renormalized) at planar radius `rho` and offset `ztilde`.
    #[inline]
    pub fn log_lookup(&self, rho: f64, ztilde: f64) -> f64 {
        let z = ztilde.abs();
        let (i, fr, in_r) = self.rho_index.locate(rho);
        let (j, fz, in_z) = self.z_index.locate(z);
        if !(in_r && in_z) {
            self.out_of_domain.fetch_add(1, Ordering::Relaxed);
        }
        let nz = self.ztilde_axis.n;
        if fr == 0.0 && fz == 0.0 && in_r && in_z {
            return self.log_values[i * nz + j];
        }
        let r00 = self.remainder[i * nz + j];
        let r01 = self.remainder[i * nz + j + 1];
        let r10 = self.remainder[(i + 1) * nz + j];
        let r11 = self.remainder[(i + 1) * nz + j + 1];
        let rem = (1.0 - fr) * ((1.0 - fz) * r00 + fz * r01) + fr * ((1.0 - fz) * r10 + fz * r11);
        leading_exponent(rho * rho, z, self.t, self.epsilon, self.alpha, self.formula) + rem
    }

    /// Renormalized `ln p̃ = ln p + ln renorm`.
    #[inline]
    pub fn log_kernel(&self, rho: f64, ztilde: f64) -> f64 {
        self.log_lookup(rho, ztilde) + self.log_renorm
    }

    /// Renormalized kernel from the identity to `q`.
    pub fn lookup(&self, q: GroupPoint) -> f64 {
        self.log_kernel(q.planar_norm(), q.z).exp()
    }

    /// Renormalized `p̃(q0, q)` through the group law.
    pub fn lookup_pair(&self, q0: GroupPoint, q: GroupPoint) -> f64 {
        self.lookup(crate::group::relative(q0, q, self.alpha))
    }

    pub fn log_renorm(&self) -> f64 {
        self.log_renorm
    }

    /// Number of lookups clamped to the table domain so far.
    pub fn out_of_domain_count(&self) -> u64 {
        self.out_of_domain.load(Ordering::Relaxed)
    }

    pub fn reset_warnings(&self) {
        self.out_of_domain.store(0, Ordering::Relaxed);
    }

    /// Integral of the interpolated kernel over the cylinder `ρ ≤ ρmax, |z̃| ≤ z̃max`.
    fn integral(&self) -> f64 {
        let r_edges = &self.rho_index.nodes;
        let z_edges = &self.z_index.nodes;
        let gl = GaussLegendre::new(6);
        let peak = self.log_lookup(0.0, 0.0);
        let rem_max = self.remainder.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let cut = 45.0;
        let mut panel_sums = Vec::new();
        for rp in r_edges.windows(2) {
            let lead_r = leading_exponent(rp[0] * rp[0], 0.0, self.t, self.epsilon, self.alpha, self.formula);
            if lead_r + rem_max - peak < -cut {
                break;
            }
            for zp in z_edges.windows(2) {
                let lead =
                    leading_exponent(rp[0] * rp[0], zp[0], self.t, self.epsilon, self.alpha, self.formula);
                if lead + rem_max - peak < -cut {
                    break;
                }
                let s: f64 = gl.integrate(rp[0], rp[1], |r| {
                    gl.integrate(zp[0], zp[1], |z| (self.log_lookup(r, z) - peak).exp()) * r
                });
                panel_sums.push(s);
            }
        }
        let s = crate::numeric::pairwise_sum(&panel_sums);
        4.0 * std::f64::consts::PI * s * peak.exp()
    }

    /// Write `dir/meta.json` and `dir/values.f64le` (`ln p`, ρ rows, z̃ fastest).
    pub fn write_bundle(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = TableMeta {
            t: self.t,
            epsilon: self.epsilon,
            alpha: self.alpha,
            formula: self.formula,
            quadrature: self.quad,
            rho_axis: self.rho_axis,
            ztilde_axis: self.ztilde_axis,
            renorm: self.renorm,
            encoding: "ln".into(),
            order: "rho-major, ztilde-fastest".into(),
        };
        write_json(&dir.join("meta.json"), &meta)?;
        write_f64le(&dir.join("values.f64le"), &self.log_values)
    }

    pub fn read_bundle(dir: &Path) -> Result<Self> {
        let meta: TableMeta = read_json(&dir.join("meta.json"))?;
        if meta.encoding != "ln" {
            return Err(Error::Config(format!("unsupported table encoding {:?}", meta.encoding)));
        }
        let values = read_f64le(&dir.join("values.f64le"))?;
        if values.len() != meta.rho_axis.n * meta.ztilde_axis.n {
            return Err(Error::Config("table value count does not match its axes".into()));
        }
        Self::from_log_values(
            meta.t,
            meta.epsilon,
            meta.alpha,
            meta.formula,
            meta.quadrature,
            meta.rho_axis,
            meta.ztilde_axis,
            values,
            Some(meta.renorm),
        )
    }
}

/// Grading scales of the `ρ` and `z̃` axes: a fraction of the smallest
/// length on which the kernel varies near the origin.
fn grading_scales(t: f64, epsilon: f64, alpha: f64, formula: KernelFormula) -> (f64, f64) {
    let et = epsilon * t;
    let vertical = match formula {
        KernelFormula::Exact => alpha * et,
        KernelFormula::Printed => 0.5 * et,
    };
    (0.25 * et.sqrt().min(et), 0.25 * vertical)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid3D;

    fn small_spec() -> TableSpec {
        TableSpec { rho_max: 6.0, ztilde_max: 8.0, n_rho: 64, n_z: 64 }
    }

    #[test]
    fn node_lookup_matches_direct_evaluation() {
        let tab = tabulate(0.5, 1.0, 0.25, small_spec(), QuadratureSpec::default()).unwrap();
        let ev = KernelEvaluator::new(0.5, 1.0, 0.25, QuadratureSpec::default()).unwrap();
        for (i, j) in [(0, 0), (3, 17), (40, 2), (63, 63)] {
            let r = tab.rho_axis.node(i);
            let z = tab.ztilde_axis.node(j);
            assert_eq!(tab.log_lookup(r, z), ev.log_density(r * r, z).unwrap());
        }
        assert_eq!(tab.out_of_domain_count(), 0);
    }

    #[test]
    fn clamped_lookups_are_counted() {
        let tab = tabulate(0.5, 1.0, 0.25, small_spec(), QuadratureSpec::default()).unwrap();
        let v = tab.log_lookup(7.0, 1.0);
        assert!(v.is_finite());
        tab.log_lookup(1.0, -9.0);
        assert_eq!(tab.out_of_domain_count(), 2);
    }

    #[test]
    fn default_renorm_is_near_one() {
        let g = Grid3D::default_grid();
        let spec = TableSpec::for_grid(&g, 0.25, 96, 96);
        let tab = tabulate(1.0, 1.0, 0.25, spec, QuadratureSpec::default()).unwrap();
        assert!((0.5..=2.0).contains(&tab.renorm), "renorm {}", tab.renorm);
        assert!((tab.renorm - 1.0).abs() < 1e-3, "renorm {}", tab.renorm);
    }

    #[test]
    fn bundle_round_trip() {
        let tab = tabulate(0.5, 1.0, 0.25, small_spec(), QuadratureSpec::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        tab.write_bundle(dir.path()).unwrap();
        let back = KernelTable::read_bundle(dir.path()).unwrap();
        assert_eq!(back.log_values(), tab.log_values());
        assert_eq!(back.renorm, tab.renorm);
        assert_eq!(back.log_lookup(1.234, 0.567), tab.log_lookup(1.234, 0.567));
    }
}
