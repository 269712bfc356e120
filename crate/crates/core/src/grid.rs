//! Regular 3D grids, scalar fields on them, and the boundary densities.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group::GroupPoint;
use crate::numeric::{normal_cdf, pairwise_sum};
use crate::quadrature::GaussLegendre;

/// Largest point count accepted unless a caller raises the cap.
pub const DEFAULT_POINT_CAP: usize = 24 * 24 * 24;

/// Cell-centred uniform grid; node `(i, j, k)` sits at `origin + (i, j, k) * spacing`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid3D {
    pub origin: [f64; 3],
    pub spacing: [f64; 3],
    pub dims: [usize; 3],
}

impl Grid3D {
    pub fn new(origin: [f64; 3], spacing: [f64; 3], dims: [usize; 3]) -> Result<Self> {
        Self::with_cap(origin, spacing, dims, DEFAULT_POINT_CAP)
    }

    pub fn with_cap(origin: [f64; 3], spacing: [f64; 3], dims: [usize; 3], cap: usize) -> Result<Self> {
        for a in 0..3 {
            if dims[a] < 8 {
                return Err(Error::InvalidArgument(format!("grid dimension {a} must be >= 8, got {}", dims[a])));
            }
            if !(spacing[a] > 0.0 && spacing[a].is_finite()) || !origin[a].is_finite() {
                return Err(Error::InvalidArgument(format!("grid axis {a} has invalid origin/spacing")));
            }
        }
        let n = dims[0] * dims[1] * dims[2];
        if n > cap {
            return Err(Error::InvalidArgument(format!("grid has {n} points, cap is {cap}")));
        }
        Ok(Grid3D { origin, spacing, dims })
    }

    /// Nodes spanning `[lo, hi]` inclusive on each axis.
    pub fn from_bounds(lo: [f64; 3], hi: [f64; 3], dims: [usize; 3]) -> Result<Self> {
        Self::from_bounds_with_cap(lo, hi, dims, DEFAULT_POINT_CAP)
    }

    pub fn from_bounds_with_cap(lo: [f64; 3], hi: [f64; 3], dims: [usize; 3], cap: usize) -> Result<Self> {
        let mut spacing = [0.0; 3];
        for a in 0..3 {
            if !(hi[a] > lo[a]) || dims[a] < 2 {
                return Err(Error::InvalidArgument(format!("empty grid axis {a}")));
            }
            spacing[a] = (hi[a] - lo[a]) / (dims[a] - 1) as f64;
        }
        Self::with_cap(lo, spacing, dims, cap)
    }

    /// 24³ nodes on `[−4.5, 4.5]² × [−3, 3]`.
    pub fn default_grid() -> Self {
        Self::from_bounds([-4.5, -4.5, -3.0], [4.5, 4.5, 3.0], [24, 24, 24]).expect("default grid is valid")
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_weight(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    /// Upper node along each axis.
    pub fn upper(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + (self.dims[a] - 1) as f64 * self.spacing[a])
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn unravel(&self, idx: usize) -> (usize, usize, usize) {
        let k = idx % self.dims[2];
        let ij = idx / self.dims[2];
        (ij / self.dims[1], ij % self.dims[1], k)
    }

    #[inline]
    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        self.origin[axis] + i as f64 * self.spacing[axis]
    }

    pub fn point(&self, idx: usize) -> GroupPoint {
        let (i, j, k) = self.unravel(idx);
        GroupPoint::new(self.coord(0, i), self.coord(1, j), self.coord(2, k))
    }

    pub fn points(&self) -> impl Iterator<Item = GroupPoint> + '_ {
        (0..self.len()).map(move |i| self.point(i))
    }

    /// Integration box covered by the node quadrature (half a cell beyond the outer nodes).
    pub fn cell_box(&self) -> ([f64; 3], [f64; 3]) {
        let up = self.upper();
        (
            std::array::from_fn(|a| self.origin[a] - 0.5 * self.spacing[a]),
            std::array::from_fn(|a| up[a] + 0.5 * self.spacing[a]),
        )
    }

    /// Whether a point lies inside the node hull.
    pub fn contains(&self, p: GroupPoint) -> bool {
        let up = self.upper();
        let c = p.to_array();
        (0..3).all(|a| c[a] >= self.origin[a] && c[a] <= up[a])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Density,
    Potential,
    /// Natural logarithm of a positive potential.
    LogPotential,
}

/// Values on the nodes of a grid, z fastest then y then x.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: Grid3D,
    pub values: Vec<f64>,
    pub kind: FieldKind,
}

impl ScalarField {
    pub fn new(grid: Grid3D, values: Vec<f64>, kind: FieldKind) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidArgument(format!(
                "field has {} values, grid has {} nodes",
                values.len(),
                grid.len()
            )));
        }
        Ok(ScalarField { grid, values, kind })
    }

    pub fn constant(grid: Grid3D, value: f64, kind: FieldKind) -> Self {
        ScalarField { grid, values: vec![value; grid.len()], kind }
    }

    pub fn from_fn<F: FnMut(GroupPoint) -> f64>(grid: Grid3D, kind: FieldKind, f: F) -> Self {
        let values = grid.points().map(f).collect();
        ScalarField { grid, values, kind }
    }

    /// `Σ v · w`.
    pub fn mass(&self) -> f64 {
        pairwise_sum(&self.values) * self.grid.cell_weight()
    }

    pub fn normalize(&mut self) -> Result<f64> {
        let m = self.mass();
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::DegenerateMass { captured: m, required: 0.0 });
        }
        for v in &mut self.values {
            *v /= m;
        }
        Ok(m)
    }

    /// `Σ |a − b| · w`.
    pub fn l1_distance(&self, other: &ScalarField) -> f64 {
        let d: Vec<f64> = self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).collect();
        pairwise_sum(&d) * self.grid.cell_weight()
    }

    /// Discrete inner product `Σ a b w`.
    pub fn dot(&self, other: &ScalarField) -> f64 {
        let d: Vec<f64> = self.values.iter().zip(&other.values).map(|(a, b)| a * b).collect();
        pairwise_sum(&d) * self.grid.cell_weight()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }

    pub fn map(&self, kind: FieldKind, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField { grid: self.grid, values: self.values.iter().map(|&v| f(v)).collect(), kind }
    }

    /// Trilinear interpolation, clamped to the node hull.
    pub fn interpolate(&self, p: GroupPoint) -> f64 {
        let c = p.to_array();
        let g = &self.grid;
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let u = ((c[a] - g.origin[a]) / g.spacing[a]).clamp(0.0, (g.dims[a] - 1) as f64);
            let i = (u.floor() as usize).min(g.dims[a] - 2);
            base[a] = i;
            frac[a] = u - i as f64;
        }
        let mut acc = 0.0;
        for corner in 0..8 {
            let di = corner >> 2 & 1;
            let dj = corner >> 1 & 1;
            let dk = corner & 1;
            let w = (if di == 1 { frac[0] } else { 1.0 - frac[0] })
                * (if dj == 1 { frac[1] } else { 1.0 - frac[1] })
                * (if dk == 1 { frac[2] } else { 1.0 - frac[2] });
            if w != 0.0 {
                acc += w * self.values[g.index(base[0] + di, base[1] + dj, base[2] + dk)];
            }
        }
        acc
    }
}

fn check_capture(captured: f64) -> Result<()> {
    if captured < 0.99 {
        Err(Error::DegenerateMass { captured, required: 0.99 })
    } else {
        Ok(())
    }
}

/// Axis-aligned Gaussian evaluated on the nodes and normalized to unit discrete mass.
pub fn gaussian_density(grid: &Grid3D, mean: [f64; 3], sigmas: [f64; 3]) -> Result<ScalarField> {
    if sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument("sigmas must be positive".into()));
    }
    let (lo, hi) = grid.cell_box();
    let captured: f64 = (0..3)
        .map(|a| normal_cdf((hi[a] - mean[a]) / sigmas[a]) - normal_cdf((lo[a] - mean[a]) / sigmas[a]))
        .product();
    check_capture(captured)?;
    let norm = (2.0 * std::f64::consts::PI).powf(1.5) * sigmas[0] * sigmas[1] * sigmas[2];
    let mut f = ScalarField::from_fn(*grid, FieldKind::Density, |p| {
        let c = p.to_array();
        let e: f64 = (0..3).map(|a| ((c[a] - mean[a]) / sigmas[a]).powi(2)).sum();
        (-0.5 * e).exp() / norm
    });
    f.normalize()?;
    Ok(f)
}

/// Ring profile `exp(−(r − R0)²/(2 sR²) − (z − mz)²/(2 σz²))`, normalized on the grid.
pub fn ring_density(grid: &Grid3D, r0: f64, s_r: f64, mz: f64, sigma_z: f64) -> Result<ScalarField> {
    if !(r0 > 0.0 && s_r > 0.0 && sigma_z > 0.0) {
        return Err(Error::InvalidArgument("ring parameters must be positive".into()));
    }
    let planar = |x: f64, y: f64| (-((x.hypot(y) - r0).powi(2)) / (2.0 * s_r * s_r)).exp();
    // Planar mass over ℝ²: 2π ∫₀^∞ r exp(−(r−R0)²/2s²) dr.
    let total_planar = 2.0
        * std::f64::consts::PI
        * (s_r * s_r * (-r0 * r0 / (2.0 * s_r * s_r)).exp()
            + r0 * s_r * (2.0 * std::f64::consts::PI).sqrt() * normal_cdf(r0 / s_r));
    let (lo, hi) = grid.cell_box();
    let gl = GaussLegendre::new(8);
    let panels = 48;
    let edges = |a: usize| -> Vec<f64> {
        (0..=panels).map(|i| lo[a] + (hi[a] - lo[a]) * i as f64 / panels as f64).collect()
    };
    let (ex, ey) = (edges(0), edges(1));
    let box_planar: f64 = gl.integrate_panels(&ex, |x| gl.integrate_panels(&ey, |y| planar(x, y)));
    let z_capture = normal_cdf((hi[2] - mz) / sigma_z) - normal_cdf((lo[2] - mz) / sigma_z);
    check_capture(box_planar / total_planar * z_capture)?;
    let mut f = ScalarField::from_fn(*grid, FieldKind::Density, |p| {
        planar(p.x, p.y) * (-((p.z - mz).powi(2)) / (2.0 * sigma_z * sigma_z)).exp()
    });
    f.normalize()?;
    Ok(f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldBundleMeta {
    pub field_name: String,
    pub time: f64,
    pub grid: Grid3D,
    pub kind: FieldKind,
    pub order: String,
    pub dtype: String,
}

pub(crate) fn write_f64le(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_f64le(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Config(format!("{} is not a whole number of f64 values", path.display())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = crate::report::to_canonical_json(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Write `dir/meta.json` and `dir/data.f64le`.
pub fn write_field_bundle(dir: &Path, name: &str, time: f64, field: &ScalarField) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = FieldBundleMeta {
        field_name: name.to_string(),
        time,
        grid: field.grid,
        kind: field.kind,
        order: "z-fastest".into(),
        dtype: "f64le".into(),
    };
    write_json(&dir.join("meta.json"), &meta)?;
    write_f64le(&dir.join("data.f64le"), &field.values)
}

pub fn read_field_bundle(dir: &Path) -> Result<(FieldBundleMeta, ScalarField)> {
    let meta: FieldBundleMeta = read_json(&dir.join("meta.json"))?;
    let values = read_f64le(&dir.join("data.f64le"))?;
    let field = ScalarField::new(meta.grid, values, meta.kind)?;
    Ok((meta, field))
}
