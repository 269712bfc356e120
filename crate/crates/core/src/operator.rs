//! Kernel quadrature operators `Q_t` and `P_t` on a grid.
//!
//! `(Q φ)(xᵢ) = Σⱼ p̃(xᵢ, xⱼ) φ(xⱼ) w` and `(P φ)(yⱼ) = Σᵢ p̃(xᵢ, yⱼ) φ(xᵢ) w`,
//! with `p̃` the renormalized table kernel. The kernel between nodes
//! `(a, k)` and `(b, l)` (planar index, vertical index) depends on the
//! vertical indices only through `l − k`, so each planar pair stores one
//! band of `2·Nz − 1` values.
//!
//! Products are formed in the log domain: at small ε the kernel spans far more
//! than the double-precision exponent range. Each output row is shifted by
//! its exact maximum, and planar blocks whose upper bound lies more than
//! [`PRUNE_LOG`] below every row maximum are skipped.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{FieldKind, Grid3D, ScalarField};
use crate::numeric::log_sum_exp;
use crate::table::KernelTable;

/// Terms smaller than `exp(−PRUNE_LOG)` times the row maximum are dropped.
pub const PRUNE_LOG: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    Forward,
    Adjoint,
}

#[derive(Debug)]
pub struct KernelOperator {
    grid: Grid3D,
    nxy: usize,
    nz: usize,
    band: usize,
    log_k: Vec<f64>,
    scaled: Vec<f64>,
    block_max: Vec<f64>,
    log_w: f64,
    pub t: f64,
    pub epsilon: f64,
    /// Table lookups clamped to the table domain while assembling.
    pub out_of_domain: u64,
}

impl KernelOperator {
    pub fn new(grid: &Grid3D, table: &KernelTable) -> Result<Self> {
        let [nx, ny, nz] = grid.dims;
        let nxy = nx * ny;
        let band = 2 * nz - 1;
        let alpha = table.alpha;
        let hz = grid.spacing[2];
        let before = table.out_of_domain_count();
        let planar: Vec<(f64, f64)> = (0..nxy)
            .map(|ab| (grid.coord(0, ab / ny), grid.coord(1, ab % ny)))
            .collect();
        let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..nxy)
            .into_par_iter()
            .map(|a| {
                let (xa, ya) = planar[a];
                let mut lk = Vec::with_capacity(nxy * band);
                let mut sc = Vec::with_capacity(nxy * band);
                let mut bm = Vec::with_capacity(nxy);
                for &(xb, yb) in &planar {
                    let rho = (xb - xa).hypot(yb - ya);
                    let twist = 2.0 * alpha * (xa * yb - ya * xb);
                    let start = lk.len();
                    let mut m = f64::NEG_INFINITY;
                    for d in 0..band {
                        let dz = (d as f64 - (nz - 1) as f64) * hz;
                        let v = table.log_kernel(rho, dz - twist);
                        m = m.max(v);
                        lk.push(v);
                    }
                    sc.extend(lk[start..].iter().map(|v| (v - m).exp()));
                    bm.push(m);
                }
                (lk, sc, bm)
            })
            .collect();
        let mut log_k = Vec::with_capacity(nxy * nxy * band);
        let mut scaled = Vec::with_capacity(nxy * nxy * band);
        let mut block_max = Vec::with_capacity(nxy * nxy);
        for (lk, sc, bm) in rows {
            log_k.extend(lk);
            scaled.extend(sc);
            block_max.extend(bm);
        }
        if let Some(v) = log_k.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonPositiveKernel { value: v.exp(), rho: f64::NAN, z: f64::NAN });
        }
        Ok(KernelOperator {
            grid: *grid,
            nxy,
            nz,
            band,
            log_k,
            scaled,
            block_max,
            log_w: grid.cell_weight().ln(),
            t: table.t,
            epsilon: table.epsilon,
            out_of_domain: table.out_of_domain_count() - before,
        })
    }

    pub fn grid(&self) -> &Grid3D {
        &self.grid
    }

    /// `ln p̃(x_{(a,k)}, x_{(b,l)})`.
    pub fn log_entry(&self, a: usize, k: usize, b: usize, l: usize) -> f64 {
        self.log_k[(a * self.nxy + b) * self.band + l + self.nz - 1 - k]
    }

    /// `ln (Q e^{lf})`.
    pub fn apply_q_log(&self, log_field: &[f64]) -> Vec<f64> {
        self.apply_log(log_field, Direction::Forward)
    }

    /// `ln (P e^{lf})`.
    pub fn apply_p_log(&self, log_field: &[f64]) -> Vec<f64> {
        self.apply_log(log_field, Direction::Adjoint)
    }

    pub fn apply_q(&self, field: &ScalarField) -> ScalarField {
        self.apply_linear(field, Direction::Forward)
    }

    pub fn apply_p(&self, field: &ScalarField) -> ScalarField {
        self.apply_linear(field, Direction::Adjoint)
    }

    fn apply_linear(&self, field: &ScalarField, dir: Direction) -> ScalarField {
        let lf: Vec<f64> = field.values.iter().map(|v| v.ln()).collect();
        let out = self.apply_log(&lf, dir);
        ScalarField {
            grid: self.grid,
            values: out.into_iter().map(f64::exp).collect(),
            kind: field.kind,
        }
    }

    fn apply_log(&self, lf: &[f64], dir: Direction) -> Vec<f64> {
        assert_eq!(lf.len(), self.nxy * self.nz, "field does not match the operator grid");
        let nz = self.nz;
        let fmax: Vec<f64> = lf
            .chunks_exact(nz)
            .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let ftil: Vec<f64> = lf
            .chunks_exact(nz)
            .zip(&fmax)
            .flat_map(|(c, &m)| c.iter().map(move |&v| if m == f64::NEG_INFINITY { 0.0 } else { (v - m).exp() }))
            .collect();
        let rows: Vec<Vec<f64>> = (0..self.nxy)
            .into_par_iter()
            .map(|o| self.output_column(o, lf, &fmax, &ftil, dir))
            .collect();
        rows.concat()
    }

    /// Block for output planar index `o` and input planar index `n`, plus
    /// whether the band must be read reversed.
    #[inline]
    fn block(&self, o: usize, n: usize, dir: Direction) -> (usize, bool) {
        match dir {
            Direction::Forward => (o * self.nxy + n, false),
            Direction::Adjoint => (n * self.nxy + o, true),
        }
    }

    fn output_column(&self, o: usize, lf: &[f64], fmax: &[f64], ftil: &[f64], dir: Direction) -> Vec<f64> {
        let nz = self.nz;
        let band = self.band;
        let mut order: Vec<(f64, usize)> = (0..self.nxy)
            .map(|n| {
                let (blk, _) = self.block(o, n, dir);
                (self.block_max[blk] + fmax[n], n)
            })
            .filter(|(u, _)| *u > f64::NEG_INFINITY)
            .collect();
        order.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));

        // Pass 1: exact row maxima over the blocks that can matter.
        let mut m = vec![f64::NEG_INFINITY; nz];
        let mut accepted = 0;
        for &(u, n) in &order {
            let floor = m.iter().copied().fold(f64::INFINITY, f64::min);
            if u < floor - PRUNE_LOG {
                break;
            }
            accepted += 1;
            let (blk, rev) = self.block(o, n, dir);
            let lk = &self.log_k[blk * band..(blk + 1) * band];
            let f = &lf[n * nz..(n + 1) * nz];
            for (k, mk) in m.iter_mut().enumerate() {
                let mut best = *mk;
                for (l, &fl) in f.iter().enumerate() {
                    let d = if rev { k + nz - 1 - l } else { l + nz - 1 - k };
                    let v = lk[d] + fl;
                    if v > best {
                        best = v;
                    }
                }
                *mk = best;
            }
        }

        // Pass 2: shifted sums, one exponential per (block, row).
        let mut s = vec![0.0; nz];
        for &(u, n) in &order[..accepted] {
            let (blk, rev) = self.block(o, n, dir);
            let sc = &self.scaled[blk * band..(blk + 1) * band];
            let f = &ftil[n * nz..(n + 1) * nz];
            for k in 0..nz {
                let c = (u - m[k]).exp();
                if c == 0.0 {
                    continue;
                }
                let mut acc = 0.0;
                if rev {
                    let w = &sc[k..k + nz];
                    for l in 0..nz {
                        acc += w[nz - 1 - l] * f[l];
                    }
                } else {
                    let w = &sc[nz - 1 - k..2 * nz - 1 - k];
                    for l in 0..nz {
                        acc += w[l] * f[l];
                    }
                }
                s[k] += c * acc;
            }
        }
        m.iter().zip(&s).map(|(&mk, &sk)| self.log_w + mk + sk.ln()).collect()
    }
}

/// Anything that can apply the forward and adjoint semigroup in log form.
pub trait LogOperator {
    fn len(&self) -> usize;
    fn cell_weight(&self) -> f64;
    fn apply_q_log(&self, log_field: &[f64]) -> Vec<f64>;
    fn apply_p_log(&self, log_field: &[f64]) -> Vec<f64>;
}

impl LogOperator for KernelOperator {
    fn len(&self) -> usize {
        self.grid().len()
    }
    fn cell_weight(&self) -> f64 {
        self.grid().cell_weight()
    }
    fn apply_q_log(&self, log_field: &[f64]) -> Vec<f64> {
        KernelOperator::apply_q_log(self, log_field)
    }
    fn apply_p_log(&self, log_field: &[f64]) -> Vec<f64> {
        KernelOperator::apply_p_log(self, log_field)
    }
}

/// Small dense kernel, row `i` holding `p(xᵢ, ·)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseKernel {
    pub n: usize,
    pub weight: f64,
    pub values: Vec<f64>,
}

impl DenseKernel {
    pub fn new(n: usize, weight: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n || values.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidArgument("dense kernel must be n×n and positive".into()));
        }
        Ok(DenseKernel { n, weight, values })
    }

    fn apply(&self, lf: &[f64], transpose: bool) -> Vec<f64> {
        (0..self.n)
            .map(|o| {
                let terms: Vec<f64> = (0..self.n)
                    .map(|i| {
                        let k = if transpose { self.values[i * self.n + o] } else { self.values[o * self.n + i] };
                        k.ln() + lf[i]
                    })
                    .collect();
                log_sum_exp(&terms) + self.weight.ln()
            })
            .collect()
    }
}

impl LogOperator for DenseKernel {
    fn len(&self) -> usize {
        self.n
    }
    fn cell_weight(&self) -> f64 {
        self.weight
    }
    fn apply_q_log(&self, lf: &[f64]) -> Vec<f64> {
        self.apply(lf, false)
    }
    fn apply_p_log(&self, lf: &[f64]) -> Vec<f64> {
        self.apply(lf, true)
    }
}

/// `Q_t φ` on the grid of `field`.
pub fn apply_q(field: &ScalarField, table: &KernelTable, grid: &Grid3D) -> Result<ScalarField> {
    check_field(field, grid)?;
    Ok(KernelOperator::new(grid, table)?.apply_q(field))
}

/// `P_t φ` on the grid of `field`.
pub fn apply_p(field: &ScalarField, table: &KernelTable, grid: &Grid3D) -> Result<ScalarField> {
    check_field(field, grid)?;
    Ok(KernelOperator::new(grid, table)?.apply_p(field))
}

fn check_field(field: &ScalarField, grid: &Grid3D) -> Result<()> {
    if field.grid != *grid {
        return Err(Error::InvalidArgument("field grid differs from operator grid".into()));
    }
    if field.kind != FieldKind::LogPotential && field.values.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidArgument("operator input must be nonnegative".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::QuadratureSpec;
    use crate::table::{tabulate, TableSpec};

    fn small_grid() -> Grid3D {
        Grid3D::from_bounds([-3.0, -3.0, -2.0], [3.0, 3.0, 2.0], [12, 12, 10]).unwrap()
    }

    fn operator(t: f64, eps: f64) -> (Grid3D, KernelTable, KernelOperator) {
        let g = small_grid();
        let tab = tabulate(t, eps, 0.25, TableSpec::for_grid(&g, 0.25, 64, 64), QuadratureSpec::default()).unwrap();
        let op = KernelOperator::new(&g, &tab).unwrap();
        (g, tab, op)
    }

    fn pseudo_random_field(g: Grid3D, seed: u64) -> ScalarField {
        let mut s = seed;
        ScalarField::from_fn(g, FieldKind::Potential, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            0.1 + (s >> 11) as f64 / (1u64 << 53) as f64
        })
    }

    #[test]
    fn entries_match_table_lookups() {
        let (g, tab, op) = operator(0.5, 1.0);
        for (i, j) in [(0, 0), (17, 1000), (1439, 3), (700, 701)] {
            let (a, k) = (i / 10, i % 10);
            let (b, l) = (j / 10, j % 10);
            let want = tab.lookup_pair(g.point(i), g.point(j)).ln();
            assert!((op.log_entry(a, k, b, l) - want).abs() < 1e-12);
        }
        assert_eq!(op.out_of_domain, 0);
    }

    #[test]
    fn adjoint_identity_and_symmetry() {
        let (_, _, op) = operator(0.5, 1.0);
        let g = *op.grid();
        let f = pseudo_random_field(g, 1);
        let h = pseudo_random_field(g, 2);
        let lhs = op.apply_q(&f).dot(&h);
        let rhs = f.dot(&op.apply_p(&h));
        assert!(((lhs - rhs) / lhs).abs() < 1e-10, "{lhs} vs {rhs}");
        assert_eq!(op.apply_q(&f).values, op.apply_p(&f).values);
    }

    #[test]
    fn delta_field_returns_kernel_row() {
        let (g, tab, op) = operator(0.5, 1.0);
        let j = g.index(6, 5, 4);
        let mut f = ScalarField::constant(g, 0.0, FieldKind::Potential);
        f.values[j] = 1.0 / g.cell_weight();
        let out = op.apply_q(&f);
        for i in (0..g.len()).step_by(97) {
            let want = tab.lookup_pair(g.point(i), g.point(j));
            assert!(out.values[i] > 0.0);
            assert!((out.values[i] / want - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn small_epsilon_stays_finite() {
        let (_, _, op) = operator(1.0, 0.01);
        let g = *op.grid();
        let f = pseudo_random_field(g, 3);
        let lf: Vec<f64> = f.values.iter().map(|v| v.ln() * 300.0).collect();
        let out = op.apply_q_log(&lf);
        assert!(out.iter().all(|v| v.is_finite()));
        let h = pseudo_random_field(g, 4);
        let lhs = op.apply_q(&f).dot(&h);
        let rhs = f.dot(&op.apply_p(&h));
        assert!(((lhs - rhs) / lhs).abs() < 1e-10);
    }
}
