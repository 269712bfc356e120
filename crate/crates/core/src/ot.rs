//! Exact discrete optimal transport between equal-mass subsamples.

use rayon::prelude::*;

use crate::distance::{DistanceConvention, DistanceProfile};
use crate::error::{Error, Result};
use crate::grid::ScalarField;
use crate::group::{relative, GroupPoint};

/// Largest support size accepted by [`discrete_ot_oracle`].
pub const MAX_SUPPORT: usize = 400;

/// `n` equal-mass nodes drawn from a grid density by systematic resampling
/// with offset `1/2`: point `k` is the node whose cumulative mass first
/// reaches `(k + 1/2)/n`.
pub fn systematic_resample(density: &ScalarField, n: usize) -> Result<Vec<GroupPoint>> {
    if n == 0 {
        return Err(Error::InvalidArgument("support size must be positive".into()));
    }
    let total: f64 = density.values.iter().sum();
    if !(total > 0.0) || density.values.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidArgument("density must be nonnegative with positive mass".into()));
    }
    let mut out = Vec::with_capacity(n);
    let mut acc = 0.0;
    let mut idx = 0;
    for k in 0..n {
        let u = (k as f64 + 0.5) / n as f64 * total;
        while idx + 1 < density.values.len() && acc + density.values[idx] < u {
            acc += density.values[idx];
            idx += 1;
        }
        out.push(density.grid.point(idx));
    }
    Ok(out)
}

/// Minimum-cost perfect assignment for a square cost matrix (row-major).
/// Returns `(total cost, column assigned to each row)`.
///
/// Shortest augmenting paths with dual potentials, `O(n³)`.
pub fn hungarian(cost: &[f64], n: usize) -> Result<(f64, Vec<usize>)> {
    if cost.len() != n * n {
        return Err(Error::InvalidArgument("cost matrix must be n×n".into()));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidArgument("cost matrix must be finite".into()));
    }
    // 1-based arrays; column 0 is the virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    let total = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok((total, assignment))
}

/// `½ d²` cost matrix between two point sets.
pub fn half_sq_distance_matrix(xs: &[GroupPoint], ys: &[GroupPoint], alpha: f64) -> Vec<f64> {
    let prof = DistanceProfile::global();
    xs.par_iter()
        .flat_map_iter(|&x| {
            ys.iter().map(move |&y| {
                let r = relative(x, y, alpha);
                0.5 * prof.distance_sq(r.x * r.x + r.y * r.y, r.z, alpha, DistanceConvention::Kernel)
            })
        })
        .collect()
}

/// Optimal `½ d²` transport cost between equal-mass subsamples of two densities.
pub fn discrete_ot_oracle(rho_0: &ScalarField, rho_f: &ScalarField, n_support: usize, alpha: f64) -> Result<f64> {
    if n_support > MAX_SUPPORT {
        return Err(Error::InvalidArgument(format!("n_support must be <= {MAX_SUPPORT}")));
    }
    let xs = systematic_resample(rho_0, n_support)?;
    let ys = systematic_resample(rho_f, n_support)?;
    let c = half_sq_distance_matrix(&xs, &ys, alpha);
    let (total, _) = hungarian(&c, n_support)?;
    Ok(total / n_support as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{gaussian_density, FieldKind, Grid3D};

    fn brute_force(cost: &[f64], n: usize) -> f64 {
        fn rec(cost: &[f64], n: usize, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == n {
                *best = best.min(acc);
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    rec(cost, n, row + 1, used, acc + cost[row * n + j], best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, n, 0, &mut vec![false; n], 0.0, &mut best);
        best
    }

    proptest::proptest! {
        #[test]
        fn hungarian_matches_brute_force(n in 1usize..7, vals in proptest::collection::vec(0.0f64..10.0, 36)) {
            let cost: Vec<f64> = vals[..n * n].to_vec();
            let (h, assign) = hungarian(&cost, n).unwrap();
            let mut seen = assign.clone();
            seen.sort();
            proptest::prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            proptest::prop_assert!((h - brute_force(&cost, n)).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_supports_cost_nothing() {
        let g = Grid3D::default_grid();
        let r = gaussian_density(&g, [0.0; 3], [0.55; 3]).unwrap();
        assert!(discrete_ot_oracle(&r, &r, 50, 0.25).unwrap().abs() < 1e-12);
    }

    #[test]
    fn planar_unit_offset_costs_one_half() {
        let g = Grid3D::from_bounds([-4.0; 3], [4.0; 3], [9, 9, 9]).unwrap();
        let mut a = ScalarField::constant(g, 0.0, FieldKind::Density);
        let mut b = a.clone();
        a.values[g.index(4, 4, 4)] = 1.0;
        b.values[g.index(5, 4, 4)] = 1.0;
        let c = discrete_ot_oracle(&a, &b, 10, 0.25).unwrap();
        assert!((c - 0.5).abs() < 1e-12, "{c}");
    }

    #[test]
    fn systematic_resampling_is_equal_mass() {
        let g = Grid3D::default_grid();
        let mut d = ScalarField::constant(g, 0.0, FieldKind::Density);
        d.values[10] = 1.0;
        d.values[500] = 3.0;
        let pts = systematic_resample(&d, 400).unwrap();
        let n500 = pts.iter().filter(|p| **p == g.point(500)).count();
        assert_eq!(n500, 300);
    }
}
