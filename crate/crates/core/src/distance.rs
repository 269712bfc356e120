//! Closed-form sub-Riemannian distance of the Heisenberg-type structure.
//!
//! Minimizers project to circular arcs in the plane. An arc through planar
//! displacement `ρ` with half-angle `φ ∈ [0, π)` has length² `φ²ρ²/sin²φ` and
//! lifts to a vertical displacement governed by the shape function
//! `f(φ) = φ/sin²φ − cot φ`, which increases monotonically from `0` to `∞`.
//!
//! Two vertical normalizations are provided (see [`DistanceConvention`]):
//!
//! * [`DistanceConvention::Kernel`] solves `f(φ) = |Δz| / (α ρ²)`. This is the
//!   geometry of the fields `∂x − 2αy∂z`, `∂y + 2αx∂z`: the saddle point of the
//!   exact heat kernel lands on it, and its vertical limit `d²(0, (0,0,Δz)) =
//!   π|Δz|/α` agrees with the isoperimetric argument (area `|Δz|/(4α)` enclosed
//!   by a circle of length `L`, `L² = 4π·area`).
//! * [`DistanceConvention::Printed`] solves `f(2αθ) = 2α|Δz|/ρ²`, the other
//!   common normalization. Its vertical limit is `2απ|Δz|`, which differs from
//!   the isoperimetric value unless `α² = 1/2`.
//!
//! Both agree exactly when the twisted vertical offset vanishes.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::grid::ScalarField;
use crate::group::{relative, GroupPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceConvention {
    /// Consistent with the heat kernel and the isoperimetric vertical limit.
    #[default]
    Kernel,
    /// `θ_c` normalization with the `1/(2α)` prefactor.
    Printed,
}

impl DistanceConvention {
    /// Factor `c` in `f(φ) = c·|Δz|/ρ²`.
    fn vertical_scale(self, alpha: f64) -> f64 {
        match self {
            DistanceConvention::Kernel => 1.0 / alpha,
            DistanceConvention::Printed => 2.0 * alpha,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceQuery {
    pub q1: GroupPoint,
    pub q2: GroupPoint,
    pub alpha: f64,
}

/// An arc half-angle kept together with its distance to `π`, so that both
/// ends of `[0, π)` are represented without cancellation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArcPhase {
    pub phi: f64,
    /// `π − φ`, computed directly when `φ > π/2`.
    pub gap: f64,
}

impl ArcPhase {
    fn from_phi(phi: f64) -> Self {
        ArcPhase { phi, gap: PI - phi }
    }

    fn from_gap(gap: f64) -> Self {
        ArcPhase { phi: PI - gap, gap }
    }

    /// `sin φ`.
    pub fn sin(&self) -> f64 {
        if self.phi <= FRAC_PI_2 {
            self.phi.sin()
        } else {
            self.gap.sin()
        }
    }

    /// `φ − sin φ cos φ`, accurate at both ends.
    pub fn area_term(&self) -> f64 {
        if self.phi <= FRAC_PI_2 {
            half_chord_deficit(self.phi)
        } else {
            PI - self.gap + self.gap.sin() * self.gap.cos()
        }
    }

    /// `f(φ) = (φ − sin φ cos φ)/sin² φ`.
    pub fn shape(&self) -> f64 {
        let s = self.sin();
        if self.phi == 0.0 {
            0.0
        } else {
            self.area_term() / (s * s)
        }
    }

    /// `f'(φ) = 2(sin φ − φ cos φ)/sin³ φ`.
    pub fn shape_derivative(&self) -> f64 {
        if self.phi < 1e-4 {
            return 2.0 / 3.0 + 4.0 * self.phi * self.phi / 15.0;
        }
        let s = self.sin();
        let c = if self.phi <= FRAC_PI_2 {
            self.phi.cos()
        } else {
            -self.gap.cos()
        };
        2.0 * (s - self.phi * c) / (s * s * s)
    }
}

/// `φ − sin φ cos φ = (2φ − sin 2φ)/2`, using the series near zero.
fn half_chord_deficit(phi: f64) -> f64 {
    if phi < 0.1 {
        // (2φ − sin 2φ)/2 = Σ_{k≥1} (−1)^{k+1} (2φ)^{2k+1} / (2 (2k+1)!)
        let x = 2.0 * phi;
        let x2 = x * x;
        let mut term = x * x2 / 6.0;
        let mut sum = 0.0_f64;
        let mut k = 1.0;
        while term.abs() > 1e-18 * sum.abs().max(1e-300) {
            sum += term;
            term *= -x2 / ((2.0 * k + 2.0) * (2.0 * k + 3.0));
            k += 1.0;
            if k > 30.0 {
                break;
            }
        }
        0.5 * sum
    } else {
        phi - phi.sin() * phi.cos()
    }
}

/// The shape function `f(φ) = φ/sin²φ − cot φ`.
pub fn arc_shape(phi: f64) -> f64 {
    if phi <= FRAC_PI_2 {
        ArcPhase::from_phi(phi).shape()
    } else {
        ArcPhase::from_gap(PI - phi).shape()
    }
}

/// Unique `φ ∈ [0, π)` with `f(φ) = target`, by bisection to a `1e-6`
/// bracket followed by Newton to `1e-12`.
pub fn solve_arc_phase(target: f64) -> ArcPhase {
    assert!(target >= 0.0 && target.is_finite(), "target must be finite and >= 0");
    if target == 0.0 {
        return ArcPhase::from_phi(0.0);
    }
    let f_mid = FRAC_PI_2; // f(π/2) = π/2
    if target <= f_mid {
        // work in φ ∈ (0, π/2]
        let mut lo = 0.0;
        let mut hi = FRAC_PI_2;
        let mut x = 1.5 * target;
        // f ≈ 2φ/3 + 4φ³/45, so small targets start from the inverted series
        if target >= 1e-3 {
            while hi - lo > 1e-6 {
                let m = 0.5 * (lo + hi);
                if ArcPhase::from_phi(m).shape() < target {
                    lo = m;
                } else {
                    hi = m;
                }
            }
            x = 0.5 * (lo + hi);
        }
        for _ in 0..60 {
            let p = ArcPhase::from_phi(x);
            let r = p.shape() - target;
            let step = r / p.shape_derivative();
            if r > 0.0 {
                hi = hi.min(x);
            } else {
                lo = lo.max(x);
            }
            let mut next = x - step;
            if !(next >= lo && next <= hi) {
                next = 0.5 * (lo + hi);
            }
            let done = (next - x).abs() <= 1e-12 * x.max(1e-300);
            x = next;
            if done {
                break;
            }
        }
        ArcPhase::from_phi(x)
    } else {
        // work in the gap d = π − φ ∈ (0, π/2); f ≈ π/d² for small d
        let mut lo = 0.0;
        let mut hi = FRAC_PI_2;
        let mut d = (PI / target).sqrt().min(FRAC_PI_2);
        if target < 1e6 {
            lo = 0.0;
            hi = FRAC_PI_2;
            while hi - lo > 1e-6 * hi.max(1e-12) {
                let m = 0.5 * (lo + hi);
                if m == lo || m == hi {
                    break;
                }
                if ArcPhase::from_gap(m).shape() > target {
                    lo = m;
                } else {
                    hi = m;
                }
            }
            d = 0.5 * (lo + hi);
        }
        for _ in 0..60 {
            let p = ArcPhase::from_gap(d);
            let r = p.shape() - target;
            // df/dd = −f'(φ)
            let step = r / (-p.shape_derivative());
            // f decreases in d
            if r > 0.0 {
                lo = lo.max(d);
            } else {
                hi = hi.min(d);
            }
            let mut next = d - step;
            if !(next > lo && next <= hi) {
                next = if lo > 0.0 { 0.5 * (lo + hi) } else { 0.5 * d };
            }
            let done = (next - d).abs() <= 1e-12 * d;
            d = next;
            if done {
                break;
            }
        }
        ArcPhase::from_gap(d)
    }
}

/// `θ_c ∈ [0, π/(2α))` solving
/// `ratio = (1/(2α)) (2αθ/sin²(2αθ) − cot(2αθ))`.
pub fn theta_c(ratio: f64, alpha: f64) -> f64 {
    assert!(alpha > 0.0, "alpha must be positive");
    solve_arc_phase(2.0 * alpha * ratio).phi / (2.0 * alpha)
}

/// Right-hand side of the `θ_c` equation.
pub fn theta_c_equation(theta: f64, alpha: f64) -> f64 {
    arc_shape(2.0 * alpha * theta) / (2.0 * alpha)
}

/// `d²` from the planar radius squared and the twisted vertical offset.
pub fn distance_sq_from_offsets(
    rho_sq: f64,
    dz: f64,
    alpha: f64,
    convention: DistanceConvention,
) -> f64 {
    let dz = dz.abs();
    if dz == 0.0 {
        return rho_sq;
    }
    let c = convention.vertical_scale(alpha);
    if rho_sq == 0.0 {
        return vertical_limit_sq(dz, alpha, convention);
    }
    let target = c * dz / rho_sq;
    if !target.is_finite() {
        return vertical_limit_sq(dz, alpha, convention);
    }
    let phase = solve_arc_phase(target);
    if phase.phi < FRAC_PI_2 {
        let s = phase.sin();
        if phase.phi < 1e-8 {
            // φ/sin φ → 1
            rho_sq * (1.0 + phase.phi * phase.phi / 3.0)
        } else {
            rho_sq * (phase.phi / s).powi(2)
        }
    } else {
        c * dz * phase.phi * phase.phi / phase.area_term()
    }
}

/// Tabulated form of [`distance_sq_from_offsets`] for hot loops.
///
/// With `w = c|Δz|/ρ²` the squared distance is `ρ² H(w)` for `w ≤ 1` and
/// `c|Δz| G(1/√w)` beyond, where `H(w) = φ²/sin²φ` and `G(s) = φ²/(φ − sin φ cos φ)`.
/// Both profiles are smooth on `[0, 1]` and are stored on uniform nodes with
/// four-point Lagrange interpolation (relative error below 1e−12).
#[derive(Debug)]
pub struct DistanceProfile {
    h: Vec<f64>,
    g: Vec<f64>,
    step: f64,
}

const PROFILE_NODES: usize = 4097;

impl DistanceProfile {
    fn build() -> Self {
        let step = 1.0 / (PROFILE_NODES - 1) as f64;
        // One ghost node on each side keeps the stencil centred at the ends.
        // H is even in w; the ghost below s = 0 is extrapolated.
        let h = (0..PROFILE_NODES + 2)
            .map(|i| {
                let w = ((i as f64 - 1.0) * step).abs();
                if w == 0.0 {
                    1.0
                } else {
                    let ph = solve_arc_phase(w);
                    (ph.phi / ph.sin()).powi(2)
                }
            })
            .collect();
        let mut g: Vec<f64> = (0..PROFILE_NODES + 2)
            .map(|i| {
                let s = (i as f64 - 1.0) * step;
                if s <= 0.0 {
                    PI
                } else {
                    let ph = solve_arc_phase(1.0 / (s * s));
                    ph.phi * ph.phi / ph.area_term()
                }
            })
            .collect();
        g[0] = 4.0 * g[1] - 6.0 * g[2] + 4.0 * g[3] - g[4];
        DistanceProfile { h, g, step }
    }

    pub fn global() -> &'static DistanceProfile {
        static PROFILE: std::sync::OnceLock<DistanceProfile> = std::sync::OnceLock::new();
        PROFILE.get_or_init(DistanceProfile::build)
    }

    #[inline]
    fn eval(values: &[f64], x: f64, step: f64) -> f64 {
        let u = x / step + 1.0;
        let i = (u as usize).clamp(1, values.len() - 3);
        let t = u - i as f64;
        let (a, b, c, d) = (values[i - 1], values[i], values[i + 1], values[i + 2]);
        let tm1 = t - 1.0;
        let tm2 = t - 2.0;
        let tp1 = t + 1.0;
        -a * t * tm1 * tm2 / 6.0 + b * tp1 * tm1 * tm2 / 2.0 - c * tp1 * t * tm2 / 2.0 + d * tp1 * t * tm1 / 6.0
    }

    #[inline]
    pub fn distance_sq(&self, rho_sq: f64, dz: f64, alpha: f64, convention: DistanceConvention) -> f64 {
        let vz = convention.vertical_scale(alpha) * dz.abs();
        if vz <= rho_sq {
            if rho_sq == 0.0 {
                return 0.0;
            }
            rho_sq * Self::eval(&self.h, vz / rho_sq, self.step)
        } else {
            vz * Self::eval(&self.g, (rho_sq / vz).sqrt(), self.step)
        }
    }
}

/// `d²(0, (0, 0, Δz))`: `π|Δz|/α` for the kernel geometry, `2απ|Δz|` for the printed one.
pub fn vertical_limit_sq(dz: f64, alpha: f64, convention: DistanceConvention) -> f64 {
    PI * convention.vertical_scale(alpha) * dz.abs()
}

/// Squared sub-Riemannian distance in the kernel-consistent geometry.
pub fn sr_distance_sq(query: &DistanceQuery) -> f64 {
    sr_distance_sq_with(query, DistanceConvention::Kernel)
}

pub fn sr_distance_sq_with(query: &DistanceQuery, convention: DistanceConvention) -> f64 {
    let rel = relative(query.q1, query.q2, query.alpha);
    distance_sq_from_offsets(rel.x * rel.x + rel.y * rel.y, rel.z, query.alpha, convention)
}

/// Convenience wrapper over [`sr_distance_sq`].
pub fn distance_sq(q1: GroupPoint, q2: GroupPoint, alpha: f64) -> f64 {
    sr_distance_sq(&DistanceQuery { q1, q2, alpha })
}

/// `min_{q₁ ∈ grid} Φ_f(q₁) + d²(q, q₁) / (2(t_f − t))`.
pub fn hopf_lax(phi_f: &ScalarField, t: f64, t_f: f64, q: GroupPoint, alpha: f64) -> f64 {
    assert!(t < t_f, "hopf_lax needs t < t_f");
    let prof = DistanceProfile::global();
    let inv = 1.0 / (2.0 * (t_f - t));
    let grid = phi_f.grid;
    phi_f
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let r = relative(q, grid.point(i), alpha);
            v + prof.distance_sq(r.x * r.x + r.y * r.y, r.z, alpha, DistanceConvention::Kernel) * inv
        })
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_matches_root_solve() {
        let prof = DistanceProfile::global();
        let mut worst = 0.0_f64;
        for i in 0..400 {
            for j in 0..60 {
                let rho = 1e-3 + i as f64 * 0.037;
                let dz = (j as f64 * 0.37).powi(2) * 1e-2;
                for conv in [DistanceConvention::Kernel, DistanceConvention::Printed] {
                    let exact = distance_sq_from_offsets(rho * rho, dz, 0.25, conv);
                    let fast = prof.distance_sq(rho * rho, dz, 0.25, conv);
                    worst = worst.max((fast / exact - 1.0).abs());
                }
            }
        }
        assert!(worst < 1e-11, "worst relative error {worst:e}");
        assert_eq!(prof.distance_sq(0.0, 0.0, 0.25, DistanceConvention::Kernel), 0.0);
        let v = prof.distance_sq(0.0, 1.0, 0.25, DistanceConvention::Kernel);
        assert!((v - 4.0 * PI).abs() < 1e-12);
    }

    #[test]
    fn theta_zero_ratio() {
        assert_eq!(theta_c(0.0, 0.25), 0.0);
    }

    #[test]
    fn theta_small_ratio_series() {
        // f(θ) in the printed normalization expands as 2θ/3 + O(θ³)
        for r in [1e-3, 5e-4, 1e-5, 1e-8] {
            let th = theta_c(r, 0.25);
            assert!(((th - 1.5 * r) / (1.5 * r)).abs() <= 1e-4, "r={r} th={th}");
        }
    }

    #[test]
    fn theta_monotone_and_residual() {
        let alpha = 0.25;
        let mut prev = 0.0;
        for k in -60..=60 {
            let r = 10f64.powf(k as f64 / 10.0);
            let th = theta_c(r, alpha);
            assert!(th > prev, "not increasing at r={r}");
            assert!(th < PI / (2.0 * alpha));
            let res = (theta_c_equation(th, alpha) - r).abs();
            assert!(res <= 1e-10 * (1.0 + r), "residual {res} at r={r}");
            prev = th;
        }
    }

    #[test]
    fn planar_displacement_is_euclidean() {
        let q1 = GroupPoint::new(0.0, 0.0, 0.0);
        let q2 = GroupPoint::new(1.0, 0.0, 0.0);
        assert_eq!(distance_sq(q1, q2, 0.25), 1.0);
        // a displacement whose twist cancels the vertical offset
        let q1 = GroupPoint::new(1.0, 0.0, 0.0);
        let q2 = GroupPoint::new(1.0, 2.0, 1.0); // Δz = 1 + 2α(1·2 − 0) − ... with α = 1/4
        let rel = relative(q1, q2, 0.25);
        assert_eq!(rel.z, 0.0);
        assert!((distance_sq(q1, q2, 0.25) - 4.0).abs() < 1e-15);
        for conv in [DistanceConvention::Kernel, DistanceConvention::Printed] {
            let d = sr_distance_sq_with(&DistanceQuery { q1, q2, alpha: 0.25 }, conv);
            assert!((d - 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn vertical_limit_is_approached_continuously() {
        for conv in [DistanceConvention::Kernel, DistanceConvention::Printed] {
            let alpha = 0.25;
            let limit = vertical_limit_sq(1.0, alpha, conv);
            let mut prev_err = f64::INFINITY;
            for k in 1..8 {
                let rho = 10f64.powi(-k);
                let d = distance_sq_from_offsets(rho * rho, 1.0, alpha, conv);
                let err = (d - limit).abs();
                assert!(err < prev_err);
                prev_err = err;
            }
            assert!(prev_err / limit < 1e-6);
        }
        let k = vertical_limit_sq(1.0, 0.25, DistanceConvention::Kernel);
        let p = vertical_limit_sq(1.0, 0.25, DistanceConvention::Printed);
        assert!((k - 4.0 * PI).abs() < 1e-12);
        assert!((p - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_distance_matches_isoperimetric_arc() {
        // A semicircle of radius R from (0,0) to (2R,0): length πR, area πR²/2,
        // vertical lift 4α·area.
        let alpha = 0.25;
        let r = 0.8;
        let dz = 4.0 * alpha * PI * r * r / 2.0;
        let d = distance_sq_from_offsets(4.0 * r * r, dz, alpha, DistanceConvention::Kernel);
        assert!((d - (PI * r).powi(2)).abs() < 1e-10);
    }

    #[test]
    fn hopf_lax_of_zero_potential() {
        let g = crate::grid::Grid3D::default_grid();
        let zero = ScalarField::constant(g, 0.0, crate::grid::FieldKind::Potential);
        assert_eq!(hopf_lax(&zero, 0.3, 1.0, g.point(1234), 0.25), 0.0);
        let q = GroupPoint::new(0.01, 0.02, 0.0);
        let off = hopf_lax(&zero, 0.3, 1.0, q, 0.25);
        let upper = g.points().map(|p| distance_sq(q, p, 0.25) / 1.4).fold(f64::INFINITY, f64::min);
        assert!(off > 0.0 && (off - upper).abs() < 1e-12);
    }

    #[test]
    fn hopf_lax_near_final_time_returns_the_node_value() {
        let g = crate::grid::Grid3D::default_grid();
        let phi = ScalarField::from_fn(g, crate::grid::FieldKind::Potential, |p| 1.0 + 0.3 * p.x - 0.1 * p.z * p.z);
        let q = g.point(4321);
        let v = hopf_lax(&phi, 1.0 - 1e-6, 1.0, q, 0.25);
        assert!((v - phi.values[4321]).abs() < 1e-12);
    }
}
