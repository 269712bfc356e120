//! Hypoelliptic heat kernel of the Heisenberg-type diffusion.
//!
//! With `A = ρ²/(2εt)` and `κ = |z|/(2αεt)` the transition density from the
//! identity is
//!
//! ```text
//! p_{t,ε}(0, q) = 1/(8π² α ε² t²) ∫_ℝ (s / sinh s) exp(−A s coth s + iκ s) ds ,
//! ```
//!
//! which is the λ-integral `(1/4π²) ∫ (2αλ/sinh(2αλεt)) exp(−αλρ²/tanh(2αλεt)) cos(λz) dλ`
//! after the substitution `s = 2αλεt`. The imaginary part is odd and cancels,
//! so only the cosine survives. At the removable point `s = 0` the integrand
//! equals `exp(−A)` (the planar Gaussian of variance `εt`).
//!
//! The oscillatory integral is evaluated on the horizontal contour
//! `Im s = u*`, where `u*` is the saddle of the phase on the imaginary axis. The
//! saddle condition `f(u*) = κ/A` is the geodesic equation of
//! [`crate::distance`], and the exponent at the saddle equals
//! `−d²_SR/(2εt)`, so the contour integrand carries no cancellation and the
//! logarithm of the kernel stays accurate far into the tails. Close to the
//! vertical axis, where the saddle approaches the pole at `s = iπ`, the
//! integral is summed as a residue series instead. The pure
//! vertical case `A = 0` has the closed form `(π²/2) sech²(πκ/2)`.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::distance::{self, DistanceConvention};
use crate::error::{Error, Result};
use crate::group::{relative, GroupPoint};
use crate::quadrature::GaussLegendre;

/// Which closed-form expression to integrate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFormula {
    /// The transition density of `dX = √ε g(X) dW` for the Heisenberg frame.
    #[default]
    Exact,
    /// The variant with prefactor `1/(2πεt)²` and phase `2αλz`. It equals
    /// `p_exact(x, y, 2αz)/(εt)²`, so it carries total mass `1/(2αε²t²)` and a
    /// vertical profile stretched by `1/(2α)`. Kept for comparison only.
    Printed,
}

/// Discretization of the contour integral.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadratureSpec {
    /// Gauss–Legendre order per panel.
    pub nodes_per_panel: usize,
    /// Number of panels per geometric band `[2^k w, 2^{k+1} w]`.
    pub panels: usize,
    /// Relative agreement required between successive panel doublings.
    pub rel_tol: f64,
    /// The contour is truncated where the integrand falls below
    /// `exp(−tail_log_ratio)` times its saddle value.
    pub tail_log_ratio: f64,
    /// Optional cap on the truncation point, in units of the original λ variable.
    pub lambda_max: Option<f64>,
    /// Maximum number of panel doublings before giving up.
    pub max_doublings: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec {
            nodes_per_panel: 8,
            panels: 1,
            rel_tol: 1e-9,
            tail_log_ratio: 30.0,
            lambda_max: None,
            max_doublings: 5,
        }
    }
}

impl QuadratureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nodes_per_panel < 4 {
            return Err(Error::InvalidArgument("nodes_per_panel must be >= 4".into()));
        }
        if self.panels < 1 {
            return Err(Error::InvalidArgument("panels must be >= 1".into()));
        }
        if !(self.rel_tol > 0.0) || !(self.tail_log_ratio > 0.0) {
            return Err(Error::InvalidArgument("rel_tol and tail_log_ratio must be positive".into()));
        }
        if let Some(l) = self.lambda_max {
            if !(l > 0.0) {
                return Err(Error::InvalidArgument("lambda_max must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Reusable evaluator holding the Gauss–Legendre rule.
#[derive(Debug, Clone)]
pub struct KernelEvaluator {
    pub t: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub formula: KernelFormula,
    quad: QuadratureSpec,
    rule: GaussLegendre,
}

impl KernelEvaluator {
    pub fn new(t: f64, epsilon: f64, alpha: f64, quad: QuadratureSpec) -> Result<Self> {
        Self::with_formula(t, epsilon, alpha, quad, KernelFormula::Exact)
    }

    pub fn with_formula(
        t: f64,
        epsilon: f64,
        alpha: f64,
        quad: QuadratureSpec,
        formula: KernelFormula,
    ) -> Result<Self> {
        for (name, v) in [("t", t), ("epsilon", epsilon), ("alpha", alpha)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        quad.validate()?;
        Ok(KernelEvaluator {
            t,
            epsilon,
            alpha,
            formula,
            quad,
            rule: GaussLegendre::new(quad.nodes_per_panel),
        })
    }

    pub fn quadrature(&self) -> &QuadratureSpec {
        &self.quad
    }

    fn scale(&self) -> f64 {
        self.epsilon * self.t
    }

    /// `ln p_{t,ε}(0, q)` for planar radius² `rho_sq` and vertical offset `z`.
    pub fn log_density(&self, rho_sq: f64, z: f64) -> Result<f64> {
        let et = self.scale();
        let (z_eff, extra) = match self.formula {
            KernelFormula::Exact => (z.abs(), 0.0),
            KernelFormula::Printed => (2.0 * self.alpha * z.abs(), -2.0 * et.ln()),
        };
        let a = rho_sq / (2.0 * et);
        let kappa = z_eff / (2.0 * self.alpha * et);
        let log_prefactor = -(8.0 * PI * PI * self.alpha * et * et).ln();
        let log_i = self.log_contour_integral(a, kappa, rho_sq.sqrt(), z)?;
        Ok(log_prefactor + log_i + extra)
    }

    /// `p_{t,ε}(0, q)` (never renormalized).
    pub fn density(&self, q: GroupPoint) -> Result<f64> {
        let v = self.log_density(q.x * q.x + q.y * q.y, q.z)?.exp();
        if v > 0.0 {
            Ok(v)
        } else {
            Err(Error::NonPositiveKernel {
                value: v,
                rho: q.planar_norm(),
                z: q.z,
            })
        }
    }

    /// `ln ∫_ℝ (s/sinh s) exp(−A s coth s + iκ s) ds`.
    fn log_contour_integral(&self, a: f64, kappa: f64, rho: f64, z: f64) -> Result<f64> {
        if a == 0.0 {
            // (π²/2) sech²(πκ/2)
            let h = 0.5 * PI * kappa;
            let log_cosh = h + (-2.0 * h).exp().ln_1p() - std::f64::consts::LN_2;
            return Ok((0.5 * PI * PI).ln() - 2.0 * log_cosh);
        }
        if kappa >= RESIDUE_MIN_KAPPA && PI * a <= kappa && PI * a * kappa <= RESIDUE_MAX_GROWTH {
            if let Ok(v) = self.log_residue_series(a, kappa, rho, z) {
                return Ok(v);
            }
        }
        let phase = if kappa == 0.0 {
            distance::solve_arc_phase(0.0)
        } else {
            distance::solve_arc_phase(kappa / a)
        };
        let contour = Contour::new(a, kappa, phase);
        // exponent at the saddle: −A u cot u − κ u
        let log_peak = contour.log_saddle_value();
        let integrand = |x: f64| contour.normalized(x);

        let mut edges = contour.panel_edges(&self.quad, self.epsilon * self.t, self.alpha);
        let mut prev: f64 = 2.0 * self.rule.integrate_panels(&edges, integrand);
        let mut rel_change = f64::INFINITY;
        for _ in 0..self.quad.max_doublings {
            edges = bisect_panels(&edges);
            let next: f64 = 2.0 * self.rule.integrate_panels(&edges, integrand);
            rel_change = ((next - prev) / next).abs();
            prev = next;
            if rel_change <= self.quad.rel_tol {
                break;
            }
        }
        if !(prev > 0.0) {
            return Err(Error::NonPositiveKernel { value: prev, rho, z });
        }
        if rel_change > self.quad.rel_tol {
            return Err(Error::QuadratureNonConvergence {
                rel_change,
                rel_tol: self.quad.rel_tol,
            });
        }
        Ok(log_peak + prev.ln())
    }
}

/// Below this `κ` the residue series converges too slowly.
const RESIDUE_MIN_KAPPA: f64 = 2.0;
/// Above this `πAκ` the circle integrand needs too many nodes and the
/// saddle contour is cheaper.
const RESIDUE_MAX_GROWTH: f64 = 2500.0;

impl KernelEvaluator {
    /// Near-vertical offsets: close the contour upward. The integrand has
    /// essential singularities at `s = iπn`; each residue is computed by the
    /// trapezoid rule on a circle whose radius `√(πnA/κ)` balances the two
    /// exponentials `exp(−iπnA/w)` and `exp(iκw)`.
    fn log_residue_series(&self, a: f64, kappa: f64, rho: f64, z: f64) -> Result<f64> {
        // Terms as (log scale, scaled residue); e^{−πκ} is factored out.
        let mut terms: Vec<(f64, Complex64)> = Vec::new();
        for n in 1..=64usize {
            let nf = n as f64;
            let shift = -PI * (nf - 1.0) * kappa;
            let bound = 2.0 * (PI * nf * a * kappa).sqrt() + (PI * nf + 1.0).ln();
            if n > 1 && shift + bound < terms[0].0 - 40.0 {
                break;
            }
            let (log_scale, res) = self.residue(n, a, kappa, rho, z)?;
            terms.push((shift + log_scale, res));
        }
        let top = terms.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
        let total: Complex64 = terms.iter().map(|(l, r)| r * (l - top).exp()).sum();
        // I = 2πi Σ e^{−πnκ} Res_n
        let value = (Complex64::new(0.0, 2.0 * PI) * total).re;
        if !(value > 0.0) {
            return Err(Error::NonPositiveKernel { value, rho, z });
        }
        Ok(-PI * kappa + top + value.ln())
    }

    /// `e^{πnκ} Res_{s=iπn}` of the integrand as `(1/2π)∮ G(w) w dθ`, returned
    /// as `(ln c, Res/c)` to keep the circle values in range.
    fn residue(&self, n: usize, a: f64, kappa: f64, rho: f64, z: f64) -> Result<(f64, Complex64)> {
        let nf = n as f64;
        let radius = if a > 0.0 { (PI * nf * a / kappa).sqrt().min(1.0) } else { 0.5 };
        let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
        let pole = Complex64::new(0.0, PI * nf);
        let growth = a * PI * nf / radius + kappa * radius;
        let g = |theta: f64| -> Complex64 {
            let w = Complex64::from_polar(radius, theta);
            let s = pole + w;
            let (sh, ch) = (w.sinh(), w.cosh());
            let e = -a * s * ch / sh + Complex64::new(0.0, kappa) * w - growth;
            sign * s / sh * e.exp() * w
        };
        let mut m = (64 + 8 * growth.ceil() as usize).next_power_of_two();
        // Returns the mean and the mean modulus; the latter sets the error scale
        // when a higher residue nearly cancels.
        let trapezoid = |m: usize| -> (Complex64, f64) {
            let h = 2.0 * PI / m as f64;
            let mut acc = Complex64::new(0.0, 0.0);
            let mut l1 = 0.0;
            for k in 0..m {
                let v = g(k as f64 * h);
                acc += v;
                l1 += v.norm();
            }
            (acc / m as f64, l1 / m as f64)
        };
        let (mut prev, _) = trapezoid(m);
        let mut change = f64::INFINITY;
        for _ in 0..self.quad.max_doublings {
            m *= 2;
            let (next, l1) = trapezoid(m);
            change = (next - prev).norm() / next.norm().max(l1);
            prev = next;
            if change <= self.quad.rel_tol {
                return Ok((growth, prev));
            }
        }
        log::warn!("residue quadrature did not settle at rho={rho} z={z}");
        Err(Error::QuadratureNonConvergence { rel_change: change, rel_tol: self.quad.rel_tol })
    }
}

/// The horizontal line `s = x + i u*` through the saddle.
struct Contour {
    a: f64,
    kappa: f64,
    u: f64,
    /// `π − u`
    gap: f64,
    sin_u: f64,
    cos_u: f64,
    /// `u cot u`
    u_cot_u: f64,
    /// `f'(u)`, curvature of the phase at the saddle divided by `A`.
    curvature: f64,
}

impl Contour {
    fn new(a: f64, kappa: f64, phase: distance::ArcPhase) -> Self {
        let u = phase.phi;
        let gap = phase.gap;
        let (sin_u, cos_u) = if u <= 0.5 * PI {
            (u.sin(), u.cos())
        } else {
            (gap.sin(), -gap.cos())
        };
        let u_cot_u = if u < 1e-8 { 1.0 - u * u / 3.0 } else { u * cos_u / sin_u };
        Contour {
            a,
            kappa,
            u,
            gap,
            sin_u,
            cos_u,
            u_cot_u,
            curvature: phase.shape_derivative(),
        }
    }

    fn log_saddle_value(&self) -> f64 {
        -self.a * self.u_cot_u - self.kappa * self.u
    }

    /// `(s/sinh s, s coth s)` at `s = x + iu`, `x ≥ 0`.
    fn terms(&self, x: f64) -> (Complex64, Complex64) {
        let s = Complex64::new(x, self.u);
        if x == 0.0 && self.u == 0.0 {
            return (Complex64::new(1.0, 0.0), Complex64::new(1.0, 0.0));
        }
        if x < 20.0 {
            let (sh, ch) = (x.sinh(), x.cosh());
            // sin u and cos u come from the gap form near u = π
            let sinh_s = Complex64::new(sh * self.cos_u, ch * self.sin_u);
            let cosh_s = Complex64::new(ch * self.cos_u, sh * self.sin_u);
            (s / sinh_s, s * cosh_s / sinh_s)
        } else {
            // e^{-2s} is tiny here, so the exponential forms are stable
            let e2 = (-2.0 * s).exp();
            let one = Complex64::new(1.0, 0.0);
            (2.0 * s * (-s).exp() / (one - e2), s * (one + e2) / (one - e2))
        }
    }

    /// `Re[(s/sinh s) exp(Φ(s) − Φ(iu))]` at `s = x + iu`.
    fn normalized(&self, x: f64) -> f64 {
        let (ratio, s_coth_s) = self.terms(x);
        let exponent = -self.a * (s_coth_s - self.u_cot_u) + Complex64::new(0.0, self.kappa * x);
        (ratio * exponent.exp()).re
    }

    fn log_magnitude(&self, x: f64) -> f64 {
        let (ratio, s_coth_s) = self.terms(x);
        ratio.norm().ln() - self.a * (s_coth_s.re - self.u_cot_u)
    }

    /// Geometric panels from the saddle width out to the truncation point.
    fn panel_edges(&self, quad: &QuadratureSpec, et: f64, alpha: f64) -> Vec<f64> {
        let width = if self.a * self.curvature > 0.0 {
            1.0 / (self.a * self.curvature).sqrt()
        } else {
            1.0
        };
        let mut w0 = width.min(1.0);
        if self.u > 0.5 * PI {
            w0 = w0.min(self.gap);
        }
        w0 *= 0.5;
        let peak = self.log_magnitude(0.0);
        let floor = peak - quad.tail_log_ratio;
        let mut x_max = w0;
        let mut below = 0;
        while below < 2 && x_max < 1e4 {
            x_max *= 2.0;
            if self.log_magnitude(x_max) < floor {
                below += 1;
            } else {
                below = 0;
            }
        }
        if let Some(lmax) = quad.lambda_max {
            // λ = s / (2αεt)
            x_max = x_max.min(lmax * 2.0 * alpha * et).max(w0);
        }
        // at most ~2 oscillations of e^{iκx} per panel
        let max_width = if self.kappa > 0.0 {
            (4.0 * PI / self.kappa).max(w0)
        } else {
            f64::INFINITY
        };
        let mut edges = vec![0.0];
        let mut lo = 0.0;
        let mut hi = w0;
        loop {
            let hi_c = hi.min(x_max);
            let n = quad.panels.max(((hi_c - lo) / max_width).ceil() as usize);
            for k in 1..=n {
                edges.push(lo + (hi_c - lo) * k as f64 / n as f64);
            }
            if hi >= x_max {
                break;
            }
            lo = hi;
            hi *= 2.0;
        }
        edges
    }
}

fn bisect_panels(edges: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * edges.len());
    out.push(edges[0]);
    for pair in edges.windows(2) {
        out.push(0.5 * (pair[0] + pair[1]));
        out.push(pair[1]);
    }
    out
}

/// `p_{t,ε}(0, q)` by contour quadrature.
pub fn kernel_origin(
    q: GroupPoint,
    t: f64,
    epsilon: f64,
    alpha: f64,
    quad: &QuadratureSpec,
) -> Result<f64> {
    KernelEvaluator::new(t, epsilon, alpha, *quad)?.density(q)
}

/// `p_{t,ε}(q0, q) = p_{t,ε}(0, q0⁻¹·q)`.
pub fn kernel(
    q0: GroupPoint,
    q: GroupPoint,
    t: f64,
    epsilon: f64,
    alpha: f64,
    quad: &QuadratureSpec,
) -> Result<f64> {
    kernel_origin(relative(q0, q, alpha), t, epsilon, alpha, quad)
}

/// `−2tε ln p_{t,ε}(0, q)`, which tends to `d²_SR(0, q)` as `ε → 0`.
pub fn varadhan_rate(
    q: GroupPoint,
    t: f64,
    epsilon: f64,
    alpha: f64,
    quad: &QuadratureSpec,
) -> Result<f64> {
    let ev = KernelEvaluator::new(t, epsilon, alpha, *quad)?;
    Ok(-2.0 * t * epsilon * ev.log_density(q.x * q.x + q.y * q.y, q.z)?)
}

/// Leading Gaussian exponent `−d²(ρ, z)/(2εt)` of the log-kernel for a formula.
pub fn leading_exponent(
    rho_sq: f64,
    z: f64,
    t: f64,
    epsilon: f64,
    alpha: f64,
    formula: KernelFormula,
) -> f64 {
    let z_eff = match formula {
        KernelFormula::Exact => z,
        KernelFormula::Printed => 2.0 * alpha * z,
    };
    -distance::DistanceProfile::global().distance_sq(rho_sq, z_eff, alpha, DistanceConvention::Kernel)
        / (2.0 * epsilon * t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(t: f64, eps: f64) -> KernelEvaluator {
        KernelEvaluator::new(t, eps, 0.25, QuadratureSpec::default()).unwrap()
    }

    /// Brute-force trapezoid along the real λ axis, independent of the contour.
    fn real_axis_density(rho_sq: f64, z: f64, t: f64, eps: f64, alpha: f64) -> f64 {
        let et = eps * t;
        let n = 400_000;
        let s_max = 60.0;
        let h = s_max / n as f64;
        let a = rho_sq / (2.0 * et);
        let kappa = z / (2.0 * alpha * et);
        let mut acc = 0.5 * (-a).exp();
        for k in 1..=n {
            let s = k as f64 * h;
            let v = s / s.sinh() * (-a * s / s.tanh()).exp() * (kappa * s).cos();
            acc += if k == n { 0.5 * v } else { v };
        }
        2.0 * acc * h / (8.0 * PI * PI * alpha * et * et)
    }

    #[test]
    fn matches_real_axis_integration() {
        for &(rho_sq, z, t, eps) in &[
            (0.0, 0.0, 0.5, 1.0),
            (1.0, 0.0, 0.5, 1.0),
            (0.5, 0.2, 0.5, 1.0),
            (0.2, 0.6, 1.0, 1.0),
            (2.0, -0.4, 0.25, 1.0),
            (0.01, 0.3, 0.5, 1.0),
            (0.25, 1.0, 0.5, 1.0),
            (0.5, 0.6, 0.5, 1.0),
            (0.04, 1.2, 1.0, 1.0),
        ] {
            let got = ev(t, eps).log_density(rho_sq, z).unwrap().exp();
            let want = real_axis_density(rho_sq, z.abs(), t, eps, 0.25);
            assert!(
                ((got - want) / want).abs() < 1e-7,
                "rho_sq={rho_sq} z={z}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn residue_and_contour_paths_agree_at_the_switch() {
        // κ = 2 is the switch point; t = 0.5, ε = 1, α = 1/4 gives κ = 4|z|
        let e = ev(0.5, 1.0);
        for rho_sq in [0.0004, 0.04, 0.3] {
            let below = e.log_density(rho_sq, 0.5 * (1.0 - 1e-12)).unwrap();
            let above = e.log_density(rho_sq, 0.5 * (1.0 + 1e-12)).unwrap();
            assert!((below - above).abs() < 1e-8, "rho_sq={rho_sq}: {below} vs {above}");
        }
    }

    #[test]
    fn vertical_axis_matches_closed_form_limit() {
        // the contour path with a tiny planar offset approaches the A = 0 closed form
        let e = ev(0.5, 1.0);
        for z in [0.05, 0.3, 1.0, 3.0] {
            let closed = e.log_density(0.0, z).unwrap();
            let near = e.log_density(1e-14, z).unwrap();
            assert!((closed - near).abs() < 1e-6, "z={z}: {closed} vs {near}");
        }
    }

    #[test]
    fn origin_value_closed_form() {
        // p(0) = (π²/2)/(8π²αε²t²) = 1/(16 α ε² t²)
        let e = ev(0.5, 1.0);
        let p0 = e.log_density(0.0, 0.0).unwrap().exp();
        assert!((p0 - 1.0 / (16.0 * 0.25 * 0.25)).abs() < 1e-12);
    }

    #[test]
    fn symmetries_bitwise() {
        let e = ev(0.5, 1.0);
        let a = e.density(GroupPoint::new(0.7, -0.3, 0.4)).unwrap();
        let b = e.density(GroupPoint::new(0.7, -0.3, -0.4)).unwrap();
        assert_eq!(a, b);
        let a = e.density(GroupPoint::new(1.0, 0.0, 0.2)).unwrap();
        let b = e.density(GroupPoint::new(0.0, 1.0, 0.2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn printed_formula_is_rescaled_exact_kernel() {
        let q = QuadratureSpec::default();
        let exact = KernelEvaluator::new(0.5, 1.0, 0.25, q).unwrap();
        let printed = KernelEvaluator::with_formula(0.5, 1.0, 0.25, q, KernelFormula::Printed).unwrap();
        let lp = printed.log_density(0.4, 0.8).unwrap();
        let le = exact.log_density(0.4, 2.0 * 0.25 * 0.8).unwrap() - 2.0 * (0.5f64).ln();
        assert!((lp - le).abs() < 1e-12);
    }

    #[test]
    fn unit_mass_by_cylindrical_quadrature() {
        let e = ev(0.5, 1.0);
        let gl = GaussLegendre::new(20);
        let rho_edges: Vec<f64> = (0..=24).map(|k| k as f64 * 0.35).collect();
        let z_edges: Vec<f64> = (0..=24).map(|k| k as f64 * 0.15).collect();
        let mass: f64 = gl.integrate_panels(&rho_edges, |r| {
            let inner: f64 = gl.integrate_panels(&z_edges, |z| e.log_density(r * r, z).unwrap().exp());
            2.0 * PI * r * 2.0 * inner
        });
        assert!((mass - 1.0).abs() < 1e-6, "mass {mass}");
    }

    #[test]
    fn deep_tail_is_finite_and_ordered() {
        let e = ev(1.0, 0.01);
        let mut prev = f64::INFINITY;
        for z in [0.0, 0.5, 2.0, 8.0, 20.0] {
            let l = e.log_density(0.3 * 0.3, z).unwrap();
            assert!(l.is_finite());
            assert!(l < prev);
            prev = l;
        }
        let far = e.log_density(150.0, 25.0).unwrap();
        assert!(far.is_finite() && far < -7000.0);
    }

    #[test]
    fn leading_term_tracks_log_density() {
        // ln p + d²/(2εt) stays O(ln ε) even where ln p itself is in the thousands
        let e = ev(1.0, 0.01);
        for &(r2, z) in &[(1.0, 0.0), (4.0, 1.0), (0.25, 3.0), (9.0, 12.0)] {
            let rem = e.log_density(r2, z).unwrap() - leading_exponent(r2, z, 1.0, 0.01, 0.25, KernelFormula::Exact);
            assert!(rem.abs() < 20.0, "remainder {rem} at ({r2}, {z})");
        }
    }
}
