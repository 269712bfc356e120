//! Sinkhorn / IPFP iteration for the Schrödinger system with ε-annealing.
//!
//! Potentials are carried as logarithms. One iteration is
//!
//! ```text
//! ln φ̂₀ ← ln ρ₀ − ln Q(φ_f)
//! ln φ_f ← ln ρ_f − ln P(φ̂₀)
//! ```
//!
//! followed by a shift making `max ln φ_f = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FieldKind, ScalarField};
use crate::numeric::pairwise_sum;
use crate::operator::LogOperator;

/// How the first iterate of each ε after the first is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmStart {
    /// Linear extrapolation in ε of the dual potential `ε ln φ_f` through the
    /// two previous solves; the previous `φ_f` when only one is available.
    #[default]
    Extrapolated,
    /// The previous ε's converged `φ_f`, unchanged.
    Previous,
    /// `φ_f^{ε_prev / ε}`: the previous dual potential `ε ln φ_f` held fixed.
    DualRescaled,
    /// All-ones start for every ε.
    Cold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornConfig {
    pub epsilon_schedule: Vec<f64>,
    pub tol: f64,
    pub max_iters: usize,
    pub marginal_tol: f64,
    pub warm_start: WarmStart,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon_schedule: vec![1.0, 0.5, 0.1, 0.01],
            tol: 1e-8,
            max_iters: 5000,
            marginal_tol: 1e-6,
            warm_start: WarmStart::Extrapolated,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.epsilon_schedule;
        if s.is_empty() || s.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(Error::Config("epsilon_schedule must be non-empty and positive".into()));
        }
        if s.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("epsilon_schedule must be strictly decreasing".into()));
        }
        if !(self.tol > 0.0) || !(self.marginal_tol > 0.0) || self.max_iters == 0 {
            return Err(Error::Config("tol, marginal_tol and max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// Converged pair `(φ̂₀, φ_f)` for one ε, stored as logarithms.
#[derive(Debug, Clone, PartialEq)]
pub struct Potentials {
    pub epsilon: f64,
    pub log_phi_f: ScalarField,
    pub log_phihat_0: ScalarField,
    pub iterations: usize,
    pub hilbert_residuals: Vec<f64>,
    /// L¹ errors of the `ρ₀` and `ρ_f` marginals of the returned pair.
    pub marginal_errors: (f64, f64),
    pub warm_started: bool,
}

impl Potentials {
    pub fn phi_f(&self) -> ScalarField {
        self.log_phi_f.map(FieldKind::Potential, f64::exp)
    }

    pub fn phihat_0(&self) -> ScalarField {
        self.log_phihat_0.map(FieldKind::Potential, f64::exp)
    }

    /// Geometric-mean contraction factor of the Hilbert residual over the last `window` iterations.
    pub fn tail_contraction(&self, window: usize) -> Option<f64> {
        let r = &self.hilbert_residuals;
        if r.len() < window + 1 || window == 0 {
            return None;
        }
        let a = r[r.len() - 1 - window];
        let b = r[r.len() - 1];
        if a > 0.0 && b > 0.0 {
            Some((b / a).powf(1.0 / window as f64))
        } else {
            None
        }
    }
}

/// `log max(u/v) − log min(u/v)`.
pub fn hilbert_metric(u: &ScalarField, v: &ScalarField) -> Result<f64> {
    if u.values.len() != v.values.len() {
        return Err(Error::InvalidArgument("fields differ in length".into()));
    }
    if u.values.iter().chain(&v.values).any(|x| !(*x > 0.0)) {
        return Err(Error::InvalidArgument("Hilbert metric needs strictly positive fields".into()));
    }
    let lu: Vec<f64> = u.values.iter().map(|x| x.ln()).collect();
    let lv: Vec<f64> = v.values.iter().map(|x| x.ln()).collect();
    Ok(hilbert_metric_log(&lu, &lv))
}

/// Hilbert metric between `exp(lu)` and `exp(lv)`.
pub fn hilbert_metric_log(lu: &[f64], lv: &[f64]) -> f64 {
    let mut hi = f64::NEG_INFINITY;
    let mut lo = f64::INFINITY;
    for (a, b) in lu.iter().zip(lv) {
        let d = a - b;
        hi = hi.max(d);
        lo = lo.min(d);
    }
    hi - lo
}

fn log_of(field: &ScalarField) -> Vec<f64> {
    field.values.iter().map(|v| v.ln()).collect()
}

fn check_denominator(log_den: &[f64]) -> Result<()> {
    if let Some((index, v)) = log_den.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::DivisionUnderflow { index, value: v.exp() });
    }
    Ok(())
}

/// `ln φ̂₀ = ln ρ₀ − ln Q φ_f` and `ln φ_f' = ln ρ_f − ln P φ̂₀` (log-domain half-steps).
pub fn sinkhorn_step_log<O: LogOperator>(
    log_phi_f: &[f64],
    log_rho_0: &[f64],
    log_rho_f: &[f64],
    op: &O,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let q = op.apply_q_log(log_phi_f);
    check_denominator(&q)?;
    let h: Vec<f64> = log_rho_0.iter().zip(&q).map(|(r, q)| r - q).collect();
    let p = op.apply_p_log(&h);
    check_denominator(&p)?;
    let f: Vec<f64> = log_rho_f.iter().zip(&p).map(|(r, p)| r - p).collect();
    Ok((h, f))
}

/// One alternating step on positive fields: `φ̂₀ = ρ₀ / Q φ_f`, `φ_f' = ρ_f / P φ̂₀`.
pub fn sinkhorn_step<O: LogOperator>(
    phi_f: &ScalarField,
    rho_0: &ScalarField,
    rho_f: &ScalarField,
    op: &O,
) -> Result<(ScalarField, ScalarField)> {
    let (h, f) = sinkhorn_step_log(&log_of(phi_f), &log_of(rho_0), &log_of(rho_f), op)?;
    let to_field = |v: Vec<f64>| ScalarField {
        grid: phi_f.grid,
        values: v.into_iter().map(f64::exp).collect(),
        kind: FieldKind::Potential,
    };
    Ok((to_field(h), to_field(f)))
}

fn marginal_l1(log_a: &[f64], log_b: &[f64], target: &[f64], w: f64) -> f64 {
    let d: Vec<f64> = log_a
        .iter()
        .zip(log_b)
        .zip(target)
        .map(|((a, b), t)| ((a + b).exp() - t).abs())
        .collect();
    pairwise_sum(&d) * w
}

/// Iterate to the fixed point for one ε starting from `ln φ_f = init`.
pub fn solve_single<O: LogOperator>(
    epsilon: f64,
    rho_0: &ScalarField,
    rho_f: &ScalarField,
    op: &O,
    config: &SinkhornConfig,
    init: Option<&[f64]>,
) -> Result<Potentials> {
    let n = op.len();
    if rho_0.values.len() != n || rho_f.values.len() != n {
        return Err(Error::InvalidArgument("densities do not match the operator".into()));
    }
    let w = op.cell_weight();
    let lr0 = log_of(rho_0);
    let lrf = log_of(rho_f);
    let mut lf: Vec<f64> = match init {
        Some(v) => v.to_vec(),
        None => vec![0.0; n],
    };
    let mut residuals = Vec::new();
    for it in 1..=config.max_iters {
        let (h, mut f_next) = sinkhorn_step_log(&lf, &lr0, &lrf, op)?;
        // ρ₀-marginal of (h, lf) is exact; its ρ_f-marginal is lf + ln P h = lf + lrf − f_next.
        let err_f = {
            let d: Vec<f64> = lf
                .iter()
                .zip(&f_next)
                .zip(rho_f.values.iter().zip(&lrf))
                .map(|((a, b), (t, lt))| ((a + lt - b).exp() - t).abs())
                .collect();
            pairwise_sum(&d) * w
        };
        let shift = f_next.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for v in &mut f_next {
            *v -= shift;
        }
        let res = hilbert_metric_log(&f_next, &lf);
        if !res.is_finite() {
            return Err(Error::NonConvergence {
                epsilon,
                iterations: it,
                residual: res,
                trace: residuals,
            });
        }
        residuals.push(res);
        if res <= config.tol && err_f <= config.marginal_tol {
            let err_0 = {
                let q = op.apply_q_log(&lf);
                marginal_l1(&h, &q, &rho_0.values, w)
            };
            return Ok(Potentials {
                epsilon,
                log_phi_f: ScalarField { grid: rho_0.grid, values: lf, kind: FieldKind::LogPotential },
                log_phihat_0: ScalarField { grid: rho_0.grid, values: h, kind: FieldKind::LogPotential },
                iterations: it,
                hilbert_residuals: residuals,
                marginal_errors: (err_0, err_f),
                warm_started: init.is_some(),
            });
        }
        lf = f_next;
    }
    let residual = residuals.last().copied().unwrap_or(f64::INFINITY);
    Err(Error::NonConvergence { epsilon, iterations: config.max_iters, residual, trace: residuals })
}

/// Outcome of an annealed solve: every completed ε plus the failure, if any.
#[derive(Debug)]
pub struct ScheduleOutcome {
    pub potentials: Vec<Potentials>,
    pub failure: Option<Error>,
}

/// First iterate for `eps` given the solves completed so far.
pub fn warm_start(kind: WarmStart, done: &[Potentials], eps: f64) -> Option<Vec<f64>> {
    let prev = done.last()?;
    match kind {
        WarmStart::Cold => None,
        WarmStart::Extrapolated if done.len() >= 2 => {
            let older = &done[done.len() - 2];
            let (e1, e2) = (prev.epsilon, older.epsilon);
            let init = prev
                .log_phi_f
                .values
                .iter()
                .zip(&older.log_phi_f.values)
                .map(|(a, b)| {
                    let (d1, d2) = (e1 * a, e2 * b);
                    (d1 + (eps - e1) * (d1 - d2) / (e1 - e2)) / eps
                })
                .collect();
            Some(init)
        }
        WarmStart::Extrapolated | WarmStart::Previous => Some(prev.log_phi_f.values.clone()),
        WarmStart::DualRescaled => {
            let s = prev.epsilon / eps;
            Some(prev.log_phi_f.values.iter().map(|v| v * s).collect())
        }
    }
}

/// Run the ε schedule in order; `operator_for(ε)` supplies the `t_f` operator.
pub fn solve_schrodinger<O, F>(
    rho_0: &ScalarField,
    rho_f: &ScalarField,
    config: &SinkhornConfig,
    mut operator_for: F,
) -> Result<ScheduleOutcome>
where
    O: LogOperator,
    F: FnMut(f64) -> Result<O>,
{
    config.validate()?;
    let mut done: Vec<Potentials> = Vec::new();
    for &eps in &config.epsilon_schedule {
        let op = operator_for(eps)?;
        let init = warm_start(config.warm_start, &done, eps);
        match solve_single(eps, rho_0, rho_f, &op, config, init.as_deref()) {
            Ok(p) => {
                log::info!("epsilon {eps}: converged in {} iterations", p.iterations);
                done.push(p);
            }
            Err(e) => {
                return Ok(ScheduleOutcome { potentials: done, failure: Some(e) });
            }
        }
    }
    Ok(ScheduleOutcome { potentials: done, failure: None })
}
