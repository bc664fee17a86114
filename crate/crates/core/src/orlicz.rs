//! Norms and functionals: L2, Dirichlet energy, the Luxemburg norm by
//! monotone bisection on the log of the defining integral, the refined
//! exponential functional, and the auxiliary two-scale integral. All
//! comparisons against the threshold happen in log space, so near-critical
//! Moser data never overflows.

use crate::error::CcxError;
use crate::field::Field;
use crate::geom::LogSum;
use crate::quad::{dirichlet_energy_raw, CellField, QuadratureSpec, Region};
use crate::Result;
use serde::{Deserialize, Serialize};

/// Parameters of the Luxemburg norm solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrliczConfig {
    /// The constant the defining integral is compared against.
    pub threshold: f64,
    /// Relative tolerance of the bisection bracket.
    pub rel_tol: f64,
    pub max_iters: usize,
}

impl Default for OrliczConfig {
    fn default() -> Self {
        OrliczConfig {
            threshold: 1.0,
            rel_tol: 1e-6,
            max_iters: 200,
        }
    }
}

impl OrliczConfig {
    pub fn with_threshold(kappa: f64) -> Self {
        OrliczConfig {
            threshold: kappa,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) || !(self.rel_tol > 0.0) || self.rel_tol > 1e-4 {
            return Err(CcxError::DomainError("orlicz config".into()));
        }
        Ok(())
    }
}

/// `log(e^{s^2} - 1)` for `s = |u| / lambda`, stable for tiny and huge `s`.
fn log_phi_term(u: f64, lambda: f64) -> Option<f64> {
    if u == 0.0 {
        return None;
    }
    let s = u / lambda;
    let q = s * s;
    if q < 1e-8 {
        Some(q.ln() + (0.5 * q).ln_1p())
    } else if q < 30.0 {
        Some(q.exp_m1().ln())
    } else {
        Some(q + (-(-q).exp()).ln_1p())
    }
}

/// log of the Luxemburg integral `int (e^{(u/lambda)^2} - 1) dx` over cells.
pub fn log_phi(cells: &CellField, lambda: f64) -> f64 {
    cells.log_integral(|u| log_phi_term(u.abs(), lambda))
}

pub fn l2_norm(field: &Field, spec: &QuadratureSpec) -> Result<f64> {
    let cells = CellField::sample(field, spec, &Region::All)?;
    l2_norm_cells(&cells)
}

pub fn l2_norm_cells(cells: &CellField) -> Result<f64> {
    let mut acc = LogSum::new();
    for c in &cells.cells {
        if c.value != 0.0 {
            acc.add(2.0 * c.value.abs().ln() + c.log_w);
        }
    }
    let l = acc.log_total();
    if l == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    if l > 709.0 {
        return Err(CcxError::OverflowDominant);
    }
    Ok((0.5 * l).exp())
}

pub fn dirichlet_energy(field: &Field, spec: &QuadratureSpec) -> Result<f64> {
    dirichlet_energy_raw(field, spec, &Region::All)
}

/// Least `lambda` with `int_region (e^{(|u|/lambda)^2} - 1) <= kappa`, by
/// bisection from the L2 lower bracket; the admissible (upper) end of the
/// final bracket is returned, so the L2 lower bound holds exactly.
pub fn orlicz_norm(field: &Field, cfg: &OrliczConfig, spec: &QuadratureSpec) -> Result<f64> {
    orlicz_norm_region(field, cfg, spec, &Region::All)
}

pub fn orlicz_norm_region(
    field: &Field,
    cfg: &OrliczConfig,
    spec: &QuadratureSpec,
    region: &Region,
) -> Result<f64> {
    let cells = CellField::sample(field, spec, region)?;
    orlicz_norm_cells(&cells, cfg)
}

pub fn orlicz_norm_cells(cells: &CellField, cfg: &OrliczConfig) -> Result<f64> {
    cfg.validate()?;
    if cells.sup_abs() == 0.0 {
        return Ok(0.0);
    }
    let kappa = cfg.threshold;
    let log_kappa = kappa.ln();
    let l2 = l2_norm_cells(cells)?;
    let mut lo = l2 / kappa.sqrt();
    if !(lo > 0.0) {
        return Ok(0.0);
    }
    // Phi(lo) >= kappa holds cellwise (e^x - 1 >= x), so bisect upward.
    let mut hi = lo;
    let mut evals: Vec<(f64, f64)> = Vec::new();
    let mut phi_hi = log_phi(cells, hi);
    evals.push((hi, phi_hi));
    let mut guard = 0;
    while phi_hi > log_kappa {
        hi *= 2.0;
        phi_hi = log_phi(cells, hi);
        evals.push((hi, phi_hi));
        guard += 1;
        if guard > 200 {
            return Err(CcxError::NoConvergence(guard));
        }
    }
    if hi > lo {
        let mut iters = 0;
        while (hi - lo) / hi > cfg.rel_tol {
            iters += 1;
            if iters > cfg.max_iters {
                return Err(CcxError::NoConvergence(cfg.max_iters));
            }
            let mid = 0.5 * (lo + hi);
            let p = log_phi(cells, mid);
            evals.push((mid, p));
            if p > log_kappa {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    // Phi must be nonincreasing in lambda at every evaluated pair.
    evals.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    for w in evals.windows(2) {
        debug_assert!(
            w[1].1 <= w[0].1 + 1e-9,
            "Luxemburg objective not monotone: {:?} -> {:?}",
            w[0],
            w[1]
        );
    }
    Ok(hi)
}

/// `int (e^{4 pi u^2} - 1) / (1 + u^2) dx` and its ratio to `|u|_L2^2`.
/// Caller-checked gradient constraint: energy must not exceed 1.
pub fn tm_refined_functional(field: &Field, spec: &QuadratureSpec) -> Result<(f64, f64)> {
    let energy = dirichlet_energy(field, spec)?;
    if energy > 1.0 + 1e-6 {
        return Err(CcxError::GradientConstraintViolated(energy));
    }
    let cells = CellField::sample(field, spec, &Region::All)?;
    let four_pi = 4.0 * std::f64::consts::PI;
    let log_val = cells.log_integral(|u| {
        if u == 0.0 {
            return None;
        }
        let q = four_pi * u * u;
        let num = if q < 1e-8 {
            q.ln() + (0.5 * q).ln_1p()
        } else if q < 30.0 {
            q.exp_m1().ln()
        } else {
            q + (-(-q).exp()).ln_1p()
        };
        Some(num - (u * u).ln_1p())
    });
    if log_val > 709.0 {
        return Err(CcxError::OverflowDominant);
    }
    let value = if log_val == f64::NEG_INFINITY {
        0.0
    } else {
        log_val.exp()
    };
    let l2 = l2_norm_cells(&cells)?;
    let ratio = if l2 == 0.0 { 0.0 } else { value / (l2 * l2) };
    Ok((value, ratio))
}

/// The two-scale auxiliary integral
/// `K = e^{p alpha} int_{e^{-beta}}^{e^{-alpha}} e^{q log^2 r / beta} r dr`,
/// computed in log space through the substitution `r = e^{-t}`.
pub fn variant_integral(p: f64, q: f64, alpha: f64, beta: f64) -> Result<f64> {
    if !(p > 0.0 && p < 2.0) || !(q > 0.0 && q < 2.0) {
        return Err(CcxError::DomainError(format!("p = {p}, q = {q}")));
    }
    if !(alpha > 0.0) || !(beta > 0.0) {
        return Err(CcxError::DomainError("alpha, beta must be positive".into()));
    }
    if alpha >= beta {
        return Ok(0.0);
    }
    // K = int_alpha^beta exp(p alpha + q t^2 / beta - 2 t) dt
    let n = 4000usize;
    let gx = [
        -0.861136311594053,
        -0.339981043584856,
        0.339981043584856,
        0.861136311594053,
    ];
    let gw = [
        0.347854845137454,
        0.652145154862546,
        0.652145154862546,
        0.347854845137454,
    ];
    let mut acc = LogSum::new();
    for k in 0..n {
        let a = alpha + (beta - alpha) * k as f64 / n as f64;
        let b = alpha + (beta - alpha) * (k + 1) as f64 / n as f64;
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        for j in 0..4 {
            let t = mid + half * gx[j];
            acc.add(p * alpha + q * t * t / beta - 2.0 * t + (gw[j] * half).ln());
        }
    }
    let l = acc.log_total();
    if l > 709.0 {
        return Err(CcxError::OverflowDominant);
    }
    Ok(if l == f64::NEG_INFINITY { 0.0 } else { l.exp() })
}
