//! Schwarz symmetric-decreasing rearrangement. Cell samples of the field are
//! sorted by value and their measures accumulated in log space, so level sets
//! of measure `e^{-2 alpha}` with `alpha` in the hundreds survive the sort
//! exactly; the inverse of the measure function is then sampled on a
//! log-radius grid covering every scale present in the input.

use crate::field::Field;
use crate::geom::{LogSum, Point2};
use crate::orlicz::{orlicz_norm_cells, OrliczConfig};
use crate::quad::{superlevel_measure, Cell, CellField, QuadratureSpec, Region};
use crate::Result;
use serde::{Deserialize, Serialize};

/// A radial nonincreasing function sampled on a log-radius grid:
/// `s_k = -log r_k` ascending, values nondecreasing in `s`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RadialDecreasing {
    pub log_radii: Vec<f64>,
    pub values: Vec<f64>,
}

impl RadialDecreasing {
    /// Value at log-radius `s = -log r`: piecewise linear between samples,
    /// zero outside the support, constant past the deepest sample.
    pub fn eval_s(&self, s: f64) -> f64 {
        let n = self.log_radii.len();
        if n == 0 || s < self.log_radii[0] {
            return 0.0;
        }
        if s >= self.log_radii[n - 1] {
            return self.values[n - 1];
        }
        let k = match self
            .log_radii
            .binary_search_by(|g| g.partial_cmp(&s).unwrap())
        {
            Ok(i) => return self.values[i],
            Err(i) => i - 1,
        };
        let (s0, s1) = (self.log_radii[k], self.log_radii[k + 1]);
        let t = (s - s0) / (s1 - s0);
        self.values[k] * (1.0 - t) + self.values[k + 1] * t
    }

    pub fn eval_r(&self, r: f64) -> f64 {
        if r <= 0.0 {
            return *self.values.last().unwrap_or(&0.0);
        }
        self.eval_s(-r.ln())
    }

    pub fn sup(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(*v))
    }

    /// Measure of `{u* > t}` (exact for the sampled staircase).
    pub fn distribution(&self, t: f64) -> f64 {
        let n = self.log_radii.len();
        if n == 0 || t >= self.values[n - 1] {
            // above the deep plateau: nothing (values nondecreasing in s)
            if n > 0 && t < self.values[n - 1] {
                // unreachable; kept for clarity
            }
            return 0.0;
        }
        if t < self.values[0] {
            // the whole support disk
            return std::f64::consts::PI * (-2.0 * self.log_radii[0]).exp();
        }
        // find the crossing s* with v(s*) = t; v nondecreasing in s
        let mut lo = 0usize;
        let mut hi = n - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.values[mid] > t {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let (v0, v1) = (self.values[lo], self.values[hi]);
        let s = if v1 > v0 {
            let f = (t - v0) / (v1 - v0);
            self.log_radii[lo] * (1.0 - f) + self.log_radii[hi] * f
        } else {
            self.log_radii[hi]
        };
        std::f64::consts::PI * (-2.0 * s).exp()
    }

    /// `2 pi int v'(s)^2 ds` -- the Dirichlet energy of the radial profile.
    pub fn dirichlet_energy(&self) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.log_radii.len().saturating_sub(1) {
            let ds = self.log_radii[k + 1] - self.log_radii[k];
            if ds > 0.0 {
                let dv = self.values[k + 1] - self.values[k];
                acc += dv * dv / ds;
            }
        }
        std::f64::consts::TAU * acc
    }

    /// 1-D cells `(log weight, value)` equivalent to the radial function,
    /// reusing the same accumulation machinery as planar fields.
    fn to_cells(&self) -> CellField {
        let mut cells = Vec::new();
        let n = self.log_radii.len();
        // Gauss-Legendre 4 per interval, intervals subdivided to <= 1/4 nat
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
        for k in 0..n.saturating_sub(1) {
            let (a, b) = (self.log_radii[k], self.log_radii[k + 1]);
            if !(b > a) {
                continue;
            }
            let m = (((b - a) / 0.25).ceil() as usize).clamp(1, 64);
            for q in 0..m {
                let pa = a + (b - a) * q as f64 / m as f64;
                let pb = a + (b - a) * (q + 1) as f64 / m as f64;
                let half = 0.5 * (pb - pa);
                let mid = 0.5 * (pa + pb);
                for j in 0..4 {
                    let s = mid + half * gx[j];
                    cells.push(Cell {
                        log_w: std::f64::consts::TAU.ln() - 2.0 * s + (gw[j] * half).ln(),
                        value: self.eval_s(s),
                        patch: 0,
                        log_r: -s,
                        theta: 0.0,
                    });
                }
            }
        }
        // deep plateau past the last sample
        if n > 0 {
            let s_end = self.log_radii[n - 1];
            cells.push(Cell {
                log_w: std::f64::consts::PI.ln() - 2.0 * s_end,
                value: self.values[n - 1],
                patch: 0,
                log_r: -s_end,
                theta: 0.0,
            });
        }
        CellField {
            cells,
            centers: vec![Point2::ORIGIN],
        }
    }

    pub fn l2_norm(&self) -> f64 {
        let cells = self.to_cells();
        crate::orlicz::l2_norm_cells(&cells).unwrap_or(0.0)
    }

    pub fn orlicz_norm(&self, cfg: &OrliczConfig) -> Result<f64> {
        let cells = self.to_cells();
        orlicz_norm_cells(&cells, cfg)
    }
}

/// Lebesgue measure of the superlevel set `{ |u| > t }`.
pub fn distribution_function(field: &Field, t: f64, spec: &QuadratureSpec) -> Result<f64> {
    superlevel_measure(field, spec, &Region::All, t)
}

/// Symmetric decreasing rearrangement: sort sampled `(value, log-measure)`
/// pairs, accumulate measure in log space, and invert onto a log-radius grid.
pub fn schwarz_rearrange(field: &Field, spec: &QuadratureSpec) -> Result<RadialDecreasing> {
    let cells = CellField::sample_refined(field, spec, &Region::All, 2)?;
    schwarz_from_cells(&cells)
}

pub fn schwarz_from_cells(cells: &CellField) -> Result<RadialDecreasing> {
    let mut pairs: Vec<(f64, f64)> = cells
        .cells
        .iter()
        .filter(|c| c.value.abs() > 0.0)
        .map(|c| (c.value.abs(), c.log_w))
        .collect();
    if pairs.is_empty() {
        return Ok(RadialDecreasing {
            log_radii: vec![0.0, 1.0],
            values: vec![0.0, 0.0],
        });
    }
    // descending by value; ties collapse via the shared cumulative measure
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let log_pi = std::f64::consts::PI.ln();
    let mut acc = LogSum::new();
    // walk from the top value outward; emit samples whenever the radius
    // has advanced enough, keeping the output grid a few thousand points
    let mut rev: Vec<(f64, f64)> = Vec::with_capacity(4096);
    let mut last_s = f64::INFINITY;
    let n = pairs.len();
    for (i, (v, lw)) in pairs.iter().enumerate() {
        acc.add(*lw);
        // emit after the measure for this value level is complete
        if i + 1 < n && pairs[i + 1].0 == *v {
            continue;
        }
        let s = 0.5 * (log_pi - acc.log_total());
        if s < last_s - 1e-3 || i + 1 == n {
            rev.push((s, *v));
            last_s = s;
        }
    }
    // deepest sample: plateau value at a radius just inside the top cell
    let mut log_radii: Vec<f64> = Vec::with_capacity(rev.len());
    let mut values: Vec<f64> = Vec::with_capacity(rev.len());
    for (s, v) in rev.iter().rev() {
        log_radii.push(*s);
        values.push(*v);
    }
    Ok(RadialDecreasing { log_radii, values })
}

/// A radial nonincreasing sample as a `Field` is not needed; comparisons use
/// the dedicated 1-D norms above. This helper exposes the rearranged field's
/// distribution for equimeasurability checks.
pub fn rearranged_distribution(r: &RadialDecreasing, t: f64) -> f64 {
    r.distribution(t)
}
